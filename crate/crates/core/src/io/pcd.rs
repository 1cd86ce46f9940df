//! PCD v0.7 reader/writer (ASCII and binary little-endian).
//!
//! Required fields are `x y z intensity`; other scalar fields are skipped on
//! read. The capture timestamp travels in a `# timestamp_ns <n>` comment line.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::cloud::{Point3, PointCloud};
use crate::io::IoError;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PcdEncoding {
    Ascii,
    #[default]
    Binary,
}

#[derive(Debug, Clone)]
struct Field {
    name: String,
    size: usize,
    kind: char,
    count: usize,
}

#[derive(Debug)]
struct Header {
    fields: Vec<Field>,
    points: usize,
    encoding: PcdEncoding,
    timestamp_ns: u64,
    data_offset: usize,
}

pub fn write_pcd<T: Real>(cloud: &PointCloud<T>, path: impl AsRef<Path>, encoding: PcdEncoding) -> Result<(), IoError> {
    let path = path.as_ref();
    let bytes = encode_pcd(cloud, encoding);
    fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}

pub fn encode_pcd<T: Real>(cloud: &PointCloud<T>, encoding: PcdEncoding) -> Vec<u8> {
    let n = cloud.len();
    let mut out = Vec::with_capacity(256 + n * 16);
    let data = match encoding {
        PcdEncoding::Ascii => "ascii",
        PcdEncoding::Binary => "binary",
    };
    // Writing into a Vec cannot fail.
    let _ = write!(
        out,
        "# .PCD v0.7 - Point Cloud Data file format\n# timestamp_ns {}\nVERSION 0.7\nFIELDS x y z intensity\nSIZE 4 4 4 4\nTYPE F F F F\nCOUNT 1 1 1 1\nWIDTH {n}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS {n}\nDATA {data}\n",
        cloud.timestamp_ns
    );
    match encoding {
        PcdEncoding::Ascii => {
            for p in &cloud.points {
                let _ = writeln!(out, "{} {} {} {}", p.x.as_f32(), p.y.as_f32(), p.z.as_f32(), p.intensity.as_f32());
            }
        }
        PcdEncoding::Binary => {
            for p in &cloud.points {
                for v in [p.x, p.y, p.z, p.intensity] {
                    out.extend_from_slice(&v.as_f32().to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn read_pcd<T: Real>(path: impl AsRef<Path>) -> Result<PointCloud<T>, IoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    decode_pcd(&bytes)
}

pub fn decode_pcd<T: Real>(bytes: &[u8]) -> Result<PointCloud<T>, IoError> {
    let header = parse_header(bytes)?;
    let idx = |name: &str| header.fields.iter().position(|f| f.name == name);
    let (Some(ix), Some(iy), Some(iz), Some(ii)) = (idx("x"), idx("y"), idx("z"), idx("intensity")) else {
        return Err(IoError::UnsupportedLayout(format!(
            "fields {:?} lack one of x y z intensity",
            header.fields.iter().map(|f| f.name.as_str()).collect::<Vec<_>>()
        )));
    };
    for &i in &[ix, iy, iz, ii] {
        let f = &header.fields[i];
        if f.count != 1 {
            return Err(IoError::UnsupportedLayout(format!("field {} has COUNT {}", f.name, f.count)));
        }
    }
    let body = &bytes[header.data_offset..];
    let rows = match header.encoding {
        PcdEncoding::Ascii => decode_ascii(body, &header)?,
        PcdEncoding::Binary => decode_binary(body, &header)?,
    };
    let mut points = Vec::with_capacity(header.points);
    for (r, row) in rows.chunks(header.fields.len()).enumerate() {
        let p = Point3::new(T::lit(row[ix]), T::lit(row[iy]), T::lit(row[iz]), T::lit(row[ii]));
        if !p.is_valid() {
            return Err(IoError::InvalidValue(format!(
                "point {r}: ({}, {}, {}, intensity {}) outside the accepted domain",
                row[ix], row[iy], row[iz], row[ii]
            )));
        }
        points.push(p);
    }
    Ok(PointCloud::new(points, header.timestamp_ns))
}

fn parse_header(bytes: &[u8]) -> Result<Header, IoError> {
    let mut fields: Vec<String> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    let mut kinds: Vec<char> = Vec::new();
    let mut counts: Option<Vec<usize>> = None;
    let mut width: Option<usize> = None;
    let mut height: usize = 1;
    let mut points: Option<usize> = None;
    let mut timestamp_ns = 0u64;
    let mut pos = 0usize;
    let bad = |m: String| IoError::MalformedHeader(m);
    loop {
        let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(bad("header ended before DATA line".into()));
        };
        let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| bad("non-UTF-8 header".into()))?;
        pos += nl + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let mut it = comment.split_whitespace();
            if it.next() == Some("timestamp_ns") {
                timestamp_ns = it
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(format!("bad timestamp comment: {line}")))?;
            }
            continue;
        }
        let mut it = line.split_whitespace();
        let key = it.next().unwrap_or_default();
        let rest: Vec<&str> = it.collect();
        let nums = |rest: &[&str]| -> Result<Vec<usize>, IoError> {
            rest.iter().map(|v| v.parse::<usize>().map_err(|_| bad(format!("bad {key} entry {v:?}")))).collect()
        };
        match key {
            "VERSION" | "VIEWPOINT" => {}
            "FIELDS" => fields = rest.iter().map(|s| s.to_string()).collect(),
            "SIZE" => sizes = nums(&rest)?,
            "TYPE" => {
                kinds = rest
                    .iter()
                    .map(|s| match *s {
                        "F" | "U" | "I" => Ok(s.chars().next().unwrap()),
                        other => Err(bad(format!("unknown TYPE {other:?}"))),
                    })
                    .collect::<Result<_, _>>()?
            }
            "COUNT" => counts = Some(nums(&rest)?),
            "WIDTH" => width = nums(&rest)?.first().copied(),
            "HEIGHT" => height = nums(&rest)?.first().copied().ok_or_else(|| bad("empty HEIGHT".into()))?,
            "POINTS" => points = nums(&rest)?.first().copied(),
            "DATA" => {
                let encoding = match rest.first().copied() {
                    Some("ascii") => PcdEncoding::Ascii,
                    Some("binary") => PcdEncoding::Binary,
                    Some(other) => return Err(IoError::UnsupportedLayout(format!("DATA {other} not supported"))),
                    None => return Err(bad("DATA without encoding".into())),
                };
                if fields.is_empty() {
                    return Err(bad("missing FIELDS".into()));
                }
                let counts = counts.unwrap_or_else(|| vec![1; fields.len()]);
                if sizes.len() != fields.len() || kinds.len() != fields.len() || counts.len() != fields.len() {
                    return Err(bad("FIELDS/SIZE/TYPE/COUNT lengths differ".into()));
                }
                let mut fs = Vec::with_capacity(fields.len());
                for i in 0..fields.len() {
                    let ok = match kinds[i] {
                        'F' => matches!(sizes[i], 4 | 8),
                        _ => matches!(sizes[i], 1 | 2 | 4 | 8),
                    };
                    if !ok {
                        return Err(IoError::UnsupportedLayout(format!(
                            "field {} has TYPE {} SIZE {}",
                            fields[i], kinds[i], sizes[i]
                        )));
                    }
                    fs.push(Field { name: fields[i].clone(), size: sizes[i], kind: kinds[i], count: counts[i] });
                }
                let points = match (points, width) {
                    (Some(p), _) => p,
                    (None, Some(w)) => w * height,
                    (None, None) => return Err(bad("missing POINTS and WIDTH".into())),
                };
                if let Some(w) = width {
                    if w * height != points {
                        return Err(bad(format!("WIDTH×HEIGHT = {} but POINTS = {points}", w * height)));
                    }
                }
                return Ok(Header { fields: fs, points, encoding, timestamp_ns, data_offset: pos });
            }
            other => return Err(bad(format!("unknown header key {other:?}"))),
        }
    }
}

/// Returns one f64 per field (first element for COUNT > 1 fields), row-major.
fn decode_binary(body: &[u8], h: &Header) -> Result<Vec<f64>, IoError> {
    let rec: usize = h.fields.iter().map(|f| f.size * f.count).sum();
    let available = body.len() / rec.max(1);
    if available < h.points {
        return Err(IoError::Truncated { expected: h.points, found: available });
    }
    let mut out = Vec::with_capacity(h.points * h.fields.len());
    for r in 0..h.points {
        let mut off = r * rec;
        for f in &h.fields {
            out.push(read_scalar(&body[off..off + f.size], f.kind));
            off += f.size * f.count;
        }
    }
    Ok(out)
}

fn read_scalar(b: &[u8], kind: char) -> f64 {
    match (kind, b.len()) {
        ('F', 4) => f32::from_le_bytes(b.try_into().unwrap()) as f64,
        ('F', 8) => f64::from_le_bytes(b.try_into().unwrap()),
        ('U', 1) => b[0] as f64,
        ('U', 2) => u16::from_le_bytes(b.try_into().unwrap()) as f64,
        ('U', 4) => u32::from_le_bytes(b.try_into().unwrap()) as f64,
        ('U', 8) => u64::from_le_bytes(b.try_into().unwrap()) as f64,
        ('I', 1) => b[0] as i8 as f64,
        ('I', 2) => i16::from_le_bytes(b.try_into().unwrap()) as f64,
        ('I', 4) => i32::from_le_bytes(b.try_into().unwrap()) as f64,
        ('I', 8) => i64::from_le_bytes(b.try_into().unwrap()) as f64,
        _ => unreachable!("layout validated in header"),
    }
}

fn decode_ascii(body: &[u8], h: &Header) -> Result<Vec<f64>, IoError> {
    let text = std::str::from_utf8(body).map_err(|_| IoError::InvalidValue("non-UTF-8 ASCII body".into()))?;
    let per_row: usize = h.fields.iter().map(|f| f.count).sum();
    let mut out = Vec::with_capacity(h.points * h.fields.len());
    let mut rows = 0usize;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if rows == h.points {
            break;
        }
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() != per_row {
            return Err(IoError::InvalidValue(format!("row {rows}: expected {per_row} values, got {}", vals.len())));
        }
        let mut k = 0;
        for f in &h.fields {
            let v: f64 = vals[k]
                .parse()
                .map_err(|_| IoError::InvalidValue(format!("row {rows}: cannot parse {:?}", vals[k])))?;
            out.push(v);
            k += f.count;
        }
        rows += 1;
    }
    if rows < h.points {
        return Err(IoError::Truncated { expected: h.points, found: rows });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize) -> PointCloud<f64> {
        let pts = (0..n)
            .map(|i| {
                let f = i as f64;
                Point3::new(f * 0.37 - 20.0, (f * 1.3).sin() * 30.0, f * 0.01 - 2.0, (i % 11) as f64 / 10.0)
            })
            .collect();
        PointCloud::new(pts, 1_650_000_000_123_456_789)
    }

    #[test]
    fn round_trip_both_encodings() {
        let c = sample(1000);
        for enc in [PcdEncoding::Ascii, PcdEncoding::Binary] {
            let back: PointCloud<f64> = decode_pcd(&encode_pcd(&c, enc)).unwrap();
            assert_eq!(back.len(), c.len());
            assert_eq!(back.timestamp_ns, c.timestamp_ns);
            for (a, b) in c.points.iter().zip(&back.points) {
                assert!((a.x - b.x).abs() < 1e-5 * a.x.abs().max(1.0));
                assert!((a.intensity - b.intensity).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn empty_cloud() {
        let c = PointCloud::<f32>::default();
        let bytes = encode_pcd(&c, PcdEncoding::Ascii);
        assert!(String::from_utf8_lossy(&bytes).contains("POINTS 0"));
        assert!(decode_pcd::<f32>(&bytes).unwrap().is_empty());
    }

    #[test]
    fn truncated_binary_and_ascii() {
        let header = "VERSION 0.7\nFIELDS x y z intensity\nSIZE 4 4 4 4\nTYPE F F F F\nCOUNT 1 1 1 1\nWIDTH 10\nHEIGHT 1\nPOINTS 10\nDATA binary\n";
        let mut raw = header.as_bytes().to_vec();
        raw.extend(std::iter::repeat_n(0u8, 5 * 16));
        assert!(matches!(decode_pcd::<f64>(&raw), Err(IoError::Truncated { expected: 10, found: 5 })));

        let ascii = "VERSION 0.7\nFIELDS x y z intensity\nSIZE 4 4 4 4\nTYPE F F F F\nCOUNT 1 1 1 1\nWIDTH 10\nHEIGHT 1\nPOINTS 10\nDATA ascii\n0 0 0 0\n1 1 1 0.5\n2 2 2 1\n3 3 3 0\n4 4 4 0\n";
        assert!(matches!(decode_pcd::<f64>(ascii.as_bytes()), Err(IoError::Truncated { expected: 10, found: 5 })));
    }

    #[test]
    fn distinct_error_kinds() {
        let malformed = "VERSION 0.7\nFIELDS x y z intensity\nSIZE 4 4\nTYPE F F F F\nCOUNT 1 1 1 1\nPOINTS 0\nDATA ascii\n";
        assert!(matches!(decode_pcd::<f64>(malformed.as_bytes()), Err(IoError::MalformedHeader(_))));
        let no_intensity = "VERSION 0.7\nFIELDS x y z\nSIZE 4 4 4\nTYPE F F F\nCOUNT 1 1 1\nPOINTS 0\nDATA ascii\n";
        assert!(matches!(decode_pcd::<f64>(no_intensity.as_bytes()), Err(IoError::UnsupportedLayout(_))));
        let compressed = "VERSION 0.7\nFIELDS x y z intensity\nSIZE 4 4 4 4\nTYPE F F F F\nCOUNT 1 1 1 1\nPOINTS 0\nDATA binary_compressed\n";
        assert!(matches!(decode_pcd::<f64>(compressed.as_bytes()), Err(IoError::UnsupportedLayout(_))));
        let bright = "VERSION 0.7\nFIELDS x y z intensity\nSIZE 4 4 4 4\nTYPE F F F F\nCOUNT 1 1 1 1\nPOINTS 1\nDATA ascii\n0 0 0 3.5\n";
        assert!(matches!(decode_pcd::<f64>(bright.as_bytes()), Err(IoError::InvalidValue(_))));
    }

    #[test]
    fn extra_fields_are_skipped() {
        let text = "VERSION 0.7\nFIELDS x y z intensity ring\nSIZE 4 4 4 4 2\nTYPE F F F F U\nCOUNT 1 1 1 1 1\nWIDTH 2\nHEIGHT 1\nPOINTS 2\nDATA ascii\n1 2 3 0.5 7\n4 5 6 0.25 8\n";
        let c: PointCloud<f64> = decode_pcd(text.as_bytes()).unwrap();
        assert_eq!(c.points[1], Point3::new(4.0, 5.0, 6.0, 0.25));
    }
}

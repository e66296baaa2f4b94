//! File formats: binary NetPBM rasters (PGM masks, PPM color images), the
//! BSQT tensor container, and polygon annotation JSON.
//!
//! BSQT layout: magic "BSQT", u8 version = 1, u8 dtype (0 = f32, 1 = f64),
//! u8 ndim, little-endian u32 dims[ndim], then the row-major payload. All
//! parsers report the byte offset of the first offending byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FeatureField;
use crate::morphology::BinaryMask;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// Byte cursor that tracks its position for parse errors.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::parse(self.pos, message))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return self.fail(format!("unexpected end of file, wanted {n} more bytes"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    // NetPBM token separator: whitespace, with '#' comments running to EOL.
    fn skip_pbm_space(&mut self) {
        loop {
            match self.peek() {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(b) = self.peek() {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => return,
            }
        }
    }

    fn pbm_number(&mut self) -> Result<usize> {
        self.skip_pbm_space();
        let start = self.pos;
        while self.peek().is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return self.fail("expected a decimal number");
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("digits are ASCII");
        text.parse().map_err(|_| Error::parse(start, format!("number out of range: {text}")))
    }
}

fn pbm_header(cur: &mut Cursor, magic: &[u8]) -> Result<(usize, usize)> {
    let got = cur.take(2)?;
    if got != magic {
        return Err(Error::parse(0, format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
    }
    let width = cur.pbm_number()?;
    let height = cur.pbm_number()?;
    let maxval = cur.pbm_number()?;
    if maxval == 0 || maxval > 255 {
        return cur.fail(format!("unsupported maxval {maxval}"));
    }
    if width == 0 || height == 0 {
        return cur.fail(format!("degenerate raster {width}x{height}"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    match cur.take(1)? {
        [b] if b.is_ascii_whitespace() => {}
        _ => return Err(Error::parse(cur.pos - 1, "expected whitespace before payload")),
    }
    Ok((height, width))
}

/// Serialize a mask as binary PGM (P5), 0 for background and 255 for mask.
pub fn pgm_bytes(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.bits().iter().map(|&b| if b != 0 { 255u8 } else { 0 }));
    out
}

pub fn write_pgm(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    write_file(path.as_ref(), &pgm_bytes(mask))
}

/// Parse a binary PGM; any nonzero pixel becomes 1.
pub fn parse_pgm(bytes: &[u8]) -> Result<BinaryMask> {
    let mut cur = Cursor::new(bytes);
    let (height, width) = pbm_header(&mut cur, b"P5")?;
    let payload = cur.take(height * width)?;
    if cur.pos != bytes.len() {
        return cur.fail("trailing bytes after pixel data");
    }
    BinaryMask::from_bytes(height, width, payload)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<BinaryMask> {
    parse_pgm(&read_file(path.as_ref())?)
}

/// Serialize interleaved RGB rows as binary PPM (P6).
pub fn ppm_bytes(height: usize, width: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != 3 * height * width {
        return Err(Error::ShapeMismatch {
            expected: format!("{} RGB bytes", 3 * height * width),
            got: format!("{}", rgb.len()),
        });
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

pub fn write_ppm(path: impl AsRef<Path>, height: usize, width: usize, rgb: &[u8]) -> Result<()> {
    write_file(path.as_ref(), &ppm_bytes(height, width, rgb)?)
}

/// Parse a binary PPM into (height, width, interleaved RGB).
pub fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut cur = Cursor::new(bytes);
    let (height, width) = pbm_header(&mut cur, b"P6")?;
    let payload = cur.take(3 * height * width)?;
    if cur.pos != bytes.len() {
        return cur.fail("trailing bytes after pixel data");
    }
    Ok((height, width, payload.to_vec()))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    parse_ppm(&read_file(path.as_ref())?)
}

const BSQT_MAGIC: &[u8; 4] = b"BSQT";

/// Tensor payload precision inside a BSQT file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BsqtDtype {
    F32,
    F64,
}

/// Serialize a tensor with explicit dims. Checkpoints use f64 so round-trips
/// are bitwise; f32 halves the size for dumps where that matters.
pub fn bsqt_bytes(dims: &[usize], data: &[f64], dtype: BsqtDtype) -> Result<Vec<u8>> {
    let count: usize = dims.iter().product();
    if count != data.len() || dims.is_empty() || dims.len() > u8::MAX as usize {
        return Err(Error::ShapeMismatch {
            expected: format!("dims {dims:?} covering the payload"),
            got: format!("{} values", data.len()),
        });
    }
    if dims.iter().any(|&d| d > u32::MAX as usize) {
        return Err(Error::Config("BSQT dims exceed u32".into()));
    }
    let elem = match dtype {
        BsqtDtype::F32 => 4,
        BsqtDtype::F64 => 8,
    };
    let mut out = Vec::with_capacity(7 + 4 * dims.len() + elem * data.len());
    out.extend_from_slice(BSQT_MAGIC);
    out.push(1);
    out.push(match dtype {
        BsqtDtype::F32 => 0,
        BsqtDtype::F64 => 1,
    });
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match dtype {
        BsqtDtype::F32 => {
            for &v in data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        BsqtDtype::F64 => {
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Parse a BSQT tensor into (dims, values); f32 payloads widen to f64.
pub fn parse_bsqt(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4)? != BSQT_MAGIC {
        return Err(Error::parse(0, "bad magic, expected \"BSQT\""));
    }
    match cur.take(1)? {
        [1] => {}
        [v] => return Err(Error::parse(4, format!("unsupported version {v}"))),
        _ => unreachable!(),
    }
    let dtype = match cur.take(1)? {
        [0] => BsqtDtype::F32,
        [1] => BsqtDtype::F64,
        [d] => return Err(Error::parse(5, format!("unsupported dtype {d}"))),
        _ => unreachable!(),
    };
    let ndim = cur.take(1)?[0] as usize;
    if ndim == 0 {
        return Err(Error::parse(6, "ndim must be at least 1"));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let raw = cur.take(4)?;
        dims.push(u32::from_le_bytes(raw.try_into().expect("4 bytes")) as usize);
    }
    let count: usize = dims.iter().product();
    let data = match dtype {
        BsqtDtype::F32 => {
            let payload = cur.take(4 * count)?;
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect()
        }
        BsqtDtype::F64 => {
            let payload = cur.take(8 * count)?;
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
        }
    };
    if cur.pos != bytes.len() {
        return cur.fail("trailing bytes after tensor payload");
    }
    Ok((dims, data))
}

pub fn write_bsqt(path: impl AsRef<Path>, dims: &[usize], data: &[f64], dtype: BsqtDtype) -> Result<()> {
    write_file(path.as_ref(), &bsqt_bytes(dims, data, dtype)?)
}

pub fn read_bsqt(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f64>)> {
    parse_bsqt(&read_file(path.as_ref())?)
}

/// Serialize a field as a 3-dim f64 BSQT tensor.
pub fn write_field_bsqt(path: impl AsRef<Path>, field: &FeatureField) -> Result<()> {
    let (c, h, w) = field.shape();
    write_bsqt(path, &[c, h, w], field.values(), BsqtDtype::F64)
}

/// Read a 3-dim BSQT tensor back as a field.
pub fn read_field_bsqt(path: impl AsRef<Path>) -> Result<FeatureField> {
    let path = path.as_ref();
    let (dims, data) = read_bsqt(path)?;
    if dims.len() != 3 {
        return Err(Error::parse(6, format!("expected 3 dims for a field, got {}", dims.len())));
    }
    FeatureField::from_vec(dims[0], dims[1], dims[2], data)
}

/// Polygon annotation document: pixel-coordinate outlines per object.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolygonFile {
    pub height: usize,
    pub width: usize,
    pub objects: Vec<PolygonObject>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolygonObject {
    pub category: String,
    /// Outline vertices as [x, y] pairs in pixel coordinates.
    pub polygon: Vec<[f64; 2]>,
}

pub fn read_polygon_json(path: impl AsRef<Path>) -> Result<PolygonFile> {
    let bytes = read_file(path.as_ref())?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn write_polygon_json(path: impl AsRef<Path>, doc: &PolygonFile) -> Result<()> {
    let text = serde_json::to_string_pretty(doc)?;
    write_file(path.as_ref(), text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    #[test]
    fn pgm_round_trips_any_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dir = tempdir().unwrap();
        for i in 0..10 {
            let h = rng.gen_range(1..20);
            let w = rng.gen_range(1..20);
            let m = BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(0.5));
            let path = dir.path().join(format!("m{i}.pgm"));
            write_pgm(&path, &m).unwrap();
            assert_eq!(read_pgm(&path).unwrap(), m);
        }
    }

    #[test]
    fn pgm_reads_any_nonzero_as_one() {
        let bytes = b"P5\n2 2\n255\n\x00\x7f\x01\xff".to_vec();
        let m = parse_pgm(&bytes).unwrap();
        assert_eq!(m.bits(), &[0, 1, 1, 1]);
    }

    #[test]
    fn pgm_accepts_comments_in_header() {
        let bytes = b"P5\n# a comment\n2 1\n# another\n255\n\xff\x00".to_vec();
        let m = parse_pgm(&bytes).unwrap();
        assert_eq!(m.bits(), &[1, 0]);
    }

    #[test]
    fn pgm_parse_errors_carry_offsets() {
        match parse_pgm(b"P6\n2 2\n255\n\x00\x00\x00\x00") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse_pgm(b"P5\n2 2\n255\n\x00") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 11),
            other => panic!("expected truncation error, got {other:?}"),
        }
        assert!(parse_pgm(b"P5\n2 2\n70000\n\x00\x00\x00\x00").is_err());
    }

    #[test]
    fn ppm_round_trips() {
        let dir = tempdir().unwrap();
        let rgb: Vec<u8> = (0..24).map(|i| (i * 11) as u8).collect();
        let path = dir.path().join("img.ppm");
        write_ppm(&path, 2, 4, &rgb).unwrap();
        assert_eq!(read_ppm(&path).unwrap(), (2, 4, rgb));
    }

    #[test]
    fn bsqt_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dir = tempdir().unwrap();
        let field = FeatureField::from_fn(3, 4, 5, |_, _, _| rng.gen_range(-1e3..1e3) * 1.0000001);
        let path = dir.path().join("t.bsqt");
        write_field_bsqt(&path, &field).unwrap();
        let back = read_field_bsqt(&path).unwrap();
        assert_eq!(back.shape(), field.shape());
        for (a, b) in back.values().iter().zip(field.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bsqt_f32_widens_on_read() {
        let data = vec![0.5f64, -1.25, 3.75];
        let bytes = bsqt_bytes(&[3], &data, BsqtDtype::F32).unwrap();
        let (dims, back) = parse_bsqt(&bytes).unwrap();
        assert_eq!(dims, vec![3]);
        assert_eq!(back, data);
    }

    #[test]
    fn bsqt_rejects_corruption_with_offsets() {
        let good = bsqt_bytes(&[2, 2], &[1.0, 2.0, 3.0, 4.0], BsqtDtype::F64).unwrap();
        match parse_bsqt(b"NOPE") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("bad magic should fail, got {other:?}"),
        }
        let mut v = good.clone();
        v[4] = 9;
        assert!(matches!(parse_bsqt(&v), Err(Error::Parse { offset: 4, .. })));
        let mut d = good.clone();
        d[5] = 7;
        assert!(matches!(parse_bsqt(&d), Err(Error::Parse { offset: 5, .. })));
        let truncated = &good[..good.len() - 3];
        assert!(matches!(parse_bsqt(truncated), Err(Error::Parse { .. })));
        let mut extra = good;
        extra.push(0);
        assert!(matches!(parse_bsqt(&extra), Err(Error::Parse { .. })));
    }

    #[test]
    fn polygon_json_round_trips() {
        let dir = tempdir().unwrap();
        let doc = PolygonFile {
            height: 8,
            width: 8,
            objects: vec![PolygonObject {
                category: "square".into(),
                polygon: vec![[2.0, 2.0], [6.0, 2.0], [6.0, 6.0], [2.0, 6.0]],
            }],
        };
        let path = dir.path().join("ann.json");
        write_polygon_json(&path, &doc).unwrap();
        let back = read_polygon_json(&path).unwrap();
        assert_eq!(back.height, 8);
        assert_eq!(back.objects[0].polygon, doc.objects[0].polygon);
    }

    #[test]
    fn polygon_json_rejects_unknown_keys() {
        let text = r#"{"height": 4, "width": 4, "objects": [], "extra": 1}"#;
        let parsed: std::result::Result<PolygonFile, _> = serde_json::from_str(text);
        assert!(parsed.is_err());
    }

    #[test]
    fn missing_file_reports_path() {
        match read_pgm("/nonexistent/nope.pgm") {
            Err(Error::Io { path, .. }) => assert!(path.contains("nope.pgm")),
            other => panic!("expected io error, got {other:?}"),
        }
    }
}

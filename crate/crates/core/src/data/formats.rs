//! PFM (single-channel float) and binary PPM readers and writers.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { path: self.path.to_path_buf(), offset: self.pos, msg: msg.into() }
    }

    fn skip_space(&mut self, comments: bool) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if comments && b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self, comments: bool, what: &str) -> Result<(&'a str, usize)> {
        self.skip_space(comments);
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("missing {what}")));
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| {
            Error::Parse { path: self.path.to_path_buf(), offset: start, msg: format!("{what} is not ASCII") }
        })?;
        Ok((s, start))
    }

    fn dim(&mut self, comments: bool, what: &str) -> Result<usize> {
        let (s, at) = self.token(comments, what)?;
        match s.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::Parse { path: self.path.to_path_buf(), offset: at, msg: format!("bad {what} {s:?}") }),
        }
    }

    /// Consumes the single whitespace byte that ends a header.
    fn end_header(&mut self) -> Result<()> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.err("header must end with one whitespace byte")),
        }
    }

    fn payload(&self, expected: usize) -> Result<&'a [u8]> {
        let rest = &self.bytes[self.pos..];
        if rest.len() < expected {
            return Err(self.err(format!("truncated payload: expected {expected} bytes, found {}", rest.len())));
        }
        if rest.len() > expected {
            return Err(self.err(format!("trailing data: expected {expected} bytes, found {}", rest.len())));
        }
        Ok(rest)
    }
}

fn magic<'a>(c: &mut Cursor<'a>, want: &str) -> Result<()> {
    if !c.bytes.starts_with(want.as_bytes()) {
        let got = String::from_utf8_lossy(&c.bytes[..c.bytes.len().min(2)]).into_owned();
        return Err(c.err(format!("bad magic {got:?}, expected {want:?}")));
    }
    c.pos = want.len();
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn plane_dims<T: Real>(t: &Tensor<T>, channels: usize, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [1, c, h, w] if c == channels => Ok((h, w)),
        _ => Err(Error::Shape { op, detail: format!("{:?}, expected [1, {channels}, h, w]", t.shape()) }),
    }
}

/// Decodes a `Pf` map into a `1×1×h×w` tensor (top row first).
pub fn decode_pfm<T: Real>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let mut c = Cursor { bytes, pos: 0, path };
    magic(&mut c, "Pf")?;
    let w = c.dim(false, "width")?;
    let h = c.dim(false, "height")?;
    let (scale, at) = c.token(false, "scale")?;
    let scale: f64 = match scale.parse() {
        Ok(s) if s != 0.0 && f64::is_finite(s) => s,
        _ => return Err(Error::Parse { path: path.to_path_buf(), offset: at, msg: format!("bad scale {scale:?}") }),
    };
    c.end_header()?;
    let body = c.payload(4 * h * w)?;
    let mut data = vec![T::zero(); h * w];
    for (q, chunk) in body.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (r, col) = (q / w, q % w);
        data[(h - 1 - r) * w + col] = T::lit(v as f64);
    }
    Tensor::new(&[1, 1, h, w], data)
}

/// Little-endian `Pf` encoding, rows written bottom to top.
pub fn encode_pfm<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w) = plane_dims(t, 1, "write_pfm")?;
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * h * w);
    for r in (0..h).rev() {
        for &v in &t.data()[r * w..(r + 1) * w] {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_pfm<T: Real>(path: &Path) -> Result<Tensor<T>> {
    decode_pfm(&read_file(path)?, path)
}

pub fn write_pfm<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_file(path, &encode_pfm(t)?)
}

/// Decodes a binary `P6` image (maxval 255) into `1×3×h×w` values in `[0, 1]`.
pub fn decode_ppm<T: Real>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let mut c = Cursor { bytes, pos: 0, path };
    magic(&mut c, "P6")?;
    let w = c.dim(true, "width")?;
    let h = c.dim(true, "height")?;
    let (maxval, at) = c.token(true, "maxval")?;
    if maxval != "255" {
        return Err(Error::Parse { path: path.to_path_buf(), offset: at, msg: format!("maxval {maxval:?}, expected 255") });
    }
    c.end_header()?;
    let body = c.payload(3 * h * w)?;
    let p = h * w;
    let mut data = vec![T::zero(); 3 * p];
    for (q, px) in body.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * p + q] = T::lit(px[ch] as f64 / 255.0);
        }
    }
    Tensor::new(&[1, 3, h, w], data)
}

/// Values are clamped to `[0, 1]` and rounded to 8 bits.
pub fn encode_ppm<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w) = plane_dims(t, 3, "write_ppm")?;
    let p = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * p);
    for q in 0..p {
        for ch in 0..3 {
            out.push(to_byte(t.data()[ch * p + q].as_f64()));
        }
    }
    Ok(out)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_ppm<T: Real>(path: &Path) -> Result<Tensor<T>> {
    decode_ppm(&read_file(path)?, path)
}

pub fn write_ppm<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_file(path, &encode_ppm(t)?)
}

const TURBO: [[u8; 3]; 17] = [
    [35, 23, 27],
    [73, 62, 175],
    [68, 106, 238],
    [50, 149, 247],
    [38, 189, 225],
    [41, 221, 187],
    [64, 243, 146],
    [102, 253, 109],
    [150, 250, 80],
    [198, 235, 59],
    [238, 208, 45],
    [255, 171, 36],
    [255, 128, 29],
    [238, 84, 21],
    [201, 45, 12],
    [161, 18, 2],
    [144, 13, 0],
];

/// Turbo color for `x ∈ [0, 1]` (clamped), as RGB in `[0, 1]`.
pub fn turbo(x: f64) -> [f64; 3] {
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
    let f = x * (TURBO.len() - 1) as f64;
    let i = (f.floor() as usize).min(TURBO.len() - 2);
    let a = f - i as f64;
    std::array::from_fn(|ch| ((1.0 - a) * TURBO[i][ch] as f64 + a * TURBO[i + 1][ch] as f64) / 255.0)
}

/// Color-maps a `1×1×h×w` depth map to a `1×3×h×w` preview over `[lo, hi]`.
pub fn colorize<T: Real>(depth: &Tensor<T>, lo: f64, hi: f64) -> Result<Tensor<T>> {
    let (h, w) = plane_dims(depth, 1, "colorize")?;
    let p = h * w;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Tensor::zeros(&[1, 3, h, w])?;
    for q in 0..p {
        let rgb = turbo((depth.data()[q].as_f64() - lo) / span);
        for ch in 0..3 {
            out.data_mut()[ch * p + q] = T::lit(rgb[ch]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn pfm_header_example() {
        let mut bytes = b"Pf\n3 2\n-1.0\n".to_vec();
        for v in 0..6 {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let t: Tensor<f64> = decode_pfm(&bytes, p()).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2, 3]);
        assert_eq!(t.data(), &[3.0, 4.0, 5.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn pfm_big_endian_scale() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        let t: Tensor<f32> = decode_pfm(&bytes, p()).unwrap();
        assert_eq!(t.data(), &[2.5]);
    }

    #[test]
    fn pfm_truncation_reports_counts_and_offset() {
        let mut bytes = b"Pf\n3 2\n-1.0\n".to_vec();
        bytes.extend_from_slice(&[0; 20]);
        match decode_pfm::<f32>(&bytes, p()) {
            Err(Error::Parse { offset, msg, .. }) => {
                assert_eq!(offset, 12);
                assert!(msg.contains("expected 24") && msg.contains("found 20"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pfm_rejects_bad_headers() {
        for (bytes, at) in [
            (&b"PF\n1 1\n-1.0\n"[..], 0),
            (b"Pf\n0 1\n-1.0\n", 3),
            (b"Pf\n1 x\n-1.0\n", 5),
            (b"Pf\n1 1\nabc\n", 7),
            (b"Pf\n1 1\n0\n", 7),
            (b"Pf\n1 1", 6),
        ] {
            match decode_pfm::<f32>(bytes, p()) {
                Err(Error::Parse { offset, .. }) => assert_eq!(offset, at, "{:?}", String::from_utf8_lossy(bytes)),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn ppm_roundtrip_and_comments() {
        let mut bytes = b"P6 # c\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 51, 255, 255, 0, 102]);
        let t: Tensor<f64> = decode_ppm(&bytes, p()).unwrap();
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.2, 0.0, 1.0, 0.4]);
        let again = encode_ppm(&t).unwrap();
        assert_eq!(&again[again.len() - 6..], &bytes[bytes.len() - 6..]);
    }

    #[test]
    fn ppm_rejects_other_maxval() {
        let bytes = b"P6\n1 1\n65535\n\0\0\0\0\0\0";
        assert!(matches!(decode_ppm::<f32>(bytes, p()), Err(Error::Parse { offset: 7, .. })));
    }

    #[test]
    fn turbo_endpoints() {
        assert_eq!(turbo(0.0), [35.0 / 255.0, 23.0 / 255.0, 27.0 / 255.0]);
        assert_eq!(turbo(1.0), [144.0 / 255.0, 13.0 / 255.0, 0.0]);
        assert_eq!(turbo(2.0), turbo(1.0));
    }
}

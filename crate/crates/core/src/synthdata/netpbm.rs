//! Binary PGM (P5) and PPM (P6) with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode a `1 x H x W` (P5) or `3 x H x W` (P6) image with values in `[0, 1]`.
pub fn encode(img: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match *img.shape() {
        [c @ (1 | 3), h, w] => (c, h, w),
        ref s => return Err(Error::invalid(format!("netpbm needs 1xHxW or 3xHxW, got {s:?}"))),
    };
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(c * h * w);
    let plane = h * w;
    let d = img.data();
    for p in 0..plane {
        for k in 0..c {
            out.push(quantize(d[k * plane + p]));
        }
    }
    Ok(out)
}

pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    fs::write(path, encode(img)?)?;
    Ok(())
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("not a binary PGM/PPM (expected P5 or P6)".into()),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(format!("expected a number at byte {start}"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|e| format!("bad header number: {e}"))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err("missing whitespace after maxval".into());
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err("zero image extent".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    Ok(Header {
        channels,
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

/// Decode to `C x H x W` with values `sample / maxval`.
pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let h = parse_header(bytes)?;
    let plane = h.width * h.height;
    let need = plane * h.channels;
    let body = &bytes[h.data_start..];
    if body.len() < need {
        return Err(format!("expected {need} pixel bytes, found {}", body.len()));
    }
    let mut data = vec![0.0; need];
    for p in 0..plane {
        for k in 0..h.channels {
            data[k * plane + p] = body[p * h.channels + k] as f64 / h.maxval as f64;
        }
    }
    Tensor::from_vec(&[h.channels, h.height, h.width], data).map_err(|e| e.to_string())
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|message| Error::Format {
        path: path.to_path_buf(),
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_within_quantisation() {
        let data: Vec<f64> = (0..3 * 4 * 5).map(|i| (i as f64 * 0.137) % 1.0).collect();
        let t = Tensor::from_vec(&[3, 4, 5], data).unwrap();
        let bytes = encode(&t).unwrap();
        assert!(bytes.starts_with(b"P6\n5 4\n255\n"));
        let back = decode(&bytes).unwrap();
        assert!(back.max_abs_diff(&t) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let t = decode(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0]);
    }

    #[test]
    fn malformed_headers() {
        assert!(decode(b"P3\n1 1\n255\n\0").is_err());
        assert!(decode(b"P5\n1 x\n255\n\0").is_err());
        assert!(decode(b"P5\n2 2\n255\n\0").is_err());
        assert!(decode(b"P5\n1 1\n65535\n\0\0").is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pgm");
        fs::write(&p, b"junk").unwrap();
        match read_image(&p) {
            Err(Error::Format { path, .. }) => assert_eq!(path, p),
            other => panic!("{other:?}"),
        }
    }
}

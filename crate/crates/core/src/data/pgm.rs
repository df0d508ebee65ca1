//! Binary 8-bit grayscale PGM (P5, maxval 255).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes a P5 image into a `[1, 1, H, W]` tensor with values `v / 255`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::parse(0, "missing P5 magic"));
    }
    pos += 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        skip_space_and_comments(bytes, &mut pos, i == 0)?;
        *field = read_number(bytes, &mut pos)?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::parse(pos, format!("maxval {maxval} unsupported; expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::parse(pos, format!("empty image {width}x{height}")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::parse(pos, "expected a single whitespace byte before the raster")),
    }
    let need = width * height;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::parse(
            bytes.len(),
            format!("truncated raster: {} of {need} bytes", raster.len()),
        ));
    }
    if raster.len() > need {
        return Err(Error::parse(pos + need, "trailing bytes after raster"));
    }
    Tensor::from_vec(
        [1, 1, height, width],
        raster.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize, require_space: bool) -> Result<()> {
    let start = *pos;
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while !matches!(bytes.get(*pos), None | Some(b'\n')) {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::parse(*pos, "unexpected end of header")),
        }
    }
    if require_space && *pos == start {
        return Err(Error::parse(*pos, "expected whitespace after magic"));
    }
    Ok(())
}

fn read_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let start = *pos;
    let mut value: usize = 0;
    while let Some(&b) = bytes.get(*pos).filter(|b| b.is_ascii_digit()) {
        value = value
            .checked_mul(10)
            .and_then(|v| v.checked_add(usize::from(b - b'0')))
            .ok_or_else(|| Error::parse(start, "header number overflows"))?;
        *pos += 1;
    }
    if *pos == start {
        return Err(Error::parse(start, "expected a decimal number in header"));
    }
    match bytes.get(*pos) {
        Some(b) if b.is_ascii_whitespace() || *b == b'#' => Ok(value),
        None => Err(Error::parse(*pos, "unexpected end of header")),
        Some(_) => Err(Error::parse(*pos, "expected whitespace after header number")),
    }
}

/// Encodes a `[1, 1, H, W]` tensor with values in [0, 1], rounding each
/// pixel to the nearest of 256 levels.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let [n, c, h, w] = image.shape();
    if n != 1 || c != 1 {
        return Err(Error::Shape(format!(
            "PGM needs a single-channel image, got {:?}",
            image.shape()
        )));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w);
    for (i, &v) in image.data().iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Invalid(format!("pixel {i} has value {v} outside [0, 1]")));
        }
        out.push((v * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_image(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(image)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_round_trip() {
        let img = Tensor::zeros([1, 1, 3, 5]);
        assert_eq!(decode_pgm(&encode_pgm(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn byte_128_reads_as_fraction() {
        let mut bytes = b"P5\n1 1\n255\n".to_vec();
        bytes.push(128);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.data()[0], 128.0 / 255.0);
        assert!((img.data()[0] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5 # made by hand\n2 # w\n1\n255 ".to_vec();
        bytes.extend([0, 255]);
        assert_eq!(decode_pgm(&bytes).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn errors_carry_offsets() {
        let truncated = b"P5\n2 2\n255\n\x01\x02".to_vec();
        assert!(matches!(decode_pgm(&truncated), Err(Error::Parse { offset: 13, .. })));
        assert!(matches!(
            decode_pgm(b"P2\n1 1\n255\n0"),
            Err(Error::Parse { offset: 0, .. })
        ));
        assert!(matches!(
            decode_pgm(b"P5\n1 x\n255\n0"),
            Err(Error::Parse { offset: 5, .. })
        ));
        assert!(matches!(decode_pgm(b"P5\n1 1\n65535\n00"), Err(Error::Parse { .. })));
    }

    #[test]
    fn out_of_range_pixels_rejected() {
        assert!(encode_pgm(&Tensor::filled([1, 1, 1, 1], 1.5)).is_err());
        assert!(encode_pgm(&Tensor::filled([1, 1, 1, 1], f64::NAN)).is_err());
        assert!(encode_pgm(&Tensor::zeros([1, 2, 1, 1])).is_err());
    }
}

//! Binary PNM dumps of `[C, H, W]` images in `[-1, 1]`: P6 for three
//! channels, P5 for one.

use std::path::Path;

use crate::dataset::{byte_to_pixel, pixel_to_byte};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(invalid("image", format!("need [1|3, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let magic = if c == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                out.push(pixel_to_byte(d[(ch * h + i) * w + j]));
            }
        }
    }
    Ok(out)
}

pub fn write(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode(image)?)?;
    Ok(())
}

pub fn decode(bytes: &[u8], name: &Path) -> Result<Tensor> {
    let bad = |reason: &str| Error::BadHeader {
        path: name.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("header ends early"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?.to_string());
    }
    pos += 1;
    let c = match fields[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        _ => return Err(bad("not a binary PPM/PGM")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    if fields[3] != "255" {
        return Err(bad("max value must be 255"));
    }
    let body = bytes.get(pos..pos + w * h * c).ok_or(Error::Truncated {
        path: name.to_path_buf(),
        offset: bytes.len(),
    })?;
    let mut data = vec![0.0; c * h * w];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                data[(ch * h + i) * w + j] = byte_to_pixel(body[(i * w + j) * c + ch]);
            }
        }
    }
    Tensor::new(vec![c, h, w], data)
}

//! Binary PPM (P6) writer and a minimal reader for round trips.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{ClanError, Result};
use crate::tensor::{Element, Tensor};

/// Write a [3, H, W] image with values in [0, 1] as binary PPM.
///
/// Bytes are round(255 * v) half-up, rows top to bottom, RGB interleaved.
/// Out-of-range values are an error; nothing is clamped silently.
pub fn write_image_ppm<E: Element>(img: &Tensor<E>, path: &Path) -> Result<()> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(ClanError::dimension(
            "write_image_ppm",
            format!("expected [3, h, w], got {:?}", shape),
        ));
    }
    let (h, w) = (shape[1], shape[2]);
    let data = img.data();
    for (i, v) in data.iter().enumerate() {
        let f = v.as_f64();
        if !(0.0..=1.0).contains(&f) {
            return Err(ClanError::data(
                "write_image_ppm",
                format!("value {f} at index {i} outside [0, 1]"),
            ));
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{} {}\n255\n", w, h)?;
    let plane = h * w;
    let mut row = Vec::with_capacity(3 * w);
    for y in 0..h {
        row.clear();
        for x in 0..w {
            for ch in 0..3 {
                let v = data[ch * plane + y * w + x].as_f64();
                row.push((255.0 * v + 0.5).floor() as u8);
            }
        }
        out.write_all(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Read a binary PPM back into a [3, H, W] tensor with values in [0, 1].
pub fn read_image_ppm<E: Element>(path: &Path) -> Result<Tensor<E>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let token = |bytes: &[u8], pos: &mut usize| -> Result<String> {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(ClanError::data("read_image_ppm", "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&bytes, &mut pos)? != "P6" {
        return Err(ClanError::data("read_image_ppm", "not a binary PPM"));
    }
    let w: usize = token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| ClanError::data("read_image_ppm", "bad width"))?;
    let h: usize = token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| ClanError::data("read_image_ppm", "bad height"))?;
    let maxval: usize = token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| ClanError::data("read_image_ppm", "bad maxval"))?;
    if maxval != 255 {
        return Err(ClanError::data("read_image_ppm", "only maxval 255 supported"));
    }
    pos += 1; // single whitespace after maxval
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(ClanError::data("read_image_ppm", "truncated pixel data"));
    }
    let plane = h * w;
    let mut data = vec![E::zero(); need];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let b = bytes[pos + (y * w + x) * 3 + ch];
                data[ch * plane + y * w + x] = E::from_f64(b as f64 / 255.0);
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

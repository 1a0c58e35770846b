//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::io::Write;
use std::path::Path;

use mtuc_tensor::Tensor;

use crate::error::{Error, Result};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a [C, H, W] tensor with C = 3 (PPM) or C = 1 (PGM).
pub fn write_pnm(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = match t.shape() {
        &[c, h, w] if c == 1 || c == 3 => (c, h, w),
        s => return Err(Error::Format(format!("cannot write tensor of shape {s:?} as an image"))),
    };
    let mut buf = format!("{}\n{w} {h}\n255\n", if c == 3 { "P6" } else { "P5" }).into_bytes();
    let d = t.data();
    for i in 0..h * w {
        for ch in 0..c {
            buf.push(to_byte(d[ch * h * w + i]));
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a P5/P6 file into a [C, H, W] tensor scaled to [0, 1].
pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let c = match fields[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        _ => return Err(bad("not a binary PPM/PGM")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit samples are supported"));
    }
    let body = bytes.get(pos..pos + c * h * w).ok_or_else(|| bad("truncated pixel data"))?;
    let mut data = vec![0.0; c * h * w];
    for i in 0..h * w {
        for ch in 0..c {
            data[ch * h * w + i] = f64::from(body[i * c + ch]) / 255.0;
        }
    }
    Ok(Tensor::new(&[c, h, w], data)?)
}

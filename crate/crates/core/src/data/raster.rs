//! `PSR1` raster files.
//!
//! Layout: magic `PSR1`, little-endian `u32` width, `u32` height,
//! `u32` channels, `u8` dtype (0 = f32, 1 = u8), then the row-major,
//! channel-last payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RASTER_MAGIC: &[u8; 4] = b"PSR1";
pub const HEADER_LEN: usize = 17;

/// Largest element count a header may declare.
const MAX_ELEMENTS: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RasterDtype {
    F32,
    U8,
}

impl RasterDtype {
    fn code(self) -> u8 {
        match self {
            RasterDtype::F32 => 0,
            RasterDtype::U8 => 1,
        }
    }

    fn width(self) -> u64 {
        match self {
            RasterDtype::F32 => 4,
            RasterDtype::U8 => 1,
        }
    }
}

fn hwc(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w] => Ok((*h, *w, 1)),
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(Error::dim("write_raster", &[0, 0, 0], s)),
    }
}

/// Serialises an `H×W` or `H×W×C` tensor.
///
/// `U8` payloads must hold integers in `0..=255`; `F32` stores each value
/// rounded to single precision.
pub fn encode_raster(t: &Tensor, dtype: RasterDtype) -> Result<Vec<u8>> {
    let (h, w, c) = hwc(t)?;
    let dims: Vec<u32> = [w, h, c]
        .iter()
        .map(|&d| u32::try_from(d).map_err(|_| Error::domain("write_raster", format!("extent {d} exceeds u32"))))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(HEADER_LEN + t.len() * dtype.width() as usize);
    out.extend_from_slice(RASTER_MAGIC);
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(dtype.code());
    match dtype {
        RasterDtype::F32 => {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        RasterDtype::U8 => {
            for &v in t.data() {
                if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    return Err(Error::domain("write_raster", format!("value {v} is not a u8")));
                }
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

/// Parses a raster into an `H×W×C` tensor.
pub fn decode_raster(bytes: &[u8]) -> Result<(Tensor, RasterDtype)> {
    if bytes.len() < 4 || &bytes[..4] != RASTER_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected PSR1".into(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            offset: 4,
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as u64;
    let (w, h, c) = (u32_at(4), u32_at(8), u32_at(12));
    let dtype = match bytes[16] {
        0 => RasterDtype::F32,
        1 => RasterDtype::U8,
        other => {
            return Err(Error::Format {
                offset: 16,
                msg: format!("unknown dtype {other}"),
            })
        }
    };
    let count = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(c))
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(|| Error::Format {
            offset: 4,
            msg: format!("dimension overflow: {w}x{h}x{c}"),
        })?;
    let payload = count * dtype.width();
    let available = (bytes.len() - HEADER_LEN) as u64;
    if payload > available {
        return Err(Error::Truncated {
            offset: HEADER_LEN as u64,
            expected: payload,
            actual: available,
        });
    }
    if payload < available {
        return Err(Error::Format {
            offset: HEADER_LEN as u64 + payload,
            msg: format!("{} trailing bytes", available - payload),
        });
    }
    let body = &bytes[HEADER_LEN..];
    let data: Vec<f64> = match dtype {
        RasterDtype::F32 => body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect(),
        RasterDtype::U8 => body.iter().map(|&b| b as f64).collect(),
    };
    let t = Tensor::new(&[h as usize, w as usize, c as usize], data)?;
    Ok((t, dtype))
}

pub fn write_raster(path: &Path, t: &Tensor, dtype: RasterDtype) -> Result<()> {
    super::write_file(path, &encode_raster(t, dtype)?)
}

pub fn read_raster(path: &Path) -> Result<Tensor> {
    decode_raster(&super::read_file(path)?).map(|(t, _)| t)
}

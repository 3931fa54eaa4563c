//! Binary PPM rendering with a fixed palette.

use std::path::Path;

use crate::error::{Error, Result};
use crate::world::{GridImage, GRID};

/// RGB for class 0 (background) through 6.
pub const PALETTE: [[u8; 3]; 7] = [
    [255, 255, 255],
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
];

/// P6 bytes of `img`, each cell drawn as a `scale x scale` block.
pub fn ppm_bytes(img: &GridImage, scale: usize) -> Result<Vec<u8>> {
    if scale == 0 {
        return Err(Error::Contract("render scale must be >= 1".into()));
    }
    let side = GRID * scale;
    let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
    out.reserve(side * side * 3);
    for py in 0..side {
        for px in 0..side {
            let cls = img.get(px / scale, py / scale) as usize;
            let rgb = PALETTE.get(cls).ok_or_else(|| Error::Contract(format!("cell class {cls} has no color")))?;
            out.extend_from_slice(rgb);
        }
    }
    Ok(out)
}

pub fn render_ppm(img: &GridImage, path: impl AsRef<Path>, scale: usize) -> Result<()> {
    let path = path.as_ref();
    let bytes = ppm_bytes(img, scale)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

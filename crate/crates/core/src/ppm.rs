//! Binary PPM (P6) writer for slice previews.

use std::fs;
use std::path::Path;

use crate::{CoreError, Result};

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(CoreError::InvalidInput(format!(
            "PPM {width}x{height} needs {} bytes, got {}",
            width * height * 3,
            rgb.len()
        )));
    }
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(rgb);
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

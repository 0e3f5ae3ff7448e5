use ndarray::Array2;

use crate::error::{Error, Result};

/// Weight returned for masks without any foreground pixel.
pub const DEFAULT_WEIGHT_CAP: f64 = 1000.0;

/// Thresholds a raw mask: a pixel is foreground iff its value exceeds
/// `threshold_fraction * encoding_max` (255 for 8-bit, 65535 for 16-bit).
pub fn binarize_mask(raw: &Array2<f64>, threshold_fraction: f64, encoding_max: f64) -> Result<Array2<u8>> {
    if raw.is_empty() {
        return Err(Error::arg("cannot binarize an empty mask"));
    }
    if !(threshold_fraction > 0.0 && threshold_fraction < 1.0) {
        return Err(Error::arg(format!("threshold fraction {threshold_fraction} outside (0, 1)")));
    }
    let cut = threshold_fraction * encoding_max;
    Ok(raw.mapv(|v| u8::from(v > cut)))
}

/// Ratio of background to foreground pixels, capped at [`DEFAULT_WEIGHT_CAP`]
/// when the mask has no foreground.
pub fn foreground_weight(mask: &Array2<u8>) -> f64 {
    foreground_weight_capped(mask, DEFAULT_WEIGHT_CAP)
}

pub fn foreground_weight_capped(mask: &Array2<u8>, cap: f64) -> f64 {
    let fg = mask.iter().filter(|&&v| v != 0).count();
    if fg == 0 {
        return cap;
    }
    let bg = mask.len() - fg;
    bg as f64 / fg as f64
}

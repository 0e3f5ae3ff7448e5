//! Synthetic blob domains used as a desk-scale stand-in for microscopy data.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DomainDataset, Role, Sample};
use crate::error::{Error, Result};
use crate::{par, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlobShape {
    Disc,
    Ellipse,
    Ring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub domain_id: String,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    /// Inclusive `(min, max)` number of blobs per image.
    pub blob_count_range: (usize, usize),
    /// `(min, max)` blob radius in pixels.
    pub blob_radius_range: (f64, f64),
    pub blob_shape: BlobShape,
    pub foreground_intensity_range: (f64, f64),
    pub background_intensity_range: (f64, f64),
    pub noise_sigma: f64,
    pub sample_count: usize,
    pub seed: u64,
    #[serde(default)]
    pub cell_type: Option<String>,
    #[serde(default)]
    pub role: Role,
}

impl SyntheticDomainSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let bad = |m: String| Err(Error::arg(format!("synthetic {}: {m}", self.domain_id)));
        if h == 0 || w == 0 {
            return bad("image size must be positive".into());
        }
        if self.sample_count == 0 {
            return bad("sample_count must be positive".into());
        }
        let (cmin, cmax) = self.blob_count_range;
        if cmin > cmax {
            return bad("blob_count_range is inverted".into());
        }
        let (rmin, rmax) = self.blob_radius_range;
        if !(rmin > 0.0 && rmin <= rmax) {
            return bad("blob_radius_range must satisfy 0 < min <= max".into());
        }
        if rmax > h.min(w) as f64 / 2.0 {
            return bad(format!("blob radius {rmax} exceeds half the image size"));
        }
        for (name, (lo, hi)) in
            [("foreground", self.foreground_intensity_range), ("background", self.background_intensity_range)]
        {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return bad(format!("{name} intensity range must lie in [0, 1]"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be a non-negative number".into());
        }
        Ok(())
    }
}

fn uniform<R: Rng>(r: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        r.random_range(lo..hi)
    }
}

fn render_sample(spec: &SyntheticDomainSpec, index: usize) -> Sample {
    let (h, w) = spec.image_size;
    let mut r = rng::stream_for(spec.seed, &[rng::tag(&spec.domain_id), index as u64]);
    let background = uniform(&mut r, spec.background_intensity_range);
    let mut image = Array2::from_elem((h, w), background);
    let mut mask = Array2::<u8>::zeros((h, w));

    let count = r.random_range(spec.blob_count_range.0..=spec.blob_count_range.1);
    for _ in 0..count {
        let cy = r.random_range(0.0..h as f64);
        let cx = r.random_range(0.0..w as f64);
        let radius = uniform(&mut r, spec.blob_radius_range);
        let intensity = uniform(&mut r, spec.foreground_intensity_range);
        let (minor, angle) = match spec.blob_shape {
            BlobShape::Ellipse => (radius * r.random_range(0.4..0.75), r.random_range(0.0..std::f64::consts::PI)),
            _ => (radius, 0.0),
        };
        let (sin, cos) = angle.sin_cos();
        let y0 = (cy - radius).floor().max(0.0) as usize;
        let y1 = ((cy + radius).ceil() as usize).min(h - 1);
        let x0 = (cx - radius).floor().max(0.0) as usize;
        let x1 = ((cx + radius).ceil() as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let inside = match spec.blob_shape {
                    BlobShape::Disc => dx * dx + dy * dy <= radius * radius,
                    BlobShape::Ring => {
                        let d2 = dx * dx + dy * dy;
                        d2 <= radius * radius && d2 >= 0.25 * radius * radius
                    }
                    BlobShape::Ellipse => {
                        let u = dx * cos + dy * sin;
                        let v = -dx * sin + dy * cos;
                        (u / radius).powi(2) + (v / minor).powi(2) <= 1.0
                    }
                };
                if inside {
                    image[[y, x]] = intensity;
                    mask[[y, x]] = 1;
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        image.mapv_inplace(|v| (v + noise.sample(&mut r)).clamp(0.0, 1.0));
    }

    Sample { id: format!("{}_{index:04}", spec.domain_id), domain_id: spec.domain_id.clone(), image, mask }
}

/// Renders `spec.sample_count` images of blobs over a flat background with
/// additive Gaussian noise (clipped to `[0, 1]`). Masks mark the blob pixels.
/// Output is a pure function of `spec`.
pub fn generate_synthetic_domain(spec: &SyntheticDomainSpec) -> Result<DomainDataset> {
    spec.validate()?;
    let samples = par::map_range(spec.sample_count, |i| render_sample(spec, i));
    let cell_type = spec.cell_type.clone().unwrap_or_else(|| format!("{:?}", spec.blob_shape).to_lowercase());
    DomainDataset::new(spec.domain_id.clone(), cell_type, samples, spec.role)
}

/// Five domains of `size × size` images: four sources (discs, ellipses,
/// rings, small dense discs) and one target (large dim blobs on a bright,
/// noisy background). Each domain gets its own seed derived from `seed`.
pub fn standard_suite(size: usize, sample_count: usize, seed: u64) -> Vec<SyntheticDomainSpec> {
    let s = size as f64;
    let spec = |id: &str,
                shape: BlobShape,
                count: (usize, usize),
                radius: (f64, f64),
                fg: (f64, f64),
                bg: (f64, f64),
                noise: f64,
                role: Role| SyntheticDomainSpec {
        domain_id: id.to_string(),
        image_size: (size, size),
        blob_count_range: count,
        blob_radius_range: radius,
        blob_shape: shape,
        foreground_intensity_range: fg,
        background_intensity_range: bg,
        noise_sigma: noise,
        sample_count,
        seed: rng::derive(seed, &[rng::tag(id)]),
        cell_type: None,
        role,
    };
    vec![
        spec("discs", BlobShape::Disc, (2, 4), (s * 0.08, s * 0.16), (0.7, 0.95), (0.0, 0.15), 0.05, Role::Source),
        spec(
            "ellipses",
            BlobShape::Ellipse,
            (2, 4),
            (s * 0.10, s * 0.20),
            (0.55, 0.85),
            (0.05, 0.2),
            0.06,
            Role::Source,
        ),
        spec("rings", BlobShape::Ring, (1, 3), (s * 0.12, s * 0.22), (0.6, 0.9), (0.0, 0.1), 0.05, Role::Source),
        spec("dense", BlobShape::Disc, (6, 10), (s * 0.04, s * 0.08), (0.5, 0.8), (0.1, 0.25), 0.04, Role::Source),
        spec("target", BlobShape::Ellipse, (2, 5), (s * 0.07, s * 0.14), (0.45, 0.7), (0.1, 0.25), 0.07, Role::Target),
    ]
}

//! Directory-layout ingestion: `<root>/<domain_id>/{images,masks}/<stem>.{png,tif}`
//! plus `<root>/<domain_id>/manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{binarize_mask, DomainDataset, Role, Sample};
use crate::error::{Error, Result};

const EXTENSIONS: [&str; 3] = ["png", "tif", "tiff"];

/// Contents of `manifest.json` next to a domain's `images/` and `masks/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub domain_id: String,
    pub cell_type: String,
    /// 1 for grayscale, 3 for color; color is reduced to luminance.
    #[serde(default = "default_channels")]
    pub channels: u32,
    /// Fraction of the encoding maximum above which a mask pixel is foreground.
    #[serde(default = "default_threshold")]
    pub mask_threshold: f64,
    #[serde(default)]
    pub role: Role,
}

fn default_channels() -> u32 {
    1
}

fn default_threshold() -> f64 {
    0.5
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(manifest)
    }
}

/// Decodes an image into native-encoding values plus the encoding maximum.
fn decode(path: &Path) -> Result<(Array2<f64>, f64)> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (values, max): (Vec<f64>, f64) = match &img {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => (img.to_luma8().into_raw().into_iter().map(f64::from).collect(), 255.0),
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => (img.to_luma16().into_raw().into_iter().map(f64::from).collect(), 65535.0),
        _ => (img.to_luma32f().into_raw().into_iter().map(f64::from).collect(), 1.0),
    };
    let arr = Array2::from_shape_vec((h, w), values).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok((arr, max))
}

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Loads one domain directory. Intensities are divided by the encoding
/// maximum; masks are thresholded at `manifest.mask_threshold` of theirs.
pub fn load_domain(root: &Path, manifest: &DatasetManifest) -> Result<DomainDataset> {
    if !matches!(manifest.channels, 1 | 3) {
        return Err(Error::Config(format!("{}: unsupported channel count {}", manifest.domain_id, manifest.channels)));
    }
    let images = stems(&root.join("images"))?;
    let masks = stems(&root.join("masks"))?;
    if images.is_empty() {
        return Err(Error::Data(format!("no images found under {}", root.join("images").display())));
    }
    let mut samples = Vec::with_capacity(images.len());
    for (stem, image_path) in &images {
        let mask_path = masks
            .get(stem)
            .ok_or_else(|| Error::Data(format!("missing mask for image stem '{stem}' in {}", root.display())))?;
        let (raw_image, image_max) = decode(image_path)?;
        let (raw_mask, mask_max) = decode(mask_path)?;
        let mask = binarize_mask(&raw_mask, manifest.mask_threshold, mask_max)
            .map_err(|e| Error::Data(format!("{}: {e}", mask_path.display())))?;
        let image = raw_image.mapv(|v| (v / image_max).clamp(0.0, 1.0));
        samples.push(Sample::new(stem.clone(), manifest.domain_id.clone(), image, mask)?);
    }
    DomainDataset::new(manifest.domain_id.clone(), manifest.cell_type.clone(), samples, manifest.role)
}

/// Writes `dataset` in the layout read by [`load_domain`]: 16-bit grayscale
/// PNG images, 8-bit `{0, 255}` PNG masks and a manifest.
pub fn write_domain(dataset: &DomainDataset, root: &Path) -> Result<PathBuf> {
    let dir = root.join(&dataset.domain_id);
    for sub in ["images", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    for s in &dataset.samples {
        let (h, w) = s.image.dim();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
            w as u32,
            h as u32,
            s.image.iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect(),
        )
        .expect("buffer matches dimensions");
        let mask: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(w as u32, h as u32, s.mask.iter().map(|&m| m * 255).collect())
                .expect("buffer matches dimensions");
        let ip = dir.join("images").join(format!("{}.png", s.id));
        let mp = dir.join("masks").join(format!("{}.png", s.id));
        img.save(&ip).map_err(|source| Error::Image { path: ip, source })?;
        mask.save(&mp).map_err(|source| Error::Image { path: mp, source })?;
    }
    let manifest = DatasetManifest {
        domain_id: dataset.domain_id.clone(),
        cell_type: dataset.cell_type.clone(),
        channels: 1,
        mask_threshold: 0.5,
        role: dataset.role,
    };
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(dir)
}

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::font::{draw_text, text_width, GLYPH_H};
use crate::adapt::{mean_std, ExperimentResult};
use crate::error::{Error, Result};

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub target: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub mean_iou: f64,
    pub std_iou: f64,
    pub repeats: usize,
}

impl From<&ExperimentResult> for SummaryRow {
    fn from(r: &ExperimentResult) -> Self {
        Self {
            method: r.method.to_string(),
            target: r.target_domain_id.clone(),
            k: r.k,
            mean_iou: r.mean_iou,
            std_iou: r.std_iou,
            repeats: r.repeat_ious.len(),
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    if rows.is_empty() {
        w.write_record(["method", "target", "K", "mean_iou", "std_iou", "repeats"]).map_err(|e| csv_err(path, e))?;
    }
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// Bars of one method across the K groups of a chart.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartSeries {
    pub label: String,
    /// `(K, mean, std)`; missing K values leave a gap.
    pub bars: Vec<(usize, f64, f64)>,
}

const PALETTE: [[u8; 3]; 6] =
    [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];
const BAR_W: u32 = 14;
const GROUP_GAP: u32 = 18;
const LEFT: u32 = 48;
const TOP: u32 = 36;
const PLOT_H: u32 = 240;
const BOTTOM: u32 = 40;

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, c: [u8; 3]) {
    for y in y0.min(y1)..=y0.max(y1).min(img.height() - 1) {
        for x in x0.min(x1)..=x0.max(x1).min(img.width() - 1) {
            img.put_pixel(x, y, Rgb(c));
        }
    }
}

fn text(img: &mut RgbImage, s: &str, x: u32, y: u32, scale: u32) {
    let (w, h) = img.dimensions();
    draw_text(s, x, y, scale, |px, py| {
        if px < w && py < h {
            img.put_pixel(px, py, Rgb([0, 0, 0]));
        }
    });
}

/// Draws a grouped bar chart (one group per K, one bar per series, ±1 std
/// whiskers) with IoU on a fixed `[0, 1]` axis, and writes it as PNG.
pub fn render_chart(title: &str, k_values: &[usize], series: &[ChartSeries], path: &Path) -> Result<()> {
    let group_w = series.len().max(1) as u32 * BAR_W + GROUP_GAP;
    let legend_w = series.iter().map(|s| text_width(&s.label, 1) + 20).max().unwrap_or(0);
    let width = (LEFT + k_values.len().max(1) as u32 * group_w + 16 + legend_w).max(text_width(title, 2) + 2 * LEFT);
    let height = TOP + PLOT_H + BOTTOM;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let y_of = |v: f64| TOP + PLOT_H - (v.clamp(0.0, 1.0) * PLOT_H as f64).round() as u32;

    text(&mut img, title, LEFT, 10, 2);
    let x_end = LEFT + k_values.len() as u32 * group_w;
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let y = y_of(v);
        fill(&mut img, LEFT, y, x_end, y, [225, 225, 225]);
        let label = format!("{v:.1}");
        text(&mut img, &label, LEFT - 8 - text_width(&label, 1), y.saturating_sub(GLYPH_H / 2), 1);
    }
    fill(&mut img, LEFT, TOP, LEFT, TOP + PLOT_H, [0, 0, 0]);
    fill(&mut img, LEFT, TOP + PLOT_H, x_end, TOP + PLOT_H, [0, 0, 0]);
    text(&mut img, "IOU", 4, TOP - 12, 1);

    for (gi, &k) in k_values.iter().enumerate() {
        let gx = LEFT + GROUP_GAP / 2 + gi as u32 * group_w;
        for (si, s) in series.iter().enumerate() {
            let Some(&(_, mean, std)) = s.bars.iter().find(|b| b.0 == k) else { continue };
            let color = PALETTE[si % PALETTE.len()];
            let x = gx + si as u32 * BAR_W;
            if mean > 0.0 {
                fill(&mut img, x + 1, y_of(mean), x + BAR_W - 2, TOP + PLOT_H - 1, color);
            }
            let (lo, hi) = (y_of(mean + std), y_of(mean - std));
            let cx = x + BAR_W / 2;
            fill(&mut img, cx, lo, cx, hi, [0, 0, 0]);
            fill(&mut img, cx - 3, lo, cx + 3, lo, [0, 0, 0]);
            fill(&mut img, cx - 3, hi, cx + 3, hi, [0, 0, 0]);
        }
        let label = format!("K={k}");
        let lx = gx + (series.len() as u32 * BAR_W).saturating_sub(text_width(&label, 1)) / 2;
        text(&mut img, &label, lx, TOP + PLOT_H + 10, 1);
    }

    let lx = x_end + 16;
    for (si, s) in series.iter().enumerate() {
        let y = TOP + si as u32 * 14;
        fill(&mut img, lx, y, lx + 9, y + 8, PALETTE[si % PALETTE.len()]);
        text(&mut img, &s.label, lx + 14, y + 1, 1);
    }

    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

fn ordered<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for s in items {
        if !out.iter().any(|o| o == s) {
            out.push(s.to_string());
        }
    }
    out
}

/// Renders `plots/<target>.png` for every target in `summary.csv` plus
/// `plots/average.png` (per-method mean over targets, whiskers = std over
/// targets). Uses nothing but the CSV. Returns the written paths.
pub fn cmd_report(output_dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_summary(&output_dir.join("summary.csv"))?;
    let targets = ordered(rows.iter().map(|r| r.target.as_str()));
    let methods = ordered(rows.iter().map(|r| r.method.as_str()));
    let ks: Vec<usize> = rows.iter().map(|r| r.k).collect::<BTreeSet<_>>().into_iter().collect();
    let plots = output_dir.join("plots");
    let mut written = Vec::new();
    for t in &targets {
        let series: Vec<ChartSeries> = methods
            .iter()
            .map(|m| ChartSeries {
                label: m.clone(),
                bars: rows
                    .iter()
                    .filter(|r| &r.method == m && &r.target == t)
                    .map(|r| (r.k, r.mean_iou, r.std_iou))
                    .collect(),
            })
            .collect();
        let path = plots.join(format!("{t}.png"));
        render_chart(t, &ks, &series, &path)?;
        written.push(path);
    }
    if !rows.is_empty() {
        let series: Vec<ChartSeries> = methods
            .iter()
            .map(|m| ChartSeries {
                label: m.clone(),
                bars: ks
                    .iter()
                    .filter_map(|&k| {
                        let means: Vec<f64> =
                            rows.iter().filter(|r| &r.method == m && r.k == k).map(|r| r.mean_iou).collect();
                        (!means.is_empty()).then(|| {
                            let (mean, std) = mean_std(&means);
                            (k, mean, std)
                        })
                    })
                    .collect(),
            })
            .collect();
        let path = plots.join("average.png");
        render_chart("average over targets", &ks, &series, &path)?;
        written.push(path);
    }
    Ok(written)
}

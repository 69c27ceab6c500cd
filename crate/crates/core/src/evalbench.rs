//! Image-quality metrics and the benchmark harness.
//!
//! PSNR is computed over all RGB elements jointly with a 100 dB cap. SSIM
//! uses an 11-tap Gaussian window (σ = 1.5) over the valid region, per
//! channel, then averaged. LPIPS is an optional backend.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::DatasetManifest;
use crate::depthrange::{AuxSettings, DepthBackend};
use crate::error::{Error, Result};
use crate::imagecore::{gaussian_kernel_sized, save_image, ImageRGB};
use crate::losses::{FeatureExtractor, VggVariant, VGG_WIDTHS};
use crate::networks::{model_forward, RemovalModel};

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f32 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(x: &ImageRGB, y: &ImageRGB) -> Result<f64> {
    x.same_shape(y, "psnr")?;
    let n = x.data().len() as f64;
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Valid-region separable filtering of one plane with a normalized kernel.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity; requires both sides to be at least 11 pixels.
pub fn ssim(x: &ImageRGB, y: &ImageRGB) -> Result<f64> {
    x.same_shape(y, "ssim")?;
    let (h, w) = x.shape();
    if h.min(w) < SSIM_WINDOW {
        return Err(Error::TooSmall(format!("{h}x{w} below the {SSIM_WINDOW}-pixel SSIM window")));
    }
    let k = gaussian_kernel_sized(SSIM_SIGMA, SSIM_WINDOW / 2);
    let mut total = 0.0;
    for c in 0..3 {
        let a: Vec<f64> = x.channel(c).iter().map(|&v| f64::from(v)).collect();
        let b: Vec<f64> = y.channel(c).iter().map(|&v| f64::from(v)).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let (mu_a, _, _) = filter_valid(&a, h, w, &k);
        let (mu_b, _, _) = filter_valid(&b, h, w, &k);
        let (aa, _, _) = filter_valid(&prod(&a, &a), h, w, &k);
        let (bb, _, _) = filter_valid(&prod(&b, &b), h, w, &k);
        let (ab, _, _) = filter_valid(&prod(&a, &b), h, w, &k);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / 3.0)
}

/// A learned perceptual distance.
pub trait PerceptualMetric: Send + Sync {
    fn name(&self) -> &str;

    fn distance(&self, x: &ImageRGB, y: &ImageRGB) -> Result<f64>;
}

/// VGG-16 tap positions used by LPIPS.
pub const LPIPS_TAPS: [(usize, usize); 5] = [(1, 2), (2, 2), (3, 3), (4, 3), (5, 3)];
const LPIPS_SHIFT: [f32; 3] = [-0.030, -0.088, -0.188];
const LPIPS_SCALE: [f32; 3] = [0.458, 0.448, 0.450];
pub const LPIPS_TRUNK_FILE: &str = "vgg16.safetensors";
pub const LPIPS_LINEAR_FILE: &str = "lpips_vgg.safetensors";

/// LPIPS with a VGG-16 trunk: unit-normalized tap activations, squared
/// differences weighted per channel, averaged spatially, summed over taps.
pub struct LpipsVgg {
    trunk: FeatureExtractor,
    linear: Vec<Vec<f32>>,
    name: String,
}

impl std::fmt::Debug for LpipsVgg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LpipsVgg").field("name", &self.name).finish()
    }
}

fn lpips_affine() -> ([f32; 3], [f32; 3]) {
    // [0,1] -> [-1,1] -> (x - shift) / scale
    let mut scale = [0.0; 3];
    let mut shift = [0.0; 3];
    for c in 0..3 {
        scale[c] = 2.0 / LPIPS_SCALE[c];
        shift[c] = (-1.0 - LPIPS_SHIFT[c]) / LPIPS_SCALE[c];
    }
    (scale, shift)
}

impl LpipsVgg {
    /// Load `vgg16.safetensors` and `lpips_vgg.safetensors` (`lin{i}.model.1.weight`).
    pub fn open(dir: &Path) -> Result<Self> {
        let unavailable = |e: Error| Error::BackendUnavailable(format!("LPIPS: {e}"));
        let trunk = FeatureExtractor::from_safetensors(VggVariant::Vgg16, &LPIPS_TAPS, &dir.join(LPIPS_TRUNK_FILE))
            .map_err(unavailable)?;
        let lin_path = dir.join(LPIPS_LINEAR_FILE);
        if !lin_path.is_file() {
            return Err(Error::BackendUnavailable(format!("LPIPS: {} not found", lin_path.display())));
        }
        let tensors = derefl_autograd::safetensors::read(&lin_path)
            .map_err(|e| Error::BackendUnavailable(format!("LPIPS: {e}")))?;
        let mut linear = Vec::new();
        for (i, width) in [64, 128, 256, 512, 512].into_iter().enumerate() {
            let key = format!("lin{i}.model.1.weight");
            let (_, v) = tensors
                .get(&key)
                .ok_or_else(|| Error::BackendUnavailable(format!("LPIPS: missing {key}")))?;
            if v.len() != width {
                return Err(Error::BackendUnavailable(format!("LPIPS: {key} has {} values", v.len())));
            }
            linear.push(v.clone());
        }
        let (scale, shift) = lpips_affine();
        Ok(Self {
            trunk: trunk.with_input_affine(scale, shift),
            linear,
            name: "lpips-vgg".into(),
        })
    }

    /// Seeded random trunk and non-negative channel weights.
    pub fn random(widths: [usize; 5], seed: u64) -> Self {
        let (scale, shift) = lpips_affine();
        let trunk = FeatureExtractor::random_with_taps(VggVariant::Vgg16, &widths, &LPIPS_TAPS, seed)
            .with_input_affine(scale, shift);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11);
        let linear = widths
            .iter()
            .map(|&w| (0..w).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        Self { trunk, linear, name: format!("lpips-random-{seed}") }
    }

    pub fn full_width_random(seed: u64) -> Self {
        Self::random(VGG_WIDTHS, seed)
    }
}

impl PerceptualMetric for LpipsVgg {
    fn name(&self) -> &str {
        &self.name
    }

    fn distance(&self, x: &ImageRGB, y: &ImageRGB) -> Result<f64> {
        x.same_shape(y, "lpips")?;
        let fx = self.trunk.features(&x.to_tensor())?;
        let fy = self.trunk.features(&y.to_tensor())?;
        let mut total = 0.0;
        for ((a, b), lin) in fx.iter().zip(&fy).zip(&self.linear) {
            let s = a.shape();
            let (c, plane) = (s[1], s[2] * s[3]);
            let (da, db) = (a.data(), b.data());
            let mut layer = 0.0;
            for p in 0..plane {
                let norm = |d: &[f32]| {
                    (0..c).map(|ch| f64::from(d[ch * plane + p]).powi(2)).sum::<f64>().sqrt() + 1e-10
                };
                let (na, nb) = (norm(da), norm(db));
                for ch in 0..c {
                    let diff = f64::from(da[ch * plane + p]) / na - f64::from(db[ch * plane + p]) / nb;
                    layer += f64::from(lin[ch]) * diff * diff;
                }
            }
            total += layer / plane as f64;
        }
        Ok(total)
    }
}

/// Which metrics to compute besides PSNR and SSIM.
#[derive(Default, Clone, Copy)]
pub struct MetricSelection<'a> {
    pub lpips: Option<&'a dyn PerceptualMetric>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lpips: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub psnr: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lpips: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset_name: String,
    pub n_samples: usize,
    pub per_sample: Vec<SampleMetrics>,
    pub means: MetricMeans,
    #[serde(default)]
    pub failures: Vec<SampleFailure>,
}

impl MetricReport {
    /// Sorts rows by id and computes the means from them.
    pub fn from_rows(dataset_name: &str, mut rows: Vec<SampleMetrics>, failures: Vec<SampleFailure>) -> Self {
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let n = rows.len();
        let mean = |f: &dyn Fn(&SampleMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                rows.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let lpips = if n > 0 && rows.iter().all(|r| r.lpips.is_some()) {
            Some(mean(&|r| r.lpips.unwrap_or(0.0)))
        } else {
            None
        };
        let means = MetricMeans { psnr: mean(&|r| r.psnr), ssim: mean(&|r| r.ssim), lpips };
        Self { dataset_name: dataset_name.to_string(), n_samples: n, per_sample: rows, means, failures }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// `id,psnr,ssim[,lpips]` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let with_lpips = self.means.lpips.is_some();
        let mut out = String::from(if with_lpips { "id,psnr,ssim,lpips\n" } else { "id,psnr,ssim\n" });
        let mut row = |id: &str, p: f64, s: f64, l: Option<f64>| {
            let _ = write!(out, "{id},{p:.6},{s:.6}");
            if with_lpips {
                let _ = write!(out, ",{:.6}", l.unwrap_or(f64::NAN));
            }
            out.push('\n');
        };
        for r in &self.per_sample {
            row(&r.id, r.psnr, r.ssim, r.lpips);
        }
        row("mean", self.means.psnr, self.means.ssim, self.means.lpips);
        out
    }
}

/// Run the model over every sample of `manifest` and score `T̂` against `T`.
/// Failing samples are listed in the report instead of aborting the run.
pub fn evaluate_benchmark(
    model: &dyn RemovalModel,
    aux: AuxSettings,
    manifest: &DatasetManifest,
    depth_backend: &dyn DepthBackend,
    metrics: MetricSelection<'_>,
    dataset_name: &str,
) -> Result<MetricReport> {
    if manifest.is_empty() {
        return Err(Error::EmptyDataset(dataset_name.to_string()));
    }
    let mut rows = Vec::with_capacity(manifest.len());
    let mut failures = Vec::new();
    for i in 0..manifest.len() {
        let id = manifest.entries[i].id.clone();
        let scored = (|| -> Result<SampleMetrics> {
            let sample = manifest.load_entry(i)?;
            let channel = aux.compute(&sample.id, &sample.ambient, depth_backend)?;
            let (_, t_hat) = model_forward(model, &sample.ambient, &channel)?;
            Ok(SampleMetrics {
                id: sample.id.clone(),
                psnr: psnr(&t_hat, &sample.transmission)?,
                ssim: ssim(&t_hat, &sample.transmission)?,
                lpips: match metrics.lpips {
                    Some(m) => Some(m.distance(&t_hat, &sample.transmission)?),
                    None => None,
                },
            })
        })();
        match scored {
            Ok(row) => rows.push(row),
            Err(e) => {
                log::warn!("sample {id} failed: {e}");
                failures.push(SampleFailure { id, reason: e.to_string() });
            }
        }
    }
    failures.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(MetricReport::from_rows(dataset_name, rows, failures))
}

/// One row of a comparison figure.
#[derive(Debug, Clone)]
pub struct GridRow {
    pub ambient: ImageRGB,
    pub outputs: Vec<ImageRGB>,
    pub target: ImageRGB,
}

/// Pixel geometry of a comparison grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
    pub tile_h: usize,
    pub tile_w: usize,
}

const GRID_GAP: usize = 2;
const GLYPH_SCALE: usize = 2;
/// Height of the label band above the first row.
pub const GRID_HEADER: usize = 5 * GLYPH_SCALE + 4;

impl GridLayout {
    pub fn height(&self) -> usize {
        GRID_HEADER + self.rows * self.tile_h + (self.rows - 1) * GRID_GAP
    }

    pub fn width(&self) -> usize {
        self.cols * self.tile_w + (self.cols - 1) * GRID_GAP
    }

    /// Top-left pixel of tile `(row, col)`.
    pub fn tile_origin(&self, row: usize, col: usize) -> (usize, usize) {
        (GRID_HEADER + row * (self.tile_h + GRID_GAP), col * (self.tile_w + GRID_GAP))
    }
}

/// 3×5 glyphs, one 3-bit row per entry, most significant bit on the left.
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        'A' => [2, 5, 7, 5, 5],
        'B' => [6, 5, 6, 5, 6],
        'C' => [3, 4, 4, 4, 3],
        'D' => [6, 5, 5, 5, 6],
        'E' => [7, 4, 6, 4, 7],
        'F' => [7, 4, 6, 4, 4],
        'G' => [3, 4, 5, 5, 3],
        'H' => [5, 5, 7, 5, 5],
        'I' => [7, 2, 2, 2, 7],
        'J' => [1, 1, 1, 5, 2],
        'K' => [5, 5, 6, 5, 5],
        'L' => [4, 4, 4, 4, 7],
        'M' => [5, 7, 7, 5, 5],
        'N' => [6, 5, 5, 5, 5],
        'O' => [2, 5, 5, 5, 2],
        'P' => [6, 5, 6, 4, 4],
        'Q' => [2, 5, 5, 6, 3],
        'R' => [6, 5, 6, 5, 5],
        'S' => [3, 4, 2, 1, 6],
        'T' => [7, 2, 2, 2, 2],
        'U' => [5, 5, 5, 5, 7],
        'V' => [5, 5, 5, 5, 2],
        'W' => [5, 5, 7, 7, 5],
        'X' => [5, 5, 2, 5, 5],
        'Y' => [5, 5, 2, 2, 2],
        'Z' => [7, 1, 2, 4, 7],
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [6, 1, 2, 4, 7],
        '3' => [6, 1, 2, 1, 6],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 6, 1, 6],
        '6' => [3, 4, 7, 5, 7],
        '7' => [7, 1, 2, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 6],
        '-' => [0, 0, 7, 0, 0],
        '_' => [0, 0, 0, 0, 7],
        '.' => [0, 0, 0, 0, 2],
        _ => [0; 5],
    }
}

fn draw_label(canvas: &mut [f32], width: usize, x0: usize, max_w: usize, text: &str) {
    let advance = 4 * GLYPH_SCALE;
    let fit = (max_w / advance).max(1);
    for (i, ch) in text.chars().take(fit).enumerate() {
        let rows = glyph(ch);
        for (gy, bits) in rows.iter().enumerate() {
            for gx in 0..3 {
                if bits & (4 >> gx) == 0 {
                    continue;
                }
                for dy in 0..GLYPH_SCALE {
                    for dx in 0..GLYPH_SCALE {
                        let y = 2 + gy * GLYPH_SCALE + dy;
                        let x = x0 + i * advance + gx * GLYPH_SCALE + dx;
                        if x < x0 + max_w {
                            for c in 0..3 {
                                canvas[(y * width + x) * 3 + c] = 1.0;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Tile rows of `(ambient, outputs…, target)` under a label header, save as
/// an image, and return it with its layout.
pub fn comparison_grid(rows: &[GridRow], method_names: &[&str], path: &Path) -> Result<(ImageRGB, GridLayout)> {
    let first = rows
        .first()
        .ok_or_else(|| Error::InvalidSize("comparison grid needs at least one row".into()))?;
    let n_methods = first.outputs.len();
    if method_names.len() != n_methods {
        return Err(Error::ShapeMismatch(format!(
            "{} method names for {n_methods} outputs",
            method_names.len()
        )));
    }
    let (tile_h, tile_w) = first.ambient.shape();
    for row in rows {
        if row.outputs.len() != n_methods {
            return Err(Error::ShapeMismatch("rows have different method counts".into()));
        }
        for img in std::iter::once(&row.ambient).chain(&row.outputs).chain(std::iter::once(&row.target)) {
            first.ambient.same_shape(img, "comparison grid")?;
        }
    }
    let layout = GridLayout { rows: rows.len(), cols: n_methods + 2, tile_h, tile_w };
    let (h, w) = (layout.height(), layout.width());
    let mut canvas = vec![0.0f32; h * w * 3];
    let labels: Vec<&str> = std::iter::once("input")
        .chain(method_names.iter().copied())
        .chain(std::iter::once("gt"))
        .collect();
    for (col, label) in labels.iter().enumerate() {
        let (_, x0) = layout.tile_origin(0, col);
        draw_label(&mut canvas, w, x0, tile_w, label);
    }
    for (r, row) in rows.iter().enumerate() {
        let tiles = std::iter::once(&row.ambient).chain(&row.outputs).chain(std::iter::once(&row.target));
        for (col, img) in tiles.enumerate() {
            let (y0, x0) = layout.tile_origin(r, col);
            for y in 0..tile_h {
                let src = &img.data()[y * tile_w * 3..(y + 1) * tile_w * 3];
                let start = ((y0 + y) * w + x0) * 3;
                canvas[start..start + tile_w * 3].copy_from_slice(src);
            }
        }
    }
    let grid = ImageRGB::new(h, w, canvas)?;
    save_image(&grid, path)?;
    Ok((grid, layout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::load_image;

    fn pattern(h: usize, w: usize, seed: u64) -> ImageRGB {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * 3).map(|_| rng.random::<f32>()).collect();
        ImageRGB::new(h, w, data).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let x = ImageRGB::filled(16, 16, 0.3);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP);
        let y = ImageRGB::filled(16, 16, 0.4);
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 0.01);
        let a = ImageRGB::filled(16, 16, 0.0);
        let b = ImageRGB::filled(16, 16, 0.5);
        assert!((psnr(&a, &b).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-4);
        assert!(matches!(psnr(&a, &ImageRGB::filled(16, 8, 0.0)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn psnr_decreases_with_offset() {
        let x = ImageRGB::filled(12, 12, 0.2);
        let mut prev = f64::INFINITY;
        for k in 1..8 {
            let y = ImageRGB::filled(12, 12, 0.2 + 0.1 * k as f32);
            let p = psnr(&x, &y).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn ssim_examples() {
        let x = pattern(20, 24, 1);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let y = pattern(20, 24, 2);
        assert_eq!(ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        let a = ImageRGB::filled(16, 16, 0.5);
        let b = ImageRGB::filled(16, 16, 0.6);
        let want = (2.0 * 0.5 * 0.6 + 1e-4) / (0.25 + 0.36 + 1e-4);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-6);
        assert!(matches!(ssim(&pattern(10, 20, 0), &pattern(10, 20, 1)), Err(Error::TooSmall(_))));
    }

    #[test]
    fn lpips_basic_properties() {
        let m = LpipsVgg::random([4, 8, 8, 8, 8], 3);
        let x = pattern(32, 32, 4);
        let y = pattern(32, 32, 5);
        assert_eq!(m.distance(&x, &x).unwrap(), 0.0);
        let d = m.distance(&x, &y).unwrap();
        assert!(d > 0.0);
        assert!((d - m.distance(&y, &x).unwrap()).abs() < 1e-9 * d.max(1.0));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(LpipsVgg::open(dir.path()), Err(Error::BackendUnavailable(_))));
    }

    #[test]
    fn report_means_and_csv() {
        let rows = vec![
            SampleMetrics { id: "b".into(), psnr: 20.0, ssim: 0.5, lpips: None },
            SampleMetrics { id: "a".into(), psnr: 30.0, ssim: 0.9, lpips: None },
        ];
        let r = MetricReport::from_rows("toy", rows, vec![]);
        assert_eq!(r.per_sample[0].id, "a");
        assert_eq!(r.means.psnr, 25.0);
        assert!((r.means.ssim - 0.7).abs() < 1e-12);
        assert_eq!(r.means.lpips, None);
        let csv = r.to_csv();
        assert!(csv.starts_with("id,psnr,ssim\n"));
        assert_eq!(csv.lines().count(), 4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        r.save_json(&p).unwrap();
        assert_eq!(MetricReport::load_json(&p).unwrap(), r);
    }

    #[test]
    fn grid_layout_and_tiles() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.png");
        let rows: Vec<GridRow> = (0..2)
            .map(|i| GridRow {
                ambient: pattern(16, 20, 10 + i),
                outputs: (0..3).map(|m| pattern(16, 20, 20 + 3 * i + m)).collect(),
                target: pattern(16, 20, 40 + i),
            })
            .collect();
        let (grid, layout) = comparison_grid(&rows, &["ours", "1-step", "no-rdm"], &path).unwrap();
        assert_eq!((layout.rows, layout.cols), (2, 5));
        assert_eq!(grid.shape(), (layout.height(), layout.width()));
        let (y0, x0) = layout.tile_origin(0, 0);
        assert_eq!(grid.crop(y0, x0, 16, 20).unwrap(), rows[0].ambient);
        let (y1, x4) = layout.tile_origin(1, 4);
        assert_eq!(grid.crop(y1, x4, 16, 20).unwrap(), rows[1].target);
        // The header carries label pixels.
        assert!(grid.crop(0, 0, GRID_HEADER, layout.width()).unwrap().data().iter().any(|&v| v == 1.0));

        let loaded = load_image(&path).unwrap();
        assert_eq!(loaded.shape(), grid.shape());
        let tile = loaded.crop(y0, x0, 16, 20).unwrap();
        let quantized = ImageRGB::new(
            16,
            20,
            rows[0].ambient.data().iter().map(|v| (v * 255.0).round() / 255.0).collect(),
        )
        .unwrap();
        assert!(tile.max_abs_diff(&quantized) < 1e-6);

        let bad = vec![GridRow { ambient: pattern(16, 20, 0), outputs: vec![pattern(16, 18, 1)], target: pattern(16, 20, 2) }];
        assert!(matches!(comparison_grid(&bad, &["x"], &path), Err(Error::ShapeMismatch(_))));
    }
}

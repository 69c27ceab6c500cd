//! Depth estimation backends and the ranged depth map.
//!
//! A backend produces a relative depth map for the ambient image; the map is
//! min-max normalized per image and cut into `k` equal-width ranges. The
//! resulting codes are a fixed input channel: nothing downstream
//! differentiates through them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{blur_plane, load_gray, save_gray16, GrayMap, ImageRGB};

/// Number of ranges used unless configured otherwise.
pub const DEFAULT_K: usize = 4;

/// Which end of the depth axis a backend maps to larger values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthConvention {
    LargerIsNearer,
    LargerIsFarther,
    /// Not a depth at all; used by the weight-free test backend.
    Luminance,
}

impl std::str::FromStr for DepthConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "larger-is-nearer" => Ok(Self::LargerIsNearer),
            "larger-is-farther" => Ok(Self::LargerIsFarther),
            "luminance" => Ok(Self::Luminance),
            other => Err(Error::BadConfig(format!("unknown depth convention {other:?}"))),
        }
    }
}

/// A monocular depth model with fixed weights.
pub trait DepthBackend: Send + Sync {
    fn name(&self) -> &str;

    fn convention(&self) -> DepthConvention;

    /// Relative depth for `img`. `id` names the sample for backends that serve
    /// precomputed maps.
    fn infer(&self, id: &str, img: &ImageRGB) -> Result<GrayMap>;
}

/// Blurred Rec.601 luminance (σ = 4). Deterministic and weight-free.
#[derive(Debug, Clone, Copy, Default)]
pub struct PseudoDepth;

impl DepthBackend for PseudoDepth {
    fn name(&self) -> &str {
        "pseudo"
    }

    fn convention(&self) -> DepthConvention {
        DepthConvention::Luminance
    }

    fn infer(&self, _id: &str, img: &ImageRGB) -> Result<GrayMap> {
        Ok(pseudo_depth(img))
    }
}

pub fn pseudo_depth(img: &ImageRGB) -> GrayMap {
    let lum: Vec<f32> = img
        .data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    let blurred = blur_plane(&lum, img.height(), img.width(), 4.0);
    GrayMap::new(img.height(), img.width(), blurred).expect("finite input gives finite blur")
}

/// Serves depth maps computed offline by an external model (for example a
/// MiDaS export), stored as `<dir>/<id>.png` grayscale images.
#[derive(Debug, Clone)]
pub struct PrecomputedDepth {
    dir: PathBuf,
    convention: DepthConvention,
}

impl PrecomputedDepth {
    pub fn open(dir: &Path, convention: DepthConvention) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::BackendUnavailable(format!(
                "depth directory {} does not exist",
                dir.display()
            )));
        }
        Ok(Self { dir: dir.to_path_buf(), convention })
    }
}

impl DepthBackend for PrecomputedDepth {
    fn name(&self) -> &str {
        "precomputed"
    }

    fn convention(&self) -> DepthConvention {
        self.convention
    }

    fn infer(&self, id: &str, img: &ImageRGB) -> Result<GrayMap> {
        let path = self.dir.join(format!("{id}.png"));
        if !path.is_file() {
            return Err(Error::BackendUnavailable(format!(
                "no precomputed depth at {}",
                path.display()
            )));
        }
        let map = load_gray(&path)?;
        if map.shape() != img.shape() {
            return Err(Error::ShapeMismatch(format!(
                "depth {:?} for image {:?}",
                map.shape(),
                img.shape()
            )));
        }
        Ok(map)
    }
}

/// Run a backend and check its output contract.
pub fn estimate_depth(id: &str, img: &ImageRGB, backend: &dyn DepthBackend) -> Result<GrayMap> {
    let map = backend.infer(id, img)?;
    if map.shape() != img.shape() {
        return Err(Error::ShapeMismatch(format!(
            "backend {} returned {:?} for {:?}",
            backend.name(),
            map.shape(),
            img.shape()
        )));
    }
    Ok(map)
}

/// Per-pixel range indices in `0..k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RangedDepthMap {
    height: usize,
    width: usize,
    k: usize,
    codes: Vec<u16>,
}

impl RangedDepthMap {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// `codes / (k - 1)`, the single channel fed to the networks.
    pub fn encoding(&self) -> GrayMap {
        let denom = (self.k - 1) as f32;
        let data = self.codes.iter().map(|&c| c as f32 / denom).collect();
        GrayMap::new(self.height, self.width, data).expect("finite encoding")
    }

    pub fn distinct_codes(&self) -> usize {
        let mut seen = vec![false; self.k];
        self.codes.iter().for_each(|&c| seen[c as usize] = true);
        seen.into_iter().filter(|&s| s).count()
    }
}

/// `d' = (d - min) / (max - min)`, code = `min(floor(d' k), k - 1)`.
/// A flat map yields all-zero codes.
pub fn quantize_depth(depth: &GrayMap, k: usize) -> Result<RangedDepthMap> {
    if k < 2 || k > u16::MAX as usize {
        return Err(Error::InvalidK(k));
    }
    let (lo, hi) = depth.value_range();
    let span = hi as f64 - lo as f64;
    let codes = depth
        .data()
        .iter()
        .map(|&d| {
            if span <= 0.0 {
                return 0;
            }
            let n = (d as f64 - lo as f64) / span;
            ((n * k as f64).floor() as usize).min(k - 1) as u16
        })
        .collect();
    Ok(RangedDepthMap {
        height: depth.height(),
        width: depth.width(),
        k,
        codes,
    })
}

/// What the auxiliary input channel carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxMode {
    /// Quantized ranged depth map encoding.
    Ranged,
    /// Min-max normalized depth without quantization.
    RawDepth,
    /// All zeros (channel present, information removed).
    Zeroed,
}

impl std::str::FromStr for AuxMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ranged" => Ok(Self::Ranged),
            "raw-depth" => Ok(Self::RawDepth),
            "zeroed" => Ok(Self::Zeroed),
            other => Err(Error::BadConfig(format!("unknown aux mode {other:?}"))),
        }
    }
}

/// Build the auxiliary channel for a depth map.
pub fn aux_channel(depth: &GrayMap, mode: AuxMode, k: usize) -> Result<GrayMap> {
    let (h, w) = depth.shape();
    match mode {
        AuxMode::Ranged => Ok(quantize_depth(depth, k)?.encoding()),
        AuxMode::RawDepth => {
            let (lo, hi) = depth.value_range();
            let span = hi - lo;
            let data = depth
                .data()
                .iter()
                .map(|&d| if span > 0.0 { (d - lo) / span } else { 0.0 })
                .collect();
            GrayMap::new(h, w, data)
        }
        AuxMode::Zeroed => GrayMap::new(h, w, vec![0.0; h * w]),
    }
}

/// How a model's auxiliary channel is produced from an ambient image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxSettings {
    pub k: usize,
    pub mode: AuxMode,
}

impl Default for AuxSettings {
    fn default() -> Self {
        Self { k: DEFAULT_K, mode: AuxMode::Ranged }
    }
}

impl AuxSettings {
    /// Depth from `backend`, then [`aux_channel`].
    pub fn compute(&self, id: &str, img: &ImageRGB, backend: &dyn DepthBackend) -> Result<GrayMap> {
        if self.mode == AuxMode::Zeroed {
            let (h, w) = img.shape();
            return GrayMap::new(h, w, vec![0.0; h * w]);
        }
        aux_channel(&estimate_depth(id, img, backend)?, self.mode, self.k)
    }
}

/// Sidecar written next to exported depth images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthSidecar {
    pub min: f32,
    pub max: f32,
    pub k: usize,
    pub backend: String,
    pub convention: DepthConvention,
}

/// Write `depth.png` (normalized 16-bit), `rdm.png` (16-bit encoding) and `depth.json`.
pub fn write_depth_artifacts(
    depth: &GrayMap,
    rdm: &RangedDepthMap,
    backend: &dyn DepthBackend,
    out_dir: &Path,
) -> Result<DepthSidecar> {
    std::fs::create_dir_all(out_dir)?;
    let (min, max) = depth.value_range();
    save_gray16(depth, min, max, &out_dir.join("depth.png"))?;
    save_gray16(&rdm.encoding(), 0.0, 1.0, &out_dir.join("rdm.png"))?;
    let sidecar = DepthSidecar {
        min,
        max,
        k: rdm.k(),
        backend: backend.name().to_string(),
        convention: backend.convention(),
    };
    std::fs::write(out_dir.join("depth.json"), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let d = GrayMap::new(1, 4, vec![0.0, 0.1, 0.5, 0.9]).unwrap();
        let r = quantize_depth(&d, 4).unwrap();
        assert_eq!(r.codes(), &[0, 0, 2, 3]);
        let e = r.encoding();
        let expected = [0.0, 0.0, 2.0 / 3.0, 1.0];
        for (a, b) in e.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(DEFAULT_K, 4);
    }

    #[test]
    fn flat_map_gives_zero_codes() {
        let d = GrayMap::new(3, 3, vec![0.7; 9]).unwrap();
        let r = quantize_depth(&d, 4).unwrap();
        assert!(r.codes().iter().all(|&c| c == 0));
        assert!(r.encoding().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_k() {
        let d = GrayMap::new(1, 2, vec![0.0, 1.0]).unwrap();
        assert!(matches!(quantize_depth(&d, 1), Err(Error::InvalidK(1))));
        assert!(matches!(quantize_depth(&d, 0), Err(Error::InvalidK(0))));
    }

    #[test]
    fn encoding_endpoints() {
        let d = GrayMap::new(1, 5, vec![-3.0, -1.0, 0.0, 2.0, 5.0]).unwrap();
        let r = quantize_depth(&d, 5).unwrap();
        for (&c, &e) in r.codes().iter().zip(r.encoding().data()) {
            assert_eq!(e == 0.0, c == 0);
            assert_eq!(e == 1.0, c == 4);
        }
    }

    #[test]
    fn pseudo_depth_constants() {
        let gray = pseudo_depth(&ImageRGB::filled(12, 12, 0.5));
        assert!(gray.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
        assert_eq!(gray.value_range().0, gray.data()[0]);
        let white = pseudo_depth(&ImageRGB::filled(9, 14, 1.0));
        assert!(white.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn pseudo_depth_of_step_is_monotone_along_rows() {
        let img = ImageRGB::from_fn(16, 24, |_, x, _| if x < 12 { 0.0 } else { 1.0 });
        let d = pseudo_depth(&img);
        for y in 0..16 {
            for x in 1..24 {
                assert!(d.get(y, x) >= d.get(y, x - 1) - 1e-7, "row {y} col {x}");
            }
        }
    }

    #[test]
    fn estimate_is_deterministic_and_shape_preserving() {
        let img = ImageRGB::from_fn(336, 336, |y, x, c| ((y * 7 + x * 3 + c) % 17) as f32 / 16.0);
        let a = estimate_depth("x", &img, &PseudoDepth).unwrap();
        let b = estimate_depth("x", &img, &PseudoDepth).unwrap();
        assert_eq!(a.shape(), (336, 336));
        assert_eq!(a, b);
        let (lo, hi) = a.value_range();
        assert!(lo.is_finite() && hi.is_finite() && lo <= hi);
    }

    #[test]
    fn precomputed_backend_unavailable() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            PrecomputedDepth::open(&dir.path().join("none"), DepthConvention::LargerIsNearer),
            Err(Error::BackendUnavailable(_))
        ));
        let b = PrecomputedDepth::open(dir.path(), DepthConvention::LargerIsNearer).unwrap();
        assert!(matches!(
            b.infer("missing", &ImageRGB::filled(8, 8, 0.0)),
            Err(Error::BackendUnavailable(_))
        ));
    }

    #[test]
    fn precomputed_backend_reads_png() {
        let dir = tempfile::tempdir().unwrap();
        let map = GrayMap::new(8, 8, (0..64).map(|v| v as f32).collect()).unwrap();
        save_gray16(&map, 0.0, 63.0, &dir.path().join("a.png")).unwrap();
        let b = PrecomputedDepth::open(dir.path(), DepthConvention::LargerIsNearer).unwrap();
        let got = estimate_depth("a", &ImageRGB::filled(8, 8, 0.0), &b).unwrap();
        assert_eq!(got.value_range(), (0.0, 1.0));
        assert!(matches!(
            estimate_depth("a", &ImageRGB::filled(8, 9, 0.0), &b),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn aux_modes() {
        let d = GrayMap::new(1, 4, vec![0.0, 0.1, 0.5, 0.9]).unwrap();
        let raw = aux_channel(&d, AuxMode::RawDepth, 4).unwrap();
        assert!((raw.data()[2] - 0.5 / 0.9).abs() < 1e-6);
        assert!(aux_channel(&d, AuxMode::Zeroed, 4).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(aux_channel(&d, AuxMode::Ranged, 4).unwrap(), quantize_depth(&d, 4).unwrap().encoding());
    }
}

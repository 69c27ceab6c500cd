//! Image containers, PNG/JPEG I/O, resampling and the linear-blend synthesizer.

use std::path::Path;

use derefl_autograd::{reflect_index, Tensor};
use image::{ImageFormat, ImageReader};

use crate::datasets::{Provenance, TrainSample};
use crate::error::{Error, Result};

/// Smallest spatial size accepted by the pipeline entry points.
pub const MIN_SIZE: usize = 8;

/// H×W×3 channel-last sRGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRGB {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageRGB {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSize("image contains non-finite values".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn max_abs_diff(&self, other: &ImageRGB) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn clamped(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    pub fn same_shape(&self, other: &ImageRGB, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Rejects images below the pipeline minimum of 8×8.
    pub fn ensure_pipeline_size(&self) -> Result<()> {
        if self.height < MIN_SIZE || self.width < MIN_SIZE {
            return Err(Error::InvalidSize(format!(
                "{}x{} is below the {MIN_SIZE}x{MIN_SIZE} minimum",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Pixel-wise `clamp(self - other, 0, 1)`.
    pub fn clamped_residual(&self, other: &ImageRGB) -> Result<ImageRGB> {
        self.same_shape(other, "residual")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).clamp(0.0, 1.0))
            .collect();
        Ok(Self { data, ..*self })
    }

    /// Planar `[1, 3, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.height * self.width;
        let mut out = vec![0.0f32; plane * 3];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c];
            }
        }
        Tensor::new(out, &[1, 3, self.height, self.width]).expect("length matches")
    }

    /// Inverse of [`ImageRGB::to_tensor`]; values are clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 || c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected a [1, 3, H, W] tensor, got {:?}",
                t.shape()
            )));
        }
        let plane = h * w;
        let src = t.data();
        let mut data = Vec::with_capacity(plane * 3);
        for i in 0..plane {
            for c in 0..3 {
                data.push(src[c * plane + i].clamp(0.0, 1.0));
            }
        }
        Self::new(h, w, data)
    }

    /// One channel as a row-major plane.
    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    fn from_channels(height: usize, width: usize, planes: &[Vec<f32>; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for i in 0..height * width {
            for p in planes {
                data.push(p[i]);
            }
        }
        Self { height, width, data }
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x, c| self.get(y, self.width - 1 - x, c))
    }

    /// Window `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::InvalidSize(format!(
                "crop {h}x{w}+{y0}+{x0} outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(h, w, |y, x, c| self.get(y0 + y, x0 + x, c)))
    }
}

/// H×W single-channel float map with its declared value range.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
    value_range: (f32, f32),
}

impl GrayMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width} map",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSize("map contains non-finite values".into()));
        }
        let value_range = data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Ok(Self { height, width, data, value_range })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// `(min, max)` over all elements.
    pub fn value_range(&self) -> (f32, f32) {
        self.value_range
    }

    /// `[1, 1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.data.clone(), &[1, 1, self.height, self.width]).expect("length matches")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 || c != 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected a [1, 1, H, W] tensor, got {:?}",
                t.shape()
            )));
        }
        Self::new(h, w, t.to_vec())
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        let data = (0..self.height)
            .flat_map(|y| (0..w).map(move |x| (y, w - 1 - x)))
            .map(|(y, x)| self.get(y, x))
            .collect();
        Self::new(self.height, w, data).expect("same size")
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::InvalidSize(format!(
                "crop {h}x{w}+{y0}+{x0} outside {}x{}",
                self.height, self.width
            )));
        }
        let data = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y0 + y, x0 + x)))
            .map(|(y, x)| self.get(y, x))
            .collect();
        Self::new(h, w, data)
    }
}

/// Decode a PNG or JPEG file into `[0, 1]` floats (8-bit / 255, 16-bit / 65535).
pub fn load_image(path: &Path) -> Result<ImageRGB> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = ImageReader::open(path)?
        .with_guessed_format()
        .map_err(|e| Error::CorruptData { path: path.into(), reason: e.to_string() })?;
    match reader.format() {
        Some(ImageFormat::Png | ImageFormat::Jpeg) => {}
        _ => return Err(Error::UnsupportedFormat(path.to_path_buf())),
    }
    let img = reader
        .decode()
        .map_err(|e| Error::CorruptData { path: path.into(), reason: e.to_string() })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = if img.color().bytes_per_pixel() / img.color().channel_count() >= 2 {
        img.to_rgb16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()
    } else {
        img.to_rgb8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect()
    };
    ImageRGB::new(h, w, data)
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => Ok(ImageFormat::Png),
        Some("jpg" | "jpeg") => Ok(ImageFormat::Jpeg),
        _ => Err(Error::UnsupportedFormat(path.to_path_buf())),
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode as 8-bit PNG or JPEG, chosen by file extension.
pub fn save_image(img: &ImageRGB, path: &Path) -> Result<()> {
    let format = format_for(path)?;
    let raw: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, raw)
        .expect("buffer length matches");
    buf.save_with_format(path, format)
        .map_err(|e| Error::WriteFailure { path: path.into(), reason: e.to_string() })
}

/// Write `(v - lo) / (hi - lo)` as a 16-bit grayscale PNG (zeros when flat).
pub fn save_gray16(map: &GrayMap, lo: f32, hi: f32, path: &Path) -> Result<()> {
    let span = hi - lo;
    let raw: Vec<u16> = map
        .data
        .iter()
        .map(|&v| {
            let n = if span > 0.0 { (v - lo) / span } else { 0.0 };
            (n.clamp(0.0, 1.0) * 65535.0).round() as u16
        })
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
        map.width as u32,
        map.height as u32,
        raw,
    )
    .expect("buffer length matches");
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::WriteFailure { path: path.into(), reason: e.to_string() })
}

/// Read a single-channel PNG into `[0, 1]` (16-bit / 65535, 8-bit / 255).
pub fn load_gray(path: &Path) -> Result<GrayMap> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|e| Error::CorruptData { path: path.into(), reason: e.to_string() })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .to_luma16()
        .into_raw()
        .into_iter()
        .map(|v| v as f32 / 65535.0)
        .collect();
    GrayMap::new(h, w, data)
}

// Half-pixel-centre source coordinate and blend weight along one axis.
fn bilinear_taps(out: usize, inp: usize) -> Vec<(usize, usize, f32)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &ImageRGB, out_h: usize, out_w: usize) -> Result<ImageRGB> {
    if out_h < MIN_SIZE || out_w < MIN_SIZE {
        return Err(Error::InvalidSize(format!(
            "resize target {out_h}x{out_w} below {MIN_SIZE}x{MIN_SIZE}"
        )));
    }
    if img.height == 0 || img.width == 0 {
        return Err(Error::InvalidSize("empty source image".into()));
    }
    let ys = bilinear_taps(out_h, img.height);
    let xs = bilinear_taps(out_w, img.width);
    let out = ImageRGB::from_fn(out_h, out_w, |y, x, c| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = img.get(y0, x0, c) * (1.0 - fx) + img.get(y0, x1, c) * fx;
        let bottom = img.get(y1, x0, c) * (1.0 - fx) + img.get(y1, x1, c) * fx;
        top * (1.0 - fy) + bottom * fy
    });
    Ok(out.clamped())
}

/// Normalized Gaussian taps of radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    gaussian_kernel_sized(sigma, (3.0 * sigma).ceil() as usize)
}

/// Normalized Gaussian taps over `-radius..=radius`.
pub fn gaussian_kernel_sized(sigma: f32, radius: usize) -> Vec<f64> {
    let s = f64::from(sigma);
    let r = radius as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * s * s)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian blur of one plane with reflected borders.
pub fn blur_plane(plane: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return plane.to_vec();
    }
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let acc: f64 = k
                .iter()
                .enumerate()
                .map(|(i, t)| t * plane[y * w + reflect_index(x as isize + i as isize - r, w)] as f64)
                .sum();
            tmp[y * w + x] = acc as f32;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let acc: f64 = k
                .iter()
                .enumerate()
                .map(|(i, t)| t * tmp[reflect_index(y as isize + i as isize - r, h) * w + x] as f64)
                .sum();
            out[y * w + x] = acc as f32;
        }
    }
    out
}

pub fn gaussian_blur(img: &ImageRGB, sigma: f32) -> ImageRGB {
    let planes = [0, 1, 2].map(|c| blur_plane(&img.channel(c), img.height, img.width, sigma));
    ImageRGB::from_channels(img.height, img.width, &planes).clamped()
}

/// Additive blend `I = clamp(T + alpha * blur(R, sigma))`; the stored
/// reflection is the effective layer `clamp(I - T)`.
pub fn linear_synthesize(
    transmission: &ImageRGB,
    reflection: &ImageRGB,
    alpha: f32,
    blur_sigma: f32,
    id: &str,
) -> Result<TrainSample> {
    transmission.same_shape(reflection, "linear_synthesize")?;
    if !(0.0..=1.0).contains(&alpha) || blur_sigma < 0.0 || !blur_sigma.is_finite() {
        return Err(Error::BadConfig(format!(
            "alpha {alpha} must be in [0,1] and blur sigma {blur_sigma} >= 0"
        )));
    }
    let blurred = gaussian_blur(reflection, blur_sigma);
    let data = transmission
        .data
        .iter()
        .zip(&blurred.data)
        .map(|(t, r)| (t + alpha * r).clamp(0.0, 1.0))
        .collect();
    let ambient = ImageRGB { data, ..*transmission };
    let effective = ambient.clamped_residual(transmission)?;
    Ok(TrainSample {
        id: id.to_string(),
        ambient,
        transmission: transmission.clone(),
        reflection: Some(effective),
        provenance: Provenance::LinearSynthetic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(seed: u64, h: usize, w: usize) -> ImageRGB {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * 3).map(|_| rng.random::<f32>()).collect();
        ImageRGB::new(h, w, data).unwrap()
    }

    #[test]
    fn png_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("px.png");
        let buf = image::RgbImage::from_raw(3, 1, vec![255, 255, 255, 0, 0, 0, 128, 128, 128]).unwrap();
        buf.save(&path).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(0, 1, 1), 0.0);
        assert!((img.get(0, 2, 2) - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn sixteen_bit_png_divides_by_65535() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        let buf = image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(1, 1, vec![65535u16, 0, 32768]).unwrap();
        buf.save(&path).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(0, 0, 1), 0.0);
        assert!((img.get(0, 0, 2) - 32768.0 / 65535.0).abs() < 1e-7);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_image(&dir.path().join("nope.png")),
            Err(Error::MissingFile(_))
        ));
        let bmp = dir.path().join("x.bmp");
        std::fs::write(&bmp, b"BM\0\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(load_image(&bmp), Err(Error::UnsupportedFormat(_))));
        let bad = dir.path().join("bad.png");
        let mut bytes = b"\x89PNG\r\n\x1a\n".to_vec();
        bytes.extend_from_slice(&[0u8; 20]);
        std::fs::write(&bad, bytes).unwrap();
        assert!(matches!(load_image(&bad), Err(Error::CorruptData { .. })));
    }

    #[test]
    fn save_constant_images() {
        let dir = tempfile::tempdir().unwrap();
        for v in [0.0, 1.0] {
            let path = dir.path().join(format!("c{v}.png"));
            save_image(&ImageRGB::filled(16, 16, v), &path).unwrap();
            assert!(load_image(&path).unwrap().data().iter().all(|&p| p == v));
        }
    }

    #[test]
    fn save_into_missing_directory_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("no/such/dir/x.png");
        assert!(matches!(
            save_image(&ImageRGB::filled(8, 8, 0.5), &path),
            Err(Error::WriteFailure { .. })
        ));
    }

    #[test]
    fn random_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.png");
        let img = random_image(11, 19, 23);
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert!(back.max_abs_diff(&img) <= 1.0 / 255.0);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = random_image(1, 12, 9);
        assert_eq!(resize_bilinear(&img, 12, 9).unwrap(), img);
        let c = ImageRGB::filled(10, 13, 0.37);
        let r = resize_bilinear(&c, 31, 8).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
        assert!(matches!(resize_bilinear(&c, 7, 20), Err(Error::InvalidSize(_))));
    }

    #[test]
    fn resize_checkerboard_interior_is_blended() {
        let board = ImageRGB::from_fn(8, 8, |y, x, _| ((y + x) % 2) as f32);
        let up = resize_bilinear(&board, 16, 16).unwrap();
        for y in 1..15 {
            for x in 1..15 {
                let v = up.get(y, x, 0);
                assert!(v > 0.0 && v < 1.0, "({y},{x}) = {v}");
            }
        }
    }

    #[test]
    fn linear_synthesis_cases() {
        let t = random_image(2, 16, 16);
        let r = random_image(3, 16, 16);
        let s = linear_synthesize(&t, &r, 0.0, 1.5, "a").unwrap();
        assert_eq!(s.ambient, t);
        assert!(s.reflection.unwrap().data().iter().all(|&v| v == 0.0));

        let zero = ImageRGB::filled(16, 16, 0.0);
        let s = linear_synthesize(&zero, &r, 1.0, 0.0, "b").unwrap();
        assert_eq!(s.ambient, r);

        let s = linear_synthesize(
            &ImageRGB::filled(8, 8, 0.5),
            &ImageRGB::filled(8, 8, 0.8),
            0.5,
            0.0,
            "c",
        )
        .unwrap();
        assert!(s.ambient.data().iter().all(|&v| (v - 0.9).abs() < 1e-6));
        assert_eq!(s.provenance, Provenance::LinearSynthetic);

        assert!(matches!(
            linear_synthesize(&t, &ImageRGB::filled(8, 16, 0.0), 0.5, 0.0, "d"),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn blur_preserves_constants() {
        let img = ImageRGB::filled(9, 11, 0.25);
        let b = gaussian_blur(&img, 4.0);
        assert!(b.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
        assert_eq!(gaussian_kernel(1.0).len(), 7);
    }

    #[test]
    fn tensor_roundtrip() {
        let img = random_image(4, 8, 10);
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[1, 3, 8, 10]);
        assert_eq!(ImageRGB::from_tensor(&t).unwrap(), img);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn synthesis_output_is_clamped(seed in 0u64..1000, alpha in 0.0f32..=1.0, sigma in 0.0f32..3.0) {
                let t = random_image(seed, 12, 12);
                let r = random_image(seed + 1, 12, 12);
                let s = linear_synthesize(&t, &r, alpha, sigma, "p").unwrap();
                prop_assert!(s.ambient.data().iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert!(s.reflection.unwrap().data().iter().all(|v| (0.0..=1.0).contains(v)));
            }

            #[test]
            fn brighter_with_larger_alpha(a1 in 0.0f32..=0.5, extra in 0.0f32..=0.5, seed in 0u64..100) {
                // T <= 0.5 and R <= 0.5 keep T + alpha*R below 1 (no clamping)
                let t = random_image(seed, 10, 10);
                let t = ImageRGB::new(10, 10, t.data().iter().map(|v| v * 0.5).collect()).unwrap();
                let r = ImageRGB::new(10, 10, random_image(seed + 7, 10, 10).data().iter().map(|v| v * 0.5).collect()).unwrap();
                let lo = linear_synthesize(&t, &r, a1, 1.0, "lo").unwrap();
                let hi = linear_synthesize(&t, &r, a1 + extra, 1.0, "hi").unwrap();
                prop_assert!(hi.ambient.mean() >= lo.ambient.mean());
            }

            #[test]
            fn resize_stays_in_range(seed in 0u64..1000, h in 8usize..40, w in 8usize..40) {
                let img = random_image(seed, 13, 17);
                let r = resize_bilinear(&img, h, w).unwrap();
                prop_assert_eq!(r.shape(), (h, w));
                prop_assert!(r.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}

//! Paired-image manifests, deterministic iteration and joint augmentation.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{linear_synthesize, load_image, save_image, GrayMap, ImageRGB};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Real,
    Refgan,
    LinearSynthetic,
}

impl std::str::FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Self::Real),
            "refgan" => Ok(Self::Refgan),
            "linear-synthetic" => Ok(Self::LinearSynthetic),
            other => Err(Error::BadConfig(format!("unknown provenance {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Ambient / transmission pair, optionally with its reflection layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub id: String,
    pub ambient: ImageRGB,
    pub transmission: ImageRGB,
    pub reflection: Option<ImageRGB>,
    pub provenance: Provenance,
}

impl TrainSample {
    pub fn validate(&self) -> Result<()> {
        self.ambient.same_shape(&self.transmission, &self.id)?;
        if let Some(r) = &self.reflection {
            self.ambient.same_shape(r, &self.id)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub ambient: PathBuf,
    pub transmission: PathBuf,
    pub reflection: Option<PathBuf>,
    pub provenance: Provenance,
}

/// JSON-serializable list of paired files relative to `root`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

/// A file that matched one side of the pairing rule but not the other.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnpairedFile {
    pub path: PathBuf,
    pub stem: String,
}

/// Wildcard patterns (relative to the root) locating each side of a pair.
/// Only the file-name component may contain `*` or `?`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairingRule {
    pub ambient: String,
    pub transmission: String,
    pub reflection: Option<String>,
}

impl Default for PairingRule {
    fn default() -> Self {
        Self {
            ambient: "ambient/*".into(),
            transmission: "transmission/*".into(),
            reflection: Some("reflection/*".into()),
        }
    }
}

fn wildcard_match(pattern: &[u8], name: &[u8]) -> bool {
    match (pattern.first(), name.first()) {
        (None, None) => true,
        (Some(b'*'), _) => {
            wildcard_match(&pattern[1..], name) || (!name.is_empty() && wildcard_match(pattern, &name[1..]))
        }
        (Some(b'?'), Some(_)) => wildcard_match(&pattern[1..], &name[1..]),
        (Some(p), Some(n)) if p == n => wildcard_match(&pattern[1..], &name[1..]),
        _ => false,
    }
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Image files matching `pattern` under `root`, keyed by file stem.
fn collect(root: &Path, pattern: &str) -> Result<BTreeMap<String, PathBuf>> {
    let (dir, name_pat) = match pattern.rsplit_once('/') {
        Some((d, n)) => (root.join(d), n),
        None => (root.to_path_buf(), pattern),
    };
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(&dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if !path.is_file() || !is_image(&path) || !wildcard_match(name_pat.as_bytes(), name.as_bytes()) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or(name).to_string();
        let rel = path.strip_prefix(root).unwrap_or(&path).to_path_buf();
        out.insert(stem, rel);
    }
    Ok(out)
}

/// Pair files by shared stem. Unpaired files are reported, not fatal.
pub fn build_manifest(
    root: &Path,
    rule: &PairingRule,
    provenance: Provenance,
    split: Split,
) -> Result<(DatasetManifest, Vec<UnpairedFile>)> {
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let ambient = collect(root, &rule.ambient)?;
    let transmission = collect(root, &rule.transmission)?;
    let reflection = match &rule.reflection {
        Some(p) => collect(root, p)?,
        None => BTreeMap::new(),
    };
    let mut warnings = Vec::new();
    let mut entries = Vec::new();
    for (stem, a) in &ambient {
        match transmission.get(stem) {
            Some(t) => entries.push(ManifestEntry {
                id: stem.clone(),
                ambient: a.clone(),
                transmission: t.clone(),
                reflection: reflection.get(stem).cloned(),
                provenance,
            }),
            None => warnings.push(UnpairedFile { path: root.join(a), stem: stem.clone() }),
        }
    }
    for (stem, t) in &transmission {
        if !ambient.contains_key(stem) {
            warnings.push(UnpairedFile { path: root.join(t), stem: stem.clone() });
        }
    }
    for w in &warnings {
        log::warn!("unpaired file excluded: {}", w.path.display());
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset(root.display().to_string()));
    }
    // BTreeMap iteration already yields stems in sorted order.
    Ok((DatasetManifest { root: root.to_path_buf(), split, entries }, warnings))
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            self.root.join(rel)
        }
    }

    /// Unique ids and existing files.
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::EmptyDataset(self.root.display().to_string()));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::InvalidManifest(format!("duplicate id {:?}", e.id)));
            }
            let paths = [Some(&e.ambient), Some(&e.transmission), e.reflection.as_ref()];
            for p in paths.into_iter().flatten() {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::InvalidManifest(format!(
                        "entry {:?} references missing file {}",
                        e.id,
                        full.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Read a manifest; a relative `root` is taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut m: DatasetManifest = serde_json::from_slice(&std::fs::read(path)?)?;
        if m.root.is_relative() {
            if let Some(parent) = path.parent() {
                m.root = parent.join(&m.root);
            }
        }
        Ok(m)
    }

    /// Entry indices in id order, or a seed-determined permutation of them.
    pub fn order(&self, seed: u64, shuffle: bool) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.entries.len()).collect();
        idx.sort_by(|&a, &b| self.entries[a].id.cmp(&self.entries[b].id));
        if shuffle {
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        idx
    }

    pub fn load_entry(&self, index: usize) -> Result<TrainSample> {
        let e = &self.entries[index];
        let fail = |err: Error| Error::LoadFailure { id: e.id.clone(), reason: err.to_string() };
        let ambient = load_image(&self.resolve(&e.ambient)).map_err(fail)?;
        let transmission = load_image(&self.resolve(&e.transmission)).map_err(fail)?;
        let reflection = match &e.reflection {
            Some(p) => Some(load_image(&self.resolve(p)).map_err(fail)?),
            None => None,
        };
        let sample = TrainSample {
            id: e.id.clone(),
            ambient,
            transmission,
            reflection,
            provenance: e.provenance,
        };
        sample.validate().map_err(fail)?;
        Ok(sample)
    }

    /// Drop entries of the given provenance.
    pub fn without(&self, provenance: Provenance) -> DatasetManifest {
        DatasetManifest {
            entries: self
                .entries
                .iter()
                .filter(|e| e.provenance != provenance)
                .cloned()
                .collect(),
            ..self.clone()
        }
    }
}

/// Single-sample stream over a manifest.
pub struct SampleStream<'a> {
    manifest: &'a DatasetManifest,
    order: std::vec::IntoIter<usize>,
}

impl Iterator for SampleStream<'_> {
    type Item = Result<TrainSample>;

    fn next(&mut self) -> Option<Self::Item> {
        self.order.next().map(|i| self.manifest.load_entry(i))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.order.size_hint()
    }
}

pub fn iterate(manifest: &DatasetManifest, seed: u64, shuffle: bool) -> SampleStream<'_> {
    SampleStream {
        manifest,
        order: manifest.order(seed, shuffle).into_iter(),
    }
}

/// A sampled crop window and flip decision, applied identically to every
/// layer of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentWindow {
    pub y0: usize,
    pub x0: usize,
    pub size: usize,
    pub flip: bool,
}

impl AugmentWindow {
    pub fn sample(height: usize, width: usize, seed: u64, crop: usize, hflip_prob: f32) -> Result<Self> {
        if crop == 0 || crop > height.min(width) {
            return Err(Error::CropTooLarge { crop, height, width });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y0 = rng.random_range(0..=height - crop);
        let x0 = rng.random_range(0..=width - crop);
        let flip = rng.random::<f32>() < hflip_prob;
        Ok(Self { y0, x0, size: crop, flip })
    }

    /// Whether applying the window leaves an image of this shape unchanged.
    pub fn is_identity(&self, height: usize, width: usize) -> bool {
        !self.flip && self.y0 == 0 && self.x0 == 0 && self.size == height && self.size == width
    }

    pub fn apply(&self, img: &ImageRGB) -> Result<ImageRGB> {
        let c = img.crop(self.y0, self.x0, self.size, self.size)?;
        Ok(if self.flip { c.flip_horizontal() } else { c })
    }

    pub fn apply_map(&self, map: &GrayMap) -> Result<GrayMap> {
        let c = map.crop(self.y0, self.x0, self.size, self.size)?;
        Ok(if self.flip { c.flip_horizontal() } else { c })
    }
}

/// Random square crop plus horizontal flip, shared by all layers of the sample.
pub fn augment(sample: &TrainSample, seed: u64, crop: usize, hflip_prob: f32) -> Result<TrainSample> {
    let (h, w) = sample.ambient.shape();
    let win = AugmentWindow::sample(h, w, seed, crop, hflip_prob)?;
    augment_with(sample, &win)
}

pub fn augment_with(sample: &TrainSample, win: &AugmentWindow) -> Result<TrainSample> {
    Ok(TrainSample {
        id: sample.id.clone(),
        ambient: win.apply(&sample.ambient)?,
        transmission: win.apply(&sample.transmission)?,
        reflection: sample.reflection.as_ref().map(|r| win.apply(r)).transpose()?,
        provenance: sample.provenance,
    })
}

/// Procedural scene: a smooth colour gradient with random discs and bars.
pub fn procedural_scene(height: usize, width: usize, seed: u64) -> ImageRGB {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [[f32; 3]; 2] = [
        [rng.random(), rng.random(), rng.random()],
        [rng.random(), rng.random(), rng.random()],
    ];
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let shapes: Vec<(bool, f32, f32, f32, f32, [f32; 3])> = (0..rng.random_range(3..7))
        .map(|_| {
            (
                rng.random::<bool>(),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.08..0.3),
                rng.random_range(0.05..0.2),
                [rng.random(), rng.random(), rng.random()],
            )
        })
        .collect();
    let mut img = ImageRGB::from_fn(height, width, |y, x, c| {
        let (u, v) = (x as f32 / width as f32, y as f32 / height as f32);
        let t = (0.5 + 0.5 * ((u - 0.5) * ca + (v - 0.5) * sa) * 1.4).clamp(0.0, 1.0);
        let mut val = base[0][c] * (1.0 - t) + base[1][c] * t;
        for &(disc, cx, cy, r, half, col) in &shapes {
            let inside = if disc {
                (u - cx).powi(2) + (v - cy).powi(2) < r * r
            } else {
                (u - cx).abs() < r && (v - cy).abs() < half
            };
            if inside {
                val = col[c];
            }
        }
        val
    });
    img = img.clamped();
    img
}

/// Write `n` linear-synthetic pairs of `size`×`size` under
/// `root/{ambient,transmission,reflection}` and return their manifest.
pub fn write_linear_synthetic_set(root: &Path, n: usize, size: usize, seed: u64, split: Split) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::EmptyDataset("requested an empty synthetic set".into()));
    }
    for dir in ["ambient", "transmission", "reflection"] {
        std::fs::create_dir_all(root.join(dir))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("syn{i:05}");
        let t = procedural_scene(size, size, rng.random());
        let r = procedural_scene(size, size, rng.random());
        let alpha = rng.random_range(0.3..0.6);
        let sigma = rng.random_range(0.5..2.0);
        let sample = linear_synthesize(&t, &r, alpha, sigma, &id)?;
        let rel = |dir: &str| PathBuf::from(dir).join(format!("{id}.png"));
        save_image(&sample.ambient, &root.join(rel("ambient")))?;
        save_image(&sample.transmission, &root.join(rel("transmission")))?;
        save_image(sample.reflection.as_ref().expect("linear synthesis keeps R"), &root.join(rel("reflection")))?;
        entries.push(ManifestEntry {
            id: id.clone(),
            ambient: rel("ambient"),
            transmission: rel("transmission"),
            reflection: Some(rel("reflection")),
            provenance: Provenance::LinearSynthetic,
        });
    }
    let manifest = DatasetManifest { root: root.to_path_buf(), split, entries };
    manifest.save(&root.join("manifest.json"))?;
    Ok(manifest)
}

//! Datasets: seeded synthetic blobs and the CIFAR-10 binary format.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use advnas_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Images in `[0, 1]`, shape `[N, C, H, W]`, with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select_batch(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((
            self.images.select_batch(indices)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    /// First `n` samples.
    pub fn limit(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Ok(Self {
            images: self.images.narrow_batch(0, n)?,
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        })
    }

    /// Seeded shuffle into two equal halves; an odd sample is dropped.
    pub fn split_halves(&self, seed: u64) -> Result<(Self, Self)> {
        if self.len() < 2 {
            return Err(Error::Data(format!(
                "{} samples cannot be split into train and validation halves",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let half = self.len() / 2;
        Ok((self.subset(&idx[..half])?, self.subset(&idx[half..2 * half])?))
    }

    /// Averages `factor × factor` pixel blocks.
    pub fn downscale(&self, factor: usize) -> Result<Self> {
        if factor <= 1 {
            return Ok(self.clone());
        }
        let [c, h, w] = self.image_shape();
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Data(format!(
                "image extent {h}x{w} not divisible by downscale factor {factor}"
            )));
        }
        let (oh, ow) = (h / factor, w / factor);
        let n = self.len();
        let src = self.images.data();
        let mut out = vec![0.0; n * c * oh * ow];
        let norm = (factor * factor) as f64;
        for plane in 0..n * c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..factor {
                        let row = plane * h * w + (y * factor + dy) * w + x * factor;
                        s += src[row..row + factor].iter().sum::<f64>();
                    }
                    out[plane * oh * ow + y * ow + x] = s / norm;
                }
            }
        }
        Ok(Self {
            images: Tensor::new(&[n, c, oh, ow], out)?,
            labels: self.labels.clone(),
            classes: self.classes,
        })
    }
}

/// Seeded permutation of `0..n`.
pub fn shuffled(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Random shift by up to `pad` pixels (zero fill) and horizontal flip, per image.
pub fn augment(images: &Tensor, pad: usize, rng: &mut impl Rng) -> Tensor {
    let s = images.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let src = images.data();
    let mut out = vec![0.0; src.len()];
    let p = pad as i64;
    for i in 0..n {
        let dy = rng.random_range(-p..=p) as isize;
        let dx = rng.random_range(-p..=p) as isize;
        let flip = rng.random_bool(0.5);
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = if flip { w - 1 - x } else { x };
                    let sx = sx0 as isize + dx;
                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        out[base + y * w + x] = src[base + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    Tensor::new(s, out).expect("same shape")
}

/// Generator settings for [`synth_blobs`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub samples: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// Amplitude of the class pattern.
    pub separation: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Maximum random shift of the pattern centre, in pixels.
    #[serde(default)]
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            samples: 256,
            classes: 2,
            height: 16,
            width: 16,
            separation: 0.25,
            noise: 0.35,
            jitter: 3.0,
            seed: 0,
        }
    }
}

/// Class-dependent Gaussian blobs on a grey background.
///
/// Class `k` gets a centre on the circle of radius `extent/4` around the image
/// centre, at angle `2π(k + φ/2)/classes` with `φ ~ U[0, 1)`, and an RGB
/// colour vector with entries drawn from `U[-1, 1]`. Sample `i` has
/// label `i mod classes`; its pixel `(ch, y, x)` is
/// `0.5 + separation/2 · colour[ch] · exp(-d²/(2σ²)) + noise·z`, clamped to
/// `[0, 1]`, where `d` is the distance to the class centre shifted by up to
/// `jitter` pixels, `σ = min(H, W)/4` and `z` is standard normal.
pub fn synth_blobs(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Config(format!("synthetic data needs at least 2 classes, got {}", spec.classes)));
    }
    if spec.height == 0 || spec.width == 0 {
        return Err(Error::Config("synthetic image extent must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height as f64, spec.width as f64);
    let protos: Vec<([f64; 2], [f64; 3])> = (0..spec.classes)
        .map(|k| {
            let phase: f64 = rng.random_range(0.0..1.0);
            let angle = 2.0 * PI * (k as f64 + 0.5 * phase) / spec.classes as f64;
            let centre = [h / 2.0 + h / 4.0 * angle.sin(), w / 2.0 + w / 4.0 * angle.cos()];
            let colour = [
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
            ];
            (centre, colour)
        })
        .collect();
    let sigma = h.min(w) / 4.0;
    let plane = spec.height * spec.width;
    let mut data = Vec::with_capacity(spec.samples * 3 * plane);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let k = i % spec.classes;
        let (centre, colour) = protos[k];
        let cy = centre[0] + rng.random_range(-1.0..=1.0) * spec.jitter;
        let cx = centre[1] + rng.random_range(-1.0..=1.0) * spec.jitter;
        for amp in colour {
            for y in 0..spec.height {
                for x in 0..spec.width {
                    let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                    let bump = (-d2 / (2.0 * sigma * sigma)).exp();
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let v = 0.5 + spec.separation / 2.0 * amp * bump + spec.noise * z;
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(k);
    }
    Dataset::new(
        Tensor::new(&[spec.samples, 3, spec.height, spec.width], data)?,
        labels,
        spec.classes,
    )
}

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

/// Parses concatenated CIFAR-10 binary records: one label byte (0–9), then
/// 1024 red, 1024 green and 1024 blue bytes, each plane row-major.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let offset = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::Data(format!(
            "truncated record at byte offset {offset}: {} bytes is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Data(format!("record {i}: label byte {} exceeds 9", rec[0])));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(Tensor::new(&[n, 3, CIFAR_SIDE, CIFAR_SIDE], data)?, labels, 10)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarSplit {
    Train,
    Test,
}

/// Reads `data_batch_1.bin`..`data_batch_5.bin` or `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path, split: CifarSplit) -> Result<Dataset> {
    let files: Vec<PathBuf> = match split {
        CifarSplit::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        CifarSplit::Test => vec![dir.join("test_batch.bin")],
    };
    let mut bytes = Vec::new();
    for f in &files {
        let b = std::fs::read(f).map_err(|e| Error::Data(format!("{}: {e}", f.display())))?;
        if b.len() % CIFAR_RECORD != 0 {
            parse_cifar10(&b).map_err(|e| Error::Data(format!("{}: {e}", f.display())))?;
        }
        bytes.extend(b);
    }
    parse_cifar10(&bytes)
}

/// Where the images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// `train + test` samples drawn from one generator; the first `train` form
    /// the training split.
    Synthetic {
        train: usize,
        test: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_extent")]
        extent: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default = "default_jitter")]
        jitter: f64,
        #[serde(default)]
        seed: u64,
    },
    Cifar10 {
        path: PathBuf,
        /// Block-average factor, e.g. 2 for 16×16 images.
        #[serde(default = "default_downscale")]
        downscale: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit_train: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit_test: Option<usize>,
    },
}

fn default_classes() -> usize {
    2
}
fn default_extent() -> usize {
    16
}
fn default_separation() -> f64 {
    0.25
}
fn default_noise() -> f64 {
    0.35
}
fn default_jitter() -> f64 {
    3.0
}
fn default_downscale() -> usize {
    1
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Synthetic {
            train: 256,
            test: 128,
            classes: default_classes(),
            extent: default_extent(),
            separation: default_separation(),
            noise: default_noise(),
            jitter: default_jitter(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl DataSpec {
    pub fn load(&self) -> Result<Splits> {
        match self {
            DataSpec::Synthetic {
                train,
                test,
                classes,
                extent,
                separation,
                noise,
                jitter,
                seed,
            } => {
                let all = synth_blobs(&SynthSpec {
                    samples: train + test,
                    classes: *classes,
                    height: *extent,
                    width: *extent,
                    separation: *separation,
                    noise: *noise,
                    jitter: *jitter,
                    seed: *seed,
                })?;
                let tr: Vec<usize> = (0..*train).collect();
                let te: Vec<usize> = (*train..train + test).collect();
                Ok(Splits {
                    train: all.subset(&tr)?,
                    test: all.subset(&te)?,
                })
            }
            DataSpec::Cifar10 {
                path,
                downscale,
                limit_train,
                limit_test,
            } => {
                if !path.is_dir() {
                    return Err(Error::Data(format!("dataset directory {} not found", path.display())));
                }
                let mut train = load_cifar10(path, CifarSplit::Train)?;
                let mut test = load_cifar10(path, CifarSplit::Test)?;
                if let Some(n) = limit_train {
                    train = train.limit(*n)?;
                }
                if let Some(n) = limit_test {
                    test = test.limit(*n)?;
                }
                Ok(Splits {
                    train: train.downscale(*downscale)?,
                    test: test.downscale(*downscale)?,
                })
            }
        }
    }
}

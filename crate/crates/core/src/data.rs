//! Synthetic source/target tasks: textured images containing blobs or
//! vessel-like curves, with pixel masks (segmentation) or shape counts
//! (classification). Domain knobs shift the input distribution.

use std::f64::consts::PI;

use ndarray::{s, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{take_samples, Feature};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    Segmentation,
    Classification,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    #[default]
    Blobs,
    Vessels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainKnobs {
    /// Constant added to every pixel.
    pub intensity_shift: f64,
    /// Spatial frequency (radians per pixel) of the background texture.
    pub texture_freq: f64,
    pub shape_family: ShapeFamily,
    pub noise_sigma: f64,
    /// Foreground intensity relative to background; negative gives dark shapes.
    pub contrast: f64,
}

impl Default for DomainKnobs {
    fn default() -> Self {
        Self {
            intensity_shift: 0.0,
            texture_freq: 0.3,
            shape_family: ShapeFamily::Blobs,
            noise_sigma: 0.1,
            contrast: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    pub task: TaskKind,
    pub image_size: (usize, usize),
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub knobs: DomainKnobs,
    /// Classification only: label `c` means `c + 1` shapes in the image.
    pub classes: usize,
    /// Classification only: label sampling probabilities (uniform if absent).
    pub class_probs: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            task: TaskKind::Segmentation,
            image_size: (64, 64),
            n_train: 128,
            n_val: 32,
            n_test: 64,
            knobs: DomainKnobs::default(),
            classes: 2,
            class_probs: None,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 8 || w < 8 {
            return Err(Error::Config(format!("image size must be at least 8x8, got {h}x{w}")));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("split sizes must be >= 1".into()));
        }
        if self.task == TaskKind::Classification {
            if self.classes < 2 {
                return Err(Error::Config("classification needs >= 2 classes".into()));
            }
            if let Some(p) = &self.class_probs {
                if p.len() != self.classes || p.iter().any(|v| !(*v >= 0.0)) || p.iter().sum::<f64>() <= 0.0 {
                    return Err(Error::Config("class_probs must give one non-negative weight per class".into()));
                }
            }
        }
        if !self.knobs.noise_sigma.is_finite() || self.knobs.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Masks(Feature),
    Labels(Vec<usize>),
}

/// Images in NHWC layout with one channel, tagged with the split they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub images: Feature,
    pub targets: Targets,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> TaskKind {
        match self.targets {
            Targets::Masks(_) => TaskKind::Segmentation,
            Targets::Labels(_) => TaskKind::Classification,
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Labels(l) => Some(l),
            Targets::Masks(_) => None,
        }
    }

    pub fn select(&self, idx: &[usize]) -> (Feature, Targets) {
        let targets = match &self.targets {
            Targets::Masks(m) => Targets::Masks(take_samples(m, idx)),
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
        };
        (take_samples(&self.images, idx), targets)
    }

    /// Fails unless this dataset carries the `expected` split tag.
    pub fn require(&self, expected: &[Split]) -> Result<()> {
        if expected.contains(&self.split) {
            Ok(())
        } else {
            Err(Error::Data(format!("{:?} split used where {expected:?} is required", self.split)))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    // splitmix64 finalizer over (seed, split, index)
    let mut z = seed ^ split.tag().rotate_left(56) ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn paint_blob(mask: &mut ndarray::Array2<f64>, rng: &mut ChaCha8Rng) {
    let (h, w) = mask.dim();
    let m = h.min(w) as f64;
    let ra = rng.random_range(0.08..0.2) * m + 1.5;
    let rb = rng.random_range(0.08..0.2) * m + 1.5;
    let cy = rng.random_range(ra.max(rb).min(h as f64 / 2.0)..(h as f64 - ra.max(rb)).max(h as f64 / 2.0 + 1.0));
    let cx = rng.random_range(ra.max(rb).min(w as f64 / 2.0)..(w as f64 - ra.max(rb)).max(w as f64 / 2.0 + 1.0));
    let theta: f64 = rng.random_range(0.0..PI);
    let (st, ct) = theta.sin_cos();
    for ((y, x), v) in mask.indexed_iter_mut() {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let u = (dx * ct + dy * st) / ra;
        let t = (-dx * st + dy * ct) / rb;
        if u * u + t * t <= 1.0 {
            *v = 1.0;
        }
    }
}

fn paint_vessel(mask: &mut ndarray::Array2<f64>, rng: &mut ChaCha8Rng) {
    let (h, w) = mask.dim();
    let vertical = rng.random_bool(0.5);
    let (len, across) = if vertical { (h, w) } else { (w, h) };
    let base = rng.random_range(0.2..0.8) * across as f64;
    let amp = rng.random_range(0.05..0.2) * across as f64;
    let omega = rng.random_range(1.0..3.0) * 2.0 * PI / len as f64;
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    let half_width = rng.random_range(0.8..1.8);
    for ((y, x), v) in mask.indexed_iter_mut() {
        let (along, off) = if vertical { (y, x) } else { (x, y) };
        let centre = base + amp * (omega * along as f64 + phase).sin();
        if (off as f64 - centre).abs() <= half_width {
            *v = 1.0;
        }
    }
}

fn render(spec: &SyntheticTaskSpec, shapes: usize, rng: &mut ChaCha8Rng) -> (ndarray::Array2<f64>, ndarray::Array2<f64>) {
    let (h, w) = spec.image_size;
    let k = &spec.knobs;
    let mut mask = ndarray::Array2::zeros((h, w));
    for _ in 0..shapes {
        match k.shape_family {
            ShapeFamily::Blobs => paint_blob(&mut mask, rng),
            ShapeFamily::Vessels => paint_vessel(&mut mask, rng),
        }
    }
    let angle: f64 = rng.random_range(0.0..PI);
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    let (sa, ca) = angle.sin_cos();
    let image = ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
        let texture = 0.3 * (k.texture_freq * (x as f64 * ca + y as f64 * sa) + phase).sin();
        let noise: f64 = StandardNormal.sample(rng);
        texture + k.contrast * mask[[y, x]] + k.intensity_shift + k.noise_sigma * noise
    });
    (image, mask)
}

fn draw_label(spec: &SyntheticTaskSpec, rng: &mut ChaCha8Rng) -> usize {
    match &spec.class_probs {
        None => rng.random_range(0..spec.classes),
        Some(p) => {
            let total: f64 = p.iter().sum();
            let mut u = rng.random_range(0.0..total);
            for (c, w) in p.iter().enumerate() {
                if u < *w {
                    return c;
                }
                u -= w;
            }
            spec.classes - 1
        }
    }
}

fn generate_split(spec: &SyntheticTaskSpec, split: Split, n: usize) -> Dataset {
    let (h, w) = spec.image_size;
    let mut images = Array4::zeros((n, h, w, 1));
    let mut masks = Array4::zeros((n, h, w, 1));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = sample_rng(spec.seed, split, i);
        let shapes = match spec.task {
            TaskKind::Segmentation => rng.random_range(1..=3),
            TaskKind::Classification => {
                let label = draw_label(spec, &mut rng);
                labels.push(label);
                label + 1
            }
        };
        let (img, mask) = render(spec, shapes, &mut rng);
        images.slice_mut(s![i, .., .., 0]).assign(&img);
        masks.slice_mut(s![i, .., .., 0]).assign(&mask);
    }
    let targets = match spec.task {
        TaskKind::Segmentation => Targets::Masks(masks),
        TaskKind::Classification => Targets::Labels(labels),
    };
    Dataset { split, images, targets }
}

/// Deterministic in `spec`. Each sample draws from its own stream keyed by
/// (seed, split, index), so splits never share samples.
pub fn generate_task(spec: &SyntheticTaskSpec) -> Result<TaskData> {
    spec.validate()?;
    Ok(TaskData {
        train: generate_split(spec, Split::Train, spec.n_train),
        val: generate_split(spec, Split::Val, spec.n_val),
        test: generate_split(spec, Split::Test, spec.n_test),
    })
}

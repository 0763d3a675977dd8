//! Procedural quality-regression tasks.
//!
//! Base content is smoothed white noise. Each task applies one or more
//! distortion kinds at random severities; the opinion score falls linearly
//! with severity plus a little rater noise.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::Tensor;
use crate::seed::{derive_seed, rng_from};

/// Std of the Gaussian that smooths base-content noise.
pub const BASE_SMOOTHING: f32 = 1.0;
/// Std of additive rater noise on the opinion score.
pub const MOS_NOISE: f32 = 0.05;
pub const MOS_MAX: f32 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistortionKind {
    Blur,
    WhiteNoise,
    BlockAverage,
    Contrast,
    SaltPepper,
    Resample,
}

/// Coarse scenario grouping used by the order experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Synthetic,
    Realistic,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 6] = [
        DistortionKind::Blur,
        DistortionKind::WhiteNoise,
        DistortionKind::BlockAverage,
        DistortionKind::Contrast,
        DistortionKind::SaltPepper,
        DistortionKind::Resample,
    ];

    pub fn family(self) -> Family {
        match self {
            Self::Blur | Self::WhiteNoise | Self::BlockAverage => Family::Synthetic,
            Self::Contrast | Self::SaltPepper | Self::Resample => Family::Realistic,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Blur => "blur",
            Self::WhiteNoise => "white-noise",
            Self::BlockAverage => "block-average",
            Self::Contrast => "contrast",
            Self::SaltPepper => "salt-pepper",
            Self::Resample => "resample",
        }
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistortionKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown distortion kind `{s}`")))
    }
}

/// A distortion recipe: which kinds, over which severity range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub kinds: Vec<DistortionKind>,
    pub level_range: [f32; 2],
}

impl TaskSpec {
    pub fn single(kind: DistortionKind) -> Self {
        Self {
            id: kind.name().to_string(),
            kinds: vec![kind],
            level_range: [0.0, 1.0],
        }
    }

    /// Family of the first listed kind.
    pub fn family(&self) -> Family {
        self.kinds.first().map_or(Family::Synthetic, |k| k.family())
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.level_range;
        if self.kinds.is_empty() {
            return Err(invalid(format!(
                "task `{}` lists no distortion kinds",
                self.id
            )));
        }
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(invalid(format!(
                "task `{}` has level range {lo}..{hi}",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    /// `[1, H, W]` with pixels in `[0, 1]`.
    pub image: Tensor,
    pub mos: f32,
    pub kind: DistortionKind,
    pub level: f32,
    pub source_id: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task_id: String,
    pub spec: TaskSpec,
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

impl TaskDataset {
    pub fn split(&self, split: Split) -> &[ImageSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stacks the images of `samples` into one `[N, 1, H, W]` batch.
pub fn batch_of(samples: &[ImageSample]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    Tensor::stack(&refs)
}

pub fn mos_of(samples: &[ImageSample]) -> Vec<f64> {
    samples.iter().map(|s| s.mos as f64).collect()
}

/// Seeded smoothed-noise textures rescaled to `[0, 1]`.
pub fn generate_base_images(count: usize, side: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = rng_from(seed);
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let kernel = gaussian_kernel(BASE_SMOOTHING);
    (0..count)
        .map(|_| {
            let noise: Vec<f32> = (0..side * side).map(|_| normal.sample(&mut rng)).collect();
            let mut img = separable_filter(&noise, side, side, &kernel, Border::Wrap);
            let (lo, hi) = img
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            let span = (hi - lo).max(f32::MIN_POSITIVE);
            for v in &mut img {
                *v = ((*v - lo) / span).clamp(0.0, 1.0);
            }
            Tensor::new(vec![1, side, side], img).expect("square image")
        })
        .collect()
}

/// Blur std at `level`.
pub fn blur_sigma(level: f32) -> f32 {
    2.0 * level
}

/// Additive noise std at `level`.
pub fn noise_sigma(level: f32) -> f32 {
    0.2 * level
}

/// Block side at `level` (1 means untouched).
pub fn block_size(level: f32) -> usize {
    1 + (7.0 * level).round() as usize
}

/// Multiplier on deviations from the mean at `level`.
pub fn contrast_factor(level: f32) -> f32 {
    1.0 - 0.8 * level
}

/// Per-pixel corruption probability at `level`.
pub fn corruption_prob(level: f32) -> f32 {
    0.3 * level
}

/// Down-sampling factor at `level`.
pub fn resample_factor(level: f32) -> f32 {
    1.0 + 3.0 * level
}

/// Applies one distortion. Level 0 returns the image unchanged; severity
/// grows monotonically with level.
pub fn apply_distortion(
    image: &Tensor,
    kind: DistortionKind,
    level: f32,
    seed: u64,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&level) {
        return Err(invalid(format!("distortion level {level} outside [0, 1]")));
    }
    let (h, w) = match image.shape() {
        [1, h, w] => (*h, *w),
        s => return Err(invalid(format!("expected a [1, H, W] image, got {s:?}"))),
    };
    if level == 0.0 {
        return Ok(image.clone());
    }
    let src = image.data();
    let mut rng = rng_from(seed);
    let out: Vec<f32> = match kind {
        DistortionKind::Blur => separable_filter(
            src,
            h,
            w,
            &gaussian_kernel(blur_sigma(level)),
            Border::Clamp,
        ),
        DistortionKind::WhiteNoise => {
            let normal = Normal::new(0.0f32, noise_sigma(level)).expect("positive std");
            src.iter()
                .map(|&v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0))
                .collect()
        }
        DistortionKind::BlockAverage => block_average(src, h, w, block_size(level)),
        DistortionKind::Contrast => {
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() as f32 / src.len() as f32;
            let f = contrast_factor(level);
            src.iter()
                .map(|&v| (mean + (v - mean) * f).clamp(0.0, 1.0))
                .collect()
        }
        DistortionKind::SaltPepper => {
            let p = corruption_prob(level) as f64;
            src.iter()
                .map(|&v| {
                    if rng.random_bool(p) {
                        if rng.random_bool(0.5) {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        v
                    }
                })
                .collect()
        }
        DistortionKind::Resample => {
            let f = resample_factor(level);
            let sh = ((h as f32 / f).round() as usize).max(2);
            let sw = ((w as f32 / f).round() as usize).max(2);
            let small = resize_bilinear(src, h, w, sh, sw);
            resize_bilinear(&small, sh, sw, h, w)
        }
    };
    Tensor::new(vec![1, h, w], out)
}

/// Opinion score for a severity: `5·(1 − level) + η`, clamped to `[0, 5]`.
pub fn mos_for_level(level: f32, noise: f32) -> f32 {
    (MOS_MAX * (1.0 - level) + noise).clamp(0.0, MOS_MAX)
}

/// Generates `image_count` samples for `spec` and splits them 70/10/20.
/// Every image has its own base content, so partitions never share content.
pub fn make_task_dataset(
    spec: &TaskSpec,
    image_count: usize,
    side: usize,
    seed: u64,
) -> Result<TaskDataset> {
    spec.validate()?;
    if image_count < 20 {
        return Err(invalid(format!(
            "need at least 20 images per task, got {image_count}"
        )));
    }
    let bases = generate_base_images(image_count, side, derive_seed(seed, "base-content"));
    let mut rng = rng_from(derive_seed(seed, "recipe"));
    let rater = Normal::new(0.0f32, MOS_NOISE).expect("positive std");
    let [lo, hi] = spec.level_range;
    let mut samples = Vec::with_capacity(image_count);
    for (i, base) in bases.into_iter().enumerate() {
        let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
        let level = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        let dseed: u64 = rng.random();
        let eta = rater.sample(&mut rng);
        let image = apply_distortion(&base, kind, level, dseed)?;
        samples.push(ImageSample {
            image,
            mos: mos_for_level(level, eta),
            kind,
            level,
            source_id: i as u64,
        });
    }
    let mut order: Vec<usize> = (0..image_count).collect();
    order.shuffle(&mut rng_from(derive_seed(seed, "split")));
    let n_train = (0.7 * image_count as f64).round() as usize;
    let n_val = (0.1 * image_count as f64).round() as usize;
    let mut slots: Vec<Option<ImageSample>> = samples.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<ImageSample> {
        let mut sorted = idx.to_vec();
        sorted.sort_unstable();
        sorted
            .iter()
            .map(|&i| slots[i].take().expect("each index used once"))
            .collect()
    };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok(TaskDataset {
        task_id: spec.id.clone(),
        spec: spec.clone(),
        train,
        val,
        test,
    })
}

/// One labelled comparison between two training images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub x: usize,
    pub y: usize,
    /// 1 when `mos[x] ≥ mos[y]`, else 0.
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub task_id: String,
    pub pairs: Vec<Pair>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn binary_label(mos_x: f32, mos_y: f32) -> u8 {
    u8::from(mos_x >= mos_y)
}

/// Default pair budget: ten per training image, capped by the number of
/// distinct unordered pairs.
pub fn default_pair_count(train_len: usize) -> usize {
    (10 * train_len).min(train_len * train_len.saturating_sub(1) / 2)
}

/// Samples `n_pairs` distinct unordered pairs of training images uniformly
/// without replacement.
pub fn build_pairs(dataset: &TaskDataset, n_pairs: usize, seed: u64) -> Result<PairSet> {
    let m = dataset.train.len();
    let total = m * m.saturating_sub(1) / 2;
    if n_pairs > total {
        return Err(invalid(format!(
            "{n_pairs} pairs requested but only {total} exist"
        )));
    }
    let mut rng = rng_from(seed);
    let picks = index::sample(&mut rng, total, n_pairs);
    let pairs = picks
        .into_iter()
        .map(|k| {
            let (x, y) = unrank_pair(k, m);
            Pair {
                x,
                y,
                label: binary_label(dataset.train[x].mos, dataset.train[y].mos),
            }
        })
        .collect();
    Ok(PairSet {
        task_id: dataset.task_id.clone(),
        pairs,
    })
}

/// Maps a linear index in `0..C(m,2)` to `(i, j)` with `i < j`.
fn unrank_pair(mut k: usize, m: usize) -> (usize, usize) {
    let mut i = 0;
    loop {
        let row = m - 1 - i;
        if k < row {
            return (i, i + 1 + k);
        }
        k -= row;
        i += 1;
    }
}

#[derive(Clone, Copy)]
enum Border {
    Clamp,
    Wrap,
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i32;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn separable_filter(src: &[f32], h: usize, w: usize, kernel: &[f32], border: Border) -> Vec<f32> {
    let r = (kernel.len() / 2) as isize;
    let at = |i: isize, n: usize| -> usize {
        match border {
            Border::Clamp => i.clamp(0, n as isize - 1) as usize,
            Border::Wrap => i.rem_euclid(n as isize) as usize,
        }
    };
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(j, &k)| k * src[y * w + at(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(j, &k)| k * tmp[at(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn block_average(src: &[f32], h: usize, w: usize, b: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    for by in (0..h).step_by(b) {
        for bx in (0..w).step_by(b) {
            let (ey, ex) = ((by + b).min(h), (bx + b).min(w));
            let mut sum = 0.0f32;
            for y in by..ey {
                sum += src[y * w + bx..y * w + ex].iter().sum::<f32>();
            }
            let mean = sum / ((ey - by) * (ex - bx)) as f32;
            for y in by..ey {
                out[y * w + bx..y * w + ex].fill(mean);
            }
        }
    }
    out
}

/// Bilinear resize with half-pixel centers.
fn resize_bilinear(src: &[f32], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f32> {
    let sy = h as f32 / nh as f32;
    let sx = w as f32 / nw as f32;
    let mut out = vec![0.0f32; nh * nw];
    for y in 0..nh {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for x in 0..nw {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out[y * nw + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

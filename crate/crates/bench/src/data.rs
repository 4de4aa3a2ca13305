//! Seeded synthetic task families.
//!
//! Every sample is a pure function of `(spec, index)`: its generator is a
//! ChaCha8 stream keyed by the spec seed and family, positioned at `index`.
//! Labels cycle `index % classes`, so any prefix whose length is a multiple
//! of `classes` is exactly balanced.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use wemoe_core::vit::Image;

use crate::error::{BenchError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskFamily {
    StripeOrientation,
    BlobCount,
    CheckerFrequency,
    GlyphTemplate,
    RingRadius,
    CornerQuadrant,
    GradientDirection,
    NoiseTexture,
    /// The mixed pre-training distribution; not one of the merge tasks.
    GenericShapes,
}

impl TaskFamily {
    /// The eight merge-task families, in canonical order.
    pub const TASKS: [TaskFamily; 8] = [
        TaskFamily::StripeOrientation,
        TaskFamily::BlobCount,
        TaskFamily::CheckerFrequency,
        TaskFamily::GlyphTemplate,
        TaskFamily::RingRadius,
        TaskFamily::CornerQuadrant,
        TaskFamily::GradientDirection,
        TaskFamily::NoiseTexture,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskFamily::StripeOrientation => "stripe-orientation",
            TaskFamily::BlobCount => "blob-count",
            TaskFamily::CheckerFrequency => "checker-frequency",
            TaskFamily::GlyphTemplate => "glyph-template",
            TaskFamily::RingRadius => "ring-radius",
            TaskFamily::CornerQuadrant => "corner-quadrant",
            TaskFamily::GradientDirection => "gradient-direction",
            TaskFamily::NoiseTexture => "noise-texture",
            TaskFamily::GenericShapes => "generic-shapes",
        }
    }

    pub fn max_classes(self) -> usize {
        match self {
            TaskFamily::StripeOrientation | TaskFamily::GlyphTemplate | TaskFamily::GradientDirection => 8,
            TaskFamily::BlobCount | TaskFamily::RingRadius => 6,
            TaskFamily::CheckerFrequency => CHECKER_CELLS.len(),
            TaskFamily::CornerQuadrant | TaskFamily::NoiseTexture | TaskFamily::GenericShapes => 4,
        }
    }

    fn salt(self) -> u64 {
        // distinct odd constants so families never share a stream
        0x9e37_79b9_7f4a_7c15u64.wrapping_mul(self as u64 * 2 + 1)
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskFamily {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        TaskFamily::TASKS
            .iter()
            .chain(std::iter::once(&TaskFamily::GenericShapes))
            .copied()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| BenchError::Unknown {
                what: "task family",
                value: s.to_string(),
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub family: TaskFamily,
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
    pub image_size: usize,
    pub channels: usize,
}

impl SyntheticTaskSpec {
    /// Spec at the desk image geometry (32×32, one channel).
    pub fn new(family: TaskFamily, classes: usize, n_train: usize, n_test: usize, seed: u64) -> Self {
        SyntheticTaskSpec {
            family,
            classes,
            n_train,
            n_test,
            noise: 0.05,
            seed,
            image_size: 32,
            channels: 1,
        }
    }

    pub fn name(&self) -> &'static str {
        self.family.as_str()
    }

    pub fn validate(&self) -> Result<()> {
        let max = self.family.max_classes();
        if self.classes > max {
            return Err(BenchError::TooManyClasses {
                family: self.family,
                classes: self.classes,
                max,
            });
        }
        if self.classes < 2 {
            return Err(BenchError::Spec(format!("{}: need at least 2 classes", self.family)));
        }
        if self.image_size < 8 || self.channels == 0 {
            return Err(BenchError::Spec(format!(
                "{}: image {}px × {} channels is too small",
                self.family, self.image_size, self.channels
            )));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(BenchError::Spec(format!("{}: noise must be ≥ 0", self.family)));
        }
        Ok(())
    }

    fn rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.family.salt());
        rng.set_stream(index as u64);
        rng
    }

    pub fn label(&self, index: usize) -> usize {
        index % self.classes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Access {
    pub task: String,
    pub split: Split,
}

/// Shared record of which dataset splits were read.
#[derive(Clone, Debug, Default)]
pub struct AccessLog(Arc<Mutex<Vec<Access>>>);

impl AccessLog {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&self, task: &str, split: Split) {
        let mut log = self.0.lock().unwrap_or_else(|e| e.into_inner());
        log.push(Access {
            task: task.to_string(),
            split,
        });
    }

    pub fn events(&self) -> Vec<Access> {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn clear(&self) {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).clear();
    }

    pub fn touched(&self, task: &str, split: Split) -> bool {
        self.events().iter().any(|a| a.task == task && a.split == split)
    }
}

/// Labeled train and test splits of one task.
#[derive(Clone, Debug)]
pub struct TaskDataset {
    pub spec: SyntheticTaskSpec,
    /// Display name; corrupted copies append the corruption.
    pub name: String,
    train: Vec<Sample>,
    test: Vec<Sample>,
    log: AccessLog,
}

impl PartialEq for TaskDataset {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.name == other.name && self.train == other.train && self.test == other.test
    }
}

impl TaskDataset {
    pub fn from_parts(spec: SyntheticTaskSpec, name: String, train: Vec<Sample>, test: Vec<Sample>) -> Self {
        TaskDataset {
            spec,
            name,
            train,
            test,
            log: AccessLog::new(),
        }
    }

    pub fn train(&self) -> &[Sample] {
        self.log.record(&self.name, Split::Train);
        &self.train
    }

    pub fn test(&self) -> &[Sample] {
        self.log.record(&self.name, Split::Test);
        &self.test
    }

    pub fn test_images(&self) -> Vec<Image> {
        self.test().iter().map(|s| s.image.clone()).collect()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn log(&self) -> &AccessLog {
        &self.log
    }

    /// Shares `log` with this dataset (and drops its previous log).
    pub fn with_log(mut self, log: &AccessLog) -> Self {
        self.log = log.clone();
        self
    }

    /// Rebuilds with every image passed through `f(split, index, image)`.
    pub fn map_images(&self, name: String, f: impl Fn(Split, usize, &Image) -> Image) -> Self {
        let map = |split, samples: &[Sample]| {
            samples
                .iter()
                .enumerate()
                .map(|(i, s)| Sample {
                    image: f(split, i, &s.image),
                    label: s.label,
                })
                .collect()
        };
        TaskDataset {
            spec: self.spec.clone(),
            name,
            train: map(Split::Train, &self.train),
            test: map(Split::Test, &self.test),
            log: self.log.clone(),
        }
    }
}

/// Train indices are `0..n_train`, test indices `n_train..n_train+n_test`.
pub fn generate_task_dataset(spec: &SyntheticTaskSpec) -> Result<TaskDataset> {
    spec.validate()?;
    let train = (0..spec.n_train).map(|i| generate_sample(spec, i)).collect();
    let test = (spec.n_train..spec.n_train + spec.n_test)
        .map(|i| generate_sample(spec, i))
        .collect();
    Ok(TaskDataset::from_parts(spec.clone(), spec.name().to_string(), train, test))
}

pub fn generate_sample(spec: &SyntheticTaskSpec, index: usize) -> Sample {
    let s = spec.image_size;
    let label = spec.label(index);
    let mut rng = spec.rng(index);
    let mut canvas = Canvas::new(s);
    match spec.family {
        TaskFamily::StripeOrientation => {
            let (angle, freq, phase) = stripe_params(&mut rng, label, spec.classes);
            canvas.fill(|x, y| 0.5 + 0.5 * (2.0 * PI * freq * (x * angle.cos() + y * angle.sin()) / s as f64 + phase).sin());
        }
        TaskFamily::BlobCount => blobs(&mut canvas, &mut rng, label + 1),
        TaskFamily::CheckerFrequency => {
            let cell = CHECKER_CELLS[label] as f64;
            let (ox, oy) = (rng.random_range(0.0..cell), rng.random_range(0.0..cell));
            let amp = rng.random_range(0.6..1.0);
            canvas.fill(|x, y| {
                let parity = (((x + ox) / cell).floor() + ((y + oy) / cell).floor()) as i64 & 1;
                0.5 + amp * (parity as f64 - 0.5)
            });
        }
        TaskFamily::GlyphTemplate => glyph(&mut canvas, &mut rng, label),
        TaskFamily::RingRadius => {
            let span = (spec.classes - 1).max(1) as f64;
            let r = s as f64 * (0.12 + 0.3 * label as f64 / span);
            let c = s as f64 / 2.0;
            let (cx, cy) = (c + rng.random_range(-2.0..2.0), c + rng.random_range(-2.0..2.0));
            canvas.fill(|x, y| {
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                (-(d - r).powi(2) / (2.0 * 0.8 * 0.8)).exp()
            });
        }
        TaskFamily::CornerQuadrant => {
            let half = s as f64 / 2.0;
            let side = rng.random_range(s as f64 / 5.0..s as f64 / 3.0);
            let x0 = (label % 2) as f64 * half + rng.random_range(0.0..half - side);
            let y0 = (label / 2) as f64 * half + rng.random_range(0.0..half - side);
            let v = rng.random_range(0.7..1.0);
            canvas.fill(|x, y| if x >= x0 && x < x0 + side && y >= y0 && y < y0 + side { v } else { 0.0 });
        }
        TaskFamily::GradientDirection => {
            let alpha = (label as f64 + rng.random_range(-0.3..0.3)) * 2.0 * PI / spec.classes as f64;
            let c = s as f64 / 2.0;
            canvas.fill(|x, y| 0.5 + 0.45 * ((x - c) * alpha.cos() + (y - c) * alpha.sin()) / c);
        }
        TaskFamily::NoiseTexture => noise_texture(&mut canvas, &mut rng, NOISE_RADII[label]),
        TaskFamily::GenericShapes => generic_shape(&mut canvas, &mut rng, label),
    }
    if spec.noise > 0.0 {
        for v in canvas.px.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += spec.noise * z;
        }
    }
    Sample {
        image: canvas.into_image(spec.channels),
        label,
    }
}

/// Orientation (radians in `[0, π)` up to jitter) used for stripe sample `index`.
pub fn stripe_angle(spec: &SyntheticTaskSpec, index: usize) -> f64 {
    let mut rng = spec.rng(index);
    stripe_params(&mut rng, spec.label(index), spec.classes).0
}

fn stripe_params(rng: &mut ChaCha8Rng, label: usize, classes: usize) -> (f64, f64, f64) {
    let angle = (label as f64 + rng.random_range(-0.35..0.35)) * PI / classes as f64;
    let freq = rng.random_range(2.0..4.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    (angle, freq, phase)
}

const CHECKER_CELLS: [usize; 5] = [2, 3, 4, 6, 8];
const NOISE_RADII: [usize; 4] = [0, 1, 2, 4];

/// 5×5 bitmaps, row-major from the most significant of 25 bits.
const GLYPHS: [u32; 8] = [
    0b01110_10001_10001_10001_01110, // O
    0b11111_00100_00100_00100_00100, // T
    0b10001_01010_00100_01010_10001, // X
    0b10000_10000_10000_10000_11111, // L
    0b00100_00100_11111_00100_00100, // +
    0b11111_10001_10001_10001_11111, // box
    0b10001_10001_11111_10001_10001, // H
    0b00100_01010_10001_01010_00100, // diamond
];

struct Canvas {
    size: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Canvas {
            size,
            px: vec![0.0; size * size],
        }
    }

    /// Sets every pixel from its centre coordinates.
    fn fill(&mut self, f: impl Fn(f64, f64) -> f64) {
        let s = self.size;
        for y in 0..s {
            for x in 0..s {
                self.px[y * s + x] = f(x as f64 + 0.5, y as f64 + 0.5);
            }
        }
    }

    fn into_image(self, channels: usize) -> Image {
        let mut pixels = Vec::with_capacity(self.px.len() * channels);
        for v in self.px {
            let v = v.clamp(0.0, 1.0) as f32;
            pixels.extend(std::iter::repeat_n(v, channels));
        }
        Image::new(self.size, channels, pixels).expect("canvas geometry is consistent")
    }
}

fn blobs(canvas: &mut Canvas, rng: &mut ChaCha8Rng, count: usize) {
    let s = canvas.size as f64;
    let margin = s / 8.0;
    let min_dist = s / 5.0;
    let mut centres: Vec<(f64, f64)> = Vec::with_capacity(count);
    while centres.len() < count {
        let mut best = (0.0, 0.0);
        let mut best_gap = -1.0;
        // the candidate farthest from existing blobs among a few draws
        for _ in 0..24 {
            let c = (rng.random_range(margin..s - margin), rng.random_range(margin..s - margin));
            let gap = centres
                .iter()
                .map(|&(x, y)| ((x - c.0).powi(2) + (y - c.1).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            if gap >= min_dist {
                best = c;
                break;
            }
            if gap > best_gap {
                best_gap = gap;
                best = c;
            }
        }
        centres.push(best);
    }
    let sigma = s / 16.0;
    canvas.fill(|x, y| {
        centres
            .iter()
            .map(|&(cx, cy)| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp())
            .fold(0.0, f64::max)
    });
}

fn glyph(canvas: &mut Canvas, rng: &mut ChaCha8Rng, label: usize) {
    let s = canvas.size;
    let scale = (s / 8).max(1);
    let extent = 5 * scale;
    let ox = rng.random_range(0..=s - extent);
    let oy = rng.random_range(0..=s - extent);
    let fg = rng.random_range(0.7..1.0);
    let bits = GLYPHS[label];
    for gy in 0..5 {
        for gx in 0..5 {
            if bits >> (24 - (gy * 5 + gx)) & 1 == 1 {
                for y in oy + gy * scale..oy + (gy + 1) * scale {
                    for x in ox + gx * scale..ox + (gx + 1) * scale {
                        canvas.px[y * s + x] = fg;
                    }
                }
            }
        }
    }
}

fn noise_texture(canvas: &mut Canvas, rng: &mut ChaCha8Rng, radius: usize) {
    let s = canvas.size;
    let white: Vec<f64> = (0..s * s).map(|_| StandardNormal.sample(&mut *rng)).collect();
    let r = radius as isize;
    let mut blurred = vec![0.0; s * s];
    for y in 0..s as isize {
        for x in 0..s as isize {
            let mut acc = 0.0;
            let mut n = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    // wrap around so every pixel averages the same count
                    let yy = (y + dy).rem_euclid(s as isize) as usize;
                    let xx = (x + dx).rem_euclid(s as isize) as usize;
                    acc += white[yy * s + xx];
                    n += 1.0;
                }
            }
            blurred[y as usize * s + x as usize] = acc / n;
        }
    }
    let mean = blurred.iter().sum::<f64>() / blurred.len() as f64;
    let var = blurred.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / blurred.len() as f64;
    let std = var.sqrt().max(1e-12);
    for (dst, v) in canvas.px.iter_mut().zip(blurred) {
        *dst = 0.5 + 0.2 * (v - mean) / std;
    }
}

/// Circle, filled rectangle, line or triangle at a random pose.
fn generic_shape(canvas: &mut Canvas, rng: &mut ChaCha8Rng, kind: usize) {
    let s = canvas.size as f64;
    let size = rng.random_range(s / 6.0..s / 2.5);
    let cx = rng.random_range(size..s - size);
    let cy = rng.random_range(size..s - size);
    let v = rng.random_range(0.5..1.0);
    let theta = rng.random_range(0.0..PI);
    let (c, sn) = (theta.cos(), theta.sin());
    canvas.fill(|x, y| {
        let (dx, dy) = (x - cx, y - cy);
        // coordinates in the shape's rotated frame
        let (u, w) = (dx * c + dy * sn, -dx * sn + dy * c);
        let inside = match kind {
            0 => dx * dx + dy * dy <= size * size,
            1 => u.abs() <= size && w.abs() <= size * 0.6,
            2 => u.abs() <= size && w.abs() <= 1.0,
            _ => w <= size * 0.5 && w >= -size && u.abs() <= (size * 0.5 - w) * 0.577,
        };
        if inside {
            v
        } else {
            0.0
        }
    });
}

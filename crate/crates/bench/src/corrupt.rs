//! Test-distribution corruptions with fixed severity tables.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use wemoe_core::vit::Image;

use crate::data::{Split, TaskDataset};
use crate::error::{BenchError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::ImpulseNoise => "impulse-noise",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| BenchError::Unknown {
                what: "corruption",
                value: s.to_string(),
            })
    }
}

/// Per-severity parameters, index `severity − 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeverityTable {
    pub gaussian_sigma: [f64; 5],
    pub impulse_fraction: [f64; 5],
    pub contrast_factor: [f64; 5],
    pub pixelate_factor: [usize; 5],
}

impl Default for SeverityTable {
    fn default() -> Self {
        SeverityTable {
            gaussian_sigma: [0.04, 0.06, 0.08, 0.09, 0.10],
            impulse_fraction: [0.01, 0.02, 0.03, 0.05, 0.07],
            contrast_factor: [0.75, 0.5, 0.4, 0.3, 0.15],
            pixelate_factor: [2, 3, 4, 5, 6],
        }
    }
}

/// Parameter of one corruption: σ, flip fraction, contrast factor or block size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Level {
    Sigma(f64),
    Fraction(f64),
    Factor(f64),
    Block(usize),
}

impl SeverityTable {
    pub fn level(&self, kind: CorruptionKind, severity: u8) -> Result<Level> {
        if !(1..=5).contains(&severity) {
            return Err(BenchError::Spec(format!("severity {severity} outside 1..=5")));
        }
        let i = severity as usize - 1;
        Ok(match kind {
            CorruptionKind::GaussianNoise => Level::Sigma(self.gaussian_sigma[i]),
            CorruptionKind::ImpulseNoise => Level::Fraction(self.impulse_fraction[i]),
            CorruptionKind::Contrast => Level::Factor(self.contrast_factor[i]),
            CorruptionKind::Pixelate => Level::Block(self.pixelate_factor[i]),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl Corruption {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Self {
        Corruption { kind, severity, seed }
    }

    pub fn label(&self) -> String {
        format!("{}@{}", self.kind, self.severity)
    }
}

/// Applies `level` to one image; pixel values stay in `[0, 1]`.
pub fn corrupt_image(image: &Image, level: Level, rng: &mut ChaCha8Rng) -> Image {
    let mut out = image.clone();
    let size = image.size();
    let ch = image.channels();
    match level {
        Level::Sigma(sigma) => {
            if sigma > 0.0 {
                for v in out.pixels_mut() {
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    *v = (*v as f64 + sigma * z).clamp(0.0, 1.0) as f32;
                }
            }
        }
        Level::Fraction(p) => {
            for v in out.pixels_mut() {
                if rng.random::<f64>() < p {
                    *v = if rng.random::<bool>() { 1.0 } else { 0.0 };
                }
            }
        }
        Level::Factor(c) => {
            let px = image.pixels();
            let mean = px.iter().map(|&v| v as f64).sum::<f64>() / px.len() as f64;
            for v in out.pixels_mut() {
                *v = ((*v as f64 - mean) * c + mean).clamp(0.0, 1.0) as f32;
            }
        }
        Level::Block(k) => {
            if k > 1 {
                for by in (0..size).step_by(k) {
                    for bx in (0..size).step_by(k) {
                        let (y1, x1) = ((by + k).min(size), (bx + k).min(size));
                        for c in 0..ch {
                            let mut acc = 0.0f64;
                            for y in by..y1 {
                                for x in bx..x1 {
                                    acc += image.get(y, x, c) as f64;
                                }
                            }
                            let mean = (acc / ((y1 - by) * (x1 - bx)) as f64) as f32;
                            for y in by..y1 {
                                for x in bx..x1 {
                                    out.set(y, x, c, mean);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Corrupted copy of both splits. Sample `i` of a split draws from its own
/// stream, so the result does not depend on evaluation order.
pub fn apply_corruption(dataset: &TaskDataset, corruption: &Corruption, table: &SeverityTable) -> Result<TaskDataset> {
    let level = table.level(corruption.kind, corruption.severity)?;
    let name = format!("{}+{}", dataset.name, corruption.label());
    Ok(dataset.map_images(name, |split, i, img| {
        let mut rng = ChaCha8Rng::seed_from_u64(corruption.seed ^ ((corruption.kind as u64) << 32));
        let stream = match split {
            Split::Train => 2 * i as u64,
            Split::Test => 2 * i as u64 + 1,
        };
        rng.set_stream(stream);
        corrupt_image(img, level, &mut rng)
    }))
}

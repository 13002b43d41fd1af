//! Procedural source/target texture tasks that share a primitive bank.
//!
//! Every image is a smooth random background plus Gaussian-windowed oriented
//! gratings at random positions and phases, plus pixel noise. A source class
//! is one primitive from the bank; a target class is a pair of primitives,
//! so the two label spaces differ while the low-level structure is shared.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Dataset, Sample, Split};

const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub source_classes: usize,
    pub target_classes: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    pub size: usize,
    /// Peak grating amplitude of a class; a pair class splits it evenly in power.
    pub amplitude: f64,
    /// Peak amplitude of the one random distractor primitive per image.
    pub distractor: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Gaussian window radius as a fraction of the image size.
    pub radius: f64,
}

impl SyntheticSpec {
    pub fn new(source_classes: usize, target_classes: usize, per_class: usize, size: usize) -> Self {
        Self {
            source_classes,
            target_classes,
            source_per_class: per_class,
            target_per_class: per_class,
            size,
            amplitude: 0.3,
            distractor: 0.2,
            noise: 0.08,
            radius: 0.22,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.source_classes < 2 || self.target_classes < 2 {
            return Err(Error::config("both tasks need at least 2 classes"));
        }
        if self.size < 4 {
            return Err(Error::config(format!("image size {} is too small", self.size)));
        }
        let pairs = self.source_classes * (self.source_classes - 1) / 2;
        if self.target_classes > pairs {
            return Err(Error::config(format!(
                "{} source primitives only form {pairs} distinct target pairs",
                self.source_classes
            )));
        }
        Ok(())
    }

    /// Generates the pair; every image draws from its own RNG stream keyed
    /// by `(seed, task, index)`.
    pub fn generate(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let bank = primitive_bank(seed, self.source_classes);
        let source_sets: Vec<Vec<usize>> = (0..self.source_classes).map(|k| vec![k]).collect();
        let target_sets = target_pairs(self.source_classes, self.target_classes);
        let source = self.task(seed, 1, &bank, &source_sets, self.source_per_class)?;
        let target = self.task(seed, 2, &bank, &target_sets, self.target_per_class)?;
        Ok((source, target))
    }

    fn task(
        &self,
        seed: u64,
        task: u64,
        bank: &[Primitive],
        classes: &[Vec<usize>],
        per_class: usize,
    ) -> Result<Dataset> {
        let k = classes.len();
        let samples = (0..k * per_class)
            .map(|i| {
                let label = i % k;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((task << 40) | i as u64);
                Sample {
                    image: self.render(&mut rng, bank, &classes[label]),
                    label,
                }
            })
            .collect();
        Dataset::new(samples, k, Split::Train)
    }

    fn render(&self, rng: &mut ChaCha8Rng, bank: &[Primitive], parts: &[usize]) -> Tensor {
        let n = self.size;
        let mut img = vec![0.0; CHANNELS * n * n];
        let background = Background::sample(rng);
        for ch in 0..CHANNELS {
            for y in 0..n {
                for x in 0..n {
                    let (u, v) = (x as f64 / n as f64, y as f64 / n as f64);
                    img[(ch * n + y) * n + x] = background.at(ch, u, v);
                }
            }
        }
        // Independent gratings add variance, so a pair splits the power of one.
        let amplitude = self.amplitude / (parts.len() as f64).sqrt();
        for &p in parts {
            stamp(&mut img, n, &bank[p], amplitude, self.radius, rng);
        }
        if self.distractor > 0.0 {
            let d = rng.random_range(0..bank.len());
            stamp(&mut img, n, &bank[d], self.distractor, self.radius, rng);
        }
        let noise = Normal::new(0.0, self.noise).expect("finite noise");
        for v in img.iter_mut() {
            *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
        }
        Tensor::from_parts(vec![CHANNELS, n, n], img)
    }
}

/// Generates a transfer pair with default texture parameters.
pub fn make_synthetic_transfer_pair(
    seed: u64,
    k_src: usize,
    k_tgt: usize,
    n_per_class: usize,
    size: usize,
) -> Result<(Dataset, Dataset)> {
    SyntheticSpec::new(k_src, k_tgt, n_per_class, size).generate(seed)
}

#[derive(Clone, Debug)]
struct Primitive {
    theta: f64,
    /// Cycles per pixel.
    freq: f64,
    tint: [f64; CHANNELS],
}

fn primitive_bank(seed: u64, count: usize) -> Vec<Primitive> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let jitter = PI / (4.0 * count as f64);
    (0..count)
        .map(|p| {
            let theta = p as f64 * PI / count as f64 + rng.random_range(-jitter..jitter);
            let freq = if p % 2 == 0 { 0.14 } else { 0.24 };
            let mut tint = [0.0; CHANNELS];
            for t in tint.iter_mut() {
                *t = rng.random_range(0.7..1.0);
            }
            Primitive { theta, freq, tint }
        })
        .collect()
}

/// First `k` unordered pairs `(a, b)` with `b - a` cycling through offsets
/// 1, 2, ... so that neighbouring target classes share a primitive.
fn target_pairs(bank: usize, k: usize) -> Vec<Vec<usize>> {
    let mut pairs = Vec::with_capacity(k);
    'outer: for offset in 1..bank {
        for a in 0..bank {
            let b = (a + offset) % bank;
            let pair = vec![a.min(b), a.max(b)];
            if !pairs.contains(&pair) {
                pairs.push(pair);
                if pairs.len() == k {
                    break 'outer;
                }
            }
        }
    }
    pairs
}

struct Background {
    level: [f64; CHANNELS],
    waves: [(f64, f64, f64, f64); 2],
}

impl Background {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut level = [0.0; CHANNELS];
        let base = rng.random_range(0.4..0.6);
        for l in level.iter_mut() {
            *l = base + rng.random_range(-0.05..0.05);
        }
        let mut wave = || {
            (
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..0.08),
            )
        };
        let waves = [wave(), wave()];
        Self { level, waves }
    }

    fn at(&self, ch: usize, u: f64, v: f64) -> f64 {
        self.level[ch]
            + self
                .waves
                .iter()
                .map(|&(fu, fv, phase, amp)| amp * (2.0 * PI * (fu * u + fv * v) + phase).cos())
                .sum::<f64>()
    }
}

fn stamp(img: &mut [f64], n: usize, p: &Primitive, amplitude: f64, radius: f64, rng: &mut ChaCha8Rng) {
    let r = radius * n as f64;
    let margin = (0.5 * r).min(n as f64 / 2.0);
    let cy = rng.random_range(margin..=n as f64 - margin);
    let cx = rng.random_range(margin..=n as f64 - margin);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (s, c) = p.theta.sin_cos();
    let k = 2.0 * PI * p.freq;
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let window = (-(dx * dx + dy * dy) / (2.0 * r * r)).exp();
            if window < 1e-4 {
                continue;
            }
            let g = amplitude * window * (k * (dx * c + dy * s) + phase).sin();
            for ch in 0..CHANNELS {
                img[(ch * n + y) * n + x] += p.tint[ch] * g;
            }
        }
    }
}

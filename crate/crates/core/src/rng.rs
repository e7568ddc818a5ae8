//! Counter-based splittable pseudo-random generator.
//!
//! Every draw is `mix(key + counter * GOLDEN)` where `mix` is the SplitMix64
//! finalizer. A stream is identified by its 64-bit key, which is derived from
//! `(seed, stream_id)`. Child streams hash the parent *key* with a label and an
//! index, never the parent counter, so a child is the same no matter how many
//! values the parent or its siblings have drawn.
//!
//! Gaussian draws use the cosine branch of Box-Muller on two uniforms:
//! `z = sqrt(-2 ln u1) * cos(2 pi u2)` with `u1` in (0, 1] and `u2` in [0, 1).
//! The sine branch is discarded so each normal costs exactly two draws.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over raw bytes. Stable across platforms and releases.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    key: u64,
    counter: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let key = mix64(mix64(seed) ^ stream.wrapping_mul(GOLDEN).wrapping_add(1));
        Self {
            seed,
            stream,
            key,
            counter: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent child stream keyed by `(self.key, label, index)`.
    pub fn derive(&self, label: &str, index: u64) -> SeededRng {
        let tag = fnv1a64(label.as_bytes());
        let stream = mix64(self.key ^ mix64(tag.wrapping_add(index.wrapping_mul(GOLDEN))));
        SeededRng::with_stream(self.seed, stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1].
    fn next_f64_open_low(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (Lemire's multiply-shift with rejection).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        loop {
            let m = u128::from(self.next_u64()) * u128::from(n);
            let low = m as u64;
            if low >= n || low >= n.wrapping_neg() % n {
                return (m >> 64) as usize;
            }
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.next_f64_open_low();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn gaussian(&mut self, mean: f64, std: f64) -> Result<f64> {
        if !(std >= 0.0) || !std.is_finite() {
            return Err(Error::Parameter(format!(
                "gaussian std must be finite and >= 0, got {std}"
            )));
        }
        if std == 0.0 {
            return Ok(mean);
        }
        Ok(mean + std * self.standard_normal())
    }

    /// Gamma(shape, 1) by Marsaglia-Tsang, with the `U^(1/shape)` boost for shape < 1.
    pub fn gamma(&mut self, shape: f64) -> Result<f64> {
        if !(shape > 0.0) || !shape.is_finite() {
            return Err(Error::Parameter(format!("gamma shape must be > 0, got {shape}")));
        }
        if shape < 1.0 {
            let g = self.gamma(shape + 1.0)?;
            let u = self.next_f64_open_low();
            return Ok(g * u.powf(1.0 / shape));
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.standard_normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.next_f64_open_low();
            if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
                return Ok(d * v);
            }
        }
    }

    /// Symmetric Dirichlet(concentration * 1) over `k` categories.
    ///
    /// If every gamma draw underflows to zero (tiny concentration), all mass
    /// goes to one uniformly chosen category.
    pub fn dirichlet(&mut self, concentration: f64, k: usize) -> Result<Vec<f64>> {
        let mut draws = Vec::with_capacity(k);
        for _ in 0..k {
            draws.push(self.gamma(concentration)?);
        }
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            Ok(draws.into_iter().map(|g| g / total).collect())
        } else {
            let hot = self.below(k);
            Ok((0..k).map(|i| if i == hot { 1.0 } else { 0.0 }).collect())
        }
    }

    /// Index drawn from the (not necessarily normalized) nonnegative weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let target = self.next_f64() * total;
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if target < acc {
                return i;
            }
        }
        weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }

    /// Fisher-Yates, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

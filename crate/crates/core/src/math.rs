//! Dense f64 primitives. Every reduction runs in index-ascending order so
//! results are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability floor used by [`cross_entropy`].
pub const PROB_CLIP: f64 = 1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..a.len() {
        acc += a[k] * b[k];
    }
    acc
}

pub fn norm2(a: &[f64]) -> f64 {
    dot_unchecked(a, a).sqrt()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}

/// Max-shifted softmax.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::Dimension { expected: 1, got: 0 });
    }
    let mut out = z.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v /= total;
    }
}

/// `-ln(max(probs[label], PROB_CLIP))`.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    match probs.get(label) {
        Some(p) => Ok(-p.max(PROB_CLIP).ln()),
        None => Err(Error::Index {
            index: label,
            len: probs.len(),
        }),
    }
}

/// Lowest index among the maxima.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..v.len() {
        if v[k] > v[best] {
            best = k;
        }
    }
    best
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("step h must be > 0, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = probe[k];
        probe[k] = orig + h;
        let up = f(&probe);
        probe[k] = orig - h;
        let down = f(&probe);
        probe[k] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len(rows * cols, data.len())?;
        if !all_finite(&data) {
            return Err(Error::Parameter("matrix entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.cols, x.len())?;
        Ok((0..self.rows).map(|r| dot_unchecked(self.row(r), x)).collect())
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

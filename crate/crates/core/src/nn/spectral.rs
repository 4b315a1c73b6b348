//! Spectral normalization by power iteration.
//!
//! A weight is viewed as a `rows x cols` matrix (convolution kernels as
//! `out_channels x (in_channels * k * k)`). The normalized weight is `W / sigma`
//! where `sigma = u^T W v` estimates the largest singular value from the carried
//! left vector `u`.

use crate::error::{Error, Result};
use crate::tensor::Real;

const NORM_EPS: f64 = 1e-12;

/// Power-iteration state carried between normalizations (the left singular vector estimate).
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState<T> {
    pub u: Vec<T>,
}

impl<T: Real> SpectralState<T> {
    /// Deterministic start vector; any vector not orthogonal to the top singular vector works.
    pub fn new(rows: usize) -> Self {
        let u = (0..rows)
            .map(|i| T::lit(1.0 + 0.01 * ((i * 7919 % 101) as f64)))
            .collect::<Vec<_>>();
        let mut s = Self { u };
        normalize(&mut s.u);
        s
    }
}

/// Result of normalizing one weight matrix.
#[derive(Clone, Debug)]
pub struct Normalized<T> {
    pub weight: Vec<T>,
    pub sigma: T,
    pub u: Vec<T>,
    pub v: Vec<T>,
}

fn norm<T: Real>(x: &[T]) -> T {
    x.iter().map(|&v| v * v).sum::<T>().sqrt()
}

fn normalize<T: Real>(x: &mut [T]) -> T {
    let n = norm(x);
    let d = n + T::lit(NORM_EPS);
    for v in x.iter_mut() {
        *v /= d;
    }
    n
}

/// `W^T u` for a row-major `rows x cols` matrix.
fn mat_t_vec<T: Real>(w: &[T], rows: usize, cols: usize, u: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for r in 0..rows {
        let ur = u[r];
        let row = &w[r * cols..(r + 1) * cols];
        for (o, &x) in out.iter_mut().zip(row) {
            *o += ur * x;
        }
    }
    out
}

fn mat_vec<T: Real>(w: &[T], rows: usize, cols: usize, v: &[T]) -> Vec<T> {
    (0..rows)
        .map(|r| {
            w[r * cols..(r + 1) * cols]
                .iter()
                .zip(v)
                .map(|(&a, &b)| a * b)
                .sum()
        })
        .collect()
}

fn check<T: Real>(w: &[T], rows: usize, cols: usize, state: &SpectralState<T>) -> Result<()> {
    if w.len() != rows * cols || state.u.len() != rows || rows == 0 || cols == 0 {
        return Err(Error::Shape(format!(
            "spectral normalization of {rows}x{cols} with {} weights and state of {}",
            w.len(),
            state.u.len()
        )));
    }
    if w.iter().all(|v| v.is_zero()) {
        return Err(Error::ZeroMatrix);
    }
    Ok(())
}

/// Run `iterations` power iterations (at least one), update `state`, and return `W / sigma`.
pub fn spectral_normalize<T: Real>(
    w: &[T],
    rows: usize,
    cols: usize,
    state: &mut SpectralState<T>,
    iterations: usize,
) -> Result<Normalized<T>> {
    check(w, rows, cols, state)?;
    let mut u = state.u.clone();
    let mut v = Vec::new();
    for _ in 0..iterations.max(1) {
        v = mat_t_vec(w, rows, cols, &u);
        if norm(&v) <= T::lit(NORM_EPS) {
            // u fell orthogonal to the row space; restart from a dense vector.
            u = SpectralState::new(rows).u;
            v = mat_t_vec(w, rows, cols, &u);
        }
        normalize(&mut v);
        u = mat_vec(w, rows, cols, &v);
        normalize(&mut u);
    }
    let wv = mat_vec(w, rows, cols, &v);
    let sigma: T = u.iter().zip(&wv).map(|(&a, &b)| a * b).sum();
    state.u.clone_from(&u);
    let weight = w.iter().map(|&x| x / sigma).collect();
    Ok(Normalized { weight, sigma, u, v })
}

/// Normalize with the carried state without advancing it (inference path).
pub fn spectral_normalize_frozen<T: Real>(
    w: &[T],
    rows: usize,
    cols: usize,
    state: &SpectralState<T>,
) -> Result<Normalized<T>> {
    check(w, rows, cols, state)?;
    let u = state.u.clone();
    let mut v = mat_t_vec(w, rows, cols, &u);
    let sigma = normalize(&mut v);
    let weight = w.iter().map(|&x| x / sigma).collect();
    Ok(Normalized { weight, sigma, u, v })
}

/// Gradient with respect to the raw weight given the gradient with respect to `W / sigma`,
/// treating `u` and `v` as constants: `(G - <G, W_bar> u v^T) / sigma`.
pub fn spectral_backward<T: Real>(
    grad_normalized: &[T],
    normalized: &Normalized<T>,
    rows: usize,
    cols: usize,
) -> Vec<T> {
    let inner: T = grad_normalized
        .iter()
        .zip(&normalized.weight)
        .map(|(&g, &w)| g * w)
        .sum();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let ur = normalized.u[r] * inner;
        for c in 0..cols {
            out.push((grad_normalized[r * cols + c] - ur * normalized.v[c]) / normalized.sigma);
        }
    }
    out
}

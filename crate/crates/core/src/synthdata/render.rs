//! Face-like renderer with anti-aliased (box-coverage) primitives.
//!
//! Geometry lives on a 1/16 grid so every region boundary falls on a pixel edge at
//! both supported resolutions. All fills share a horizontal lighting ramp so flat
//! regions carry a consistent left-to-right gradient.

use std::ops::{Add, Mul, Neg, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Scalar type the renderer is generic over: `f64` for images, [`Dual4`] for
/// exact derivatives with respect to the four continuous attributes.
pub trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self>
{
    fn c(v: f64) -> Self;
    fn val(self) -> f64;

    fn min(self, o: Self) -> Self {
        if self.val() <= o.val() {
            self
        } else {
            o
        }
    }

    fn max(self, o: Self) -> Self {
        if self.val() >= o.val() {
            self
        } else {
            o
        }
    }

    fn scale(self, k: f64) -> Self {
        self * Self::c(k)
    }
}

impl Scalar for f64 {
    fn c(v: f64) -> Self {
        v
    }
    fn val(self) -> f64 {
        self
    }
}

/// Forward-mode dual number carrying a gradient with respect to four inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual4 {
    pub v: f64,
    pub d: [f64; 4],
}

impl Dual4 {
    pub fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 4];
        d[i] = 1.0;
        Self { v, d }
    }
}

impl Add for Dual4 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut d = self.d;
        d.iter_mut().zip(o.d).for_each(|(a, b)| *a += b);
        Self { v: self.v + o.v, d }
    }
}

impl Sub for Dual4 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut d = self.d;
        d.iter_mut().zip(o.d).for_each(|(a, b)| *a -= b);
        Self { v: self.v - o.v, d }
    }
}

impl Mul for Dual4 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; 4];
        for (i, di) in d.iter_mut().enumerate() {
            *di = self.d[i] * o.v + self.v * o.d[i];
        }
        Self { v: self.v * o.v, d }
    }
}

impl Neg for Dual4 {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            v: -self.v,
            d: self.d.map(|x| -x),
        }
    }
}

impl Scalar for Dual4 {
    fn c(v: f64) -> Self {
        Self { v, d: [0.0; 4] }
    }
    fn val(self) -> f64 {
        self.v
    }
}

// Intensities in [0,1] before the lighting ramp.
pub(crate) const FACE: f64 = 0.72;
pub(crate) const BACKGROUND: f64 = 0.14;
pub(crate) const EYE: f64 = 0.30;
pub(crate) const BAR: f64 = 0.12;
pub(crate) const MOUTH: f64 = 0.26;
/// Intensity change across the full image width.
pub(crate) const LIGHT: f64 = 0.16;
/// Skin brightening from the bottom edge to the top edge.
pub(crate) const TOP_LIGHT: f64 = 0.08;
/// Hair sheen as a fraction of `min(h, 1 - h)` across the full width.
pub(crate) const HAIR_SHEEN: f64 = 0.6;

/// Mouth curvature amplitude and stroke thickness as fractions of the image height.
pub(crate) const MOUTH_AMPLITUDE: f64 = 1.0 / 32.0;
pub(crate) const MOUTH_THICKNESS: f64 = 2.5 / 32.0;

/// Half-open rectangle in pixel units: rows `[r0, r1)`, columns `[c0, c1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl Rect {
    fn grid(res: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> Self {
        let s = res / 16;
        Self {
            r0: r0 * s,
            r1: r1 * s,
            c0: c0 * s,
            c1: c1 * s,
        }
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.r0..self.r1).contains(&r) && (self.c0..self.c1).contains(&c)
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.r0..self.r1).flat_map(move |r| (self.c0..self.c1).map(move |c| (r, c)))
    }

    pub fn area(&self) -> usize {
        (self.r1 - self.r0) * (self.c1 - self.c0)
    }
}

/// Fixed per-resolution region masks. Each attribute only touches its own mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMasks {
    pub resolution: usize,
    pub hair: Rect,
    pub face_size: [Rect; 2],
    pub eye_band: Rect,
    pub mouth: Rect,
    pub nuisance: [Rect; 2],
    /// Plain face skin used as a confidence reference.
    pub skin: Rect,
}

impl RegionMasks {
    pub fn new(res: usize) -> Self {
        Self {
            resolution: res,
            hair: Rect::grid(res, 0, 3, 0, 16),
            face_size: [Rect::grid(res, 3, 16, 1, 4), Rect::grid(res, 3, 16, 12, 15)],
            eye_band: Rect::grid(res, 6, 8, 4, 12),
            mouth: Rect::grid(res, 10, 14, 5, 11),
            nuisance: [Rect::grid(res, 3, 16, 0, 1), Rect::grid(res, 3, 16, 15, 16)],
            skin: Rect::grid(res, 3, 6, 5, 11),
        }
    }

    /// Mouth stroke midline (pixel row boundary).
    pub(crate) fn mouth_mid(&self) -> f64 {
        (12 * self.resolution / 16) as f64
    }
}

pub(crate) fn light(res: usize, c: usize) -> f64 {
    LIGHT * ((c as f64 + 0.5) / res as f64 - 0.5)
}

/// Skin intensity at a pixel (both lighting terms applied).
pub(crate) fn skin(res: usize, r: usize, c: usize) -> f64 {
    FACE + light(res, c) + TOP_LIGHT * (0.5 - (r as f64 + 0.5) / res as f64)
}

/// Vertical position profile of the mouth stroke: +1 at the center, negative at corners.
pub(crate) fn mouth_profile(res: usize, c: usize) -> f64 {
    let u = (c as f64 + 0.5) / res as f64 - 0.5;
    1.0 - 2.0 * (u / (3.0 / 16.0)).powi(2)
}

fn overlap<S: Scalar>(a0: S, a1: S, p0: f64, p1: f64) -> S {
    (a1.min(S::c(p1)) - a0.max(S::c(p0))).max(S::c(0.0))
}

fn nuisance_pattern(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let freq = rng.random_range(1.0..2.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    (freq, phase)
}

/// Render in the [0,1] intensity domain.
///
/// `attrs` = (face_size, hair_shade, mouth_curve, eyewear), assumed in range.
pub(crate) fn render_unit<S: Scalar>(attrs: [S; 4], nuisance_seed: u64, res: usize) -> Vec<S> {
    let [face_size, hair, mouth, eyewear] = attrs;
    let m = RegionMasks::new(res);
    let r = res as f64;
    let (freq, phase) = nuisance_pattern(nuisance_seed);

    let half = face_size.scale(3.0 / 16.0) + S::c(4.0 / 16.0);
    let face_l = (S::c(0.5) - half).scale(r);
    let face_r = (S::c(0.5) + half).scale(r);
    let sheen = hair.min(S::c(1.0) - hair).scale(HAIR_SHEEN);

    let eye_rows = (6.5 * r / 16.0, 7.5 * r / 16.0);
    let eye_cols = [(5.0 * r / 16.0, 7.0 * r / 16.0), (9.0 * r / 16.0, 11.0 * r / 16.0)];
    let mid = m.mouth_mid();
    let amp = MOUTH_AMPLITUDE * r;
    let thick = MOUTH_THICKNESS * r;

    let mut out = Vec::with_capacity(res * res);
    for row in 0..res {
        for col in 0..res {
            let lit = light(res, col);
            let face = skin(res, row, col);
            let px = if m.hair.contains(row, col) {
                hair + sheen.scale((col as f64 + 0.5) / r - 0.5)
            } else if m.nuisance.iter().any(|q| q.contains(row, col)) {
                let v = (row as f64 + 0.5) / r;
                let side = if col < res / 2 { 0.0 } else { std::f64::consts::FRAC_PI_2 };
                S::c(BACKGROUND + 0.07 * (std::f64::consts::TAU * freq * v + phase + side).sin())
            } else if m.face_size.iter().any(|q| q.contains(row, col)) {
                let bg = BACKGROUND + lit;
                let cov = overlap(face_l, face_r, col as f64, col as f64 + 1.0);
                S::c(bg) + cov.scale(face - bg)
            } else if m.eye_band.contains(row, col) {
                let vcov = (eye_rows.1.min(row as f64 + 1.0) - eye_rows.0.max(row as f64)).max(0.0);
                let hcov: f64 = eye_cols
                    .iter()
                    .map(|&(a, b)| (b.min(col as f64 + 1.0) - a.max(col as f64)).max(0.0))
                    .sum();
                let base = face - (face - (EYE + lit)) * vcov * hcov;
                S::c(base) + eyewear.scale(BAR + lit - base)
            } else if m.mouth.contains(row, col) {
                let yc = S::c(mid) + mouth.scale(amp * mouth_profile(res, col));
                let cov = overlap(
                    yc - S::c(thick / 2.0),
                    yc + S::c(thick / 2.0),
                    row as f64,
                    row as f64 + 1.0,
                );
                S::c(face) - cov.scale(face - (MOUTH + lit))
            } else {
                S::c(face)
            };
            out.push(px);
        }
    }
    out
}

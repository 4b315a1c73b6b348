//! Perceptual hashes (dhash, phash, whash), pixel errors, and reconstruction reports.
//!
//! Hashes work on the [0, 1] grayscale image, `(x + 1) / 2`. Bits are laid out
//! row-major over the 8x8 decision grid with grid position (0, 0) in the most
//! significant bit.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Coefficients this close to zero are treated as exactly zero before thresholding,
/// so flat regions do not produce bits from rounding noise.
const ZERO_SNAP: f64 = 1e-10;

/// Resized neighbours closer than this count as equal in dhash (area weights do not
/// sum exactly to one in floating point, so a flat row would otherwise yield bits).
const DHASH_TIE: f64 = 1e-12;

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct HashCode(pub u64);

impl HashCode {
    fn from_bits(bits: impl IntoIterator<Item = bool>) -> Self {
        let mut v = 0u64;
        let mut n = 0;
        for b in bits {
            v = (v << 1) | u64::from(b);
            n += 1;
        }
        debug_assert_eq!(n, 64);
        HashCode(v)
    }

    /// Bit at decision-grid position (row, col).
    pub fn bit(&self, row: usize, col: usize) -> bool {
        (self.0 >> (63 - (row * 8 + col))) & 1 == 1
    }

    pub fn to_hex(&self) -> String {
        format!("{:016x}", self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        if s.len() != 16 {
            return Err(Error::InvalidValue(format!("hash code {s:?} is not 16 hex digits")));
        }
        u64::from_str_radix(s, 16)
            .map(HashCode)
            .map_err(|e| Error::InvalidValue(format!("hash code {s:?}: {e}")))
    }
}

impl fmt::Debug for HashCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HashCode({})", self.to_hex())
    }
}

impl fmt::Display for HashCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for HashCode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for HashCode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        HashCode::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

pub fn hash_similarity(a: HashCode, b: HashCode) -> f64 {
    1.0 - f64::from((a.0 ^ b.0).count_ones()) / 64.0
}

fn grayscale(img: &ImageTensor) -> Vec<f64> {
    img.data().iter().map(|&v| (f64::from(v) + 1.0) / 2.0).collect()
}

/// Box-filter weights mapping `n` source samples onto `m` output samples.
fn area_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n as f64 / m as f64;
    (0..m)
        .map(|i| {
            let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
            (lo.floor() as usize..(hi.ceil() as usize).min(n))
                .filter_map(|j| {
                    let w = (hi.min(j as f64 + 1.0) - lo.max(j as f64)) / scale;
                    (w > 0.0).then_some((j, w))
                })
                .collect()
        })
        .collect()
}

/// Area-average resize of a row-major `h x w` image to `out_h x out_w`.
pub fn area_resize(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    if (h, w) == (out_h, out_w) {
        return src.to_vec();
    }
    let wc = area_weights(w, out_w);
    let wr = area_weights(h, out_h);
    let mut cols = vec![0.0; h * out_w];
    for r in 0..h {
        for (c, taps) in wc.iter().enumerate() {
            cols[r * out_w + c] = taps.iter().map(|&(j, k)| k * src[r * w + j]).sum();
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for (r, taps) in wr.iter().enumerate() {
        for c in 0..out_w {
            out[r * out_w + c] = taps.iter().map(|&(j, k)| k * cols[j * out_w + c]).sum();
        }
    }
    out
}

fn require_size(img: &ImageTensor, min_h: usize, min_w: usize, what: &str) -> Result<()> {
    if img.height() < min_h || img.width() < min_w {
        return Err(Error::Shape(format!(
            "{what} needs at least {min_w}x{min_h}, image is {}x{}",
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

/// Difference hash: 9x8 area resize, bit = left neighbour strictly darker than right.
pub fn dhash(img: &ImageTensor) -> Result<HashCode> {
    require_size(img, 8, 9, "dhash")?;
    let g = area_resize(&grayscale(img), img.height(), img.width(), 8, 9);
    Ok(HashCode::from_bits(
        (0..8).flat_map(|r| (0..8).map(move |c| (r, c))).map(|(r, c)| g[r * 9 + c + 1] - g[r * 9 + c] > DHASH_TIE),
    ))
}

/// Orthonormal DCT-II basis: `basis[k][n]`.
fn dct_basis(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| {
            let a = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            (0..n)
                .map(|i| a * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos())
                .collect()
        })
        .collect()
}

fn snap(v: f64) -> f64 {
    if v.abs() < ZERO_SNAP {
        0.0
    } else {
        v
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Top-left 8x8 block of the 2-D orthonormal DCT-II of the 32x32 resized image.
pub fn phash_coefficients(img: &ImageTensor) -> Result<[f64; 64]> {
    require_size(img, 32, 32, "phash")?;
    let g = area_resize(&grayscale(img), img.height(), img.width(), 32, 32);
    let basis = dct_basis(32);
    // Row transform restricted to the first 8 frequencies, then columns.
    let mut rows = vec![0.0; 32 * 8];
    for r in 0..32 {
        for (v, b) in basis.iter().take(8).enumerate() {
            rows[r * 8 + v] = (0..32).map(|c| b[c] * g[r * 32 + c]).sum();
        }
    }
    let mut out = [0.0; 64];
    for (u, b) in basis.iter().take(8).enumerate() {
        for v in 0..8 {
            out[u * 8 + v] = snap((0..32).map(|r| b[r] * rows[r * 8 + v]).sum());
        }
    }
    Ok(out)
}

/// Perceptual hash: bit = coefficient above the median of the 63 AC coefficients.
pub fn phash(img: &ImageTensor) -> Result<HashCode> {
    let coef = phash_coefficients(img)?;
    let mut ac = coef[1..].to_vec();
    let med = median(&mut ac);
    Ok(HashCode::from_bits(coef.iter().map(|&c| c > med)))
}

/// 8x8 approximation band after two orthonormal Haar levels of the 32x32 resized image.
pub fn whash_coefficients(img: &ImageTensor) -> Result<[f64; 64]> {
    require_size(img, 8, 8, "whash")?;
    let mut g = area_resize(&grayscale(img), img.height(), img.width(), 32, 32);
    let mut n = 32;
    for _ in 0..2 {
        let m = n / 2;
        let mut next = vec![0.0; m * m];
        for r in 0..m {
            for c in 0..m {
                let s = g[2 * r * n + 2 * c]
                    + g[2 * r * n + 2 * c + 1]
                    + g[(2 * r + 1) * n + 2 * c]
                    + g[(2 * r + 1) * n + 2 * c + 1];
                next[r * m + c] = s / 2.0;
            }
        }
        g = next;
        n = m;
    }
    let mut out = [0.0; 64];
    out.copy_from_slice(&g);
    Ok(out)
}

/// Wavelet hash: bit = approximation coefficient above the median of all 64.
pub fn whash(img: &ImageTensor) -> Result<HashCode> {
    let coef = whash_coefficients(img)?;
    let mut all = coef.to_vec();
    let med = median(&mut all);
    Ok(HashCode::from_bits(coef.iter().map(|&c| c > med)))
}

fn check_pair(x: &ImageTensor, y: &ImageTensor) -> Result<()> {
    if (x.height(), x.width()) != (y.height(), y.width()) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    Ok(())
}

/// Mean absolute pixel error in the [-1, 1] domain.
pub fn pixel_mae(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_pair(x, y)?;
    let s: f64 = x.data().iter().zip(y.data()).map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs()).sum();
    Ok(s / x.data().len() as f64)
}

/// Mean squared pixel error in the [-1, 1] domain.
pub fn pixel_mse(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_pair(x, y)?;
    let s: f64 = x.data().iter().zip(y.data()).map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2)).sum();
    Ok(s / x.data().len() as f64)
}

/// Mean similarities and pixel errors for one reconstruction method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub dhash: f64,
    pub phash: f64,
    pub whash: f64,
    pub mae: f64,
    pub mse: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset_digest: String,
    /// Domain of the MAE/MSE columns.
    pub pixel_domain: String,
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn new(dataset_digest: impl Into<String>, rows: Vec<MetricsRow>) -> Self {
        Self { dataset_digest: dataset_digest.into(), pixel_domain: "[-1,1]".into(), rows }
    }

    pub fn row(&self, model: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    /// Aligned-column text rendering.
    pub fn to_table(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
        let mut out = format!(
            "dataset {}  (MAE/MSE in {})\n{:<name_w$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}\n",
            self.dataset_digest, self.pixel_domain, "model", "dhash", "phash", "whash", "MAE", "MSE", "n"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<name_w$}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7}\n",
                r.model, r.dhash, r.phash, r.whash, r.mae, r.mse, r.samples
            ));
        }
        out
    }
}

/// Score reconstructions against originals, pairwise in order.
pub fn score_pairs(
    model: &str,
    originals: &[ImageTensor],
    reconstructions: &[ImageTensor],
) -> Result<MetricsRow> {
    if originals.is_empty() {
        return Err(Error::Empty("no images to score".into()));
    }
    if originals.len() != reconstructions.len() {
        return Err(Error::Shape(format!(
            "{} originals vs {} reconstructions",
            originals.len(),
            reconstructions.len()
        )));
    }
    let mut acc = [0.0f64; 5];
    for (x, y) in originals.iter().zip(reconstructions) {
        acc[0] += hash_similarity(dhash(x)?, dhash(y)?);
        acc[1] += hash_similarity(phash(x)?, phash(y)?);
        acc[2] += hash_similarity(whash(x)?, whash(y)?);
        acc[3] += pixel_mae(x, y)?;
        acc[4] += pixel_mse(x, y)?;
    }
    let n = originals.len() as f64;
    Ok(MetricsRow {
        model: model.to_string(),
        dhash: acc[0] / n,
        phash: acc[1] / n,
        whash: acc[2] / n,
        mae: acc[3] / n,
        mse: acc[4] / n,
        samples: originals.len(),
    })
}

/// Pixelwise mean of a set of equally sized images.
pub fn mean_image(images: &[ImageTensor]) -> Result<ImageTensor> {
    let first = images.first().ok_or_else(|| Error::Empty("no images to average".into()))?;
    let mut acc = vec![0.0f64; first.data().len()];
    for img in images {
        check_pair(first, img)?;
        for (a, &v) in acc.iter_mut().zip(img.data()) {
            *a += f64::from(v);
        }
    }
    let n = images.len() as f64;
    ImageTensor::from_clamped(first.height(), first.width(), acc.into_iter().map(|v| (v / n) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> ImageTensor {
        let data = (0..h * w).map(|i| f(i / w, i % w) as f32).collect();
        ImageTensor::new(h, w, data).unwrap()
    }

    #[test]
    fn dhash_constant_and_gradient_closed_forms() {
        assert_eq!(dhash(&img(32, 32, |_, _| 0.3)).unwrap().0, 0);
        let grad = img(32, 32, |_, c| c as f64 / 31.0 * 2.0 - 1.0);
        assert_eq!(dhash(&grad).unwrap().0, u64::MAX);
        assert_eq!(dhash(&img(16, 16, |_, c| c as f64 / 15.0 - 0.5)).unwrap().0, u64::MAX);
    }

    #[test]
    fn phash_constant_image() {
        let c = phash_coefficients(&img(32, 32, |_, _| 0.2)).unwrap();
        assert!(c[1..].iter().all(|&v| v == 0.0));
        let h = phash(&img(32, 32, |_, _| 0.2)).unwrap();
        assert_eq!(h.0, 1 << 63);
        assert_eq!(phash(&img(32, 32, |_, _| -1.0)).unwrap().0, 0);
    }

    #[test]
    fn whash_constant_and_split() {
        assert_eq!(whash(&img(32, 32, |_, _| 0.5)).unwrap().0, 0);
        let split = whash(&img(32, 32, |_, c| if c < 16 { -1.0 } else { 1.0 })).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(split.bit(r, c), c >= 4);
            }
        }
        assert_eq!(split.to_hex(), "0f0f0f0f0f0f0f0f");
    }

    #[test]
    fn too_small_images_rejected() {
        let tiny = img(8, 8, |_, _| 0.0);
        assert!(dhash(&tiny).is_err());
        assert!(phash(&tiny).is_err());
        assert!(whash(&img(4, 4, |_, _| 0.0)).is_err());
        assert!(whash(&tiny).is_ok());
    }

    #[test]
    fn similarity_arithmetic() {
        let a = HashCode(0x0123_4567_89ab_cdef);
        assert_eq!(hash_similarity(a, a), 1.0);
        assert_eq!(hash_similarity(a, HashCode(!a.0)), 0.0);
        assert_eq!(hash_similarity(a, HashCode(a.0 ^ 0xffff)), 0.75);
    }

    #[test]
    fn hex_round_trip_and_bit_order() {
        let h = HashCode(1 << 63);
        assert!(h.bit(0, 0));
        assert_eq!(h.to_hex(), "8000000000000000");
        assert_eq!(HashCode::from_hex(&h.to_hex()).unwrap(), h);
        assert!(HashCode::from_hex("xyz").is_err());
        let json = serde_json::to_string(&h).unwrap();
        assert_eq!(json, "\"8000000000000000\"");
    }

    #[test]
    fn pixel_error_extremes() {
        let lo = img(4, 4, |_, _| -1.0);
        let hi = img(4, 4, |_, _| 1.0);
        assert_eq!(pixel_mae(&lo, &hi).unwrap(), 2.0);
        assert_eq!(pixel_mse(&lo, &hi).unwrap(), 4.0);
        assert_eq!(pixel_mae(&lo, &lo).unwrap(), 0.0);
        assert!(pixel_mae(&lo, &img(4, 5, |_, _| 0.0)).is_err());
    }

    #[test]
    fn area_resize_preserves_mean() {
        let src: Vec<f64> = (0..32 * 32).map(|i| ((i * 37) % 101) as f64).collect();
        let out = area_resize(&src, 32, 32, 8, 9);
        let m1 = src.iter().sum::<f64>() / src.len() as f64;
        let m2 = out.iter().sum::<f64>() / out.len() as f64;
        assert!((m1 - m2).abs() < 1e-9);
    }

    #[test]
    fn report_table_has_one_line_per_row() {
        let x = vec![img(32, 32, |r, c| ((r * c) % 7) as f64 / 7.0 - 0.5)];
        let row = score_pairs("identity", &x, &x).unwrap();
        assert_eq!((row.dhash, row.phash, row.whash, row.mae, row.mse), (1.0, 1.0, 1.0, 0.0, 0.0));
        let rep = MetricsReport::new("abc", vec![row]);
        assert_eq!(rep.to_table().lines().count(), 3);
        let back: MetricsReport = serde_json::from_str(&serde_json::to_string(&rep).unwrap()).unwrap();
        assert_eq!(back, rep);
    }

    fn arb_image() -> impl Strategy<Value = ImageTensor> {
        prop::collection::vec(-1.0f32..=1.0, 32 * 32).prop_map(|d| ImageTensor::new(32, 32, d).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn hashes_invariant_under_positive_gain(x in arb_image(), gain in 0.05f32..1.0) {
            // Gain about grayscale zero: [0,1] value g -> gain * g.
            let scaled = ImageTensor::new(32, 32, x.data().iter().map(|&v| gain * (v + 1.0) - 1.0).collect()).unwrap();
            prop_assert_eq!(dhash(&x).unwrap(), dhash(&scaled).unwrap());
            let (a, b) = (phash(&x).unwrap().0, phash(&scaled).unwrap().0);
            prop_assert_eq!(a & (u64::MAX >> 1), b & (u64::MAX >> 1));
            prop_assert_eq!(whash(&x).unwrap(), whash(&scaled).unwrap());
        }

        #[test]
        fn similarity_symmetric_and_bounded(a in any::<u64>(), b in any::<u64>()) {
            let s = hash_similarity(HashCode(a), HashCode(b));
            prop_assert_eq!(s, hash_similarity(HashCode(b), HashCode(a)));
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(s == 1.0, a == b);
        }

        #[test]
        fn mse_dominates_squared_mae(x in arb_image(), y in arb_image()) {
            let mae = pixel_mae(&x, &y).unwrap();
            let mse = pixel_mse(&x, &y).unwrap();
            prop_assert!(mse + 1e-12 >= mae * mae);
            prop_assert_eq!(mae, pixel_mae(&y, &x).unwrap());
        }
    }
}

//! Regression and image-quality metrics, and PCA visualization of feature
//! maps.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub mare: f64,
    pub rmse: f64,
    pub n: usize,
}

pub fn regression_metrics(preds: &[f64], gts: &[f64]) -> Result<MetricReport> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::invalid(format!(
            "need equal non-empty prediction and ground-truth lists ({} vs {})",
            preds.len(),
            gts.len()
        )));
    }
    if let Some(bad) = gts.iter().find(|g| !(**g > 0.0)) {
        return Err(Error::invalid(format!("MARE undefined for ground truth {bad}")));
    }
    let n = preds.len() as f64;
    let (mut abs, mut rel, mut sq) = (Neumaier::default(), Neumaier::default(), Neumaier::default());
    for (p, g) in preds.iter().zip(gts) {
        let e = (g - p).abs();
        abs.add(e);
        rel.add(e / g);
        sq.add(e * e);
    }
    Ok(MetricReport {
        mae: abs.total() / n,
        mare: rel.total() / n,
        rmse: (sq.total() / n).sqrt(),
        n: preds.len(),
    })
}

/// Compensated summation.
#[derive(Default)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

pub const PSNR_CAP: f64 = 100.0;

/// Interleaved `h×w×channels` image with values in `[0,1]`.
#[derive(Clone, Copy, Debug)]
pub struct ImageView<'a> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: &'a [f64],
}

impl<'a> ImageView<'a> {
    pub fn new(width: usize, height: usize, channels: usize, data: &'a [f64]) -> Result<Self> {
        if data.len() != width * height * channels || channels == 0 {
            return Err(Error::invalid(format!(
                "image buffer of {} values does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(ImageView {
            width,
            height,
            channels,
            data,
        })
    }
}

fn same_dims(a: &ImageView, b: &ImageView) -> Result<()> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(Error::invalid(format!(
            "image dimensions differ: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

/// `10·log10(1/MSE)`, capped at 100 dB.
pub fn psnr(a: &ImageView, b: &ImageView) -> Result<f64> {
    same_dims(a, b)?;
    let mse = a.data.iter().zip(b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

const SSIM_SIGMA: f64 = 1.5;
const SSIM_RADIUS: usize = 5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_taps() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - SSIM_RADIUS as f64;
        *v = (-0.5 * x * x / (SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Mirror index with the edge sample repeated (`d c b a | a b c d`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

/// Separable Gaussian blur of a single-channel plane.
fn blur(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * plane[y * w + reflect(x as isize + k as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * tmp[reflect(y as isize + k as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5),
/// unit data range, averaged over channels. Border pixels within the window
/// radius are excluded from the mean.
pub fn ssim(a: &ImageView, b: &ImageView) -> Result<f64> {
    same_dims(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < 2 * SSIM_RADIUS + 1 || h < 2 * SSIM_RADIUS + 1 {
        return Err(Error::invalid(format!("SSIM needs images of at least 11x11, got {w}x{h}")));
    }
    let taps = gaussian_taps();
    let mut total = 0.0;
    for c in 0..a.channels {
        let pa: Vec<f64> = (0..w * h).map(|i| a.data[i * a.channels + c]).collect();
        let pb: Vec<f64> = (0..w * h).map(|i| b.data[i * b.channels + c]).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let ux = blur(&pa, w, h, &taps);
        let uy = blur(&pb, w, h, &taps);
        let uxx = blur(&prod(&pa, &pa), w, h, &taps);
        let uyy = blur(&prod(&pb, &pb), w, h, &taps);
        let uxy = blur(&prod(&pa, &pb), w, h, &taps);
        let mut acc = 0.0;
        let mut count = 0usize;
        for y in SSIM_RADIUS..h - SSIM_RADIUS {
            for x in SSIM_RADIUS..w - SSIM_RADIUS {
                let i = y * w + x;
                let vx = uxx[i] - ux[i] * ux[i];
                let vy = uyy[i] - uy[i] * uy[i];
                let vxy = uxy[i] - ux[i] * uy[i];
                let num = (2.0 * ux[i] * uy[i] + SSIM_C1) * (2.0 * vxy + SSIM_C2);
                let den = (ux[i] * ux[i] + uy[i] * uy[i] + SSIM_C1) * (vx + vy + SSIM_C2);
                acc += num / den;
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    Ok(total / a.channels as f64)
}

pub fn image_metrics(a: &ImageView, b: &ImageView) -> Result<(f64, f64)> {
    Ok((psnr(a, b)?, ssim(a, b)?))
}

/// Projects an `h×w×c` feature map onto its top three principal components
/// and min-max normalizes each to `[0,1]`. Returns interleaved RGB.
pub fn feature_pca_rgb(features: &[f64], height: usize, width: usize, channels: usize) -> Result<Vec<f64>> {
    let n = height * width;
    if channels < 3 {
        return Err(Error::invalid(format!("PCA visualization needs c >= 3, got {channels}")));
    }
    if features.len() != n * channels || n == 0 {
        return Err(Error::invalid("feature buffer does not match h*w*c"));
    }
    let (basis, _) = principal_axes(features, n, channels)?;
    let mut proj = vec![0.0; n * 3];
    let mean = column_means(features, n, channels);
    for i in 0..n {
        let row = &features[i * channels..(i + 1) * channels];
        for (k, axis) in basis.iter().enumerate() {
            if let Some(axis) = axis {
                proj[i * 3 + k] = row.iter().zip(&mean).zip(axis).map(|((x, m), a)| (x - m) * a).sum();
            }
        }
    }
    for k in 0..3 {
        let (lo, hi) = (0..n).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
            (lo.min(proj[i * 3 + k]), hi.max(proj[i * 3 + k]))
        });
        let span = hi - lo;
        for i in 0..n {
            proj[i * 3 + k] = if span > 0.0 && basis[k].is_some() {
                (proj[i * 3 + k] - lo) / span
            } else {
                0.0
            };
        }
    }
    Ok(proj)
}

fn column_means(data: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut mean = vec![0.0; c];
    for row in data.chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    mean
}

/// Top three covariance eigenvectors (`None` where the covariance has rank
/// below three) and their eigenvalues.
pub fn principal_axes(data: &[f64], n: usize, c: usize) -> Result<([Option<Vec<f64>>; 3], [f64; 3])> {
    let mean = column_means(data, n, c);
    let mut cov = DMatrix::<f64>::zeros(c, c);
    for row in data.chunks_exact(c) {
        for i in 0..c {
            let di = row[i] - mean[i];
            for j in i..c {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            let v = cov[(i, j)] / n as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let mut axes: [Option<Vec<f64>>; 3] = [None, None, None];
    let mut values = [0.0; 3];
    for k in 0..3 {
        let lam = eig.eigenvalues[order[k]];
        values[k] = lam.max(0.0);
        if lam > 1e-12 * top.max(1e-300) && lam > 0.0 {
            axes[k] = Some(eig.eigenvectors.column(order[k]).iter().copied().collect());
        } else {
            log::warn!("feature covariance has rank {k}; PCA channel {k} set to zero");
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite feature covariance"));
    }
    Ok((axes, values))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn regression_cases() {
        let r = regression_metrics(&[5.0, 7.0], &[5.0, 7.0]).unwrap();
        assert_eq!((r.mae, r.mare, r.rmse), (0.0, 0.0, 0.0));
        let r = regression_metrics(&[110.0], &[100.0]).unwrap();
        assert_eq!((r.mae, r.mare, r.rmse), (10.0, 0.1, 10.0));
        let r = regression_metrics(&[90.0, 120.0], &[100.0, 100.0]).unwrap();
        assert_eq!(r.mae, 15.0);
        // 0.1 + 0.2 is a rounding tie in f64, so 0.15 is off by one ulp
        assert!((r.mare - 0.15).abs() <= f64::EPSILON * 0.15);
        assert!((r.rmse - 250f64.sqrt()).abs() < 1e-12);
        assert!(regression_metrics(&[1.0], &[0.0]).is_err());
        assert!(regression_metrics(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn permutation_invariant() {
        let a = regression_metrics(&[1.0, 5.0, 3.0], &[2.0, 4.0, 9.0]).unwrap();
        let b = regression_metrics(&[3.0, 1.0, 5.0], &[9.0, 2.0, 4.0]).unwrap();
        assert!((a.mae - b.mae).abs() < 1e-15 && (a.rmse - b.rmse).abs() < 1e-15);
    }

    #[test]
    fn identical_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.random()).collect();
        let v = ImageView::new(16, 16, 3, &d).unwrap();
        let (p, s) = image_metrics(&v, &v).unwrap();
        assert_eq!(p, 100.0);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_of_uniform_offset() {
        let a = vec![0.3; 12 * 12 * 3];
        let b = vec![0.4; 12 * 12 * 3];
        let p = psnr(&ImageView::new(12, 12, 3, &a).unwrap(), &ImageView::new(12, 12, 3, &b).unwrap()).unwrap();
        assert!((p - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let a = vec![0.5; 12 * 12];
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.05, 0.1, 0.2] {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v + if i % 2 == 0 { amp } else { -amp }).collect();
            let p = psnr(&ImageView::new(12, 12, 1, &a).unwrap(), &ImageView::new(12, 12, 1, &b).unwrap()).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn dimension_mismatch() {
        let a = vec![0.0; 12 * 12];
        let b = vec![0.0; 13 * 12];
        assert!(psnr(&ImageView::new(12, 12, 1, &a).unwrap(), &ImageView::new(13, 12, 1, &b).unwrap()).is_err());
    }

    #[test]
    fn reflect_indices() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn two_cluster_pca() {
        let (h, w, c) = (6, 5, 8);
        let u = [0.3, -1.0, 2.0, 0.0, 0.5, 0.1, -0.7, 1.1];
        let mut f = vec![0.0; h * w * c];
        for i in 0..h * w {
            if i % 3 == 0 {
                f[i * c..(i + 1) * c].copy_from_slice(&u);
            }
        }
        let rgb = feature_pca_rgb(&f, h, w, c).unwrap();
        assert!(rgb.iter().all(|v| (0.0..=1.0).contains(v)));
        let mut colors: Vec<[u64; 3]> = rgb.chunks(3).map(|p| [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()]).collect();
        colors.sort();
        colors.dedup();
        assert_eq!(colors.len(), 2);
        assert!(feature_pca_rgb(&f, h, w, 2).is_err());
    }
}

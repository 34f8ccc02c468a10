use rand::Rng;
use serde::{Deserialize, Serialize};

use super::camera::{Ray, Vec3};
use crate::diffcore::sigmoid;
use crate::error::{Error, Result};

/// Floor on `Φ(scale·s_i)` in the opacity ratio.
pub const PHI_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Stratified,
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub x: Vec<Vec3>,
    pub dt: Vec<f64>,
}

/// `n` positions in `[t_near, t_far]`, one per equal-width bin.
pub fn sample_ray<R: Rng>(ray: &Ray, n: usize, mode: SampleMode, rng: &mut R) -> Result<RaySamples> {
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 samples per ray, got {n}")));
    }
    let width = (ray.t_far - ray.t_near) / n as f64;
    let t: Vec<f64> = (0..n)
        .map(|i| {
            let u = match mode {
                SampleMode::Uniform => 0.5,
                SampleMode::Stratified => rng.random::<f64>(),
            };
            ray.t_near + (i as f64 + u) * width
        })
        .collect();
    let dt = (0..n)
        .map(|i| if i + 1 < n { t[i + 1] - t[i] } else { ray.t_far - t[i] })
        .collect();
    let x = t.iter().map(|&ti| ray.at(ti)).collect();
    Ok(RaySamples { t, x, dt })
}

/// Discrete opacity between two consecutive samples:
/// `max((Φ(k·s_i) − Φ(k·s_{i+1})) / Φ(k·s_i), 0)`.
pub fn alpha_from_sdf(s_i: f64, s_next: f64, scale: f64) -> f64 {
    let a = sigmoid(scale * s_i);
    let b = sigmoid(scale * s_next);
    ((a - b) / a.max(PHI_FLOOR)).max(0.0)
}

/// Opaque density `ρ = max(−(dΦ/dt)/Φ, 0)` at a point where the signed
/// distance is `s` and changes along the ray at rate `ds_dt`.
pub fn density_from_sdf(s: f64, ds_dt: f64, scale: f64) -> f64 {
    (-scale * ds_dt * (1.0 - sigmoid(scale * s))).max(0.0)
}

/// Weights and transmittance from per-sample opacities.
pub fn composite(alphas: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut t = 1.0;
    let mut weights = Vec::with_capacity(alphas.len());
    let mut trans = Vec::with_capacity(alphas.len());
    for &a in alphas {
        trans.push(t);
        weights.push(t * a);
        t *= 1.0 - a;
    }
    (weights, trans)
}

pub fn alphas_from_sigma(sigmas: &[f64], dts: &[f64]) -> Vec<f64> {
    sigmas.iter().zip(dts).map(|(s, d)| 1.0 - (-s * d).exp()).collect()
}

pub fn composite_sigma(sigmas: &[f64], dts: &[f64]) -> (Vec<f64>, Vec<f64>) {
    composite(&alphas_from_sigma(sigmas, dts))
}

/// Transmittance after the last sample.
pub fn final_transmittance(alphas: &[f64]) -> f64 {
    alphas.iter().map(|a| 1.0 - a).product()
}

/// Opacities of a sampled ray from signed distances at the samples plus one
/// extra value at `t_far`.
pub fn alphas_from_sdf_samples(sdf: &[f64], scale: f64) -> Vec<f64> {
    sdf.windows(2).map(|w| alpha_from_sdf(w[0], w[1], scale)).collect()
}

/// Opacities by midpoint quadrature of the continuous density, given the
/// signed distance and its derivative along the ray at segment midpoints.
pub fn alphas_midpoint(sdf_mid: &[f64], ds_dt: &[f64], dts: &[f64], scale: f64) -> Vec<f64> {
    let sigmas: Vec<f64> = sdf_mid
        .iter()
        .zip(ds_dt)
        .map(|(&s, &d)| density_from_sdf(s, d, scale))
        .collect();
    alphas_from_sigma(&sigmas, dts)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn unit_ray() -> Ray {
        Ray {
            o: [0.0; 3],
            v: [0.0, 0.0, 1.0],
            t_near: 0.0,
            t_far: 1.0,
        }
    }

    #[test]
    fn uniform_midpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_ray(&unit_ray(), 4, SampleMode::Uniform, &mut rng).unwrap();
        assert_eq!(s.t, vec![0.125, 0.375, 0.625, 0.875]);
        assert_eq!(s.dt, vec![0.25, 0.25, 0.25, 0.125]);
        assert!(sample_ray(&unit_ray(), 1, SampleMode::Uniform, &mut rng).is_err());
    }

    #[test]
    fn sample_positions_are_exact() {
        let ray = Ray {
            o: [0.1, -0.3, 0.2],
            v: [0.6, 0.0, 0.8],
            t_near: 0.2,
            t_far: 1.7,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_ray(&ray, 16, SampleMode::Stratified, &mut rng).unwrap();
        for (t, x) in s.t.iter().zip(&s.x) {
            assert_eq!(*x, ray.at(*t));
        }
    }

    #[test]
    fn stratified_is_ascending_and_unbiased() {
        let ray = unit_ray();
        let n = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mean = vec![0.0; n];
        let trials = 10_000;
        for _ in 0..trials {
            let s = sample_ray(&ray, n, SampleMode::Stratified, &mut rng).unwrap();
            assert!(s.t.windows(2).all(|w| w[0] < w[1]));
            assert!(s.t.iter().all(|t| (0.0..=1.0).contains(t)));
            for (m, t) in mean.iter_mut().zip(&s.t) {
                *m += t / trials as f64;
            }
        }
        for (i, m) in mean.iter().enumerate() {
            assert!((m - (i as f64 + 0.5) / n as f64).abs() < 0.01);
        }
    }

    #[test]
    fn alpha_cases() {
        assert_eq!(alpha_from_sdf(0.3, 0.3, 10.0), 0.0);
        assert!(alpha_from_sdf(0.01, -0.01, 1e5) > 1.0 - 1e-9);
        assert_eq!(alpha_from_sdf(-0.2, 0.1, 10.0), 0.0);
    }

    #[test]
    fn composite_cases() {
        let (w, t) = composite(&[0.0; 5]);
        assert!(w.iter().all(|x| *x == 0.0));
        assert!(t.iter().all(|x| *x == 1.0));
        let (w, _) = composite(&[0.0, 0.0, 1.0, 0.3, 0.9]);
        assert_eq!(w, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_sigma_transmittance() {
        let n = 256;
        for sigma in [0.5, 1.0, 3.0] {
            let dts = vec![1.0 / n as f64; n];
            let a = alphas_from_sigma(&vec![sigma; n], &dts);
            assert!((final_transmittance(&a) - (-sigma as f64).exp()).abs() < 1e-3);
        }
    }

    #[test]
    fn discrete_and_midpoint_alphas_agree_on_linear_sdf() {
        let n = 64;
        let t: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
        let sdf: Vec<f64> = t.iter().map(|t| 0.4 - t).collect();
        let a = alphas_from_sdf_samples(&sdf, 50.0);
        let mid: Vec<f64> = t.windows(2).map(|w| 0.4 - 0.5 * (w[0] + w[1])).collect();
        let b = alphas_midpoint(&mid, &vec![-1.0; n], &vec![1.0 / n as f64; n], 50.0);
        let ta = final_transmittance(&a);
        let tb = final_transmittance(&b);
        assert!((ta - tb).abs() < 1e-3, "{ta} vs {tb}");
    }
}

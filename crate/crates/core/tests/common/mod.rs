#![allow(dead_code)]

pub mod ssim_table;

/// 64-bit LCG shared with the reference-value generator scripts.
pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Lcg(seed)
    }

    pub fn next_f64(&mut self) -> f64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// The image pair behind row `k` of the SSIM reference table.
pub fn ssim_pair(k: u64, w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = Lcg::new(1000 + k);
    let a: Vec<f64> = (0..w * h * 3).map(|_| rng.next_f64()).collect();
    let u: Vec<f64> = (0..w * h * 3).map(|_| rng.next_f64()).collect();
    let mix = 0.2 + 0.03 * k as f64;
    let b = a.iter().zip(&u).map(|(x, y)| (1.0 - mix) * x + mix * y).collect();
    (a, b)
}

/// Worst relative error between analytic gradient entries and central
/// differences of `f` at `probes` random coordinates of `x0`.
///
/// The denominator is floored at `max(1e-6, 1e-5·|f(x0)|)`: central
/// differences cannot resolve entries much below `ε·|f|/h`, so those are
/// judged on an absolute scale tied to the size of `f`.
pub fn fd_worst<F: Fn(&[f64]) -> f64>(x0: &[f64], analytic: &[f64], probes: usize, seed: u64, h: f64, f: F) -> f64 {
    assert_eq!(x0.len(), analytic.len());
    let floor = 1e-6f64.max(1e-5 * f(x0).abs());
    let mut rng = Lcg::new(seed);
    let mut x = x0.to_vec();
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let i = ((rng.next_f64() * x.len() as f64) as usize).min(x.len() - 1);
        x[i] = x0[i] + h;
        let fp = f(&x);
        x[i] = x0[i] - h;
        let fm = f(&x);
        x[i] = x0[i];
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// Dense stride-`s`, padding-1 3×3×3 convolution of a channel-last grid.
/// Kernel rows are `tap·cin + ci` with tap `(dx+1)·9 + (dy+1)·3 + (dz+1)`.
pub fn dense_conv3d(
    dims: [usize; 3],
    cin: usize,
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    stride: usize,
) -> ([usize; 3], Vec<f64>) {
    let cout = bias.len();
    let od = dims.map(|d| (d + stride - 1) / stride);
    let mut out = vec![0.0; od[0] * od[1] * od[2] * cout];
    for ox in 0..od[0] {
        for oy in 0..od[1] {
            for oz in 0..od[2] {
                let o = ((ox * od[1] + oy) * od[2] + oz) * cout;
                out[o..o + cout].copy_from_slice(bias);
                for dx in 0..3 {
                    for dy in 0..3 {
                        for dz in 0..3 {
                            let p = [
                                (ox * stride + dx) as isize - 1,
                                (oy * stride + dy) as isize - 1,
                                (oz * stride + dz) as isize - 1,
                            ];
                            if (0..3).any(|a| p[a] < 0 || p[a] >= dims[a] as isize) {
                                continue;
                            }
                            let i = ((p[0] as usize * dims[1] + p[1] as usize) * dims[2] + p[2] as usize) * cin;
                            let tap = dx * 9 + dy * 3 + dz;
                            for ci in 0..cin {
                                let v = input[i + ci];
                                if v == 0.0 {
                                    continue;
                                }
                                let row = (tap * cin + ci) * cout;
                                for co in 0..cout {
                                    out[o + co] += v * kernel[row + co];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (od, out)
}

//! Branch-free `exp`, softplus and sigmoid kernels. Written so the
//! elementwise loops over them auto-vectorize.

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 0.693_147_180_369_123_816_49;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
/// `1.5·2^52`: adding it rounds to an integer held in the low mantissa bits.
const MAGIC: f64 = 6_755_399_441_055_744.0;
const EXP_MIN: f64 = -700.0;

/// `exp(x)` for `x` in `[-700, 0]`.
#[inline(always)]
fn exp_nonpos(x: f64) -> f64 {
    let x = x.max(EXP_MIN);
    let t = x * LOG2E + MAGIC;
    let kf = t - MAGIC;
    let k = t.to_bits().wrapping_sub(MAGIC.to_bits());
    let r = (x - kf * LN2_HI) - kf * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    p * f64::from_bits(k.wrapping_add(1023) << 52)
}

/// `ln(1 + e)` for `e` in `[0, 1]`: halve `1 + e` above `√2`, then sum
/// the `2·atanh(u)` series for `|u| ≤ 0.172`.
#[inline(always)]
fn ln1p_unit(e: f64) -> f64 {
    let w = 1.0 + e;
    let big = w > std::f64::consts::SQRT_2;
    let (num, den, add) = if big {
        (0.5 * w - 1.0, 0.5 * w + 1.0, std::f64::consts::LN_2)
    } else {
        (e, w + 1.0, 0.0)
    };
    let u = num / den;
    let u2 = u * u;
    let mut s = 1.0 / 21.0;
    s = s * u2 + 1.0 / 19.0;
    s = s * u2 + 1.0 / 17.0;
    s = s * u2 + 1.0 / 15.0;
    s = s * u2 + 1.0 / 13.0;
    s = s * u2 + 1.0 / 11.0;
    s = s * u2 + 1.0 / 9.0;
    s = s * u2 + 1.0 / 7.0;
    s = s * u2 + 1.0 / 5.0;
    s = s * u2 + 1.0 / 3.0;
    s = s * u2 + 1.0;
    add + 2.0 * u * s
}

#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    if x > 0.0 || x < EXP_MIN || x.is_nan() {
        return x.exp();
    }
    exp_nonpos(x)
}

/// `softplus(beta·x) / beta`.
#[inline(always)]
pub(crate) fn softplus(x: f64, beta: f64) -> f64 {
    let z = beta * x;
    let e = exp_nonpos(-z.abs());
    (z.max(0.0) + ln1p_unit(e)) * (1.0 / beta)
}

/// Derivative of [`softplus`] in `x`, `sigmoid(beta·x)`.
#[inline(always)]
pub(crate) fn softplus_grad(x: f64, beta: f64) -> f64 {
    sigmoid(beta * x)
}

/// [`softplus_grad`] recovered from the output `y = softplus(x)`, as
/// `1 - exp(-beta·y)`.
#[inline(always)]
pub(crate) fn softplus_grad_from_output(y: f64, beta: f64) -> f64 {
    let t = beta * y;
    let series = t * (1.0 - t * (0.5 - t * (1.0 / 6.0 - t * (1.0 / 24.0 - t * (1.0 / 120.0)))));
    if t < 1e-3 {
        series
    } else {
        1.0 - exp_nonpos(-t)
    }
}

#[inline(always)]
pub(crate) fn sigmoid(z: f64) -> f64 {
    let e = exp_nonpos(-z.abs());
    let num = if z >= 0.0 { 1.0 } else { e };
    num / (1.0 + e)
}

/// Runs `$body` compiled for AVX2 when the CPU has it. The kernels use no
/// fused multiply-add, so both paths round identically.
macro_rules! dispatch {
    ($name:ident, $avx:ident, ($($arg:ident : $ty:ty),*), $body:block) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        fn $avx($($arg: $ty),*) $body

        pub(crate) fn $name($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the feature was detected at run time.
                return unsafe { $avx($($arg),*) };
            }
            $body
        }
    };
}

dispatch!(softplus_slice, softplus_slice_avx2, (v: &mut [f64], beta: f64), {
    for x in v.iter_mut() {
        *x = softplus(*x, beta);
    }
});

dispatch!(softplus_backward_slice, softplus_backward_slice_avx2, (g: &[f64], y: &[f64], out: &mut [f64], beta: f64), {
    for ((o, &gv), &yv) in out.iter_mut().zip(g).zip(y) {
        *o = gv * softplus_grad_from_output(yv, beta);
    }
});

dispatch!(sigmoid_slice, sigmoid_slice_avx2, (v: &mut [f64]), {
    for x in v.iter_mut() {
        *x = sigmoid(*x);
    }
});

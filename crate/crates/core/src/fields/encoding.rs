use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::Result;

/// Frequency counts for the Fourier-feature encoding of positions and
/// viewing directions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingSpec {
    pub position_frequencies: usize,
    pub direction_frequencies: usize,
    pub include_raw: bool,
}

impl Default for EncodingSpec {
    fn default() -> Self {
        EncodingSpec {
            position_frequencies: 6,
            direction_frequencies: 4,
            include_raw: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodingKind {
    Position,
    Direction,
}

impl EncodingSpec {
    pub fn frequencies(&self, kind: EncodingKind) -> usize {
        match kind {
            EncodingKind::Position => self.position_frequencies,
            EncodingKind::Direction => self.direction_frequencies,
        }
    }

    /// Width of the encoding of a `d`-vector.
    pub fn encoded_dim(&self, d: usize, kind: EncodingKind) -> usize {
        d * (usize::from(self.include_raw) + 2 * self.frequencies(kind))
    }
}

/// `(p, sin(2⁰πp), cos(2⁰πp), …, sin(2^{L−1}πp), cos(2^{L−1}πp))`.
pub fn positional_encode(p: &[f64], spec: &EncodingSpec, kind: EncodingKind) -> Vec<f64> {
    let mut out = Vec::with_capacity(spec.encoded_dim(p.len(), kind));
    encode_into(p, spec.frequencies(kind), spec.include_raw, &mut out);
    out
}

/// Angles are doubled with `sin 2θ = 2 sin θ cos θ`, `cos 2θ = 1 − 2 sin² θ`
/// so each component needs one `sin_cos` call.
fn encode_into(p: &[f64], freqs: usize, include_raw: bool, out: &mut Vec<f64>) {
    if include_raw {
        out.extend_from_slice(p);
    }
    if freqs == 0 {
        return;
    }
    let d = p.len();
    let mut s: Vec<f64> = Vec::with_capacity(d);
    let mut c: Vec<f64> = Vec::with_capacity(d);
    for &x in p {
        let (sv, cv) = (PI * x).sin_cos();
        s.push(sv);
        c.push(cv);
    }
    for k in 0..freqs {
        if k > 0 {
            for j in 0..d {
                let (sv, cv) = (s[j], c[j]);
                s[j] = 2.0 * sv * cv;
                c[j] = 1.0 - 2.0 * sv * sv;
            }
        }
        out.extend_from_slice(&s);
        out.extend_from_slice(&c);
    }
}

/// Encode every row of an `n×d` tensor.
pub fn encode_rows(points: &Tensor, spec: &EncodingSpec, kind: EncodingKind) -> Tensor {
    let d = points.cols();
    let width = spec.encoded_dim(d, kind);
    let freqs = spec.frequencies(kind);
    let rows = crate::parallel::map_indices(points.rows().div_ceil(1024), |chunk| {
        let lo = chunk * 1024;
        let hi = (lo + 1024).min(points.rows());
        let mut buf = Vec::with_capacity((hi - lo) * width);
        for r in lo..hi {
            encode_into(points.row_slice(r), freqs, spec.include_raw, &mut buf);
        }
        buf
    });
    Tensor::new(points.rows(), width, rows.concat())
}

/// Differentiable encoding of a node of points (same layout as
/// [`positional_encode`]).
pub fn encode_node(g: &mut Graph, x: NodeId, spec: &EncodingSpec, kind: EncodingKind) -> Result<NodeId> {
    let mut parts = Vec::new();
    if spec.include_raw {
        parts.push(x);
    }
    for k in 0..spec.frequencies(kind) {
        let scaled = g.scale(x, (1u64 << k) as f64 * PI);
        parts.push(g.sin(scaled));
        parts.push(g.cos(scaled));
    }
    g.concat_cols(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_layout() {
        let spec = EncodingSpec::default();
        let e = positional_encode(&[0.0, 0.0, 0.0], &spec, EncodingKind::Position);
        assert_eq!(e.len(), 39);
        assert!(e[..3].iter().all(|v| *v == 0.0));
        for k in 0..6 {
            let base = 3 + 6 * k;
            assert!(e[base..base + 3].iter().all(|v| *v == 0.0));
            assert!(e[base + 3..base + 6].iter().all(|v| *v == 1.0));
        }
    }

    #[test]
    fn default_dimensions() {
        let spec = EncodingSpec::default();
        assert_eq!(spec.encoded_dim(3, EncodingKind::Position), 39);
        assert_eq!(spec.encoded_dim(3, EncodingKind::Direction), 27);
        let d = positional_encode(&[0.0, 0.6, 0.8], &spec, EncodingKind::Direction);
        assert_eq!(d.len(), 27);
    }

    #[test]
    fn parity() {
        let spec = EncodingSpec::default();
        let p = [0.123, -0.77, 0.5001];
        let m = [-0.123, 0.77, -0.5001];
        let a = positional_encode(&p, &spec, EncodingKind::Position);
        let b = positional_encode(&m, &spec, EncodingKind::Position);
        for k in 0..6 {
            let base = 3 + 6 * k;
            for j in 0..3 {
                assert_eq!(a[base + j], -b[base + j]);
                assert_eq!(a[base + 3 + j], b[base + 3 + j]);
            }
        }
    }

    #[test]
    fn doubling_matches_direct_evaluation() {
        let spec = EncodingSpec::default();
        let p = [0.31, -0.92, 0.07];
        let e = positional_encode(&p, &spec, EncodingKind::Position);
        for k in 0..6 {
            let f = (1u64 << k) as f64 * PI;
            for j in 0..3 {
                assert!((e[3 + 6 * k + j] - (f * p[j]).sin()).abs() < 1e-12);
                assert!((e[3 + 6 * k + 3 + j] - (f * p[j]).cos()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn node_encoding_matches_rows() {
        let spec = EncodingSpec::default();
        let pts = Tensor::new(2, 3, vec![0.1, 0.2, -0.3, 0.9, -0.5, 0.0]);
        let rows = encode_rows(&pts, &spec, EncodingKind::Position);
        let mut g = Graph::new();
        let x = g.constant(pts);
        let e = encode_node(&mut g, x, &spec, EncodingKind::Position).unwrap();
        for (a, b) in rows.data().iter().zip(g.value(e).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::gradcheck::{check_inputs, check_params};
use crate::diffcore::AdamConfig;
use crate::diffcore::AdamState;

pub(crate) fn tiny_config() -> FieldConfig {
    FieldConfig {
        geometry_layers: 3,
        geometry_width: 16,
        geometry_feature_dim: 8,
        feature_layers: 1,
        feature_width: 8,
        feature_dim: 4,
        radiance_layers: 2,
        radiance_width: 8,
        ..FieldConfig::default()
    }
}

fn random_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ]
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = random_point(rng);
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return v.map(|c| c / n);
        }
    }
}

#[test]
fn parameter_names_and_layer_counts() {
    let f = FieldSet::new(FieldConfig::default(), 0).unwrap();
    assert_eq!(f.geometry.hidden_layers(), 8);
    assert_eq!(f.feature.hidden_layers(), 2);
    assert_eq!(f.radiance.hidden_layers(), 4);
    assert_eq!(f.geometry.in_dim(), 39);
    assert_eq!(f.geometry.out_dim(), 257);
    assert_eq!(f.feature.out_dim(), 64);
    assert_eq!(f.radiance.in_dim(), 39 + 27 + 256);
    for id in f.params.ids() {
        let name = f.params.name(id);
        assert!(
            name == "density_scale" || ["fg.", "ff.", "fc."].iter().any(|p| name.starts_with(p)),
            "{name}"
        );
    }
    assert!(f.params.find("fg.0.weight").is_some());
    assert!(f.params.find("fc.4.bias").is_some());
}

#[test]
fn initial_density_std() {
    let f = FieldSet::new(tiny_config(), 1).unwrap();
    let std = PI / (3f64.sqrt() * f.density_scale());
    assert!((std - 0.3).abs() < 1e-12);
}

#[test]
fn geometry_is_deterministic() {
    let f = FieldSet::new(tiny_config(), 3).unwrap();
    let a = f.eval_geometry([0.1, -0.2, 0.3]).unwrap();
    let b = f.eval_geometry([0.1, -0.2, 0.3]).unwrap();
    assert_eq!(a, b);
    let g = FieldSet::new(tiny_config(), 3).unwrap();
    assert!(f.params.bit_identical(&g.params));
}

#[test]
fn geometric_init_approximates_sphere() {
    let f = FieldSet::new(FieldConfig::default(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pts: Vec<f64> = (0..1000).flat_map(|_| random_point(&mut rng)).collect();
    let pts = Tensor::new(1000, 3, pts);
    let sdf = f.query_sdf(&pts).unwrap();
    let mut worst: f64 = 0.0;
    for (r, s) in sdf.iter().enumerate() {
        let p = pts.row_slice(r);
        let exact = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.5;
        worst = worst.max((s - exact).abs());
    }
    assert!(worst < 0.1, "worst deviation {worst}");
}

#[test]
fn strict_mode_rejects_points_outside_cube() {
    let mut cfg = tiny_config();
    cfg.bounds = BoundsMode::Strict;
    let f = FieldSet::new(cfg.clone(), 0).unwrap();
    assert!(f.eval_geometry([1.5, 0.0, 0.0]).is_err());
    cfg.bounds = BoundsMode::Clamp;
    let f = FieldSet::new(cfg, 0).unwrap();
    let clamped = f.eval_geometry([1.5, 0.0, 0.0]).unwrap();
    assert_eq!(clamped, f.eval_geometry([1.0, 0.0, 0.0]).unwrap());
}

#[test]
fn sdf_gradient_in_x_matches_finite_differences() {
    let f = FieldSet::new(tiny_config(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pts: Vec<f64> = (0..40).flat_map(|_| random_point(&mut rng)).collect();
    let report = check_inputs(&[Tensor::new(40, 3, pts)], 100, &mut rng, |g, x| {
        let geo = f.geometry_at(g, x[0])?;
        let w = g.constant(Tensor::from_fn(40, 1, |r, _| 1.0 + 0.1 * r as f64));
        let y = g.mul(geo.sdf, w)?;
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn fd_sdf_gradient_tracks_autodiff() {
    let f = FieldSet::new(tiny_config(), 8).unwrap();
    let pts = Tensor::new(2, 3, vec![0.2, 0.1, -0.4, -0.6, 0.3, 0.05]);
    let mut g = Graph::new();
    let fd = f.sdf_gradient_fd(&mut g, &pts, 1e-4).unwrap();
    let fd = g.value(fd).clone();
    let mut g = Graph::new();
    let x = g.input(pts);
    let geo = f.geometry_at(&mut g, x).unwrap();
    let s = g.sum(geo.sdf);
    g.backward(s).unwrap();
    let exact = g.grad(x);
    for (a, b) in fd.data().iter().zip(exact.data()) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn feature_is_view_independent_and_shaped() {
    let f = FieldSet::new(tiny_config(), 2).unwrap();
    let (_, g1) = f.eval_geometry([0.3, 0.3, 0.3]).unwrap();
    let a = f.eval_feature(&g1).unwrap();
    let _ = f.eval_radiance([0.3, 0.3, 0.3], [1.0, 0.0, 0.0], &g1).unwrap();
    let (_, g2) = f.eval_geometry([0.3, 0.3, 0.3]).unwrap();
    let _ = f.eval_radiance([0.3, 0.3, 0.3], [0.0, 0.0, 1.0], &g2).unwrap();
    let b = f.eval_feature(&g2).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 4);
    assert!(f.eval_feature(&[0.0; 3]).is_err());
}

#[test]
fn zero_weight_feature_net_returns_bias() {
    let mut f = FieldSet::new(tiny_config(), 2).unwrap();
    for layer in f.feature.layers.clone() {
        let shape = f.params.value(layer.weight).shape();
        f.params.set(layer.weight, Tensor::zeros(shape.rows, shape.cols));
    }
    let last = f.feature.layers.last().unwrap().bias;
    f.params.set(last, Tensor::row(&[0.5, -1.0, 2.0, 0.25]));
    for x in [[0.1, 0.2, 0.3], [-0.9, 0.0, 0.4]] {
        let (_, g) = f.eval_geometry(x).unwrap();
        assert_eq!(f.eval_feature(&g).unwrap(), vec![0.5, -1.0, 2.0, 0.25]);
    }
}

#[test]
fn radiance_in_unit_cube_and_view_dependent() {
    let f = FieldSet::new(tiny_config(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 10_000;
    let xs: Vec<f64> = (0..n).flat_map(|_| random_point(&mut rng)).collect();
    let vs: Vec<f64> = (0..n).flat_map(|_| random_unit(&mut rng)).collect();
    let enc = f.config.encoding;
    let mut g = Graph::new();
    let ex = g.constant(encode_rows(&Tensor::new(n, 3, xs), &enc, EncodingKind::Position));
    let ev = g.constant(encode_rows(&Tensor::new(n, 3, vs), &enc, EncodingKind::Direction));
    let geo = f.geometry_nodes(&mut g, ex).unwrap();
    let c = f.radiance_nodes(&mut g, ex, ev, geo.feature).unwrap();
    assert!(g.value(c).data().iter().all(|v| (0.0..=1.0).contains(v)));

    let (_, gf) = f.eval_geometry([0.2, 0.0, 0.1]).unwrap();
    let a = f.eval_radiance([0.2, 0.0, 0.1], [1.0, 0.0, 0.0], &gf).unwrap();
    let b = f.eval_radiance([0.2, 0.0, 0.1], [0.0, -1.0, 0.0], &gf).unwrap();
    assert_ne!(a, b);
    assert!(f.eval_radiance([0.2, 0.0, 0.1], [1.0, 1.0, 0.0], &gf).is_err());
}

fn check_field_params(select: &[&str], head: impl Fn(&FieldSet, &mut Graph) -> Result<NodeId> + Sync) {
    let f = FieldSet::new(tiny_config(), 21).unwrap();
    let ids: Vec<ParamId> = f
        .params
        .ids()
        .filter(|id| select.iter().any(|p| f.params.name(*id).starts_with(p)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let report = check_params(&f.params, &ids, 100, &mut rng, |g, store| {
        let mut local = f.clone();
        local.params = store.clone();
        head(&local, g)
    })
    .unwrap();
    assert_eq!(report.probes, 100);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

fn probe_inputs(n: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n).flat_map(|_| random_point(&mut rng)).collect();
    let vs: Vec<f64> = (0..n).flat_map(|_| random_unit(&mut rng)).collect();
    (Tensor::new(n, 3, xs), Tensor::new(n, 3, vs))
}

#[test]
fn geometry_parameter_gradients() {
    let (xs, _) = probe_inputs(12, 1);
    check_field_params(&["fg."], |f, g| {
        let x = g.constant(xs.clone());
        let geo = f.geometry_at(g, x)?;
        let s = g.square(geo.sdf);
        let t = g.sum(s);
        let u = g.sum(geo.feature);
        g.add(t, u)
    });
}

#[test]
fn feature_parameter_gradients() {
    let (xs, _) = probe_inputs(12, 2);
    check_field_params(&["ff."], |f, g| {
        let x = g.constant(xs.clone());
        let geo = f.geometry_at(g, x)?;
        let feat = f.feature_nodes(g, geo.feature)?;
        let sq = g.square(feat);
        Ok(g.sum(sq))
    });
}

#[test]
fn radiance_parameter_gradients() {
    let (xs, vs) = probe_inputs(12, 3);
    check_field_params(&["fc.", "fg."], |f, g| {
        let enc = f.config.encoding;
        let ex = g.constant(encode_rows(&xs, &enc, EncodingKind::Position));
        let ev = g.constant(encode_rows(&vs, &enc, EncodingKind::Direction));
        let geo = f.geometry_nodes(g, ex)?;
        let c = f.radiance_nodes(g, ex, ev, geo.feature)?;
        let sq = g.square(c);
        Ok(g.sum(sq))
    });
}

#[test]
fn density_scale_stays_positive() {
    let mut f = FieldSet::new(tiny_config(), 0).unwrap();
    let mut adam = AdamState::new(AdamConfig {
        lr: 10.0,
        ..AdamConfig::default()
    });
    for _ in 0..20 {
        let mut g = Graph::new();
        let s = f.density_scale_node(&mut g);
        g.backward(s).unwrap();
        adam.step_graph(&mut f.params, &g).unwrap();
        assert!(f.density_scale() > 0.0);
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::gradcheck::check_params;
use crate::diffcore::ParamId;
use crate::fields::FieldConfig;

fn tiny_fields(seed: u64) -> FieldSet {
    FieldSet::new(
        FieldConfig {
            geometry_layers: 2,
            geometry_width: 16,
            geometry_feature_dim: 8,
            feature_layers: 1,
            feature_width: 8,
            feature_dim: 4,
            radiance_layers: 1,
            radiance_width: 8,
            ..FieldConfig::default()
        },
        seed,
    )
    .unwrap()
}

fn ray_through_origin(dir: Vec3) -> Ray {
    let v = normalize(dir);
    let o = [-1.9 * v[0], -1.9 * v[1], -1.9 * v[2]];
    let (t_near, t_far) = intersect_cube(o, v, 1.0).unwrap();
    Ray { o, v, t_near, t_far }
}

fn uniform(n: usize) -> RenderSettings {
    RenderSettings {
        samples_per_ray: n,
        mode: SampleMode::Uniform,
        ..RenderSettings::default()
    }
}

#[test]
fn constant_sdf_renders_background() {
    let mut f = tiny_fields(1);
    let head = f.geometry.layers.last().unwrap().clone();
    let w = f.params.value(head.weight).clone();
    f.params.set(head.weight, Tensor::zeros(w.rows(), w.cols()));
    let mut b = f.params.value(head.bias).clone();
    b.set(0, 0, 0.7);
    f.params.set(head.bias, b);
    let r = render_ray(&f, &ray_through_origin([0.2, 1.0, 0.1]), &uniform(32), 0).unwrap();
    assert_eq!(r.color, [0.5; 3]);
    assert_eq!(r.weights.iter().sum::<f64>(), 0.0);
    assert!(r.transmittance.iter().all(|t| *t == 1.0));
}

#[test]
fn constant_feature_scales_with_opacity() {
    let mut f = tiny_fields(2);
    for layer in f.feature.layers.clone() {
        let s = f.params.value(layer.weight).shape();
        f.params.set(layer.weight, Tensor::zeros(s.rows, s.cols));
    }
    let u = [0.25, -1.5, 3.0, 0.5];
    f.params.set(f.feature.layers.last().unwrap().bias, Tensor::row(&u));
    let r = render_ray(&f, &ray_through_origin([0.0, 1.0, 0.3]), &uniform(48), 0).unwrap();
    let acc: f64 = r.weights.iter().sum();
    assert!(acc > 0.5);
    for (a, b) in r.feature.iter().zip(u) {
        assert!((a - acc * b).abs() < 1e-12);
    }
}

#[test]
fn degenerate_ray_gives_background() {
    let f = tiny_fields(3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = render_rays(&f, &[None], &uniform(8), &mut rng).unwrap();
    assert_eq!(out[0].color, [0.5; 3]);
    assert_eq!(out[0].feature, vec![0.0; 4]);
}

#[test]
fn weights_are_normalized_on_random_fields() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..4 {
        let f = tiny_fields(seed);
        let rays: Vec<Option<Ray>> = (0..200)
            .map(|_| Some(ray_through_origin([rng.random_range(-1.0..1.0), 1.0, rng.random_range(-1.0..1.0)])))
            .collect();
        let settings = RenderSettings {
            samples_per_ray: 24,
            ..RenderSettings::default()
        };
        for r in render_rays(&f, &rays, &settings, &mut rng).unwrap() {
            assert!(r.weights.iter().all(|w| *w >= 0.0));
            assert!(r.weights.iter().sum::<f64>() <= 1.0 + 1e-6);
            assert!(r.transmittance.windows(2).all(|t| t[1] <= t[0]));
            assert_eq!(r.transmittance[0], 1.0);
            assert!(r.color.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }
}

#[test]
fn pruning_does_not_change_the_render() {
    let f = FieldSet::new(FieldConfig::default(), 0).unwrap();
    let rays: Vec<Option<Ray>> = [[0.1, 1.0, 0.0], [0.9, 1.0, 0.9], [0.0, 1.0, -0.4]]
        .into_iter()
        .map(|d| Some(ray_through_origin(d)))
        .collect();
    let full = uniform(32);
    let pruned = RenderSettings {
        prune_below: 0.0,
        ..full.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = render_rays(&f, &rays, &full, &mut rng).unwrap();
    let b = render_rays(&f, &rays, &pruned, &mut rng).unwrap();
    for (x, y) in a.iter().zip(&b) {
        for k in 0..3 {
            assert!((x.color[k] - y.color[k]).abs() < 1e-12);
        }
        for (p, q) in x.feature.iter().zip(&y.feature) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn sphere_init_depth_matches_surface() {
    let f = FieldSet::new(FieldConfig::default(), 5).unwrap();
    let ray = ray_through_origin([0.0, 1.0, 0.0]);
    let settings = uniform(128);
    let r = render_ray(&f, &ray, &settings, 0).unwrap();
    let peak = r
        .weights
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    let spacing = (ray.t_far - ray.t_near) / 128.0;
    let t_peak = ray.t_near + (peak as f64 + 0.5) * spacing;
    // the initialized sphere has radius 0.5 about the origin
    assert!((t_peak - 1.4).abs() < 0.05 + spacing, "{t_peak}");
}

#[test]
fn composed_render_parameter_gradients() {
    let f = tiny_fields(9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let rays: Vec<Ray> = (0..3)
        .map(|_| ray_through_origin([rng.random_range(-0.5..0.5), 1.0, rng.random_range(-0.5..0.5)]))
        .collect();
    let settings = uniform(12);
    let samples: Vec<RaySamples> = rays
        .iter()
        .map(|r| sample_ray(r, 12, SampleMode::Uniform, &mut rng).unwrap())
        .collect();
    let ids: Vec<ParamId> = f.params.ids().collect();
    let report = check_params(&f.params, &ids, 100, &mut rng, |g, store| {
        let mut local = f.clone();
        local.params = store.clone();
        let nodes = render_graph(g, &local, &rays, &samples, &settings)?;
        let c = g.square(nodes.color);
        let c = g.sum(c);
        let fe = g.square(nodes.feature.unwrap());
        let fe = g.sum(fe);
        g.add(c, fe)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

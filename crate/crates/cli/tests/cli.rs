use std::path::Path;
use std::process::{Command, Output};

fn neffbio(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neffbio"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "exit {:?}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

const TINY_FIELDS: &[&str] = &[
    "--fields.geometry_layers=2",
    "--fields.geometry_width=16",
    "--fields.geometry_feature_dim=8",
    "--fields.feature_width=8",
    "--fields.radiance_layers=1",
    "--fields.radiance_width=8",
    "--neff.iterations=2",
    "--neff.rays_per_step=32",
    "--neff.samples_per_ray=8",
    "--neff.sparse_subset=16",
    "--neff.eikonal_points=8",
];

const TINY_BIONET: &[&str] = &[
    "--bionet.model.voxel.dims=[8,8,8]",
    "--bionet.model.base_channels=2",
    "--bionet.model.d_model=8",
    "--bionet.model.heads=2",
    "--bionet.model.ffn_dim=8",
    "--bionet.model.encoder_layers=1",
    "--bionet.model.head_hidden=[8]",
    "--bionet.model.dropout=0",
    "--bionet.iterations=2",
    "--bionet.batch_size=2",
];

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&neffbio(&[])), 2);
    assert_eq!(code(&neffbio(&["frobnicate"])), 2);
}

#[test]
fn config_errors_exit_2() {
    let o = neffbio(&["train-neff", "--neff.nope=1"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let o = neffbio(&["train-neff", "--neff.rays_per_step=0"]);
    assert_eq!(code(&o), 2);
    // No scene configured.
    assert_eq!(code(&neffbio(&["train-neff"])), 2);
}

#[test]
fn missing_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = s(&dir.path().join("nope"));
    assert_eq!(code(&neffbio(&["train-neff", &format!("--scene={missing}")])), 3);
    assert_eq!(
        code(&neffbio(&["predict", "--run", &missing, "--cloud", &missing])),
        3
    );
}

#[test]
fn end_to_end_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let scene = s(&d.join("scene"));
    let run = s(&d.join("run"));
    ok(neffbio(&[
        "synth", "--out", &scene, "--views", "4", "--resolution", "16", "--feature-dim", "4", "--holdout", "2",
    ]));
    assert!(d.join("scene/holdout").is_dir());

    let mut args = vec!["--deterministic".to_string(), "train-neff".into()];
    args.push(format!("--scene={scene}"));
    args.push(format!("--output={run}"));
    args.extend(TINY_FIELDS.iter().map(|a| a.to_string()));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(neffbio(&args));
    for f in ["neff.nfbk", "fields.json", "neff_log.csv", "config.json"] {
        assert!(d.join("run").join(f).is_file(), "{f}");
    }

    let renders = s(&d.join("renders"));
    ok(neffbio(&["render", "--run", &run, "--scene", &scene, "--out", &renders, "--samples", "8"]));
    for f in ["view_000_color.png", "view_000_feature.png", "view_003_depth.png"] {
        assert!(d.join("renders").join(f).is_file(), "{f}");
    }

    let holdout = s(&d.join("scene/holdout"));
    let ev = s(&d.join("eval_img"));
    ok(neffbio(&["eval", "--run", &run, "--scene", &holdout, "--out", &ev, "--samples", "8"]));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("eval_img/metrics.json")).unwrap()).unwrap();
    assert!(m["mean_psnr"].as_f64().unwrap().is_finite());

    let cloud_a = s(&d.join("a.ply"));
    let cloud_b = s(&d.join("b.ply"));
    ok(neffbio(&["extract-surface", "--run", &run, "--out", &cloud_a, "--grid-res", "16", "--tau", "0.1"]));
    ok(neffbio(&["extract-surface", "--run", &run, "--out", &cloud_b, "--grid-res", "20", "--tau", "0.1"]));

    let manifest = serde_json::json!({ "plots": [
        { "id": "a", "cloud": "a.ply", "biomass_grams": 120.0 },
        { "id": "b", "cloud": "b.ply", "biomass_grams": 200.0 },
    ]});
    let plots = d.join("plots.json");
    std::fs::write(&plots, manifest.to_string()).unwrap();
    let bio = s(&d.join("bio"));
    let mut args = vec!["--deterministic".to_string(), "train-bionet".into(), "--plots".into(), s(&plots)];
    args.push(format!("--output={bio}"));
    args.extend(TINY_BIONET.iter().map(|a| a.to_string()));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(neffbio(&args));

    let preds = s(&d.join("preds.json"));
    ok(neffbio(&["predict", "--run", &bio, "--cloud", &cloud_a, &cloud_b, "--out", &preds]));
    let p: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&preds).unwrap()).unwrap();
    assert_eq!(p.as_array().unwrap().len(), 2);
    assert!(p[0]["biomass_grams"].as_f64().unwrap() > 0.0);

    let report = s(&d.join("report.json"));
    ok(neffbio(&["eval", "--pred", &preds, "--labels", &s(&plots), "--out", &report]));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["mae"].as_f64().unwrap() >= 0.0);
}

#[test]
fn extract_plots_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let scene = s(&d.join("scene"));
    ok(neffbio(&["synth", "--out", &scene, "--views", "6", "--resolution", "8", "--feature-dim", "3"]));
    let plots = serde_json::json!({ "plots": [
        { "id": "row1", "endpoints": [[-0.5, 0.0, 0.0], [0.5, 0.0, 0.0]], "along_threshold": 3.0, "lateral_threshold": 5.0 },
    ]});
    let pf = d.join("plots.json");
    std::fs::write(&pf, plots.to_string()).unwrap();
    let out = s(&d.join("plots_out"));
    ok(neffbio(&["extract-plots", "--scene", &scene, "--plots", &s(&pf), "--out", &out]));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("plots_out/plots_extracted.json")).unwrap()).unwrap();
    assert_eq!(summary[0]["id"], "row1");
    assert!(d.join("plots_out/row1_points.ply").is_file());
}

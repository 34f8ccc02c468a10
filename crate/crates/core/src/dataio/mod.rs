//! Scene bundles on disk, the analytic synthetic scene, plot selection and
//! point-cloud files.

mod bundle;
mod plots;
mod ply;
mod synth;

pub use bundle::{read_points, FeatureMap, Rgb8Image, SceneBundle, Similarity, FEATURE_MAGIC};
pub use plots::{
    crop_plot_points, extract_plot_views, load_plots, save_plots, select_positions, PlotRecord, PlotSpec,
};
pub use ply::{read_ply, write_ply};
pub use synth::{synth_scene, AnalyticScene, Primitive, Shape, SynthSpec};

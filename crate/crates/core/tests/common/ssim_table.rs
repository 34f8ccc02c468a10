// Generated by tests/data/ssim_reference.py (scikit-image structural_similarity).
// (pair index, width, height, reference SSIM)
pub const SSIM_REFERENCE: [(u64, usize, usize, f64); 20] = [
    (0, 16, 14, 0.9581925869580554),
    (1, 23, 19, 0.9325868108522865),
    (2, 30, 24, 0.9175676631315045),
    (3, 20, 16, 0.8768935071123808),
    (4, 27, 21, 0.8722053348528164),
    (5, 17, 26, 0.8363932094508906),
    (6, 24, 18, 0.8093098944717657),
    (7, 31, 23, 0.7703589449144773),
    (8, 21, 15, 0.7263662237151393),
    (9, 28, 20, 0.7014115227587577),
    (10, 18, 25, 0.6550783021733378),
    (11, 25, 17, 0.647232612393475),
    (12, 32, 22, 0.5482232092100121),
    (13, 22, 14, 0.5114617919567633),
    (14, 29, 19, 0.46769900533592607),
    (15, 19, 24, 0.4778244023764588),
    (16, 26, 16, 0.48967343454701745),
    (17, 16, 21, 0.3277483808110464),
    (18, 23, 26, 0.3238563138415009),
    (19, 30, 18, 0.2660741889780927),
];

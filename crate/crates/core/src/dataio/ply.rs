use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// ASCII PLY with `x y z` and one property per feature channel.
pub fn write_ply(path: &Path, points: &[[f64; 3]], features: &[f64], feature_dim: usize) -> Result<()> {
    if features.len() != points.len() * feature_dim {
        return Err(Error::invalid(format!(
            "{} feature values for {} points of dimension {feature_dim}",
            features.len(),
            points.len()
        )));
    }
    let mut s = String::with_capacity(64 + points.len() * (3 + feature_dim) * 12);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", points.len());
    for name in ["x", "y", "z"] {
        let _ = writeln!(s, "property double {name}");
    }
    for k in 0..feature_dim {
        let _ = writeln!(s, "property double f{k}");
    }
    s.push_str("end_header\n");
    for (i, p) in points.iter().enumerate() {
        let _ = write!(s, "{} {} {}", p[0], p[1], p[2]);
        for v in &features[i * feature_dim..(i + 1) * feature_dim] {
            let _ = write!(s, " {v}");
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Points, flattened features and feature dimension.
pub fn read_ply(path: &Path) -> Result<(Vec<[f64; 3]>, Vec<f64>, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::data(path, "not a PLY file"));
    }
    let mut count = None;
    let mut props = Vec::new();
    for line in lines.by_ref() {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => {
                return Err(Error::data(path, format!("unsupported PLY format {fmt}")));
            }
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|e| Error::data(path, e.to_string()))?);
            }
            ["property", _, name] => props.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let n = count.ok_or_else(|| Error::data(path, "missing vertex count"))?;
    if props.len() < 3 || props[..3] != ["x", "y", "z"] {
        return Err(Error::data(path, "first vertex properties must be x y z"));
    }
    let dim = props.len() - 3;
    let mut points = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * dim);
    for i in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| Error::data(path, format!("expected {n} vertices, found {i}")))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::data(path, format!("vertex {i}: {e}")))?;
        if vals.len() != props.len() {
            return Err(Error::data(path, format!("vertex {i}: {} values, expected {}", vals.len(), props.len())));
        }
        points.push([vals[0], vals[1], vals[2]]);
        features.extend_from_slice(&vals[3..]);
    }
    Ok((points, features, dim))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ply");
        let pts = vec![[0.1, -2.0, 1.0 / 3.0], [5.0, 6.5, -7.25]];
        let feats = vec![1.0, 2.0, 0.1 + 0.2, -4.0];
        write_ply(&p, &pts, &feats, 2).unwrap();
        assert_eq!(read_ply(&p).unwrap(), (pts, feats, 2));
    }
}

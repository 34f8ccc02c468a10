use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::plots::PlotRecord;
use crate::error::{Error, Result};
use crate::render::Camera;

pub const FEATURE_MAGIC: &[u8; 4] = b"NFFT";

/// 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb8Image {
    pub fn from_unit(width: usize, height: usize, rgb: &[f64]) -> Self {
        assert_eq!(rgb.len(), width * height * 3);
        let data = rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Rgb8Image { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [0, 1, 2].map(|k| self.data[i + k] as f64 / 255.0)
    }

    pub fn to_unit(&self) -> Vec<f64> {
        self.data.iter().map(|v| *v as f64 / 255.0).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::data(path, e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::data(path, e.to_string()))?.to_rgb8();
        Ok(Rgb8Image {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.into_raw(),
        })
    }
}

/// `h×w×c` map of `f32` values (features, or depth with `c = 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn at(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Bilinear sample at image coordinates `(u, v)` of an image that is
    /// `image_w × image_h`; the map may have a lower resolution.
    pub fn sample_bilinear(&self, u: f64, v: f64, image_w: usize, image_h: usize, out: &mut Vec<f64>) {
        let fx = (u * self.width as f64 / image_w as f64 - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (v * self.height as f64 / image_h as f64 - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
        let corners = [
            (x0, y0, (1.0 - ax) * (1.0 - ay)),
            (x1, y0, ax * (1.0 - ay)),
            (x0, y1, (1.0 - ax) * ay),
            (x1, y1, ax * ay),
        ];
        let start = out.len();
        out.resize(start + self.channels, 0.0);
        for (x, y, w) in corners {
            if w == 0.0 {
                continue;
            }
            for (o, v) in out[start..].iter_mut().zip(self.at(x, y)) {
                *o += w * *v as f64;
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(FEATURE_MAGIC);
        for d in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
            return Err(Error::data(origin, "missing NFFT header"));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (height, width, channels) = (dim(0), dim(1), dim(2));
        let expected = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .and_then(|v| v.checked_mul(4));
        if expected != Some(bytes.len() - 16) || height == 0 || width == 0 || channels == 0 {
            return Err(Error::data(
                origin,
                format!(
                    "header (h={height}, w={width}, c={channels}) disagrees with payload of {} bytes",
                    bytes.len() - 16
                ),
            ));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(FeatureMap {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

/// `x_scene = scale · x_world + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scale: f64,
    pub translation: [f64; 3],
}

impl Default for Similarity {
    fn default() -> Self {
        Similarity {
            scale: 1.0,
            translation: [0.0; 3],
        }
    }
}

impl Similarity {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|k| self.scale * p[k] + self.translation[k])
    }

    pub fn invert(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|k| (p[k] - self.translation[k]) / self.scale)
    }
}

#[derive(Serialize, Deserialize)]
struct CamerasFile {
    cameras: Vec<Camera>,
    #[serde(default)]
    norm_transform: Similarity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub cameras: Vec<Camera>,
    pub images: Vec<Rgb8Image>,
    pub feature_maps: Vec<FeatureMap>,
    /// Sparse surface points in scene units.
    pub sparse_points: Vec<[f64; 3]>,
    pub norm_transform: Similarity,
    pub gt_depths: Option<Vec<FeatureMap>>,
    pub plots: Option<Vec<PlotRecord>>,
}

impl SceneBundle {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::invalid("scene bundle has no cameras"));
        }
        if self.images.len() != self.cameras.len() || self.feature_maps.len() != self.images.len() {
            return Err(Error::invalid(format!(
                "{} cameras, {} images and {} feature maps; counts must agree",
                self.cameras.len(),
                self.images.len(),
                self.feature_maps.len()
            )));
        }
        let c = self.feature_maps[0].channels;
        for ((cam, img), fm) in self.cameras.iter().zip(&self.images).zip(&self.feature_maps) {
            cam.validate()?;
            if img.width != cam.width as usize || img.height != cam.height as usize {
                return Err(Error::invalid(format!(
                    "image {} is {}x{} but its camera says {}x{}",
                    cam.name, img.width, img.height, cam.width, cam.height
                )));
            }
            if fm.channels != c {
                return Err(Error::invalid(format!("feature map {} has {} channels, expected {c}", cam.name, fm.channels)));
            }
        }
        if let Some(d) = &self.gt_depths {
            if d.len() != self.cameras.len() || d.iter().any(|m| m.channels != 1) {
                return Err(Error::invalid("depth maps must be one single-channel map per camera"));
            }
        }
        if self.sparse_points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite sparse point"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_maps.first().map(|f| f.channels).unwrap_or(0)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        for sub in ["images", "features"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let cams = CamerasFile {
            cameras: self.cameras.clone(),
            norm_transform: self.norm_transform,
        };
        let p = dir.join("cameras.json");
        let json = serde_json::to_string_pretty(&cams).map_err(|e| Error::data(&p, e.to_string()))?;
        fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
        for ((cam, img), fm) in self.cameras.iter().zip(&self.images).zip(&self.feature_maps) {
            img.save_png(&dir.join("images").join(format!("{}.png", cam.name)))?;
            fm.save(&dir.join("features").join(format!("{}.bin", cam.name)))?;
        }
        if let Some(depths) = &self.gt_depths {
            let p = dir.join("depth");
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            for (cam, d) in self.cameras.iter().zip(depths) {
                d.save(&p.join(format!("{}.bin", cam.name)))?;
            }
        }
        let mut text = String::with_capacity(self.sparse_points.len() * 48);
        for q in &self.sparse_points {
            text.push_str(&format!("{} {} {}\n", q[0], q[1], q[2]));
        }
        let p = dir.join("sparse_points.txt");
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        if let Some(plots) = &self.plots {
            super::plots::save_plots(&dir.join("plots.json"), plots)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("cameras.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let cams: CamerasFile = serde_json::from_str(&text).map_err(|e| Error::data(&p, e.to_string()))?;
        let mut images = Vec::with_capacity(cams.cameras.len());
        let mut feature_maps = Vec::with_capacity(cams.cameras.len());
        for cam in &cams.cameras {
            cam.validate().map_err(|e| Error::data(&p, e.to_string()))?;
            images.push(Rgb8Image::load_png(&dir.join("images").join(format!("{}.png", cam.name)))?);
            feature_maps.push(FeatureMap::load(&dir.join("features").join(format!("{}.bin", cam.name)))?);
        }
        let depth_dir = dir.join("depth");
        let gt_depths = if depth_dir.is_dir() {
            Some(
                cams.cameras
                    .iter()
                    .map(|c| FeatureMap::load(&depth_dir.join(format!("{}.bin", c.name))))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let p = dir.join("sparse_points.txt");
        let sparse_points = read_points(&p)?;
        let pp = dir.join("plots.json");
        let plots = if pp.exists() {
            Some(super::plots::load_plots(&pp)?)
        } else {
            None
        };
        let bundle = SceneBundle {
            cameras: cams.cameras,
            images,
            feature_maps,
            sparse_points,
            norm_transform: cams.norm_transform,
            gt_depths,
            plots,
        };
        bundle.validate().map_err(|e| Error::data(dir, e.to_string()))?;
        Ok(bundle)
    }
}

/// Whitespace-separated `x y z` per line; blank lines and `#` comments skipped.
pub fn read_points(path: &Path) -> Result<Vec<[f64; 3]>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::data(path, format!("line {}: {e}", i + 1)))?;
        if vals.len() != 3 {
            return Err(Error::data(path, format!("line {}: expected 3 values, got {}", i + 1, vals.len())));
        }
        out.push([vals[0], vals[1], vals[2]]);
    }
    Ok(out)
}

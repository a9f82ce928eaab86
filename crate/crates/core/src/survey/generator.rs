//! Synthetic geo-tagged surveys.
//!
//! A habitat map is a Voronoi tessellation of Poisson-distributed seeds, each
//! seed carrying a class. A lawnmower track samples positions at a fixed
//! interval, and every patch image is drawn from its class's texture model:
//! base colour, band-limited oriented noise at a class frequency, speckles at a
//! class density, then per-image gain, colour cast and pixel noise.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{GeneratorEcho, GeoPatch, Image, ImageSource, SurveyManifest};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

const STREAM_MAP: u64 = 1;
const STREAM_IMAGE: u64 = 2;
const SINUSOIDS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassTexture {
    /// Mean colour per channel.
    pub base_colour: Vec<f64>,
    /// Dominant spatial frequency of the texture, cycles per pixel.
    pub frequency: f64,
    pub amplitude: f64,
    /// Expected speckles per pixel.
    pub speckle_density: f64,
    pub speckle_contrast: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationNoise {
    pub pixel_sigma: f64,
    /// Per-image multiplicative gain drawn from `1 ± gain_jitter`.
    pub gain_jitter: f64,
    /// Per-image, per-channel additive offset drawn from `± colour_cast`.
    pub colour_cast: f64,
}

impl Default for ObservationNoise {
    fn default() -> Self {
        Self {
            pixel_sigma: 0.03,
            gain_jitter: 0.2,
            colour_cast: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_patches: usize,
    pub n_classes: usize,
    /// Mean habitat cell diameter `L`, metres.
    pub habitat_scale_m: f64,
    pub patch_interval_m: f64,
    pub track_spacing_m: f64,
    /// Length of each survey line; defaults to a roughly square survey.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line_length_m: Option<f64>,
    pub image_size: usize,
    pub channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    /// Relative frequency of each class among Voronoi seeds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub textures: Option<Vec<ClassTexture>>,
    #[serde(default)]
    pub observation: ObservationNoise,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_patches: 2000,
            n_classes: 3,
            habitat_scale_m: 40.0,
            patch_interval_m: 2.0,
            track_spacing_m: 4.0,
            line_length_m: None,
            image_size: 32,
            channels: 3,
            class_names: None,
            class_weights: None,
            textures: None,
            observation: ObservationNoise::default(),
        }
    }
}

/// Texture parameters used when a config does not list its own.
pub fn default_textures(n_classes: usize, channels: usize) -> Vec<ClassTexture> {
    (0..n_classes)
        .map(|c| {
            let t = if n_classes > 1 {
                c as f64 / (n_classes - 1) as f64
            } else {
                0.0
            };
            let base_colour = (0..channels)
                .map(|ch| {
                    let phase = 2.0 * PI * (c as f64 / n_classes as f64 + ch as f64 / channels as f64);
                    0.45 + 0.03 * phase.cos()
                })
                .collect();
            ClassTexture {
                base_colour,
                frequency: 0.06 + 0.26 * t,
                amplitude: 0.15,
                speckle_density: if c % 2 == 0 { 0.004 } else { 0.03 },
                speckle_contrast: 0.3,
            }
        })
        .collect()
}

impl GeneratorConfig {
    /// Validates and fills every optional field with its concrete value.
    pub fn resolved(&self) -> Result<Self> {
        if self.n_patches == 0 {
            return Err(Error::Config("n_patches must be positive".into()));
        }
        if !(self.habitat_scale_m > 0.0) {
            return Err(Error::Config(format!(
                "habitat_scale_m must be positive, got {}",
                self.habitat_scale_m
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        for (name, v) in [
            ("patch_interval_m", self.patch_interval_m),
            ("track_spacing_m", self.track_spacing_m),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.image_size == 0 || self.channels == 0 {
            return Err(Error::Config("image_size and channels must be positive".into()));
        }
        let k = self.n_classes;
        let class_names = match &self.class_names {
            Some(n) if n.len() != k => return Err(Error::Config(format!("{} class names for {k} classes", n.len()))),
            Some(n) => n.clone(),
            None => (0..k).map(|c| format!("class_{c}")).collect(),
        };
        let class_weights = match &self.class_weights {
            Some(w) if w.len() != k || w.iter().any(|v| !(*v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 => {
                return Err(Error::Config(format!(
                    "class_weights must be {k} non-negative values with a positive sum"
                )))
            }
            Some(w) => w.clone(),
            None => vec![1.0; k],
        };
        let textures = match &self.textures {
            Some(t) if t.len() != k || t.iter().any(|t| t.base_colour.len() != self.channels) => {
                return Err(Error::Config(format!(
                    "textures must list {k} classes with {} base colour channels",
                    self.channels
                )))
            }
            Some(t) => t.clone(),
            None => default_textures(k, self.channels),
        };
        let line_length = self.line_length_m.unwrap_or_else(|| {
            (self.n_patches as f64 * self.patch_interval_m * self.track_spacing_m)
                .sqrt()
                .max(self.patch_interval_m)
        });
        if !(line_length > 0.0) {
            return Err(Error::Config("line_length_m must be positive".into()));
        }
        Ok(Self {
            line_length_m: Some(line_length),
            class_names: Some(class_names),
            class_weights: Some(class_weights),
            textures: Some(textures),
            ..self.clone()
        })
    }
}

/// Lawnmower track positions `(easting, northing)`.
fn track_positions(cfg: &GeneratorConfig) -> Vec<(f64, f64)> {
    let line_length = cfg.line_length_m.expect("resolved");
    let per_line = ((line_length / cfg.patch_interval_m).floor() as usize + 1).max(1);
    (0..cfg.n_patches)
        .map(|k| {
            let line = k / per_line;
            let along = k % per_line;
            let step = if line.is_multiple_of(2) {
                along
            } else {
                per_line - 1 - along
            };
            (step as f64 * cfg.patch_interval_m, line as f64 * cfg.track_spacing_m)
        })
        .collect()
}

/// Voronoi habitat map over Poisson seeds.
struct HabitatMap {
    seeds: Vec<(f64, f64, usize)>,
    bucket: f64,
    grid: HashMap<(i64, i64), Vec<usize>>,
    max_ring: i64,
}

impl HabitatMap {
    fn sample(cfg: &GeneratorConfig, positions: &[(f64, f64)], seed: u64) -> Result<Self> {
        let mut rng = keyed_rng(seed, &[STREAM_MAP]);
        let l = cfg.habitat_scale_m;
        let (mut e0, mut e1, mut n0, mut n1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(e, n) in positions {
            e0 = e0.min(e);
            e1 = e1.max(e);
            n0 = n0.min(n);
            n1 = n1.max(n);
        }
        // Margin of one cell diameter so edge patches see seeds on all sides.
        let margin = if l.is_finite() { l } else { 0.0 };
        let (e0, e1, n0, n1) = (e0 - margin, e1 + margin, n0 - margin, n1 + margin);
        let area = (e1 - e0).max(1e-9) * (n1 - n0).max(1e-9);
        let intensity = 4.0 / (PI * l * l);
        let mean = intensity * area;
        let count = if mean > 1e-9 && mean.is_finite() {
            let p = Poisson::new(mean).map_err(|e| Error::Config(format!("habitat seed count: {e}")))?;
            (p.sample(&mut rng) as usize).max(1)
        } else {
            1
        };
        let weights = WeightedIndex::new(cfg.class_weights.as_ref().expect("resolved"))
            .map_err(|e| Error::Config(format!("class_weights: {e}")))?;
        let seeds: Vec<(f64, f64, usize)> = (0..count)
            .map(|_| {
                let e = rng.random_range(e0..=e1);
                let n = rng.random_range(n0..=n1);
                (e, n, weights.sample(&mut rng))
            })
            .collect();
        let bucket = if l.is_finite() {
            l.max(1e-6)
        } else {
            (e1 - e0).max(n1 - n0).max(1.0)
        };
        let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, &(e, n, _)) in seeds.iter().enumerate() {
            grid.entry(((e / bucket).floor() as i64, (n / bucket).floor() as i64))
                .or_default()
                .push(i);
        }
        let max_ring = (((e1 - e0).max(n1 - n0)) / bucket).ceil() as i64 + 2;
        Ok(Self {
            seeds,
            bucket,
            grid,
            max_ring,
        })
    }

    fn class_at(&self, e: f64, n: f64) -> usize {
        let (cx, cy) = ((e / self.bucket).floor() as i64, (n / self.bucket).floor() as i64);
        let mut best = (f64::INFINITY, usize::MAX);
        for ring in 0..=self.max_ring {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    if dx.abs() != ring && dy.abs() != ring {
                        continue;
                    }
                    let Some(ids) = self.grid.get(&(cx + dx, cy + dy)) else {
                        continue;
                    };
                    for &i in ids {
                        let (se, sn, _) = self.seeds[i];
                        let d = (se - e).powi(2) + (sn - n).powi(2);
                        // Ties resolve to the lower seed index.
                        if d < best.0 || (d == best.0 && i < best.1) {
                            best = (d, i);
                        }
                    }
                }
            }
            if best.1 != usize::MAX && best.0.sqrt() <= ring as f64 * self.bucket {
                break;
            }
        }
        self.seeds[best.1].2
    }
}

/// Draws one patch image from a class texture.
pub fn render_patch<R: Rng>(texture: &ClassTexture, noise: &ObservationNoise, size: usize, rng: &mut R) -> Image {
    let channels = texture.base_colour.len();
    let waves: Vec<(f64, f64, f64)> = (0..SINUSOIDS)
        .map(|_| {
            let f = texture.frequency * rng.random_range(0.85..1.15);
            let theta = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            (2.0 * PI * f * theta.cos(), 2.0 * PI * f * theta.sin(), phase)
        })
        .collect();
    let norm = 1.0 / (SINUSOIDS as f64).sqrt();
    let mut field = vec![0.0f64; size * size];
    for y in 0..size {
        for x in 0..size {
            let v: f64 = waves
                .iter()
                .map(|&(kx, ky, ph)| (kx * x as f64 + ky * y as f64 + ph).cos())
                .sum();
            field[y * size + x] = texture.amplitude * norm * v;
        }
    }
    let expected = texture.speckle_density * (size * size) as f64;
    let speckles = if expected > 0.0 {
        Poisson::new(expected).map_or(0, |p| p.sample(rng) as usize)
    } else {
        0
    };
    for _ in 0..speckles {
        let cy = rng.random_range(0..size) as isize;
        let cx = rng.random_range(0..size) as isize;
        for (dy, dx, w) in [(0, 0, 1.0), (0, 1, 0.5), (1, 0, 0.5), (0, -1, 0.5), (-1, 0, 0.5)] {
            let (y, x) = (cy + dy, cx + dx);
            if y >= 0 && x >= 0 && (y as usize) < size && (x as usize) < size {
                field[y as usize * size + x as usize] += texture.speckle_contrast * w;
            }
        }
    }
    let gain = 1.0 + rng.random_range(-1.0..=1.0) * noise.gain_jitter;
    let cast: Vec<f64> = (0..channels)
        .map(|_| rng.random_range(-1.0..=1.0) * noise.colour_cast)
        .collect();
    let pixel = Normal::new(0.0, noise.pixel_sigma.max(0.0)).expect("finite sigma");
    let mut data = Vec::with_capacity(size * size * channels);
    for &f in &field {
        for (base, shift) in texture.base_colour.iter().zip(&cast) {
            let v = gain * (base + f) + shift + pixel.sample(rng);
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Image::new(size, size, channels, data).expect("consistent dimensions")
}

/// Generates a survey deterministically from `(cfg, seed)`.
pub fn generate_survey(cfg: &GeneratorConfig, seed: u64) -> Result<SurveyManifest> {
    let cfg = cfg.resolved()?;
    let positions = track_positions(&cfg);
    let map = HabitatMap::sample(&cfg, &positions, seed)?;
    let textures = cfg.textures.as_ref().expect("resolved");
    let patches: Vec<GeoPatch> = positions
        .par_iter()
        .enumerate()
        .map(|(id, &(e, n))| {
            let label = map.class_at(e, n);
            let mut rng = keyed_rng(seed, &[STREAM_IMAGE, id as u64]);
            let image = render_patch(&textures[label], &cfg.observation, cfg.image_size, &mut rng);
            GeoPatch {
                id,
                northing_m: n,
                easting_m: e,
                label: Some(label),
                source: ImageSource::Memory(Arc::new(image)),
            }
        })
        .collect();
    SurveyManifest::new(
        cfg.class_names.clone().expect("resolved"),
        cfg.patch_interval_m,
        Some(GeneratorEcho { config: cfg, seed }),
        patches,
    )
}

//! Geo-tagged survey datasets: patches with planar positions, their images,
//! manifests on disk and radius queries over positions.

mod generator;
mod image;
mod index;
mod manifest;

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

pub use generator::{default_textures, generate_survey, render_patch, ClassTexture, GeneratorConfig, ObservationNoise};
pub use image::Image;
pub use index::SpatialIndex;
pub use manifest::load_manifest;

use crate::error::{Error, Result};

/// Generator settings and seed recorded with a synthetic survey.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEcho {
    pub config: GeneratorConfig,
    pub seed: u64,
}

/// Where a patch's pixels live. Blob payloads are read on first access.
#[derive(Clone, Debug)]
pub enum ImageSource {
    Memory(Arc<Image>),
    Blob {
        path: PathBuf,
        cache: Arc<OnceLock<Arc<Image>>>,
    },
}

impl ImageSource {
    pub fn blob(path: PathBuf) -> Self {
        Self::Blob {
            path,
            cache: Arc::new(OnceLock::new()),
        }
    }

    pub fn load(&self) -> Result<Arc<Image>> {
        match self {
            Self::Memory(img) => Ok(img.clone()),
            Self::Blob { path, cache } => {
                if let Some(img) = cache.get() {
                    return Ok(img.clone());
                }
                let img = Arc::new(Image::read_blob(path)?);
                Ok(cache.get_or_init(|| img).clone())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeoPatch {
    pub id: usize,
    pub northing_m: f64,
    pub easting_m: f64,
    pub label: Option<usize>,
    pub source: ImageSource,
}

impl GeoPatch {
    pub fn image(&self) -> Result<Arc<Image>> {
        self.source.load()
    }
}

impl PartialEq for GeoPatch {
    /// Compares metadata and pixel content; unreadable payloads compare unequal.
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.northing_m == other.northing_m
            && self.easting_m == other.easting_m
            && self.label == other.label
            && matches!((self.image(), other.image()), (Ok(a), Ok(b)) if a == b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurveyManifest {
    class_names: Vec<String>,
    patch_interval_m: f64,
    generator: Option<GeneratorEcho>,
    patches: Vec<GeoPatch>,
}

impl SurveyManifest {
    /// Validates ids (dense, in order), labels and positions.
    pub fn new(
        class_names: Vec<String>,
        patch_interval_m: f64,
        generator: Option<GeneratorEcho>,
        patches: Vec<GeoPatch>,
    ) -> Result<Self> {
        if patches.is_empty() {
            return Err(Error::Invalid("no patches".into()));
        }
        for (i, p) in patches.iter().enumerate() {
            if p.id != i {
                return Err(Error::Invalid(format!("patch at position {i} has id {}", p.id)));
            }
            if let Some(l) = p.label {
                if l >= class_names.len() {
                    return Err(Error::Invalid(format!(
                        "patch {i} label {l} exceeds class count {}",
                        class_names.len()
                    )));
                }
            }
            if !(p.northing_m.is_finite() && p.easting_m.is_finite()) {
                return Err(Error::Invalid(format!("patch {i} has a non-finite position")));
            }
        }
        Ok(Self {
            class_names,
            patch_interval_m,
            generator,
            patches,
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn patch_interval_m(&self) -> f64 {
        self.patch_interval_m
    }

    pub fn generator(&self) -> Option<&GeneratorEcho> {
        self.generator.as_ref()
    }

    pub fn patches(&self) -> &[GeoPatch] {
        &self.patches
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patch(&self, id: usize) -> Result<&GeoPatch> {
        self.patches.get(id).ok_or(Error::UnknownPatch(id))
    }

    pub fn image(&self, id: usize) -> Result<Arc<Image>> {
        self.patch(id)?.image()
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.patches.iter().map(|p| p.label).collect()
    }

    /// `(easting, northing)` per patch, in id order.
    pub fn positions(&self) -> Vec<(f64, f64)> {
        self.patches.iter().map(|p| (p.easting_m, p.northing_m)).collect()
    }

    pub fn distance(&self, i: usize, j: usize) -> Result<f64> {
        let (a, b) = (self.patch(i)?, self.patch(j)?);
        Ok(((a.northing_m - b.northing_m).powi(2) + (a.easting_m - b.easting_m).powi(2)).sqrt())
    }

    pub fn spatial_index(&self, cell_size: f64) -> Result<SpatialIndex> {
        SpatialIndex::new(self.positions(), cell_size)
    }

    /// Copy with every image read into memory.
    pub fn materialize(&self) -> Result<Self> {
        let patches = self
            .patches
            .iter()
            .map(|p| {
                Ok(GeoPatch {
                    source: ImageSource::Memory(p.image()?),
                    ..p.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patches,
            ..self.clone()
        })
    }
}

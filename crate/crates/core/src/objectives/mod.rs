//! Self-supervised objectives.
//!
//! Losses take latents already placed on a [`Graph`] and return a scalar
//! [`Var`]. State that persists between steps (memory queue, EMA teacher,
//! DINO centre) lives in plain structs mutated outside the graph.

mod cluster;
mod contrastive;
mod teacher;

use serde::{Deserialize, Serialize};

pub use cluster::{deepcluster_loss, kmeans, sinkhorn, swav_codes, swav_loss, swav_loss_with_codes, KMeans};
pub use contrastive::{
    build_similarity_matrix, cosine_sim, nt_xent, rowwise_cosine, similarity_index_map, simsiam_loss,
};
pub use teacher::{dino_loss, ema_update, moco_loss, MemoryQueue, TeacherState};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Simclr,
    Simsiam,
    Moco,
    Swav,
    Deepcluster,
    Dino,
}

impl Objective {
    pub const ALL: [Objective; 6] = [
        Objective::Simclr,
        Objective::Simsiam,
        Objective::Moco,
        Objective::Swav,
        Objective::Deepcluster,
        Objective::Dino,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Simclr => "simclr",
            Self::Simsiam => "simsiam",
            Self::Moco => "moco",
            Self::Swav => "swav",
            Self::Deepcluster => "deepcluster",
            Self::Dino => "dino",
        }
    }

    /// Objectives trained on two global crops plus local crops.
    pub fn uses_multicrop(self) -> bool {
        matches!(self, Self::Swav | Self::Deepcluster | Self::Dino)
    }

    /// Objectives that keep an EMA teacher.
    pub fn uses_teacher(self) -> bool {
        matches!(self, Self::Moco | Self::Dino)
    }

    /// Display name of the location-regularised variant.
    pub fn geo_name(self) -> &'static str {
        match self {
            Self::Simclr => "GeoCLR",
            Self::Simsiam => "GeoSimSiam",
            Self::Moco => "GeoMoCo",
            Self::Swav => "GeoSwAV",
            Self::Deepcluster => "GeoDeepCluster",
            Self::Dino => "GeoDINO",
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|o| o.name() == s).ok_or_else(|| {
            let valid: Vec<_> = Self::ALL.iter().map(|o| o.name()).collect();
            Error::Config(format!(
                "unknown objective {s:?}; valid objectives: {}",
                valid.join(", ")
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Contrastive temperature (NT-Xent, MoCo).
    pub tau: f64,
    /// Student temperature (DINO); also used for SwAV and DeepCluster predictions.
    pub tau_s: f64,
    /// Teacher temperature (DINO).
    pub tau_t: f64,
    /// EMA momentum for the teacher.
    pub momentum: f64,
    pub queue_size: usize,
    pub sinkhorn_eps: f64,
    pub sinkhorn_iters: usize,
    /// DINO centre momentum.
    pub center_momentum: f64,
    /// k-means cluster count; `None` means four per dataset class.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clusters: Option<usize>,
    /// Re-cluster after every step instead of once per epoch.
    pub cluster_every_step: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            tau_s: 0.1,
            tau_t: 0.04,
            momentum: 0.99,
            queue_size: 1024,
            sinkhorn_eps: 0.05,
            sinkhorn_iters: 3,
            center_momentum: 0.9,
            clusters: None,
            cluster_every_step: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("tau", self.tau),
            ("tau_s", self.tau_s),
            ("tau_t", self.tau_t),
            ("sinkhorn_eps", self.sinkhorn_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.tau_t >= self.tau_s {
            return bad(format!(
                "teacher temperature tau_t ({}) must be below student temperature tau_s ({})",
                self.tau_t, self.tau_s
            ));
        }
        for (name, v) in [("momentum", self.momentum), ("center_momentum", self.center_momentum)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if self.queue_size == 0 || self.sinkhorn_iters == 0 {
            return bad("queue_size and sinkhorn_iters must be positive".into());
        }
        if self.clusters == Some(0) {
            return bad("clusters must be positive".into());
        }
        Ok(())
    }

    pub fn cluster_count(&self, n_classes: usize) -> usize {
        self.clusters.unwrap_or(4 * n_classes.max(1))
    }
}

//! Checkpoint files.
//!
//! Layout: the 8-byte magic `GSSLCKPT`, a little-endian `u64` header length,
//! a JSON header, then the little-endian `f64` payload. The header names each
//! payload section with its length, so readers can skip what they do not need.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::encoder::{EncoderParams, LayoutEntry, ModelState};
use crate::error::{Error, Result};
use crate::objectives::{MemoryQueue, TeacherState};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GSSLCKPT";
pub const CHECKPOINT_FORMAT: &str = "geossl-checkpoint/1";

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub student: ModelState,
    /// SGD momentum buffer, one entry per parameter.
    pub velocity: Vec<f64>,
    pub teacher: Option<TeacherState>,
    pub queue: Option<MemoryQueue>,
    /// Unit-norm k-means centroids and the pseudo-labels they produced.
    pub clusters: Option<(Tensor, Vec<usize>)>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimiser steps.
    pub step: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Section {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct QueueMeta {
    capacity: usize,
    dim: usize,
    len: usize,
    cursor: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: String,
    config: RunConfig,
    seed: u64,
    epoch: usize,
    step: usize,
    encoder: EncoderParams,
    layout: Vec<LayoutEntry>,
    sections: Vec<Section>,
    queue: Option<QueueMeta>,
    pseudo_labels: Option<Vec<usize>>,
    centroid_shape: Option<Vec<usize>>,
}

/// A checkpoint as stored: the resumable state plus the config that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.state;
        let mut sections: Vec<(&str, &[f64])> = vec![("student", s.student.values()), ("velocity", &s.velocity)];
        if let Some(t) = &s.teacher {
            sections.push(("teacher", t.model.values()));
            sections.push(("center", &t.center));
        }
        if let Some(q) = &s.queue {
            sections.push(("queue", q.raw()));
        }
        if let Some((c, _)) = &s.clusters {
            sections.push(("centroids", c.data()));
        }
        // Output paths are not part of what was computed.
        let mut config = self.config.clone();
        config.out_dir = None;
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config,
            seed: s.student.seed(),
            epoch: s.epoch,
            step: s.step,
            encoder: s.student.params().clone(),
            layout: s.student.layout().to_vec(),
            sections: sections
                .iter()
                .map(|(n, d)| Section {
                    name: (*n).into(),
                    len: d.len(),
                })
                .collect(),
            queue: s.queue.as_ref().map(|q| QueueMeta {
                capacity: q.capacity(),
                dim: q.dim(),
                len: q.len(),
                cursor: q.cursor(),
            }),
            pseudo_labels: s.clusters.as_ref().map(|(_, l)| l.clone()),
            centroid_shape: s.clusters.as_ref().map(|(c, _)| c.shape().to_vec()),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = sections.iter().map(|(_, d)| d.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, data) in sections {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or("truncated header")?;
        let header: Header = serde_json::from_slice(body).map_err(|e| format!("invalid header: {e}"))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(format!("unsupported format {:?}", header.format));
        }
        let mut payload = &bytes[16 + hlen..];
        let expected: usize = header.sections.iter().map(|s| s.len * 8).sum();
        if payload.len() != expected {
            return Err(format!(
                "payload has {} bytes, header describes {expected}",
                payload.len()
            ));
        }
        let mut take = |name: &str| -> Option<Vec<f64>> {
            let sec = header.sections.iter().find(|s| s.name == name)?;
            let (head, rest) = payload.split_at(sec.len * 8);
            payload = rest;
            Some(
                head.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            )
        };
        // Sections are read in the order they were written.
        let student = take("student").ok_or("missing student section")?;
        let velocity = take("velocity").ok_or("missing velocity section")?;
        let teacher = take("teacher");
        let center = take("center");
        let queue = take("queue");
        let centroids = take("centroids");

        let student = ModelState::from_parts(header.encoder.clone(), header.layout.clone(), student, header.seed)
            .map_err(|e| e.to_string())?;
        if velocity.len() != student.len() {
            return Err("velocity length does not match parameters".into());
        }
        let teacher = match (teacher, center) {
            (Some(t), Some(c)) => Some(TeacherState {
                model: ModelState::from_parts(header.encoder.clone(), header.layout.clone(), t, header.seed)
                    .map_err(|e| e.to_string())?,
                center: c,
            }),
            (None, None) => None,
            _ => return Err("teacher and center sections must appear together".into()),
        };
        let queue = match (queue, header.queue) {
            (Some(data), Some(m)) => {
                Some(MemoryQueue::from_parts(m.capacity, m.dim, data, m.len, m.cursor).map_err(|e| e.to_string())?)
            }
            (None, None) => None,
            _ => return Err("queue section and metadata disagree".into()),
        };
        let clusters = match (centroids, header.centroid_shape, header.pseudo_labels) {
            (Some(data), Some(shape), Some(labels)) => {
                Some((Tensor::new(shape, data).map_err(|e| e.to_string())?, labels))
            }
            (None, None, None) => None,
            _ => return Err("cluster sections are incomplete".into()),
        };
        Ok(Self {
            config: header.config,
            state: TrainState {
                student,
                velocity,
                teacher,
                queue,
                clusters,
                epoch: header.epoch,
                step: header.step,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|message| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        })
    }
}

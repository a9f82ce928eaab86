use std::path::Path;

use rayon::prelude::*;

use crate::encoder::{images_to_tensor, ModelState, ModelVars};
use crate::error::{Error, Result};
use crate::survey::{Image, SurveyManifest};
use crate::tensor::{Graph, Tensor};

const CHUNK: usize = 64;

/// Latent vectors keyed by patch id.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable {
    pub ids: Vec<usize>,
    /// `[ids.len(), dim]`.
    pub latents: Tensor,
}

impl LatentTable {
    pub fn dim(&self) -> usize {
        self.latents.shape()[1]
    }

    /// Header `id,z0,z1,...`; values use the shortest round-tripping form.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header = vec!["id".to_string()];
        header.extend((0..self.dim()).map(|k| format!("z{k}")));
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for (r, id) in self.ids.iter().enumerate() {
            let mut rec = vec![id.to_string()];
            rec.extend(self.latents.row(r).iter().map(f64::to_string));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let dim = r.headers().map_err(|e| csv_err(path, e))?.len().saturating_sub(1);
        if dim == 0 {
            return Err(Error::Invalid(format!("{}: no latent columns", path.display())));
        }
        let (mut ids, mut data) = (Vec::new(), Vec::new());
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let bad = |m: String| Error::Invalid(format!("{}, row {}: {m}", path.display(), line + 1));
            ids.push(rec[0].parse::<usize>().map_err(|e| bad(e.to_string()))?);
            for v in rec.iter().skip(1) {
                data.push(v.parse::<f64>().map_err(|e| bad(e.to_string()))?);
            }
        }
        if ids.is_empty() {
            return Err(Error::Invalid(format!("{}: no rows", path.display())));
        }
        Ok(Self {
            latents: Tensor::new(vec![ids.len(), dim], data)?,
            ids,
        })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Invalid(format!("{}: {e}", path.display()))
}

/// Square `size` crop from the image centre.
pub fn center_crop(image: &Image, size: usize) -> Result<Image> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    if size == 0 || size > h || size > w {
        return Err(Error::Invalid(format!(
            "centre crop {size} does not fit a {h}x{w} image"
        )));
    }
    let (y0, x0) = ((h - size) / 2, (w - size) / 2);
    let mut data = Vec::with_capacity(size * size * c);
    for y in y0..y0 + size {
        let start = (y * w + x0) * c;
        data.extend_from_slice(&image.data()[start..start + size * c]);
    }
    Image::new(size, size, c, data)
}

fn forward_all(state: &ModelState, survey: &SurveyManifest, crop: usize, projected: bool) -> Result<Tensor> {
    let ids: Vec<usize> = (0..survey.len()).collect();
    let chunks: Vec<Vec<f64>> = ids
        .par_chunks(CHUNK)
        .map(|chunk| {
            let imgs = chunk
                .iter()
                .map(|&i| center_crop(&*survey.image(i)?, crop))
                .collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new();
            let m = ModelVars::bind(&mut g, state, false)?;
            let x = g.constant(images_to_tensor(&imgs)?)?;
            let mut z = m.encode(&mut g, x)?;
            if projected {
                let p = m.project(&mut g, z)?;
                z = g.l2_normalize(p, 1)?;
            }
            Ok(g.value(z).data().to_vec())
        })
        .collect::<Result<_>>()?;
    let data: Vec<f64> = chunks.concat();
    let dim = data.len() / survey.len().max(1);
    Ok(Tensor::new(vec![survey.len(), dim], data)?)
}

/// Backbone latents of every patch's centre crop, in id order.
pub fn extract_latents(state: &ModelState, survey: &SurveyManifest, crop: usize) -> Result<LatentTable> {
    if survey.is_empty() {
        return Err(Error::Invalid("cannot extract latents from an empty survey".into()));
    }
    Ok(LatentTable {
        ids: (0..survey.len()).collect(),
        latents: forward_all(state, survey, crop, false)?,
    })
}

/// Unit-norm projector outputs of every patch's centre crop.
pub(crate) fn project_all(state: &ModelState, survey: &SurveyManifest, crop: usize) -> Result<Tensor> {
    forward_all(state, survey, crop, true)
}

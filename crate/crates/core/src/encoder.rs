//! Tiny convolutional backbone with projector, predictor and prototype heads.
//!
//! All parameters live in one flat `f64` vector described by a named layout.
//! [`ModelVars::bind`] places each named tensor on a [`Graph`] as its own leaf,
//! and [`ModelVars::flat_grad`] gathers the gradients back into layout order.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;
use crate::survey::Image;
use crate::tensor::{Graph, Tensor, Var};

const INIT_STREAM: u64 = 0x1717;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderParams {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub latent_dim: usize,
    pub projector_hidden: usize,
    pub projector_dim: usize,
    pub predictor_hidden: usize,
    pub prototypes: usize,
}

impl Default for EncoderParams {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 64],
            latent_dim: 128,
            projector_hidden: 128,
            projector_dim: 64,
            predictor_hidden: 32,
            prototypes: 32,
        }
    }
}

impl EncoderParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.in_channels == 0 {
            return bad("in_channels must be positive");
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths must be a non-empty list of positive stage widths");
        }
        if self.latent_dim < 8 {
            return bad("latent_dim must be at least 8");
        }
        if self.projector_hidden == 0 || self.projector_dim == 0 || self.predictor_hidden == 0 {
            return bad("head dimensions must be positive");
        }
        if self.prototypes == 0 {
            return bad("prototypes must be positive");
        }
        Ok(())
    }

    /// Smallest square input the pooling stages accept.
    pub fn min_input_size(&self) -> usize {
        1 << self.widths.len()
    }

    /// Named tensors in storage order.
    pub fn layout(&self) -> Vec<LayoutEntry> {
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        let mut cin = self.in_channels;
        for (s, &w) in self.widths.iter().enumerate() {
            shapes.push((format!("conv{s}.weight"), vec![w, cin, 3, 3]));
            shapes.push((format!("conv{s}.bias"), vec![w]));
            cin = w;
        }
        let (d, h, p, q) = (
            self.latent_dim,
            self.projector_hidden,
            self.projector_dim,
            self.predictor_hidden,
        );
        shapes.push(("fc.weight".into(), vec![cin, d]));
        shapes.push(("fc.bias".into(), vec![d]));
        shapes.push(("proj.0.weight".into(), vec![d, h]));
        shapes.push(("proj.0.bias".into(), vec![h]));
        shapes.push(("proj.1.weight".into(), vec![h, p]));
        shapes.push(("proj.1.bias".into(), vec![p]));
        shapes.push(("pred.0.weight".into(), vec![p, q]));
        shapes.push(("pred.0.bias".into(), vec![q]));
        shapes.push(("pred.1.weight".into(), vec![q, p]));
        shapes.push(("pred.1.bias".into(), vec![p]));
        shapes.push(("prototypes".into(), vec![self.prototypes, p]));

        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(name, shape)| {
                let len = shape.iter().product::<usize>();
                let e = LayoutEntry { name, shape, offset };
                offset += len;
                e
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(LayoutEntry::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter vector plus the layout that names its pieces.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    params: EncoderParams,
    layout: Vec<LayoutEntry>,
    values: Vec<f64>,
    seed: u64,
}

impl ModelState {
    /// He-uniform weights, zero biases, unit-norm Gaussian prototype rows.
    pub fn init(params: &EncoderParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let layout = params.layout();
        let total = layout.iter().map(LayoutEntry::len).sum();
        let mut values = vec![0.0; total];
        let mut rng = keyed_rng(seed, &[INIT_STREAM]);
        for e in &layout {
            let slot = &mut values[e.range()];
            if e.name == "prototypes" {
                for row in slot.chunks_mut(e.shape[1]) {
                    loop {
                        row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm > 0.0 {
                            row.iter_mut().for_each(|v| *v /= norm);
                            break;
                        }
                    }
                }
            } else if e.name.ends_with(".weight") {
                let fan_in: usize = if e.shape.len() == 4 {
                    e.shape[1..].iter().product()
                } else {
                    e.shape[0]
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                slot.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
            }
        }
        Ok(Self {
            params: params.clone(),
            layout,
            values,
            seed,
        })
    }

    /// Rebuilds a state from stored parts, checking the layout against `params`.
    pub fn from_parts(params: EncoderParams, layout: Vec<LayoutEntry>, values: Vec<f64>, seed: u64) -> Result<Self> {
        params.validate()?;
        if layout != params.layout() {
            return Err(Error::Invalid("parameter layout does not match encoder config".into()));
        }
        if values.len() != params.param_count() {
            return Err(Error::Invalid(format!(
                "expected {} parameters, found {}",
                params.param_count(),
                values.len()
            )));
        }
        Ok(Self {
            params,
            layout,
            values,
            seed,
        })
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn layout(&self) -> &[LayoutEntry] {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.layout.iter().find(|e| e.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        let e = self.entry(name)?;
        Tensor::new(e.shape.clone(), self.values[e.range()].to_vec()).ok()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.params == other.params && self.layout == other.layout
    }
}

/// A model placed on a graph: one leaf per layout entry.
#[derive(Clone, Debug)]
pub struct ModelVars {
    vars: Vec<Var>,
    params: EncoderParams,
}

impl ModelVars {
    /// Binds every tensor; `trainable` decides whether they accumulate gradients.
    pub fn bind(g: &mut Graph, state: &ModelState, trainable: bool) -> Result<Self> {
        let vars = state
            .layout
            .iter()
            .map(|e| {
                let t = Tensor::new(e.shape.clone(), state.values[e.range()].to_vec())?;
                Ok(g.leaf(t, trainable)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            vars,
            params: state.params.clone(),
        })
    }

    /// Binds a flat parameter vector as a single leaf and slices the named
    /// tensors out of it, so one gradient covers the whole model.
    pub fn from_flat(g: &mut Graph, flat: Var, params: &EncoderParams) -> Result<Self> {
        let layout = params.layout();
        let vars = layout
            .iter()
            .map(|e| {
                let piece = g.slice(flat, 0, e.offset, e.len())?;
                Ok(g.reshape(piece, &e.shape)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            vars,
            params: params.clone(),
        })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn at(&self, k: usize) -> Var {
        self.vars[k]
    }

    fn stages(&self) -> usize {
        self.params.widths.len()
    }

    fn head(&self, k: usize) -> Var {
        self.at(2 * self.stages() + k)
    }

    /// Gradients of every bound tensor in layout order (zeros where unreached).
    pub fn flat_grad(&self, g: &Graph) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.params.param_count());
        for &v in &self.vars {
            match g.grad(v) {
                Some(t) => out.extend_from_slice(t.data()),
                None => out.extend(std::iter::repeat_n(0.0, g.value(v).numel())),
            }
        }
        out
    }

    /// Backbone: per stage 3×3 conv (pad 1), relu, 2×2 average pool; then
    /// global average pool and a linear map to `latent_dim`.
    pub fn encode(&self, g: &mut Graph, images: Var) -> Result<Var> {
        let shape = g.value(images).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.params.in_channels {
            return Err(Error::Invalid(format!(
                "expected [B, {}, H, W] images, got {shape:?}",
                self.params.in_channels
            )));
        }
        let min = self.params.min_input_size();
        if shape[2] < min || shape[3] < min {
            return Err(Error::Invalid(format!(
                "spatial size {}x{} too small for {} pooling stages (need at least {min}x{min})",
                shape[2],
                shape[3],
                self.stages()
            )));
        }
        let mut x = images;
        for s in 0..self.stages() {
            x = g.conv2d(x, self.at(2 * s), Some(self.at(2 * s + 1)), 1, 1)?;
            x = g.relu(x)?;
            x = g.avg_pool2d(x, 2)?;
        }
        let s = g.value(x).shape().to_vec();
        let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        let pooled = g.mean_axis(flat, 2)?;
        self.linear(g, pooled, 0)
    }

    fn linear(&self, g: &mut Graph, x: Var, head: usize) -> Result<Var> {
        let w = self.head(head);
        let (xs, ws) = (g.value(x).shape(), g.value(w).shape());
        if xs.len() != 2 || xs[1] != ws[0] {
            return Err(Error::Invalid(format!(
                "dimension mismatch: input {xs:?}, weight {ws:?}"
            )));
        }
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, self.head(head + 1))?)
    }

    fn mlp(&self, g: &mut Graph, x: Var, head: usize) -> Result<Var> {
        let h = self.linear(g, x, head)?;
        let h = g.relu(h)?;
        self.linear(g, h, head + 2)
    }

    /// Two-layer projector head.
    pub fn project(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.mlp(g, z, 2)
    }

    /// Two-layer predictor head (SimSiam).
    pub fn predict(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.mlp(g, z, 6)
    }

    /// Cosine similarity of each projected row against each prototype row.
    pub fn prototype_logits(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let protos = self.head(10);
        let (zs, ps) = (g.value(z).shape(), g.value(protos).shape());
        if zs.len() != 2 || zs[1] != ps[1] {
            return Err(Error::Invalid(format!(
                "dimension mismatch: input {zs:?}, prototypes {ps:?}"
            )));
        }
        let zn = g.l2_normalize(z, 1)?;
        let pn = g.l2_normalize(protos, 1)?;
        let pt = g.transpose(pn)?;
        Ok(g.matmul(zn, pt)?)
    }
}

/// Stacks equally sized images into a `[B, C, H, W]` tensor.
pub fn images_to_tensor<I: AsRef<Image>>(images: &[I]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Invalid("empty image batch".into()))?
        .as_ref();
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        let img = img.as_ref();
        if (img.height(), img.width(), img.channels()) != (h, w, c) {
            return Err(Error::Invalid(format!(
                "images in a batch must share a shape: {h}x{w}x{c} vs {}x{}x{}",
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        data.extend(img.to_chw());
    }
    Ok(Tensor::new(vec![images.len(), c, h, w], data)?)
}

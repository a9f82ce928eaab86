use crate::encoder::ModelState;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

use super::contrastive::rowwise_cosine;

/// `teacher <- m * teacher + (1 - m) * student`, elementwise.
pub fn ema_update(teacher: &mut ModelState, student: &ModelState, m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::Invalid(format!("EMA momentum must lie in [0, 1), got {m}")));
    }
    if !teacher.same_layout(student) {
        return Err(Error::Invalid("teacher and student layouts differ".into()));
    }
    for (t, &s) in teacher.values_mut().iter_mut().zip(student.values()) {
        *t = m * *t + (1.0 - m) * s;
    }
    Ok(())
}

/// EMA teacher parameters plus the DINO centring vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub model: ModelState,
    pub center: Vec<f64>,
}

impl TeacherState {
    /// Teacher initialised as a copy of the student with a zero centre.
    pub fn from_student(student: &ModelState) -> Self {
        Self {
            model: student.clone(),
            center: vec![0.0; student.params().prototypes],
        }
    }
}

/// FIFO ring buffer of unit-norm keys.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryQueue {
    capacity: usize,
    dim: usize,
    data: Vec<f64>,
    len: usize,
    cursor: usize,
}

impl MemoryQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Invalid("queue capacity and dimension must be positive".into()));
        }
        Ok(Self {
            capacity,
            dim,
            data: vec![0.0; capacity * dim],
            len: 0,
            cursor: 0,
        })
    }

    /// Restores a queue from its stored parts.
    pub fn from_parts(capacity: usize, dim: usize, data: Vec<f64>, len: usize, cursor: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 || data.len() != capacity * dim || len > capacity || cursor >= capacity {
            return Err(Error::Invalid("inconsistent memory queue state".into()));
        }
        Ok(Self {
            capacity,
            dim,
            data,
            len,
            cursor,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Raw slot storage, `capacity × dim`.
    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    /// Stored keys from oldest to newest.
    pub fn keys(&self) -> Vec<&[f64]> {
        let start = if self.len < self.capacity { 0 } else { self.cursor };
        (0..self.len)
            .map(|k| {
                let slot = (start + k) % self.capacity;
                &self.data[slot * self.dim..(slot + 1) * self.dim]
            })
            .collect()
    }

    /// Current keys as a `len × dim` tensor, or `None` when empty.
    pub fn tensor(&self) -> Option<Tensor> {
        if self.is_empty() {
            return None;
        }
        let data = self.keys().concat();
        Tensor::new(vec![self.len, self.dim], data).ok()
    }

    /// Appends the rows of `keys` (l2-normalised), evicting the oldest when full.
    pub fn enqueue(&mut self, keys: &Tensor) -> Result<()> {
        if keys.rank() != 2 || keys.shape()[1] != self.dim {
            return Err(Error::Invalid(format!(
                "queue holds {}-dim keys, got shape {:?}",
                self.dim,
                keys.shape()
            )));
        }
        for r in 0..keys.shape()[0] {
            let row = keys.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Invalid("cannot enqueue a zero key".into()));
            }
            let slot = &mut self.data[self.cursor * self.dim..(self.cursor + 1) * self.dim];
            slot.iter_mut().zip(row).for_each(|(d, v)| *d = v / norm);
            self.cursor = (self.cursor + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
        }
        Ok(())
    }
}

/// InfoNCE of each query against its teacher key and the queued negatives.
/// The keys are enqueued after the loss is built, so a batch never contrasts
/// against itself.
pub fn moco_loss(g: &mut Graph, q: Var, k_plus: Var, queue: &mut MemoryQueue, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    let k = g.stop_gradient(k_plus);
    let b = g.value(q).shape()[0];
    let pos = rowwise_cosine(g, q, k)?;
    let pos = g.reshape(pos, &[b, 1])?;
    let logits = match queue.tensor() {
        Some(neg) => {
            if neg.shape()[1] != g.value(q).shape()[1] {
                return Err(Error::Invalid("query and queue dimensions differ".into()));
            }
            let qn = g.l2_normalize(q, 1)?;
            let negv = g.constant(neg)?;
            let nt = g.transpose(negv)?;
            let negs = g.matmul(qn, nt)?;
            g.concat(&[pos, negs], 1)?
        }
        None => pos,
    };
    let scaled = g.div_scalar(logits, tau)?;
    let ls = g.log_softmax(scaled, 1)?;
    let first = g.slice(ls, 1, 0, 1)?;
    let mean = g.mean(first)?;
    let loss = g.neg(mean)?;
    let keys = g.value(k).clone();
    queue.enqueue(&keys)?;
    Ok(loss)
}

/// Cross-entropy between sharpened, centred teacher distributions on the
/// global views and student distributions on every view. `student[k]` and
/// `teacher[k]` for `k < teacher.len()` are the same global view and are not
/// paired. The centre is updated from the teacher logits afterwards.
pub fn dino_loss(
    g: &mut Graph,
    student: &[Var],
    teacher: &[Var],
    center: &mut [f64],
    tau_s: f64,
    tau_t: f64,
    center_momentum: f64,
) -> Result<Var> {
    if !(tau_s > 0.0 && tau_t > 0.0) {
        return Err(Error::Invalid(format!(
            "temperatures must be positive, got {tau_s}, {tau_t}"
        )));
    }
    if teacher.is_empty() || student.len() < teacher.len() {
        return Err(Error::Invalid("student views must include every teacher view".into()));
    }
    let k = center.len();
    let c = g.constant(Tensor::new(vec![k], center.to_vec())?)?;
    let mut targets = Vec::with_capacity(teacher.len());
    for &t in teacher {
        if g.value(t).rank() != 2 || g.value(t).shape()[1] != k {
            return Err(Error::Invalid(format!(
                "teacher logits must be B x {k}, got {:?}",
                g.value(t).shape()
            )));
        }
        let t = g.stop_gradient(t);
        let negc = g.neg(c)?;
        let centred = g.add_row(t, negc)?;
        let sharp = g.div_scalar(centred, tau_t)?;
        targets.push(g.softmax(sharp, 1)?);
    }
    let mut total: Option<Var> = None;
    for (vs, &s) in student.iter().enumerate() {
        let scaled = g.div_scalar(s, tau_s)?;
        let ls = g.log_softmax(scaled, 1)?;
        for (vt, &pt) in targets.iter().enumerate() {
            if vs == vt {
                continue;
            }
            let prod = g.mul(pt, ls)?;
            let per_sample = g.sum_axis(prod, 1)?;
            let term = g.mean(per_sample)?;
            total = Some(match total {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0))?,
    };
    let loss = g.mul_scalar(total, -1.0 / (student.len() * teacher.len()) as f64)?;

    let mut mean = vec![0.0; k];
    let mut rows = 0usize;
    for &t in teacher {
        let tv = g.value(t);
        for r in 0..tv.shape()[0] {
            tv.row(r).iter().zip(mean.iter_mut()).for_each(|(v, m)| *m += v);
            rows += 1;
        }
    }
    for (ci, m) in center.iter_mut().zip(&mean) {
        *ci = center_momentum * *ci + (1.0 - center_momentum) * m / rows as f64;
    }
    Ok(loss)
}

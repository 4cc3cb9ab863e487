//! Online instance matching: softmax over a non-parametric identity lookup table
//! plus a FIFO queue of unlabeled features.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::head::Label;
use crate::tensor::{dot, norm, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OimState {
    lut: Matrix,
    queue: VecDeque<Vec<f64>>,
    capacity: usize,
    pub temperature: f64,
    pub momentum: f64,
}

pub const DEFAULT_TEMPERATURE: f64 = 1.0 / 30.0;
pub const DEFAULT_MOMENTUM: f64 = 0.5;

impl OimState {
    /// Lookup table rows must already be unit-norm.
    pub fn new(lut: Matrix, capacity: usize, temperature: f64, momentum: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Config("OIM temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config("OIM momentum must lie in [0, 1]".into()));
        }
        for (i, r) in lut.iter_rows().enumerate() {
            if (norm(r) - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!("lookup row {i} is not unit-norm")));
            }
        }
        Ok(Self {
            lut,
            queue: VecDeque::with_capacity(capacity),
            capacity,
            temperature,
            momentum,
        })
    }

    /// Random unit rows for `identities` classes; queue capacity defaults to five per identity.
    pub fn random<R: Rng + ?Sized>(identities: usize, dim: usize, rng: &mut R) -> Self {
        let mut lut = Matrix::zeros(identities, dim);
        for r in 0..identities {
            let row = lut.row_mut(r);
            loop {
                row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                let n = norm(row);
                if n > 1e-12 {
                    row.iter_mut().for_each(|v| *v /= n);
                    break;
                }
            }
        }
        Self {
            lut,
            queue: VecDeque::with_capacity(5 * identities),
            capacity: 5 * identities,
            temperature: DEFAULT_TEMPERATURE,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn with_capacity(mut self, capacity: usize) -> Self {
        self.capacity = capacity;
        while self.queue.len() > capacity {
            self.queue.pop_front();
        }
        self
    }

    pub fn identities(&self) -> usize {
        self.lut.rows()
    }

    pub fn dim(&self) -> usize {
        self.lut.cols()
    }

    pub fn lut(&self) -> &Matrix {
        &self.lut
    }

    pub fn queue(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.queue.iter().map(|v| v.as_slice())
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends to the queue, evicting the oldest entries beyond capacity.
    pub fn push_unlabeled(&mut self, x: &[f64]) {
        if self.capacity == 0 {
            return;
        }
        if self.queue.len() == self.capacity {
            self.queue.pop_front();
        }
        self.queue.push_back(x.to_vec());
    }

    /// `v_t <- normalize(gamma * v_t + (1 - gamma) * x)`.
    pub fn update_lut(&mut self, label: u32, x: &[f64]) -> Result<()> {
        let t = self.check_label(label)?;
        let g = self.momentum;
        let row = self.lut.row_mut(t);
        for (v, xv) in row.iter_mut().zip(x) {
            *v = g * *v + (1.0 - g) * xv;
        }
        let n = norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(())
    }

    pub fn apply(&mut self, update: &OimUpdate) -> Result<()> {
        for (label, x) in &update.lut_rows {
            self.update_lut(*label, x)?;
        }
        for x in &update.unlabeled {
            self.push_unlabeled(x);
        }
        Ok(())
    }

    fn check_label(&self, label: u32) -> Result<usize> {
        let t = label as usize;
        if t >= self.lut.rows() {
            return Err(Error::LabelOutOfRange {
                label,
                identities: self.lut.rows(),
            });
        }
        Ok(t)
    }

    /// Softmax over `[lut x ; queue x] / tau`.
    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let mut logits: Vec<f64> = self
            .lut
            .iter_rows()
            .chain(self.queue.iter().map(|v| v.as_slice()))
            .map(|r| dot(r, x) / self.temperature)
            .collect();
        crate::tensor::softmax_in_place(&mut logits);
        logits
    }

    pub(crate) fn restore(
        lut: Matrix,
        queue: Vec<Vec<f64>>,
        capacity: usize,
        temperature: f64,
        momentum: f64,
    ) -> Self {
        Self {
            lut,
            queue: queue.into(),
            capacity,
            temperature,
            momentum,
        }
    }
}

/// Deferred state change computed by [`oim_loss`]; apply with [`OimState::apply`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OimUpdate {
    pub lut_rows: Vec<(u32, Vec<f64>)>,
    pub unlabeled: Vec<Vec<f64>>,
}

impl OimUpdate {
    pub fn extend(&mut self, other: OimUpdate) {
        self.lut_rows.extend(other.lut_rows);
        self.unlabeled.extend(other.unlabeled);
    }
}

#[derive(Clone, Debug)]
pub struct OimOutput {
    pub loss: f64,
    /// d loss / d features, same shape as the input.
    pub grad: Matrix,
    pub labeled: usize,
    pub update: OimUpdate,
}

/// Mean cross-entropy of the labeled rows against the lookup table and queue.
///
/// `features` rows are expected to be unit-norm. Unlabeled rows carry no loss and
/// are scheduled for the queue; labeled rows are scheduled for the lookup update.
pub fn oim_loss(features: &Matrix, labels: &[Label], state: &OimState) -> Result<OimOutput> {
    if labels.len() != features.rows() {
        return Err(shape(
            "oim_loss",
            format!("{} labels for {} rows", labels.len(), features.rows()),
        ));
    }
    if features.cols() != state.dim() {
        return Err(shape(
            "oim_loss",
            format!("feature dim {} vs table dim {}", features.cols(), state.dim()),
        ));
    }
    let labeled = labels.iter().filter(|l| l.is_some()).count();
    let mut grad = Matrix::zeros(features.rows(), features.cols());
    let mut update = OimUpdate::default();
    let mut loss = 0.0;
    for (i, label) in labels.iter().enumerate() {
        let x = features.row(i);
        let Some(t) = *label else {
            update.unlabeled.push(x.to_vec());
            continue;
        };
        let t = state.check_label(t)?;
        let p = state.probabilities(x);
        loss -= p[t].max(f64::MIN_POSITIVE).ln();
        // d(-log p_t)/dx = sum_k (p_k - [k == t]) v_k / tau
        let scale = 1.0 / (state.temperature * labeled as f64);
        let g = grad.row_mut(i);
        for (k, row) in state
            .lut
            .iter_rows()
            .chain(state.queue.iter().map(|v| v.as_slice()))
            .enumerate()
        {
            let coef = (p[k] - if k == t { 1.0 } else { 0.0 }) * scale;
            if coef != 0.0 {
                for (gv, rv) in g.iter_mut().zip(row) {
                    *gv += coef * rv;
                }
            }
        }
        update.lut_rows.push((t as u32, x.to_vec()));
    }
    if labeled > 0 {
        loss /= labeled as f64;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("oim_loss"));
    }
    Ok(OimOutput {
        loss,
        grad,
        labeled,
        update,
    })
}

//! Training loop: pair fetch from the memory bank, ACAE forward, weighted OIM loss,
//! bank refresh and a plain SGD step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bank::{appoint_pairs, split_by_label, ImageMemoryBank};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grad::{pair_loss, Supervision};
use crate::head::{AcaeParams, FeatureSet};
use crate::oim::{OimState, OimUpdate};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub lr_steps: Vec<usize>,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub loss_weight: f64,
    /// Compute but do not back-propagate the head loss during epoch 0.
    pub freeze_first_epoch: bool,
    pub supervision: Supervision,
    /// Feed the pair image's unlabeled rows to the head as context.
    pub pair_unlabeled: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 2.0,
            lr_steps: vec![6],
            lr_decay: 0.1,
            batch_size: 4,
            loss_weight: 0.1,
            freeze_first_epoch: true,
            supervision: Supervision::default(),
            pair_unlabeled: true,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(self.loss_weight >= 0.0) || !(self.lr_decay >= 0.0) {
            return Err(Error::Config(
                "lr, loss_weight and lr_decay must be non-negative".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_steps.iter().filter(|&&s| s <= epoch).count();
        self.lr * self.lr_decay.powi(drops as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub frozen: bool,
    /// Mean weighted head loss over steps that had a warm pair.
    pub mean_loss: f64,
    pub steps: usize,
    pub cold_pairs: usize,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub params: AcaeParams,
    pub bank: ImageMemoryBank,
    pub oim: OimState,
    pub schedule: TrainSchedule,
    pub exec: Execution,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    /// Appoints pairs over `images` and starts with an empty bank.
    pub fn new(
        params: AcaeParams,
        images: &[FeatureSet],
        oim: OimState,
        schedule: TrainSchedule,
        seed: u64,
    ) -> Result<Self> {
        schedule.validate()?;
        let pairs = appoint_pairs(images, seed)?;
        let bank = ImageMemoryBank::new(images, pairs);
        Ok(Self {
            params,
            bank,
            oim,
            schedule,
            exec: Execution::default(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x7261_696e),
            epoch: 0,
        })
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn pair_input(&self, image: u64) -> Result<Option<FeatureSet>> {
        let fetched = match self.bank.fetch_pair(image)? {
            Ok(f) => f,
            Err(_) => return Ok(None),
        };
        if self.schedule.pair_unlabeled {
            return Ok(Some(fetched));
        }
        let keep: Vec<usize> = (0..fetched.len())
            .filter(|&i| fetched.labels[i].is_some())
            .collect();
        Ok(Some(FeatureSet {
            image_id: fetched.image_id,
            features: fetched.features.select_rows(&keep),
            labels: keep.iter().map(|&i| fetched.labels[i]).collect(),
        }))
    }

    /// One pass over `images` in a seeded shuffled order.
    pub fn train_epoch(&mut self, images: &[FeatureSet]) -> Result<EpochStats> {
        let epoch = self.epoch;
        let lr = self.schedule.lr_at(epoch);
        let frozen = self.schedule.freeze_first_epoch && epoch == 0;
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut self.rng);

        let mut loss_sum = 0.0;
        let mut steps = 0;
        let mut cold = 0;
        for batch in order.chunks(self.schedule.batch_size) {
            let inputs: Vec<(usize, Option<FeatureSet>)> = batch
                .iter()
                .map(|&i| Ok((i, self.pair_input(images[i].image_id)?)))
                .collect::<Result<_>>()?;
            let params = &self.params;
            let oim = &self.oim;
            let sched = &self.schedule;
            let results = self.exec.map(&inputs, |(i, pair)| {
                pair.as_ref()
                    .map(|b| {
                        pair_loss(
                            params,
                            &images[*i],
                            b,
                            oim,
                            sched.supervision,
                            sched.loss_weight,
                        )
                    })
                    .transpose()
            });

            let mut grad: Option<AcaeParams> = None;
            let mut warm = 0;
            let mut updates = Vec::with_capacity(batch.len());
            for ((i, _), r) in inputs.iter().zip(results) {
                match r? {
                    None => {
                        cold += 1;
                        updates.push((*i, None));
                    }
                    Some(pl) => {
                        if !pl.loss.is_finite() || !pl.grads.is_finite() {
                            return Err(Error::NonFinite("training loss"));
                        }
                        loss_sum += pl.loss;
                        steps += 1;
                        warm += 1;
                        match grad.as_mut() {
                            Some(g) => g.axpy(1.0, &pl.grads.params),
                            None => grad = Some(pl.grads.params),
                        }
                        updates.push((*i, Some(pl.update)));
                    }
                }
            }

            for (i, update) in updates {
                let image = &images[i];
                match update {
                    Some(u) => self.oim.apply(&u)?,
                    None => self.oim.apply(&unlabeled_only(image))?,
                }
                // frozen extractor: the bank receives the appearance features themselves
                let (l, u) = split_by_label(&image.features, &image.labels);
                self.bank.update(image.image_id, &l, &u)?;
            }

            if let Some(g) = grad {
                if !frozen && lr > 0.0 {
                    self.params.axpy(-lr / warm as f64, &g);
                    if !self.params.is_finite() {
                        return Err(Error::NonFinite("parameters after update"));
                    }
                }
            }
        }
        self.epoch += 1;
        Ok(EpochStats {
            epoch,
            lr,
            frozen,
            mean_loss: if steps > 0 {
                loss_sum / steps as f64
            } else {
                0.0
            },
            steps,
            cold_pairs: cold,
        })
    }

    pub fn train(&mut self, images: &[FeatureSet]) -> Result<Vec<EpochStats>> {
        let mut out = Vec::new();
        while self.epoch < self.schedule.epochs {
            let s = self.train_epoch(images)?;
            log::info!(
                "epoch {} lr {:.4} loss {:.5} steps {} cold {}{}",
                s.epoch,
                s.lr,
                s.mean_loss,
                s.steps,
                s.cold_pairs,
                if s.frozen { " (frozen)" } else { "" }
            );
            out.push(s);
        }
        Ok(out)
    }
}

/// Cold pairs still feed the queue with the image's unlabeled rows, normalized.
fn unlabeled_only(image: &FeatureSet) -> OimUpdate {
    let (_, u) = split_by_label(&image.features, &image.labels);
    OimUpdate {
        lut_rows: Vec::new(),
        unlabeled: u
            .l2_normalized_rows()
            .iter_rows()
            .map(|r| r.to_vec())
            .collect(),
    }
}

//! Step-level training loop with deep supervision and resumable state.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::loss::weighted_bce_dice;
use super::optim::AdamW;
use crate::dataset::SegSample;
use crate::error::{Error, Result};
use crate::metrics::evaluate_samples;
use crate::model::{json_from_tensor, json_to_tensor, PolypSes};
use crate::params::{Bindings, Mode};
use crate::tensor::checkpoint::TensorArchive;
use crate::tensor::{Tape, Tensor, Var};

pub const HISTORY_HEADER: &str = "epoch,loss,mdice,miou,mae,lr";

const META_TRAIN_CONFIG: &str = "meta.train_config";
const META_EPOCH: &str = "meta.epoch";
const META_STEP: &str = "meta.step";
const META_CURSOR: &str = "meta.cursor";
const META_LOSS_SUM: &str = "meta.epoch_loss_sum";
const META_LOSS_STEPS: &str = "meta.epoch_loss_steps";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean step loss over the epoch.
    pub loss: f64,
    pub mdice: f64,
    pub miou: f64,
    pub mae: f64,
    pub lr: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.loss, self.mdice, self.miou, self.mae, self.lr
        )
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Optimizer steps completed, including this one.
    pub step: u64,
    /// 0-based epoch the step belonged to.
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub epoch_done: bool,
}

/// Sample visiting order for `epoch`, a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 32) | epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

// f32 holds integers exactly below 2^24, so u64 metadata goes in 16-bit limbs.
fn u64_tensor(v: u64) -> Tensor<f32> {
    let limbs = (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect();
    Tensor::new(&[4], limbs).expect("four limbs")
}

fn u64_from(a: &TensorArchive, name: &str) -> Result<u64> {
    let t = a
        .get(name)
        .ok_or_else(|| Error::Checkpoint(format!("tensor {name} missing from checkpoint")))?;
    if t.shape() != [4]
        || t.data()
            .iter()
            .any(|&x| x.fract() != 0.0 || !(0.0..65536.0).contains(&x))
    {
        return Err(Error::Checkpoint(format!(
            "tensor {name} is not a 64-bit counter"
        )));
    }
    Ok(t.data()
        .iter()
        .enumerate()
        .map(|(i, &x)| (x as u64) << (16 * i))
        .sum())
}

pub struct Trainer {
    config: TrainConfig,
    model: PolypSes<f32>,
    optim: AdamW<f32>,
    epoch: usize,
    cursor: usize,
    epoch_loss_sum: f64,
    epoch_loss_steps: u64,
}

impl Trainer {
    pub fn new(model: PolypSes<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.config().encoder.input_size != config.image_size {
            return Err(Error::Config(format!(
                "image_size {:?} differs from the model input {:?}",
                config.image_size,
                model.config().encoder.input_size
            )));
        }
        let optim = AdamW::new(model.store(), config.adamw());
        Ok(Self {
            config,
            model,
            optim,
            epoch: 0,
            cursor: 0,
            epoch_loss_sum: 0.0,
            epoch_loss_steps: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &PolypSes<f32> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut PolypSes<f32> {
        &mut self.model
    }

    pub fn into_model(self) -> PolypSes<f32> {
        self.model
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps(&self) -> u64 {
        self.optim.steps()
    }

    pub fn lr(&self) -> f64 {
        self.config.lr_at(self.epoch)
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs || self.config.max_steps.is_some_and(|m| self.steps() >= m)
    }

    /// Weighted sum of the per-map losses on one batch, recorded on `tape`.
    fn batch_loss(
        &mut self,
        tape: &mut Tape<f32>,
        batch: &[&SegSample],
    ) -> Result<(Var, Bindings)> {
        let size = self.config.image_size;
        let inputs = batch
            .iter()
            .map(|s| s.input(size)?.reshape(&[3, size.0, size.1]))
            .collect::<Result<Vec<_>>>()?;
        let x = tape.constant(Tensor::stack(&inputs)?);
        let (out, bindings) = self.model.forward(tape, x, Mode::Train)?;
        let maps = out.supervised_maps();
        let weights: Vec<f64> = if maps.len() == 1 {
            vec![1.0]
        } else {
            self.config.supervision_weights.to_vec()
        };
        let inv_b = 1.0 / batch.len() as f64;
        let mut terms = Vec::new();
        for (&map, &w) in maps.iter().zip(&weights) {
            if w == 0.0 {
                continue;
            }
            for (b, s) in batch.iter().enumerate() {
                let (h, wd) = s.size();
                let m = tape.narrow(map, 0, b, 1)?;
                let m = if tape.shape(m)[2..] == [h, wd] {
                    m
                } else {
                    tape.resize_bilinear(m, h, wd)?
                };
                let gt = s.mask.clone().reshape(&[1, 1, h, wd])?;
                let l = weighted_bce_dice(tape, m, &gt, &self.config.loss)?;
                terms.push(tape.scale(l, (w * inv_b) as f32));
            }
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        Ok((total, bindings))
    }

    /// One optimizer step on the next batch of the current epoch.
    pub fn step(&mut self, data: &[SegSample]) -> Result<StepReport> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let order = epoch_order(self.config.seed, self.epoch, data.len());
        let end = (self.cursor + self.config.batch_size).min(data.len());
        let batch: Vec<&SegSample> = order[self.cursor..end].iter().map(|&i| &data[i]).collect();
        let lr = self.lr();

        let mut tape = Tape::new();
        let (loss, bindings) = self.batch_loss(&mut tape, &batch)?;
        let value = f64::from(tape.value(loss).data()[0]);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss is {value} at step {} (epoch {})",
                self.steps() + 1,
                self.epoch + 1
            )));
        }
        tape.backward(loss)?;
        self.model.store_mut().zero_grads();
        self.model.store_mut().collect_grads(&tape, &bindings);
        self.optim.step(self.model.store_mut(), lr)?;

        let epoch = self.epoch;
        self.epoch_loss_sum += value;
        self.epoch_loss_steps += 1;
        self.cursor = end;
        let epoch_done = self.cursor >= data.len();
        if epoch_done {
            self.cursor = 0;
            self.epoch += 1;
        }
        Ok(StepReport {
            step: self.steps(),
            epoch,
            loss: value,
            lr,
            epoch_done,
        })
    }

    /// Eval-mode metrics on `data` with the running epoch loss, closing the
    /// loss accumulator.
    fn close_epoch(&mut self, data: &[SegSample], epoch: usize, lr: f64) -> Result<EpochRecord> {
        let tag = self.model.config().ablation.tag();
        let report = evaluate_samples(&mut self.model, data, self.config.threshold, "train", &tag)?;
        let loss = self.epoch_loss_sum / self.epoch_loss_steps.max(1) as f64;
        self.epoch_loss_sum = 0.0;
        self.epoch_loss_steps = 0;
        Ok(EpochRecord {
            epoch: epoch + 1,
            loss,
            mdice: report.mdice,
            miou: report.miou,
            mae: report.mae,
            lr,
        })
    }

    /// Runs until `epochs` or `max_steps`. `on_epoch` sees every record
    /// as it is produced (a `max_steps` stop mid-epoch closes that epoch).
    pub fn fit(
        &mut self,
        data: &[SegSample],
        mut on_epoch: impl FnMut(&EpochRecord, &Trainer) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let mut history = Vec::new();
        while !self.finished() {
            let r = self.step(data)?;
            if r.epoch_done || self.finished() {
                let rec = self.close_epoch(data, r.epoch, r.lr)?;
                on_epoch(&rec, self)?;
                history.push(rec);
            }
        }
        Ok(history)
    }

    /// Parameters, buffers, optimizer moments, counters and both configs.
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = self.model.to_archive()?;
        self.optim.append_to(self.model.store(), &mut a)?;
        a.push(META_TRAIN_CONFIG, json_to_tensor(&self.config)?)?;
        a.push(META_EPOCH, u64_tensor(self.epoch as u64))?;
        a.push(META_STEP, u64_tensor(self.optim.steps()))?;
        a.push(META_CURSOR, u64_tensor(self.cursor as u64))?;
        a.push(META_LOSS_SUM, u64_tensor(self.epoch_loss_sum.to_bits()))?;
        a.push(META_LOSS_STEPS, u64_tensor(self.epoch_loss_steps))?;
        Ok(a)
    }

    /// Resumes from [`Trainer::to_archive`] output.
    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let model = PolypSes::from_archive(a)?;
        let t = a.get(META_TRAIN_CONFIG).ok_or_else(|| {
            Error::Checkpoint(format!(
                "{META_TRAIN_CONFIG} missing; not a training checkpoint"
            ))
        })?;
        let config: TrainConfig = json_from_tensor(t)?;
        let mut tr = Self::new(model, config)
            .map_err(|e| Error::Checkpoint(format!("stored training config: {e}")))?;
        tr.optim = AdamW::load(
            tr.model.store(),
            tr.config.adamw(),
            u64_from(a, META_STEP)?,
            a,
        )?;
        tr.epoch = u64_from(a, META_EPOCH)? as usize;
        tr.cursor = u64_from(a, META_CURSOR)? as usize;
        tr.epoch_loss_sum = f64::from_bits(u64_from(a, META_LOSS_SUM)?);
        tr.epoch_loss_steps = u64_from(a, META_LOSS_STEPS)?;
        Ok(tr)
    }
}

//! Joint optimisation with AdamW, evaluation metrics and checkpoints.
//!
//! The batch schedule is a pure function of the seed and the step counter:
//! epoch `e` visits the examples in an order shuffled by the substream
//! `(seed, e)`, and step `s` draws its masks from `(seed, s)`. A run resumed
//! from a checkpoint therefore repeats an uninterrupted run exactly.

mod checkpoint;
mod metrics;
mod optim;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use metrics::{
    compute_auc, embed_all, evaluate, macro_auc, modality_gap, predict, ClassCount, EvalReport, Prediction,
};
pub use optim::{adamw_step, grad_norm, OptimState};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{AlifuseParams, Network};
use crate::objectives::{
    classification_loss, image_recon_loss_batch, itc_loss, text_recon_loss_batch, total_loss, Lambdas, LossBreakdown,
    LossParts,
};
use crate::tensor::{GradientTape, RngStream, Tensor};

/// Substream tag for the per-epoch shuffle.
pub const SHUFFLE_STREAM: u64 = 0x5348_5546;
/// Substream tag for the per-step masks.
pub const MASK_STREAM: u64 = 0x4d41_534b;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub seed: u64,
    pub lambdas: Lambdas,
    /// Evaluate every this many steps; 0 disables periodic evaluation.
    pub eval_every: u64,
    /// Rescale gradients to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    /// Record elapsed milliseconds in the metrics log. Off by default so
    /// logs of identical runs are byte-identical.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            lr: 1e-3,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 0.01,
            steps: 200,
            seed: 0,
            lambdas: Lambdas::default(),
            eval_every: 50,
            grad_clip: None,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    /// Batch size 24 and learning rate 2e-5.
    pub fn full_scale() -> Self {
        TrainConfig { batch_size: 24, lr: 2e-5, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("lr {} must be a finite non-negative number", self.lr));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas {:?} outside [0, 1)", self.betas));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return bad("eps must be positive and weight_decay non-negative".into());
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub l_cl: f64,
    pub l_res_image: f64,
    pub l_res_text: f64,
    pub l_cls: f64,
    pub l_total: f64,
    pub lr: f64,
    pub wall_ms: Option<f64>,
}

impl StepLog {
    fn new(step: u64, b: &LossBreakdown, lr: f64, wall_ms: Option<f64>) -> Self {
        StepLog {
            step,
            l_cl: b.l_cl,
            l_res_image: b.l_res_image,
            l_res_text: b.l_res_text,
            l_cls: b.l_cls,
            l_total: b.l_total,
            lr,
            wall_ms,
        }
    }
}

/// Forward pass, losses and gradients of one batch.
pub struct BatchResult {
    pub breakdown: LossBreakdown,
    pub grads: Vec<Tensor>,
}

/// Losses and parameter gradients of `batch`, masks drawn from `rng`.
pub fn batch_gradients(
    params: &AlifuseParams,
    batch: &[&Example],
    lambdas: Lambdas,
    rng: &RngStream,
) -> Result<BatchResult> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut tape = GradientTape::new();
    let net = Network::bind(params, &mut tape);
    let (total, breakdown) = batch_loss(&mut tape, &net, batch, lambdas, rng)?;
    let grads = tape.backward(total)?;
    let grads = params
        .tensors()
        .iter()
        .zip(net.bound().vars())
        .map(|(t, &v)| match grads.get(v) {
            Some(g) => g.clone().reshape(t.shape().to_vec()),
            None => Ok(Tensor::zeros(t.shape())),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchResult { breakdown, grads })
}

/// Records the weighted total loss of `batch` on `tape`.
pub fn batch_loss(
    tape: &mut GradientTape,
    net: &Network<'_>,
    batch: &[&Example],
    lambdas: Lambdas,
    rng: &RngStream,
) -> Result<(crate::tensor::Var, LossBreakdown)> {
    let mut outs = Vec::with_capacity(batch.len());
    for (j, ex) in batch.iter().enumerate() {
        let mut sample_rng = rng.derive(j as u64);
        outs.push(net.forward_training_pass(tape, &ex.image, &ex.text, &mut sample_rng)?);
    }
    let zi: Vec<_> = outs.iter().map(|o| o.z_image_cls).collect();
    let zt: Vec<_> = outs.iter().map(|o| o.z_text_cls).collect();
    let zi = tape.concat_rows(&zi)?;
    let zt = tape.concat_rows(&zt)?;
    let cl = itc_loss(tape, zi, zt, net.log_tau())?;

    let preds: Vec<_> = outs.iter().map(|o| o.recon_image).collect();
    let targets: Vec<&Tensor> = batch.iter().map(|e| &e.image.patches).collect();
    let rows: Vec<Vec<usize>> = outs.iter().map(|o| o.image_loss_rows.clone()).collect();
    let res_image = image_recon_loss_batch(tape, &preds, &targets, &rows)?;

    let logits: Vec<_> = outs.iter().map(|o| o.recon_text_logits).collect();
    let tokens: Vec<_> = batch.iter().map(|e| &e.text).collect();
    let rows: Vec<Vec<usize>> = outs.iter().map(|o| o.text_loss_rows.clone()).collect();
    let res_text = text_recon_loss_batch(tape, &logits, &tokens, &rows)?;

    let class_logits: Vec<_> = outs.iter().map(|o| o.class_logits).collect();
    let class_logits = tape.concat_rows(&class_logits)?;
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let cls = classification_loss(tape, class_logits, &labels)?;

    total_loss(tape, LossParts { cl, res_image, res_text, cls }, lambdas)
}

/// Parameters, optimizer state and the run configuration.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub params: AlifuseParams,
    pub optim: OptimState,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(params: AlifuseParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optim = OptimState::new(&params);
        Ok(Trainer { params, optim, config })
    }

    /// Continues from saved state.
    pub fn resume(params: AlifuseParams, optim: OptimState, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if !optim.matches(&params) {
            return Err(Error::Compatibility("optimizer state does not match the parameters".into()));
        }
        Ok(Trainer { params, optim, config })
    }

    /// Completed optimizer steps.
    pub fn step_count(&self) -> u64 {
        self.optim.t
    }

    pub fn batches_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.config.batch_size) as u64
    }

    /// Example indices of step `step` (0-based); the last batch of an epoch
    /// may be short.
    pub fn batch_indices(&self, n: usize, step: u64) -> Vec<usize> {
        let per_epoch = self.batches_per_epoch(n);
        let epoch = step / per_epoch;
        let within = (step % per_epoch) as usize;
        let mut order: Vec<usize> = (0..n).collect();
        RngStream::new(self.config.seed).derive(SHUFFLE_STREAM).derive(epoch).shuffle(&mut order);
        let bs = self.config.batch_size;
        order[within * bs..((within + 1) * bs).min(n)].to_vec()
    }

    /// Runs the next step. On error nothing is changed.
    pub fn step(&mut self, data: &[Example]) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::Contract("training needs at least one example".into()));
        }
        let start = Instant::now();
        let step = self.optim.t;
        let batch: Vec<&Example> = self.batch_indices(data.len(), step).into_iter().map(|i| &data[i]).collect();
        let rng = RngStream::new(self.config.seed).derive(MASK_STREAM).derive(step);
        let BatchResult { breakdown, grads } = batch_gradients(&self.params, &batch, self.config.lambdas, &rng)?;
        adamw_step(&mut self.params, &grads, &mut self.optim, &self.config)?;
        let wall = self.config.log_wall_time.then(|| start.elapsed().as_secs_f64() * 1e3);
        Ok(StepLog::new(self.optim.t, &breakdown, self.config.lr, wall))
    }

    /// Steps until the end of the current epoch.
    pub fn train_epoch(&mut self, data: &[Example]) -> Result<Vec<StepLog>> {
        if data.is_empty() {
            return Err(Error::Contract("training needs at least one example".into()));
        }
        let per_epoch = self.batches_per_epoch(data.len());
        let remaining = per_epoch - self.optim.t % per_epoch;
        (0..remaining).map(|_| self.step(data)).collect()
    }

    /// Steps until `config.steps` have been completed; `on_step` sees each
    /// log line as it is produced.
    pub fn train(
        &mut self,
        data: &[Example],
        mut on_step: impl FnMut(&Self, &StepLog) -> Result<()>,
    ) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while self.optim.t < self.config.steps {
            let log = self.step(data)?;
            on_step(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

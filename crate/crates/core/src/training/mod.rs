//! Optimisation: AdamW with clipping, warmup/decay schedule, the flow and
//! generator training loops with per-epoch model selection, per-act
//! threshold calibration, and checkpoint files.

mod checkpoint;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::NUM_ACTS;
use crate::dualflow::{FlowInput, FlowModel};
use crate::error::{DfmedError, Result};
use crate::generator::GenModel;
use crate::metrics::{EvalReport, Prf};
use crate::numerics::{Graph, ParamStore, Real};
use crate::pipeline::{evaluate_flow, evaluate_generation, GenExample};

pub use checkpoint::{
    load_flow, load_generator, read_checkpoint, save_flow, save_generator, write_checkpoint, Manifest, TensorEntry,
    CHECKPOINT_VERSION,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Dialogues per step for the flow model, examples per step for the generator.
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Overrides for the flow loss weights.
    pub lambda_e: Option<f64>,
    pub lambda_a: Option<f64>,
    /// Cap on validation examples decoded per epoch (generator only).
    pub valid_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            batch_size: 8,
            warmup_steps: 100,
            epochs: 10,
            weight_decay: 0.01,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 7,
            lambda_e: None,
            lambda_a: None,
            valid_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(DfmedError::Invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(DfmedError::Invalid("batch size must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.clip_norm <= 0.0 {
            return Err(DfmedError::Invalid("weight decay must be >= 0 and clip norm > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(DfmedError::Invalid("betas must lie in [0,1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base` over `warmup` steps, then linear decay to
/// 0 at `total`.
pub fn lr_schedule(step: usize, base: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    base * (total.saturating_sub(step)) as f64 / (total - warmup) as f64
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(params: &mut ParamStore<F>, max_norm: f64) -> f64 {
    let ids: Vec<_> = params.ids().collect();
    let sq: f64 = ids
        .iter()
        .filter_map(|&id| params.get(id).grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|v| v.f64() * v.f64())
        .sum();
    let norm = sq.sqrt();
    if norm.is_finite() && norm > max_norm {
        let s = F::of(max_norm / norm);
        for id in ids {
            if let Some(g) = params.get_mut(id).grad.as_mut() {
                g.iter_mut().for_each(|v| *v = *v * s);
            }
        }
    }
    norm
}

/// AdamW with bias correction and decoupled weight decay. Parameters with
/// no gradient this step are treated as having a zero gradient.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub t: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub applied: bool,
}

impl AdamW {
    pub fn new<F: Real>(cfg: &TrainConfig, params: &ParamStore<F>) -> Self {
        let sizes: Vec<usize> = params.iter().map(|(_, _, t)| t.numel()).collect();
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            clip_norm: Some(cfg.clip_norm),
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    /// A non-finite gradient norm skips the update.
    pub fn step<F: Real>(&mut self, params: &mut ParamStore<F>, lr: f64) -> StepInfo {
        let grad_norm = match self.clip_norm {
            Some(c) => clip_grad_norm(params, c),
            None => clip_grad_norm(params, f64::INFINITY),
        };
        if !grad_norm.is_finite() {
            log::warn!("skipping optimizer step: gradient norm {grad_norm}");
            params.zero_grad();
            return StepInfo { grad_norm, applied: false };
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let t = params.get_mut(id);
            let grad = t.grad.take();
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for i in 0..t.data.len() {
                let gi = grad.as_ref().map_or(0.0, |g| g[i].f64());
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let th = t.data[i].f64();
                t.data[i] = F::of(th - lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * th));
            }
        }
        StepInfo { grad_norm, applied: true }
    }
}

/// `0.05, 0.10, ..., 0.95`.
pub fn default_threshold_grid() -> Vec<f64> {
    (1..=19).map(|i| (i * 5) as f64 / 100.0).collect()
}

/// Per act, the grid threshold maximising that act's F1 (predict when
/// `p >= τ`); ties go to the lower threshold. Acts with no positive example
/// keep 0.5.
pub fn calibrate_act_thresholds(probs: &[[f64; NUM_ACTS]], gold: &[[bool; NUM_ACTS]], grid: &[f64]) -> [f64; NUM_ACTS] {
    assert_eq!(probs.len(), gold.len(), "calibrate: unaligned inputs");
    let mut out = [0.5; NUM_ACTS];
    for j in 0..NUM_ACTS {
        let positives = gold.iter().filter(|g| g[j]).count();
        if positives == 0 {
            log::warn!("act {j} has no positive validation example; keeping threshold 0.5");
            continue;
        }
        let mut best = (f64::NEG_INFINITY, 0.5);
        for &tau in grid {
            let (mut tp, mut np) = (0, 0);
            for (p, g) in probs.iter().zip(gold) {
                if p[j] >= tau {
                    np += 1;
                    tp += g[j] as usize;
                }
            }
            let f1 = Prf::from_counts(tp, np, positives).f1;
            if f1 > best.0 {
                best = (f1, tau);
            }
        }
        out[j] = best.1;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss per example.
    pub train_loss: f64,
    /// Selection score on the validation set, if any.
    pub valid_score: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_report: Option<EvalReport>,
    pub steps: usize,
}

fn check_finite(v: f64, step: usize, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(DfmedError::Diverged { step, detail: format!("{what} = {v}") })
    }
}

/// Trains the flow model, keeping the epoch with the best validation
/// `(Weighted-F1 + R@k) / 2` (the last epoch when `valid` is empty).
pub fn train_flow<F: Real>(
    model: &mut FlowModel<F>,
    train: &[FlowInput],
    valid: &[FlowInput],
    cfg: &TrainConfig,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if let Some(l) = cfg.lambda_e {
        model.cfg.lambda_e = l;
    }
    if let Some(l) = cfg.lambda_a {
        model.cfg.lambda_a = l;
    }
    model.cfg.validate()?;
    if train.is_empty() {
        return Err(DfmedError::Invalid("empty flow training set".into()));
    }
    let mut opt = AdamW::new(cfg, &model.params);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0;
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore<F>, EvalReport)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut n_examples) = (0.0, 0usize);
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let n_batch: usize = batch.iter().map(|&i| train[i].targets.len()).sum();
            if n_batch == 0 {
                continue;
            }
            let scale = 1.0 / n_batch as f64;
            for &i in batch {
                let grads = {
                    let mut g = Graph::new(&model.params);
                    let l = model.flow_loss(&mut g, &train[i], &mut rng)?;
                    let v = g.scalar(l.total).f64();
                    check_finite(v, step, &format!("flow loss on {}", train[i].dialogue_id))?;
                    loss_sum += v;
                    let s = g.scale(l.total, scale);
                    g.backward(s)?
                };
                grads.accumulate_into(&mut model.params);
            }
            n_examples += n_batch;
            step += 1;
            lr = lr_schedule(step, cfg.lr, cfg.warmup_steps, total);
            opt.step(&mut model.params, lr);
        }
        let train_loss = loss_sum / n_examples.max(1) as f64;
        let (valid_score, report) = if valid.is_empty() {
            (None, None)
        } else {
            let r = evaluate_flow(model, valid)?.report;
            (r.flow_score(), Some(r))
        };
        log::info!(
            "flow epoch {epoch}: loss {train_loss:.4} valid {}",
            valid_score.map_or("n/a".into(), |s| format!("{s:.2}"))
        );
        logs.push(EpochLog { epoch, train_loss, valid_score, lr });
        let score = valid_score.unwrap_or(f64::NEG_INFINITY);
        if valid.is_empty() || best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch, model.params.clone(), report.unwrap_or_default()));
        }
    }
    let (_, best_epoch, params, report) = best.expect("at least one epoch");
    model.params = params;
    Ok(TrainSummary { epochs: logs, best_epoch, best_report: (!valid.is_empty()).then_some(report), steps: step })
}

/// Mean per-token NLL over `examples` (teacher forcing, example-averaged).
pub fn generation_loss_mean<F: Real>(model: &GenModel<F>, examples: &[GenExample]) -> Result<f64> {
    let mut sum = 0.0;
    for ex in examples {
        let mut g = Graph::new(&model.params);
        let l = model.generation_loss(&mut g, &ex.history, &ex.guidance, &ex.target)?;
        sum += g.scalar(l).f64();
    }
    Ok(sum / examples.len().max(1) as f64)
}

/// Trains the generator with teacher forcing on precomputed guidance,
/// keeping the epoch with the best validation BLEU-4 (the last epoch when
/// `valid` is empty). Validation examples carry inference-time guidance.
pub fn train_generator<F: Real>(
    model: &mut GenModel<F>,
    train: &[GenExample],
    valid: &[GenExample],
    cfg: &TrainConfig,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(DfmedError::Invalid("empty generator training set".into()));
    }
    let valid = match cfg.valid_limit {
        Some(n) => &valid[..n.min(valid.len())],
        None => valid,
    };
    let mut opt = AdamW::new(cfg, &model.params);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0;
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore<F>, EvalReport)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let ex = &train[i];
                let grads = {
                    let mut g = Graph::new(&model.params);
                    let l = model.generation_loss(&mut g, &ex.history, &ex.guidance, &ex.target)?;
                    let v = g.scalar(l).f64();
                    check_finite(v, step, &format!("generation loss on {} t={}", ex.id, ex.t))?;
                    loss_sum += v;
                    let s = g.scale(l, scale);
                    g.backward(s)?
                };
                grads.accumulate_into(&mut model.params);
            }
            step += 1;
            lr = lr_schedule(step, cfg.lr, cfg.warmup_steps, total);
            opt.step(&mut model.params, lr);
        }
        let train_loss = loss_sum / train.len() as f64;
        let (valid_score, report) = if valid.is_empty() {
            (None, None)
        } else {
            let r = evaluate_generation(model, valid, None)?.report;
            (r.bleu4, Some(r))
        };
        log::info!(
            "generator epoch {epoch}: loss {train_loss:.4} valid B-4 {}",
            valid_score.map_or("n/a".into(), |s| format!("{s:.2}"))
        );
        logs.push(EpochLog { epoch, train_loss, valid_score, lr });
        let score = valid_score.unwrap_or(f64::NEG_INFINITY);
        if valid.is_empty() || best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch, model.params.clone(), report.unwrap_or_default()));
        }
    }
    let (_, best_epoch, params, report) = best.expect("at least one epoch");
    model.params = params;
    Ok(TrainSummary { epochs: logs, best_epoch, best_report: (!valid.is_empty()).then_some(report), steps: step })
}

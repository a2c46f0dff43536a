//! AdamW, the cosine schedule, the epoch loop with best-Dice retention, and
//! dataset evaluation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, stack_batch, Sample};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossWeights};
use crate::mask::Mask;
use crate::metrics::{ImageMetrics, MetricReport, DEFAULT_THRESHOLD};
use crate::model::ModelState;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossWeights,
    /// Validate every `eval_every` epochs and always after the last one.
    pub eval_every: usize,
    /// Global gradient-norm ceiling; off when `None`.
    pub grad_clip: Option<f64>,
    pub augment: bool,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            lr_min: 1e-6,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 50,
            batch_size: 8,
            seed: 0,
            loss: LossWeights::default(),
            eval_every: 1,
            grad_clip: None,
            augment: true,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "lr0",
        "lr_min",
        "weight_decay",
        "beta1",
        "beta2",
        "adam_eps",
        "epochs",
        "batch_size",
        "seed",
        "eval_every",
        "grad_clip",
        "augment",
        "threshold",
        "loss.dice",
        "loss.bce",
        "loss.edge",
        "loss.epsilon",
        "loss.edge_radius",
        "loss.edge_weight",
    ];

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr0) {
            return Err(Error::Config(format!(
                "need 0 < lr_min <= lr0, got lr_min = {}, lr0 = {}",
                self.lr_min, self.lr0
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("weight_decay must be >= 0 and adam_eps > 0".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        self.loss.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        match key {
            "lr0" => self.lr0 = num(key, value)?,
            "lr_min" => self.lr_min = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "grad_clip" => {
                self.grad_clip = match value {
                    "none" | "off" => None,
                    v => Some(num(key, v)?),
                }
            }
            "augment" => self.augment = num(key, value)?,
            "threshold" => self.threshold = num(key, value)?,
            "loss.dice" => self.loss.dice = num(key, value)?,
            "loss.bce" => self.loss.bce = num(key, value)?,
            "loss.edge" => self.loss.edge = num(key, value)?,
            "loss.epsilon" => self.loss.epsilon = num(key, value)?,
            "loss.edge_radius" => self.loss.edge_radius = num(key, value)?,
            "loss.edge_weight" => self.loss.edge_weight = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown training key `{key}`"))),
        }
        Ok(())
    }
}

/// `lr_min + (lr0 - lr_min) (1 + cos(pi t / T)) / 2`, clamped to `t <= T`.
pub fn cosine_lr(epoch: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = epoch.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * t).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moment estimates for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One AdamW update at step `t >= 1`. The decay `p -= lr * wd * p` is applied
/// to the pre-step value, separately from the adaptive gradient step.
pub fn adamw_step(param: &mut [f64], grad: &[f64], moments: &mut Moments, t: u64, h: &AdamHyper) -> Result<()> {
    if t == 0 {
        return Err(Error::invalid("adamw_step", "step counter starts at 1"));
    }
    if param.len() != grad.len() || moments.m.len() != param.len() || moments.v.len() != param.len() {
        return Err(Error::shape("adamw_step", &[param.len()], &[grad.len()]));
    }
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        let m = h.beta1 * moments.m[i] + (1.0 - h.beta1) * g;
        let v = h.beta2 * moments.v[i] + (1.0 - h.beta2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        let step = (m / bc1) / ((v / bc2).sqrt() + h.eps);
        param[i] -= h.lr * h.weight_decay * param[i] + h.lr * step;
    }
    Ok(())
}

/// AdamW moments for every parameter of a model plus the shared step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>, h: &AdamHyper) -> Result<()> {
        self.t += 1;
        for (key, p) in params.iter_mut() {
            let Some(g) = grads.get(key) else { continue };
            let n = p.len();
            let mom = self.moments.entry(key.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            adamw_step(p.data_mut(), g.data(), mom, self.t, h)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValStats {
    pub dsc: f64,
    pub iou: f64,
    /// Mean over images with a defined distance; NaN if none.
    pub hd95: f64,
    pub precision: f64,
}

impl ValStats {
    pub fn of(report: &MetricReport) -> Self {
        ValStats {
            dsc: report.dsc().mean,
            iou: report.iou().mean,
            hd95: report.hd95().mean,
            precision: report.precision().mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub dice: f64,
    pub bce: f64,
    pub edge: f64,
    pub val: Option<ValStats>,
    pub wall_secs: f64,
}

impl EpochRecord {
    /// One `key=value` line. Wall time is appended only when asked for, since
    /// it is the one field that differs between identical runs.
    pub fn to_line(&self, with_time: bool) -> String {
        let mut s = format!(
            "epoch={} lr={} loss={} dice={} bce={} edge={}",
            self.epoch, self.lr, self.loss, self.dice, self.bce, self.edge
        );
        if let Some(v) = &self.val {
            let _ = write!(s, " val_dsc={} val_iou={} val_hd95={} val_pre={}", v.dsc, v.iou, v.hd95, v.precision);
        }
        if with_time {
            let _ = write!(s, " wall_s={:.3}", self.wall_secs);
        }
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_text(&self, with_time: bool) -> String {
        self.epochs.iter().map(|r| r.to_line(with_time) + "\n").collect()
    }

    pub fn best_val_dsc(&self) -> Option<f64> {
        self.epochs
            .iter()
            .filter_map(|r| r.val.map(|v| v.dsc))
            .fold(None, |acc, d| Some(acc.map_or(d, |a: f64| a.max(d))))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Highest-validation-DSC state (earliest on ties); the final state when
    /// there is no validation set.
    pub best: ModelState,
    pub best_epoch: Option<usize>,
    pub last: ModelState,
    pub log: TrainLog,
    /// Diagnostic when training stopped early on a non-finite loss or gradient.
    pub halted: Option<String>,
}

/// Runs `cfg.epochs` epochs from `init`. `on_epoch` sees each record as it is appended.
pub fn train(
    init: &ModelState,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.epochs > 0 && train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let train_ids: std::collections::HashSet<&str> = train_set.iter().map(|s| s.id.as_str()).collect();
    if let Some(s) = val_set.iter().find(|s| train_ids.contains(s.id.as_str())) {
        return Err(Error::Data(format!("`{}` is in both the training and validation sets", s.id)));
    }

    let mut state = init.clone();
    state.training = true;
    let mut opt = AdamW::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, ModelState)> = None;
    let mut halted = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    'epochs: for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let hyper = AdamHyper {
            lr: cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.lr_min),
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        };
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = if cfg.augment {
                chunk.iter().map(|&i| augment(&train_set[i], &mut rng)).collect::<Result<_>>()?
            } else {
                chunk.iter().map(|&i| train_set[i].clone()).collect()
            };
            let refs: Vec<&Sample> = batch.iter().collect();
            let (x, y) = stack_batch(&refs)?;

            let mut g = Graph::new();
            let xv = g.constant(x);
            let bound = state.bind(&mut g, xv, true)?;
            let parts = total_loss(&mut g, bound.probs, &y, &cfg.loss)?;
            let vals = [parts.total, parts.dice, parts.bce, parts.edge].map(|v| g.value(v).item());
            if !vals[0].is_finite() {
                halted = Some(format!("non-finite loss {} in epoch {}", vals[0], epoch + 1));
                break 'epochs;
            }
            g.backward(parts.total)?;
            let mut grads = BTreeMap::new();
            for (key, &v) in &bound.params {
                if let Some(gr) = g.grad(v) {
                    if !gr.is_finite() {
                        halted = Some(format!("non-finite gradient for `{key}` in epoch {}", epoch + 1));
                        break 'epochs;
                    }
                    grads.insert(key.clone(), gr.clone());
                }
            }
            if let Some(limit) = cfg.grad_clip {
                clip_global_norm(&mut grads, limit);
            }
            opt.step(&mut state.params, &grads, &hyper)?;
            state.apply_norm_updates(&bound.norm_updates)?;
            let n = chunk.len() as f64;
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v * n;
            }
            seen += chunk.len();
        }

        let last_epoch = epoch + 1 == cfg.epochs;
        let val = if !val_set.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || last_epoch) {
            let report = evaluate(&state, val_set, cfg.threshold)?;
            let stats = ValStats::of(&report);
            if best.as_ref().is_none_or(|(d, _, _)| stats.dsc > *d) {
                let mut snapshot = state.clone();
                snapshot.training = false;
                best = Some((stats.dsc, epoch + 1, snapshot));
            }
            Some(stats)
        } else {
            None
        };
        let n = seen as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr: hyper.lr,
            loss: sums[0] / n,
            dice: sums[1] / n,
            bce: sums[2] / n,
            edge: sums[3] / n,
            val,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.epochs.push(record);
    }

    state.training = false;
    let (best, best_epoch) = match best {
        Some((_, e, s)) => (s, Some(e)),
        None if halted.is_some() => (init.clone(), None),
        None => (state.clone(), None),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: state,
        log,
        halted,
    })
}

fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, limit: f64) {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > limit {
        let scale = limit / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
}

/// Anything that maps a `(B, 3, H, W)` batch to `(B, 1, H, W)` probabilities.
pub trait Predictor {
    fn predict(&self, x: &Tensor) -> Result<Tensor>;
}

impl Predictor for ModelState {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        ModelState::predict(self, x)
    }
}

pub const EVAL_BATCH: usize = 8;

/// Thresholded masks for each sample, in order.
pub fn predict_masks(model: &impl Predictor, samples: &[Sample], threshold: f64) -> Result<Vec<Mask>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, _) = stack_batch(&refs)?;
        let probs = model.predict(&x)?;
        let (h, w) = (chunk[0].height(), chunk[0].width());
        if probs.len() != chunk.len() * h * w {
            return Err(Error::shape("predict_masks", probs.shape(), &[chunk.len(), 1, h, w]));
        }
        for plane in probs.data().chunks_exact(h * w) {
            out.push(Mask::binarize(plane, h, w, threshold)?);
        }
    }
    Ok(out)
}

/// Eval-mode forward, binarize at `threshold`, per-image metrics.
pub fn evaluate(model: &impl Predictor, samples: &[Sample], threshold: f64) -> Result<MetricReport> {
    let masks = predict_masks(model, samples, threshold)?;
    let mut report = MetricReport::default();
    for (s, p) in samples.iter().zip(&masks) {
        report.push(ImageMetrics::compute(s.id.clone(), p, &s.mask)?);
    }
    Ok(report)
}

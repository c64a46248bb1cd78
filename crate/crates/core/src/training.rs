//! Objectives, VA-predictor pretraining and the teacher-forced training loop.
//!
//! `L_CC` is the natural-log cross-entropy summed over non-PAD target
//! positions. `L_VA` is the mean of `|Δvalence|` and `|Δarousal|` between
//! the predictor's outputs for the target sequence and for the model's
//! prediction. In hard mode the prediction is the per-row argmax and the term
//! is reported without a gradient; in soft mode the predictor sees the
//! expected token histogram and the term is differentiable.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{histogram_mask, token_histogram, EmoModel, ImageInput, ModelError, VaPredictor, VaPredictorConfig};
use crate::nn::{gradcheck, AdamConfig, GradcheckOptions, GradcheckReport, Graph, NnError, ParamStore, Tensor, Var};
use crate::pairing::VaPoint;
use crate::tokenizer::{TokenId, Vocabulary, PAD};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("VA loss mode needs a pretrained VA predictor")]
    PredictorMissing,
    #[error("VA pretraining needs at least 2 labelled pieces for training, got {0}")]
    CatalogTooSmall(usize),
    #[error("missing training artifacts: {0}")]
    MissingArtifacts(String),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training I/O: {0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VaLossMode {
    #[default]
    Hard,
    Soft,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_va: f64,
    pub lambda_cc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_va: 1e-5, lambda_cc: 1.0 }
    }
}

impl LossWeights {
    pub fn new(lambda_va: f64, lambda_cc: f64) -> Result<Self, TrainError> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(lambda_va) || !ok(lambda_cc) || (lambda_va == 0.0 && lambda_cc == 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "loss weights must be non-negative and not both zero, got ({lambda_va}, {lambda_cc})"
            )));
        }
        Ok(Self { lambda_va, lambda_cc })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds weight initialization, per-epoch shuffling and VA pretraining.
    pub seed: u64,
    pub va_loss_mode: VaLossMode,
    pub lambda_va: f64,
    pub lambda_cc: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let a = AdamConfig::default();
        Self {
            lr: a.lr,
            epochs: 15,
            batch_size: 1,
            seed: 0,
            va_loss_mode: VaLossMode::Hard,
            lambda_va: w.lambda_va,
            lambda_cc: w.lambda_cc,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("epochs and batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(TrainError::InvalidConfig("Adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        self.weights().map(|_| ())
    }

    pub fn weights(&self) -> Result<LossWeights, TrainError> {
        LossWeights::new(self.lambda_va, self.lambda_cc)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// `N x C` one-hot rows.
pub fn one_hot(ids: &[TokenId], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[ids.len(), classes]);
    for (i, &id) in ids.iter().enumerate() {
        t.data_mut()[i * classes + id as usize] = 1.0;
    }
    t
}

/// `-Σ_i Σ_j y_ij ln p_ij` over rows whose target is not PAD.
pub fn cce_loss(probs: &Tensor, targets: &Tensor) -> Result<f64, TrainError> {
    if probs.shape() != targets.shape() || probs.shape().len() != 2 {
        return Err(TrainError::ShapeMismatch(format!("probs {:?} vs targets {:?}", probs.shape(), targets.shape())));
    }
    let mut loss = 0.0;
    for i in 0..probs.rows() {
        let (p, y) = (probs.row(i), targets.row(i));
        if y[PAD as usize] == 1.0 {
            continue;
        }
        for j in 0..p.len() {
            if y[j] != 0.0 {
                loss -= y[j] * p[j].ln();
            }
        }
    }
    Ok(loss)
}

/// Graph form of [`cce_loss`] on raw logits.
pub fn cce_var(g: &mut Graph, logits: Var, targets: &[TokenId]) -> Result<Var, TrainError> {
    let lp = g.log_softmax_rows(logits)?;
    let t: Vec<Option<usize>> = targets.iter().map(|&t| (t != PAD).then_some(t as usize)).collect();
    Ok(g.nll(lp, &t)?)
}

pub fn total_loss(cce: f64, va: f64, w: &LossWeights) -> f64 {
    w.lambda_va * va + w.lambda_cc * cce
}

fn va_gap(a: &VaPoint, b: &VaPoint) -> f64 {
    ((a.valence - b.valence).abs() + (a.arousal - b.arousal).abs()) / 2.0
}

/// `L_VA` between the target tokens and a `N x C` probability tensor.
pub fn va_loss(
    true_tokens: &[TokenId],
    pred_probs: &Tensor,
    predictor: Option<&VaPredictor>,
    mode: VaLossMode,
) -> Result<f64, TrainError> {
    if mode == VaLossMode::Off {
        return Ok(0.0);
    }
    let predictor = predictor.ok_or(TrainError::PredictorMissing)?;
    if pred_probs.shape().len() != 2 || pred_probs.cols() != predictor.vocab_size {
        return Err(TrainError::ShapeMismatch(format!(
            "probabilities {:?} for vocabulary of {}",
            pred_probs.shape(),
            predictor.vocab_size
        )));
    }
    let truth = predictor.predict_va(true_tokens)?;
    match mode {
        VaLossMode::Hard => {
            let ids: Vec<TokenId> = pred_probs.argmax_rows().into_iter().map(|i| i as TokenId).collect();
            Ok(va_gap(&truth, &predictor.predict_va(&ids)?))
        }
        _ => {
            let mut g = Graph::new();
            let p = g.constant(pred_probs.clone());
            let v = va_loss_var(&mut g, p, &truth, predictor)?;
            Ok(g.scalar(v))
        }
    }
}

/// Soft-mode `L_VA` as a graph node; gradients flow into `probs` only.
pub fn va_loss_var(g: &mut Graph, probs: Var, truth: &VaPoint, predictor: &VaPredictor) -> Result<Var, TrainError> {
    let mask = histogram_mask(predictor.vocab_size);
    let h = g.expected_histogram(probs, &mask)?;
    let y = predictor.predict_var(g, h)?;
    let t = g.constant(Tensor::row_vector(vec![truth.valence, truth.arousal]));
    let d = g.sub(y, t)?;
    let a = g.abs(d);
    Ok(g.mean_all(a))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub id: String,
    /// Full sequence `BOS ... [EOS]`; inputs are `tokens[..n-1]`, targets `tokens[1..]`.
    pub tokens: Vec<TokenId>,
    pub image: ImageInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_cc: f64,
    pub l_va: f64,
    pub l_total: f64,
}

pub fn write_loss_csv<W: Write>(out: W, curve: &[EpochLoss]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| TrainError::Io(e.to_string());
    w.write_record(["epoch", "l_cc", "l_va", "l_total"]).map_err(io)?;
    for e in curve {
        w.write_record([e.epoch.to_string(), e.l_cc.to_string(), e.l_va.to_string(), e.l_total.to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| TrainError::Io(e.to_string()))
}

/// Per-example losses, with gradients accumulated into the model's buffers
/// scaled by `grad_scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub l_cc: f64,
    pub l_va: f64,
    pub l_total: f64,
}

pub fn example_step(
    model: &mut EmoModel,
    ex: &TrainingExample,
    predictor: Option<&VaPredictor>,
    cfg: &TrainConfig,
    grad_scale: f64,
) -> Result<StepLosses, TrainError> {
    let w = cfg.weights()?;
    let n = ex.tokens.len();
    if n < 2 {
        return Err(TrainError::ShapeMismatch(format!("example `{}` has {n} tokens; at least 2 needed", ex.id)));
    }
    let (prefix, targets) = (&ex.tokens[..n - 1], &ex.tokens[1..]);
    let mut g = Graph::new();
    let logits = model.logits_var(&mut g, &ex.image, prefix)?;
    let cc = cce_var(&mut g, logits, targets)?;
    let mut total = g.scale(cc, w.lambda_cc);
    let l_va = match cfg.va_loss_mode {
        VaLossMode::Off => 0.0,
        VaLossMode::Soft if w.lambda_va > 0.0 => {
            let predictor = predictor.ok_or(TrainError::PredictorMissing)?;
            let truth = predictor.predict_va(targets)?;
            let probs = g.softmax_rows(logits, None)?;
            let va = va_loss_var(&mut g, probs, &truth, predictor)?;
            let weighted = g.scale(va, w.lambda_va);
            total = g.add(total, weighted)?;
            g.scalar(va)
        }
        mode => {
            let probs = g.value(logits).softmax(1)?;
            va_loss(targets, &probs, predictor, mode)?
        }
    };
    g.backward(total)?;
    g.accumulate_param_grads(&mut model.store, grad_scale);
    let l_cc = g.scalar(cc);
    Ok(StepLosses { l_cc, l_va, l_total: total_loss(l_cc, l_va, &w) })
}

/// Finite-difference check of `λ_cc · L_CC` (plus `λ_va · L_VA` in soft form
/// when a predictor is given) against every model block.
pub fn model_gradcheck(
    model: &EmoModel,
    ex: &TrainingExample,
    predictor: Option<&VaPredictor>,
    weights: &LossWeights,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport, TrainError> {
    let n = ex.tokens.len();
    if n < 2 {
        return Err(TrainError::ShapeMismatch(format!("example `{}` has {n} tokens; at least 2 needed", ex.id)));
    }
    model.check_ids(&ex.tokens)?;
    let (prefix, targets) = (&ex.tokens[..n - 1], &ex.tokens[1..]);
    let truth = predictor.map(|p| p.predict_va(targets)).transpose()?;
    let nn = |e: TrainError| match e {
        TrainError::Model(ModelError::Nn(e)) => e,
        other => NnError::ShapeMismatch(other.to_string()),
    };
    let objective = |s: &ParamStore, g: &mut Graph| -> Result<Var, NnError> {
        let logits = model.logits_var_in(s, g, &ex.image, prefix).map_err(|e| nn(e.into()))?;
        let cc = cce_var(g, logits, targets).map_err(nn)?;
        let mut total = g.scale(cc, weights.lambda_cc);
        if let (Some(p), Some(t)) = (predictor, truth.as_ref()) {
            let probs = g.softmax_rows(logits, None)?;
            let va = va_loss_var(g, probs, t, p).map_err(nn)?;
            let va = g.scale(va, weights.lambda_va);
            total = g.add(total, va)?;
        }
        Ok(total)
    };
    let mut store = model.store.clone();
    Ok(gradcheck(&mut store, objective, opts)?)
}

const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;

/// Teacher-forced training with per-epoch shuffling under `cfg.seed`.
/// `on_epoch` runs after every epoch (e.g. to write a checkpoint).
pub fn fit<F>(
    model: &mut EmoModel,
    data: &[TrainingExample],
    predictor: Option<&VaPredictor>,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochLoss>, TrainError>
where
    F: FnMut(&EpochLoss, &EmoModel) -> Result<(), TrainError>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::MissingArtifacts("no training pairs".into()));
    }
    if cfg.va_loss_mode != VaLossMode::Off {
        let p = predictor.ok_or(TrainError::PredictorMissing)?;
        if p.vocab_hash != model.vocab().hash() {
            return Err(TrainError::VocabMismatch(format!(
                "model vocabulary {} but predictor trained on {}",
                model.vocab().hash(),
                p.vocab_hash
            )));
        }
    }
    for ex in data {
        model.check_ids(&ex.tokens)?;
    }
    let adam = cfg.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    model.store.zero_grads();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut cc, mut va, mut tot) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = example_step(model, &data[i], predictor, cfg, scale)?;
                cc += s.l_cc;
                va += s.l_va;
                tot += s.l_total;
            }
            model.store.adam_step_all(&adam);
        }
        let n = data.len() as f64;
        let row = EpochLoss { epoch, l_cc: cc / n, l_va: va / n, l_total: tot / n };
        curve.push(row);
        on_epoch(&row, model)?;
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Fraction of the labelled pieces held out for evaluation.
    pub holdout_fraction: f64,
    pub hidden: [usize; 2],
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 200, lr: 1e-2, holdout_fraction: 0.2, hidden: VaPredictorConfig::default().hidden }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainReport {
    pub train_count: usize,
    pub heldout_count: usize,
    pub initial_train_mae: f64,
    pub final_train_mae: f64,
    pub heldout_mae: Option<f64>,
}

/// Mean absolute error of clamped predictions over both VA components.
pub fn predictor_mae(p: &VaPredictor, samples: &[(Vec<TokenId>, VaPoint)]) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    for (ids, va) in samples {
        sum += va_gap(&p.predict_va(ids)?, va);
    }
    Ok(sum / samples.len().max(1) as f64)
}

const HOLDOUT_SALT: u64 = 0x484f_4c44_4f55_5421;

/// Full-batch Adam on the mean absolute error of `(valence, arousal)`.
pub fn pretrain_va_predictor(
    vocab: &Vocabulary,
    samples: &[(Vec<TokenId>, VaPoint)],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(VaPredictor, PretrainReport), TrainError> {
    if cfg.epochs == 0 || !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(TrainError::InvalidConfig("pretraining needs epochs >= 1, lr > 0, holdout in [0, 1)".into()));
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ HOLDOUT_SALT));
    let mut held = (samples.len() as f64 * cfg.holdout_fraction).floor() as usize;
    held = held.min(samples.len().saturating_sub(2));
    let (held_idx, train_idx) = idx.split_at(held);
    if train_idx.len() < 2 {
        return Err(TrainError::CatalogTooSmall(train_idx.len()));
    }
    let train: Vec<_> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let heldout: Vec<_> = held_idx.iter().map(|&i| samples[i].clone()).collect();

    let v = vocab.size();
    let mut p = VaPredictor::new(vocab, VaPredictorConfig { hidden: cfg.hidden }, seed)?;
    let x = Tensor::new(vec![train.len(), v], train.iter().flat_map(|(ids, _)| token_histogram(ids, v)).collect())?;
    let y = Tensor::new(vec![train.len(), 2], train.iter().flat_map(|(_, va)| [va.valence, va.arousal]).collect())?;
    let initial = predictor_mae(&p, &train)?;
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (pred, stats) = p.forward_train(&mut g, xv)?;
        let yv = g.constant(y.clone());
        let d = g.sub(pred, yv)?;
        let a = g.abs(d);
        let loss = g.mean_all(a);
        g.backward(loss)?;
        g.accumulate_param_grads(&mut p.store, 1.0);
        p.store.adam_step_all(&adam);
        p.update_running(&stats, train.len());
    }
    let report = PretrainReport {
        train_count: train.len(),
        heldout_count: heldout.len(),
        initial_train_mae: initial,
        final_train_mae: predictor_mae(&p, &train)?,
        heldout_mae: if heldout.is_empty() { None } else { Some(predictor_mae(&p, &heldout)?) },
    };
    Ok((p, report))
}

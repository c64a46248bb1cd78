//! Sequential architecture sweeps over encoder depth, decoder depth and the
//! VA loss toggle. Every variant starts from the same base seed, so a row
//! does not depend on where it sits in the grid.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::metrics::{markdown_table, SummaryRow};
use crate::model::{EmoModel, ImageInput, VaPredictor};
use crate::run::{summarize, RunError};
use crate::training::{fit, EpochLoss, TrainingExample, VaLossMode};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub va_loss: bool,
}

impl Variant {
    pub fn name(&self) -> String {
        let va = if self.va_loss { "+VA" } else { "" };
        format!("enc{}_dec{}{va}", self.encoder_blocks, self.decoder_blocks)
    }
}

/// The configured grid in encoder, decoder, VA order.
pub fn grid(cfg: &RunConfig) -> Vec<Variant> {
    let a = &cfg.ablation;
    let mut out = Vec::new();
    for &e in &a.encoder_blocks {
        for &d in &a.decoder_blocks {
            for &va in &a.va_loss {
                out.push(Variant { encoder_blocks: e, decoder_blocks: d, va_loss: va });
            }
        }
    }
    out
}

/// The base config specialised to one variant.
pub fn variant_config(base: &RunConfig, v: &Variant) -> RunConfig {
    let mut cfg = base.clone();
    cfg.model.encoder_blocks = v.encoder_blocks;
    cfg.model.decoder_blocks = v.decoder_blocks;
    cfg.train.va_loss_mode = if v.va_loss { base.ablation.va_mode } else { VaLossMode::Off };
    if let Some(e) = base.ablation.epochs {
        cfg.train.epochs = e;
    }
    cfg
}

#[derive(Debug, Clone)]
pub struct VariantOutcome {
    pub variant: Variant,
    pub row: SummaryRow,
    pub curve: Vec<EpochLoss>,
    pub error: Option<String>,
}

impl VariantOutcome {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

pub fn run_variant(
    base: &RunConfig,
    v: &Variant,
    data: &[TrainingExample],
    eval: &[(String, ImageInput)],
    predictor: Option<&VaPredictor>,
) -> Result<(SummaryRow, Vec<EpochLoss>), RunError> {
    let cfg = variant_config(base, v);
    cfg.validate()?;
    let mut model = EmoModel::new(cfg.model.clone(), cfg.train.seed)?;
    let predictor = predictor.filter(|_| cfg.train.va_loss_mode != VaLossMode::Off);
    let curve = fit(&mut model, data, predictor, &cfg.train, |_, _| Ok(()))?;
    let (row, _) = summarize(&v.name(), &model, eval, &cfg)?;
    Ok((row, curve))
}

/// Runs every variant in order; a failing variant becomes a row with an
/// error note and the sweep carries on.
pub fn run_ablation<F>(
    base: &RunConfig,
    variants: &[Variant],
    data: &[TrainingExample],
    eval: &[(String, ImageInput)],
    predictor: Option<&VaPredictor>,
    mut on_variant: F,
) -> Vec<VariantOutcome>
where
    F: FnMut(&VariantOutcome),
{
    variants
        .iter()
        .map(|v| {
            let outcome = match run_variant(base, v, data, eval, predictor) {
                Ok((row, curve)) => VariantOutcome { variant: v.clone(), row, curve, error: None },
                Err(e) => {
                    let msg = format!("{}: {e}", e.kind());
                    VariantOutcome {
                        variant: v.clone(),
                        row: SummaryRow {
                            model: v.name(),
                            music_quality_loss: None,
                            metrics: None,
                            note: Some(format!("failed: {msg}")),
                        },
                        curve: Vec::new(),
                        error: Some(msg),
                    }
                }
            };
            on_variant(&outcome);
            outcome
        })
        .collect()
}

pub fn summary_markdown(outcomes: &[VariantOutcome]) -> String {
    let rows: Vec<SummaryRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    let mut s = markdown_table(&rows);
    let notes: Vec<String> =
        rows.iter().filter_map(|r| r.note.as_ref().map(|n| format!("- {}: {n}", r.model))).collect();
    if !notes.is_empty() {
        s.push('\n');
        s.push_str(&notes.join("\n"));
        s.push('\n');
    }
    s
}

/// CSV columns `model,music_quality_loss,polyphony_rate,pitch_entropy,groove_consistency,status,final_l_cc`.
pub fn write_summary_csv<W: Write>(out: W, outcomes: &[VariantOutcome]) -> Result<(), RunError> {
    let io = |e: csv::Error| RunError::Io(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "model",
        "music_quality_loss",
        "polyphony_rate",
        "pitch_entropy",
        "groove_consistency",
        "status",
        "final_l_cc",
    ])
    .map_err(io)?;
    let f = |v: Option<f64>| v.map_or("NA".to_string(), |x| x.to_string());
    for o in outcomes {
        let m = o.row.metrics;
        w.write_record([
            o.row.model.clone(),
            f(o.row.music_quality_loss),
            f(m.map(|m| m.polyphony_rate)),
            f(m.map(|m| m.pitch_entropy)),
            f(m.map(|m| m.groove_consistency)),
            if o.succeeded() { "ok".into() } else { "failed".into() },
            f(o.curve.last().map(|c| c.l_cc)),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| RunError::Io(e.to_string()))
}

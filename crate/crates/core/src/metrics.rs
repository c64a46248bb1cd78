//! Symbolic music-quality metrics: pitch entropy, polyphony rate and groove
//! consistency, plus their aggregate deviation from a reference triple.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::{to_piano_roll, MidiPiece, PianoRoll, DEFAULT_STEPS_PER_BEAT};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("piece has no notes")]
    EmptyPiece,
    #[error("piano roll has no time steps")]
    EmptyRoll,
    #[error("piece spans {measures} full measure(s); groove consistency needs at least 2")]
    TooShort { measures: usize },
    #[error("steps_per_measure must be at least 1")]
    BadMeasure,
    #[error("metrics output: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub polyphony_rate: f64,
    pub pitch_entropy: f64,
    pub groove_consistency: f64,
}

impl MetricTriple {
    pub const fn new(polyphony_rate: f64, pitch_entropy: f64, groove_consistency: f64) -> Self {
        Self { polyphony_rate, pitch_entropy, groove_consistency }
    }
}

/// Ground-truth triple used as the default reference for the quality loss.
pub const REFERENCE_TRIPLE: MetricTriple = MetricTriple::new(0.5303, 3.9863, 0.9922);

/// Which steps count in the polyphony-rate denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolyphonyDenominator {
    /// Steps where at least one note sounds.
    #[default]
    SoundingSteps,
    /// Every step of the roll, silent ones included.
    AllSteps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrooveDistance {
    /// Hamming distance divided by the measure length; result in [0, 1].
    #[default]
    Normalized,
    /// Plain Hamming distance.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub steps_per_beat: u32,
    pub steps_per_measure: usize,
    pub polyphony_denominator: PolyphonyDenominator,
    pub groove_distance: GrooveDistance,
    pub reference: MetricTriple,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            steps_per_beat: DEFAULT_STEPS_PER_BEAT,
            steps_per_measure: 16,
            polyphony_denominator: PolyphonyDenominator::default(),
            groove_distance: GrooveDistance::default(),
            reference: REFERENCE_TRIPLE,
        }
    }
}

/// Shannon entropy in bits of the note-count distribution over pitches.
pub fn pitch_entropy(piece: &MidiPiece) -> Result<f64, MetricsError> {
    let notes = piece.notes();
    if notes.is_empty() {
        return Err(MetricsError::EmptyPiece);
    }
    let mut counts = [0usize; 128];
    for n in notes {
        counts[usize::from(n.pitch)] += 1;
    }
    let total = notes.len() as f64;
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum::<f64>()
        + 0.0)
}

/// Fraction of steps with two or more sounding pitches.
pub fn polyphony_rate(roll: &PianoRoll, denominator: PolyphonyDenominator) -> Result<f64, MetricsError> {
    if roll.steps() == 0 {
        return Err(MetricsError::EmptyRoll);
    }
    let (mut multi, mut sounding) = (0usize, 0usize);
    for t in 0..roll.steps() {
        match roll.column_count(t) {
            0 => {}
            1 => sounding += 1,
            _ => {
                sounding += 1;
                multi += 1;
            }
        }
    }
    let denom = match denominator {
        PolyphonyDenominator::SoundingSteps => sounding,
        PolyphonyDenominator::AllSteps => roll.steps(),
    };
    Ok(if denom == 0 { 0.0 } else { multi as f64 / denom as f64 })
}

/// One minus the mean distance between onset patterns of consecutive full
/// measures. The trailing partial measure is ignored.
pub fn groove_consistency(
    roll: &PianoRoll,
    steps_per_measure: usize,
    distance: GrooveDistance,
) -> Result<f64, MetricsError> {
    if steps_per_measure == 0 {
        return Err(MetricsError::BadMeasure);
    }
    let measures = roll.steps() / steps_per_measure;
    if measures < 2 {
        return Err(MetricsError::TooShort { measures });
    }
    let onsets: Vec<bool> = (0..measures * steps_per_measure).map(|t| roll.has_onset(t)).collect();
    let patterns: Vec<&[bool]> = onsets.chunks(steps_per_measure).collect();
    let total: usize = patterns
        .windows(2)
        .map(|w| w[0].iter().zip(w[1]).filter(|(a, b)| a != b).count())
        .sum();
    let scale = match distance {
        GrooveDistance::Normalized => steps_per_measure as f64,
        GrooveDistance::Raw => 1.0,
    };
    Ok(1.0 - total as f64 / scale / (measures - 1) as f64)
}

/// Mean absolute deviation across the three metrics.
pub fn music_quality_loss(m: &MetricTriple, reference: &MetricTriple) -> f64 {
    ((m.polyphony_rate - reference.polyphony_rate).abs()
        + (m.pitch_entropy - reference.pitch_entropy).abs()
        + (m.groove_consistency - reference.groove_consistency).abs())
        / 3.0
}

/// Mean of per-piece losses (not the loss of the mean triple).
pub fn mean_quality_loss(triples: &[MetricTriple], reference: &MetricTriple) -> Option<f64> {
    if triples.is_empty() {
        return None;
    }
    Some(triples.iter().map(|m| music_quality_loss(m, reference)).sum::<f64>() / triples.len() as f64)
}

pub fn evaluate(piece: &MidiPiece, cfg: &MetricsConfig) -> Result<MetricTriple, MetricsError> {
    let entropy = pitch_entropy(piece)?;
    let roll = to_piano_roll(piece, cfg.steps_per_beat);
    Ok(MetricTriple {
        polyphony_rate: polyphony_rate(&roll, cfg.polyphony_denominator)?,
        pitch_entropy: entropy,
        groove_consistency: groove_consistency(&roll, cfg.steps_per_measure, cfg.groove_distance)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PieceReport {
    pub path: String,
    pub result: Result<(MetricTriple, f64), MetricsError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusReport {
    pub rows: Vec<PieceReport>,
    /// Column means over pieces where every metric is defined, with the
    /// mean of per-piece losses; `None` if no piece qualified.
    pub mean: Option<(MetricTriple, f64)>,
}

impl CorpusReport {
    pub fn evaluated(&self) -> usize {
        self.rows.iter().filter(|r| r.result.is_ok()).count()
    }
}

/// Scores each piece, keeping input order.
pub fn evaluate_corpus(pieces: &[(String, MidiPiece)], cfg: &MetricsConfig) -> CorpusReport {
    let rows: Vec<PieceReport> = pieces
        .iter()
        .map(|(path, piece)| PieceReport {
            path: path.clone(),
            result: evaluate(piece, cfg).map(|m| (m, music_quality_loss(&m, &cfg.reference))),
        })
        .collect();
    let ok: Vec<(MetricTriple, f64)> = rows.iter().filter_map(|r| r.result.clone().ok()).collect();
    let mean = (!ok.is_empty()).then(|| {
        let n = ok.len() as f64;
        let sum = |f: fn(&MetricTriple) -> f64| ok.iter().map(|(m, _)| f(m)).sum::<f64>() / n;
        (
            MetricTriple {
                polyphony_rate: sum(|m| m.polyphony_rate),
                pitch_entropy: sum(|m| m.pitch_entropy),
                groove_consistency: sum(|m| m.groove_consistency),
            },
            ok.iter().map(|(_, l)| l).sum::<f64>() / n,
        )
    });
    CorpusReport { rows, mean }
}

/// CSV with one row per piece and a final `mean` row. Undefined metrics are
/// written as `NA`.
pub fn write_corpus_csv<W: Write>(out: W, report: &CorpusReport) -> Result<(), MetricsError> {
    let io = |e: csv::Error| MetricsError::Io(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["path", "polyphony_rate", "pitch_entropy", "groove_consistency", "music_quality_loss"])
        .map_err(io)?;
    let fmt = |r: Option<&(MetricTriple, f64)>| -> [String; 4] {
        match r {
            Some((m, l)) => [
                m.polyphony_rate.to_string(),
                m.pitch_entropy.to_string(),
                m.groove_consistency.to_string(),
                l.to_string(),
            ],
            None => std::array::from_fn(|_| "NA".to_string()),
        }
    };
    for row in &report.rows {
        let [a, b, c, d] = fmt(row.result.as_ref().ok());
        w.write_record([row.path.as_str(), &a, &b, &c, &d]).map_err(io)?;
    }
    let [a, b, c, d] = fmt(report.mean.as_ref());
    w.write_record(["mean", &a, &b, &c, &d]).map_err(io)?;
    w.flush().map_err(|e| MetricsError::Io(e.to_string()))
}

/// One row of a summary table in `model | loss | polyphony | entropy | groove` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub music_quality_loss: Option<f64>,
    pub metrics: Option<MetricTriple>,
    pub note: Option<String>,
}

pub fn markdown_table(rows: &[SummaryRow]) -> String {
    let mut s = String::from(
        "| Model | Music_Quality_Loss | Polyphony Rate | Pitch Entropy | Groove Consistency |\n\
         |---|---|---|---|---|\n",
    );
    let f = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.4}"));
    for r in rows {
        let m = r.metrics;
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            r.model,
            f(r.music_quality_loss),
            f(m.map(|m| m.polyphony_rate)),
            f(m.map(|m| m.pitch_entropy)),
            f(m.map(|m| m.groove_consistency)),
        ));
    }
    s
}

//! Glue between a [`RunConfig`] and the modules: catalog loading, pairing,
//! tokenization, predictor resolution, and generation plus scoring.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::metrics::{evaluate_corpus, CorpusReport, MetricsError, SummaryRow};
use crate::midi::{parse_midi, MidiError, MidiPiece};
use crate::model::{load_image_input, EmoModel, ImageInput, ModelError, VaPredictor};
use crate::pairing::{
    load_catalog, pair_datasets, split, EmotionDictionary, ItemKind, PairManifest, PairingError, SplitTag,
    TaggedItem, VaPoint,
};
use crate::tokenizer::{decode, encode, TokenId, TokenRecord, TokenizerError, Vocabulary};
use crate::training::{pretrain_va_predictor, PretrainReport, TrainError, TrainingExample, VaLossMode};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pairing(#[from] PairingError),
    #[error("{file}: {source}")]
    Midi { file: String, source: MidiError },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("I/O: {0}")]
    Io(String),
}

impl RunError {
    /// Name of the innermost error variant, for diagnostics.
    pub fn kind(&self) -> String {
        fn head(debug: String) -> String {
            debug.split(|c: char| !c.is_alphanumeric() && c != '_').next().unwrap_or_default().to_string()
        }
        match self {
            RunError::Config(e) => format!("ConfigError::{}", head(format!("{e:?}"))),
            RunError::Pairing(e) => format!("PairingError::{}", head(format!("{e:?}"))),
            RunError::Midi { source, .. } => format!("MidiError::{}", head(format!("{source:?}"))),
            RunError::Tokenizer(e) => format!("TokenizerError::{}", head(format!("{e:?}"))),
            RunError::Model(e) => format!("ModelError::{}", head(format!("{e:?}"))),
            RunError::Train(TrainError::Model(e)) => format!("ModelError::{}", head(format!("{e:?}"))),
            RunError::Train(e) => format!("TrainError::{}", head(format!("{e:?}"))),
            RunError::Metrics(e) => format!("MetricsError::{}", head(format!("{e:?}"))),
            RunError::MissingInput(_) => "MissingInput".into(),
            RunError::Io(_) => "Io".into(),
        }
    }

    /// Whether the failure stems from invalid user input rather than a
    /// runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            RunError::Config(ConfigError::Parse { .. } | ConfigError::Invalid(_))
                | RunError::Pairing(
                    PairingError::CountMismatch { .. }
                        | PairingError::BadRow { .. }
                        | PairingError::DuplicateId(_)
                        | PairingError::DegenerateRange(..)
                        | PairingError::OutOfRange { .. }
                        | PairingError::EmptyCatalog(_)
                )
                | RunError::Model(ModelError::InvalidConfig(_))
                | RunError::Train(TrainError::InvalidConfig(_))
                | RunError::Train(TrainError::Model(ModelError::InvalidConfig(_)))
                | RunError::MissingInput(_)
        )
    }
}

/// Catalogs plus the pair manifest they produce.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub midis: Vec<TaggedItem>,
    pub images: Vec<TaggedItem>,
    pub manifest: PairManifest,
}

impl Dataset {
    pub fn midi(&self, id: &str) -> Option<&TaggedItem> {
        self.midis.iter().find(|m| m.id == id)
    }

    pub fn image(&self, id: &str) -> Option<&TaggedItem> {
        self.images.iter().find(|m| m.id == id)
    }

    /// Training pairs: the train split if the manifest is split, else all.
    pub fn training_pairs(&self) -> Vec<(&TaggedItem, &TaggedItem)> {
        let split = self.manifest.pairs.iter().any(|p| p.split.is_some());
        self.manifest
            .pairs
            .iter()
            .filter(|p| !split || p.split == Some(SplitTag::Train))
            .filter_map(|p| Some((self.midi(&p.midi_id)?, self.image(&p.image_id)?)))
            .collect()
    }

    /// Distinct images to generate from: the test split if any, else every
    /// paired image; at most `limit`, in manifest order.
    pub fn eval_images(&self, limit: usize) -> Vec<&TaggedItem> {
        let test: Vec<_> = self.manifest.by_split(SplitTag::Test).collect();
        let pool = if test.is_empty() { self.manifest.pairs.iter().collect() } else { test };
        let mut seen = std::collections::BTreeSet::new();
        pool.into_iter()
            .filter(|p| seen.insert(p.image_id.clone()))
            .filter_map(|p| self.image(&p.image_id))
            .take(limit)
            .collect()
    }
}

pub fn load_catalogs(cfg: &RunConfig) -> Result<(Vec<TaggedItem>, Vec<TaggedItem>), RunError> {
    let d = &cfg.data;
    let dict = d.dictionary.as_deref().map(EmotionDictionary::load).transpose()?;
    let need = |p: &Option<std::path::PathBuf>, what: &str| {
        p.clone().ok_or_else(|| RunError::MissingInput(format!("data.{what} is not set")))
    };
    let midis = load_catalog(&need(&d.midi_catalog, "midi_catalog")?, ItemKind::Midi, dict.as_ref(), cfg.source_range())?;
    let images =
        load_catalog(&need(&d.image_catalog, "image_catalog")?, ItemKind::Image, dict.as_ref(), cfg.source_range())?;
    Ok((midis, images))
}

/// Loads the catalogs, then the configured manifest or a fresh pairing
/// (split under `train.seed` when `pairing.split` is set).
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, RunError> {
    let (midis, images) = load_catalogs(cfg)?;
    let manifest = match &cfg.data.manifest {
        Some(p) => PairManifest::load(p)?,
        None => {
            let m = pair_datasets(&midis, &images)?;
            match cfg.pairing.split {
                Some(counts) => split(&m, counts, cfg.train.seed)?,
                None => m,
            }
        }
    };
    Ok(Dataset { midis, images, manifest })
}

pub fn read_piece(path: &Path) -> Result<MidiPiece, RunError> {
    let file = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| RunError::Io(format!("{file}: {e}")))?;
    parse_midi(&bytes).map_err(|source| RunError::Midi { file, source })
}

pub fn vocabulary(cfg: &RunConfig) -> Result<Vocabulary, RunError> {
    Ok(Vocabulary::new(cfg.model.vocab)?)
}

pub fn tokenize_item(item: &TaggedItem, vocab: &Vocabulary, cfg: &RunConfig) -> Result<Vec<TokenId>, RunError> {
    let piece = read_piece(&item.payload_path)?;
    Ok(encode(&piece, vocab, cfg.tokenizer.steps_per_beat, cfg.model.max_len).ids().to_vec())
}

pub fn token_records(midis: &[TaggedItem], cfg: &RunConfig) -> Result<Vec<TokenRecord>, RunError> {
    let vocab = vocabulary(cfg)?;
    midis
        .iter()
        .map(|m| Ok(TokenRecord { id: m.id.clone(), tokens: tokenize_item(m, &vocab, cfg)?, vocab_hash: vocab.hash() }))
        .collect()
}

/// `(tokens, VA label)` for every MIDI in the catalog.
pub fn labelled_sequences(midis: &[TaggedItem], cfg: &RunConfig) -> Result<Vec<(Vec<TokenId>, VaPoint)>, RunError> {
    let vocab = vocabulary(cfg)?;
    midis.iter().map(|m| Ok((tokenize_item(m, &vocab, cfg)?, m.va))).collect()
}

pub fn training_examples(ds: &Dataset, cfg: &RunConfig) -> Result<Vec<TrainingExample>, RunError> {
    let vocab = vocabulary(cfg)?;
    let mut cache: BTreeMap<String, ImageInput> = BTreeMap::new();
    let mut out = Vec::new();
    for (midi, img) in ds.training_pairs() {
        if !cache.contains_key(&img.id) {
            cache.insert(img.id.clone(), load_image_input(&img.payload_path, cfg.model.image_size)?);
        }
        out.push(TrainingExample {
            id: midi.id.clone(),
            tokens: tokenize_item(midi, &vocab, cfg)?,
            image: cache[&img.id].clone(),
        });
    }
    if out.is_empty() {
        return Err(RunError::MissingInput("no training pairs resolved from the manifest".into()));
    }
    Ok(out)
}

pub fn eval_inputs(ds: &Dataset, cfg: &RunConfig, limit: usize) -> Result<Vec<(String, ImageInput)>, RunError> {
    ds.eval_images(limit)
        .into_iter()
        .map(|i| Ok((i.id.clone(), load_image_input(&i.payload_path, cfg.model.image_size)?)))
        .collect()
}

/// Pretrains a predictor on the labelled MIDI catalog.
pub fn pretrain_from_catalog(
    midis: &[TaggedItem],
    cfg: &RunConfig,
) -> Result<(VaPredictor, PretrainReport), RunError> {
    let vocab = vocabulary(cfg)?;
    let samples = labelled_sequences(midis, cfg)?;
    Ok(pretrain_va_predictor(&vocab, &samples, &cfg.va_predictor.pretrain(), cfg.train.seed)?)
}

/// The predictor a run needs: `None` when `mode` is off, the configured
/// weights when present, else one pretrained on the catalog.
pub fn resolve_predictor(
    midis: &[TaggedItem],
    cfg: &RunConfig,
    mode: VaLossMode,
) -> Result<Option<VaPredictor>, RunError> {
    if mode == VaLossMode::Off {
        return Ok(None);
    }
    match &cfg.va_predictor.weights {
        Some(p) => Ok(Some(VaPredictor::load(p, &vocabulary(cfg)?)?)),
        None => Ok(Some(pretrain_from_catalog(midis, cfg)?.0)),
    }
}

/// Generates one piece per image with `generate` settings and seed.
pub fn generate_pieces(
    model: &EmoModel,
    images: &[(String, ImageInput)],
    cfg: &RunConfig,
) -> Result<Vec<(String, MidiPiece)>, RunError> {
    images
        .iter()
        .map(|(id, img)| {
            let seq = model.generate(img, cfg.generate.max_len, cfg.generate.strategy(), cfg.train.seed)?;
            Ok((id.clone(), decode(seq.ids(), model.vocab(), cfg.tokenizer.steps_per_beat)))
        })
        .collect()
}

/// Table row for a trained model scored on pieces generated from `images`.
pub fn summarize(
    name: &str,
    model: &EmoModel,
    images: &[(String, ImageInput)],
    cfg: &RunConfig,
) -> Result<(SummaryRow, CorpusReport), RunError> {
    let pieces = generate_pieces(model, images, cfg)?;
    let report = evaluate_corpus(&pieces, &cfg.metrics);
    let note = match report.evaluated() {
        n if n == pieces.len() => None,
        n => Some(format!("{n} of {} generated pieces had defined metrics", pieces.len())),
    };
    let row = SummaryRow {
        model: name.to_string(),
        music_quality_loss: report.mean.map(|m| m.1),
        metrics: report.mean.map(|m| m.0),
        note,
    };
    Ok((row, report))
}

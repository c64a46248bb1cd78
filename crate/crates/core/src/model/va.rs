use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::nn::{BatchNorm, Checkpoint, Graph, Linear, NnError, ParamStore, Tensor, Var};
use crate::pairing::{VaPoint, VA_MAX, VA_MIN};
use crate::tokenizer::{TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaPredictorConfig {
    pub hidden: [usize; 2],
}

impl Default for VaPredictorConfig {
    fn default() -> Self {
        Self { hidden: [64, 32] }
    }
}

/// Columns of the histogram that count; special tokens are excluded.
pub fn histogram_mask(vocab_size: usize) -> Vec<bool> {
    (0..vocab_size).map(|i| !Vocabulary::is_special(i as TokenId)).collect()
}

/// L1-normalized count of non-special tokens; zeros when there are none.
pub fn token_histogram(ids: &[TokenId], vocab_size: usize) -> Vec<f64> {
    let mut h = vec![0.0; vocab_size];
    for &id in ids {
        if (id as usize) < vocab_size && !Vocabulary::is_special(id) {
            h[id as usize] += 1.0;
        }
    }
    let total: f64 = h.iter().sum();
    if total > 0.0 {
        h.iter_mut().for_each(|v| *v /= total);
    }
    h
}

/// Three fully connected layers: `FC-BN-ReLU`, `FC-BN-ReLU`, linear `FC -> 2`.
#[derive(Debug, Clone)]
pub struct VaPredictor {
    pub config: VaPredictorConfig,
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub store: ParamStore,
    fc: [Linear; 3],
    bn: [BatchNorm; 2],
}

const FORMAT: &str = "vamidi-va-predictor";

impl VaPredictor {
    pub fn new(vocab: &Vocabulary, config: VaPredictorConfig, seed: u64) -> Result<Self, ModelError> {
        if config.hidden.contains(&0) {
            return Err(ModelError::InvalidConfig("VA predictor hidden widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let v = vocab.size();
        let [h1, h2] = config.hidden;
        let fc = [
            Linear::new(&mut store, "fc1", v, h1, &mut rng)?,
            Linear::new(&mut store, "fc2", h1, h2, &mut rng)?,
            Linear::new(&mut store, "fc3", h2, 2, &mut rng)?,
        ];
        let bn = [BatchNorm::new(&mut store, "bn1", h1)?, BatchNorm::new(&mut store, "bn2", h2)?];
        Ok(Self { config, vocab_size: v, vocab_hash: vocab.hash(), store, fc, bn })
    }

    /// Raw `(valence, arousal)` rows for a `B x vocab` batch in train mode.
    /// Returns batch statistics for both norm layers.
    pub fn forward_train(&self, g: &mut Graph, x: Var) -> Result<(Var, [(Vec<f64>, Vec<f64>); 2]), NnError> {
        let h = self.fc[0].forward(g, &self.store, x)?;
        let (h, m1, v1) = self.bn[0].forward_train(g, &self.store, h)?;
        let h = g.relu(h);
        let h = self.fc[1].forward(g, &self.store, h)?;
        let (h, m2, v2) = self.bn[1].forward_train(g, &self.store, h)?;
        let h = g.relu(h);
        Ok((self.fc[2].forward(g, &self.store, h)?, [(m1, v1), (m2, v2)]))
    }

    /// Eval-mode forward. With `frozen`, no gradient reaches the weights.
    pub fn forward_eval(&self, g: &mut Graph, x: Var, frozen: bool) -> Result<Var, NnError> {
        let lin = |g: &mut Graph, i: usize, h: Var| {
            if frozen {
                self.fc[i].forward_frozen(g, &self.store, h)
            } else {
                self.fc[i].forward(g, &self.store, h)
            }
        };
        let h = lin(g, 0, x)?;
        let h = self.bn[0].forward_eval(g, &self.store, h, frozen)?;
        let h = g.relu(h);
        let h = lin(g, 1, h)?;
        let h = self.bn[1].forward_eval(g, &self.store, h, frozen)?;
        let h = g.relu(h);
        lin(g, 2, h)
    }

    /// Clamped eval-mode prediction, graph form (`1 x 2`).
    pub fn predict_var(&self, g: &mut Graph, hist: Var) -> Result<Var, NnError> {
        let y = self.forward_eval(g, hist, true)?;
        Ok(g.clamp(y, VA_MIN, VA_MAX))
    }

    pub fn update_running(&mut self, stats: &[(Vec<f64>, Vec<f64>); 2], batch: usize) {
        for (bn, (m, v)) in self.bn.iter_mut().zip(stats) {
            bn.update_running(m, v, batch);
        }
    }

    pub fn predict_histogram(&self, hist: &[f64]) -> Result<VaPoint, ModelError> {
        if hist.len() != self.vocab_size {
            return Err(ModelError::InvalidConfig(format!(
                "histogram of {} for vocabulary of {}",
                hist.len(),
                self.vocab_size
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::row_vector(hist.to_vec()));
        let y = self.predict_var(&mut g, x)?;
        let v = g.value(y).data();
        Ok(VaPoint::clamped(v[0], v[1]))
    }

    /// Valence/arousal of a token sequence, clamped to `[1, 9]`.
    pub fn predict_va(&self, ids: &[TokenId]) -> Result<VaPoint, ModelError> {
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(ModelError::Tokenizer(crate::tokenizer::TokenizerError::OutOfRange {
                id: bad,
                size: self.vocab_size,
            }));
        }
        self.predict_histogram(&token_histogram(ids, self.vocab_size))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(serde_json::json!({
            "format": FORMAT,
            "config": self.config,
            "vocab_size": self.vocab_size,
            "vocab_hash": self.vocab_hash,
        }));
        c.push_store(&self.store);
        for (i, bn) in self.bn.iter().enumerate() {
            c.push(format!("bn{}.running_mean", i + 1), Tensor::row_vector(bn.running_mean.clone()));
            c.push(format!("bn{}.running_var", i + 1), Tensor::row_vector(bn.running_var.clone()));
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint, vocab: &Vocabulary) -> Result<Self, ModelError> {
        if c.config.get("format").and_then(|f| f.as_str()) != Some(FORMAT) {
            return Err(ModelError::CheckpointCorrupt("not a VA predictor checkpoint".into()));
        }
        let found = c.config.get("vocab_hash").and_then(|h| h.as_str()).unwrap_or_default().to_string();
        if found != vocab.hash() {
            return Err(ModelError::VocabMismatch(format!("expected {}, found {found}", vocab.hash())));
        }
        let config: VaPredictorConfig = serde_json::from_value(c.config["config"].clone())
            .map_err(|e| ModelError::CheckpointCorrupt(format!("predictor config: {e}")))?;
        let mut p = Self::new(vocab, config, 0)?;
        c.restore_store(&mut p.store)?;
        for i in 0..2 {
            let dim = p.bn[i].running_mean.len();
            let mean = c.block(&format!("bn{}.running_mean", i + 1))?;
            let var = c.block(&format!("bn{}.running_var", i + 1))?;
            if mean.len() != dim || var.len() != dim {
                return Err(ModelError::CheckpointCorrupt(format!("bn{} running stats", i + 1)));
            }
            p.bn[i].running_mean = mean.data().to_vec();
            p.bn[i].running_var = var.data().to_vec();
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self, ModelError> {
        if !path.exists() {
            return Err(ModelError::WeightsMissing(path.display().to_string()));
        }
        Self::from_checkpoint(&Checkpoint::load(path)?, vocab)
    }
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, NnError, ParamId, ParamStore, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

/// `y = x W + b`, with `W: in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Result<Self, NnError> {
        let w = store.add_fan_in_uniform(format!("{name}.w"), &[input, output], input, rng)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, output]))?;
        Ok(Self { w, b, input, output })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    /// Same map with the weights held constant.
    pub fn forward_frozen(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let w = g.frozen(store, self.w);
        let b = g.frozen(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub const INIT_STD: f64 = 1.0;

    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, count: usize, dim: usize, rng: &mut R) -> Result<Self, NnError> {
        let table = store.add_normal(format!("{name}.table"), &[count, dim], Self::INIT_STD, rng)?;
        Ok(Self { table, dim })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var, NnError> {
        let t = g.param(store, self.table);
        g.gather(t, ids)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self, NnError> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(&[1, dim], 1.0))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[1, dim]))?;
        Ok(Self { gamma, beta, eps: NORM_EPS })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Batch norm over rows, with running statistics for eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self, NnError> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(&[1, dim], 1.0))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[1, dim]))?;
        Ok(Self { gamma, beta, running_mean: vec![0.0; dim], running_var: vec![1.0; dim], momentum: 0.1, eps: NORM_EPS })
    }

    /// Normalizes by batch statistics; returns them so the caller can fold
    /// them into the running estimates.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
    ) -> Result<(Var, Vec<f64>, Vec<f64>), NnError> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.batch_norm_train(x, gamma, beta, self.eps)
    }

    /// Running estimates use the unbiased batch variance.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64], batch: usize) {
        let m = self.momentum;
        let unbias = batch as f64 / (batch.max(2) - 1) as f64;
        for j in 0..self.running_mean.len() {
            self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * mean[j];
            self.running_var[j] = (1.0 - m) * self.running_var[j] + m * var[j] * unbias;
        }
    }

    pub fn forward_eval(&self, g: &mut Graph, store: &ParamStore, x: Var, frozen: bool) -> Result<Var, NnError> {
        let (gamma, beta) = if frozen {
            (g.frozen(store, self.gamma), g.frozen(store, self.beta))
        } else {
            (g.param(store, self.gamma), g.param(store, self.beta))
        };
        g.batch_norm_eval(x, gamma, beta, &self.running_mean, &self.running_var, self.eps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub head_count: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, head_count: usize) -> Result<Self, NnError> {
        if head_count == 0 || model_dim == 0 || model_dim % head_count != 0 {
            return Err(NnError::InvalidAttention { model_dim, head_count });
        }
        Ok(Self { model_dim, head_count })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.head_count
    }
}

/// Row-major `q x k` mask of allowed attention entries. With `causal`, query
/// `t` sees keys `<= t`; `key_keep` hides individual keys (PAD positions).
pub fn attention_mask(queries: usize, keys: usize, causal: bool, key_keep: Option<&[bool]>) -> Vec<bool> {
    let mut m = vec![true; queries * keys];
    for i in 0..queries {
        for j in 0..keys {
            let hidden = (causal && j > i) || key_keep.is_some_and(|k| !k[j]);
            m[i * keys + j] = !hidden;
        }
    }
    m
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: AttentionConfig, rng: &mut R) -> Result<Self, NnError> {
        let d = cfg.model_dim;
        Ok(Self {
            cfg,
            q: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, rng)?,
            out: Linear::new(store, &format!("{name}.o"), d, d, rng)?,
        })
    }

    /// Scaled dot-product attention per head; `allowed` is a `Tq x Tk` mask.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        key_value: Var,
        allowed: Option<&[bool]>,
    ) -> Result<Var, NnError> {
        let d = self.cfg.model_dim;
        for v in [query, key_value] {
            if g.value(v).cols() != d {
                return Err(NnError::ShapeMismatch(format!(
                    "attention input width {} for model_dim {d}",
                    g.value(v).cols()
                )));
            }
        }
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, key_value)?;
        let v = self.v.forward(g, store, key_value)?;
        let hd = self.cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.head_count);
        for h in 0..self.cfg.head_count {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax_rows(scores, allowed)?;
            heads.push(g.matmul(weights, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        self.out.forward(g, store, cat)
    }
}

/// Position-wise `Linear -> ReLU -> Linear`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Result<Self, NnError> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let h = self.up.forward(g, store, x)?;
        let h = g.relu(h);
        self.down.forward(g, store, h)
    }
}

/// Post-norm self-attention block: `x = LN(x + MHA(x))`, `x = LN(x + FFN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl TransformerBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: AttentionConfig,
        ff_dim: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.model_dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.model_dim, ff_dim, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.model_dim)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, allowed: Option<&[bool]>) -> Result<Var, NnError> {
        let a = self.attn.forward(g, store, x, x, allowed)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, x)?;
        let x = g.add(x, f)?;
        self.norm2.forward(g, store, x)
    }
}

/// 3x3, stride 1, padding 1.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Result<Self, NnError> {
        let w = store.add_fan_in_uniform(format!("{name}.w"), &[cout, cin * 9], cin * 9, rng)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, cout]))?;
        Ok(Self { w, b, in_channels: cin, out_channels: cout })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, b)
    }
}

/// Sinusoidal position table, `len x dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 / rate;
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, dim], data).expect("position table shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_config_divisibility() {
        assert!(AttentionConfig::new(128, 4).is_ok());
        assert_eq!(
            AttentionConfig::new(10, 4).unwrap_err(),
            NnError::InvalidAttention { model_dim: 10, head_count: 4 }
        );
    }

    #[test]
    fn single_position_attention_is_the_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", AttentionConfig::new(8, 2).unwrap(), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 8], (0..8).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap());
        let y = mha.forward(&mut g, &store, x, x, None).unwrap();
        let v = mha.v.forward(&mut g, &store, x).unwrap();
        let expect = mha.out.forward(&mut g, &store, v).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(expect)) < 1e-15);
    }

    #[test]
    fn causal_attention_ignores_future_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let blk = TransformerBlock::new(&mut store, "b", AttentionConfig::new(8, 2).unwrap(), 16, &mut rng).unwrap();
        let base: Vec<f64> = (0..40).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let mut changed = base.clone();
        for v in &mut changed[24..] {
            *v += 3.0;
        }
        let mask = attention_mask(5, 5, true, None);
        let run = |data: Vec<f64>| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![5, 8], data).unwrap());
            let y = blk.forward(&mut g, &store, x, Some(&mask)).unwrap();
            g.value(y).clone()
        };
        let (a, b) = (run(base), run(changed));
        assert_eq!(&a.data()[..24], &b.data()[..24]);
        assert_ne!(&a.data()[24..], &b.data()[24..]);
    }

    #[test]
    fn batch_norm_modes() {
        let mut store = ParamStore::new();
        let mut bn = BatchNorm::new(&mut store, "bn", 3).unwrap();
        bn.eps = 1e-12;
        let x = Tensor::new(vec![4, 3], vec![1.0, 5.0, -2.0, 2.0, 7.0, 0.0, 3.0, 1.0, 4.0, 10.0, 2.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (y, mean, var) = bn.forward_train(&mut g, &store, xv).unwrap();
        let y = g.value(y);
        for j in 0..3 {
            let m = (0..4).map(|i| y.at(i, j)).sum::<f64>() / 4.0;
            let v = (0..4).map(|i| (y.at(i, j) - m).powi(2)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-9, "{m} {v}");
        }
        bn.update_running(&mean, &var, 4);
        let eval_row = |rows: Tensor| {
            let mut g = Graph::new();
            let v = g.constant(rows);
            let y = bn.forward_eval(&mut g, &store, v, true).unwrap();
            g.value(y).row(0).to_vec()
        };
        let alone = eval_row(Tensor::new(vec![1, 3], x.row(0).to_vec()).unwrap());
        let batched = eval_row(x.clone());
        assert_eq!(alone, batched);
    }

    #[test]
    fn positions_are_bounded() {
        let p = sinusoidal_positions(50, 16);
        assert!(p.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(p.at(0, 1), 1.0);
    }
}

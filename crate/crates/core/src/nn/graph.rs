use std::collections::BTreeMap;

use super::{NnError, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    BroadcastRows(Var),
    Scale(Var, f64),
    Relu(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    MaskedMeanRows { x: Var, keep: Vec<bool> },
    CumMaskedMeanRows { x: Var, keep: Vec<bool> },
    Nll { logp: Var, targets: Vec<Option<usize>> },
    ExpectedHistogram { probs: Var, keep: Vec<bool>, total: f64 },
    SumAll(Var),
    MeanAll(Var),
    Conv2d { x: Var, w: Var, b: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order; `backward`
/// walks them in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Var>,
}

fn shape_err(msg: String) -> NnError {
    NnError::ShapeMismatch(msg)
}

fn dims3(t: &Tensor) -> Result<(usize, usize, usize), NnError> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(shape_err(format!("expected [C, H, W], got {s:?}"))),
    }
}

fn matrix(t: &Tensor) -> Result<(usize, usize), NnError> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(shape_err(format!("expected a matrix, got {s:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Differentiable input; its gradient is available after `backward`.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable parameter. Repeated calls for one id share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Parameter read as a constant (frozen weights).
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (_, ka) = matrix(self.value(a))?;
        let (_, kb) = matrix(self.value(b))?;
        if ka != kb {
            return Err(shape_err(format!("matmul_nt inner dims {ka} vs {kb}")));
        }
        let out = self.value(a).matmul(&self.value(b).transpose())?;
        Ok(self.derived(out, Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.derived(out, Op::Sub(a, b), &[a, b]))
    }

    /// Adds a row vector (any shape with `cols` values) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NnError> {
        let (r, c) = matrix(self.value(x))?;
        let b = self.value(row);
        if b.len() != c {
            return Err(shape_err(format!("row of {} values added to {r}x{c}", b.len())));
        }
        let mut out = self.value(x).clone();
        for i in 0..r {
            out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(b.data()).for_each(|(o, v)| *o += v);
        }
        Ok(self.derived(out, Op::AddRow(x, row), &[x, row]))
    }

    /// Repeats a `1 x n` row `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var, NnError> {
        let (r, c) = matrix(self.value(x))?;
        if r != 1 {
            return Err(shape_err(format!("broadcast_rows needs 1 row, got {r}")));
        }
        let data = self.value(x).data().repeat(rows);
        Ok(self.derived(Tensor::new(vec![rows, c], data)?, Op::BroadcastRows(x), &[x]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.derived(out, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.derived(out, Op::Relu(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        self.derived(out, Op::Abs(x), &[x])
    }

    /// Gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.derived(out, Op::Clamp(x, lo, hi), &[x])
    }

    /// Row-wise softmax. `allowed` (row-major, same size as `x`) zeroes the
    /// probability of disallowed entries; a row with nothing allowed is all zeros.
    pub fn softmax_rows(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var, NnError> {
        let (r, c) = matrix(self.value(x))?;
        if let Some(m) = allowed {
            if m.len() != r * c {
                return Err(shape_err(format!("softmax mask of {} for {r}x{c}", m.len())));
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let ok = |j: usize| allowed.is_none_or(|m| m[i * c + j]);
            let max = (0..c).filter(|&j| ok(j)).map(|j| xv[i * c + j]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for j in (0..c).filter(|&j| ok(j)) {
                let e = (xv[i * c + j] - max).exp();
                out[i * c + j] = e;
                sum += e;
            }
            out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= sum);
        }
        Ok(self.derived(Tensor::new(vec![r, c], out)?, Op::Softmax(x), &[x]))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var, NnError> {
        let (r, c) = matrix(self.value(x))?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        Ok(self.derived(Tensor::new(vec![r, c], out)?, Op::LogSoftmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NnError> {
        let (r, c) = matrix(self.value(x))?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err(format!("layer_norm gamma/beta for {c} features")));
        }
        let xv = self.value(x).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            inv_std[i] = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * inv_std[i];
            }
        }
        let out = affine_cols(&xhat, r, c, self.value(gamma).data(), self.value(beta).data());
        Ok(self.derived(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    /// Batch norm over rows using batch statistics. Returns the output and the
    /// per-feature batch mean and (biased) variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>), NnError> {
        let (r, c) = matrix(self.value(x))?;
        if r < 2 {
            return Err(NnError::BatchTooSmall(r));
        }
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err(format!("batch_norm gamma/beta for {c} features")));
        }
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for j in 0..c {
            mean[j] = (0..r).map(|i| xv[i * c + j]).sum::<f64>() / r as f64;
            var[j] = (0..r).map(|i| (xv[i * c + j] - mean[j]).powi(2)).sum::<f64>() / r as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                xhat[i * c + j] = (xv[i * c + j] - mean[j]) * inv_std[j];
            }
        }
        let out = affine_cols(&xhat, r, c, self.value(gamma).data(), self.value(beta).data());
        let v = self.derived(out, Op::BatchNormTrain { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]);
        Ok((v, mean, var))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var, NnError> {
        let (r, c) = matrix(self.value(x))?;
        if [self.value(gamma).len(), self.value(beta).len(), mean.len(), var.len()].iter().any(|&n| n != c) {
            return Err(shape_err(format!("batch_norm parameters for {c} features")));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let mut xhat = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                xhat[i * c + j] = (xv[i * c + j] - mean[j]) * inv_std[j];
            }
        }
        let out = affine_cols(&xhat, r, c, self.value(gamma).data(), self.value(beta).data());
        Ok(self.derived(out, Op::BatchNormEval { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, NnError> {
        let (n, c) = matrix(self.value(table))?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(shape_err(format!("row {bad} of a {n}-row table")));
        }
        let t = self.value(table);
        let data: Vec<f64> = ids.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let out = Tensor::new(vec![ids.len(), c], data)?;
        Ok(self.derived(out, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let (r, c) = matrix(self.value(x))?;
        if start + len > c {
            return Err(shape_err(format!("columns {start}..{} of {c}", start + len)));
        }
        let xv = self.value(x);
        let data: Vec<f64> = (0..r).flat_map(|i| xv.row(i)[start..start + len].iter().copied()).collect();
        Ok(self.derived(Tensor::new(vec![r, len], data)?, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| matrix(self.value(p))).collect::<Result<_, _>>()?;
        let r = dims.first().map_or(0, |d| d.0);
        if dims.iter().any(|d| d.0 != r) {
            return Err(shape_err(format!("concat_cols row counts {dims:?}")));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        Ok(self.derived(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Mean of the kept rows as a `1 x n` row; zeros when nothing is kept.
    pub fn masked_mean_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var, NnError> {
        let (r, c) = matrix(self.value(x))?;
        if keep.len() != r {
            return Err(shape_err(format!("row mask of {} for {r} rows", keep.len())));
        }
        let k = keep.iter().filter(|&&b| b).count();
        let mut out = vec![0.0; c];
        if k > 0 {
            for i in (0..r).filter(|&i| keep[i]) {
                out.iter_mut().zip(self.value(x).row(i)).for_each(|(o, v)| *o += v);
            }
            out.iter_mut().for_each(|o| *o /= k as f64);
        }
        Ok(self.derived(Tensor::new(vec![1, c], out)?, Op::MaskedMeanRows { x, keep: keep.to_vec() }, &[x]))
    }

    /// Row `t` is the mean of kept rows `0..=t` (zeros when none are kept).
    pub fn cum_masked_mean_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var, NnError> {
        let (r, c) = matrix(self.value(x))?;
        if keep.len() != r {
            return Err(shape_err(format!("row mask of {} for {r} rows", keep.len())));
        }
        let mut acc = vec![0.0; c];
        let mut k = 0usize;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            if keep[i] {
                acc.iter_mut().zip(self.value(x).row(i)).for_each(|(a, v)| *a += v);
                k += 1;
            }
            if k > 0 {
                for j in 0..c {
                    out[i * c + j] = acc[j] / k as f64;
                }
            }
        }
        Ok(self.derived(Tensor::new(vec![r, c], out)?, Op::CumMaskedMeanRows { x, keep: keep.to_vec() }, &[x]))
    }

    /// `-Σ_t logp[t, target_t]` over rows with a target.
    pub fn nll(&mut self, logp: Var, targets: &[Option<usize>]) -> Result<Var, NnError> {
        let (r, c) = matrix(self.value(logp))?;
        if targets.len() != r || targets.iter().flatten().any(|&t| t >= c) {
            return Err(shape_err(format!("{} targets for {r}x{c} log-probabilities", targets.len())));
        }
        let lp = self.value(logp);
        let sum: f64 = targets.iter().enumerate().filter_map(|(i, t)| t.map(|t| lp.at(i, t))).sum();
        Ok(self.derived(Tensor::scalar(-sum), Op::Nll { logp, targets: targets.to_vec() }, &[logp]))
    }

    /// Expected column histogram of row distributions, restricted to the kept
    /// columns and L1-normalized (`1 x C`). Zeros when the kept mass vanishes.
    pub fn expected_histogram(&mut self, probs: Var, keep: &[bool]) -> Result<Var, NnError> {
        let (r, c) = matrix(self.value(probs))?;
        if keep.len() != c {
            return Err(shape_err(format!("column mask of {} for {c} columns", keep.len())));
        }
        let p = self.value(probs);
        let mut s = vec![0.0; c];
        for i in 0..r {
            for j in (0..c).filter(|&j| keep[j]) {
                s[j] += p.at(i, j);
            }
        }
        let total: f64 = s.iter().sum();
        if total > HIST_EPS {
            s.iter_mut().for_each(|v| *v /= total);
        } else {
            s.fill(0.0);
        }
        let out = Tensor::new(vec![1, c], s)?;
        Ok(self.derived(out, Op::ExpectedHistogram { probs, keep: keep.to_vec(), total }, &[probs]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.derived(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.derived(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// 3x3 convolution, stride 1, zero padding 1. `x: [Cin, H, W]`,
    /// `w: [Cout, Cin*9]`, `b: Cout values`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let (ci, h, wd) = dims3(self.value(x))?;
        let (co, k) = matrix(self.value(w))?;
        if k != ci * 9 || self.value(b).len() != co {
            return Err(shape_err(format!("conv2d weight {co}x{k} / bias for {ci} input channels")));
        }
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; co * h * wd];
        for o in 0..co {
            let plane = &mut out[o * h * wd..(o + 1) * h * wd];
            plane.fill(bv[o]);
            for c in 0..ci {
                for ki in 0..3 {
                    for kj in 0..3 {
                        let wt = wv[o * k + c * 9 + ki * 3 + kj];
                        for i in 0..h {
                            let si = i + ki;
                            if si < 1 || si > h {
                                continue;
                            }
                            let src = &xv[c * h * wd + (si - 1) * wd..c * h * wd + si * wd];
                            let dst = &mut plane[i * wd..(i + 1) * wd];
                            for j in 0..wd {
                                let sj = j + kj;
                                if sj >= 1 && sj <= wd {
                                    dst[j] += wt * src[sj - 1];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self.derived(Tensor::new(vec![co, h, wd], out)?, Op::Conv2d { x, w, b }, &[x, w, b]))
    }

    /// 2x2 max pooling, stride 2 (odd trailing rows/columns dropped).
    /// The first maximal element of each window wins.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var, NnError> {
        let (c, h, w) = dims3(self.value(x))?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(shape_err(format!("max_pool2 on {h}x{w}")));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = (usize::MAX, f64::NEG_INFINITY);
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = ch * h * w + (2 * i + di) * w + 2 * j + dj;
                        if xv[idx] > best.1 {
                            best = (idx, xv[idx]);
                        }
                    }
                    let o = ch * oh * ow + i * ow + j;
                    out[o] = best.1;
                    argmax[o] = best.0;
                }
            }
        }
        Ok(self.derived(Tensor::new(vec![c, oh, ow], out)?, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Spatial mean of `[C, H, W]` as a `1 x C` row.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, NnError> {
        let (c, h, w) = dims3(self.value(x))?;
        let xv = self.value(x).data();
        let out: Vec<f64> =
            (0..c).map(|ch| xv[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64).collect();
        Ok(self.derived(Tensor::new(vec![1, c], out)?, Op::GlobalAvgPool(x), &[x]))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!("backward from non-scalar {:?}", self.value(loss).shape())));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(dy) = self.grads[idx].take() else { continue };
            self.propagate(idx, &dy);
            self.grads[idx] = Some(dy);
        }
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of all parameters touched by this graph.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
    }

    /// Adds `scale` times each parameter gradient into the store's buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore, scale: f64) {
        for (id, g) in self.param_grads() {
            store.accumulate_grad(id, g, scale);
        }
    }

    fn acc(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, dy: &Tensor) {
        let y = &self.nodes[idx].value;
        let shape_of = |g: &Graph, v: Var| g.nodes[v.0].value.shape().to_vec();
        let mut out: Vec<(Var, Tensor)> = Vec::new();
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                if self.wants(a) {
                    out.push((a, dy.matmul(&self.value(b).transpose()).expect("matmul grad")));
                }
                if self.wants(b) {
                    out.push((b, self.value(a).transpose().matmul(dy).expect("matmul grad")));
                }
            }
            &Op::MatMulNT(a, b) => {
                if self.wants(a) {
                    out.push((a, dy.matmul(self.value(b)).expect("matmul_nt grad")));
                }
                if self.wants(b) {
                    out.push((b, dy.transpose().matmul(self.value(a)).expect("matmul_nt grad")));
                }
            }
            &Op::Add(a, b) => {
                out.push((a, dy.clone()));
                out.push((b, dy.clone()));
            }
            &Op::Sub(a, b) => {
                out.push((a, dy.clone()));
                out.push((b, dy.map(|v| -v)));
            }
            &Op::AddRow(x, row) => {
                out.push((x, dy.clone()));
                if self.wants(row) {
                    let sums = col_sums(dy);
                    out.push((row, Tensor::new(shape_of(self, row), sums).expect("row grad")));
                }
            }
            &Op::BroadcastRows(x) => out.push((x, Tensor::row_vector(col_sums(dy)))),
            &Op::Scale(x, s) => out.push((x, dy.map(|v| v * s))),
            &Op::Relu(x) => {
                out.push((x, self.value(x).zip(dy, |xv, d| if xv > 0.0 { d } else { 0.0 }).expect("relu")))
            }
            &Op::Abs(x) => out.push((x, self.value(x).zip(dy, |xv, d| d * xv.signum() * (xv != 0.0) as u8 as f64).expect("abs"))),
            &Op::Clamp(x, lo, hi) => out.push((
                x,
                self.value(x).zip(dy, |xv, d| if (lo..=hi).contains(&xv) { d } else { 0.0 }).expect("clamp"),
            )),
            &Op::Softmax(x) => {
                let (r, c) = (y.rows(), y.cols());
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    let (yr, dr) = (y.row(i), dy.row(i));
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        g[i * c + j] = yr[j] * (dr[j] - dot);
                    }
                }
                out.push((x, Tensor::new(vec![r, c], g).expect("softmax grad")));
            }
            &Op::LogSoftmax(x) => {
                let (r, c) = (y.rows(), y.cols());
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    let (yr, dr) = (y.row(i), dy.row(i));
                    let s: f64 = dr.iter().sum();
                    for j in 0..c {
                        g[i * c + j] = dr[j] - yr[j].exp() * s;
                    }
                }
                out.push((x, Tensor::new(vec![r, c], g).expect("log_softmax grad")));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (r, c) = (y.rows(), y.cols());
                let gm = self.value(*gamma).data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let dxh: Vec<f64> = (0..c).map(|j| dy.data()[i * c + j] * gm[j]).collect();
                    let xh = &xhat[i * c..(i + 1) * c];
                    let s1: f64 = dxh.iter().sum();
                    let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = inv_std[i] / c as f64 * (c as f64 * dxh[j] - s1 - xh[j] * s2);
                    }
                }
                out.push((*x, Tensor::new(vec![r, c], dx).expect("layer_norm grad")));
                out.extend(affine_param_grads(self, *gamma, *beta, dy, xhat));
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let (r, c) = (y.rows(), y.cols());
                let gm = self.value(*gamma).data();
                let mut dx = vec![0.0; r * c];
                for j in 0..c {
                    let dxh: Vec<f64> = (0..r).map(|i| dy.data()[i * c + j] * gm[j]).collect();
                    let s1: f64 = dxh.iter().sum();
                    let s2: f64 = (0..r).map(|i| dxh[i] * xhat[i * c + j]).sum();
                    for i in 0..r {
                        dx[i * c + j] = inv_std[j] / r as f64 * (r as f64 * dxh[i] - s1 - xhat[i * c + j] * s2);
                    }
                }
                out.push((*x, Tensor::new(vec![r, c], dx).expect("batch_norm grad")));
                out.extend(affine_param_grads(self, *gamma, *beta, dy, xhat));
            }
            Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                let (r, c) = (y.rows(), y.cols());
                let gm = self.value(*gamma).data();
                let dx: Vec<f64> = (0..r * c).map(|k| dy.data()[k] * gm[k % c] * inv_std[k % c]).collect();
                out.push((*x, Tensor::new(vec![r, c], dx).expect("batch_norm grad")));
                out.extend(affine_param_grads(self, *gamma, *beta, dy, xhat));
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let mut g = Tensor::zeros(self.value(*table).shape());
                    let c = g.cols();
                    for (r, &id) in ids.iter().enumerate() {
                        g.data_mut()[id * c..(id + 1) * c].iter_mut().zip(dy.row(r)).for_each(|(a, b)| *a += b);
                    }
                    out.push((*table, g));
                }
            }
            &Op::SliceCols { x, start } => {
                let mut g = Tensor::zeros(self.value(x).shape());
                let (r, c, len) = (g.rows(), g.cols(), dy.cols());
                for i in 0..r {
                    g.data_mut()[i * c + start..i * c + start + len].copy_from_slice(dy.row(i));
                }
                out.push((x, g));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (r, c) = (self.value(p).rows(), self.value(p).cols());
                    let data: Vec<f64> = (0..r).flat_map(|i| dy.row(i)[start..start + c].iter().copied()).collect();
                    out.push((p, Tensor::new(vec![r, c], data).expect("concat grad")));
                    start += c;
                }
            }
            Op::MaskedMeanRows { x, keep } => {
                let k = keep.iter().filter(|&&b| b).count();
                let mut g = Tensor::zeros(self.value(*x).shape());
                let c = g.cols();
                if k > 0 {
                    for i in (0..keep.len()).filter(|&i| keep[i]) {
                        for j in 0..c {
                            g.data_mut()[i * c + j] = dy.data()[j] / k as f64;
                        }
                    }
                }
                out.push((*x, g));
            }
            Op::CumMaskedMeanRows { x, keep } => {
                let (r, c) = (y.rows(), y.cols());
                let mut counts = vec![0usize; r];
                let mut k = 0;
                for i in 0..r {
                    k += keep[i] as usize;
                    counts[i] = k;
                }
                // suffix[j] = Σ_{t >= s} dy[t, j] / k_t
                let mut suffix = vec![0.0; c];
                let mut g = vec![0.0; r * c];
                for s in (0..r).rev() {
                    if counts[s] > 0 {
                        for j in 0..c {
                            suffix[j] += dy.data()[s * c + j] / counts[s] as f64;
                        }
                    }
                    if keep[s] {
                        g[s * c..(s + 1) * c].copy_from_slice(&suffix);
                    }
                }
                out.push((*x, Tensor::new(vec![r, c], g).expect("cum mean grad")));
            }
            Op::Nll { logp, targets } => {
                let mut g = Tensor::zeros(self.value(*logp).shape());
                let c = g.cols();
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        g.data_mut()[i * c + t] = -dy.data()[0];
                    }
                }
                out.push((*logp, g));
            }
            Op::ExpectedHistogram { probs, keep, total } => {
                let mut g = Tensor::zeros(self.value(*probs).shape());
                if *total > HIST_EPS {
                    let c = g.cols();
                    let dot: f64 = dy.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                    let ds: Vec<f64> =
                        (0..c).map(|j| if keep[j] { (dy.data()[j] - dot) / total } else { 0.0 }).collect();
                    for i in 0..g.rows() {
                        g.data_mut()[i * c..(i + 1) * c].copy_from_slice(&ds);
                    }
                }
                out.push((*probs, g));
            }
            &Op::SumAll(x) => out.push((x, Tensor::filled(&shape_of(self, x), dy.data()[0]))),
            &Op::MeanAll(x) => {
                let n = self.value(x).len().max(1) as f64;
                out.push((x, Tensor::filled(&shape_of(self, x), dy.data()[0] / n)));
            }
            &Op::Conv2d { x, w, b } => out.extend(conv2d_grads(self, x, w, b, dy)),
            Op::MaxPool2 { x, argmax } => {
                let mut g = Tensor::zeros(self.value(*x).shape());
                for (o, &src) in argmax.iter().enumerate() {
                    g.data_mut()[src] += dy.data()[o];
                }
                out.push((*x, g));
            }
            &Op::GlobalAvgPool(x) => {
                let shape = shape_of(self, x);
                let hw = shape[1] * shape[2];
                let data: Vec<f64> = (0..shape[0]).flat_map(|ch| std::iter::repeat_n(dy.data()[ch] / hw as f64, hw)).collect();
                out.push((x, Tensor::new(shape, data).expect("pool grad")));
            }
        }
        for (v, g) in out {
            self.acc(v, g);
        }
    }
}

const HIST_EPS: f64 = 1e-300;

fn affine_cols(xhat: &[f64], r: usize, c: usize, gamma: &[f64], beta: &[f64]) -> Tensor {
    let data = (0..r * c).map(|k| xhat[k] * gamma[k % c] + beta[k % c]).collect();
    Tensor::new(vec![r, c], data).expect("affine shape")
}

fn col_sums(t: &Tensor) -> Vec<f64> {
    let c = t.cols();
    let mut s = vec![0.0; c];
    for i in 0..t.rows() {
        s.iter_mut().zip(t.row(i)).for_each(|(a, b)| *a += b);
    }
    s
}

fn affine_param_grads(g: &Graph, gamma: Var, beta: Var, dy: &Tensor, xhat: &[f64]) -> Vec<(Var, Tensor)> {
    let c = dy.cols();
    let mut dg = vec![0.0; c];
    for (k, (&d, &xh)) in dy.data().iter().zip(xhat).enumerate() {
        dg[k % c] += d * xh;
    }
    vec![
        (gamma, Tensor::new(g.value(gamma).shape().to_vec(), dg).expect("gamma grad")),
        (beta, Tensor::new(g.value(beta).shape().to_vec(), col_sums(dy)).expect("beta grad")),
    ]
}

fn conv2d_grads(g: &Graph, x: Var, w: Var, b: Var, dy: &Tensor) -> Vec<(Var, Tensor)> {
    let xt = g.value(x);
    let wt = g.value(w);
    let (ci, h, wd) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
    let co = wt.shape()[0];
    let k = ci * 9;
    let (xv, wv, dv) = (xt.data(), wt.data(), dy.data());
    let mut dx = vec![0.0; xv.len()];
    let mut dw = vec![0.0; wv.len()];
    let mut db = vec![0.0; co];
    for o in 0..co {
        let dplane = &dv[o * h * wd..(o + 1) * h * wd];
        db[o] = dplane.iter().sum();
        for c in 0..ci {
            for ki in 0..3 {
                for kj in 0..3 {
                    let widx = o * k + c * 9 + ki * 3 + kj;
                    let wval = wv[widx];
                    let mut acc = 0.0;
                    for i in 0..h {
                        let si = i + ki;
                        if si < 1 || si > h {
                            continue;
                        }
                        let base = c * h * wd + (si - 1) * wd;
                        for j in 0..wd {
                            let sj = j + kj;
                            if sj >= 1 && sj <= wd {
                                let d = dplane[i * wd + j];
                                acc += d * xv[base + sj - 1];
                                dx[base + sj - 1] += d * wval;
                            }
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    vec![
        (x, Tensor::new(xt.shape().to_vec(), dx).expect("conv dx")),
        (w, Tensor::new(wt.shape().to_vec(), dw).expect("conv dw")),
        (b, Tensor::new(g.value(b).shape().to_vec(), db).expect("conv db")),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_style_softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![3, 3], vec![0.3, -1.0, 2.0, 5.0, 5.0, 5.0, -3.0, 0.0, 1.0]).unwrap());
        let mask = [true, false, false, true, true, false, true, true, true];
        let y = g.softmax_rows(x, Some(&mask)).unwrap();
        let v = g.value(y);
        assert_eq!(v.at(0, 0), 1.0);
        for r in 0..3 {
            assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(v.at(1, 2), 0.0);
    }

    #[test]
    fn matmul_backward_matches_closed_form() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = g.input(Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        let s = g.sum_all(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.input(Tensor::scalar(3.0));
        let c = g.sub(a, b).unwrap();
        let d = g.abs(c);
        g.backward(d).unwrap();
        assert!(g.grad(a).is_none());
        assert_eq!(g.grad(b).unwrap().data(), &[1.0]);
    }

    #[test]
    fn cumulative_mean_rows() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![3, 1], vec![2.0, 100.0, 4.0]).unwrap());
        let y = g.cum_masked_mean_rows(x, &[true, false, true]).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 2.0, 3.0]);
    }

    #[test]
    fn batch_norm_train_rejects_single_row() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3]));
        let ga = g.input(Tensor::filled(&[3], 1.0));
        let be = g.input(Tensor::zeros(&[3]));
        assert_eq!(g.batch_norm_train(x, ga, be, 1e-5).unwrap_err(), NnError::BatchTooSmall(1));
    }
}

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, NnError, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub h: f64,
    pub tolerance: f64,
    /// Check at most this many entries per block (sampled under `seed`).
    pub max_entries_per_block: Option<usize>,
    pub seed: u64,
    /// Floor on the relative-error denominator, scaled by
    /// `max(1, |loss|) * sqrt(entries)` to sit above finite-difference
    /// roundoff. Blocks whose true gradient is zero are judged against it.
    pub norm_floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, tolerance: 1e-4, max_entries_per_block: None, seed: 0, norm_floor: 1e-6 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub entries_checked: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)` over the checked entries.
    pub relative_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn worst(&self) -> f64 {
        self.blocks.iter().map(|b| b.relative_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &BlockReport> {
        self.blocks.iter().filter(|b| !b.passed)
    }
}

/// Analytic gradients of `f` for every block of `store`, via one backward pass.
pub fn analytic_gradients<F>(store: &ParamStore, f: &F) -> Result<BTreeMap<ParamId, Tensor>, NnError>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var, NnError>,
{
    let mut g = Graph::new();
    let loss = f(store, &mut g)?;
    g.backward(loss)?;
    let mut out: BTreeMap<ParamId, Tensor> =
        store.ids().map(|id| (id, Tensor::zeros(store.value(id).shape()))).collect();
    for (id, grad) in g.param_grads() {
        out.insert(id, grad.clone());
    }
    Ok(out)
}

/// Compares the supplied analytic gradients against central differences of `f`.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    f: &F,
    analytic: &BTreeMap<ParamId, Tensor>,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport, NnError>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var, NnError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let loss_scale = {
        let mut g = Graph::new();
        let l = f(store, &mut g)?;
        g.scalar(l).abs().max(1.0)
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let mut blocks = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.value(id).len();
        let entries: Vec<usize> = match opts.max_entries_per_block {
            Some(k) if k < n => {
                let mut e = sample(&mut rng, n, k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        let a = &analytic[&id];
        let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
        for &i in &entries {
            let orig = store.value(id).data()[i];
            let mut eval = |x: f64| -> Result<f64, NnError> {
                store.get_mut(id).value.data_mut()[i] = x;
                let mut g = Graph::new();
                let loss = f(store, &mut g)?;
                Ok(g.scalar(loss))
            };
            let plus = eval(orig + opts.h)?;
            let minus = eval(orig - opts.h)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let num = (plus - minus) / (2.0 * opts.h);
            let an = a.data()[i];
            diff2 += (an - num).powi(2);
            a2 += an * an;
            n2 += num * num;
            max_abs = max_abs.max((an - num).abs());
        }
        let floor = opts.norm_floor * loss_scale * (entries.len() as f64).sqrt();
        let denom = a2.sqrt().max(n2.sqrt()).max(floor);
        let rel = diff2.sqrt() / denom;
        blocks.push(BlockReport {
            name: store.get(id).name.clone(),
            entries_checked: entries.len(),
            relative_error: rel,
            max_abs_error: max_abs,
            passed: rel < opts.tolerance,
        });
    }
    Ok(GradcheckReport { tolerance: opts.tolerance, blocks })
}

/// Central finite differences against the tape's gradients for every block.
pub fn gradcheck<F>(store: &mut ParamStore, f: F, opts: &GradcheckOptions) -> Result<GradcheckReport, NnError>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var, NnError>,
{
    let analytic = analytic_gradients(store, &f)?;
    check_gradients(store, &f, &analytic, opts)
}

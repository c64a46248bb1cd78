//! Finite-difference cases for every differentiable block. Inputs are
//! registered as parameters, so their gradients are checked too. Each case
//! returns its report; structural checks panic inside the case.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vamidi::model::{EmoModel, ImageExtractor, ImageFeature, ImageInput, ModelConfig, VaPredictor, VaPredictorConfig};
use vamidi::nn::{
    attention_mask, gradcheck, AttentionConfig, BatchNorm, Conv2d, Embedding, GradcheckOptions, GradcheckReport,
    Graph, LayerNorm, Linear, MultiHeadAttention, NnError, ParamId, ParamStore, Tensor, TransformerBlock, Var,
};
use vamidi::pairing::VaPoint;
use vamidi::tokenizer::{VocabConfig, Vocabulary, BOS, EOS};
use vamidi::training::{cce_var, model_gradcheck, va_loss_var, LossWeights, TrainingExample};

pub const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Quadratic read-out `‖c Y R‖²` with random row weights `c` and
/// projection `R`; plain row sums would cancel under batch norm.
fn readout(g: &mut Graph, y: Var, seed: u64) -> Result<Var, NnError> {
    let (rows, cols) = (g.value(y).rows(), g.value(y).cols());
    let mut r = rng(seed);
    let c = g.constant(random(&[1, rows], &mut r));
    let proj = g.constant(random(&[cols, 3], &mut r));
    let z = g.matmul(c, y)?;
    let z = g.matmul(z, proj)?;
    Ok(g.matmul_nt(z, z)?)
}

fn input(store: &mut ParamStore, name: &str, shape: &[usize], seed: u64) -> ParamId {
    store.add(name, random(shape, &mut rng(seed))).unwrap()
}

pub fn assert_passes(report: &GradcheckReport) {
    for b in &report.blocks {
        assert!(b.entries_checked > 0, "{} checked nothing", b.name);
    }
    assert!(report.passed(), "worst {:.3e}: {:?}", report.worst(), report.failures().collect::<Vec<_>>());
    assert!(report.worst() < TOL);
}

fn randomize(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        let name = store.get(id).name.clone();
        let t = random(&shape, &mut r).map(|v| v * 0.5 + if name.ends_with("gamma") { 1.0 } else { 0.0 });
        store.set_value(&name, t).unwrap();
    }
}

pub fn linear() -> GradcheckReport {
    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, "lin", 5, 4, &mut rng(1)).unwrap();
    let x = input(&mut s, "x", &[3, 5], 2);
    let f = |s: &ParamStore, g: &mut Graph| {
        let xv = g.param(s, x);
        let y = lin.forward(g, s, xv)?;
        readout(g, y, 3)
    };
    gradcheck(&mut s, f, &GradcheckOptions::default()).unwrap()
}

pub fn embedding() -> GradcheckReport {
    let mut s = ParamStore::new();
    let emb = Embedding::new(&mut s, "emb", 10, 4, &mut rng(1)).unwrap();
    let f = |s: &ParamStore, g: &mut Graph| {
        let y = emb.forward(g, s, &[3, 7, 3, 0])?;
        readout(g, y, 4)
    };
    gradcheck(&mut s, f, &GradcheckOptions::default()).unwrap()
}

pub fn layer_norm() -> GradcheckReport {
    let mut s = ParamStore::new();
    let ln = LayerNorm::new(&mut s, "ln", 6).unwrap();
    input(&mut s, "x", &[4, 6], 2);
    randomize(&mut s, 5);
    let x = s.id("x").unwrap();
    let f = |s: &ParamStore, g: &mut Graph| {
        let xv = g.param(s, x);
        let y = ln.forward(g, s, xv)?;
        readout(g, y, 6)
    };
    gradcheck(&mut s, f, &GradcheckOptions::default()).unwrap()
}

pub fn batch_norm_train_mode() -> GradcheckReport {
    let mut s = ParamStore::new();
    let bn = BatchNorm::new(&mut s, "bn", 5).unwrap();
    input(&mut s, "x", &[6, 5], 2);
    randomize(&mut s, 7);
    let x = s.id("x").unwrap();
    let f = |s: &ParamStore, g: &mut Graph| {
        let xv = g.param(s, x);
        let (y, _, _) = bn.forward_train(g, s, xv)?;
        readout(g, y, 8)
    };
    gradcheck(&mut s, f, &GradcheckOptions::default()).unwrap()
}

pub fn batch_norm_eval_mode() -> GradcheckReport {
    let mut s = ParamStore::new();
    let mut bn = BatchNorm::new(&mut s, "bn", 5).unwrap();
    bn.running_mean = vec![0.1, -0.2, 0.3, 0.0, 0.5];
    bn.running_var = vec![0.5, 1.5, 2.0, 0.8, 1.1];
    input(&mut s, "x", &[3, 5], 2);
    randomize(&mut s, 9);
    let x = s.id("x").unwrap();
    let f = |s: &ParamStore, g: &mut Graph| {
        let xv = g.param(s, x);
        let y = bn.forward_eval(g, s, xv, false)?;
        readout(g, y, 10)
    };
    gradcheck(&mut s, f, &GradcheckOptions::default()).unwrap()
}

pub fn multi_head_attention_with_causal_and_padding_mask() -> GradcheckReport {
    let mut s = ParamStore::new();
    let cfg = AttentionConfig::new(8, 2).unwrap();
    let attn = MultiHeadAttention::new(&mut s, "attn", cfg, &mut rng(1)).unwrap();
    let q = input(&mut s, "q", &[4, 8], 2);
    let kv = input(&mut s, "kv", &[5, 8], 3);
    let self_mask = attention_mask(4, 4, true, Some(&[true, true, false, true]));
    let cross_mask = attention_mask(4, 5, false, Some(&[true, false, true, true, true]));
    let f = |s: &ParamStore, g: &mut Graph| {
        let (qv, kvv) = (g.param(s, q), g.param(s, kv));
        let a = attn.forward(g, s, qv, qv, Some(&self_mask))?;
        let b = attn.forward(g, s, qv, kvv, Some(&cross_mask))?;
        let y = g.add(a, b)?;
        readout(g, y, 4)
    };
    gradcheck(&mut s, f, &GradcheckOptions::default()).unwrap()
}

pub fn encoder_block() -> GradcheckReport {
    let mut s = ParamStore::new();
    let cfg = AttentionConfig::new(8, 2).unwrap();
    let blk = TransformerBlock::new(&mut s, "enc", cfg, 12, &mut rng(1)).unwrap();
    let x = input(&mut s, "x", &[5, 8], 2);
    let keep = [true, true, true, false, true];
    let mask = attention_mask(5, 5, true, Some(&keep));
    let f = |s: &ParamStore, g: &mut Graph| {
        let xv = g.param(s, x);
        let h = blk.forward(g, s, xv, Some(&mask))?;
        let ctx = g.cum_masked_mean_rows(h, &keep)?;
        readout(g, ctx, 5)
    };
    gradcheck(&mut s, f, &GradcheckOptions::default()).unwrap()
}

pub fn decoder_block_with_joint_injection_and_head() -> GradcheckReport {
    let mut s = ParamStore::new();
    let cfg = AttentionConfig::new(8, 2).unwrap();
    let joint = Linear::new(&mut s, "joint", 16, 8, &mut rng(1)).unwrap();
    let blk = TransformerBlock::new(&mut s, "dec", cfg, 12, &mut rng(2)).unwrap();
    let head = Linear::new(&mut s, "head", 8, 11, &mut rng(3)).unwrap();
    let e = input(&mut s, "embedded", &[4, 8], 4);
    let j = input(&mut s, "joint_rows", &[4, 16], 5);
    let mask = attention_mask(4, 4, true, None);
    let f = |s: &ParamStore, g: &mut Graph| {
        let (ev, jv) = (g.param(s, e), g.param(s, j));
        let p = joint.forward(g, s, jv)?;
        let x = g.add(ev, p)?;
        let h = blk.forward(g, s, x, Some(&mask))?;
        let logits = head.forward(g, s, h)?;
        let lp = g.log_softmax_rows(logits)?;
        g.nll(lp, &[Some(3), Some(0), None, Some(10)])
    };
    gradcheck(&mut s, f, &GradcheckOptions::default()).unwrap()
}

pub fn conv_extractor_blocks() -> GradcheckReport {
    let mut s = ParamStore::new();
    let c1 = Conv2d::new(&mut s, "c1", 2, 3, &mut rng(1)).unwrap();
    let c2 = Conv2d::new(&mut s, "c2", 3, 4, &mut rng(2)).unwrap();
    let x = input(&mut s, "px", &[2, 6, 6], 3);
    let f = |s: &ParamStore, g: &mut Graph| {
        let xv = g.param(s, x);
        let h = c1.forward(g, s, xv)?;
        let h = g.relu(h);
        let h = g.max_pool2(h)?;
        let h = c2.forward(g, s, h)?;
        let y = g.global_avg_pool(h)?;
        readout(g, y, 6)
    };
    gradcheck(&mut s, f, &GradcheckOptions::default()).unwrap()
}

pub fn categorical_cross_entropy() -> GradcheckReport {
    let mut s = ParamStore::new();
    let logits = input(&mut s, "logits", &[5, 9], 1);
    let f = |s: &ParamStore, g: &mut Graph| {
        let l = g.param(s, logits);
        cce_var(g, l, &[4, 0, 8, 3, 3]).map_err(|e| NnError::ShapeMismatch(e.to_string()))
    };
    gradcheck(&mut s, f, &GradcheckOptions::default()).unwrap()
}

fn centred_predictor(vocab: &Vocabulary, seed: u64) -> VaPredictor {
    let mut p = VaPredictor::new(vocab, VaPredictorConfig::default(), seed).unwrap();
    p.store.set_value("fc3.b", Tensor::row_vector(vec![5.0, 5.0])).unwrap();
    p
}

pub fn soft_va_loss_with_respect_to_logits() -> GradcheckReport {
    let vocab = Vocabulary::new(VocabConfig { time_shift_bins: 8, velocity_bins: 4 }).unwrap();
    let predictor = centred_predictor(&vocab, 3);
    let mut s = ParamStore::new();
    let logits = s.add("logits", random(&[6, vocab.size()], &mut rng(4)).map(|v| 3.0 * v)).unwrap();
    let truth = VaPoint::new(3.0, 7.5).unwrap();
    let f = |s: &ParamStore, g: &mut Graph| {
        let l = g.param(s, logits);
        let p = g.softmax_rows(l, None)?;
        va_loss_var(g, p, &truth, &predictor).map_err(|e| NnError::ShapeMismatch(e.to_string()))
    };
    let report = gradcheck(&mut s, f, &GradcheckOptions::default()).unwrap();
    // the read-out is not vacuous
    let mut g = Graph::new();
    let l = g.param(&s, logits);
    let p = g.softmax_rows(l, None).unwrap();
    let loss = va_loss_var(&mut g, p, &truth, &predictor).unwrap();
    g.backward(loss).unwrap();
    assert!(g.grad(l).unwrap().norm() > 1e-6);
    report
}

fn reduced_model() -> EmoModel {
    let cfg = ModelConfig {
        encoder_blocks: 1,
        decoder_blocks: 1,
        model_dim: 16,
        head_count: 2,
        ff_dim: 32,
        max_len: 16,
        image_extractor: ImageExtractor::Precomputed,
        allow_reduced: true,
        ..ModelConfig::default()
    };
    EmoModel::new(cfg, 11).unwrap()
}

fn reduced_example(vocab: &Vocabulary) -> TrainingExample {
    let mut r = rng(12);
    let mut tokens = vec![BOS];
    tokens.extend((0..6).map(|_| r.gen_range(3..vocab.size() as u32)));
    tokens.push(EOS);
    let feature = ImageFeature::new((0..512).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    TrainingExample { id: "reduced".into(), tokens, image: ImageInput::Feature(feature) }
}

pub fn full_reduced_model_every_entry() -> GradcheckReport {
    let model = reduced_model();
    let ex = reduced_example(model.vocab());
    let predictor = centred_predictor(model.vocab(), 13);
    let report =
        model_gradcheck(&model, &ex, Some(&predictor), &LossWeights::new(1.0, 1.0).unwrap(), &GradcheckOptions::default())
            .unwrap();
    let total: usize = report.blocks.iter().map(|b| b.entries_checked).sum();
    assert_eq!(total, model.store.scalar_count());
    report
}

pub fn full_model_with_pixel_extractor_sampled() -> GradcheckReport {
    let cfg = ModelConfig {
        encoder_blocks: 1,
        decoder_blocks: 1,
        model_dim: 16,
        head_count: 2,
        ff_dim: 32,
        max_len: 16,
        image_size: 8,
        image_extractor: ImageExtractor::TinyCnn,
        allow_reduced: true,
        ..ModelConfig::default()
    };
    let model = EmoModel::new(cfg, 21).unwrap();
    let mut ex = reduced_example(model.vocab());
    ex.image = ImageInput::Pixels(random(&[3, 8, 8], &mut rng(22)).map(|v| v.abs()));
    let opts = GradcheckOptions { max_entries_per_block: Some(12), seed: 5, ..GradcheckOptions::default() };
    let report = model_gradcheck(&model, &ex, None, &LossWeights::default(), &opts).unwrap();
    assert!(report.blocks.iter().any(|b| b.name.starts_with("cnn.conv3")));
    report
}

/// Every case, in block order.
pub fn all() -> Vec<(&'static str, fn() -> GradcheckReport)> {
    vec![
        ("linear", linear),
        ("embedding", embedding),
        ("layer_norm", layer_norm),
        ("batch_norm_train_mode", batch_norm_train_mode),
        ("batch_norm_eval_mode", batch_norm_eval_mode),
        ("multi_head_attention_with_causal_and_padding_mask", multi_head_attention_with_causal_and_padding_mask),
        ("encoder_block", encoder_block),
        ("decoder_block_with_joint_injection_and_head", decoder_block_with_joint_injection_and_head),
        ("conv_extractor_blocks", conv_extractor_blocks),
        ("categorical_cross_entropy", categorical_cross_entropy),
        ("soft_va_loss_with_respect_to_logits", soft_va_loss_with_respect_to_logits),
        ("full_reduced_model_every_entry", full_reduced_model_every_entry),
        ("full_model_with_pixel_extractor_sampled", full_model_with_pixel_extractor_sampled),
    ]
}

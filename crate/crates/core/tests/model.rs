use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vamidi::model::{
    EmoModel, ImageExtractor, ImageFeature, ImageInput, ModelConfig, ModelError, Strategy as Decoding, VaPredictor,
    VaPredictorConfig,
};
use vamidi::nn::Tensor;
use vamidi::tokenizer::{decode, TokenSequence, VocabConfig, Vocabulary, BOS, EOS, PAD};

fn small_config() -> ModelConfig {
    ModelConfig {
        encoder_blocks: 2,
        decoder_blocks: 2,
        model_dim: 16,
        head_count: 2,
        ff_dim: 24,
        max_len: 24,
        image_extractor: ImageExtractor::Precomputed,
        ..ModelConfig::default()
    }
}

fn model() -> EmoModel {
    EmoModel::new(small_config(), 7).unwrap()
}

fn feature(seed: u64) -> ImageFeature {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    ImageFeature::new((0..512).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn tokens() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(3u32..391, 1..20).prop_map(|mut v| {
        v.insert(0, BOS);
        v
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn logits_shape_and_row_normalization(ids in tokens(), seed in 0u64..100) {
        let m = model();
        let l = m.logits(&ImageInput::Feature(feature(seed)), &ids).unwrap();
        prop_assert_eq!(l.shape(), &[ids.len(), m.vocab().size()][..]);
        let p = l.softmax(1).unwrap();
        for r in 0..ids.len() {
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn changing_token_t_leaves_earlier_rows_unchanged(ids in tokens(), pos in 0usize..20, new in 3u32..391) {
        let m = model();
        let t = pos % ids.len();
        let mut other = ids.clone();
        other[t] = new;
        let img = ImageInput::Feature(feature(1));
        let (a, b) = (m.logits(&img, &ids).unwrap(), m.logits(&img, &other).unwrap());
        for r in 0..t {
            prop_assert_eq!(a.row(r), b.row(r));
        }
    }

    #[test]
    fn trailing_padding_leaves_midi_context_unchanged(ids in tokens(), pads in 1usize..4) {
        let m = model();
        let plain = m.encode_midi(&TokenSequence::from_raw(ids.clone(), 24)).unwrap();
        let mut padded = ids.clone();
        padded.extend(std::iter::repeat(PAD).take(pads));
        let with_pad = m.encode_midi(&TokenSequence::from_raw(padded, 24)).unwrap();
        prop_assert_eq!(plain.len(), 16);
        for (x, y) in plain.iter().zip(&with_pad) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn predicted_va_ignores_token_order_and_stays_in_range(ids in tokens(), seed in 0u64..1000) {
        let vocab = Vocabulary::new(VocabConfig::default()).unwrap();
        let p = VaPredictor::new(&vocab, VaPredictorConfig::default(), 3).unwrap();
        let mut shuffled = ids.clone();
        rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut ChaCha8Rng::seed_from_u64(seed));
        let (a, b) = (p.predict_va(&ids).unwrap(), p.predict_va(&shuffled).unwrap());
        prop_assert!((a.valence - b.valence).abs() < 1e-12 && (a.arousal - b.arousal).abs() < 1e-12);
        prop_assert!((1.0..=9.0).contains(&a.valence) && (1.0..=9.0).contains(&a.arousal));
    }
}

#[test]
fn generation_is_deterministic_and_decodable() {
    let m = model();
    let img = ImageInput::Feature(feature(2));
    let a = m.generate(&img, 24, Decoding::Greedy, 0).unwrap();
    let b = m.generate(&img, 24, Decoding::Greedy, 99).unwrap();
    assert_eq!(a, b);
    let t1 = m.generate(&img, 24, Decoding::Temperature(1.3), 5).unwrap();
    let t2 = m.generate(&img, 24, Decoding::Temperature(1.3), 5).unwrap();
    assert_eq!(t1, t2);
    for s in [&a, &t1] {
        assert_eq!(s.ids()[0], BOS);
        assert!(s.len() <= 24);
        assert!(s.ids()[1..].iter().all(|&i| i != PAD && i != BOS));
        assert!(s.ids()[..s.len() - 1].iter().all(|&i| i != EOS));
        decode(s.ids(), m.vocab(), 4);
    }
    assert!(matches!(m.generate(&img, 25, Decoding::Greedy, 0), Err(ModelError::PrefixTooLong { .. })));
    assert!(matches!(m.generate(&img, 8, Decoding::Temperature(0.0), 0), Err(ModelError::InvalidConfig(_))));
}

#[test]
fn generated_step_matches_full_forward_argmax() {
    let m = model();
    let img = ImageInput::Feature(feature(3));
    let seq = m.generate(&img, 12, Decoding::Greedy, 0).unwrap();
    let ids = seq.ids();
    let logits = m.logits(&img, &ids[..ids.len() - 1]).unwrap();
    for t in 0..ids.len() - 1 {
        let mut row = logits.row(t).to_vec();
        row[PAD as usize] = f64::NEG_INFINITY;
        row[BOS as usize] = f64::NEG_INFINITY;
        let best = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
        assert_eq!(best as u32, ids[t + 1]);
    }
}

#[test]
fn merge_shape_linearity_and_injectivity() {
    let mut m = model();
    let d = m.model_dim();
    let ctx: Vec<f64> = (0..d).map(|i| i as f64 * 0.1 - 0.5).collect();
    let j = m.merge(&feature(4), &ctx).unwrap();
    assert_eq!(j.len(), 2 * d);
    assert_eq!(&j[d..], &ctx[..]);

    m.store.set_value("merge.image.b", Tensor::zeros(&[1, d])).unwrap();
    let zero = m.merge(&ImageFeature::zeros(), &vec![0.0; d]).unwrap();
    assert!(zero.iter().all(|&v| v == 0.0));

    let (f1, f2) = (feature(5), feature(6));
    let mix = ImageFeature::new(f1.values().iter().zip(f2.values()).map(|(a, b)| 2.0 * a - 0.5 * b).collect()).unwrap();
    let (p1, p2, pm) = (m.merge(&f1, &ctx).unwrap(), m.merge(&f2, &ctx).unwrap(), m.merge(&mix, &ctx).unwrap());
    for i in 0..d {
        assert!((pm[i] - (2.0 * p1[i] - 0.5 * p2[i])).abs() < 1e-12);
    }
    assert!(p1[..d].iter().zip(&p2[..d]).any(|(a, b)| (a - b).abs() > 1e-9));

    // projection has full column rank: Gram-Schmidt over its d columns
    let w = m.store.value(m.store.id("merge.image.w").unwrap()).clone();
    let cols: Vec<Vec<f64>> = (0..d).map(|c| (0..512).map(|r| w.at(r, c)).collect()).collect();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for mut v in cols {
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(n > 1e-6, "projection column is dependent");
        basis.push(v.into_iter().map(|x| x / n).collect());
    }
}

#[test]
fn tiny_cnn_features_are_deterministic() {
    let cfg = ModelConfig { image_extractor: ImageExtractor::TinyCnn, image_size: 8, ..small_config() };
    let m = EmoModel::new(cfg, 1).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let px = Tensor::new(vec![3, 8, 8], (0..192).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
    let a = m.encode_image(&ImageInput::Pixels(px.clone())).unwrap();
    let b = m.encode_image(&ImageInput::Pixels(px)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.values().len(), 512);
    let wrong = Tensor::zeros(&[3, 4, 4]);
    assert!(matches!(m.encode_image(&ImageInput::Pixels(wrong)), Err(ModelError::BadImage(_))));
    let z = model().encode_image(&ImageInput::Feature(ImageFeature::zeros())).unwrap();
    assert_eq!(z, ImageFeature::zeros());
}

#[test]
fn block_counts_follow_the_grid_unless_reduced() {
    for (e, d, ok) in [(2, 0, true), (4, 3, true), (3, 2, true), (1, 2, false), (3, 1, false), (5, 3, false)] {
        let cfg = ModelConfig { encoder_blocks: e, decoder_blocks: d, ..small_config() };
        assert_eq!(cfg.validate().is_ok(), ok, "{e}/{d}");
    }
    let reduced = ModelConfig { encoder_blocks: 1, decoder_blocks: 1, allow_reduced: true, ..small_config() };
    assert!(reduced.validate().is_ok());
    let bad_heads = ModelConfig { head_count: 3, ..small_config() };
    assert!(matches!(EmoModel::new(bad_heads, 0), Err(ModelError::InvalidConfig(_))));
}

#[test]
fn zero_block_decoder_still_produces_logits() {
    let cfg = ModelConfig { decoder_blocks: 0, ..small_config() };
    let m = EmoModel::new(cfg, 3).unwrap();
    let l = m.logits(&ImageInput::Feature(feature(1)), &[BOS, 40, 50]).unwrap();
    assert_eq!(l.shape(), &[3, 391][..]);
}

#[test]
fn prefix_and_vocabulary_contracts() {
    let m = model();
    let long: Vec<u32> = std::iter::once(BOS).chain(std::iter::repeat(40).take(24)).collect();
    let img = ImageInput::Feature(feature(1));
    assert!(matches!(m.logits(&img, &long), Err(ModelError::PrefixTooLong { len: 25, max: 24 })));
    assert!(matches!(m.logits(&img, &[BOS, 391]), Err(ModelError::VocabMismatch(_))));
    let joint = vec![0.1; 2 * m.model_dim()];
    let l = m.decode_logits(&joint, &TokenSequence::from_raw(vec![BOS, 60], 24)).unwrap();
    assert_eq!(l.shape(), &[2, 391][..]);
}

#[test]
fn checkpoints_round_trip_and_reject_damage() {
    let dir = tempfile::tempdir().unwrap();
    let m = model();
    let path = dir.path().join("m.ckpt");
    m.save(&path, serde_json::json!({"note": "test"})).unwrap();
    let back = EmoModel::load(&path).unwrap();
    let img = ImageInput::Feature(feature(8));
    assert_eq!(m.logits(&img, &[BOS, 70, 80]).unwrap(), back.logits(&img, &[BOS, 70, 80]).unwrap());

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(EmoModel::load(&path), Err(ModelError::CheckpointCorrupt(_))));

    let vocab = Vocabulary::new(VocabConfig::default()).unwrap();
    let other = Vocabulary::new(VocabConfig { time_shift_bins: 50, velocity_bins: 32 }).unwrap();
    let p = VaPredictor::new(&vocab, VaPredictorConfig::default(), 1).unwrap();
    let pp = dir.path().join("va.ckpt");
    p.save(&pp).unwrap();
    assert_eq!(VaPredictor::load(&pp, &vocab).unwrap().predict_va(&[BOS, 60]).unwrap(), p.predict_va(&[BOS, 60]).unwrap());
    assert!(matches!(VaPredictor::load(&pp, &other), Err(ModelError::VocabMismatch(_))));
    assert!(matches!(VaPredictor::load(&dir.path().join("none"), &vocab), Err(ModelError::WeightsMissing(_))));
}

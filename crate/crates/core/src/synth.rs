//! Small synthetic corpora for smoke runs and tests.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::midi::{write_midi, MidiPiece, NoteEvent};
use crate::pairing::{ItemKind, TaggedItem, VaPoint};
use crate::tokenizer::{encode, Token, TokenId, Vocabulary};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("synthetic dataset I/O: {0}")]
    Io(String),
}

fn io<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> SynthError + '_ {
    move |e| SynthError::Io(format!("{}: {e}", path.display()))
}

const TPB: u16 = 480;
const MAJOR: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];
const MINOR: [u8; 7] = [0, 2, 3, 5, 7, 8, 10];

/// A monophonic phrase whose mode, register, pace and loudness follow the VA
/// point: major above valence 5, faster and louder with arousal. Notes are
/// added until the phrase covers `span_steps` sixteenth-note steps.
pub fn va_phrase<R: Rng>(va: &VaPoint, span_steps: u64, rng: &mut R) -> MidiPiece {
    let scale = if va.valence >= 5.0 { MAJOR } else { MINOR };
    let root = 48 + (va.valence.round() as u8) * 2;
    let step_ticks = TPB as u64 / 4;
    let dur_steps = (11.0 - va.arousal).round().clamp(2.0, 8.0) as u64;
    let notes = span_steps.div_ceil(dur_steps).max(1) as usize;
    let velocity = (30.0 + va.arousal * 10.0).round().clamp(1.0, 127.0) as u8;
    let mut degree = rng.gen_range(0..7i32);
    let mut t = 0u64;
    let mut out = Vec::with_capacity(notes);
    for _ in 0..notes {
        degree = (degree + rng.gen_range(-2..=2)).clamp(0, 13);
        let pitch = root + 12 * (degree / 7) as u8 + scale[(degree % 7) as usize];
        let dur = dur_steps * step_ticks;
        out.push(NoteEvent::new(pitch, t, dur, velocity).expect("valid synthetic note"));
        t += dur;
    }
    MidiPiece::new(TPB, crate::midi::DEFAULT_TEMPO_US_PER_BEAT, out).expect("valid synthetic piece")
}

/// `32 x 32` RGB image: red grows with valence, green with arousal, and the
/// stripe frequency rises with arousal.
pub fn va_image(va: &VaPoint) -> image::RgbImage {
    let (v, a) = ((va.valence - 1.0) / 8.0, (va.arousal - 1.0) / 8.0);
    let period = 2 + ((1.0 - a) * 10.0) as u32;
    image::RgbImage::from_fn(32, 32, |x, y| {
        let stripe = ((x + y) / period) % 2 == 0;
        let s = if stripe { 1.0 } else { 0.6 };
        image::Rgb([(255.0 * v * s) as u8, (255.0 * a * s) as u8, (255.0 * (1.0 - v) * s) as u8])
    })
}

#[derive(Debug, Clone)]
pub struct DeskDataset {
    pub root: PathBuf,
    pub midi_catalog: PathBuf,
    pub image_catalog: PathBuf,
    pub midis: Vec<TaggedItem>,
    pub images: Vec<TaggedItem>,
}

/// Writes `pairs` phrase MIDIs and `pairs` images with VA labels on `[1, 9]`,
/// plus `midis.csv` and `images.csv` catalogs, under `dir`. Phrases span
/// at least 40 steps, so each has two full 16-step measures, and encode to
/// at most 64 tokens.
pub fn write_desk_dataset(dir: &Path, pairs: usize, seed: u64) -> Result<DeskDataset, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for sub in ["midis", "images"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(io(dir))?;
    }
    let mut midis = Vec::new();
    let mut images = Vec::new();
    let mut midi_rows = String::from("id,path,valence,arousal\n");
    let mut image_rows = String::from("id,path,valence,arousal\n");
    for i in 0..pairs {
        let va = VaPoint::clamped(rng.gen_range(1.0..9.0), rng.gen_range(1.0..9.0));
        let piece = va_phrase(&va, 40, &mut rng);
        let (mid_rel, img_rel) = (format!("midis/m{i:02}.mid"), format!("images/i{i:02}.png"));
        let mid = dir.join(&mid_rel);
        std::fs::write(&mid, write_midi(&piece)).map_err(io(&mid))?;
        let img_va =
            VaPoint::clamped(va.valence + rng.gen_range(-0.3..0.3), va.arousal + rng.gen_range(-0.3..0.3));
        let img = dir.join(&img_rel);
        va_image(&img_va).save(&img).map_err(io(&img))?;
        midi_rows.push_str(&format!("m{i:02},{mid_rel},{},{}\n", va.valence, va.arousal));
        image_rows.push_str(&format!("i{i:02},{img_rel},{},{}\n", img_va.valence, img_va.arousal));
        midis.push(TaggedItem { id: format!("m{i:02}"), kind: ItemKind::Midi, va, payload_path: mid });
        images.push(TaggedItem { id: format!("i{i:02}"), kind: ItemKind::Image, va: img_va, payload_path: img });
    }
    let (midi_catalog, image_catalog) = (dir.join("midis.csv"), dir.join("images.csv"));
    std::fs::write(&midi_catalog, midi_rows).map_err(io(&midi_catalog))?;
    std::fs::write(&image_catalog, image_rows).map_err(io(&image_catalog))?;
    Ok(DeskDataset { root: dir.to_path_buf(), midi_catalog, image_catalog, midis, images })
}

/// Linear VA labels of a token histogram `h` (non-special tokens, L1-normalized):
///
/// * valence = 1 + 16 · Σ_p h[NOTE_ON p] · (p − 36) / 59, for pitches 36..=95
/// * arousal = 1 + 16 · Σ_p h[NOTE_ON p] · (95 − p) / 59, for pitches 36..=95
///
/// Both stay inside `[1, 9]` for phrases drawn from [`random_phrase`].
pub fn linear_va_label(hist: &[f64], vocab: &Vocabulary) -> VaPoint {
    let mut valence = 1.0;
    let mut arousal = 1.0;
    for p in 36..=95u8 {
        let on = vocab.token_to_id(Token::NoteOn(p)).expect("note-on id") as usize;
        valence += 16.0 * hist[on] * (p as f64 - 36.0) / 59.0;
        arousal += 16.0 * hist[on] * (95.0 - p as f64) / 59.0;
    }
    VaPoint::clamped(valence, arousal)
}

/// Random phrase with notes in 36..=95 and varied density.
pub fn random_phrase<R: Rng>(rng: &mut R) -> MidiPiece {
    let centre = rng.gen_range(42..=89i32);
    let n = rng.gen_range(3..=14);
    let step = TPB as u64 / 4;
    let max_gap = rng.gen_range(0..=6u64);
    let mut t = 0;
    let mut notes = Vec::with_capacity(n);
    for _ in 0..n {
        let pitch = (centre + rng.gen_range(-6..=6)).clamp(36, 95) as u8;
        let dur = rng.gen_range(1..=4u64) * step;
        notes.push(NoteEvent::new(pitch, t, dur, rng.gen_range(20..=120)).expect("valid note"));
        t += dur * rng.gen_range(0..=1u64) + rng.gen_range(0..=max_gap) * step;
    }
    MidiPiece::new(TPB, crate::midi::DEFAULT_TEMPO_US_PER_BEAT, notes).expect("valid piece")
}

/// `n` tokenized random phrases labelled by [`linear_va_label`].
pub fn linear_va_corpus(vocab: &Vocabulary, n: usize, steps_per_beat: u32, seed: u64) -> Vec<(Vec<TokenId>, VaPoint)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let piece = random_phrase(&mut rng);
            let ids = encode(&piece, vocab, steps_per_beat, 512).ids().to_vec();
            let hist = crate::model::token_histogram(&ids, vocab.size());
            let va = linear_va_label(&hist, vocab);
            (ids, va)
        })
        .collect()
}

/// Reduced-dimension run settings for a desk dataset: `d = 64`, two blocks
/// each side, 64-token sequences, lr `1e-3`, catalogs referenced relative to
/// the dataset root.
pub fn desk_run_config() -> crate::config::RunConfig {
    let mut cfg = crate::config::RunConfig::default();
    cfg.model.encoder_blocks = 2;
    cfg.model.decoder_blocks = 2;
    cfg.model.model_dim = 64;
    cfg.model.head_count = 4;
    cfg.model.ff_dim = 128;
    cfg.model.max_len = 64;
    cfg.train.lr = 1e-3;
    cfg.generate.max_len = 64;
    cfg.data.midi_catalog = Some(PathBuf::from("midis.csv"));
    cfg.data.image_catalog = Some(PathBuf::from("images.csv"));
    cfg
}

//! Event-token view of a [`MidiPiece`].
//!
//! Token-ID layout (stable, contiguous):
//!
//! | ids                         | token                  |
//! |-----------------------------|------------------------|
//! | 0, 1, 2                     | PAD, BOS, EOS          |
//! | 3 ..= 130                   | NOTE_ON(pitch)         |
//! | 131 ..= 258                 | NOTE_OFF(pitch)        |
//! | 259 .. 259+K                | TIME_SHIFT(1 ..= K)    |
//! | 259+K .. 259+K+V            | VELOCITY(bin 0 .. V)   |
//!
//! One TIME_SHIFT step is one grid step at the configured steps per beat.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::midi::{note_steps, MidiPiece, NoteEvent, DEFAULT_TEMPO_US_PER_BEAT};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
const NOTE_ON_BASE: TokenId = 3;
const NOTE_OFF_BASE: TokenId = NOTE_ON_BASE + 128;
const TIME_SHIFT_BASE: TokenId = NOTE_OFF_BASE + 128;

/// Ticks per beat of decoded pieces is the largest multiple of the grid
/// resolution not above this value.
const DECODE_TICKS_PER_BEAT: u32 = 480;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    OutOfRange { id: TokenId, size: usize },
    #[error("malformed token sequence: {0}")]
    Malformed(String),
    #[error("vocabulary mismatch: expected hash {expected}, found {found}")]
    VocabMismatch { expected: String, found: String },
    #[error("token dataset I/O: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Pad,
    Bos,
    Eos,
    NoteOn(u8),
    NoteOff(u8),
    /// Advance by this many grid steps (1 ..= K).
    TimeShift(u32),
    /// Switch the current velocity bin.
    Velocity(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabConfig {
    pub time_shift_bins: u32,
    pub velocity_bins: u32,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self { time_shift_bins: 100, velocity_bins: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    config: VocabConfig,
    velocity_lo: Vec<u8>,
    velocity_hi: Vec<u8>,
}

impl Vocabulary {
    pub fn new(config: VocabConfig) -> Result<Self, TokenizerError> {
        if config.time_shift_bins == 0 {
            return Err(TokenizerError::InvalidVocabulary("time_shift_bins must be >= 1".into()));
        }
        if config.velocity_bins == 0 || config.velocity_bins > 127 {
            return Err(TokenizerError::InvalidVocabulary(
                "velocity_bins must lie in 1..=127".into(),
            ));
        }
        let v = config.velocity_bins as usize;
        let mut lo = vec![u8::MAX; v];
        let mut hi = vec![0u8; v];
        for vel in 1..=127u8 {
            let b = velocity_bin_raw(vel, config.velocity_bins) as usize;
            lo[b] = lo[b].min(vel);
            hi[b] = hi[b].max(vel);
        }
        Ok(Self { config, velocity_lo: lo, velocity_hi: hi })
    }

    pub fn config(&self) -> VocabConfig {
        self.config
    }

    pub fn size(&self) -> usize {
        259 + self.config.time_shift_bins as usize + self.config.velocity_bins as usize
    }

    fn velocity_base(&self) -> TokenId {
        TIME_SHIFT_BASE + self.config.time_shift_bins
    }

    pub fn token_to_id(&self, token: Token) -> Result<TokenId, TokenizerError> {
        let id = match token {
            Token::Pad => PAD,
            Token::Bos => BOS,
            Token::Eos => EOS,
            Token::NoteOn(p) if p < 128 => NOTE_ON_BASE + TokenId::from(p),
            Token::NoteOff(p) if p < 128 => NOTE_OFF_BASE + TokenId::from(p),
            Token::TimeShift(k) if (1..=self.config.time_shift_bins).contains(&k) => {
                TIME_SHIFT_BASE + k - 1
            }
            Token::Velocity(b) if b < self.config.velocity_bins => self.velocity_base() + b,
            other => {
                return Err(TokenizerError::InvalidVocabulary(format!(
                    "{other:?} not representable"
                )))
            }
        };
        Ok(id)
    }

    pub fn id_to_token(&self, id: TokenId) -> Result<Token, TokenizerError> {
        let tok = match id {
            PAD => Token::Pad,
            BOS => Token::Bos,
            EOS => Token::Eos,
            i if i < NOTE_OFF_BASE => Token::NoteOn((i - NOTE_ON_BASE) as u8),
            i if i < TIME_SHIFT_BASE => Token::NoteOff((i - NOTE_OFF_BASE) as u8),
            i if i < self.velocity_base() => Token::TimeShift(i - TIME_SHIFT_BASE + 1),
            i if (i as usize) < self.size() => Token::Velocity(i - self.velocity_base()),
            i => return Err(TokenizerError::OutOfRange { id: i, size: self.size() }),
        };
        Ok(tok)
    }

    /// True for PAD, BOS and EOS.
    pub fn is_special(id: TokenId) -> bool {
        id < NOTE_ON_BASE
    }

    pub fn velocity_bin(&self, velocity: u8) -> u32 {
        velocity_bin_raw(velocity.clamp(1, 127), self.config.velocity_bins)
    }

    /// Representative velocity of a bin: the middle of the velocities it holds.
    pub fn bin_velocity(&self, bin: u32) -> u8 {
        let b = bin as usize;
        ((u16::from(self.velocity_lo[b]) + u16::from(self.velocity_hi[b])) / 2) as u8
    }

    /// Short stable fingerprint of the token layout.
    pub fn hash(&self) -> String {
        let desc = format!(
            "specials=PAD,BOS,EOS;note_on=128;note_off=128;time_shift={};velocity={}",
            self.config.time_shift_bins, self.config.velocity_bins
        );
        hex::encode(&Sha256::digest(desc.as_bytes())[..8])
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new(VocabConfig::default()).expect("default vocabulary is valid")
    }
}

fn velocity_bin_raw(velocity: u8, bins: u32) -> u32 {
    (u32::from(velocity) - 1) * bins / 127
}

/// Token IDs with the model's maximum length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    max_len: usize,
}

impl TokenSequence {
    /// Validates ids against the vocabulary and the sequence-shape rules.
    pub fn new(ids: Vec<TokenId>, max_len: usize, vocab: &Vocabulary) -> Result<Self, TokenizerError> {
        if ids.len() > max_len {
            return Err(TokenizerError::Malformed(format!(
                "length {} exceeds max_len {max_len}",
                ids.len()
            )));
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab.size()) {
            return Err(TokenizerError::OutOfRange { id, size: vocab.size() });
        }
        if ids.first() != Some(&BOS) {
            return Err(TokenizerError::Malformed("sequence must start with BOS".into()));
        }
        if let Some(first_pad) = ids.iter().position(|&i| i == PAD) {
            if ids[first_pad..].iter().any(|&i| i != PAD) {
                return Err(TokenizerError::Malformed("PAD inside sequence".into()));
            }
        }
        Ok(Self { ids, max_len })
    }

    /// Accepts ids without validation; used for raw model output.
    pub fn from_raw(ids: Vec<TokenId>, max_len: usize) -> Self {
        Self { ids, max_len }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids right-padded with PAD to `max_len`.
    pub fn padded(&self) -> Vec<TokenId> {
        let mut v = self.ids.clone();
        v.resize(self.max_len.max(v.len()), PAD);
        v
    }

    pub fn ends_with_eos(&self) -> bool {
        self.ids.last() == Some(&EOS)
    }
}

#[derive(Debug, Clone, Copy)]
struct GridNote {
    pitch: u8,
    start: usize,
    end: usize,
    bin: u32,
}

fn quantize(piece: &MidiPiece, vocab: &Vocabulary, steps_per_beat: u32) -> Vec<GridNote> {
    let mut notes: Vec<GridNote> = piece
        .notes()
        .iter()
        .map(|n| {
            let (start, end) = note_steps(n, piece.ticks_per_beat(), steps_per_beat);
            GridNote { pitch: n.pitch, start, end, bin: vocab.velocity_bin(n.velocity) }
        })
        .collect();
    notes.sort_by_key(|n| (n.start, n.pitch));
    // Quantization can make same-pitch notes overlap; cut the earlier one.
    let mut last: [Option<usize>; 128] = [None; 128];
    let mut keep = vec![true; notes.len()];
    for i in 0..notes.len() {
        let p = usize::from(notes[i].pitch);
        if let Some(j) = last[p] {
            if notes[j].end > notes[i].start {
                if notes[j].start == notes[i].start {
                    notes[i].end = notes[i].end.max(notes[j].end);
                    keep[j] = false;
                } else {
                    notes[j].end = notes[i].start;
                }
            }
        }
        last[p] = Some(i);
    }
    notes.into_iter().zip(keep).filter_map(|(n, k)| k.then_some(n)).collect()
}

/// Encodes a piece as BOS, grouped events, EOS.
///
/// Per grid step: TIME_SHIFT tokens covering the gap since the previous
/// event step (largest bin first), then NOTE_OFFs, then NOTE_ONs, each in
/// ascending pitch, with a VELOCITY token ahead of any NOTE_ON whose bin
/// differs from the current one. If the stream does not fit in `max_len`
/// it is cut at an event boundary and carries no EOS.
pub fn encode(
    piece: &MidiPiece,
    vocab: &Vocabulary,
    steps_per_beat: u32,
    max_len: usize,
) -> TokenSequence {
    assert!(max_len >= 2, "max_len must leave room for BOS and EOS");
    let notes = quantize(piece, vocab, steps_per_beat);

    // (step, kind: 0 = off / 1 = on, pitch, bin)
    let mut boundaries: Vec<(usize, u8, u8, u32)> = Vec::with_capacity(notes.len() * 2);
    for n in &notes {
        boundaries.push((n.start, 1, n.pitch, n.bin));
        boundaries.push((n.end, 0, n.pitch, n.bin));
    }
    boundaries.sort_by_key(|&(step, kind, pitch, _)| (step, kind, pitch));

    let k = vocab.config().time_shift_bins as usize;
    let tid = |t| vocab.token_to_id(t).expect("token within vocabulary");
    let mut events: Vec<Vec<TokenId>> = Vec::new();
    let mut step = 0usize;
    let mut bin: Option<u32> = None;
    for (at, kind, pitch, b) in boundaries {
        let mut gap = at - step;
        while gap > 0 {
            let shift = gap.min(k);
            events.push(vec![tid(Token::TimeShift(shift as u32))]);
            gap -= shift;
        }
        step = at;
        if kind == 0 {
            events.push(vec![tid(Token::NoteOff(pitch))]);
        } else if bin == Some(b) {
            events.push(vec![tid(Token::NoteOn(pitch))]);
        } else {
            bin = Some(b);
            events.push(vec![tid(Token::Velocity(b)), tid(Token::NoteOn(pitch))]);
        }
    }

    let total: usize = events.iter().map(Vec::len).sum();
    let mut ids = Vec::with_capacity((total + 2).min(max_len));
    ids.push(BOS);
    if total + 2 <= max_len {
        events.iter().for_each(|e| ids.extend_from_slice(e));
        ids.push(EOS);
    } else {
        for e in &events {
            if ids.len() + e.len() > max_len {
                break;
            }
            ids.extend_from_slice(e);
        }
    }
    TokenSequence { ids, max_len }
}

/// Interprets any id stream as a piece. Never fails: out-of-range ids, PAD,
/// stray BOS and unmatched NOTE_OFFs are skipped; EOS ends the stream;
/// notes still open at the end are closed there with at least one step.
pub fn decode(tokens: &[TokenId], vocab: &Vocabulary, steps_per_beat: u32) -> MidiPiece {
    let steps_per_beat = steps_per_beat.max(1);
    let ticks_per_step = u64::from((DECODE_TICKS_PER_BEAT / steps_per_beat).max(1));
    let tpb = (u64::from(steps_per_beat) * ticks_per_step).min(0x7FFF) as u16;

    let mut step = 0u64;
    let mut bin = vocab.velocity_bin(64);
    let mut open: [Option<(u64, u32)>; 128] = [None; 128];
    let mut notes = Vec::new();
    let close = |pitch: u8, start: u64, end: u64, bin: u32, notes: &mut Vec<NoteEvent>| {
        notes.push(NoteEvent {
            pitch,
            onset: start * ticks_per_step,
            duration: (end.max(start + 1) - start) * ticks_per_step,
            velocity: vocab.bin_velocity(bin),
        });
    };

    for &id in tokens {
        let Ok(tok) = vocab.id_to_token(id) else { continue };
        match tok {
            Token::Pad | Token::Bos => {}
            Token::Eos => break,
            Token::TimeShift(k) => step += u64::from(k),
            Token::Velocity(b) => bin = b,
            Token::NoteOn(p) => {
                if let Some((start, b)) = open[usize::from(p)].replace((step, bin)) {
                    if step > start {
                        close(p, start, step, b, &mut notes);
                    }
                }
            }
            Token::NoteOff(p) => {
                if let Some((start, b)) = open[usize::from(p)].take() {
                    close(p, start, step, b, &mut notes);
                }
            }
        }
    }
    for (p, slot) in open.iter().enumerate() {
        if let Some((start, b)) = *slot {
            close(p as u8, start, step, b, &mut notes);
        }
    }
    MidiPiece::new(tpb.max(1), DEFAULT_TEMPO_US_PER_BEAT, notes)
        .expect("decoded notes satisfy piece invariants")
}

// --- tokenized dataset files -------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub id: String,
    pub tokens: Vec<TokenId>,
    pub vocab_hash: String,
}

/// Writes one JSON object per line.
pub fn write_token_records<W: Write>(mut out: W, records: &[TokenRecord]) -> Result<(), TokenizerError> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| TokenizerError::Io(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| TokenizerError::Io(e.to_string()))?;
    }
    Ok(())
}

/// Reads records and rejects any whose vocabulary hash differs from `vocab`.
pub fn read_token_records<R: BufRead>(
    input: R,
    vocab: &Vocabulary,
) -> Result<Vec<TokenRecord>, TokenizerError> {
    let expected = vocab.hash();
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| TokenizerError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TokenRecord = serde_json::from_str(&line)
            .map_err(|e| TokenizerError::Io(format!("line {}: {e}", n + 1)))?;
        if rec.vocab_hash != expected {
            return Err(TokenizerError::VocabMismatch { expected, found: rec.vocab_hash });
        }
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn piece(notes: &[(u8, u64, u64, u8)]) -> MidiPiece {
        let notes = notes
            .iter()
            .map(|&(p, o, d, v)| NoteEvent::new(p, o, d, v).unwrap())
            .collect();
        MidiPiece::new(480, DEFAULT_TEMPO_US_PER_BEAT, notes).unwrap()
    }

    #[test]
    fn default_layout_is_391_tokens() {
        let v = Vocabulary::default();
        assert_eq!(v.size(), 391);
        assert_eq!(v.token_to_id(Token::NoteOn(0)).unwrap(), 3);
        assert_eq!(v.token_to_id(Token::NoteOff(127)).unwrap(), 258);
        assert_eq!(v.token_to_id(Token::TimeShift(1)).unwrap(), 259);
        assert_eq!(v.token_to_id(Token::TimeShift(100)).unwrap(), 358);
        assert_eq!(v.token_to_id(Token::Velocity(0)).unwrap(), 359);
        assert_eq!(v.token_to_id(Token::Velocity(31)).unwrap(), 390);
        assert!(v.id_to_token(391).is_err());
        assert!(v.token_to_id(Token::TimeShift(0)).is_err());
    }

    #[test]
    fn id_token_bijection() {
        let v = Vocabulary::new(VocabConfig { time_shift_bins: 7, velocity_bins: 5 }).unwrap();
        for id in 0..v.size() as TokenId {
            assert_eq!(v.token_to_id(v.id_to_token(id).unwrap()).unwrap(), id);
        }
    }

    #[test]
    fn velocity_bins_are_uniform_and_centers_round_trip() {
        let v = Vocabulary::default();
        assert_eq!(v.velocity_bin(1), 0);
        assert_eq!(v.velocity_bin(127), 31);
        for b in 0..32 {
            assert_eq!(v.velocity_bin(v.bin_velocity(b)), b);
        }
        let sizes: Vec<_> = (0..32).map(|b| (1..=127u8).filter(|&x| v.velocity_bin(x) == b).count()).collect();
        assert!(sizes.iter().all(|&s| s == 3 || s == 4));
    }

    #[test]
    fn empty_piece_is_bos_eos() {
        let v = Vocabulary::default();
        let t = encode(&MidiPiece::empty(480), &v, 4, 16);
        assert_eq!(t.ids(), &[BOS, EOS]);
        assert!(decode(t.ids(), &v, 4).is_empty());
    }

    #[test]
    fn single_quarter_note_trace() {
        let v = Vocabulary::default();
        let t = encode(&piece(&[(60, 0, 480, 64)]), &v, 4, 256);
        let expect = [
            BOS,
            v.token_to_id(Token::Velocity(v.velocity_bin(64))).unwrap(),
            v.token_to_id(Token::NoteOn(60)).unwrap(),
            v.token_to_id(Token::TimeShift(4)).unwrap(),
            v.token_to_id(Token::NoteOff(60)).unwrap(),
            EOS,
        ];
        assert_eq!(t.ids(), &expect);
    }

    #[test]
    fn long_gaps_split_largest_first() {
        let v = Vocabulary::new(VocabConfig { time_shift_bins: 10, velocity_bins: 32 }).unwrap();
        // 25 steps of silence before the note
        let t = encode(&piece(&[(60, 25 * 120, 120, 64)]), &v, 4, 64);
        let toks: Vec<_> = t.ids().iter().map(|&i| v.id_to_token(i).unwrap()).collect();
        assert_eq!(
            &toks[1..4],
            &[Token::TimeShift(10), Token::TimeShift(10), Token::TimeShift(5)]
        );
    }

    #[test]
    fn truncation_keeps_velocity_with_its_note() {
        let v = Vocabulary::default();
        let p = piece(&[(60, 0, 480, 64), (64, 480, 480, 100)]);
        let full = encode(&p, &v, 4, 256);
        assert_eq!(full.len(), 10);
        // BOS VEL ON TS OFF | VEL ON ... ; max_len 6 cannot hold the second VEL+ON pair
        let cut = encode(&p, &v, 4, 6);
        assert_eq!(cut.ids(), &full.ids()[..5]);
        assert!(!cut.ends_with_eos());
    }

    #[test]
    fn unclosed_note_gets_one_step() {
        let v = Vocabulary::default();
        let ids = [BOS, v.token_to_id(Token::NoteOn(60)).unwrap(), EOS];
        let p = decode(&ids, &v, 4);
        assert_eq!(p.notes().len(), 1);
        assert_eq!(p.notes()[0].duration, 120);
        assert_eq!(p.ticks_per_beat(), 480);
    }

    #[test]
    fn stray_tokens_are_tolerated() {
        let v = Vocabulary::default();
        let off = v.token_to_id(Token::NoteOff(61)).unwrap();
        let p = decode(&[PAD, off, BOS, 9999, PAD], &v, 4);
        assert!(p.is_empty());
    }

    #[test]
    fn sequence_validation() {
        let v = Vocabulary::default();
        assert!(TokenSequence::new(vec![BOS, EOS, PAD], 4, &v).is_ok());
        assert!(TokenSequence::new(vec![BOS, PAD, EOS], 4, &v).is_err());
        assert!(TokenSequence::new(vec![EOS], 4, &v).is_err());
        assert!(TokenSequence::new(vec![BOS, 5000], 4, &v).is_err());
        assert!(TokenSequence::new(vec![BOS; 5], 4, &v).is_err());
    }

    #[test]
    fn token_records_reject_foreign_vocab() {
        let v = Vocabulary::default();
        let rec = TokenRecord { id: "a".into(), tokens: vec![BOS, EOS], vocab_hash: v.hash() };
        let mut buf = Vec::new();
        write_token_records(&mut buf, std::slice::from_ref(&rec)).unwrap();
        assert_eq!(read_token_records(&buf[..], &v).unwrap(), vec![rec]);
        let other = Vocabulary::new(VocabConfig { time_shift_bins: 50, velocity_bins: 32 }).unwrap();
        assert!(matches!(
            read_token_records(&buf[..], &other),
            Err(TokenizerError::VocabMismatch { .. })
        ));
    }
}

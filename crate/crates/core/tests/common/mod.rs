#![allow(dead_code)]

pub mod grad;

use proptest::prelude::*;
use vamidi::midi::{MidiPiece, NoteEvent};

pub fn arb_piece() -> impl Strategy<Value = MidiPiece> {
    let note = (0u8..128, 0u64..20_000, 1u64..4_000, 1u8..128);
    (
        prop_oneof![Just(480u16), Just(96u16), 1u16..0x8000],
        1u32..0x100_0000,
        prop::collection::vec(note, 0..40),
    )
        .prop_map(|(tpb, tempo, raw)| piece_from(tpb, tempo, raw))
}

pub fn piece_from(tpb: u16, tempo: u32, raw: Vec<(u8, u64, u64, u8)>) -> MidiPiece {
    let notes = raw
        .into_iter()
        .map(|(p, o, d, v)| NoteEvent::new(p, o, d, v).unwrap())
        .collect();
    MidiPiece::new(tpb, tempo, notes).unwrap()
}

/// Naive metric implementations working straight from note lists, with no
/// piano roll and no shared helpers from the library.
pub mod oracle {
    use vamidi::midi::MidiPiece;

    fn span(onset: u64, dur: u64, tpb: u64, spb: u64) -> (u64, u64) {
        // smallest step whose start is > onset is floor+1; enumerate instead
        let mut start = 0;
        while (start + 1) * tpb <= onset * spb {
            start += 1;
        }
        let mut end = start + 1;
        while end * tpb < (onset + dur) * spb {
            end += 1;
        }
        (start, end)
    }

    fn spans(p: &MidiPiece, spb: u64) -> Vec<(u8, u64, u64)> {
        p.notes()
            .iter()
            .map(|n| {
                let (s, e) = span(n.onset, n.duration, u64::from(p.ticks_per_beat()), spb);
                (n.pitch, s, e)
            })
            .collect()
    }

    pub fn entropy(p: &MidiPiece) -> f64 {
        let n = p.notes().len() as f64;
        let mut h = 0.0;
        for pitch in 0..=127u8 {
            let c = p.notes().iter().filter(|x| x.pitch == pitch).count() as f64;
            if c > 0.0 {
                h -= (c / n) * (c / n).ln() / std::f64::consts::LN_2;
            }
        }
        h
    }

    pub fn polyphony(p: &MidiPiece, spb: u64) -> f64 {
        let sp = spans(p, spb);
        let total = sp.iter().map(|s| s.2).max().unwrap_or(0);
        let (mut multi, mut sounding) = (0, 0);
        for t in 0..total {
            let mut pitches: Vec<u8> = sp.iter().filter(|s| s.1 <= t && t < s.2).map(|s| s.0).collect();
            pitches.sort();
            pitches.dedup();
            if !pitches.is_empty() {
                sounding += 1;
            }
            if pitches.len() >= 2 {
                multi += 1;
            }
        }
        if sounding == 0 { 0.0 } else { f64::from(multi) / f64::from(sounding) }
    }

    pub fn groove(p: &MidiPiece, spb: u64, spm: u64) -> Option<f64> {
        let sp = spans(p, spb);
        let total = sp.iter().map(|s| s.2).max().unwrap_or(0);
        let measures = total / spm;
        if measures < 2 {
            return None;
        }
        let onset = |t: u64| sp.iter().any(|s| s.1 == t);
        let mut acc = 0.0;
        for m in 0..measures - 1 {
            let d = (0..spm).filter(|&i| onset(m * spm + i) != onset((m + 1) * spm + i)).count();
            acc += d as f64 / spm as f64;
        }
        Some(1.0 - acc / (measures - 1) as f64)
    }
}

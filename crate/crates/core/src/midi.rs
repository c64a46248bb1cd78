//! Standard MIDI File reading and writing, plus piano-roll rasterization.
//!
//! Only what the rest of the crate needs is modelled: note events with a
//! single tempo. Controllers, pitch bend, sysex and channel identity are
//! skipped when parsing and never written.

use thiserror::Error;

pub const DEFAULT_TEMPO_US_PER_BEAT: u32 = 500_000;
pub const DEFAULT_STEPS_PER_BEAT: u32 = 4;

const MTHD: &[u8; 4] = b"MThd";
const MTRK: &[u8; 4] = b"MTrk";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MidiError {
    #[error("malformed MIDI header: {0}")]
    MalformedHeader(String),
    #[error("truncated track at byte {0}")]
    TruncatedTrack(usize),
    #[error("unsupported MIDI file: {0}")]
    UnsupportedFormat(String),
    #[error("invalid note: {0}")]
    InvalidNote(String),
    #[error("invalid piece: {0}")]
    InvalidPiece(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NoteEvent {
    pub pitch: u8,
    pub onset: u64,
    pub duration: u64,
    pub velocity: u8,
}

impl NoteEvent {
    pub fn new(pitch: u8, onset: u64, duration: u64, velocity: u8) -> Result<Self, MidiError> {
        if pitch > 127 {
            return Err(MidiError::InvalidNote(format!("pitch {pitch} outside 0..=127")));
        }
        if duration == 0 {
            return Err(MidiError::InvalidNote("duration must be at least one tick".into()));
        }
        if velocity == 0 || velocity > 127 {
            return Err(MidiError::InvalidNote(format!("velocity {velocity} outside 1..=127")));
        }
        Ok(Self { pitch, onset, duration, velocity })
    }

    pub fn end(&self) -> u64 {
        self.onset + self.duration
    }
}

/// A single-voice-per-pitch note list with its timing resolution.
///
/// Construction canonicalizes: notes are sorted by `(onset, pitch)` and
/// overlapping notes of the same pitch are resolved by truncating the
/// earlier note at the later onset (dropping it if nothing is left).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MidiPiece {
    ticks_per_beat: u16,
    tempo_us_per_beat: u32,
    notes: Vec<NoteEvent>,
}

impl MidiPiece {
    pub fn new(
        ticks_per_beat: u16,
        tempo_us_per_beat: u32,
        notes: Vec<NoteEvent>,
    ) -> Result<Self, MidiError> {
        if ticks_per_beat == 0 || ticks_per_beat > 0x7FFF {
            return Err(MidiError::InvalidPiece(format!(
                "ticks_per_beat {ticks_per_beat} outside 1..=32767"
            )));
        }
        if tempo_us_per_beat == 0 || tempo_us_per_beat > 0xFF_FFFF {
            return Err(MidiError::InvalidPiece(format!(
                "tempo {tempo_us_per_beat} not encodable in 24 bits"
            )));
        }
        for n in &notes {
            NoteEvent::new(n.pitch, n.onset, n.duration, n.velocity)?;
        }
        Ok(Self { ticks_per_beat, tempo_us_per_beat, notes: canonicalize(notes) })
    }

    pub fn empty(ticks_per_beat: u16) -> Self {
        Self {
            ticks_per_beat: ticks_per_beat.clamp(1, 0x7FFF),
            tempo_us_per_beat: DEFAULT_TEMPO_US_PER_BEAT,
            notes: Vec::new(),
        }
    }

    pub fn ticks_per_beat(&self) -> u16 {
        self.ticks_per_beat
    }

    pub fn tempo_us_per_beat(&self) -> u32 {
        self.tempo_us_per_beat
    }

    pub fn notes(&self) -> &[NoteEvent] {
        &self.notes
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    /// Tick at which the last note ends.
    pub fn end_tick(&self) -> u64 {
        self.notes.iter().map(NoteEvent::end).max().unwrap_or(0)
    }

    /// Shifts every pitch by `offset`; `None` if any pitch would leave 0..=127.
    pub fn transposed(&self, offset: i16) -> Option<Self> {
        let notes = self
            .notes
            .iter()
            .map(|n| {
                let p = i16::from(n.pitch) + offset;
                (0..=127).contains(&p).then(|| NoteEvent { pitch: p as u8, ..*n })
            })
            .collect::<Option<Vec<_>>>()?;
        Some(Self { notes, ..self.clone() })
    }
}

fn canonicalize(mut notes: Vec<NoteEvent>) -> Vec<NoteEvent> {
    notes.sort_by_key(|n| (n.onset, n.pitch, n.duration, n.velocity));
    let mut last_by_pitch: [Option<usize>; 128] = [None; 128];
    let mut keep = vec![true; notes.len()];
    for i in 0..notes.len() {
        let p = usize::from(notes[i].pitch);
        if let Some(j) = last_by_pitch[p] {
            if notes[j].end() > notes[i].onset {
                let d = notes[i].onset - notes[j].onset;
                if d == 0 {
                    keep[j] = false;
                } else {
                    notes[j].duration = d;
                }
            }
        }
        last_by_pitch[p] = Some(i);
    }
    notes
        .into_iter()
        .zip(keep)
        .filter_map(|(n, k)| k.then_some(n))
        .collect()
}

// --- variable-length quantities ---------------------------------------------

pub fn write_vlq(mut value: u32, out: &mut Vec<u8>) {
    debug_assert!(value <= 0x0FFF_FFFF);
    let mut buf = [0u8; 4];
    let mut i = 3;
    buf[i] = (value & 0x7F) as u8;
    value >>= 7;
    while value > 0 {
        i -= 1;
        buf[i] = (value & 0x7F) as u8 | 0x80;
        value >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}

/// Reads a VLQ at `*pos`, advancing it. At most four bytes are accepted.
pub fn read_vlq(bytes: &[u8], pos: &mut usize) -> Result<u32, MidiError> {
    let mut value = 0u32;
    for _ in 0..4 {
        let b = *bytes.get(*pos).ok_or(MidiError::TruncatedTrack(*pos))?;
        *pos += 1;
        value = (value << 7) | u32::from(b & 0x7F);
        if b & 0x80 == 0 {
            return Ok(value);
        }
    }
    Err(MidiError::UnsupportedFormat(format!(
        "variable-length quantity longer than 4 bytes ending at {}",
        *pos
    )))
}

// --- parsing -----------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum RawKind {
    Off,
    On(u8),
}

#[derive(Debug, Clone, Copy)]
struct RawNote {
    tick: u64,
    channel: u8,
    pitch: u8,
    kind: RawKind,
}

struct TrackData {
    notes: Vec<RawNote>,
    tempo: Option<(u64, u32)>,
    end_tick: u64,
}

fn be_u16(b: &[u8]) -> u16 {
    u16::from_be_bytes([b[0], b[1]])
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

/// Parses format 0 or format 1 SMF bytes into a canonical piece.
///
/// Format 1 tracks are merged by absolute tick. A Note-On is closed by the
/// next Note-Off (or zero-velocity Note-On) on the same channel and pitch;
/// notes still sounding at end of track end there.
pub fn parse_midi(bytes: &[u8]) -> Result<MidiPiece, MidiError> {
    if bytes.len() < 14 || &bytes[0..4] != MTHD {
        return Err(MidiError::MalformedHeader("missing MThd chunk".into()));
    }
    let header_len = be_u32(&bytes[4..8]) as usize;
    if header_len < 6 {
        return Err(MidiError::MalformedHeader(format!("header length {header_len} < 6")));
    }
    if bytes.len() < 8 + header_len {
        return Err(MidiError::MalformedHeader("header chunk runs past end of file".into()));
    }
    let format = be_u16(&bytes[8..10]);
    let ntracks = be_u16(&bytes[10..12]);
    let division = be_u16(&bytes[12..14]);
    match format {
        0 | 1 => {}
        2 => return Err(MidiError::UnsupportedFormat("format 2 (independent patterns)".into())),
        f => return Err(MidiError::MalformedHeader(format!("unknown format {f}"))),
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::UnsupportedFormat("SMPTE time division".into()));
    }
    if division == 0 {
        return Err(MidiError::MalformedHeader("zero ticks per beat".into()));
    }

    let mut pos = 8 + header_len;
    let mut tracks = Vec::new();
    while tracks.len() < usize::from(ntracks) && pos < bytes.len() {
        if bytes.len() < pos + 8 {
            return Err(MidiError::TruncatedTrack(pos));
        }
        let id = &bytes[pos..pos + 4];
        let len = be_u32(&bytes[pos + 4..pos + 8]) as usize;
        let start = pos + 8;
        let end = start.checked_add(len).ok_or(MidiError::TruncatedTrack(pos))?;
        if end > bytes.len() {
            return Err(MidiError::TruncatedTrack(bytes.len()));
        }
        if id == MTRK {
            tracks.push(parse_track(&bytes[start..end], start)?);
        }
        pos = end;
    }

    let tempo = tracks
        .iter()
        .filter_map(|t| t.tempo)
        .min_by_key(|&(tick, _)| tick)
        .map(|(_, t)| t)
        .unwrap_or(DEFAULT_TEMPO_US_PER_BEAT);

    let mut notes = Vec::new();
    for track in &tracks {
        close_track_notes(track, &mut notes);
    }
    MidiPiece::new(division, tempo.max(1), notes)
}

fn close_track_notes(track: &TrackData, out: &mut Vec<NoteEvent>) {
    // (channel, pitch) -> (onset, velocity)
    let mut open: std::collections::HashMap<(u8, u8), (u64, u8)> = Default::default();
    let close = |key: (u8, u8), onset: u64, vel: u8, end: u64, out: &mut Vec<NoteEvent>| {
        if end > onset {
            out.push(NoteEvent { pitch: key.1, onset, duration: end - onset, velocity: vel });
        }
    };
    for ev in &track.notes {
        let key = (ev.channel, ev.pitch);
        match ev.kind {
            RawKind::On(vel) => {
                if let Some((onset, v)) = open.insert(key, (ev.tick, vel)) {
                    close(key, onset, v, ev.tick, out);
                }
            }
            RawKind::Off => {
                if let Some((onset, v)) = open.remove(&key) {
                    close(key, onset, v, ev.tick, out);
                }
            }
        }
    }
    let mut rest: Vec<_> = open.into_iter().collect();
    rest.sort();
    for (key, (onset, v)) in rest {
        let end = track.end_tick.max(onset + 1);
        close(key, onset, v, end, out);
    }
}

fn parse_track(data: &[u8], base: usize) -> Result<TrackData, MidiError> {
    let trunc = |p: usize| MidiError::TruncatedTrack(base + p);
    let mut pos = 0usize;
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let mut notes = Vec::new();
    let mut tempo = None;

    while pos < data.len() {
        let delta = read_vlq(data, &mut pos).map_err(|e| match e {
            MidiError::TruncatedTrack(p) => trunc(p),
            other => other,
        })?;
        tick += u64::from(delta);
        let first = *data.get(pos).ok_or_else(|| trunc(pos))?;
        let status = if first & 0x80 != 0 {
            pos += 1;
            first
        } else {
            running.ok_or_else(|| {
                MidiError::MalformedHeader(format!("data byte without running status at {}", base + pos))
            })?
        };
        match status {
            0xFF => {
                running = None;
                let kind = *data.get(pos).ok_or_else(|| trunc(pos))?;
                pos += 1;
                let len = read_vlq(data, &mut pos).map_err(|_| trunc(pos))? as usize;
                let body = data.get(pos..pos + len).ok_or_else(|| trunc(data.len()))?;
                pos += len;
                match kind {
                    0x51 if len == 3 => {
                        let t = u32::from_be_bytes([0, body[0], body[1], body[2]]);
                        if tempo.is_none() && t > 0 {
                            tempo = Some((tick, t));
                        }
                    }
                    0x2F => break,
                    _ => {}
                }
            }
            0xF0 | 0xF7 => {
                running = None;
                let len = read_vlq(data, &mut pos).map_err(|_| trunc(pos))? as usize;
                if pos + len > data.len() {
                    return Err(trunc(data.len()));
                }
                pos += len;
            }
            0x80..=0xEF => {
                running = Some(status);
                let n = match status & 0xF0 {
                    0xC0 | 0xD0 => 1,
                    _ => 2,
                };
                let args = data.get(pos..pos + n).ok_or_else(|| trunc(data.len()))?;
                pos += n;
                let channel = status & 0x0F;
                match status & 0xF0 {
                    0x90 if args[1] > 0 => notes.push(RawNote {
                        tick,
                        channel,
                        pitch: args[0] & 0x7F,
                        kind: RawKind::On(args[1] & 0x7F),
                    }),
                    0x90 | 0x80 => notes.push(RawNote {
                        tick,
                        channel,
                        pitch: args[0] & 0x7F,
                        kind: RawKind::Off,
                    }),
                    _ => {}
                }
            }
            other => {
                return Err(MidiError::UnsupportedFormat(format!(
                    "system message {other:#04x} inside track at {}",
                    base + pos
                )))
            }
        }
    }
    Ok(TrackData { notes, tempo, end_tick: tick })
}

// --- writing -----------------------------------------------------------------

/// Emits a format-0 SMF: a tempo meta event, then note pairs in tick order
/// with Note-Offs ahead of Note-Ons at equal ticks.
pub fn write_midi(piece: &MidiPiece) -> Vec<u8> {
    let mut events: Vec<(u64, u8, u8, u8)> = Vec::with_capacity(piece.notes.len() * 2);
    for n in &piece.notes {
        events.push((n.onset, 1, n.pitch, n.velocity));
        events.push((n.end(), 0, n.pitch, 0));
    }
    events.sort_by_key(|&(tick, kind, pitch, _)| (tick, kind, pitch));

    let mut track = Vec::with_capacity(16 + events.len() * 5);
    track.extend_from_slice(&[0x00, 0xFF, 0x51, 0x03]);
    track.extend_from_slice(&piece.tempo_us_per_beat.to_be_bytes()[1..]);
    let mut last = 0u64;
    for (tick, kind, pitch, vel) in events {
        write_delta(tick - last, &mut track);
        last = tick;
        if kind == 1 {
            track.extend_from_slice(&[0x90, pitch, vel]);
        } else {
            track.extend_from_slice(&[0x80, pitch, 0x40]);
        }
    }
    track.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);

    let mut out = Vec::with_capacity(22 + track.len());
    out.extend_from_slice(MTHD);
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&piece.ticks_per_beat.to_be_bytes());
    out.extend_from_slice(MTRK);
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    out
}

// Deltas beyond the 28-bit VLQ range are split with empty text meta events.
fn write_delta(mut delta: u64, out: &mut Vec<u8>) {
    const MAX: u64 = 0x0FFF_FFFF;
    while delta > MAX {
        write_vlq(MAX as u32, out);
        out.extend_from_slice(&[0xFF, 0x01, 0x00]);
        delta -= MAX;
    }
    write_vlq(delta as u32, out);
}

// --- piano roll --------------------------------------------------------------

/// Binary pitch × time-step rasterization of a piece.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PianoRoll {
    steps_per_beat: u32,
    steps: usize,
    grid: Vec<bool>,
    onsets: Vec<bool>,
}

impl PianoRoll {
    pub fn steps_per_beat(&self) -> u32 {
        self.steps_per_beat
    }

    /// Number of time steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn shape(&self) -> (usize, usize) {
        (128, self.steps)
    }

    pub fn is_on(&self, pitch: u8, step: usize) -> bool {
        self.grid[usize::from(pitch) * self.steps + step]
    }

    pub fn is_onset(&self, pitch: u8, step: usize) -> bool {
        self.onsets[usize::from(pitch) * self.steps + step]
    }

    /// Number of sounding pitches at `step`.
    pub fn column_count(&self, step: usize) -> usize {
        (0..128u8).filter(|&p| self.is_on(p, step)).count()
    }

    /// True if any pitch starts at `step`.
    pub fn has_onset(&self, step: usize) -> bool {
        (0..128u8).any(|p| self.is_onset(p, step))
    }

    pub fn occupied_cells(&self) -> usize {
        self.grid.iter().filter(|&&b| b).count()
    }
}

/// Step range `[start, end)` covered by a note, always at least one step.
pub fn note_steps(note: &NoteEvent, ticks_per_beat: u16, steps_per_beat: u32) -> (usize, usize) {
    let tpb = u128::from(ticks_per_beat);
    let s = u128::from(steps_per_beat);
    let start = u128::from(note.onset) * s / tpb;
    let end = (u128::from(note.end()) * s).div_ceil(tpb);
    let start = start as usize;
    (start, (end as usize).max(start + 1))
}

pub fn to_piano_roll(piece: &MidiPiece, steps_per_beat: u32) -> PianoRoll {
    assert!(steps_per_beat > 0, "steps_per_beat must be positive");
    let spans: Vec<_> = piece
        .notes
        .iter()
        .map(|n| (n.pitch, note_steps(n, piece.ticks_per_beat, steps_per_beat)))
        .collect();
    let steps = spans.iter().map(|&(_, (_, e))| e).max().unwrap_or(0);
    let mut grid = vec![false; 128 * steps];
    let mut onsets = vec![false; 128 * steps];
    for (pitch, (start, end)) in spans {
        let row = usize::from(pitch) * steps;
        grid[row + start..row + end].iter_mut().for_each(|c| *c = true);
        onsets[row + start] = true;
    }
    PianoRoll { steps_per_beat, steps, grid, onsets }
}

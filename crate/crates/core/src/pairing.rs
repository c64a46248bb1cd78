//! Emotion-based pairing of MIDI pieces with images.
//!
//! Both catalogs carry (valence, arousal) annotations on the 1–9 scale. Each
//! MIDI piece is matched to the image nearest in VA space; images may be
//! reused. The resulting pairs are then split into train/test/val under a
//! seeded shuffle.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const VA_MIN: f64 = 1.0;
pub const VA_MAX: f64 = 9.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PairingError {
    #[error("degenerate source range [{0}, {1}]")]
    DegenerateRange(f64, f64),
    #[error("value {value} outside source range [{min}, {max}]")]
    OutOfRange { value: f64, min: f64, max: f64 },
    #[error("{0} catalog is empty")]
    EmptyCatalog(ItemKind),
    #[error("split counts {counts:?} sum to {sum}, but there are {pairs} pairs")]
    CountMismatch { counts: [usize; 3], sum: usize, pairs: usize },
    #[error("{file}: row {row}: {msg}")]
    BadRow { file: String, row: usize, msg: String },
    #[error("duplicate id {0:?} in catalog")]
    DuplicateId(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaPoint {
    pub valence: f64,
    pub arousal: f64,
}

impl VaPoint {
    /// Checks that both coordinates lie on the 1–9 scale.
    pub fn new(valence: f64, arousal: f64) -> Result<Self, PairingError> {
        for v in [valence, arousal] {
            if !(VA_MIN..=VA_MAX).contains(&v) {
                return Err(PairingError::OutOfRange { value: v, min: VA_MIN, max: VA_MAX });
            }
        }
        Ok(Self { valence, arousal })
    }

    /// Clamps into the 1–9 square; non-finite coordinates go to the centre.
    pub fn clamped(valence: f64, arousal: f64) -> Self {
        let c = |x: f64| if x.is_finite() { x.clamp(VA_MIN, VA_MAX) } else { 5.0 };
        Self { valence: c(valence), arousal: c(arousal) }
    }

    pub fn squared_distance(&self, other: &VaPoint) -> f64 {
        let dv = self.valence - other.valence;
        let da = self.arousal - other.arousal;
        dv * dv + da * da
    }
}

/// Affine map of `[source_min, source_max]` onto `[1, 9]`.
pub fn normalize_va(value: f64, source_min: f64, source_max: f64) -> Result<f64, PairingError> {
    if source_max <= source_min || !(source_max - source_min).is_finite() {
        return Err(PairingError::DegenerateRange(source_min, source_max));
    }
    if !(source_min..=source_max).contains(&value) {
        return Err(PairingError::OutOfRange { value, min: source_min, max: source_max });
    }
    Ok(VA_MIN + (VA_MAX - VA_MIN) * (value - source_min) / (source_max - source_min))
}

/// Reciprocal Euclidean distance in VA space. Coincident points have no
/// finite score and rank above every finite one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Similarity {
    Finite(f64),
    Identical,
}

impl Similarity {
    pub fn value(&self) -> f64 {
        match self {
            Similarity::Finite(s) => *s,
            Similarity::Identical => f64::INFINITY,
        }
    }
}

impl PartialOrd for Similarity {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self, other) {
            (Similarity::Identical, Similarity::Identical) => Some(Ordering::Equal),
            (Similarity::Identical, _) => Some(Ordering::Greater),
            (_, Similarity::Identical) => Some(Ordering::Less),
            (Similarity::Finite(a), Similarity::Finite(b)) => a.partial_cmp(b),
        }
    }
}

impl Serialize for Similarity {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Similarity::Finite(v) => s.serialize_f64(*v),
            Similarity::Identical => s.serialize_str("identical"),
        }
    }
}

impl<'de> Deserialize<'de> for Similarity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Tag(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Similarity::Finite(v)),
            Repr::Tag(t) if t == "identical" => Ok(Similarity::Identical),
            Repr::Tag(t) => Err(serde::de::Error::custom(format!("bad similarity {t:?}"))),
        }
    }
}

pub fn similarity(x: &VaPoint, y: &VaPoint) -> Similarity {
    let d2 = x.squared_distance(y);
    if d2 == 0.0 {
        Similarity::Identical
    } else {
        Similarity::Finite(1.0 / d2.sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemKind {
    Image,
    Midi,
}

impl fmt::Display for ItemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ItemKind::Image => "image",
            ItemKind::Midi => "midi",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedItem {
    pub id: String,
    pub kind: ItemKind,
    pub va: VaPoint,
    pub payload_path: PathBuf,
}

/// Emotion label to (valence, arousal), read from `label,valence,arousal` CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmotionDictionary {
    entries: BTreeMap<String, (f64, f64)>,
}

impl EmotionDictionary {
    pub fn from_entries<I: IntoIterator<Item = (String, (f64, f64))>>(it: I) -> Self {
        Self { entries: it.into_iter().map(|(k, v)| (k.to_lowercase(), v)).collect() }
    }

    pub fn load(path: &Path) -> Result<Self, PairingError> {
        let file = path.display().to_string();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| PairingError::Io(format!("{file}: {e}")))?;
        let mut entries = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 2;
            let bad = |msg: String| PairingError::BadRow { file: file.clone(), row, msg };
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            if rec.len() != 3 {
                return Err(bad(format!("expected 3 fields, found {}", rec.len())));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
            entries.insert(rec[0].trim().to_lowercase(), (num(&rec[1])?, num(&rec[2])?));
        }
        Ok(Self { entries })
    }

    pub fn get(&self, label: &str) -> Option<(f64, f64)> {
        self.entries.get(&label.trim().to_lowercase()).copied()
    }
}

/// Reads a catalog CSV with header `id,path,valence,arousal` or
/// `id,path,emotion_label` (the latter resolved through `dictionary`).
/// Raw values are mapped from `source_range` onto 1–9; relative paths are
/// resolved against the catalog's directory.
pub fn load_catalog(
    path: &Path,
    kind: ItemKind,
    dictionary: Option<&EmotionDictionary>,
    source_range: (f64, f64),
) -> Result<Vec<TaggedItem>, PairingError> {
    let file = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| PairingError::Io(format!("{file}: {e}")))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| PairingError::Io(format!("{file}: {e}")))?
        .iter()
        .map(|h| h.trim().to_lowercase())
        .collect();
    let labelled = match headers.iter().map(String::as_str).collect::<Vec<_>>()[..] {
        ["id", "path", "valence", "arousal"] => false,
        ["id", "path", "emotion_label"] => true,
        _ => {
            return Err(PairingError::BadRow {
                file,
                row: 1,
                msg: format!("unexpected header {headers:?}"),
            })
        }
    };
    if labelled && dictionary.is_none() {
        return Err(PairingError::BadRow {
            file,
            row: 1,
            msg: "emotion_label catalog needs a dictionary".into(),
        });
    }
    let base = path.parent().unwrap_or(Path::new(""));
    let mut items = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let bad = |msg: String| PairingError::BadRow { file: file.clone(), row, msg };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let id = rec[0].trim().to_string();
        if !seen.insert(id.clone()) {
            return Err(bad(format!("duplicate id {id:?}")));
        }
        let (v, a) = if labelled {
            dictionary
                .and_then(|d| d.get(&rec[2]))
                .ok_or_else(|| bad(format!("unknown emotion label {:?}", &rec[2])))?
        } else {
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
            (num(&rec[2])?, num(&rec[3])?)
        };
        let norm = |x| normalize_va(x, source_range.0, source_range.1).map_err(|e| bad(e.to_string()));
        let va = VaPoint { valence: norm(v)?, arousal: norm(a)? };
        let p = PathBuf::from(rec[1].trim());
        let payload_path = if p.is_absolute() { p } else { base.join(p) };
        items.push(TaggedItem { id, kind, va, payload_path });
    }
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub midi_id: String,
    pub image_id: String,
    pub similarity: Similarity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitTag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub pairs: Vec<PairRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_counts: Option<[usize; 3]>,
    #[serde(default)]
    pub config_hash: String,
}

impl PairManifest {
    pub fn by_split(&self, tag: SplitTag) -> impl Iterator<Item = &PairRecord> {
        self.pairs.iter().filter(move |p| p.split == Some(tag))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, PairingError> {
        serde_json::from_str(text).map_err(|e| PairingError::Io(format!("manifest: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<(), PairingError> {
        std::fs::write(path, self.to_json()).map_err(|e| PairingError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, PairingError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PairingError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Index of the image nearest to `midi` in VA space; ties go to the
/// smallest image id.
pub fn best_image(midi: &VaPoint, images: &[TaggedItem]) -> Option<usize> {
    images
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            midi.squared_distance(&a.va)
                .total_cmp(&midi.squared_distance(&b.va))
                .then_with(|| a.id.cmp(&b.id))
        })
        .map(|(i, _)| i)
}

/// Assigns every MIDI piece its most similar image, in ascending MIDI id order.
pub fn pair_datasets(midis: &[TaggedItem], images: &[TaggedItem]) -> Result<PairManifest, PairingError> {
    if midis.is_empty() {
        return Err(PairingError::EmptyCatalog(ItemKind::Midi));
    }
    if images.is_empty() {
        return Err(PairingError::EmptyCatalog(ItemKind::Image));
    }
    let mut order: Vec<&TaggedItem> = midis.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let pairs = order
        .into_iter()
        .map(|m| {
            let img = &images[best_image(&m.va, images).expect("images non-empty")];
            PairRecord {
                midi_id: m.id.clone(),
                image_id: img.id.clone(),
                similarity: similarity(&img.va, &m.va),
                split: None,
            }
        })
        .collect();
    Ok(PairManifest { pairs, seed: None, split_counts: None, config_hash: String::new() })
}

/// Shuffles pair indices under `seed`, then assigns the first `train`,
/// next `test` and last `val` of them. Pair order in the manifest is kept.
pub fn split(manifest: &PairManifest, counts: [usize; 3], seed: u64) -> Result<PairManifest, PairingError> {
    let sum: usize = counts.iter().sum();
    if sum != manifest.pairs.len() {
        return Err(PairingError::CountMismatch { counts, sum, pairs: manifest.pairs.len() });
    }
    let mut idx: Vec<usize> = (0..manifest.pairs.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = manifest.clone();
    for (rank, &i) in idx.iter().enumerate() {
        out.pairs[i].split = Some(if rank < counts[0] {
            SplitTag::Train
        } else if rank < counts[0] + counts[1] {
            SplitTag::Test
        } else {
            SplitTag::Val
        });
    }
    out.seed = Some(seed);
    out.split_counts = Some(counts);
    Ok(out)
}

/// Hex fingerprint of any serializable settings value.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, kind: ItemKind, v: f64, a: f64) -> TaggedItem {
        TaggedItem { id: id.into(), kind, va: VaPoint { valence: v, arousal: a }, payload_path: PathBuf::new() }
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        assert_eq!(normalize_va(-1.0, -1.0, 1.0).unwrap(), 1.0);
        assert_eq!(normalize_va(0.0, -1.0, 1.0).unwrap(), 5.0);
        assert_eq!(normalize_va(0.5, -1.0, 1.0).unwrap(), 7.0);
        assert_eq!(normalize_va(1.0, -1.0, 1.0).unwrap(), 9.0);
        assert!(matches!(normalize_va(0.0, 1.0, 1.0), Err(PairingError::DegenerateRange(..))));
        assert!(matches!(normalize_va(2.0, -1.0, 1.0), Err(PairingError::OutOfRange { .. })));
    }

    #[test]
    fn similarity_values_and_sentinel() {
        let x = VaPoint::new(5.0, 5.0).unwrap();
        let y = VaPoint::new(4.0, 4.0).unwrap();
        let Similarity::Finite(s) = similarity(&x, &y) else { panic!() };
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-13);
        assert_eq!(similarity(&x, &x), Similarity::Identical);
        assert!(Similarity::Identical > Similarity::Finite(1e300));
        let far = VaPoint::new(2.0, 2.0).unwrap();
        assert!(similarity(&x, &far) < similarity(&x, &y));
        assert_eq!(similarity(&x, &y), similarity(&y, &x));
    }

    #[test]
    fn similarity_serializes_sentinel_as_string() {
        let j = serde_json::to_string(&[Similarity::Finite(0.5), Similarity::Identical]).unwrap();
        assert_eq!(j, r#"[0.5,"identical"]"#);
        let back: Vec<Similarity> = serde_json::from_str(&j).unwrap();
        assert_eq!(back, vec![Similarity::Finite(0.5), Similarity::Identical]);
    }

    #[test]
    fn single_pair_and_tie_break() {
        let m = [item("m1", ItemKind::Midi, 5.0, 5.0)];
        let i = [item("b", ItemKind::Image, 6.0, 5.0), item("a", ItemKind::Image, 4.0, 5.0)];
        let man = pair_datasets(&m, &i[..1]).unwrap();
        assert_eq!(man.pairs[0].image_id, "b");
        let man = pair_datasets(&m, &i).unwrap();
        assert_eq!(man.pairs[0].image_id, "a");
        assert!(matches!(pair_datasets(&[], &i), Err(PairingError::EmptyCatalog(ItemKind::Midi))));
        assert!(matches!(pair_datasets(&m, &[]), Err(PairingError::EmptyCatalog(ItemKind::Image))));
    }

    #[test]
    fn split_counts_and_determinism() {
        let midis: Vec<_> = (0..10).map(|k| item(&format!("m{k:02}"), ItemKind::Midi, 5.0, 5.0)).collect();
        let images = [item("i", ItemKind::Image, 5.0, 5.0)];
        let man = pair_datasets(&midis, &images).unwrap();
        let a = split(&man, [6, 3, 1], 7).unwrap();
        assert_eq!(a.to_json(), split(&man, [6, 3, 1], 7).unwrap().to_json());
        assert_eq!(a.by_split(SplitTag::Train).count(), 6);
        assert_eq!(a.by_split(SplitTag::Test).count(), 3);
        assert_eq!(a.by_split(SplitTag::Val).count(), 1);
        assert!(matches!(split(&man, [6, 3, 2], 7), Err(PairingError::CountMismatch { .. })));
        let one = pair_datasets(&midis[..1], &images).unwrap();
        assert_eq!(split(&one, [1, 0, 0], 3).unwrap().pairs[0].split, Some(SplitTag::Train));
    }
}

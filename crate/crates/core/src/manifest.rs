//! Benchmark manifest: one record per generated image.
//!
//! Scales live on the half-integral grid `{0, 0.5, ..., 2.5}` and are stored as
//! an integer count of halves so grid membership and equality are exact.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest grid scale, in halves (2.5).
pub const MAX_SCALE_HALVES: u32 = 5;

/// The fourteen nuisance shifts of the benchmark.
pub const KNOWN_SHIFTS: [&str; 14] = [
    "cartoon",
    "plush_toy",
    "pencil_sketch",
    "painting",
    "sculpture",
    "graffiti",
    "video_game",
    "tattoo",
    "snow",
    "rain",
    "fog",
    "smog",
    "dust",
    "sandstorm",
];

/// A shift scale `halves / 2` on the benchmark grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Scale(u32);

impl Scale {
    pub const ZERO: Scale = Scale(0);

    pub fn from_halves(halves: u32) -> Option<Scale> {
        (halves <= MAX_SCALE_HALVES).then_some(Scale(halves))
    }

    /// Exact conversion; `None` for anything that is not a grid value.
    pub fn from_f64(value: f64) -> Option<Scale> {
        if !value.is_finite() {
            return None;
        }
        let twice = value * 2.0;
        let rounded = twice.round();
        if (twice - rounded).abs() > 1e-9 || rounded < 0.0 {
            return None;
        }
        Scale::from_halves(rounded as u32)
    }

    pub fn halves(self) -> u32 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.0) / 2.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    /// Next grid scale up, if any.
    pub fn next(self) -> Option<Scale> {
        Scale::from_halves(self.0 + 1)
    }

    /// All six grid values in ascending order.
    pub fn grid() -> impl Iterator<Item = Scale> {
        (0..=MAX_SCALE_HALVES).map(Scale)
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_multiple_of(2) {
            write!(f, "{}", self.0 / 2)
        } else {
            write!(f, "{}.5", self.0 / 2)
        }
    }
}

impl Serialize for Scale {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for Scale {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Scale::from_f64(v).ok_or_else(|| serde::de::Error::custom(format!("off-grid scale {v}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub class_index: u32,
    pub class_name: String,
    #[serde(rename = "shift")]
    pub shift_id: String,
    pub scale: Scale,
    pub seed: u64,
    pub relpath: String,
}

impl ImageRecord {
    pub fn trajectory_key(&self) -> TrajectoryKey {
        TrajectoryKey {
            class_index: self.class_index,
            shift: self.shift_id.clone(),
            seed: self.seed,
        }
    }
}

/// Wire form of a record; the scale is kept as a raw number so that off-grid
/// values surface as invariant errors rather than parse errors.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    image_id: String,
    class_index: i64,
    class_name: String,
    shift: String,
    scale: f64,
    seed: i64,
    relpath: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    records: Vec<ImageRecord>,
    scale_grid: Vec<Scale>,
    shift_ids: BTreeSet<String>,
    by_id: HashMap<String, usize>,
}

impl Manifest {
    /// Validates and indexes `records`, keeping their order.
    pub fn from_records(records: Vec<ImageRecord>) -> Result<Manifest> {
        Manifest::validate(records, |i| i + 1)
    }

    fn validate(records: Vec<ImageRecord>, line_of: impl Fn(usize) -> usize) -> Result<Manifest> {
        let mut by_id = HashMap::with_capacity(records.len());
        let mut coords = HashSet::with_capacity(records.len());
        let mut grid = BTreeSet::new();
        let mut shift_ids = BTreeSet::new();
        for (i, r) in records.iter().enumerate() {
            let invariant = |reason: String| Error::Invariant {
                record: r.image_id.clone(),
                line: line_of(i),
                reason,
            };
            if r.class_index > 999 {
                return Err(invariant(format!(
                    "class_index {} outside [0, 999]",
                    r.class_index
                )));
            }
            if by_id.insert(r.image_id.clone(), i).is_some() {
                return Err(invariant("duplicate image_id".into()));
            }
            if !coords.insert((r.class_index, r.shift_id.as_str(), r.seed, r.scale)) {
                return Err(invariant(format!(
                    "duplicate coordinates (class {}, shift {}, seed {}, scale {})",
                    r.class_index, r.shift_id, r.seed, r.scale
                )));
            }
            grid.insert(r.scale);
            shift_ids.insert(r.shift_id.clone());
        }
        Ok(Manifest {
            records,
            scale_grid: grid.into_iter().collect(),
            shift_ids,
            by_id,
        })
    }

    /// Parses JSONL text; `context` names the source in error messages.
    pub fn parse_jsonl(text: &str, context: &str) -> Result<Manifest> {
        let mut records = Vec::new();
        let mut lines = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawRecord =
                serde_json::from_str(line).map_err(|e| Error::parse(context, lineno, e))?;
            let invariant = |reason: String| Error::Invariant {
                record: raw.image_id.clone(),
                line: lineno,
                reason,
            };
            let scale = Scale::from_f64(raw.scale)
                .ok_or_else(|| invariant(format!("off-grid scale {}", raw.scale)))?;
            let class_index = u32::try_from(raw.class_index)
                .ok()
                .filter(|&c| c <= 999)
                .ok_or_else(|| {
                    invariant(format!("class_index {} outside [0, 999]", raw.class_index))
                })?;
            let seed = u64::try_from(raw.seed)
                .map_err(|_| invariant(format!("negative seed {}", raw.seed)))?;
            records.push(ImageRecord {
                image_id: raw.image_id,
                class_index,
                class_name: raw.class_name,
                shift_id: raw.shift,
                scale,
                seed,
                relpath: raw.relpath,
            });
            lines.push(lineno);
        }
        Manifest::validate(records, |i| lines[i])
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn scale_grid(&self) -> &[Scale] {
        &self.scale_grid
    }

    pub fn shift_ids(&self) -> &BTreeSet<String> {
        &self.shift_ids
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.by_id.get(image_id).map(|&i| &self.records[i])
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Manifest::parse_jsonl(&text, &path.display().to_string())
}

/// Identifies the images sharing `(class, shift, seed)`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrajectoryKey {
    pub class_index: u32,
    pub shift: String,
    pub seed: u64,
}

impl fmt::Display for TrajectoryKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.class_index, self.shift, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trajectory {
    /// `(scale, image_id)`, strictly increasing in scale.
    pub images: Vec<(Scale, String)>,
    /// One image per grid scale.
    pub complete: bool,
}

impl Trajectory {
    pub fn image_at(&self, scale: Scale) -> Option<&str> {
        self.images
            .binary_search_by_key(&scale, |(s, _)| *s)
            .ok()
            .map(|i| self.images[i].1.as_str())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrajectoryIndex {
    scale_grid: Vec<Scale>,
    trajectories: BTreeMap<TrajectoryKey, Trajectory>,
}

impl TrajectoryIndex {
    pub fn scale_grid(&self) -> &[Scale] {
        &self.scale_grid
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn get(&self, key: &TrajectoryKey) -> Option<&Trajectory> {
        self.trajectories.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TrajectoryKey, &Trajectory)> {
        self.trajectories.iter()
    }

    pub fn complete_count(&self) -> usize {
        self.trajectories.values().filter(|t| t.complete).count()
    }
}

/// Groups the manifest into per-seed scale trajectories.
pub fn trajectory_index(m: &Manifest) -> TrajectoryIndex {
    let mut trajectories: BTreeMap<TrajectoryKey, Trajectory> = BTreeMap::new();
    for r in m.records() {
        trajectories
            .entry(r.trajectory_key())
            .or_insert_with(|| Trajectory {
                images: Vec::new(),
                complete: false,
            })
            .images
            .push((r.scale, r.image_id.clone()));
    }
    let grid = m.scale_grid().to_vec();
    for t in trajectories.values_mut() {
        t.images.sort_by_key(|(s, _)| *s);
        t.complete = t.images.len() == grid.len();
    }
    TrajectoryIndex {
        scale_grid: grid,
        trajectories,
    }
}

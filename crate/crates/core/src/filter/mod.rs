//! Out-of-class (OOC) filtering.
//!
//! Four alignment scores per image feed four threshold filters:
//!
//! | filter        | score                                                   |
//! |---------------|---------------------------------------------------------|
//! | `TextPlain`   | cos(joint image embedding, "A picture of a <class>")    |
//! | `TextShift`   | cos(joint image embedding, "... <class> in <shift>")    |
//! | `FeatClip`    | cos(joint image embedding, same at scale 0)             |
//! | `FeatDino`    | cos(self-supervised CLS token, same at scale 0)         |
//!
//! A filter is active when its score falls below its threshold; an image is
//! removed when at least `vote_k` filters are active.

pub mod embeddings;
pub mod labels;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::manifest::{Scale, TrajectoryIndex, TrajectoryKey};
use crate::metrics::PredictionLog;

pub use embeddings::{EmbeddingSet, PromptKey, PromptVariant};
pub use labels::{aggregate_labels, load_labels, Aggregate, Choice, OocLabel, OocLabels, RawLabel};

/// Scale applied to a text cosine to get the raw 0-100 similarity the base
/// prefilter threshold is expressed in.
pub const RAW_TEXT_SCALE: f64 = 100.0;

/// Default raw text-alignment cut for the base prefilter.
pub const DEFAULT_CLIP_TEXT_THRESHOLD: f64 = 24.0;

pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let (mut dot, mut uu, mut vv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    TextPlain,
    TextShift,
    FeatClip,
    FeatDino,
}

impl FilterKind {
    pub const ALL: [FilterKind; 4] = [
        FilterKind::TextPlain,
        FilterKind::TextShift,
        FilterKind::FeatClip,
        FilterKind::FeatDino,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub a_text_plain: f64,
    pub a_text_shift: f64,
    pub a_feat_clip: f64,
    pub a_feat_dino: f64,
    /// `100 * max(0, a_text_plain)`
    pub raw_text_plain: f64,
    /// `100 * max(0, a_text_shift)`
    pub raw_text_shift: f64,
}

impl ImageScores {
    pub fn get(&self, kind: FilterKind) -> f64 {
        match kind {
            FilterKind::TextPlain => self.a_text_plain,
            FilterKind::TextShift => self.a_text_shift,
            FilterKind::FeatClip => self.a_feat_clip,
            FilterKind::FeatDino => self.a_feat_dino,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        FilterKind::ALL.map(|k| self.get(k))
    }
}

pub fn raw_text_similarity(cos: f64) -> f64 {
    RAW_TEXT_SCALE * cos.max(0.0)
}

pub type ScoreTable = BTreeMap<String, ImageScores>;

#[derive(Serialize, Deserialize)]
struct ScoreLine {
    image_id: String,
    #[serde(flatten)]
    scores: ImageScores,
}

pub fn write_scores(path: impl AsRef<Path>, table: &ScoreTable) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (id, s) in table {
        let line = ScoreLine {
            image_id: id.clone(),
            scores: *s,
        };
        out.push_str(&serde_json::to_string(&line).expect("scores serialize"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<ScoreTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ctx = path.display().to_string();
    let mut table = ScoreTable::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let l: ScoreLine = serde_json::from_str(line).map_err(|e| Error::parse(&ctx, i + 1, e))?;
        table.insert(l.image_id, l.scores);
    }
    Ok(table)
}

struct ScoreJob<'a> {
    image_id: &'a str,
    anchor_id: &'a str,
    is_anchor: bool,
    class_index: u32,
    shift: &'a str,
}

pub fn compute_alignment_scores(emb: &EmbeddingSet, idx: &TrajectoryIndex) -> Result<ScoreTable> {
    compute_alignment_scores_with(emb, idx, Execution::default())
}

pub fn compute_alignment_scores_with(
    emb: &EmbeddingSet,
    idx: &TrajectoryIndex,
    exec: Execution,
) -> Result<ScoreTable> {
    let mut jobs = Vec::new();
    for (key, t) in idx.iter() {
        let anchor_id = t
            .image_at(Scale::ZERO)
            .ok_or_else(|| Error::MissingAnchor(key.to_string()))?;
        for (scale, image_id) in &t.images {
            jobs.push(ScoreJob {
                image_id,
                anchor_id,
                is_anchor: scale.is_zero(),
                class_index: key.class_index,
                shift: &key.shift,
            });
        }
    }
    let scored = exec.try_map(&jobs, |job| score_image(emb, job))?;
    Ok(jobs
        .iter()
        .zip(scored)
        .map(|(j, s)| (j.image_id.to_string(), s))
        .collect())
}

fn image<'a>(
    map: &'a std::collections::HashMap<String, Vec<f32>>,
    id: &str,
    enc: &str,
) -> Result<&'a [f32]> {
    map.get(id)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::MissingEmbedding(format!("{enc} image {id}")))
}

fn score_image(emb: &EmbeddingSet, job: &ScoreJob<'_>) -> Result<ImageScores> {
    let prompt = |variant: PromptVariant| {
        emb.prompt(job.class_index, variant, job.shift)
            .ok_or_else(|| {
                Error::MissingEmbedding(format!(
                    "{variant:?} prompt for class {} / shift {}",
                    job.class_index, job.shift
                ))
            })
    };
    let clip = image(&emb.clip_image, job.image_id, "clipimg")?;
    let dino = image(&emb.dino_cls, job.image_id, "dinocls")?;
    let a_text_plain = cosine(clip, prompt(PromptVariant::Plain)?)?;
    let a_text_shift = cosine(clip, prompt(PromptVariant::Shifted)?)?;
    let (a_feat_clip, a_feat_dino) = if job.is_anchor {
        (1.0, 1.0)
    } else {
        (
            cosine(clip, image(&emb.clip_image, job.anchor_id, "clipimg")?)?,
            cosine(dino, image(&emb.dino_cls, job.anchor_id, "dinocls")?)?,
        )
    };
    Ok(ImageScores {
        a_text_plain,
        a_text_shift,
        a_feat_clip,
        a_feat_dino,
        raw_text_plain: raw_text_similarity(a_text_plain),
        raw_text_shift: raw_text_similarity(a_text_shift),
    })
}

fn default_enabled() -> [bool; 4] {
    [true; 4]
}

fn is_all_enabled(e: &[bool; 4]) -> bool {
    e.iter().all(|&b| b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterCalibration {
    pub tau_text_plain: f64,
    pub tau_text_shift: f64,
    pub tau_feat_clip: f64,
    pub tau_feat_dino: f64,
    pub target_tpr: f64,
    pub vote_k: u8,
    /// Per-filter switch in `FilterKind` order; disabled filters never fire.
    #[serde(default = "default_enabled", skip_serializing_if = "is_all_enabled")]
    pub enabled: [bool; 4],
}

impl FilterCalibration {
    pub const DEFAULT_TARGET_TPR: f64 = 0.9;
    pub const DEFAULT_VOTE_K: u8 = 2;

    pub fn thresholds(&self) -> [f64; 4] {
        [
            self.tau_text_plain,
            self.tau_text_shift,
            self.tau_feat_clip,
            self.tau_feat_dino,
        ]
    }

    pub fn threshold(&self, kind: FilterKind) -> f64 {
        self.thresholds()[kind.index()]
    }

    pub fn with_thresholds(taus: [f64; 4], target_tpr: f64, vote_k: u8) -> Self {
        FilterCalibration {
            tau_text_plain: taus[0],
            tau_text_shift: taus[1],
            tau_feat_clip: taus[2],
            tau_feat_dino: taus[3],
            target_tpr,
            vote_k,
            enabled: [true; 4],
        }
    }

    /// The text-only baseline: a single plain-prompt filter with `vote_k = 1`.
    pub fn text_only_baseline(&self) -> Self {
        FilterCalibration {
            vote_k: 1,
            enabled: [true, false, false, false],
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.vote_k) {
            return Err(Error::InvalidArgument(format!(
                "vote_k {} outside [1, 4]",
                self.vote_k
            )));
        }
        if self.thresholds().iter().any(|t| t.is_nan()) {
            return Err(Error::InvalidArgument("NaN threshold".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cal: FilterCalibration = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e.line(), e))?;
        cal.validate()?;
        Ok(cal)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("calibration serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Number of out-of-class samples that must fall below the threshold so that
/// `count / n >= target`.
fn required_hits(target: f64, n: usize) -> usize {
    ((target * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Smallest candidate threshold removing at least `target` of `ooc` scores.
/// Candidates are the observed values plus the next float above the maximum.
pub fn minimal_threshold(ooc: &[f64], observed: &[f64], target: f64) -> f64 {
    let mut sorted_ooc = ooc.to_vec();
    sorted_ooc.sort_by(f64::total_cmp);
    let need = required_hits(target, sorted_ooc.len())
        .max(1)
        .min(sorted_ooc.len());
    let pivot = sorted_ooc[need - 1];
    let mut candidates = observed.to_vec();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let max = candidates.last().copied().unwrap_or(pivot).max(pivot);
    let pos = candidates.partition_point(|&c| c <= pivot);
    candidates
        .get(pos)
        .copied()
        .unwrap_or_else(|| max.next_up())
}

/// Per-filter thresholds so that each filter alone removes at least
/// `target_tpr` of the out-of-class calibration images. Partial labels are
/// ignored; unlabeled images are not part of the calibration set.
pub fn calibrate_thresholds(
    scores: &ScoreTable,
    labels: &OocLabels,
    target_tpr: f64,
) -> Result<FilterCalibration> {
    if target_tpr > 1.0 {
        return Err(Error::UnreachableTarget(target_tpr));
    }
    if !(target_tpr > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "target_tpr {target_tpr} must be in (0, 1]"
        )));
    }
    let mut ooc: Vec<[f64; 4]> = Vec::new();
    let mut observed: Vec<[f64; 4]> = Vec::new();
    for (id, label) in labels {
        if label.aggregate == Aggregate::Partial {
            continue;
        }
        let s = scores
            .get(id)
            .ok_or_else(|| Error::MissingScore(id.clone()))?
            .as_array();
        if label.aggregate == Aggregate::OutOfClass {
            ooc.push(s);
        }
        observed.push(s);
    }
    if ooc.is_empty() {
        return Err(Error::NoOocSamples);
    }
    let taus = FilterKind::ALL.map(|k| {
        let i = k.index();
        let o: Vec<f64> = ooc.iter().map(|s| s[i]).collect();
        let all: Vec<f64> = observed.iter().map(|s| s[i]).collect();
        minimal_threshold(&o, &all, target_tpr)
    });
    Ok(FilterCalibration::with_thresholds(
        taus,
        target_tpr,
        FilterCalibration::DEFAULT_VOTE_K,
    ))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub image_id: String,
    /// Activations in `FilterKind` order.
    pub active: [bool; 4],
    pub removed: bool,
    /// Removed by the base prefilter rather than by voting.
    #[serde(default)]
    pub prefiltered: bool,
}

impl FilterVerdict {
    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Verdicts keyed by image id. Images without a verdict are treated as kept by
/// downstream metrics.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FilterVerdicts(pub BTreeMap<String, FilterVerdict>);

impl FilterVerdicts {
    pub fn get(&self, image_id: &str) -> Option<&FilterVerdict> {
        self.0.get(image_id)
    }

    pub fn survives(&self, image_id: &str) -> bool {
        self.0.get(image_id).is_none_or(|v| !v.removed)
    }

    pub fn removed_count(&self) -> usize {
        self.0.values().filter(|v| v.removed).count()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Marks every image of the listed trajectories as removed.
    pub fn mark_prefiltered(&mut self, excluded: &BTreeSet<TrajectoryKey>, idx: &TrajectoryIndex) {
        for key in excluded {
            let Some(t) = idx.get(key) else { continue };
            for (_, id) in &t.images {
                let v = self.0.entry(id.clone()).or_insert_with(|| FilterVerdict {
                    image_id: id.clone(),
                    active: [false; 4],
                    removed: false,
                    prefiltered: false,
                });
                v.removed = true;
                v.prefiltered = true;
            }
        }
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for v in self.0.values() {
            let line = serde_json::to_string(v).expect("verdict serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ctx = path.display().to_string();
        let mut out = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let v: FilterVerdict =
                serde_json::from_str(line).map_err(|e| Error::parse(&ctx, i + 1, e))?;
            out.insert(v.image_id.clone(), v);
        }
        Ok(FilterVerdicts(out))
    }
}

pub fn verdict_for(
    image_id: &str,
    scores: &ImageScores,
    cal: &FilterCalibration,
) -> Result<FilterVerdict> {
    let s = scores.as_array();
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::MissingScore(image_id.to_string()));
    }
    let taus = cal.thresholds();
    let active = [0, 1, 2, 3].map(|i| cal.enabled[i] && s[i] < taus[i]);
    let count = active.iter().filter(|&&a| a).count();
    Ok(FilterVerdict {
        image_id: image_id.to_string(),
        active,
        removed: count >= usize::from(cal.vote_k),
        prefiltered: false,
    })
}

pub fn apply_filter(scores: &ScoreTable, cal: &FilterCalibration) -> Result<FilterVerdicts> {
    apply_filter_with(scores, cal, Execution::default())
}

pub fn apply_filter_with(
    scores: &ScoreTable,
    cal: &FilterCalibration,
    exec: Execution,
) -> Result<FilterVerdicts> {
    cal.validate()?;
    let entries: Vec<(&String, &ImageScores)> = scores.iter().collect();
    let verdicts = exec.try_map(&entries, |(id, s)| verdict_for(id, s, cal))?;
    Ok(FilterVerdicts(
        verdicts
            .into_iter()
            .map(|v| (v.image_id.clone(), v))
            .collect(),
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartialPolicy {
    #[default]
    Exclude,
    AsInClass,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterQuality {
    pub tpr: f64,
    pub fpr: f64,
    pub acc: f64,
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
}

/// TPR/FPR/accuracy of the verdicts against labels; "positive" = removed.
pub fn evaluate_filter(
    verdicts: &FilterVerdicts,
    labels: &OocLabels,
    partial_policy: PartialPolicy,
) -> Result<FilterQuality> {
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (id, label) in labels {
        let is_ooc = match (label.aggregate, partial_policy) {
            (Aggregate::OutOfClass, _) => true,
            (Aggregate::InClass, _) | (Aggregate::Partial, PartialPolicy::AsInClass) => false,
            (Aggregate::Partial, PartialPolicy::Exclude) => continue,
        };
        let removed = verdicts
            .get(id)
            .ok_or_else(|| Error::MissingVerdict(id.clone()))?
            .removed;
        match (is_ooc, removed) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let pos = tp + fn_;
    let neg = fp + tn;
    if pos == 0 {
        return Err(Error::EmptyDenominator("no out-of-class images"));
    }
    if neg == 0 {
        return Err(Error::EmptyDenominator("no in-class images"));
    }
    Ok(FilterQuality {
        tpr: tp as f64 / pos as f64,
        fpr: fp as f64 / neg as f64,
        acc: (tp + tn) as f64 / (pos + neg) as f64,
        true_positive: tp,
        false_positive: fp,
        true_negative: tn,
        false_negative: fn_,
    })
}

/// Trajectories dropped before labeling: the scale-0 image has raw text
/// alignment below `clip_text_threshold`, or the reference classifier
/// misclassifies it.
pub fn prefilter_base(
    scores: &ScoreTable,
    preds: &PredictionLog,
    idx: &TrajectoryIndex,
    reference_model: &str,
    clip_text_threshold: f64,
) -> Result<BTreeSet<TrajectoryKey>> {
    let mut excluded = BTreeSet::new();
    for (key, t) in idx.iter() {
        let base = t
            .image_at(Scale::ZERO)
            .ok_or_else(|| Error::MissingAnchor(key.to_string()))?;
        let raw = scores
            .get(base)
            .ok_or_else(|| Error::MissingScore(base.to_string()))?
            .raw_text_plain;
        let top1 = preds
            .get(reference_model, base)
            .ok_or_else(|| Error::MissingBasePrediction(format!("{key} ({reference_model})")))?;
        if raw < clip_text_threshold || top1 != key.class_index {
            excluded.insert(key.clone());
        }
    }
    Ok(excluded)
}

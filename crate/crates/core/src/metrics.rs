//! Robustness metrics over classifier predictions.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::filter::{FilterVerdicts, ScoreTable};
use crate::manifest::{ImageRecord, Manifest, Scale, Trajectory, TrajectoryIndex, TrajectoryKey};

/// Top-1 predictions keyed by model, then image.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PredictionLog {
    entries: BTreeMap<String, HashMap<String, u32>>,
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    model_id: String,
    image_id: String,
    top1: u32,
}

impl PredictionLog {
    pub fn insert(&mut self, model: impl Into<String>, image: impl Into<String>, top1: u32) {
        self.entries
            .entry(model.into())
            .or_default()
            .insert(image.into(), top1);
    }

    pub fn get(&self, model: &str, image: &str) -> Option<u32> {
        self.entries.get(model)?.get(image).copied()
    }

    pub fn models(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn has_model(&self, model: &str) -> bool {
        self.entries.contains_key(model)
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parses `predictions.jsonl`. With a manifest, every image id must exist
    /// in it and `top1` must be a valid class index.
    pub fn parse_jsonl(text: &str, context: &str, manifest: Option<&Manifest>) -> Result<Self> {
        let mut log = PredictionLog::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let p: PredictionLine =
                serde_json::from_str(line).map_err(|e| Error::parse(context, i + 1, e))?;
            let invariant = |reason: String| Error::Invariant {
                record: format!("{}:{}", p.model_id, p.image_id),
                line: i + 1,
                reason,
            };
            if p.top1 > 999 {
                return Err(invariant(format!("top1 {} outside [0, 999]", p.top1)));
            }
            if let Some(m) = manifest {
                if m.get(&p.image_id).is_none() {
                    return Err(invariant("image_id not in manifest".into()));
                }
            }
            log.insert(p.model_id, p.image_id, p.top1);
        }
        Ok(log)
    }

    pub fn load(path: impl AsRef<Path>, manifest: Option<&Manifest>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PredictionLog::parse_jsonl(&text, &path.display().to_string(), manifest)
    }

    /// Sorted by model then image.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (model, preds) in &self.entries {
            let mut images: Vec<(&String, &u32)> = preds.iter().collect();
            images.sort();
            for (image, top1) in images {
                let line = PredictionLine {
                    model_id: model.clone(),
                    image_id: image.clone(),
                    top1: *top1,
                };
                out.push_str(&serde_json::to_string(&line).expect("prediction serializes"));
                out.push('\n');
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub correct: u64,
    pub total: u64,
}

impl AccuracyCell {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    pub fn error(&self) -> f64 {
        1.0 - self.accuracy()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub model: String,
    pub shift: String,
    pub scale: Scale,
}

/// Label used for cells pooled over every shift.
pub const ALL_SHIFTS: &str = "all";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccuracyTable {
    cells: BTreeMap<CellKey, AccuracyCell>,
}

impl AccuracyTable {
    pub fn insert(&mut self, model: &str, shift: &str, scale: Scale, cell: AccuracyCell) {
        self.cells.insert(
            CellKey {
                model: model.to_string(),
                shift: shift.to_string(),
                scale,
            },
            cell,
        );
    }

    pub fn get(&self, model: &str, shift: &str, scale: Scale) -> Option<AccuracyCell> {
        self.cells
            .get(&CellKey {
                model: model.to_string(),
                shift: shift.to_string(),
                scale,
            })
            .copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CellKey, &AccuracyCell)> {
        self.cells.iter()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn models(&self) -> BTreeSet<&str> {
        self.cells.keys().map(|k| k.model.as_str()).collect()
    }

    /// Cells of one `(model, shift)` in scale order.
    pub fn series(&self, model: &str, shift: &str) -> Vec<(Scale, AccuracyCell)> {
        self.cells
            .iter()
            .filter(|(k, _)| k.model == model && k.shift == shift)
            .map(|(k, c)| (k.scale, *c))
            .collect()
    }

    /// `(model, shift)` pairs present.
    pub fn groups(&self) -> BTreeSet<(&str, &str)> {
        self.cells
            .keys()
            .map(|k| (k.model.as_str(), k.shift.as_str()))
            .collect()
    }

    pub fn shifts_of(&self, model: &str) -> BTreeSet<&str> {
        self.cells
            .keys()
            .filter(|k| k.model == model)
            .map(|k| k.shift.as_str())
            .collect()
    }

    /// Counts summed over shifts, reported under [`ALL_SHIFTS`].
    pub fn pooled_over_shifts(&self) -> AccuracyTable {
        let mut out = AccuracyTable::default();
        for (k, c) in &self.cells {
            let e = out
                .cells
                .entry(CellKey {
                    model: k.model.clone(),
                    shift: ALL_SHIFTS.to_string(),
                    scale: k.scale,
                })
                .or_default();
            e.correct += c.correct;
            e.total += c.total;
        }
        out
    }
}

pub fn accuracy_by_scale(
    preds: &PredictionLog,
    m: &Manifest,
    verdicts: Option<&FilterVerdicts>,
) -> Result<AccuracyTable> {
    accuracy_by_scale_with(preds, m, verdicts, Execution::default())
}

/// Per `(model, shift, scale)` correct/total over images surviving the filter.
/// Cells with no surviving image are absent.
pub fn accuracy_by_scale_with(
    preds: &PredictionLog,
    m: &Manifest,
    verdicts: Option<&FilterVerdicts>,
    exec: Execution,
) -> Result<AccuracyTable> {
    let surviving: Vec<&ImageRecord> = m
        .records()
        .iter()
        .filter(|r| verdicts.is_none_or(|v| v.survives(&r.image_id)))
        .collect();
    let mut table = AccuracyTable::default();
    for model in preds.models() {
        let hits = exec.try_map(&surviving, |r| {
            preds
                .get(model, &r.image_id)
                .map(|top1| top1 == r.class_index)
                .ok_or_else(|| Error::MissingPrediction {
                    model: model.to_string(),
                    image: r.image_id.clone(),
                })
        })?;
        let mut cells: BTreeMap<(&str, Scale), AccuracyCell> = BTreeMap::new();
        for (r, hit) in surviving.iter().zip(hits) {
            let c = cells.entry((r.shift_id.as_str(), r.scale)).or_default();
            c.total += 1;
            c.correct += u64::from(hit);
        }
        for ((shift, scale), c) in cells {
            table.insert(model, shift, scale, c);
        }
    }
    Ok(table)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    PerScale,
    #[default]
    ImageWeighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropSeries {
    pub model: String,
    pub shift: String,
    pub baseline_accuracy: f64,
    /// `p(0) - p(s)` for every present `s > 0`.
    pub drops: BTreeMap<Scale, f64>,
    /// `None` when no cell above scale 0 exists.
    pub average: Option<f64>,
}

pub fn accuracy_drop(table: &AccuracyTable, averaging: Averaging) -> Result<Vec<DropSeries>> {
    let mut out = Vec::new();
    for (model, shift) in table.groups() {
        let series = table.series(model, shift);
        let base = series
            .iter()
            .find(|(s, _)| s.is_zero())
            .ok_or_else(|| Error::MissingBaseline {
                model: model.to_string(),
                shift: shift.to_string(),
            })?
            .1
            .accuracy();
        let shifted: Vec<(Scale, f64, u64)> = series
            .iter()
            .filter(|(s, _)| !s.is_zero())
            .map(|(s, c)| (*s, base - c.accuracy(), c.total))
            .collect();
        let average = (!shifted.is_empty()).then(|| match averaging {
            Averaging::PerScale => {
                shifted.iter().map(|(_, d, _)| d).sum::<f64>() / shifted.len() as f64
            }
            Averaging::ImageWeighted => {
                let n: u64 = shifted.iter().map(|(_, _, n)| n).sum();
                shifted.iter().map(|(_, d, n)| *n as f64 * d).sum::<f64>() / n as f64
            }
        });
        out.push(DropSeries {
            model: model.to_string(),
            shift: shift.to_string(),
            baseline_accuracy: base,
            drops: shifted.iter().map(|(s, d, _)| (*s, *d)).collect(),
            average,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionOptions {
    /// Include scale 0 in the CE sums (rCE is unaffected).
    pub include_base_scale: bool,
}

impl Default for CorruptionOptions {
    fn default() -> Self {
        CorruptionOptions {
            include_base_scale: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShiftCorruption {
    pub ce: Option<f64>,
    pub rce: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionReport {
    pub model: String,
    pub baseline: String,
    pub per_shift: BTreeMap<String, ShiftCorruption>,
    /// Shifts whose CE or rCE denominator vanished.
    pub excluded_shifts: Vec<String>,
    pub mce: Option<f64>,
    pub mean_rce: Option<f64>,
}

const ZERO_DENOMINATOR: f64 = 1e-12;

/// CE and relative CE of `model` against `baseline`, with `E = 1 - accuracy`:
///
/// ```text
/// CE  = sum_s E_f(s)               / sum_s E_b(s)
/// rCE = sum_s (E_f(s) - E_f(0))    / sum_s (E_b(s) - E_b(0))
/// ```
///
/// sums over `s > 0`. A shift whose denominator is zero is excluded from the
/// means and listed in `excluded_shifts`.
pub fn corruption_errors(
    table: &AccuracyTable,
    model: &str,
    baseline: &str,
    opts: CorruptionOptions,
) -> Result<CorruptionReport> {
    let mut per_shift = BTreeMap::new();
    let mut excluded = Vec::new();
    for shift in table.shifts_of(model) {
        let f = table.series(model, shift);
        let b = table.series(baseline, shift);
        let f_scales: Vec<Scale> = f.iter().map(|(s, _)| *s).collect();
        let b_scales: Vec<Scale> = b.iter().map(|(s, _)| *s).collect();
        if f_scales != b_scales {
            return Err(Error::TableMismatch(format!(
                "shift `{shift}`: scales of `{model}` and `{baseline}` differ"
            )));
        }
        let zero = |series: &[(Scale, AccuracyCell)], who: &str| {
            series
                .iter()
                .find(|(s, _)| s.is_zero())
                .map(|(_, c)| c.error())
                .ok_or_else(|| Error::MissingBaseline {
                    model: who.to_string(),
                    shift: shift.to_string(),
                })
        };
        let (f0, b0) = (zero(&f, model)?, zero(&b, baseline)?);
        let (mut ce_num, mut ce_den, mut r_num, mut r_den) = (0.0, 0.0, 0.0, 0.0);
        for ((s, fc), (_, bc)) in f.iter().zip(&b) {
            if !s.is_zero() || opts.include_base_scale {
                ce_num += fc.error();
                ce_den += bc.error();
            }
            if !s.is_zero() {
                r_num += fc.error() - f0;
                r_den += bc.error() - b0;
            }
        }
        let entry = ShiftCorruption {
            ce: (ce_den.abs() > ZERO_DENOMINATOR).then(|| ce_num / ce_den),
            rce: (r_den.abs() > ZERO_DENOMINATOR).then(|| r_num / r_den),
        };
        if entry.ce.is_none() || entry.rce.is_none() {
            excluded.push(shift.to_string());
        }
        per_shift.insert(shift.to_string(), entry);
    }
    let mean = |pick: fn(&ShiftCorruption) -> Option<f64>| {
        let vals: Vec<f64> = per_shift.values().filter_map(pick).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Ok(CorruptionReport {
        model: model.to_string(),
        baseline: baseline.to_string(),
        mce: mean(|c| c.ce),
        mean_rce: mean(|c| c.rce),
        per_shift,
        excluded_shifts: excluded,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasePolicy {
    /// Trajectories already wrong at scale 0 are reported separately.
    #[default]
    ExcludeBaseFailures,
    /// ... or binned as a failure at scale 0.
    BinAtZero,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Completeness {
    /// Only trajectories with a surviving image at every grid scale.
    #[default]
    CompleteOnly,
    Any,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "scale")]
pub enum FailureOutcome {
    FailsAt(Scale),
    NoFailure,
    BaseFailure,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FailureKey {
    pub model: String,
    pub trajectory: TrajectoryKey,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FailurePointSet {
    pub scale_grid: Vec<Scale>,
    pub base_policy: BasePolicy,
    pub outcomes: BTreeMap<FailureKey, FailureOutcome>,
}

/// Scans one trajectory's surviving `(scale, correct)` pairs.
pub fn scan_trajectory(points: &[(Scale, bool)], base_policy: BasePolicy) -> FailureOutcome {
    match points.iter().find(|(_, ok)| !ok) {
        None => FailureOutcome::NoFailure,
        Some((s, _)) if s.is_zero() && base_policy == BasePolicy::ExcludeBaseFailures => {
            FailureOutcome::BaseFailure
        }
        Some((s, _)) => FailureOutcome::FailsAt(*s),
    }
}

pub fn failure_points(
    preds: &PredictionLog,
    idx: &TrajectoryIndex,
    verdicts: Option<&FilterVerdicts>,
    base_policy: BasePolicy,
    completeness: Completeness,
) -> Result<FailurePointSet> {
    failure_points_with(
        preds,
        idx,
        verdicts,
        base_policy,
        completeness,
        Execution::default(),
    )
}

/// Smallest surviving scale at which each model misclassifies each trajectory.
pub fn failure_points_with(
    preds: &PredictionLog,
    idx: &TrajectoryIndex,
    verdicts: Option<&FilterVerdicts>,
    base_policy: BasePolicy,
    completeness: Completeness,
    exec: Execution,
) -> Result<FailurePointSet> {
    let grid_len = idx.scale_grid().len();
    let trajectories: Vec<(&TrajectoryKey, Vec<(Scale, &str)>)> = idx
        .iter()
        .map(|(k, t): (&TrajectoryKey, &Trajectory)| {
            let kept = t
                .images
                .iter()
                .filter(|(_, id)| verdicts.is_none_or(|v| v.survives(id)))
                .map(|(s, id)| (*s, id.as_str()))
                .collect::<Vec<_>>();
            (k, kept)
        })
        .filter(|(_, kept)| match completeness {
            Completeness::CompleteOnly => kept.len() == grid_len,
            Completeness::Any => !kept.is_empty(),
        })
        .collect();

    let mut outcomes = BTreeMap::new();
    for model in preds.models() {
        let scanned = exec.try_map(&trajectories, |(_, kept)| {
            let points =
                kept.iter()
                    .map(|(s, id)| {
                        preds.get(model, id).map(|p| (*s, p)).ok_or_else(|| {
                            Error::MissingPrediction {
                                model: model.to_string(),
                                image: id.to_string(),
                            }
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
            Ok::<_, Error>(points)
        })?;
        for ((key, _), points) in trajectories.iter().zip(scanned) {
            let points: Vec<(Scale, bool)> = points
                .into_iter()
                .map(|(s, p)| (s, p == key.class_index))
                .collect();
            outcomes.insert(
                FailureKey {
                    model: model.to_string(),
                    trajectory: (*key).clone(),
                },
                scan_trajectory(&points, base_policy),
            );
        }
    }
    Ok(FailurePointSet {
        scale_grid: idx.scale_grid().to_vec(),
        base_policy,
        outcomes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub model: String,
    pub shift: String,
    /// One bin per grid scale.
    pub counts: BTreeMap<Scale, u64>,
    pub ratios: Option<BTreeMap<Scale, f64>>,
    pub no_failure: u64,
    pub base_failures: u64,
    /// Trajectories considered for this `(model, shift)`.
    pub trajectories: u64,
    /// No trajectory has a failure point.
    pub empty: bool,
}

impl HistogramRow {
    pub fn failures(&self) -> u64 {
        self.counts.values().sum()
    }
}

pub type FailureHistogram = Vec<HistogramRow>;

pub fn failure_histogram(fps: &FailurePointSet, normalize: bool) -> FailureHistogram {
    let mut rows: BTreeMap<(&str, &str), HistogramRow> = BTreeMap::new();
    for (key, outcome) in &fps.outcomes {
        let row = rows
            .entry((key.model.as_str(), key.trajectory.shift.as_str()))
            .or_insert_with(|| HistogramRow {
                model: key.model.clone(),
                shift: key.trajectory.shift.clone(),
                counts: fps.scale_grid.iter().map(|s| (*s, 0)).collect(),
                ratios: None,
                no_failure: 0,
                base_failures: 0,
                trajectories: 0,
                empty: true,
            });
        row.trajectories += 1;
        match outcome {
            FailureOutcome::FailsAt(s) => *row.counts.entry(*s).or_insert(0) += 1,
            FailureOutcome::NoFailure => row.no_failure += 1,
            FailureOutcome::BaseFailure => row.base_failures += 1,
        }
    }
    rows.into_values()
        .map(|mut row| {
            let total = row.failures();
            row.empty = total == 0;
            if normalize {
                row.ratios = Some(
                    row.counts
                        .iter()
                        .map(|(s, c)| {
                            (
                                *s,
                                if total == 0 {
                                    0.0
                                } else {
                                    *c as f64 / total as f64
                                },
                            )
                        })
                        .collect(),
                );
            }
            row
        })
        .collect()
}

/// Counts `(increasing, total)` consecutive-scale pairs of the shifted-prompt
/// alignment per shift, considering pairs whose lower scale is `>= min_scale`.
pub fn monotonicity_counts(
    scores: &ScoreTable,
    idx: &TrajectoryIndex,
    min_scale: Scale,
) -> BTreeMap<String, (u64, u64)> {
    let mut out: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for (key, t) in idx.iter() {
        for (s, id) in &t.images {
            if *s < min_scale {
                continue;
            }
            let Some(next) = s.next() else { continue };
            let Some(next_id) = t.image_at(next) else {
                continue;
            };
            let (Some(a), Some(b)) = (scores.get(id), scores.get(next_id)) else {
                continue;
            };
            let e = out.entry(key.shift.clone()).or_default();
            e.1 += 1;
            if b.a_text_shift > a.a_text_shift {
                e.0 += 1;
            }
        }
    }
    out
}

/// Fraction of consecutive-scale pairs where the shifted-prompt alignment
/// strictly increases, pooled over all shifts.
pub fn monotonicity_rate(
    scores: &ScoreTable,
    idx: &TrajectoryIndex,
    min_scale: Scale,
) -> Result<f64> {
    let (inc, total) = monotonicity_counts(scores, idx, min_scale)
        .values()
        .fold((0, 0), |(a, b), (i, t)| (a + i, b + t));
    if total == 0 {
        return Err(Error::NoPairs);
    }
    Ok(inc as f64 / total as f64)
}

#[cfg(test)]
mod tests;

//! Report bundle, CSV tables and plot data.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::filter::{
    evaluate_filter, FilterQuality, FilterVerdicts, OocLabels, PartialPolicy, ScoreTable,
};
use crate::manifest::{trajectory_index, Manifest, Scale};
use crate::metrics::{
    accuracy_by_scale_with, accuracy_drop, corruption_errors, failure_histogram,
    failure_points_with, monotonicity_rate, AccuracyTable, Averaging, BasePolicy, Completeness,
    CorruptionOptions, CorruptionReport, DropSeries, FailureHistogram, PredictionLog,
};
use crate::stats::{
    linear_fit, partial_correlation, proportion_ci_with, rank_models, IntervalMethod, LinearFit,
    ProportionEstimate,
};

pub const DEFAULT_BASELINE: &str = "alexnet";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub baseline: String,
    pub averaging: Averaging,
    pub corruption: CorruptionOptions,
    pub base_policy: BasePolicy,
    pub completeness: Completeness,
    pub partial_policy: PartialPolicy,
    pub interval: IntervalMethod,
    pub z: f64,
    pub min_scale: Scale,
    pub normalize_histogram: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            baseline: DEFAULT_BASELINE.to_string(),
            averaging: Averaging::default(),
            corruption: CorruptionOptions::default(),
            base_policy: BasePolicy::default(),
            completeness: Completeness::default(),
            partial_policy: PartialPolicy::default(),
            interval: IntervalMethod::default(),
            z: 1.0,
            min_scale: Scale::from_halves(1).expect("0.5 is on the grid"),
            normalize_histogram: false,
        }
    }
}

/// In-distribution accuracy and size of one model, for accuracy-on-the-line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model_id: String,
    pub id_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<f64>,
}

pub fn load_model_meta(path: impl AsRef<Path>) -> Result<Vec<ModelMeta>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ctx = path.display().to_string();
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(&ctx, i + 1, e)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellEstimate {
    pub model: String,
    pub shift: String,
    pub scale: Scale,
    pub correct: u64,
    pub total: u64,
    pub estimate: ProportionEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub shift: String,
    pub scale: Scale,
    pub groups: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyOnTheLine {
    pub models: Vec<String>,
    /// In-distribution accuracy from the model metadata.
    pub id_accuracy: Vec<f64>,
    /// Accuracy pooled over every shifted (`s > 0`) image.
    pub ood_accuracy: Vec<f64>,
    pub fit: LinearFit,
    /// Partial correlation of size and OOD accuracy given ID accuracy.
    pub size_ood_given_id: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub options: ReportOptions,
    pub images: usize,
    pub removed_images: usize,
    pub models: Vec<String>,
    pub cells: Vec<CellEstimate>,
    pub drops: Vec<DropSeries>,
    pub corruption: Vec<CorruptionReport>,
    pub failure_histograms: FailureHistogram,
    pub rankings: Vec<Ranking>,
    pub filter_quality: Option<FilterQuality>,
    pub monotonicity: Option<f64>,
    pub accuracy_on_the_line: Option<AccuracyOnTheLine>,
}

#[derive(Clone, Copy, Debug)]
pub struct ReportInputs<'a> {
    pub manifest: &'a Manifest,
    pub predictions: &'a PredictionLog,
    pub verdicts: Option<&'a FilterVerdicts>,
    pub scores: Option<&'a ScoreTable>,
    pub labels: Option<&'a OocLabels>,
    pub model_meta: Option<&'a [ModelMeta]>,
}

impl<'a> ReportInputs<'a> {
    pub fn new(manifest: &'a Manifest, predictions: &'a PredictionLog) -> Self {
        ReportInputs {
            manifest,
            predictions,
            verdicts: None,
            scores: None,
            labels: None,
            model_meta: None,
        }
    }
}

/// Cell estimates for a table, in key order, including shift-pooled cells.
pub fn cell_estimates(
    table: &AccuracyTable,
    z: f64,
    method: IntervalMethod,
) -> Result<Vec<CellEstimate>> {
    let pooled = table.pooled_over_shifts();
    table
        .iter()
        .chain(pooled.iter())
        .map(|(k, c)| {
            Ok(CellEstimate {
                model: k.model.clone(),
                shift: k.shift.clone(),
                scale: k.scale,
                correct: c.correct,
                total: c.total,
                estimate: proportion_ci_with(c.correct, c.total, z, method)?,
            })
        })
        .collect()
}

pub fn build_report(
    inputs: &ReportInputs<'_>,
    opts: &ReportOptions,
    exec: Execution,
) -> Result<MetricReport> {
    let table = accuracy_by_scale_with(inputs.predictions, inputs.manifest, inputs.verdicts, exec)?;
    let models: Vec<String> = table.models().into_iter().map(str::to_string).collect();
    let cells = cell_estimates(&table, opts.z, opts.interval)?;
    let mut drop_table = table.clone();
    for (k, c) in table.pooled_over_shifts().iter() {
        drop_table.insert(&k.model, &k.shift, k.scale, *c);
    }
    let drops = accuracy_drop(&drop_table, opts.averaging)?;

    let corruption = if models.contains(&opts.baseline) {
        models
            .iter()
            .map(|m| corruption_errors(&table, m, &opts.baseline, opts.corruption))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let idx = trajectory_index(inputs.manifest);
    let fps = failure_points_with(
        inputs.predictions,
        &idx,
        inputs.verdicts,
        opts.base_policy,
        opts.completeness,
        exec,
    )?;
    let failure_histograms = failure_histogram(&fps, opts.normalize_histogram);

    let mut by_group: BTreeMap<(&str, Scale), Vec<(String, ProportionEstimate)>> = BTreeMap::new();
    for c in &cells {
        by_group
            .entry((c.shift.as_str(), c.scale))
            .or_default()
            .push((c.model.clone(), c.estimate));
    }
    let rankings = by_group
        .into_iter()
        .map(|((shift, scale), est)| Ranking {
            shift: shift.to_string(),
            scale,
            groups: rank_models(&est).groups,
        })
        .collect();

    let filter_quality = match (inputs.verdicts, inputs.labels) {
        (Some(v), Some(l)) => Some(evaluate_filter(v, l, opts.partial_policy)?),
        _ => None,
    };
    let monotonicity = match inputs.scores {
        Some(s) => match monotonicity_rate(s, &idx, opts.min_scale) {
            Ok(r) => Some(r),
            Err(Error::NoPairs) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    let accuracy_on_the_line = match inputs.model_meta {
        Some(meta) => accuracy_on_the_line(&table, meta)?,
        None => None,
    };

    Ok(MetricReport {
        options: opts.clone(),
        images: inputs.manifest.len(),
        removed_images: inputs.verdicts.map_or(0, FilterVerdicts::removed_count),
        models,
        cells,
        drops,
        corruption,
        failure_histograms,
        rankings,
        filter_quality,
        monotonicity,
        accuracy_on_the_line,
    })
}

/// Linear fit of pooled shifted accuracy on in-distribution accuracy over the
/// models present in both `table` and `meta`. `None` with fewer than two.
pub fn accuracy_on_the_line(
    table: &AccuracyTable,
    meta: &[ModelMeta],
) -> Result<Option<AccuracyOnTheLine>> {
    let mut ood: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for (k, c) in table.iter() {
        if !k.scale.is_zero() {
            let e = ood.entry(k.model.as_str()).or_default();
            e.0 += c.correct;
            e.1 += c.total;
        }
    }
    let mut rows: Vec<(&ModelMeta, f64)> = meta
        .iter()
        .filter_map(|m| {
            ood.get(m.model_id.as_str())
                .filter(|(_, n)| *n > 0)
                .map(|(k, n)| (m, *k as f64 / *n as f64))
        })
        .collect();
    rows.sort_by(|a, b| a.0.model_id.cmp(&b.0.model_id));
    rows.dedup_by(|a, b| a.0.model_id == b.0.model_id);
    if rows.len() < 2 {
        return Ok(None);
    }
    let id: Vec<f64> = rows.iter().map(|(m, _)| m.id_accuracy).collect();
    let oo: Vec<f64> = rows.iter().map(|(_, a)| *a).collect();
    let fit = linear_fit(&id, &oo)?;
    let sizes: Option<Vec<f64>> = rows.iter().map(|(m, _)| m.size).collect();
    let size_ood_given_id = match sizes {
        Some(sz) if sz.len() >= 3 => match partial_correlation(&sz, &oo, &id) {
            Ok(r) => Some(r),
            Err(Error::DegenerateControl | Error::ConstantRegressor) => None,
            Err(e) => return Err(e),
        },
        _ => None,
    };
    Ok(Some(AccuracyOnTheLine {
        models: rows.iter().map(|(m, _)| m.model_id.clone()).collect(),
        id_accuracy: id,
        ood_accuracy: oo,
        fit,
        size_ood_given_id,
    }))
}

pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// One row per `(model, shift, scale)` cell, pooled shifts included.
pub fn accuracy_csv(report: &MetricReport) -> String {
    let mut out = String::from("model,shift,scale,correct,total,accuracy,sigma,ci_lo,ci_hi\n");
    for c in &report.cells {
        let e = &c.estimate;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            csv_field(&c.model),
            csv_field(&c.shift),
            c.scale,
            c.correct,
            c.total,
            fmt_float(e.p),
            fmt_float(e.sigma),
            fmt_float(e.lo),
            fmt_float(e.hi)
        );
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    AccDropCurve,
    FailureHist,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PlotSelection {
    pub models: Option<BTreeSet<String>>,
    pub shifts: Option<BTreeSet<String>>,
}

impl PlotSelection {
    fn keeps(&self, model: &str, shift: &str) -> bool {
        self.models.as_ref().is_none_or(|m| m.contains(model))
            && self.shifts.as_ref().is_none_or(|s| s.contains(shift))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotData {
    pub csv: String,
    pub svg: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotPoint {
    pub model: String,
    pub shift: String,
    pub scale: Scale,
    pub value: f64,
    pub n: u64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

pub fn emit_plot_data(report: &MetricReport, kind: PlotKind) -> Result<PlotData> {
    emit_plot_data_for(report, kind, &PlotSelection::default())
}

/// Plot-ready CSV (`model,shift,scale,value,n,ci_lo,ci_hi`) and a standalone
/// SVG chart.
///
/// `acc_drop_curve` plots `acc(0) - acc(s)` per series, scale 0 included; the
/// interval is the accuracy interval mirrored around the clean accuracy.
/// `failure_hist` plots failure-point counts per scale; the interval is the
/// proportion interval of `count / trajectories` scaled back to counts.
pub fn emit_plot_data_for(
    report: &MetricReport,
    kind: PlotKind,
    sel: &PlotSelection,
) -> Result<PlotData> {
    let points = plot_points(report, kind, sel)?;
    let mut csv = String::from("model,shift,scale,value,n,ci_lo,ci_hi\n");
    for p in &points {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            csv_field(&p.model),
            csv_field(&p.shift),
            p.scale,
            fmt_float(p.value),
            p.n,
            fmt_float(p.ci_lo),
            fmt_float(p.ci_hi)
        );
    }
    let svg = match kind {
        PlotKind::AccDropCurve => svg_chart(&points, false, "accuracy drop"),
        PlotKind::FailureHist => svg_chart(&points, true, "trajectories failing"),
    };
    Ok(PlotData { csv, svg })
}

pub fn plot_points(
    report: &MetricReport,
    kind: PlotKind,
    sel: &PlotSelection,
) -> Result<Vec<PlotPoint>> {
    let mut points = Vec::new();
    match kind {
        PlotKind::AccDropCurve => {
            for c in &report.cells {
                if !sel.keeps(&c.model, &c.shift) {
                    continue;
                }
                let Some(base) = report
                    .cells
                    .iter()
                    .find(|b| b.model == c.model && b.shift == c.shift && b.scale.is_zero())
                else {
                    continue;
                };
                let a0 = base.estimate.p;
                points.push(PlotPoint {
                    model: c.model.clone(),
                    shift: c.shift.clone(),
                    scale: c.scale,
                    value: a0 - c.estimate.p,
                    n: c.total,
                    ci_lo: a0 - c.estimate.hi,
                    ci_hi: a0 - c.estimate.lo,
                });
            }
        }
        PlotKind::FailureHist => {
            for row in &report.failure_histograms {
                if !sel.keeps(&row.model, &row.shift) {
                    continue;
                }
                for (scale, count) in &row.counts {
                    let n = row.trajectories;
                    let e =
                        proportion_ci_with(*count, n, report.options.z, report.options.interval)?;
                    points.push(PlotPoint {
                        model: row.model.clone(),
                        shift: row.shift.clone(),
                        scale: *scale,
                        value: *count as f64,
                        n,
                        ci_lo: e.lo * n as f64,
                        ci_hi: e.hi * n as f64,
                    });
                }
            }
        }
    }
    if points.is_empty() {
        return Err(Error::EmptySelection(format!("{kind:?}")));
    }
    Ok(points)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn svg_chart(points: &[PlotPoint], bars: bool, y_label: &str) -> String {
    let mut series: BTreeMap<(&str, &str), Vec<&PlotPoint>> = BTreeMap::new();
    for p in points {
        series.entry((&p.model, &p.shift)).or_default().push(p);
    }
    let scales: BTreeSet<Scale> = points.iter().map(|p| p.scale).collect();
    let x_max = scales
        .iter()
        .next_back()
        .map_or(1.0, |s| s.as_f64())
        .max(0.5);
    let (mut y_min, mut y_max) = (0.0f64, 0.0f64);
    for p in points {
        y_min = y_min.min(p.value).min(if bars { 0.0 } else { p.ci_lo });
        y_max = y_max.max(p.value).max(if bars { 0.0 } else { p.ci_hi });
    }
    if y_max - y_min < 1e-9 {
        y_max = y_min + 1.0;
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let slot = plot_w / (x_max / 0.5 + 1.0);
    let px = |s: f64| LEFT + slot * (s / 0.5 + 0.5);
    let py = |v: f64| TOP + plot_h * (y_max - v) / (y_max - y_min);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let (x0, x1, y0, y1) = (LEFT, LEFT + plot_w, TOP, TOP + plot_h);
    let _ = writeln!(
        svg,
        r#"<path d="M{x0:.2} {y0:.2} L{x0:.2} {y1:.2} L{x1:.2} {y1:.2}" fill="none" stroke="black"/>"#
    );
    for s in &scales {
        let x = px(s.as_f64());
        let _ = writeln!(
            svg,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{s}</text>"#,
            y1 + 18.0
        );
    }
    for i in 0..=4 {
        let v = y_min + (y_max - y_min) * i as f64 / 4.0;
        let y = py(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{x1:.2}" y2="{y:.2}" stroke="#dddddd"/>"##,
            x0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"#,
            x0 - 6.0,
            y + 4.0
        );
    }
    if y_min < 0.0 {
        let y = py(0.0);
        let _ = writeln!(
            svg,
            r#"<line x1="{x0:.2}" y1="{y:.2}" x2="{x1:.2}" y2="{y:.2}" stroke="black"/>"#
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">shift scale</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        xml_escape(y_label)
    );

    let n_series = series.len().max(1) as f64;
    let bar_w = slot * 0.8 / n_series;
    for (i, ((model, shift), pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if bars {
            for p in pts {
                if p.value == 0.0 {
                    continue;
                }
                let x = px(p.scale.as_f64()) - slot * 0.4 + bar_w * i as f64;
                let (ya, yb) = (py(p.value), py(0.0));
                let _ = writeln!(
                    svg,
                    r#"<rect x="{x:.2}" y="{:.2}" width="{bar_w:.2}" height="{:.2}" fill="{color}"/>"#,
                    ya.min(yb),
                    (yb - ya).abs()
                );
            }
        } else {
            let path: Vec<String> = pts
                .iter()
                .map(|p| format!("{:.2},{:.2}", px(p.scale.as_f64()), py(p.value)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                path.join(" ")
            );
            for p in pts {
                let x = px(p.scale.as_f64());
                let _ = writeln!(
                    svg,
                    r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{color}"/>"#,
                    py(p.ci_lo),
                    py(p.ci_hi)
                );
                let _ = writeln!(
                    svg,
                    r#"<circle cx="{x:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                    py(p.value)
                );
            }
        }
        let ly = TOP + 16.0 * i as f64;
        let lx = WIDTH - RIGHT + 15.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{lx:.2}" y="{:.2}" width="10" height="10" fill="{color}"/>"#,
            ly
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}">{} / {}</text>"#,
            lx + 15.0,
            ly + 9.0,
            xml_escape(model),
            xml_escape(shift)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

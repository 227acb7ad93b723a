use super::*;
use crate::filter::{FilterVerdict, ImageScores};
use crate::manifest::trajectory_index;
use proptest::prelude::*;

fn sc(h: u32) -> Scale {
    Scale::from_halves(h).unwrap()
}

fn rec(id: &str, class: u32, shift: &str, h: u32, seed: u64) -> ImageRecord {
    ImageRecord {
        image_id: id.into(),
        class_index: class,
        class_name: format!("c{class}"),
        shift_id: shift.into(),
        scale: sc(h),
        seed,
        relpath: format!("{id}.png"),
    }
}

fn removed(ids: &[&str]) -> FilterVerdicts {
    FilterVerdicts(
        ids.iter()
            .map(|id| {
                (
                    id.to_string(),
                    FilterVerdict {
                        image_id: id.to_string(),
                        active: [true; 4],
                        removed: true,
                        prefiltered: false,
                    },
                )
            })
            .collect(),
    )
}

/// 2 classes x 1 shift x 2 seeds x 6 scales.
fn grid_manifest() -> Manifest {
    let mut v = Vec::new();
    for class in [3u32, 8] {
        for seed in [1u64, 2] {
            for h in 0..=5 {
                v.push(rec(&format!("c{class}s{seed}h{h}"), class, "snow", h, seed));
            }
        }
    }
    Manifest::from_records(v).unwrap()
}

#[test]
fn four_images_three_correct() {
    let m = Manifest::from_records(vec![
        rec("a", 1, "fog", 0, 1),
        rec("b", 1, "fog", 0, 2),
        rec("c", 2, "fog", 0, 1),
        rec("d", 2, "fog", 0, 2),
    ])
    .unwrap();
    let mut p = PredictionLog::default();
    p.insert("m", "a", 1);
    p.insert("m", "b", 1);
    p.insert("m", "c", 2);
    p.insert("m", "d", 5);
    let t = accuracy_by_scale(&p, &m, None).unwrap();
    let c = t.get("m", "fog", Scale::ZERO).unwrap();
    assert_eq!((c.correct, c.total), (3, 4));
    assert_eq!(c.accuracy(), 0.75);
}

#[test]
fn fully_filtered_cell_is_absent() {
    let m =
        Manifest::from_records(vec![rec("a", 1, "fog", 0, 1), rec("b", 1, "fog", 1, 1)]).unwrap();
    let mut p = PredictionLog::default();
    p.insert("m", "a", 1);
    let t = accuracy_by_scale(&p, &m, Some(&removed(&["b"]))).unwrap();
    assert!(t.get("m", "fog", sc(1)).is_none());
    assert_eq!(t.len(), 1);
    // without the filter the prediction for b is required
    assert!(matches!(
        accuracy_by_scale(&p, &m, None),
        Err(Error::MissingPrediction { ref image, .. }) if image == "b"
    ));
}

#[test]
fn scripted_predictions_match_recount() {
    let m = grid_manifest();
    let mut p = PredictionLog::default();
    for (i, r) in m.records().iter().enumerate() {
        // model a: wrong on every third image; model b: wrong above scale 1
        p.insert(
            "a",
            &r.image_id,
            if i % 3 == 0 { 999 } else { r.class_index },
        );
        p.insert(
            "b",
            &r.image_id,
            if r.scale > sc(2) { 0 } else { r.class_index },
        );
    }
    let verdicts = removed(&["c3s1h5", "c8s2h0"]);
    let t = accuracy_by_scale_with(&p, &m, Some(&verdicts), Execution::Sequential).unwrap();
    assert_eq!(t, accuracy_by_scale(&p, &m, Some(&verdicts)).unwrap());
    for model in ["a", "b"] {
        for h in 0..=5 {
            let mut k = 0;
            let mut n = 0;
            for r in m.records() {
                if r.scale == sc(h) && verdicts.survives(&r.image_id) {
                    n += 1;
                    if p.get(model, &r.image_id) == Some(r.class_index) {
                        k += 1;
                    }
                }
            }
            let c = t.get(model, "snow", sc(h)).unwrap();
            assert_eq!((c.correct, c.total), (k, n), "{model} {h}");
        }
    }
}

fn table_from(model: &str, shift: &str, cells: &[(u32, u64, u64)]) -> AccuracyTable {
    let mut t = AccuracyTable::default();
    for &(h, k, n) in cells {
        t.insert(
            model,
            shift,
            sc(h),
            AccuracyCell {
                correct: k,
                total: n,
            },
        );
    }
    t
}

#[test]
fn drop_examples() {
    let t = table_from("resnet50", "all", &[(0, 91, 100), (2, 89, 100)]);
    let d = accuracy_drop(&t, Averaging::PerScale).unwrap();
    assert!((d[0].drops[&sc(2)] - 0.02).abs() < 1e-12);

    let t = table_from("m", "s", &[(0, 8, 10), (1, 8, 10), (2, 16, 20)]);
    let d = accuracy_drop(&t, Averaging::ImageWeighted).unwrap();
    assert!(d[0].drops.values().all(|&x| x == 0.0));
    assert_eq!(d[0].average, Some(0.0));

    let t = table_from("m", "s", &[(1, 8, 10)]);
    assert!(matches!(
        accuracy_drop(&t, Averaging::PerScale),
        Err(Error::MissingBaseline { .. })
    ));
}

#[test]
fn weighted_versus_per_scale_average() {
    // p0 = 1; drops 0, 0.1, 0.5 with n = 10, 10, 2
    let t = table_from("m", "s", &[(0, 10, 10), (1, 10, 10), (2, 9, 10), (3, 1, 2)]);
    let w = accuracy_drop(&t, Averaging::ImageWeighted).unwrap()[0]
        .average
        .unwrap();
    let p = accuracy_drop(&t, Averaging::PerScale).unwrap()[0]
        .average
        .unwrap();
    assert!((w - 2.0 / 22.0).abs() < 1e-12);
    assert!((p - 0.2).abs() < 1e-12);
}

/// Cells of a 3-scale table from errors at scales (0, 0.5, 1) with n = 1000.
fn error_table(model: &str, errors: [f64; 3]) -> AccuracyTable {
    let cells: Vec<(u32, u64, u64)> = errors
        .iter()
        .enumerate()
        .map(|(h, e)| (h as u32, ((1.0 - e) * 1000.0).round() as u64, 1000))
        .collect();
    table_from(model, "fog", &cells)
}

fn merge(a: AccuracyTable, b: AccuracyTable) -> AccuracyTable {
    let mut out = a;
    for (k, c) in b.iter() {
        out.insert(&k.model, &k.shift, k.scale, *c);
    }
    out
}

#[test]
fn corruption_error_hand_example() {
    let t = merge(
        error_table("f", [0.1, 0.2, 0.3]),
        error_table("alexnet", [0.3, 0.5, 0.7]),
    );
    let r = corruption_errors(&t, "f", "alexnet", CorruptionOptions::default()).unwrap();
    let s = &r.per_shift["fog"];
    assert!((s.rce.unwrap() - 0.5).abs() < 1e-12);
    assert!((s.ce.unwrap() - 5.0 / 12.0).abs() < 1e-12);
    assert_eq!(r.mce, s.ce);
    assert_eq!(r.mean_rce, s.rce);

    let with_base = corruption_errors(
        &t,
        "f",
        "alexnet",
        CorruptionOptions {
            include_base_scale: true,
        },
    )
    .unwrap();
    let s0 = &with_base.per_shift["fog"];
    assert!((s0.ce.unwrap() - 0.6 / 1.5).abs() < 1e-12);
    assert_eq!(s0.rce, s.rce);
}

#[test]
fn self_baseline_is_exactly_one() {
    let t = error_table("alexnet", [0.3, 0.5, 0.7]);
    let r = corruption_errors(&t, "alexnet", "alexnet", CorruptionOptions::default()).unwrap();
    assert_eq!(r.per_shift["fog"].ce, Some(1.0));
    assert_eq!(r.per_shift["fog"].rce, Some(1.0));
}

#[test]
fn flat_model_has_zero_rce_and_flat_baseline_is_excluded() {
    let t = merge(
        error_table("f", [0.2, 0.2, 0.2]),
        error_table("b", [0.3, 0.5, 0.7]),
    );
    let r = corruption_errors(&t, "f", "b", CorruptionOptions::default()).unwrap();
    assert_eq!(r.per_shift["fog"].rce, Some(0.0));

    let t = merge(
        error_table("f", [0.1, 0.2, 0.3]),
        error_table("b", [0.3, 0.3, 0.3]),
    );
    let r = corruption_errors(&t, "f", "b", CorruptionOptions::default()).unwrap();
    assert_eq!(r.per_shift["fog"].rce, None);
    assert_eq!(r.excluded_shifts, vec!["fog".to_string()]);
    assert_eq!(r.mean_rce, None);
}

#[test]
fn misaligned_tables_rejected() {
    let t = merge(
        error_table("f", [0.1, 0.2, 0.3]),
        table_from("b", "fog", &[(0, 1, 2), (1, 1, 2)]),
    );
    assert!(matches!(
        corruption_errors(&t, "f", "b", CorruptionOptions::default()),
        Err(Error::TableMismatch(_))
    ));
}

#[test]
fn scan_examples() {
    let pts =
        |ok: [bool; 6]| -> Vec<(Scale, bool)> { (0..6).map(|h| (sc(h), ok[h as usize])).collect() };
    assert_eq!(
        scan_trajectory(
            &pts([true, true, true, false, false, false]),
            BasePolicy::default()
        ),
        FailureOutcome::FailsAt(sc(3))
    );
    assert_eq!(
        scan_trajectory(&pts([true; 6]), BasePolicy::default()),
        FailureOutcome::NoFailure
    );
    let base_wrong = pts([false, true, true, true, true, true]);
    assert_eq!(
        scan_trajectory(&base_wrong, BasePolicy::ExcludeBaseFailures),
        FailureOutcome::BaseFailure
    );
    assert_eq!(
        scan_trajectory(&base_wrong, BasePolicy::BinAtZero),
        FailureOutcome::FailsAt(Scale::ZERO)
    );
}

#[test]
fn failure_points_respect_filter_and_completeness() {
    let m = grid_manifest();
    let idx = trajectory_index(&m);
    let mut p = PredictionLog::default();
    for r in m.records() {
        let ok = r.scale < sc(3);
        p.insert("m", &r.image_id, if ok { r.class_index } else { 0 });
    }
    // c3s1 loses its 1.5 image: under `any` the first surviving failure is 2
    let v = removed(&["c3s1h3"]);
    let fps = failure_points(&p, &idx, Some(&v), BasePolicy::default(), Completeness::Any).unwrap();
    let key = |class, seed| FailureKey {
        model: "m".into(),
        trajectory: TrajectoryKey {
            class_index: class,
            shift: "snow".into(),
            seed,
        },
    };
    assert_eq!(fps.outcomes[&key(3, 1)], FailureOutcome::FailsAt(sc(4)));
    assert_eq!(fps.outcomes[&key(8, 2)], FailureOutcome::FailsAt(sc(3)));
    let fps = failure_points(
        &p,
        &idx,
        Some(&v),
        BasePolicy::default(),
        Completeness::CompleteOnly,
    )
    .unwrap();
    assert_eq!(fps.outcomes.len(), 3);
    assert!(!fps.outcomes.contains_key(&key(3, 1)));
}

#[test]
fn histogram_examples() {
    let mut outcomes = BTreeMap::new();
    for (seed, o) in [
        (1, FailureOutcome::FailsAt(sc(3))),
        (2, FailureOutcome::FailsAt(sc(3))),
        (3, FailureOutcome::FailsAt(sc(5))),
        (4, FailureOutcome::NoFailure),
        (5, FailureOutcome::BaseFailure),
    ] {
        outcomes.insert(
            FailureKey {
                model: "m".into(),
                trajectory: TrajectoryKey {
                    class_index: 0,
                    shift: "rain".into(),
                    seed,
                },
            },
            o,
        );
    }
    let fps = FailurePointSet {
        scale_grid: Scale::grid().collect(),
        base_policy: BasePolicy::ExcludeBaseFailures,
        outcomes,
    };
    let h = failure_histogram(&fps, false);
    assert_eq!(h.len(), 1);
    assert_eq!(h[0].counts[&sc(3)], 2);
    assert_eq!(h[0].counts[&sc(5)], 1);
    assert_eq!(h[0].counts.values().filter(|&&c| c > 0).count(), 2);
    assert_eq!(
        h[0].failures() + h[0].no_failure + h[0].base_failures,
        h[0].trajectories
    );

    let h = failure_histogram(&fps, true);
    let r = h[0].ratios.as_ref().unwrap();
    assert!((r[&sc(3)] - 2.0 / 3.0).abs() < 1e-15);
    assert!((r[&sc(5)] - 1.0 / 3.0).abs() < 1e-15);
    assert!(!h[0].empty);
}

#[test]
fn histogram_without_failures_is_flagged_empty() {
    let mut outcomes = BTreeMap::new();
    outcomes.insert(
        FailureKey {
            model: "m".into(),
            trajectory: TrajectoryKey {
                class_index: 0,
                shift: "rain".into(),
                seed: 0,
            },
        },
        FailureOutcome::NoFailure,
    );
    let fps = FailurePointSet {
        scale_grid: Scale::grid().collect(),
        base_policy: BasePolicy::default(),
        outcomes,
    };
    let h = failure_histogram(&fps, true);
    assert!(h[0].empty);
    assert!(h[0].ratios.as_ref().unwrap().values().all(|&r| r == 0.0));
    assert!(h[0].counts.values().all(|&c| c == 0));
}

fn text_shift_table(m: &Manifest, f: impl Fn(&ImageRecord) -> f64) -> ScoreTable {
    m.records()
        .iter()
        .map(|r| {
            (
                r.image_id.clone(),
                ImageScores {
                    a_text_plain: 0.3,
                    a_text_shift: f(r),
                    a_feat_clip: 1.0,
                    a_feat_dino: 1.0,
                    raw_text_plain: 30.0,
                    raw_text_shift: 100.0 * f(r).max(0.0),
                },
            )
        })
        .collect()
}

#[test]
fn monotonicity_examples() {
    let m = grid_manifest();
    let idx = trajectory_index(&m);
    let up = text_shift_table(&m, |r| r.scale.as_f64() / 10.0);
    assert_eq!(monotonicity_rate(&up, &idx, Scale::ZERO).unwrap(), 1.0);
    let down = text_shift_table(&m, |r| -r.scale.as_f64() / 10.0);
    assert_eq!(monotonicity_rate(&down, &idx, sc(1)).unwrap(), 0.0);

    // two trajectories x 5 pairs = 10 pairs; 7 increasing
    let pattern = [
        0.0, 0.1, 0.2, 0.15, 0.3, 0.4, /* second */ 0.5, 0.4, 0.6, 0.55, 0.7, 0.8,
    ];
    let m2 = Manifest::from_records(
        (0..12)
            .map(|i| rec(&format!("i{i}"), 1, "fog", (i % 6) as u32, (i / 6) as u64))
            .collect(),
    )
    .unwrap();
    let scores = text_shift_table(&m2, |r| pattern[r.image_id[1..].parse::<usize>().unwrap()]);
    let idx2 = trajectory_index(&m2);
    // oracle: enumerate pairs directly
    let mut inc = 0;
    let mut tot = 0;
    for t in 0..2 {
        for h in 0..5 {
            tot += 1;
            if pattern[t * 6 + h + 1] > pattern[t * 6 + h] {
                inc += 1;
            }
        }
    }
    assert_eq!((inc, tot), (7, 10));
    assert_eq!(monotonicity_rate(&scores, &idx2, Scale::ZERO).unwrap(), 0.7);

    let single = Manifest::from_records(vec![rec("z", 1, "fog", 0, 0)]).unwrap();
    assert!(matches!(
        monotonicity_rate(
            &text_shift_table(&single, |_| 0.1),
            &trajectory_index(&single),
            Scale::ZERO
        ),
        Err(Error::NoPairs)
    ));
}

#[test]
fn prediction_log_parsing() {
    let m = grid_manifest();
    let log = PredictionLog::parse_jsonl(
        r#"{"model_id":"r50","image_id":"c3s1h0","top1":3}"#,
        "t",
        Some(&m),
    )
    .unwrap();
    assert_eq!(log.get("r50", "c3s1h0"), Some(3));
    assert!(matches!(
        PredictionLog::parse_jsonl(
            r#"{"model_id":"r50","image_id":"nope","top1":3}"#,
            "t",
            Some(&m)
        ),
        Err(Error::Invariant { .. })
    ));
    assert!(matches!(
        PredictionLog::parse_jsonl(
            r#"{"model_id":"r50","image_id":"c3s1h0","top1":1000}"#,
            "t",
            None
        ),
        Err(Error::Invariant { .. })
    ));
    assert!(matches!(
        PredictionLog::parse_jsonl("{", "t", None),
        Err(Error::Parse { line: 1, .. })
    ));
    let again = PredictionLog::parse_jsonl(&log.to_jsonl(), "rt", None).unwrap();
    assert_eq!(again, log);
}

proptest! {
    #[test]
    fn failure_accounting_holds(
        correct in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 6), 1..20),
        drop_mask in proptest::collection::vec(any::<bool>(), 120),
        bin_zero in any::<bool>(),
        any_completeness in any::<bool>(),
    ) {
        let mut records = Vec::new();
        let mut p = PredictionLog::default();
        let mut gone = Vec::new();
        for (seed, traj) in correct.iter().enumerate() {
            for (h, ok) in traj.iter().enumerate() {
                let id = format!("s{seed}h{h}");
                records.push(rec(&id, 4, if seed % 2 == 0 { "fog" } else { "rain" }, h as u32, seed as u64));
                p.insert("m", &id, if *ok { 4 } else { 5 });
                if drop_mask[seed * 6 + h] && h > 0 {
                    gone.push(id);
                }
            }
        }
        let m = Manifest::from_records(records).unwrap();
        let idx = trajectory_index(&m);
        let refs: Vec<&str> = gone.iter().map(String::as_str).collect();
        let v = removed(&refs);
        let policy = if bin_zero { BasePolicy::BinAtZero } else { BasePolicy::ExcludeBaseFailures };
        let completeness = if any_completeness { Completeness::Any } else { Completeness::CompleteOnly };
        let fps = failure_points(&p, &idx, Some(&v), policy, completeness).unwrap();
        let hist = failure_histogram(&fps, false);
        let considered: u64 = hist.iter().map(|r| r.trajectories).sum();
        prop_assert_eq!(considered as usize, fps.outcomes.len());
        for row in &hist {
            prop_assert_eq!(row.failures() + row.no_failure + row.base_failures, row.trajectories);
            if bin_zero {
                prop_assert_eq!(row.base_failures, 0);
            }
        }
    }

    #[test]
    fn looser_filter_never_shrinks_cells(removed_a in proptest::collection::vec(any::<bool>(), 24), extra in proptest::collection::vec(any::<bool>(), 24)) {
        let m = grid_manifest();
        let mut p = PredictionLog::default();
        for r in m.records() {
            p.insert("m", &r.image_id, r.class_index);
        }
        let ids: Vec<&str> = m.records().iter().map(|r| r.image_id.as_str()).collect();
        let strict: Vec<&str> = ids.iter().enumerate().filter(|(i, _)| removed_a[*i] || extra[*i]).map(|(_, id)| *id).collect();
        let loose: Vec<&str> = ids.iter().enumerate().filter(|(i, _)| removed_a[*i]).map(|(_, id)| *id).collect();
        let ts = accuracy_by_scale(&p, &m, Some(&removed(&strict))).unwrap();
        let tl = accuracy_by_scale(&p, &m, Some(&removed(&loose))).unwrap();
        for (k, c) in ts.iter() {
            let l = tl.get(&k.model, &k.shift, k.scale).unwrap();
            prop_assert!(l.total >= c.total);
        }
    }

    #[test]
    fn drop_at_zero_is_zero(k0 in 0u64..=50, n0 in 50u64..100) {
        let t = table_from("m", "s", &[(0, k0, n0), (1, k0, n0)]);
        let d = accuracy_drop(&t, Averaging::ImageWeighted).unwrap();
        prop_assert_eq!(d[0].drops[&sc(1)], 0.0);
    }
}

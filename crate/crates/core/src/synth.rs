//! Deterministic synthetic benchmark data.
//!
//! Generates every input the engine consumes (manifest, embeddings, human
//! labels, predictions) from a seeded RNG, with a known set of out-of-class
//! images and per-model accuracy that decays linearly with shift scale.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::filter::embeddings::{EmbeddingSet, PromptKey, PromptVariant};
use crate::filter::labels::{labels_to_jsonl, Annotation, Choice, RawLabel};
use crate::manifest::{ImageRecord, Manifest, Scale};
use crate::metrics::PredictionLog;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthModel {
    pub id: String,
    pub clean_accuracy: f64,
    pub drop_per_scale: f64,
}

impl SynthModel {
    pub fn new(id: &str, clean_accuracy: f64, drop_per_scale: f64) -> Self {
        SynthModel {
            id: id.to_string(),
            clean_accuracy,
            drop_per_scale,
        }
    }

    pub fn accuracy_at(&self, scale: Scale) -> f64 {
        (self.clean_accuracy - self.drop_per_scale * scale.as_f64()).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: Vec<(u32, String)>,
    pub shifts: Vec<String>,
    pub seeds: Vec<u64>,
    pub models: Vec<SynthModel>,
    pub dim: usize,
    /// Probability that a shifted image is out-of-class is this times its scale.
    pub ooc_per_scale: f64,
    /// Fraction of shifted images that receive human labels.
    pub label_fraction: f64,
    pub annotators: usize,
    pub rng_seed: u64,
}

impl SynthConfig {
    /// The bundled fixture: 2 classes x 2 shifts x 3 seeds x 6 scales.
    pub fn mini() -> Self {
        SynthConfig {
            classes: vec![(1, "goldfish".into()), (207, "golden retriever".into())],
            shifts: vec!["snow".into(), "cartoon".into()],
            seeds: vec![0, 1, 2],
            models: vec![
                SynthModel::new("alexnet", 0.62, 0.12),
                SynthModel::new("resnet50", 0.91, 0.08),
                SynthModel::new("vit_b_16", 0.94, 0.05),
            ],
            dim: 16,
            ooc_per_scale: 0.12,
            label_fraction: 1.0,
            annotators: 2,
            rng_seed: 2024,
        }
    }

    /// A larger instance for benchmarks and statistical tests.
    pub fn sized(n_classes: u32, n_seeds: u64, rng_seed: u64) -> Self {
        let mut cfg = SynthConfig::mini();
        cfg.classes = (0..n_classes)
            .map(|c| (c * 7 % 1000, format!("class{c}")))
            .collect();
        cfg.shifts = ["snow", "fog", "cartoon", "painting"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        cfg.seeds = (0..n_seeds).collect();
        cfg.label_fraction = 0.3;
        cfg.rng_seed = rng_seed;
        cfg
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub manifest: Manifest,
    pub embeddings: EmbeddingSet,
    pub labels: Vec<RawLabel>,
    pub predictions: PredictionLog,
    /// Ground truth behind the labels.
    pub out_of_class: BTreeSet<String>,
}

fn unit(v: Vec<f64>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, std: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn mix(parts: &[(&[f64], f64)]) -> Vec<f64> {
    let dim = parts[0].0.len();
    (0..dim)
        .map(|i| parts.iter().map(|(v, w)| v[i] * w).sum())
        .collect()
}

fn wrong_class(rng: &mut ChaCha8Rng, class: u32) -> u32 {
    (class + rng.random_range(1..1000)) % 1000
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.dim == 0 || cfg.classes.is_empty() || cfg.shifts.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "empty synthetic configuration".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let d = cfg.dim;
    let noise = 0.4 / (d as f64).sqrt();

    let mut clip_proto = HashMap::new();
    let mut dino_proto = HashMap::new();
    for (c, _) in &cfg.classes {
        clip_proto.insert(
            *c,
            unit(gaussian(&mut rng, d, 1.0))
                .iter()
                .map(|&x| x as f64)
                .collect::<Vec<_>>(),
        );
        dino_proto.insert(
            *c,
            unit(gaussian(&mut rng, d, 1.0))
                .iter()
                .map(|&x| x as f64)
                .collect::<Vec<_>>(),
        );
    }
    let mut shift_dir = HashMap::new();
    for s in &cfg.shifts {
        shift_dir.insert(
            s.clone(),
            unit(gaussian(&mut rng, d, 1.0))
                .iter()
                .map(|&x| x as f64)
                .collect::<Vec<_>>(),
        );
    }

    let mut emb = EmbeddingSet::default();
    for (c, _) in &cfg.classes {
        emb.text.insert(
            PromptKey {
                class_index: *c,
                variant: PromptVariant::Plain,
                shift: None,
            },
            unit(clip_proto[c].clone()),
        );
        for s in &cfg.shifts {
            emb.text.insert(
                PromptKey {
                    class_index: *c,
                    variant: PromptVariant::Shifted,
                    shift: Some(s.clone()),
                },
                unit(mix(&[(&clip_proto[c], 1.0), (&shift_dir[s], 0.8)])),
            );
        }
    }

    let mut records = Vec::new();
    let mut out_of_class = BTreeSet::new();
    let mut labels = Vec::new();
    let mut predictions = PredictionLog::default();
    for (c, name) in &cfg.classes {
        for s in &cfg.shifts {
            for &seed in &cfg.seeds {
                for scale in Scale::grid() {
                    let image_id = format!("c{c}_{s}_s{seed}_x{}", scale.halves());
                    let ooc = !scale.is_zero()
                        && rng.random::<f64>() < cfg.ooc_per_scale * scale.as_f64();
                    let k = 0.3 * scale.as_f64();
                    let (clip_base, dino_base) = if ooc {
                        (
                            gaussian(&mut rng, d, 1.0 / (d as f64).sqrt()),
                            gaussian(&mut rng, d, 1.0 / (d as f64).sqrt()),
                        )
                    } else {
                        (clip_proto[c].clone(), dino_proto[c].clone())
                    };
                    let clip_noise = gaussian(&mut rng, d, noise);
                    let dino_noise = gaussian(&mut rng, d, noise);
                    emb.clip_image.insert(
                        image_id.clone(),
                        unit(mix(&[
                            (&clip_base, 1.0),
                            (&shift_dir[s], k),
                            (&clip_noise, 1.0),
                        ])),
                    );
                    emb.dino_cls.insert(
                        image_id.clone(),
                        unit(mix(&[
                            (&dino_base, 1.0),
                            (&shift_dir[s], 0.5 * k),
                            (&dino_noise, 1.0),
                        ])),
                    );
                    for m in &cfg.models {
                        let p = if ooc { 0.05 } else { m.accuracy_at(scale) };
                        let top1 = if rng.random::<f64>() < p {
                            *c
                        } else {
                            wrong_class(&mut rng, *c)
                        };
                        predictions.insert(m.id.clone(), image_id.clone(), top1);
                    }
                    if !scale.is_zero() && rng.random::<f64>() < cfg.label_fraction {
                        let annotations = (0..cfg.annotators.max(1))
                            .map(|a| {
                                let u = rng.random::<f64>();
                                let choice = match (ooc, u) {
                                    (true, u) if u < 0.85 => Choice::NotClass,
                                    (false, u) if u < 0.9 => Choice::Class,
                                    _ => Choice::Partial,
                                };
                                Annotation {
                                    annotator: format!("a{a}"),
                                    choice,
                                }
                            })
                            .collect();
                        labels.push(RawLabel {
                            image_id: image_id.clone(),
                            annotations,
                        });
                    }
                    if ooc {
                        out_of_class.insert(image_id.clone());
                    }
                    records.push(ImageRecord {
                        relpath: format!("{s}/{c}/{seed}/{}.png", scale),
                        image_id,
                        class_index: *c,
                        class_name: name.clone(),
                        shift_id: s.clone(),
                        scale,
                        seed,
                    });
                }
            }
        }
    }
    Ok(SynthDataset {
        manifest: Manifest::from_records(records)?,
        embeddings: emb,
        labels,
        predictions,
        out_of_class,
    })
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const EMBEDDINGS_DIR: &str = "embeddings";

/// Writes `manifest.jsonl`, `labels.jsonl`, `predictions.jsonl` and the
/// `embeddings/` directory under `dir`.
pub fn write_dataset(ds: &SynthDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let emb_dir = dir.join(EMBEDDINGS_DIR);
    fs::create_dir_all(&emb_dir).map_err(|e| Error::io(&emb_dir, e))?;
    for (name, body) in [
        (MANIFEST_FILE, ds.manifest.to_jsonl()),
        (LABELS_FILE, labels_to_jsonl(&ds.labels)),
        (PREDICTIONS_FILE, ds.predictions.to_jsonl()),
    ] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    ds.embeddings.save(&emb_dir)
}

/// Metadata for the mini fixture's models (published top-1 and parameter
/// counts in millions).
pub fn mini_model_meta() -> Vec<crate::report::ModelMeta> {
    [
        ("alexnet", 0.5652, 61.1),
        ("resnet50", 0.7613, 25.6),
        ("vit_b_16", 0.8107, 86.6),
    ]
    .iter()
    .map(|(id, acc, size)| crate::report::ModelMeta {
        model_id: id.to_string(),
        id_accuracy: *acc,
        size: Some(*size),
    })
    .collect()
}

/// Writes the mini dataset plus `model_meta.jsonl`.
pub fn write_mini_fixture(dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    write_dataset(&generate(&SynthConfig::mini())?, dir)?;
    let mut meta = String::new();
    for m in mini_model_meta() {
        meta.push_str(&serde_json::to_string(&m).expect("meta serializes"));
        meta.push('\n');
    }
    let p = dir.join("model_meta.jsonl");
    fs::write(&p, meta).map_err(|e| Error::io(&p, e))
}

/// 2 classes x 2 seeds x 6 scales on one shift, with hand-patterned
/// predictions for `alexnet` and `resnet50`:
///
/// * `resnet50` misses class 2, seed 2 from scale 1.5 on;
/// * `alexnet` misses seed 1 from scale 1 and seed 2 from scale 2.
pub fn grid24() -> Result<(Manifest, PredictionLog)> {
    let mut records = Vec::new();
    let mut preds = PredictionLog::default();
    for class in [1u32, 2] {
        for seed in [1u64, 2] {
            for scale in Scale::grid() {
                let h = scale.halves();
                let id = format!("c{class}-s{seed}-{h}");
                let wrong = (class + 500) % 1000;
                let resnet_miss = class == 2 && seed == 2 && h >= 3;
                let alex_miss = (seed == 1 && h >= 2) || (seed == 2 && h >= 4);
                preds.insert(
                    "resnet50",
                    id.clone(),
                    if resnet_miss { wrong } else { class },
                );
                preds.insert("alexnet", id.clone(), if alex_miss { wrong } else { class });
                records.push(ImageRecord {
                    relpath: format!("snow/{class}/{seed}/{id}.png"),
                    image_id: id,
                    class_index: class,
                    class_name: format!("c{class}"),
                    shift_id: "snow".into(),
                    scale,
                    seed,
                });
            }
        }
    }
    Ok((Manifest::from_records(records)?, preds))
}

pub fn write_grid24_fixture(dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (m, p) = grid24()?;
    for (name, body) in [
        (MANIFEST_FILE, m.to_jsonl()),
        (PREDICTIONS_FILE, p.to_jsonl()),
    ] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::trajectory_index;

    #[test]
    fn mini_shape_and_determinism() {
        let a = generate(&SynthConfig::mini()).unwrap();
        let b = generate(&SynthConfig::mini()).unwrap();
        assert_eq!(a.manifest.len(), 2 * 2 * 3 * 6);
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.predictions, b.predictions);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.predictions.len(), 3 * a.manifest.len());
        let idx = trajectory_index(&a.manifest);
        assert_eq!((idx.len(), idx.complete_count()), (12, 12));
        assert!(a.embeddings.validate().is_ok());
    }

    #[test]
    fn anchors_are_never_out_of_class() {
        let ds = generate(&SynthConfig::sized(10, 4, 7)).unwrap();
        assert!(!ds.out_of_class.is_empty());
        for r in ds.manifest.records() {
            if r.scale.is_zero() {
                assert!(!ds.out_of_class.contains(&r.image_id));
            }
        }
    }
}

//! Synthetic scenes and task sequences.
//!
//! Each scene is a handful of boxed objects whose classes come from the
//! current task or, with configurable probability, from another task.
//! Out-of-task objects are present but unlabeled, which is exactly the
//! co-occurrence situation the pipeline is built to handle.

use crate::rng::{derive_seed, stream};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("class {class_id} appears in tasks {first} and {second}; task label sets must be disjoint")]
    OverlappingClasses {
        class_id: usize,
        first: u32,
        second: u32,
    },
    #[error("co_occurrence_rate {rate} outside [0, 1] for task {task_id}")]
    BadRate { rate: f64, task_id: u32 },
    #[error("task {task_id} has no classes")]
    EmptyClassSet { task_id: u32 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// One incremental task: which classes it teaches and how its scenes
/// are populated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: u32,
    pub class_ids: Vec<usize>,
    pub scene_count: usize,
    /// Probability that a scene also contains one unlabeled object from
    /// a different task.
    pub co_occurrence_rate: f64,
}

/// An object: its class and an axis-aligned box (cx, cy, w, h) in unit
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub class_id: usize,
    pub bbox: [f64; 4],
}

/// A synthetic image stand-in. `labeled_mask[i]` is true iff object i's
/// class belongs to the task this scene was generated for.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub objects: Vec<SceneObject>,
    pub labeled_mask: Vec<bool>,
    pub seed: u64,
}

impl SyntheticScene {
    /// Ground-truth targets restricted to the labeled objects.
    pub fn labeled_objects(&self) -> impl Iterator<Item = &SceneObject> {
        self.objects
            .iter()
            .zip(&self.labeled_mask)
            .filter(|(_, labeled)| **labeled)
            .map(|(o, _)| o)
    }
}

/// Scenes for one task of a generated sequence.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub scenes: Vec<SyntheticScene>,
}

fn validate_specs(specs: &[TaskSpec]) -> Result<(), SceneError> {
    let mut owner: std::collections::HashMap<usize, u32> = std::collections::HashMap::new();
    for spec in specs {
        if spec.class_ids.is_empty() {
            return Err(SceneError::EmptyClassSet {
                task_id: spec.task_id,
            });
        }
        if !(0.0..=1.0).contains(&spec.co_occurrence_rate) {
            return Err(SceneError::BadRate {
                rate: spec.co_occurrence_rate,
                task_id: spec.task_id,
            });
        }
        for &c in &spec.class_ids {
            if let Some(&first) = owner.get(&c) {
                return Err(SceneError::OverlappingClasses {
                    class_id: c,
                    first,
                    second: spec.task_id,
                });
            }
            owner.insert(c, spec.task_id);
        }
    }
    Ok(())
}

fn sample_box(rng: &mut rand_chacha::ChaCha8Rng, placed: &[[f64; 4]]) -> [f64; 4] {
    // Sides large enough that a well-regressed box clears the 0.5 IoU
    // evaluation threshold with margin; small boxes leave no room for
    // the noise the frozen decoder mixes into each slot. Rejection
    // sampling keeps objects spatially distinct so an IoU matcher can
    // tell them apart; heavily overlapped objects would make target
    // assignment ambiguous by construction.
    let mut last = [0.0; 4];
    for _ in 0..64 {
        let w = rng.gen_range(0.2..0.5);
        let h = rng.gen_range(0.2..0.5);
        let cx = rng.gen_range(w / 2.0..1.0 - w / 2.0);
        let cy = rng.gen_range(h / 2.0..1.0 - h / 2.0);
        last = [cx, cy, w, h];
        if placed.iter().all(|p| crate::detector::eval::iou(p, &last) <= 0.1) {
            return last;
        }
    }
    last
}

/// Deterministically generate scenes for every task. `split` keeps
/// train and eval scene streams independent under one base seed.
pub fn generate_task_sequence(
    seed: u64,
    specs: &[TaskSpec],
    split: &str,
) -> Result<Vec<TaskData>, SceneError> {
    validate_specs(specs)?;
    let all_classes: Vec<usize> = specs.iter().flat_map(|s| s.class_ids.clone()).collect();

    let mut tasks = Vec::with_capacity(specs.len());
    for spec in specs {
        let tag = format!("scene/{split}/task{}", spec.task_id);
        let current: HashSet<usize> = spec.class_ids.iter().copied().collect();
        let foreign: Vec<usize> = all_classes
            .iter()
            .copied()
            .filter(|c| !current.contains(c))
            .collect();

        let scenes = (0..spec.scene_count)
            .map(|i| {
                let scene_seed = derive_seed(seed, &tag, i as u64);
                let mut rng = stream(scene_seed, "objects", 0);

                let n_current = if rng.gen_bool(0.5) { 2 } else { 1 };
                let mut objects: Vec<SceneObject> = Vec::new();
                let mut placed: Vec<[f64; 4]> = Vec::new();
                for _ in 0..n_current {
                    let bbox = sample_box(&mut rng, &placed);
                    placed.push(bbox);
                    objects.push(SceneObject {
                        class_id: spec.class_ids[rng.gen_range(0..spec.class_ids.len())],
                        bbox,
                    });
                }
                if !foreign.is_empty() && rng.gen_bool(spec.co_occurrence_rate) {
                    let bbox = sample_box(&mut rng, &placed);
                    objects.push(SceneObject {
                        class_id: foreign[rng.gen_range(0..foreign.len())],
                        bbox,
                    });
                }
                let labeled_mask = objects
                    .iter()
                    .map(|o| current.contains(&o.class_id))
                    .collect();
                SyntheticScene {
                    objects,
                    labeled_mask,
                    seed: scene_seed,
                }
            })
            .collect();

        tasks.push(TaskData {
            spec: spec.clone(),
            scenes,
        });
    }
    Ok(tasks)
}

#[derive(Serialize, Deserialize)]
struct SceneLine {
    class_ids: Vec<usize>,
    boxes: Vec<[f64; 4]>,
    labeled_mask: Vec<bool>,
    seed: u64,
}

/// Write scenes as JSON lines, one scene per line.
pub fn write_scenes_jsonl(path: &Path, scenes: &[SyntheticScene]) -> Result<(), SceneError> {
    let mut buf = Vec::new();
    for scene in scenes {
        let line = SceneLine {
            class_ids: scene.objects.iter().map(|o| o.class_id).collect(),
            boxes: scene.objects.iter().map(|o| o.bbox).collect(),
            labeled_mask: scene.labeled_mask.clone(),
            seed: scene.seed,
        };
        serde_json::to_writer(&mut buf, &line).expect("scene serialization cannot fail");
        buf.write_all(b"\n").expect("vec write");
    }
    crate::checkpoint::write_atomic(path, &buf).map_err(|source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_scenes_jsonl(path: &Path) -> Result<Vec<SyntheticScene>, SceneError> {
    let file = std::fs::File::open(path).map_err(|source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut scenes = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| SceneError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SceneLine =
            serde_json::from_str(&line).map_err(|source| SceneError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                source,
            })?;
        let objects = parsed
            .class_ids
            .iter()
            .zip(&parsed.boxes)
            .map(|(&class_id, &bbox)| SceneObject { class_id, bbox })
            .collect();
        scenes.push(SyntheticScene {
            objects,
            labeled_mask: parsed.labeled_mask,
            seed: parsed.seed,
        });
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<TaskSpec> {
        vec![
            TaskSpec {
                task_id: 1,
                class_ids: vec![0, 1],
                scene_count: 50,
                co_occurrence_rate: 0.5,
            },
            TaskSpec {
                task_id: 2,
                class_ids: vec![2, 3],
                scene_count: 50,
                co_occurrence_rate: 0.5,
            },
        ]
    }

    #[test]
    fn overlapping_class_sets_rejected() {
        let mut bad = specs();
        bad[1].class_ids = vec![1, 2];
        let err = generate_task_sequence(1, &bad, "train").unwrap_err();
        assert!(err.to_string().contains("disjoint"));
    }

    #[test]
    fn zero_co_occurrence_keeps_scenes_pure() {
        let mut pure = specs();
        for s in &mut pure {
            s.co_occurrence_rate = 0.0;
        }
        let tasks = generate_task_sequence(2, &pure, "train").unwrap();
        for task in &tasks {
            let current: HashSet<usize> = task.spec.class_ids.iter().copied().collect();
            for scene in &task.scenes {
                assert!(scene.objects.iter().all(|o| current.contains(&o.class_id)));
                assert!(scene.labeled_mask.iter().all(|l| *l));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_task_sequence(3, &specs(), "train").unwrap();
        let b = generate_task_sequence(3, &specs(), "train").unwrap();
        for (ta, tb) in a.iter().zip(&b) {
            assert_eq!(ta.scenes, tb.scenes);
        }
        let c = generate_task_sequence(3, &specs(), "eval").unwrap();
        assert_ne!(a[0].scenes, c[0].scenes, "splits must differ");
    }

    #[test]
    fn co_occurrence_rate_is_respected() {
        let mut spec = specs();
        spec[0].scene_count = 1000;
        let tasks = generate_task_sequence(4, &spec, "train").unwrap();
        let with_foreign = tasks[0]
            .scenes
            .iter()
            .filter(|s| s.labeled_mask.iter().any(|l| !l))
            .count();
        let rate = with_foreign as f64 / 1000.0;
        assert!((0.45..=0.55).contains(&rate), "measured rate {rate}");
    }

    #[test]
    fn objects_in_a_scene_stay_spatially_distinct() {
        let mut spec = specs();
        spec[0].scene_count = 500;
        spec[0].co_occurrence_rate = 1.0;
        let tasks = generate_task_sequence(4, &spec, "train").unwrap();
        for scene in &tasks[0].scenes {
            for (i, a) in scene.objects.iter().enumerate() {
                for b in &scene.objects[i + 1..] {
                    assert!(
                        crate::detector::eval::iou(&a.bbox, &b.bbox) <= 0.1,
                        "overlapping objects {:?} {:?}",
                        a.bbox,
                        b.bbox
                    );
                }
            }
        }
    }

    #[test]
    fn boxes_stay_inside_unit_square() {
        let tasks = generate_task_sequence(5, &specs(), "train").unwrap();
        for task in &tasks {
            for scene in &task.scenes {
                for o in &scene.objects {
                    let [cx, cy, w, h] = o.bbox;
                    assert!(w > 0.0 && h > 0.0);
                    assert!(cx - w / 2.0 >= 0.0 && cx + w / 2.0 <= 1.0);
                    assert!(cy - h / 2.0 >= 0.0 && cy + h / 2.0 <= 1.0);
                }
            }
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let tasks = generate_task_sequence(6, &specs(), "train").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenes.jsonl");
        write_scenes_jsonl(&path, &tasks[0].scenes).unwrap();
        let back = read_scenes_jsonl(&path).unwrap();
        assert_eq!(back, tasks[0].scenes);
    }
}

//! Detection post-processing and evaluation: IoU, duplicate
//! suppression, pseudo-label filtering and merging, greedy target
//! assignment, AP50, and the object/prompt similarity heatmap.

use super::Detection;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};

/// A training or evaluation target: class plus box (cx, cy, w, h).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub class_id: usize,
    pub bbox: [f64; 4],
}

/// High-confidence detection promoted to a training target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub class_id: usize,
    pub bbox: [f64; 4],
}

/// Intersection over union of two (cx, cy, w, h) boxes.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let corners = |bx: &[f64; 4]| {
        (
            bx[0] - bx[2] / 2.0,
            bx[1] - bx[3] / 2.0,
            bx[0] + bx[2] / 2.0,
            bx[1] + bx[3] / 2.0,
        )
    };
    let (ax0, ay0, ax1, ay1) = corners(a);
    let (bx0, by0, bx1, by1) = corners(b);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    // areas from the same corner arithmetic keep identical boxes at
    // exactly 1.0 despite rounding
    let area_a = (ax1 - ax0) * (ay1 - ay0);
    let area_b = (bx1 - bx0) * (by1 - by0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy same-class suppression at IoU 0.5: keep the highest-scoring
/// detection of each overlapping cluster.
pub fn suppress_duplicates(detections: &[Detection]) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for idx in order {
        let d = &detections[idx];
        let duplicate = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > 0.5);
        if !duplicate {
            kept.push(*d);
        }
    }
    kept
}

/// Keep detections scoring strictly above tau.
pub fn pseudo_label(detections: &[Detection], tau: f64) -> Vec<PseudoLabel> {
    detections
        .iter()
        .filter(|d| d.score > tau)
        .map(|d| PseudoLabel {
            class_id: d.class_id,
            bbox: d.bbox,
        })
        .collect()
}

/// Merge current-task ground truth with previous-task pseudo labels.
/// Pseudo labels of current-task classes are dropped (ground truth
/// already covers them), as are pseudo labels overlapping any ground
/// truth box (IoU > 0.5) or an already-kept same-class pseudo label.
pub fn merge_labels(
    ground_truth: &[Target],
    pseudo: &[PseudoLabel],
    current_classes: &HashSet<usize>,
) -> Vec<Target> {
    let mut targets: Vec<Target> = ground_truth.to_vec();
    for p in pseudo {
        if current_classes.contains(&p.class_id) {
            continue;
        }
        let overlaps_gt = ground_truth.iter().any(|g| iou(&g.bbox, &p.bbox) > 0.5);
        if overlaps_gt {
            continue;
        }
        let overlaps_kept = targets[ground_truth.len()..]
            .iter()
            .any(|t| t.class_id == p.class_id && iou(&t.bbox, &p.bbox) > 0.5);
        if overlaps_kept {
            continue;
        }
        targets.push(Target {
            class_id: p.class_id,
            bbox: p.bbox,
        });
    }
    targets
}

/// Greedy slot assignment for training: each target, in order, claims
/// the free slot whose predicted box overlaps it most; IoU ties break
/// by the slot's score for the target class, then by slot index.
/// Returns per-slot `Option<target index>`.
pub fn assign_targets(
    pred_boxes: &[[f64; 4]],
    class_scores: &[Vec<f64>],
    targets: &[Target],
) -> Vec<Option<usize>> {
    let mut assignment: Vec<Option<usize>> = vec![None; pred_boxes.len()];
    for (t_idx, target) in targets.iter().enumerate() {
        let mut best: Option<(f64, f64, usize)> = None;
        for (s_idx, bbox) in pred_boxes.iter().enumerate() {
            if assignment[s_idx].is_some() {
                continue;
            }
            let overlap = iou(bbox, &target.bbox);
            let score = class_scores[s_idx][target.class_id];
            let candidate = (overlap, score, s_idx);
            let better = match best {
                None => true,
                Some((bo, bs, bi)) => {
                    overlap > bo || (overlap == bo && (score > bs || (score == bs && s_idx < bi)))
                }
            };
            if better {
                best = Some(candidate);
            }
        }
        if let Some((_, _, s_idx)) = best {
            assignment[s_idx] = Some(t_idx);
        }
    }
    assignment
}

/// Per-class AP at IoU 0.5 and the mean over classes that have ground
/// truth. Classes without ground truth are reported as None and
/// excluded from the mean.
#[derive(Debug, Clone)]
pub struct ApReport {
    pub per_class: BTreeMap<usize, Option<f64>>,
    pub mean: Option<f64>,
}

/// AP50 over a set of scenes: per class, detections are sorted by score
/// and matched greedily to unmatched ground truth at IoU ≥ 0.5; AP is
/// the area under the raw precision-recall steps (sum of precision
/// times recall increment at each true positive).
pub fn compute_ap50(
    detections_per_scene: &[Vec<Detection>],
    ground_truth_per_scene: &[Vec<Target>],
    class_set: &BTreeSet<usize>,
) -> ApReport {
    assert_eq!(
        detections_per_scene.len(),
        ground_truth_per_scene.len(),
        "scene count mismatch"
    );
    let mut per_class = BTreeMap::new();
    for &class_id in class_set {
        let mut dets: Vec<(usize, f64, [f64; 4])> = Vec::new();
        for (scene_idx, scene_dets) in detections_per_scene.iter().enumerate() {
            for d in scene_dets.iter().filter(|d| d.class_id == class_id) {
                dets.push((scene_idx, d.score, d.bbox));
            }
        }
        // stable sort: equal scores keep scene/slot order
        dets.sort_by(|a, b| b.1.total_cmp(&a.1));

        let gt_boxes: Vec<Vec<[f64; 4]>> = ground_truth_per_scene
            .iter()
            .map(|gts| {
                gts.iter()
                    .filter(|g| g.class_id == class_id)
                    .map(|g| g.bbox)
                    .collect()
            })
            .collect();
        let total_gt: usize = gt_boxes.iter().map(|g| g.len()).sum();
        if total_gt == 0 {
            per_class.insert(class_id, None);
            continue;
        }

        let mut matched: Vec<Vec<bool>> = gt_boxes.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0usize;
        let mut seen = 0usize;
        let mut ap = 0.0;
        for (scene_idx, _, bbox) in &dets {
            seen += 1;
            let mut best: Option<(f64, usize)> = None;
            for (g_idx, g_box) in gt_boxes[*scene_idx].iter().enumerate() {
                if matched[*scene_idx][g_idx] {
                    continue;
                }
                let overlap = iou(bbox, g_box);
                if overlap >= 0.5 && best.map_or(true, |(bo, _)| overlap > bo) {
                    best = Some((overlap, g_idx));
                }
            }
            if let Some((_, g_idx)) = best {
                matched[*scene_idx][g_idx] = true;
                tp += 1;
                let precision = tp as f64 / seen as f64;
                ap += precision / total_gt as f64;
            }
        }
        per_class.insert(class_id, Some(ap));
    }

    let defined: Vec<f64> = per_class.values().filter_map(|v| *v).collect();
    let mean = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    ApReport { per_class, mean }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine similarity between each task's object queries and each
/// task's prompt rows. Entry (i, j) compares task-i queries with task-j
/// prompts; zero-norm vectors contribute similarity 0.
pub fn similarity_heatmap(
    task_queries: &[Vec<Vec<f64>>],
    task_prompts: &[Vec<Vec<f64>>],
) -> Vec<Vec<f64>> {
    task_queries
        .iter()
        .map(|queries| {
            task_prompts
                .iter()
                .map(|prompts| {
                    let mut sum = 0.0;
                    let mut count = 0usize;
                    for q in queries {
                        for p in prompts {
                            sum += cosine(q, p);
                            count += 1;
                        }
                    }
                    if count == 0 {
                        0.0
                    } else {
                        sum / count as f64
                    }
                })
                .collect()
        })
        .collect()
}

//! The incremental protocol: per-task training of prompts and heads
//! against a frozen backbone, pseudo-labeling of co-occurring old-task
//! objects, prompt fusion after every task past the first, and pooled
//! AP50 evaluation with the fused parameters.

use crate::checkpoint::{save, write_atomic, Checkpoint, CheckpointError, Stage};
use crate::detector::eval::{
    assign_targets, compute_ap50, merge_labels, pseudo_label, suppress_duplicates, Target,
};
use crate::detector::scene::{generate_task_sequence, SceneError, SyntheticScene, TaskData, TaskSpec};
use crate::detector::{DetectorError, EncoderConfig, ToyDetector};
use crate::params::{
    fuse, sparse_loss, FusionAudit, FusionConfig, ParamError, ParameterVector,
};
use crate::prompt::DecoderConfig;
use crate::rng::{derive_seed, stream};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IncrementalError {
    #[error("invalid training config: {reason}")]
    Config { reason: String },
    #[error("non-finite loss at step {step} of task {task_id}")]
    NonFiniteLoss { step: usize, task_id: u32 },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Prompt(#[from] crate::prompt::PromptError),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// First/second-moment optimizer with bias correction and decoupled
    /// weight decay; the default.
    Adam,
    /// Plain gradient descent; deterministic fallback for oracle tests.
    Gd,
}

/// Hyperparameters of one incremental run. Defaults carry the reference
/// values: per-group learning rates 1e-4/1e-5 with a 0.1 drop, focal
/// α = 0.5 and γ = 3.0, pseudo-label threshold 0.65, sparsity 1e-5, and
/// Adam with weight decay 1e-4.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Learning rate for class head and prompt generators.
    pub learning_rate_main: f64,
    /// Lower learning rate for the box head.
    pub learning_rate_box: f64,
    pub epochs_per_task: usize,
    /// Epoch at which both rates are multiplied by `lr_drop_factor`.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    /// L1 coefficient on the prompt generators.
    pub lambda_sparse: f64,
    /// Pseudo-labels keep detections scoring strictly above this.
    pub tau_pseudo: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Weight of the L1 box term relative to classification.
    pub box_loss_weight: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub fusion: FusionConfig,
    /// Ablation toggles: label co-occurring old objects, inject
    /// prompts, fuse prompts after each task.
    pub use_pseudo_labels: bool,
    pub use_prompts: bool,
    pub use_fusion: bool,
    /// Keep head weights across tasks instead of redrawing them.
    pub warm_start_heads: bool,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate_main: 1e-4,
            learning_rate_box: 1e-5,
            epochs_per_task: 60,
            lr_drop_epoch: 48,
            lr_drop_factor: 0.1,
            batch_size: 32,
            lambda_sparse: 1e-5,
            tau_pseudo: 0.65,
            focal_alpha: 0.5,
            focal_gamma: 3.0,
            box_loss_weight: 1.0,
            weight_decay: 1e-4,
            optimizer: OptimizerKind::Adam,
            fusion: FusionConfig::default(),
            use_pseudo_labels: true,
            use_prompts: true,
            use_fusion: true,
            warm_start_heads: true,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), IncrementalError> {
        let bad = |reason: String| Err(IncrementalError::Config { reason });
        if !(self.learning_rate_main > 0.0) || !(self.learning_rate_box > 0.0) {
            return bad(format!(
                "learning rates must be positive, got main {} box {}",
                self.learning_rate_main, self.learning_rate_box
            ));
        }
        if self.lr_drop_epoch > self.epochs_per_task {
            return bad(format!(
                "lr_drop_epoch {} exceeds epochs_per_task {}",
                self.lr_drop_epoch, self.epochs_per_task
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.tau_pseudo) {
            return bad(format!("tau_pseudo {} outside [0, 1]", self.tau_pseudo));
        }
        if self.lambda_sparse < 0.0 {
            return bad(format!("lambda_sparse {} negative", self.lambda_sparse));
        }
        self.fusion
            .validate()
            .map_err(|e| IncrementalError::Config {
                reason: e.to_string(),
            })
    }
}

// ── optimizer ────────────────────────────────────────────────────────

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer over one flat parameter vector with per-element learning
/// rates (how parameter groups are expressed here).
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step_count: u32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, len: usize, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step_count: 0,
        }
    }

    /// One update in place. `lrs[i]` is the effective rate for element
    /// i; weight decay is decoupled (applied directly to the weight,
    /// scaled by the same rate).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lrs: &[f64]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), lrs.len());
        match self.kind {
            OptimizerKind::Gd => {
                for i in 0..params.len() {
                    params[i] -= lrs[i] * (grads[i] + self.weight_decay * params[i]);
                }
            }
            OptimizerKind::Adam => {
                self.step_count += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(self.step_count as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.step_count as i32);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
                    self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    params[i] -=
                        lrs[i] * (m_hat / (v_hat.sqrt() + ADAM_EPS) + self.weight_decay * params[i]);
                }
            }
        }
    }
}

// ── loss ─────────────────────────────────────────────────────────────

/// Focal classification plus L1 box loss for one scene.
///
/// Every slot contributes −α_t(1−p)^γ·ln p where p is the probability
/// of its assigned class (the background column for unassigned slots)
/// and α_t is `focal_alpha` for matched slots and 1−`focal_alpha` for
/// background slots, averaged over slots. At the default α = 0.5 both
/// kinds weigh equally. Slots matched to a target additionally pay the
/// mean absolute error of their box against the target box.
pub fn detection_loss(
    tape: &mut Tape,
    class_probs: Var,
    boxes: Var,
    targets: &[Target],
    assignment: &[Option<usize>],
    num_classes: usize,
    cfg: &TrainingConfig,
) -> Result<Var, IncrementalError> {
    let slots = tape.shape(class_probs)[0];
    let lanes = tape.shape(class_probs)[1];

    let mut mask = vec![0.0; slots * lanes];
    let mut alpha = vec![0.0; slots];
    for (s, assigned) in assignment.iter().enumerate() {
        let class = match assigned {
            Some(t) => targets[*t].class_id,
            None => num_classes,
        };
        mask[s * lanes + class] = 1.0;
        alpha[s] = match assigned {
            Some(_) => cfg.focal_alpha,
            None => 1.0 - cfg.focal_alpha,
        };
    }
    let mask = tape.constant(&Tensor::new(vec![slots, lanes], mask)?);
    let alpha = tape.constant(&Tensor::new(vec![slots, 1], alpha)?);
    let ones_col = tape.constant(&Tensor::new(vec![lanes, 1], vec![1.0; lanes])?);

    let picked = tape.mul(class_probs, mask)?;
    let p = tape.matmul(picked, ones_col)?;
    let one_minus_p = tape.affine(p, -1.0, 1.0);
    let focal_weight = tape.pow_const(one_minus_p, cfg.focal_gamma);
    let log_p = tape.ln(p);
    let weighted = tape.mul(focal_weight, log_p)?;
    let weighted = tape.mul(weighted, alpha)?;
    let mean = tape.mean_all(weighted);
    let class_loss = tape.scale(mean, -1.0);

    let matched: Vec<(usize, usize)> = assignment
        .iter()
        .enumerate()
        .filter_map(|(s, a)| a.map(|t| (s, t)))
        .collect();
    if matched.is_empty() {
        return Ok(class_loss);
    }

    let mut select = vec![0.0; matched.len() * slots];
    let mut target_boxes = Vec::with_capacity(matched.len() * 4);
    for (row, (s, t)) in matched.iter().enumerate() {
        select[row * slots + s] = 1.0;
        target_boxes.extend_from_slice(&targets[*t].bbox);
    }
    let select = tape.constant(&Tensor::new(vec![matched.len(), slots], select)?);
    let target_boxes = tape.constant(&Tensor::new(vec![matched.len(), 4], target_boxes)?);
    let picked_boxes = tape.matmul(select, boxes)?;
    let diff = tape.sub(picked_boxes, target_boxes)?;
    let abs_diff = tape.abs(diff);
    let box_mean = tape.mean_all(abs_diff);
    let box_loss = tape.scale(box_mean, cfg.box_loss_weight);

    Ok(tape.add(class_loss, box_loss)?)
}

// ── per-task training ────────────────────────────────────────────────

/// Ground-truth targets of a scene: its labeled objects.
pub fn ground_truth_targets(scene: &SyntheticScene) -> Vec<Target> {
    scene
        .labeled_objects()
        .map(|o| Target {
            class_id: o.class_id,
            bbox: o.bbox,
        })
        .collect()
}

/// Training targets for one task's scenes: ground truth, plus pseudo
/// labels from the evaluation model of the previous task when enabled.
pub fn build_targets(
    det: &ToyDetector,
    scenes: &[SyntheticScene],
    current_classes: &BTreeSet<usize>,
    with_pseudo: bool,
    cfg: &TrainingConfig,
) -> Result<Vec<Vec<Target>>, IncrementalError> {
    let current: std::collections::HashSet<usize> = current_classes.iter().copied().collect();
    scenes
        .iter()
        .map(|scene| {
            let gt = ground_truth_targets(scene);
            if !with_pseudo {
                return Ok(gt);
            }
            let dets = det.infer_configured(scene, cfg.use_prompts)?;
            let dets = suppress_duplicates(&dets);
            let pseudo = pseudo_label(&dets, cfg.tau_pseudo);
            Ok(merge_labels(&gt, &pseudo, &current))
        })
        .collect()
}

/// Per-epoch mean losses from one task's training.
#[derive(Debug, Clone, Default)]
pub struct TaskTrace {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Train the detector in place on one task's scenes and targets.
/// Only prompts and heads move; the loss is detection_loss plus the L1
/// prompt penalty. Aborts on the first non-finite batch loss.
///
/// The classification softmax is restricted to the lanes this task
/// supervises (target classes plus background). Classes absent from
/// the target set carry no annotations, so treating them as negatives
/// would erase previously learned classes wholesale; leaving their
/// lanes out of the softmax keeps them neutral instead.
pub fn train_task(
    det: &mut ToyDetector,
    scenes: &[SyntheticScene],
    targets: &[Vec<Target>],
    cfg: &TrainingConfig,
    task_id: u32,
) -> Result<TaskTrace, IncrementalError> {
    cfg.validate()?;
    assert_eq!(scenes.len(), targets.len(), "one target list per scene");
    let mut trace = TaskTrace::default();
    if scenes.is_empty() {
        return Ok(trace);
    }

    let proposals: Vec<Tensor> = scenes
        .iter()
        .map(|s| det.encoder.proposals(s))
        .collect::<Result<_, _>>()?;

    // Per-element rates express the two parameter groups: box head low,
    // everything else at the main rate. The prompt-free ablation trains
    // heads only, so generator elements get rate zero there.
    let template = det.trainable_params();
    let base_lrs: Vec<f64> = template
        .entries()
        .iter()
        .flat_map(|e| {
            let lr = if e.name.starts_with("head.box") {
                cfg.learning_rate_box
            } else if e.name.starts_with("layer") && !cfg.use_prompts {
                0.0
            } else {
                cfg.learning_rate_main
            };
            std::iter::repeat(lr).take(e.values.len())
        })
        .collect();
    let mut opt = Optimizer::new(cfg.optimizer, template.total_len(), cfg.weight_decay);
    let shuffle_tag = format!("shuffle/task{task_id}");

    let lanes = det.num_classes() + 1;
    let mut supervised: BTreeSet<usize> = targets.iter().flatten().map(|t| t.class_id).collect();
    supervised.insert(det.num_classes());
    let selection = if supervised.len() < lanes {
        let mut sel = vec![0.0; lanes * supervised.len()];
        for (j, &lane) in supervised.iter().enumerate() {
            sel[lane * supervised.len() + j] = 1.0;
        }
        Some(Tensor::new(vec![lanes, supervised.len()], sel)?)
    } else {
        None
    };

    for epoch in 0..cfg.epochs_per_task {
        let drop = if epoch >= cfg.lr_drop_epoch {
            cfg.lr_drop_factor
        } else {
            1.0
        };
        let lrs: Vec<f64> = base_lrs.iter().map(|l| l * drop).collect();

        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &shuffle_tag, epoch as u64));

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let heads = det.register_heads(&mut tape, true);
            let gens = det.decoder.register_generators(&mut tape, true);
            let gen_opt = if cfg.use_prompts {
                Some(gens.as_slice())
            } else {
                None
            };

            let picker = match selection.as_ref() {
                Some(sel) => {
                    let s = tape.constant(sel);
                    let st = tape.transpose(s)?;
                    Some((s, st))
                }
                None => None,
            };

            let mut batch_loss: Option<Var> = None;
            for &i in batch {
                let fwd = det.forward_scene(&mut tape, &proposals[i], gen_opt, &heads)?;
                let class_probs = match picker {
                    Some((s, st)) => {
                        let picked = tape.matmul(fwd.class_logits, s)?;
                        let restricted = tape.softmax(picked, 1)?;
                        tape.matmul(restricted, st)?
                    }
                    None => fwd.class_probs,
                };
                let probs = tape.value(class_probs);
                let box_vals = tape.value(fwd.boxes);
                let pred_boxes: Vec<[f64; 4]> = (0..det.slots())
                    .map(|s| {
                        [
                            box_vals.at2(s, 0),
                            box_vals.at2(s, 1),
                            box_vals.at2(s, 2),
                            box_vals.at2(s, 3),
                        ]
                    })
                    .collect();
                let scores: Vec<Vec<f64>> = (0..det.slots())
                    .map(|s| (0..det.num_classes() + 1).map(|c| probs.at2(s, c)).collect())
                    .collect();
                let assignment = assign_targets(&pred_boxes, &scores, &targets[i]);
                let loss = detection_loss(
                    &mut tape,
                    class_probs,
                    fwd.boxes,
                    &targets[i],
                    &assignment,
                    det.num_classes(),
                    cfg,
                )?;
                batch_loss = Some(match batch_loss {
                    Some(acc) => tape.add(acc, loss)?,
                    None => loss,
                });
            }
            let det_loss = tape.scale(batch_loss.expect("non-empty batch"), 1.0 / batch.len() as f64);
            let gen_vars: Vec<Var> = gens.iter().flat_map(|g| [g.w1, g.w2]).collect();
            let sparse = sparse_loss(&mut tape, &gen_vars, cfg.lambda_sparse);
            let total = tape.add(det_loss, sparse)?;

            let loss_val = tape.value_scalar(total);
            if !loss_val.is_finite() {
                return Err(IncrementalError::NonFiniteLoss {
                    step: trace.steps,
                    task_id,
                });
            }

            let grads = tape.backward(total)?;
            let mut flat_grad = Vec::with_capacity(template.total_len());
            for g in &gens {
                flat_grad.extend_from_slice(grads.grad(g.w1).data());
                flat_grad.extend_from_slice(grads.grad(g.w2).data());
            }
            for v in [heads.class_w, heads.class_b, heads.box_w, heads.box_b] {
                flat_grad.extend_from_slice(grads.grad(v).data());
            }

            let current = det.trainable_params();
            let mut flat = current.flat();
            opt.step(&mut flat, &flat_grad, &lrs);
            det.set_trainable_params(&current.with_flat(&flat))?;

            loss_sum += loss_val;
            batches += 1;
            trace.steps += 1;
        }
        trace.epoch_losses.push(loss_sum / batches as f64);
    }
    Ok(trace)
}

// ── full incremental run ─────────────────────────────────────────────

/// Model shape for a run: the frozen backbone and the decoder.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

/// Complete run manifest: model, training hyperparameters, tasks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    pub tasks: Vec<TaskSpec>,
}

/// One metrics line: AP50 of a class group after finishing a task,
/// tagged with the parameter stage the evaluation used.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub task: u32,
    pub stage: Stage,
    pub class_group: String,
    pub ap50: f64,
}

/// Parameter snapshots accumulated over a run. `fused[i]` is None for
/// the first task and when fusion is disabled.
#[derive(Debug, Clone)]
pub struct IncrementalRunState {
    pub theta_init: ParameterVector,
    pub trained: Vec<ParameterVector>,
    pub fused: Vec<Option<ParameterVector>>,
    pub audits: Vec<Option<FusionAudit>>,
}

pub struct RunReport {
    pub metrics: Vec<MetricsRow>,
    pub state: IncrementalRunState,
    pub frozen_hash: String,
    /// Final model (fused prompts of the last task loaded).
    pub detector: ToyDetector,
    /// Eval-split scenes, for downstream analysis.
    pub eval_data: Vec<TaskData>,
}

/// Render metrics as CSV (header `task,stage,class_group,ap50`).
pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("task,stage,class_group,ap50\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.task, r.stage, r.class_group, r.ap50
        ));
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<(), IncrementalError> {
    write_atomic(path, text.as_bytes()).map_err(|source| IncrementalError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Pooled evaluation over every eval scene seen so far; returns AP50
/// means for the current task's classes, all previous classes, and
/// their union. Undefined groups (no ground truth) yield None.
fn evaluate_groups(
    det: &ToyDetector,
    seen_tasks: &[TaskData],
    current_classes: &BTreeSet<usize>,
    use_prompts: bool,
) -> Result<[Option<f64>; 3], IncrementalError> {
    let all_classes: BTreeSet<usize> = seen_tasks
        .iter()
        .flat_map(|t| t.spec.class_ids.iter().copied())
        .collect();
    let mut dets_per_scene = Vec::new();
    let mut gt_per_scene = Vec::new();
    for task in seen_tasks {
        for scene in &task.scenes {
            let dets = det.infer_configured(scene, use_prompts)?;
            dets_per_scene.push(suppress_duplicates(&dets));
            gt_per_scene.push(
                scene
                    .objects
                    .iter()
                    .filter(|o| all_classes.contains(&o.class_id))
                    .map(|o| Target {
                        class_id: o.class_id,
                        bbox: o.bbox,
                    })
                    .collect::<Vec<_>>(),
            );
        }
    }
    let report = compute_ap50(&dets_per_scene, &gt_per_scene, &all_classes);

    let group_mean = |classes: &BTreeSet<usize>| {
        let vals: Vec<f64> = classes
            .iter()
            .filter_map(|c| report.per_class.get(c).copied().flatten())
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let previous: BTreeSet<usize> = all_classes
        .difference(current_classes)
        .copied()
        .collect();
    Ok([
        group_mean(current_classes),
        group_mean(&previous),
        group_mean(&all_classes),
    ])
}

/// Run the full protocol on pre-generated task data. Scene data is
/// taken as given so self-consistency experiments can feed repeated or
/// overlapping tasks; `run_incremental` is the validated entry point.
pub fn run_incremental_with_data(
    cfg: &RunConfig,
    train_data: &[TaskData],
    eval_data: &[TaskData],
    out_dir: Option<&Path>,
) -> Result<RunReport, IncrementalError> {
    cfg.training.validate()?;
    if train_data.is_empty() {
        return Err(IncrementalError::Config {
            reason: "at least one task is required".into(),
        });
    }
    let max_class = train_data
        .iter()
        .flat_map(|t| t.spec.class_ids.iter().copied())
        .max()
        .unwrap_or(0);
    if cfg.model.encoder.num_classes <= max_class {
        return Err(IncrementalError::Config {
            reason: format!(
                "encoder num_classes {} cannot hold class id {max_class}",
                cfg.model.encoder.num_classes
            ),
        });
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|source| IncrementalError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }

    let tr = &cfg.training;
    let mut det = ToyDetector::init(
        cfg.model.encoder.clone(),
        cfg.model.decoder.clone(),
        derive_seed(tr.seed, "model", 0),
    )?;
    let frozen_hash = det.frozen_hash();
    let theta_init = det.trainable_params();
    let init_prompts = det.prompt_params();

    let mut state = IncrementalRunState {
        theta_init: theta_init.clone(),
        trained: Vec::new(),
        fused: Vec::new(),
        audits: Vec::new(),
    };
    let mut metrics = Vec::new();
    let mut prev_fused_prompts: Option<ParameterVector> = None;

    for (ti, task) in train_data.iter().enumerate() {
        let task_id = task.spec.task_id;
        let current_classes: BTreeSet<usize> = task.spec.class_ids.iter().copied().collect();

        // Pseudo-labels come from the previous task's evaluation model,
        // i.e. the detector exactly as it stands before this task.
        let with_pseudo = ti > 0 && tr.use_pseudo_labels;
        let targets = build_targets(&det, &task.scenes, &current_classes, with_pseudo, tr)?;

        if !tr.warm_start_heads && ti > 0 {
            det.class_head = Tensor::zeros(det.class_head.shape());
            det.class_bias = Tensor::zeros(det.class_bias.shape());
            det.box_head = Tensor::zeros(det.box_head.shape());
            det.box_bias = Tensor::zeros(det.box_bias.shape());
        }

        if let Some(dir) = out_dir {
            let ckpt = Checkpoint {
                task_id,
                stage: Stage::Init,
                params: det.trainable_params(),
            };
            save(&dir.join(format!("task{task_id}_init.json")), &ckpt)?;
        }

        train_task(&mut det, &task.scenes, &targets, tr, task_id)?;
        let trained = det.trainable_params();
        state.trained.push(trained.clone());
        if let Some(dir) = out_dir {
            let ckpt = Checkpoint {
                task_id,
                stage: Stage::Trained,
                params: trained.clone(),
            };
            save(&dir.join(format!("task{task_id}_trained.json")), &ckpt)?;
        }

        let stage = if ti > 0 && tr.use_fusion {
            let current_prompts = det.prompt_params();
            let prev = prev_fused_prompts
                .as_ref()
                .expect("previous prompts recorded");
            let (fused_prompts, audit) = fuse(&current_prompts, prev, &init_prompts, &tr.fusion)?;
            det.decoder.set_prompt_params(&fused_prompts)?;
            prev_fused_prompts = Some(fused_prompts);
            state.fused.push(Some(det.trainable_params()));
            state.audits.push(Some(audit.clone()));
            if let Some(dir) = out_dir {
                let ckpt = Checkpoint {
                    task_id,
                    stage: Stage::Fused,
                    params: det.trainable_params(),
                };
                save(&dir.join(format!("task{task_id}_fused.json")), &ckpt)?;
                let audit_json =
                    serde_json::to_string_pretty(&audit).expect("audit serializes");
                write_text(&dir.join(format!("task{task_id}_fusion_audit.json")), &audit_json)?;
            }
            Stage::Fused
        } else {
            prev_fused_prompts = Some(det.prompt_params());
            state.fused.push(None);
            state.audits.push(None);
            Stage::Trained
        };

        let [current, previous, all] =
            evaluate_groups(&det, &eval_data[..=ti], &current_classes, tr.use_prompts)?;
        for (group, value) in [("current", current), ("previous", previous), ("all", all)] {
            if let Some(ap50) = value {
                metrics.push(MetricsRow {
                    task: task_id,
                    stage,
                    class_group: group.to_string(),
                    ap50,
                });
            }
        }
    }

    assert_eq!(
        det.frozen_hash(),
        frozen_hash,
        "frozen backbone changed during the run"
    );
    if let Some(dir) = out_dir {
        write_text(&dir.join("metrics.csv"), &metrics_to_csv(&metrics))?;
    }

    Ok(RunReport {
        metrics,
        state,
        frozen_hash,
        detector: det,
        eval_data: eval_data.to_vec(),
    })
}

/// Generate train/eval scene streams for the configured tasks and run
/// the full protocol, optionally writing checkpoints and metrics.csv
/// into `out_dir`.
pub fn run_incremental(
    cfg: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<RunReport, IncrementalError> {
    let train_data = generate_task_sequence(cfg.training.seed, &cfg.tasks, "train")?;
    let eval_data = generate_task_sequence(cfg.training.seed, &cfg.tasks, "eval")?;
    run_incremental_with_data(cfg, &train_data, &eval_data, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::tensor::Tensor;

    fn toy_run_config(tasks: Vec<TaskSpec>, epochs: usize) -> RunConfig {
        RunConfig {
            model: ModelConfig {
                encoder: EncoderConfig {
                    num_classes: 6,
                    slots: 6,
                    ..EncoderConfig::default()
                },
                decoder: DecoderConfig {
                    layers: 2,
                    ..DecoderConfig::default()
                },
            },
            training: TrainingConfig {
                epochs_per_task: epochs,
                lr_drop_epoch: epochs,
                batch_size: 8,
                seed: 11,
                ..TrainingConfig::default()
            },
            tasks,
        }
    }

    #[test]
    fn config_validation_names_the_problem() {
        let mut cfg = TrainingConfig::default();
        cfg.learning_rate_main = 0.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("positive"));

        let mut cfg = TrainingConfig::default();
        cfg.lr_drop_epoch = cfg.epochs_per_task + 1;
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("lr_drop_epoch"));

        let mut cfg = TrainingConfig::default();
        cfg.fusion.top_k = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn perfect_predictions_give_zero_loss() {
        // probs put mass 1 on each slot's assigned class (slot 0 →
        // class 1, slot 1 → background) and boxes hit targets exactly
        let mut tape = Tape::new();
        let probs = tape.constant(&Tensor::from_rows(&[
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]));
        let boxes = tape.constant(&Tensor::from_rows(&[
            vec![0.5, 0.5, 0.2, 0.2],
            vec![0.1, 0.1, 0.1, 0.1],
        ]));
        let targets = vec![Target {
            class_id: 1,
            bbox: [0.5, 0.5, 0.2, 0.2],
        }];
        let cfg = TrainingConfig::default();
        let loss = detection_loss(
            &mut tape,
            probs,
            boxes,
            &targets,
            &[Some(0), None],
            2,
            &cfg,
        )
        .unwrap();
        assert_eq!(tape.value_scalar(loss), 0.0);
    }

    #[test]
    fn focal_with_unit_alpha_zero_gamma_is_cross_entropy() {
        // α = 1 zeroes the background weighting (1−α), so the check
        // matches every slot; γ = 0 then degenerates focal to plain
        // cross-entropy over the assigned classes.
        let mut tape = Tape::new();
        let probs = tape.constant(&Tensor::from_rows(&[
            vec![0.7, 0.2, 0.1],
            vec![0.25, 0.25, 0.5],
        ]));
        let boxes = tape.constant(&Tensor::from_rows(&[
            vec![0.5, 0.5, 0.2, 0.2],
            vec![0.5, 0.5, 0.2, 0.2],
        ]));
        let targets = vec![
            Target {
                class_id: 0,
                bbox: [0.5, 0.5, 0.2, 0.2],
            },
            Target {
                class_id: 1,
                bbox: [0.5, 0.5, 0.2, 0.2],
            },
        ];
        let cfg = TrainingConfig {
            focal_alpha: 1.0,
            focal_gamma: 0.0,
            box_loss_weight: 0.0,
            ..TrainingConfig::default()
        };
        let loss = detection_loss(
            &mut tape,
            probs,
            boxes,
            &targets,
            &[Some(0), Some(1)],
            2,
            &cfg,
        )
        .unwrap();
        let expected = -(0.7f64.ln() + 0.25f64.ln()) / 2.0;
        assert!((tape.value_scalar(loss) - expected).abs() < 1e-12);

        // An unmatched slot at α = 0.5 pays half the plain background
        // cross-entropy.
        let cfg = TrainingConfig {
            focal_alpha: 0.5,
            focal_gamma: 0.0,
            box_loss_weight: 0.0,
            ..TrainingConfig::default()
        };
        let loss = detection_loss(
            &mut tape,
            probs,
            boxes,
            &targets,
            &[Some(0), None],
            2,
            &cfg,
        )
        .unwrap();
        let expected = -(0.5 * 0.7f64.ln() + 0.5 * 0.5f64.ln()) / 2.0;
        assert!((tape.value_scalar(loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn detection_loss_gradient_matches_finite_differences() {
        // differentiable path: logits → softmax, raw boxes → sigmoid
        let targets = vec![
            Target {
                class_id: 1,
                bbox: [0.4, 0.4, 0.2, 0.2],
            },
            Target {
                class_id: 0,
                bbox: [0.7, 0.6, 0.15, 0.2],
            },
        ];
        let assignment = [Some(0), Some(1), None];
        let cfg = TrainingConfig::default();
        let logits = Tensor::new(
            vec![3, 3],
            vec![0.3, -0.2, 0.5, -0.4, 0.8, 0.1, 0.05, -0.6, 0.2],
        )
        .unwrap()
        .with_grad();
        let raw_boxes = Tensor::new(
            vec![3, 4],
            vec![
                -0.2, 0.1, -0.9, -1.1, 0.6, 0.4, -1.3, -0.8, 0.0, -0.1, -1.0, -1.0,
            ],
        )
        .unwrap()
        .with_grad();
        let report = check_gradients(
            |tape, vars| {
                let probs = tape.softmax(vars[0], 1).unwrap();
                let boxes = tape.sigmoid(vars[1]);
                detection_loss(tape, probs, boxes, &targets, &assignment, 2, &cfg).unwrap()
            },
            &[logits, raw_boxes],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn adam_first_step_moves_by_signed_rate() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 2, 0.0);
        let mut params = vec![1.0, -2.0];
        let grads = vec![0.3, -0.7];
        opt.step(&mut params, &grads, &[1e-3, 1e-3]);
        // bias-corrected first step is lr·g/(|g|+ε) ≈ lr·sign(g)
        assert!((params[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((params[1] - (-2.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn gd_step_is_plain_descent_with_decay() {
        let mut opt = Optimizer::new(OptimizerKind::Gd, 1, 0.1);
        let mut params = vec![2.0];
        opt.step(&mut params, &[0.5], &[0.01]);
        assert!((params[0] - (2.0 - 0.01 * (0.5 + 0.1 * 2.0))).abs() < 1e-15);
    }

    fn three_scene_task(class_ids: Vec<usize>) -> (TaskSpec, Vec<SyntheticScene>) {
        let spec = TaskSpec {
            task_id: 1,
            class_ids,
            scene_count: 3,
            co_occurrence_rate: 0.0,
        };
        let scenes = generate_task_sequence(5, std::slice::from_ref(&spec), "train")
            .unwrap()
            .remove(0)
            .scenes;
        (spec, scenes)
    }

    #[test]
    fn zero_epochs_leave_parameters_untouched() {
        let (_, scenes) = three_scene_task(vec![0, 1]);
        let mut det = ToyDetector::init(
            EncoderConfig {
                num_classes: 2,
                ..EncoderConfig::default()
            },
            DecoderConfig::default(),
            7,
        )
        .unwrap();
        let before = det.trainable_params();
        let targets: Vec<Vec<Target>> = scenes.iter().map(|s| ground_truth_targets(s)).collect();
        let cfg = TrainingConfig {
            epochs_per_task: 0,
            lr_drop_epoch: 0,
            ..TrainingConfig::default()
        };
        let trace = train_task(&mut det, &scenes, &targets, &cfg, 1).unwrap();
        assert_eq!(trace.steps, 0);
        assert_eq!(det.trainable_params().flat(), before.flat());
    }

    #[test]
    fn huge_sparse_lambda_shrinks_prompt_l1_monotonically() {
        let (_, scenes) = three_scene_task(vec![0, 1]);
        let scenes = &scenes[..1];
        let mut det = ToyDetector::init(
            EncoderConfig {
                num_classes: 2,
                ..EncoderConfig::default()
            },
            DecoderConfig::default(),
            7,
        )
        .unwrap();
        let targets: Vec<Vec<Target>> = scenes.iter().map(|s| ground_truth_targets(s)).collect();
        let cfg = TrainingConfig {
            epochs_per_task: 1,
            lr_drop_epoch: 0,
            lr_drop_factor: 1.0,
            batch_size: 1,
            lambda_sparse: 1.0,
            optimizer: OptimizerKind::Gd,
            weight_decay: 0.0,
            ..TrainingConfig::default()
        };
        let l1 = |det: &ToyDetector| {
            det.prompt_params()
                .flat()
                .iter()
                .map(|v| v.abs())
                .sum::<f64>()
        };
        let mut trace = vec![l1(&det)];
        for _ in 0..8 {
            train_task(&mut det, scenes, &targets, &cfg, 1).unwrap();
            trace.push(l1(&det));
        }
        for pair in trace.windows(2) {
            assert!(pair[1] < pair[0], "L1 trace not decreasing: {trace:?}");
        }
    }

    #[test]
    fn nonfinite_loss_aborts_with_step_index() {
        let (_, scenes) = three_scene_task(vec![0, 1]);
        let mut det = ToyDetector::init(
            EncoderConfig {
                num_classes: 2,
                ..EncoderConfig::default()
            },
            DecoderConfig::default(),
            7,
        )
        .unwrap();
        let targets: Vec<Vec<Target>> = scenes.iter().map(|s| ground_truth_targets(s)).collect();
        let cfg = TrainingConfig {
            epochs_per_task: 5,
            lr_drop_epoch: 0,
            lr_drop_factor: 1.0,
            batch_size: 1,
            learning_rate_main: 1e25,
            learning_rate_box: 1e25,
            optimizer: OptimizerKind::Gd,
            ..TrainingConfig::default()
        };
        let err = train_task(&mut det, &scenes, &targets, &cfg, 3).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("non-finite loss at step"), "got: {msg}");
        assert!(msg.contains("task 3"), "got: {msg}");
    }

    #[test]
    fn training_reduces_loss() {
        let (_, scenes) = three_scene_task(vec![0, 1]);
        let mut det = ToyDetector::init(
            EncoderConfig {
                num_classes: 2,
                slots: 6,
                ..EncoderConfig::default()
            },
            DecoderConfig {
                layers: 2,
                ..DecoderConfig::default()
            },
            7,
        )
        .unwrap();
        let targets: Vec<Vec<Target>> = scenes.iter().map(|s| ground_truth_targets(s)).collect();
        let cfg = TrainingConfig {
            epochs_per_task: 15,
            lr_drop_epoch: 15,
            batch_size: 3,
            learning_rate_main: 1e-2,
            learning_rate_box: 1e-3,
            lambda_sparse: 0.0,
            ..TrainingConfig::default()
        };
        let trace = train_task(&mut det, &scenes, &targets, &cfg, 1).unwrap();
        let first = trace.epoch_losses[0];
        let last = *trace.epoch_losses.last().unwrap();
        assert!(
            last < first,
            "loss did not decrease: first {first} last {last}"
        );
    }

    #[test]
    fn single_task_run_skips_fusion() {
        let cfg = toy_run_config(
            vec![TaskSpec {
                task_id: 1,
                class_ids: vec![0, 1],
                scene_count: 4,
                co_occurrence_rate: 0.0,
            }],
            1,
        );
        let report = run_incremental(&cfg, None).unwrap();
        assert_eq!(report.state.fused, vec![None]);
        assert!(report.metrics.iter().all(|r| r.stage == Stage::Trained));
        assert!(report
            .metrics
            .iter()
            .all(|r| r.class_group != "previous"));
        assert!(report.metrics.iter().any(|r| r.class_group == "current"));
        assert!(report.metrics.iter().any(|r| r.class_group == "all"));
    }

    #[test]
    fn second_task_evaluates_with_fused_parameters() {
        let cfg = toy_run_config(
            vec![
                TaskSpec {
                    task_id: 1,
                    class_ids: vec![0, 1],
                    scene_count: 4,
                    co_occurrence_rate: 0.5,
                },
                TaskSpec {
                    task_id: 2,
                    class_ids: vec![2, 3],
                    scene_count: 4,
                    co_occurrence_rate: 0.5,
                },
            ],
            1,
        );
        let report = run_incremental(&cfg, None).unwrap();
        assert!(report.state.fused[0].is_none());
        let fused = report.state.fused[1].as_ref().expect("task 2 fuses");
        // the detector ends the run carrying exactly the fused state
        assert_eq!(report.detector.trainable_params().flat(), fused.flat());
        let audit = report.state.audits[1].as_ref().unwrap();
        assert_eq!(audit.total(), report.detector.prompt_params().total_len());
        for row in report.metrics.iter().filter(|r| r.task == 2) {
            assert_eq!(row.stage, Stage::Fused);
        }
    }

    #[test]
    fn metrics_csv_has_header_and_rows() {
        let rows = vec![
            MetricsRow {
                task: 1,
                stage: Stage::Trained,
                class_group: "current".into(),
                ap50: 0.5,
            },
            MetricsRow {
                task: 2,
                stage: Stage::Fused,
                class_group: "all".into(),
                ap50: 0.25,
            },
        ];
        let csv = metrics_to_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "task,stage,class_group,ap50");
        assert_eq!(lines[1], "1,trained,current,0.5");
        assert_eq!(lines[2], "2,fused,all,0.25");
    }
}

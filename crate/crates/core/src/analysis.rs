//! Analysis tooling: MMD-based prompt-diversity metrics, sample
//! extraction from finished runs, hyperparameter sweep drivers, and the
//! CSV emitters behind each report file.

use crate::detector::DetectorError;
use crate::incremental::{run_incremental, IncrementalError, RunConfig, RunReport};
use crate::params::FusionConfig;
use crate::tensor::TensorError;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("sample sets must be non-empty")]
    EmptySamples,
    #[error("sample dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("A-MMD needs at least 2 tasks, got {got}")]
    TooFewTasks { got: usize },
    #[error("bandwidth must be positive, got {got}")]
    BadBandwidth { got: f64 },
    #[error(transparent)]
    Incremental(#[from] IncrementalError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

// ── maximum mean discrepancy ─────────────────────────────────────────

/// Gaussian-kernel bandwidth: fixed, or the median of pooled pairwise
/// distances (falling back to 1.0 when the median degenerates to 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Explicit(f64),
    MedianHeuristic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdConfig {
    pub bandwidth: Bandwidth,
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig {
            bandwidth: Bandwidth::MedianHeuristic,
        }
    }
}

fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn check_dims(samples: &[Vec<f64>], dim: usize) -> Result<(), AnalysisError> {
    for s in samples {
        if s.len() != dim {
            return Err(AnalysisError::DimMismatch {
                left: dim,
                right: s.len(),
            });
        }
    }
    Ok(())
}

/// Median of pairwise Euclidean distances over the pooled samples;
/// 1.0 when every distance is zero or there is only one sample.
pub fn median_bandwidth(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b.iter()).collect();
    let mut dists = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(squared_distance(pooled[i], pooled[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|x, y| x.total_cmp(y));
    let median = if dists.len() % 2 == 1 {
        dists[dists.len() / 2]
    } else {
        (dists[dists.len() / 2 - 1] + dists[dists.len() / 2]) / 2.0
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

/// Squared MMD between two sample sets: the biased V-statistic
/// mean k(a,a) + mean k(b,b) − 2·mean k(a,b) under a Gaussian kernel
/// exp(−‖x−y‖²/2σ²), clamped at zero against negative rounding.
/// Identical multisets give exactly 0.
pub fn mmd2(a: &[Vec<f64>], b: &[Vec<f64>], cfg: &MmdConfig) -> Result<f64, AnalysisError> {
    if a.is_empty() || b.is_empty() {
        return Err(AnalysisError::EmptySamples);
    }
    let dim = a[0].len();
    check_dims(a, dim)?;
    check_dims(b, dim)?;

    let sigma = match cfg.bandwidth {
        Bandwidth::Explicit(s) => {
            if !(s > 0.0) {
                return Err(AnalysisError::BadBandwidth { got: s });
            }
            s
        }
        Bandwidth::MedianHeuristic => median_bandwidth(a, b),
    };
    let denom = 2.0 * sigma * sigma;
    let kernel_mean = |xs: &[Vec<f64>], ys: &[Vec<f64>]| {
        let mut sum = 0.0;
        for x in xs {
            for y in ys {
                sum += (-squared_distance(x, y) / denom).exp();
            }
        }
        sum / (xs.len() * ys.len()) as f64
    };
    // identical inputs produce bitwise-identical sums in all three
    // terms, so the estimator is exactly zero on equal multisets
    let value = kernel_mean(a, a) + kernel_mean(b, b) - 2.0 * kernel_mean(a, b);
    Ok(value.max(0.0))
}

/// Average MMD over all unordered task pairs.
pub fn a_mmd(per_task: &[Vec<Vec<f64>>], cfg: &MmdConfig) -> Result<f64, AnalysisError> {
    if per_task.len() < 2 {
        return Err(AnalysisError::TooFewTasks {
            got: per_task.len(),
        });
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..per_task.len() {
        for j in i + 1..per_task.len() {
            sum += mmd2(&per_task[i], &per_task[j], cfg)?;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

// ── sample extraction from a finished run ────────────────────────────

/// Per-layer prompt samples from a run: for every task, the model that
/// evaluated it (fused when available, trained otherwise) regenerates
/// its prompts on that task's held-out scenes; each prompt is flattened
/// to one L_p·D vector. Indexed [layer][task][sample].
pub fn prompt_samples_per_layer(
    report: &RunReport,
    max_scenes_per_task: usize,
) -> Result<Vec<Vec<Vec<Vec<f64>>>>, AnalysisError> {
    let layers = report.detector.decoder.cfg.layers;
    let mut out = vec![Vec::new(); layers];
    for (ti, task) in report.eval_data.iter().enumerate() {
        let params = report.state.fused[ti]
            .as_ref()
            .unwrap_or(&report.state.trained[ti]);
        let mut det = report.detector.clone();
        det.set_trainable_params(params)?;

        let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); layers];
        for scene in task.scenes.iter().take(max_scenes_per_task) {
            let proposals = det.encoder.proposals(scene)?;
            let mut tape = crate::tensor::Tape::new();
            let heads = det.register_heads(&mut tape, false);
            let gens = det.decoder.register_generators(&mut tape, false);
            let fwd = det.forward_scene(&mut tape, &proposals, Some(&gens), &heads)?;
            for (layer, prompt) in fwd.prompts.iter().enumerate() {
                per_layer[layer].push(tape.value(prompt.p).data().to_vec());
            }
        }
        for (layer, samples) in per_layer.into_iter().enumerate() {
            out[layer].push(samples);
        }
    }
    Ok(out)
}

/// Inputs for the similarity heatmap: per task, the pooled decoder
/// queries of its held-out scenes and the individual D-dim prompt rows
/// generated for them (final decoder layer).
pub fn heatmap_inputs(
    report: &RunReport,
    max_scenes_per_task: usize,
) -> Result<(Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>), AnalysisError> {
    let dim = report.detector.decoder.cfg.model_dim;
    let prompt_len = report.detector.decoder.cfg.prompt_len;
    let mut queries = Vec::new();
    let mut prompts = Vec::new();
    for (ti, task) in report.eval_data.iter().enumerate() {
        let params = report.state.fused[ti]
            .as_ref()
            .unwrap_or(&report.state.trained[ti]);
        let mut det = report.detector.clone();
        det.set_trainable_params(params)?;

        let mut task_queries = Vec::new();
        let mut task_prompts = Vec::new();
        for scene in task.scenes.iter().take(max_scenes_per_task) {
            let proposals = det.encoder.proposals(scene)?;
            let mut tape = crate::tensor::Tape::new();
            let heads = det.register_heads(&mut tape, false);
            let gens = det.decoder.register_generators(&mut tape, false);
            let fwd = det.forward_scene(&mut tape, &proposals, Some(&gens), &heads)?;
            // mean proposal row is what the generators consumed
            let mut query = vec![0.0; dim];
            for s in 0..proposals.shape()[0] {
                for d in 0..dim {
                    query[d] += proposals.at2(s, d) / proposals.shape()[0] as f64;
                }
            }
            task_queries.push(query);
            let last = fwd.prompts.last().expect("prompted pass");
            let p = tape.value(last.p);
            for row in 0..prompt_len {
                task_prompts.push((0..dim).map(|d| p.at2(row, d)).collect());
            }
        }
        queries.push(task_queries);
        prompts.push(task_prompts);
    }
    Ok((queries, prompts))
}

// ── sweeps ───────────────────────────────────────────────────────────

/// One fusion-study cell: skip fusion entirely, or fuse with the given
/// fractions ("keep all previous" is the top_k = 1.0 row).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionCell {
    NoFusion,
    Keep { top_k: f64, top_l: f64 },
}

/// Which study to run and over which values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepGrid {
    HiddenDim(Vec<usize>),
    LambdaSparse(Vec<f64>),
    Fusion(Vec<FusionCell>),
}

/// The λ study grid.
pub fn lambda_grid() -> SweepGrid {
    SweepGrid::LambdaSparse(vec![0.0, 1e-6, 3e-6, 1e-5, 3e-5, 1e-4])
}

/// The fusion-threshold study: no fusion, seven (top_k, top_l) cells,
/// and the keep-all-previous row. Nine cells in total.
pub fn fusion_grid() -> SweepGrid {
    SweepGrid::Fusion(vec![
        FusionCell::NoFusion,
        FusionCell::Keep {
            top_k: 0.0,
            top_l: 0.0,
        },
        FusionCell::Keep {
            top_k: 0.0,
            top_l: 0.3,
        },
        FusionCell::Keep {
            top_k: 0.0,
            top_l: 0.7,
        },
        FusionCell::Keep {
            top_k: 0.3,
            top_l: 0.3,
        },
        FusionCell::Keep {
            top_k: 0.3,
            top_l: 0.7,
        },
        FusionCell::Keep {
            top_k: 0.7,
            top_l: 0.3,
        },
        FusionCell::Keep {
            top_k: 0.7,
            top_l: 0.7,
        },
        FusionCell::Keep {
            top_k: 1.0,
            top_l: 0.0,
        },
    ])
}

/// The generator-bottleneck study, doublings around the default.
pub fn hidden_dim_grid() -> SweepGrid {
    SweepGrid::HiddenDim(vec![2, 4, 8, 16, 32])
}

/// Final-task metrics of one sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    /// Printable cell value, e.g. "8", "0.00001", or "k=0.7,l=0.3".
    pub label: String,
    /// Trainable parameter count of the cell's model.
    pub param_count: usize,
    pub ap50_current: Option<f64>,
    pub ap50_previous: Option<f64>,
    pub ap50_all: Option<f64>,
}

fn final_task_row(label: String, report: &RunReport) -> SweepRow {
    let last_task = report.metrics.iter().map(|r| r.task).max().unwrap_or(0);
    let pick = |group: &str| {
        report
            .metrics
            .iter()
            .find(|r| r.task == last_task && r.class_group == group)
            .map(|r| r.ap50)
    };
    SweepRow {
        label,
        param_count: report.detector.trainable_params().total_len(),
        ap50_current: pick("current"),
        ap50_previous: pick("previous"),
        ap50_all: pick("all"),
    }
}

fn cell_config(base: &RunConfig, grid: &SweepGrid, index: usize) -> (String, RunConfig) {
    let mut cfg = base.clone();
    match grid {
        SweepGrid::HiddenDim(dims) => {
            let d = dims[index];
            cfg.model.decoder.bottleneck = d;
            (d.to_string(), cfg)
        }
        SweepGrid::LambdaSparse(lambdas) => {
            let l = lambdas[index];
            cfg.training.lambda_sparse = l;
            (l.to_string(), cfg)
        }
        SweepGrid::Fusion(cells) => match cells[index] {
            FusionCell::NoFusion => {
                cfg.training.use_fusion = false;
                ("none".to_string(), cfg)
            }
            FusionCell::Keep { top_k, top_l } => {
                cfg.training.use_fusion = true;
                cfg.training.fusion = FusionConfig { top_k, top_l };
                (format!("k={top_k},l={top_l}"), cfg)
            }
        },
    }
}

fn grid_len(grid: &SweepGrid) -> usize {
    match grid {
        SweepGrid::HiddenDim(v) => v.len(),
        SweepGrid::LambdaSparse(v) => v.len(),
        SweepGrid::Fusion(v) => v.len(),
    }
}

/// Run the full protocol once per grid cell (in parallel, shared seed)
/// and report each cell's final-task metrics.
pub fn run_sweep(base: &RunConfig, grid: &SweepGrid) -> Result<Vec<SweepRow>, AnalysisError> {
    (0..grid_len(grid))
        .into_par_iter()
        .map(|i| {
            let (label, cfg) = cell_config(base, grid, i);
            let report = run_incremental(&cfg, None)?;
            Ok(final_task_row(label, &report))
        })
        .collect()
}

// ── CSV emission ─────────────────────────────────────────────────────

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Heatmap rows: `query_task,prompt_task,mean_cosine`.
pub fn heatmap_csv(matrix: &[Vec<f64>]) -> String {
    let mut out = String::from("query_task,prompt_task,mean_cosine\n");
    for (i, row) in matrix.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out.push_str(&format!("{i},{j},{v}\n"));
        }
    }
    out
}

/// Per-layer diversity: `layer,ammd`.
pub fn ammd_csv(per_layer: &[f64]) -> String {
    let mut out = String::from("layer,ammd\n");
    for (layer, v) in per_layer.iter().enumerate() {
        out.push_str(&format!("{layer},{v}\n"));
    }
    out
}

/// Bottleneck sweep: `hidden_dim,param_count,ap50_all,ap50_current,ap50_previous`.
pub fn dim_sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("hidden_dim,param_count,ap50_all,ap50_current,ap50_previous\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.label,
            r.param_count,
            opt_cell(r.ap50_all),
            opt_cell(r.ap50_current),
            opt_cell(r.ap50_previous)
        ));
    }
    out
}

/// Fusion study: `cell,ap50_all,ap50_current,ap50_previous`.
pub fn fusion_sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("cell,ap50_all,ap50_current,ap50_previous\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.label,
            opt_cell(r.ap50_all),
            opt_cell(r.ap50_current),
            opt_cell(r.ap50_previous)
        ));
    }
    out
}

/// λ study: `lambda,ap50_all,ap50_current,ap50_previous`.
pub fn lambda_sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda,ap50_all,ap50_current,ap50_previous\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.label,
            opt_cell(r.ap50_all),
            opt_cell(r.ap50_current),
            opt_cell(r.ap50_previous)
        ));
    }
    out
}

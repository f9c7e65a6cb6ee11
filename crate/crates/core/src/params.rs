//! Parameter-vector algebra: task vectors, magnitude/sign decomposition,
//! top-fraction index selection, the two-model fusion rule, and the L1
//! sparsity penalty.
//!
//! Fusion merges a freshly trained model into the running fused model one
//! scalar at a time. Indices that mattered most for previous tasks keep
//! their old values, indices that matter most for the new task take the
//! new ones, sign-agreeing remainders are averaged, and everything else
//! falls back to the previous value.

use crate::tensor::{sign_zero, Tape, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("duplicate parameter name {name:?}")]
    DuplicateName { name: String },
    #[error("entry {name:?}: shape {shape:?} implies {expected} values, got {got}")]
    ShapeLength {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("parameter vectors differ in entry count: {left} vs {right}")]
    EntryCount { left: usize, right: usize },
    #[error("entry {index} name mismatch: {left:?} vs {right:?}")]
    NameMismatch {
        index: usize,
        left: String,
        right: String,
    },
    #[error("entry {name:?} length mismatch: {left} vs {right}")]
    LengthMismatch {
        name: String,
        left: usize,
        right: usize,
    },
    #[error("fusion fraction {field} = {value} outside [0, 1]")]
    FractionRange { field: &'static str, value: f64 },
}

/// One named block of parameters; `shape` is row-major metadata for
/// reconstructing tensors and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered, named, flat view of a model's trainable parameters. Entry
/// order is significant: two vectors are aligned iff names, order, and
/// per-entry lengths all match, and every binary operation requires it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    entries: Vec<ParamEntry>,
    total_len: usize,
}

impl ParameterVector {
    pub fn new(entries: Vec<ParamEntry>) -> Result<Self, ParamError> {
        let mut seen = std::collections::HashSet::new();
        let mut total = 0usize;
        for e in &entries {
            if !seen.insert(e.name.clone()) {
                return Err(ParamError::DuplicateName {
                    name: e.name.clone(),
                });
            }
            let expected: usize = e.shape.iter().product();
            if expected != e.values.len() {
                return Err(ParamError::ShapeLength {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    expected,
                    got: e.values.len(),
                });
            }
            total += e.values.len();
        }
        Ok(ParameterVector {
            entries,
            total_len: total,
        })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    /// All values concatenated in entry order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len);
        for e in &self.entries {
            out.extend_from_slice(&e.values);
        }
        out
    }

    /// Same names and shapes, values replaced from one flat slice.
    pub fn with_flat(&self, values: &[f64]) -> Self {
        assert_eq!(values.len(), self.total_len, "flat length mismatch");
        let mut offset = 0;
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let next = offset + e.values.len();
                let entry = ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    values: values[offset..next].to_vec(),
                };
                offset = next;
                entry
            })
            .collect();
        ParameterVector {
            entries,
            total_len: self.total_len,
        }
    }

    pub fn check_aligned(&self, other: &Self) -> Result<(), ParamError> {
        if self.entries.len() != other.entries.len() {
            return Err(ParamError::EntryCount {
                left: self.entries.len(),
                right: other.entries.len(),
            });
        }
        for (i, (a, b)) in self.entries.iter().zip(&other.entries).enumerate() {
            if a.name != b.name {
                return Err(ParamError::NameMismatch {
                    index: i,
                    left: a.name.clone(),
                    right: b.name.clone(),
                });
            }
            if a.values.len() != b.values.len() {
                return Err(ParamError::LengthMismatch {
                    name: a.name.clone(),
                    left: a.values.len(),
                    right: b.values.len(),
                });
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.values.iter().all(|v| v.is_finite()))
    }
}

/// Difference of two aligned parameter vectors, decomposed into
/// magnitude and sign.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub values: Vec<f64>,
    pub magnitude: Vec<f64>,
    pub sign: Vec<i8>,
}

pub fn task_vector(current: &ParameterVector, base: &ParameterVector) -> Result<TaskVector, ParamError> {
    current.check_aligned(base)?;
    let values: Vec<f64> = current
        .flat()
        .iter()
        .zip(base.flat().iter())
        .map(|(c, b)| c - b)
        .collect();
    let magnitude: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let sign: Vec<i8> = values.iter().map(|v| sign_zero(*v) as i8).collect();
    Ok(TaskVector {
        values,
        magnitude,
        sign,
    })
}

/// Indices of the `floor(fraction·n)` largest magnitudes, ties broken by
/// lower index. Returned sorted ascending.
pub fn top_fraction_indices(magnitude: &[f64], fraction: f64) -> Vec<usize> {
    let n = magnitude.len();
    let count = ((fraction * n as f64).floor() as usize).min(n);
    if count == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        magnitude[b]
            .total_cmp(&magnitude[a])
            .then_with(|| a.cmp(&b))
    });
    let mut picked: Vec<usize> = order[..count].to_vec();
    picked.sort_unstable();
    picked
}

/// Fractions of previous-task and current-task parameters preserved
/// verbatim during fusion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub top_k: f64,
    pub top_l: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            top_k: 0.7,
            top_l: 0.3,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), ParamError> {
        for (field, value) in [("top_k", self.top_k), ("top_l", self.top_l)] {
            if !(0.0..=1.0).contains(&value) || value.is_nan() {
                return Err(ParamError::FractionRange { field, value });
            }
        }
        Ok(())
    }
}

/// Which fusion branch fired how often, plus the two index sets, for
/// post-hoc inspection. Counts always sum to the vector length.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionAudit {
    pub preserved_prev: usize,
    pub preserved_curr: usize,
    pub averaged: usize,
    pub fallback: usize,
    pub i_prev: Vec<usize>,
    pub i_curr: Vec<usize>,
}

impl FusionAudit {
    pub fn total(&self) -> usize {
        self.preserved_prev + self.preserved_curr + self.averaged + self.fallback
    }
}

/// Merge a trained model into the running fused model.
///
/// Per index, the first matching branch wins: (1) index ranks in the
/// top `top_k` fraction of |θ_prev_fused − θ_init| → keep previous;
/// (2) index ranks in the top `top_l` fraction of |θ_curr − θ_prev_fused|
/// → take current; (3) both task-vector signs equal and nonzero →
/// average previous and current; (4) otherwise keep previous.
pub fn fuse(
    theta_curr: &ParameterVector,
    theta_prev_fused: &ParameterVector,
    theta_init: &ParameterVector,
    cfg: &FusionConfig,
) -> Result<(ParameterVector, FusionAudit), ParamError> {
    cfg.validate()?;
    theta_curr.check_aligned(theta_prev_fused)?;
    theta_prev_fused.check_aligned(theta_init)?;

    let v_prev = task_vector(theta_prev_fused, theta_init)?;
    let v_curr = task_vector(theta_curr, theta_prev_fused)?;
    let i_prev = top_fraction_indices(&v_prev.magnitude, cfg.top_k);
    let i_curr = top_fraction_indices(&v_curr.magnitude, cfg.top_l);

    let n = theta_curr.total_len();
    let mut in_prev = vec![false; n];
    for &i in &i_prev {
        in_prev[i] = true;
    }
    let mut in_curr = vec![false; n];
    for &i in &i_curr {
        in_curr[i] = true;
    }

    let prev = theta_prev_fused.flat();
    let curr = theta_curr.flat();
    let mut fused = vec![0.0; n];
    let mut audit = FusionAudit {
        preserved_prev: 0,
        preserved_curr: 0,
        averaged: 0,
        fallback: 0,
        i_prev,
        i_curr,
    };
    for i in 0..n {
        fused[i] = if in_prev[i] {
            audit.preserved_prev += 1;
            prev[i]
        } else if in_curr[i] {
            audit.preserved_curr += 1;
            curr[i]
        } else if v_prev.sign[i] == v_curr.sign[i] && v_prev.sign[i] != 0 {
            audit.averaged += 1;
            0.5 * (prev[i] + curr[i])
        } else {
            audit.fallback += 1;
            prev[i]
        };
    }

    Ok((theta_prev_fused.with_flat(&fused), audit))
}

/// L1 penalty λ·Σ|θ| over per-layer prompt parameters, built on the tape
/// so it contributes gradients during training.
pub fn sparse_loss(tape: &mut Tape, layer_params: &[Var], lambda: f64) -> Var {
    let mut total: Option<Var> = None;
    for &p in layer_params {
        let a = tape.abs(p);
        let s = tape.sum_all(a);
        total = Some(match total {
            Some(t) => tape.add(t, s).expect("scalar add"),
            None => s,
        });
    }
    match total {
        Some(t) => tape.scale(t, lambda),
        None => tape.scalar(0.0),
    }
}

/// Plain-number version of [`sparse_loss`] for reporting.
pub fn sparse_loss_value(layers: &[&ParameterVector], lambda: f64) -> f64 {
    let sum: f64 = layers
        .iter()
        .flat_map(|pv| pv.entries().iter())
        .flat_map(|e| e.values.iter())
        .map(|v| v.abs())
        .sum();
    lambda * sum
}

/// Fraction of entries with |value| < eps.
pub fn sparsity_report(pv: &ParameterVector, eps: f64) -> f64 {
    assert!(eps > 0.0, "eps must be positive");
    if pv.total_len() == 0 {
        return 0.0;
    }
    let near_zero = pv
        .entries()
        .iter()
        .flat_map(|e| e.values.iter())
        .filter(|v| v.abs() < eps)
        .count();
    near_zero as f64 / pv.total_len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::tensor::Tensor;

    fn pv(values: &[f64]) -> ParameterVector {
        ParameterVector::new(vec![ParamEntry {
            name: "w".into(),
            shape: vec![values.len()],
            values: values.to_vec(),
        }])
        .unwrap()
    }

    #[test]
    fn task_vector_identity_case() {
        let a = pv(&[1.0, -2.0, 0.5]);
        let tv = task_vector(&a, &a).unwrap();
        assert!(tv.values.iter().all(|v| *v == 0.0));
        assert!(tv.sign.iter().all(|s| *s == 0));
    }

    #[test]
    fn task_vector_forced_arithmetic() {
        let curr = pv(&[2.0, -2.0, -0.5, 1.0]);
        let base = pv(&[1.0, -2.0, 0.5, 0.0]);
        let tv = task_vector(&curr, &base).unwrap();
        assert_eq!(tv.values, vec![1.0, 0.0, -1.0, 1.0]);
        assert_eq!(tv.sign, vec![1, 0, -1, 1]);
    }

    #[test]
    fn task_vector_reconstructs_from_sign_and_magnitude() {
        let mut rng = crate::rng::stream(3, "params-test", 0);
        use rand::Rng;
        let a: Vec<f64> = (0..100).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..100).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let tv = task_vector(&pv(&a), &pv(&b)).unwrap();
        for i in 0..100 {
            assert!(tv.magnitude[i] >= 0.0);
            assert_eq!(tv.sign[i] as f64 * tv.magnitude[i], tv.values[i]);
        }
    }

    #[test]
    fn misalignment_names_first_mismatched_entry() {
        let a = ParameterVector::new(vec![ParamEntry {
            name: "alpha".into(),
            shape: vec![2],
            values: vec![0.0, 0.0],
        }])
        .unwrap();
        let b = ParameterVector::new(vec![ParamEntry {
            name: "beta".into(),
            shape: vec![2],
            values: vec![0.0, 0.0],
        }])
        .unwrap();
        let err = task_vector(&a, &b).unwrap_err();
        assert!(err.to_string().contains("alpha") && err.to_string().contains("beta"));
    }

    #[test]
    fn top_fraction_boundary_cases() {
        let mu = [1.0, 0.0, 1.0, 1.0];
        assert!(top_fraction_indices(&mu, 0.0).is_empty());
        assert_eq!(top_fraction_indices(&mu, 1.0), vec![0, 1, 2, 3]);
        // tie among {0,2,3} broken by lowest index
        assert_eq!(top_fraction_indices(&mu, 0.25), vec![0]);
    }

    #[test]
    fn fuse_hand_example() {
        let init = pv(&[0.0, 0.0, 0.0, 0.0]);
        let prev = pv(&[1.0, -2.0, 0.5, 0.0]);
        let curr = pv(&[2.0, -2.0, -0.5, 1.0]);
        let cfg = FusionConfig {
            top_k: 0.25,
            top_l: 0.25,
        };
        let (fused, audit) = fuse(&curr, &prev, &init, &cfg).unwrap();
        assert_eq!(fused.flat(), vec![2.0, -2.0, 0.5, 0.0]);
        assert_eq!(audit.preserved_prev, 1);
        assert_eq!(audit.preserved_curr, 1);
        assert_eq!(audit.averaged, 0);
        assert_eq!(audit.fallback, 2);
        assert_eq!(audit.i_prev, vec![1]);
        assert_eq!(audit.i_curr, vec![0]);
    }

    #[test]
    fn fuse_zero_task_vector_is_identity() {
        let init = pv(&[0.5, -1.0, 2.0]);
        let prev = pv(&[1.0, 0.0, -3.0]);
        for (k, l) in [(0.0, 0.0), (0.5, 0.5), (1.0, 1.0), (0.7, 0.3)] {
            let cfg = FusionConfig { top_k: k, top_l: l };
            let (fused, _) = fuse(&prev, &prev, &init, &cfg).unwrap();
            assert_eq!(fused.flat(), prev.flat());
        }
    }

    #[test]
    fn fuse_top_k_one_keeps_previous_model() {
        let init = pv(&[0.0; 5]);
        let prev = pv(&[1.0, -2.0, 3.0, -4.0, 5.0]);
        let curr = pv(&[9.0, 9.0, 9.0, 9.0, 9.0]);
        let cfg = FusionConfig {
            top_k: 1.0,
            top_l: 0.5,
        };
        let (fused, audit) = fuse(&curr, &prev, &init, &cfg).unwrap();
        assert_eq!(fused.flat(), prev.flat());
        assert_eq!(audit.preserved_prev, 5);
    }

    #[test]
    fn fusion_config_rejects_out_of_range() {
        assert!(FusionConfig {
            top_k: 1.5,
            top_l: 0.0
        }
        .validate()
        .is_err());
        assert!(FusionConfig {
            top_k: 0.5,
            top_l: -0.1
        }
        .validate()
        .is_err());
    }

    #[test]
    fn sparse_loss_trivial_values() {
        let zero = pv(&[0.0, 0.0, 0.0]);
        assert_eq!(sparse_loss_value(&[&zero], 0.1), 0.0);
        let theta = pv(&[1.0, -2.0, 3.0]);
        assert!((sparse_loss_value(&[&theta], 0.1) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn sparse_loss_tape_matches_value_and_gradient() {
        let theta = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(&theta.clone().with_grad());
        let loss = sparse_loss(&mut tape, &[v], 0.1);
        assert!((tape.value_scalar(loss) - 0.6).abs() < 1e-15);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.grad(v).data(), &[0.1, -0.1, 0.1]);

        // FD check away from zero, where |·| is smooth
        let report = check_gradients(
            |tape, vars| sparse_loss(tape, vars, 0.37),
            &[Tensor::new(vec![4], vec![0.5, -1.5, 2.0, -0.01]).unwrap()],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7);
    }

    #[test]
    fn sparse_loss_empty_layer_list_is_zero() {
        let mut tape = Tape::new();
        let loss = sparse_loss(&mut tape, &[], 1.0);
        assert_eq!(tape.value_scalar(loss), 0.0);
    }

    #[test]
    fn sparsity_report_fractions() {
        assert_eq!(sparsity_report(&pv(&[0.0, 0.0, 0.0]), 1e-8), 1.0);
        assert_eq!(sparsity_report(&pv(&[1.0, 0.0, 0.0, 0.0]), 1e-8), 0.75);
    }
}

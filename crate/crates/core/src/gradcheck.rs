//! Finite-difference verification of tape gradients.
//!
//! Central differences around each input element give an independent
//! estimate of the gradient; any analytic/numeric disagreement beyond
//! tolerance is reported with the exact tensor and element index so
//! failures are debuggable.

use crate::tensor::{Tape, Tensor, Var};

/// Outcome of a gradient check over one scalar-valued function.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error seen across all elements of all inputs.
    pub max_rel_err: f64,
    /// Where the maximum occurred: (input index, element index).
    pub worst: (usize, usize),
    /// Total elements compared.
    pub elements: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error(
        "gradient mismatch at input {input} element {element}: analytic {analytic:.6e} vs numeric {numeric:.6e} (rel err {rel_err:.3e} > tol {tol:.1e})"
    )]
    Mismatch {
        input: usize,
        element: usize,
        analytic: f64,
        numeric: f64,
        rel_err: f64,
        tol: f64,
    },
    #[error("non-finite loss while perturbing input {input} element {element} by {delta:+e}")]
    NonFiniteLoss {
        input: usize,
        element: usize,
        delta: f64,
    },
    #[error("non-finite analytic gradient at input {input} element {element}")]
    NonFiniteGrad { input: usize, element: usize },
}

/// Relative error with a unit floor, so tiny gradients are compared
/// absolutely instead of blowing up the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compare tape gradients of `f` against central differences at the
/// given inputs. `f` must register its inputs in order via `Tape::leaf`
/// and return a scalar.
pub fn check_gradients<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |tensors: &[Tensor]| -> (f64, Option<Vec<Tensor>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars);
        let value = tape.value_scalar(loss);
        let grads = tape
            .backward(loss)
            .map(|g| vars.iter().map(|v| g.grad(*v)).collect())
            .ok();
        (value, grads)
    };

    let tracked: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let (_, analytic) = eval(&tracked);
    let analytic = analytic.expect("loss must be scalar for gradient check");

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        elements: 0,
    };

    for (i, input) in inputs.iter().enumerate() {
        let grad = &analytic[i];
        for e in 0..input.numel() {
            let a = grad.data()[e];
            if !a.is_finite() {
                return Err(GradCheckError::NonFiniteGrad { input: i, element: e });
            }

            let probe = |delta: f64| -> Result<f64, GradCheckError> {
                let mut shifted: Vec<Tensor> = inputs.to_vec();
                shifted[i].data_mut()[e] += delta;
                let (value, _) = eval(&shifted);
                if !value.is_finite() {
                    return Err(GradCheckError::NonFiniteLoss {
                        input: i,
                        element: e,
                        delta,
                    });
                }
                Ok(value)
            };
            let plus = probe(eps)?;
            let minus = probe(-eps)?;
            let numeric = (plus - minus) / (2.0 * eps);

            let err = rel_err(a, numeric);
            report.elements += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, e);
            }
            if err > tol {
                return Err(GradCheckError::Mismatch {
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                    rel_err: err,
                    tol,
                });
            }
        }
    }

    Ok(report)
}

// ── full-suite runner ────────────────────────────────────────────────

/// One op's verdict from the full suite: the worst relative error over
/// all checked points, or the first failure.
pub struct SuiteResult {
    pub name: &'static str,
    pub tol: f64,
    pub points: usize,
    pub outcome: Result<f64, GradCheckError>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.outcome.is_ok()
    }
}

/// Finite-difference checks for every differentiable op in the stack,
/// each at `points` random input draws. Elementary smooth ops are held
/// to 1e-6, composites (which stack many roundings) to 1e-4.
pub fn run_suite(seed: u64, points: usize) -> Vec<SuiteResult> {
    use crate::detector::eval::Target;
    use crate::incremental::{detection_loss, TrainingConfig};
    use crate::params::sparse_loss;
    use crate::prompt::{generate_prompt, prompted_attention, AttentionWeights, GeneratorVars, PromptVars, PromptedAttentionConfig};
    use crate::rng::{stream, uniform_tensor};
    use rand::Rng;

    // uniform values bounded away from zero, so kinked ops (relu, abs)
    // are checked off their non-differentiable points
    let away_from_zero = |rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]| {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let mag = rng.gen_range(0.1..1.5);
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    };

    let run_op = |name: &'static str,
                  tol: f64,
                  check: &dyn Fn(&mut rand_chacha::ChaCha8Rng, f64) -> Result<GradCheckReport, GradCheckError>|
     -> SuiteResult {
        let mut worst = 0.0f64;
        for point in 0..points {
            let mut rng = stream(seed, &format!("gradcheck/{name}"), point as u64);
            match check(&mut rng, tol) {
                Ok(report) => worst = worst.max(report.max_rel_err),
                Err(e) => {
                    return SuiteResult {
                        name,
                        tol,
                        points,
                        outcome: Err(e),
                    }
                }
            }
        }
        SuiteResult {
            name,
            tol,
            points,
            outcome: Ok(worst),
        }
    };

    vec![
        run_op("matmul", 1e-6, &|rng, tol| {
            let a = uniform_tensor(rng, &[3, 4], 2.0);
            let b = uniform_tensor(rng, &[4, 2], 2.0);
            check_gradients(
                |tape, vars| {
                    let c = tape.matmul(vars[0], vars[1]).unwrap();
                    tape.sum_all(c)
                },
                &[a, b],
                1e-5,
                tol,
            )
        }),
        run_op("softmax", 1e-6, &|rng, tol| {
            let x = uniform_tensor(rng, &[3, 5], 2.0);
            let mix = uniform_tensor(rng, &[3, 5], 1.0);
            check_gradients(
                |tape, vars| {
                    let y = tape.softmax(vars[0], 1).unwrap();
                    let p = tape.mul(y, vars[1]).unwrap();
                    tape.sum_all(p)
                },
                &[x, mix],
                1e-5,
                tol,
            )
        }),
        run_op("relu", 1e-6, &|rng, tol| {
            let x = away_from_zero(rng, &[4, 4]);
            check_gradients(
                |tape, vars| {
                    let y = tape.relu(vars[0]);
                    tape.sum_all(y)
                },
                &[x],
                1e-5,
                tol,
            )
        }),
        run_op("prompt_generator", 1e-4, &|rng, tol| {
            let query = uniform_tensor(rng, &[1, 6], 1.0);
            let w1 = uniform_tensor(rng, &[6, 3], 1.0);
            let w2 = uniform_tensor(rng, &[3, 24], 1.0);
            let mix = uniform_tensor(rng, &[4, 6], 1.0);
            check_gradients(
                |tape, vars| {
                    let gen = GeneratorVars {
                        w1: vars[1],
                        w2: vars[2],
                    };
                    let prompt = generate_prompt(tape, &gen, vars[0], 6, 4).unwrap();
                    let mixed = tape.mul(prompt.p, vars[3]).unwrap();
                    tape.sum_all(mixed)
                },
                &[query, w1, w2, mix],
                1e-5,
                tol,
            )
        }),
        run_op("prompted_attention", 1e-4, &|rng, tol| {
            let attn = AttentionWeights::init(rng, 8, 2, 0.5).unwrap();
            let x = uniform_tensor(rng, &[5, 8], 1.0);
            let p = uniform_tensor(rng, &[4, 8], 1.0);
            let mix = uniform_tensor(rng, &[5, 8], 1.0);
            let cfg = PromptedAttentionConfig::default();
            check_gradients(
                |tape, vars| {
                    let half = tape.slice(vars[1], 0, 0, 2).unwrap();
                    let other = tape.slice(vars[1], 0, 2, 4).unwrap();
                    let prompt = PromptVars {
                        p: vars[1],
                        p_k: half,
                        p_v: other,
                    };
                    let out = prompted_attention(tape, &attn, vars[0], &prompt, &cfg).unwrap();
                    let mixed = tape.mul(out, vars[2]).unwrap();
                    tape.sum_all(mixed)
                },
                &[x, p, mix],
                1e-5,
                tol,
            )
        }),
        run_op("detection_loss", 1e-4, &|rng, tol| {
            let cfg = TrainingConfig::default();
            let targets = vec![
                Target {
                    class_id: 1,
                    bbox: [
                        rng.gen_range(0.3..0.7),
                        rng.gen_range(0.3..0.7),
                        rng.gen_range(0.15..0.3),
                        rng.gen_range(0.15..0.3),
                    ],
                },
                Target {
                    class_id: 0,
                    bbox: [
                        rng.gen_range(0.3..0.7),
                        rng.gen_range(0.3..0.7),
                        rng.gen_range(0.15..0.3),
                        rng.gen_range(0.15..0.3),
                    ],
                },
            ];
            let assignment = [Some(0), Some(1), None];
            let logits = uniform_tensor(rng, &[3, 3], 1.0);
            let raw_boxes = uniform_tensor(rng, &[3, 4], 1.0);
            check_gradients(
                |tape, vars| {
                    let probs = tape.softmax(vars[0], 1).unwrap();
                    let boxes = tape.sigmoid(vars[1]);
                    detection_loss(tape, probs, boxes, &targets, &assignment, 2, &cfg).unwrap()
                },
                &[logits, raw_boxes],
                1e-5,
                tol,
            )
        }),
        run_op("sparse_loss", 1e-6, &|rng, tol| {
            let w1 = away_from_zero(rng, &[3, 4]);
            let w2 = away_from_zero(rng, &[2, 5]);
            check_gradients(
                |tape, vars| sparse_loss(tape, vars, 0.37),
                &[w1, w2],
                1e-5,
                tol,
            )
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient_is_2x() {
        // f(x) = Σ x², df/dx = 2x
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let f = |tape: &mut Tape, vars: &[Var]| {
            let sq = tape.mul(vars[0], vars[0]).unwrap();
            tape.sum_all(sq)
        };

        let mut tape = Tape::new();
        let v = tape.leaf(&x.clone().with_grad());
        let loss = f(&mut tape, &[v]);
        let grads = tape.backward(loss).unwrap();
        let g = grads.grad(v);
        assert_eq!(g.data(), &[2.0, 4.0, 6.0]);

        let report = check_gradients(f, &[x], 1e-5, 1e-6).unwrap();
        assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn matmul_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_tensor(&mut rng, &[3, 4]);
            let b = random_tensor(&mut rng, &[4, 2]);
            let report = check_gradients(
                |tape, vars| {
                    let c = tape.matmul(vars[0], vars[1]).unwrap();
                    tape.sum_all(c)
                },
                &[a, b],
                1e-5,
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-6);
        }
    }

    #[test]
    fn softmax_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let x = random_tensor(&mut rng, &[2, 5]);
            let w = random_tensor(&mut rng, &[2, 5]);
            let report = check_gradients(
                |tape, vars| {
                    let y = tape.softmax(vars[0], 1).unwrap();
                    let p = tape.mul(y, vars[1]).unwrap();
                    tape.sum_all(p)
                },
                &[x, w],
                1e-5,
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-6);
        }
    }

    #[test]
    fn mismatch_reports_element() {
        // A function whose "gradient" we sabotage by using abs at exactly 0,
        // where the subgradient convention (0) disagrees with one-sided FD.
        // Instead, verify the error formatting path with a plain mismatch:
        // f = sum(relu(x)) at a kink point x=0 gives analytic 0 vs numeric 0.5.
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let err = check_gradients(
            |tape, vars| {
                let y = tape.relu(vars[0]);
                tape.sum_all(y)
            },
            &[x],
            1e-5,
            1e-8,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("input 0 element 0"), "{msg}");
    }

    #[test]
    fn full_suite_passes_at_seed_zero() {
        let results = run_suite(0, 20);
        let names: Vec<&str> = results.iter().map(|r| r.name).collect();
        assert_eq!(
            names,
            [
                "matmul",
                "softmax",
                "relu",
                "prompt_generator",
                "prompted_attention",
                "detection_loss",
                "sparse_loss"
            ]
        );
        for r in &results {
            match &r.outcome {
                Ok(worst) => assert!(
                    *worst < r.tol,
                    "{}: worst rel err {} exceeds tol {}",
                    r.name,
                    worst,
                    r.tol
                ),
                Err(e) => panic!("{} failed: {e}", r.name),
            }
        }
    }
}

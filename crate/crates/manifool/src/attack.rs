//! Minimal fooling transformations via gradient descent on the
//! transformation manifold.
//!
//! The binary search drives `g = f_original - f_target` below zero by
//! repeatedly projecting the image-space gradient of `g` onto the tangent
//! space of the manifold at the current warped image, line-searching along
//! the projected direction (with momentum), and composing the accepted step
//! onto the accumulated transformation. The multiclass search runs the
//! binary one against the top-scoring candidate labels and keeps the
//! fooling transformation with the smallest normalized geodesic score.

use crate::classifier::ClassifierModel;
use crate::error::{Error, Result};
use crate::geodesic::{normalized_score, GeodesicParams};
use crate::group::{exp_map, TangentVector, Transform, TransformGroup};
use crate::image::{tangent_basis, Image};

/// Knobs of the iterative search.
#[derive(Debug, Clone, Copy)]
pub struct AttackParams {
    /// Iteration cap per target label.
    pub max_iters: usize,
    /// Momentum mixed into each step, in [0, 1).
    pub momentum: f64,
    /// First line-search step size.
    pub initial_step: f64,
    /// Number of line-search trials before a step is forced.
    pub line_search_trials: usize,
    /// Multiplicative step shrink between trials, in (0, 1).
    pub line_search_shrink: f64,
    /// Number of candidate target labels for the multiclass search.
    pub num_targets: usize,
    /// Accepted step sizes below this for five consecutive iterations
    /// abort the target.
    pub step_floor: f64,
}

impl Default for AttackParams {
    fn default() -> AttackParams {
        AttackParams {
            max_iters: 50,
            momentum: 0.5,
            initial_step: 0.2,
            line_search_trials: 8,
            line_search_shrink: 0.5,
            num_targets: 5,
            step_floor: 1e-4,
        }
    }
}

impl AttackParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParams("momentum must lie in [0, 1)".into()));
        }
        if !(self.initial_step > 0.0) || !self.initial_step.is_finite() {
            return Err(Error::InvalidParams("initial step must be positive".into()));
        }
        if self.line_search_trials == 0 {
            return Err(Error::InvalidParams(
                "need at least one line-search trial".into(),
            ));
        }
        if !(self.line_search_shrink > 0.0 && self.line_search_shrink < 1.0) {
            return Err(Error::InvalidParams(
                "line-search shrink must lie in (0, 1)".into(),
            ));
        }
        if self.num_targets == 0 {
            return Err(Error::InvalidParams("need at least one target label".into()));
        }
        if !(self.step_floor > 0.0) || !self.step_floor.is_finite() {
            return Err(Error::InvalidParams("step floor must be positive".into()));
        }
        Ok(())
    }
}

/// One accepted iteration of the search.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Accepted line-search step size.
    pub lambda: f64,
    /// Value of `g` after the step.
    pub g_value: f64,
    /// Full step coefficients, momentum included.
    pub step_coeffs: Vec<f64>,
    /// True when no trial decreased `g` and the smallest step was forced.
    pub forced: bool,
}

/// Outcome of the search against one target label.
#[derive(Debug, Clone)]
pub enum TargetOutcome {
    Fooled {
        tau: Transform,
        score: f64,
        new_label: usize,
    },
    Failed {
        reason: String,
    },
}

#[derive(Debug, Clone)]
pub struct TargetAttempt {
    pub label: usize,
    pub outcome: TargetOutcome,
    pub iterations: usize,
    pub trace: Vec<IterationRecord>,
}

/// Result of a fooling search.
#[derive(Debug, Clone)]
pub struct FoolResult {
    pub success: bool,
    /// Winning transformation; identity when the search failed.
    pub tau_hat: Transform,
    /// The original image warped by `tau_hat`.
    pub fooled_image: Image,
    /// Label of the fooled image, when fooling succeeded.
    pub new_label: Option<usize>,
    /// Normalized geodesic score of `tau_hat`, when fooling succeeded.
    pub geodesic_score: Option<f64>,
    /// Iterations spent by the winning attempt (largest attempt on failure).
    pub iterations: usize,
    /// Every attempted target, sorted by label.
    pub per_target: Vec<TargetAttempt>,
}

/// Accepted step of a backtracking line search.
#[derive(Debug)]
pub struct LineSearchResult {
    pub lambda: f64,
    pub image: Image,
    pub g_value: f64,
    pub forced: bool,
}

/// Backtracking line search along `exp(lambda * dir)` from `x`: accepts the
/// first trial that strictly decreases `g`, halving from `initial_step`.
/// When every trial fails the smallest step is returned with `forced` set.
pub fn line_search_step(
    g_eval: &dyn Fn(&Image) -> Result<f64>,
    x: &Image,
    dir: &TangentVector,
    params: &AttackParams,
) -> Result<LineSearchResult> {
    backtrack(g_eval, x, dir, None, params)
}

fn backtrack(
    g_eval: &dyn Fn(&Image) -> Result<f64>,
    x: &Image,
    dir: &TangentVector,
    momentum: Option<&TangentVector>,
    params: &AttackParams,
) -> Result<LineSearchResult> {
    params.validate()?;
    if dir.norm() == 0.0 {
        return Err(Error::InvalidParams(
            "line-search direction must be nonzero".into(),
        ));
    }
    let g0 = g_eval(x)?;
    let mut lambda = params.initial_step;
    let mut last: Option<LineSearchResult> = None;
    for _ in 0..params.line_search_trials {
        let step = match momentum {
            Some(m) => dir.scaled(lambda).add(m),
            None => dir.scaled(lambda),
        };
        let candidate = x.warp(&exp_map(&step))?;
        let g = g_eval(&candidate)?;
        if g < g0 {
            return Ok(LineSearchResult {
                lambda,
                image: candidate,
                g_value: g,
                forced: false,
            });
        }
        last = Some(LineSearchResult {
            lambda,
            image: candidate,
            g_value: g,
            forced: true,
        });
        lambda *= params.line_search_shrink;
    }
    Ok(last.expect("at least one line-search trial"))
}

struct TargetRun {
    hit: Option<(Transform, Image, usize, f64)>,
    iterations: usize,
    trace: Vec<IterationRecord>,
    failure: Option<String>,
}

/// Searches for the smallest transformation in `group` that makes `model`
/// stop predicting `source_label`, steering toward `target_label`.
///
/// Success is judged on the recomposed image `warp(img, tau_hat)`, not on
/// the incrementally warped iterate, so accumulated resampling drift cannot
/// fake a flip. An image that already sheds `source_label` yields the
/// identity transform with score zero and no iterations.
pub fn manifool_binary(
    img: &Image,
    model: &ClassifierModel,
    source_label: usize,
    target_label: usize,
    group: TransformGroup,
    params: &AttackParams,
    geo: &GeodesicParams,
) -> Result<FoolResult> {
    params.validate()?;
    geo.validate()?;
    check_labels(model, &[source_label, target_label])?;
    if source_label == target_label {
        return Err(Error::InvalidParams(
            "source and target labels must differ".into(),
        ));
    }
    let run = run_target(img, model, source_label, target_label, group, params, geo)?;
    Ok(assemble(img, vec![(target_label, run)]))
}

/// Multiclass search: attacks the `num_targets` labels with the highest
/// logits (the predicted label excluded) and keeps the fooling
/// transformation of smallest normalized geodesic score. Ties go to the
/// smaller label.
pub fn manifool_multiclass(
    img: &Image,
    model: &ClassifierModel,
    group: TransformGroup,
    params: &AttackParams,
    geo: &GeodesicParams,
) -> Result<FoolResult> {
    params.validate()?;
    geo.validate()?;
    let logits = model.forward(img)?;
    let source_label = argmax(&logits);
    let mut candidates: Vec<usize> = (0..model.num_classes())
        .filter(|&l| l != source_label)
        .collect();
    // Highest logit first; ties resolved toward the smaller label.
    candidates.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    candidates.truncate(params.num_targets);
    let mut runs = Vec::with_capacity(candidates.len());
    for target in candidates {
        let run = run_target(img, model, source_label, target, group, params, geo)?;
        runs.push((target, run));
    }
    Ok(assemble(img, runs))
}

fn run_target(
    img: &Image,
    model: &ClassifierModel,
    source_label: usize,
    target_label: usize,
    group: TransformGroup,
    params: &AttackParams,
    geo: &GeodesicParams,
) -> Result<TargetRun> {
    let g_eval = |image: &Image| -> Result<f64> {
        let logits = model.forward(image)?;
        Ok(logits[source_label] - logits[target_label])
    };
    let mut out_weights = vec![0.0; model.num_classes()];
    out_weights[source_label] = 1.0;
    out_weights[target_label] = -1.0;

    let mut x = img.clone();
    let mut tau_hat = Transform::identity();
    let mut momentum: Option<TangentVector> = None;
    let mut trace = Vec::new();
    let mut tiny_steps = 0usize;
    let mut iterations = 0usize;
    loop {
        if model.predict(&x)? != source_label {
            // Confirm the flip on the recomposed warp of the original.
            let recomposed = img.warp(&tau_hat)?;
            let new_label = model.predict(&recomposed)?;
            if new_label != source_label {
                let score = match normalized_score(img, &tau_hat, group, geo) {
                    Ok(score) => score,
                    Err(Error::LogUndefined(msg)) => {
                        return Ok(TargetRun {
                            hit: None,
                            iterations,
                            trace,
                            failure: Some(format!("fooling transform has no score: {msg}")),
                        })
                    }
                    Err(Error::SegmentOverflow { segments, max }) => {
                        return Ok(TargetRun {
                            hit: None,
                            iterations,
                            trace,
                            failure: Some(format!(
                                "fooling transform has no score: needs {segments} segments, cap {max}"
                            )),
                        })
                    }
                    Err(other) => return Err(other),
                };
                return Ok(TargetRun {
                    hit: Some((tau_hat, recomposed, new_label, score)),
                    iterations,
                    trace,
                    failure: None,
                });
            }
            // The incremental iterate flipped but the recomposition did
            // not; keep iterating.
        }
        if iterations >= params.max_iters {
            return Ok(TargetRun {
                hit: None,
                iterations,
                trace,
                failure: Some("iteration limit reached".into()),
            });
        }
        let basis = match tangent_basis(&x, group) {
            Ok(basis) => basis,
            Err(Error::DegenerateTangent(msg)) => {
                return Ok(TargetRun {
                    hit: None,
                    iterations,
                    trace,
                    failure: Some(format!("degenerate tangent basis: {msg}")),
                })
            }
            Err(other) => return Err(other),
        };
        let gradient = model.input_gradient(&x, &out_weights)?;
        let projected = basis.project(&gradient)?;
        let norm = projected.norm();
        if !norm.is_finite() || norm < 1e-14 {
            return Ok(TargetRun {
                hit: None,
                iterations,
                trace,
                failure: Some("manifold gradient vanished".into()),
            });
        }
        // Descend against the projected gradient of g.
        let dir = projected.scaled(-1.0 / norm);
        let damped = momentum.as_ref().map(|u| u.scaled(params.momentum));
        let accepted = backtrack(&g_eval, &x, &dir, damped.as_ref(), params)?;
        let step = match &damped {
            Some(m) => dir.scaled(accepted.lambda).add(m),
            None => dir.scaled(accepted.lambda),
        };
        tau_hat = exp_map(&step).compose(&tau_hat);
        x = accepted.image;
        trace.push(IterationRecord {
            iteration: iterations,
            lambda: accepted.lambda,
            g_value: accepted.g_value,
            step_coeffs: step.coeffs().to_vec(),
            forced: accepted.forced,
        });
        momentum = Some(step);
        iterations += 1;
        if accepted.lambda < params.step_floor {
            tiny_steps += 1;
            if tiny_steps >= 5 {
                return Ok(TargetRun {
                    hit: None,
                    iterations,
                    trace,
                    failure: Some("step size collapsed below the floor".into()),
                });
            }
        } else {
            tiny_steps = 0;
        }
    }
}

fn assemble(img: &Image, mut runs: Vec<(usize, TargetRun)>) -> FoolResult {
    runs.sort_by_key(|(label, _)| *label);
    let mut best: Option<(usize, Transform, Image, usize, f64, usize)> = None;
    let mut max_iterations = 0usize;
    for (label, run) in &runs {
        max_iterations = max_iterations.max(run.iterations);
        if let Some((tau, image, new_label, score)) = &run.hit {
            let better = match &best {
                None => true,
                Some((best_label, _, _, _, best_score, _)) => {
                    *score < *best_score || (*score == *best_score && label < best_label)
                }
            };
            if better {
                best = Some((
                    *label,
                    *tau,
                    image.clone(),
                    *new_label,
                    *score,
                    run.iterations,
                ));
            }
        }
    }
    let per_target: Vec<TargetAttempt> = runs
        .into_iter()
        .map(|(label, run)| TargetAttempt {
            label,
            outcome: match run.hit {
                Some((tau, _, new_label, score)) => TargetOutcome::Fooled {
                    tau,
                    score,
                    new_label,
                },
                None => TargetOutcome::Failed {
                    reason: run.failure.unwrap_or_else(|| "no flip".into()),
                },
            },
            iterations: run.iterations,
            trace: run.trace,
        })
        .collect();
    match best {
        Some((_, tau, image, new_label, score, iterations)) => FoolResult {
            success: true,
            tau_hat: tau,
            fooled_image: image,
            new_label: Some(new_label),
            geodesic_score: Some(score),
            iterations,
            per_target,
        },
        None => FoolResult {
            success: false,
            tau_hat: Transform::identity(),
            fooled_image: img.clone(),
            new_label: None,
            geodesic_score: None,
            iterations: max_iterations,
            per_target,
        },
    }
}

fn check_labels(model: &ClassifierModel, labels: &[usize]) -> Result<()> {
    for &label in labels {
        if label >= model.num_classes() {
            return Err(Error::InvalidParams(format!(
                "label {label} out of range for {} classes",
                model.num_classes()
            )));
        }
    }
    Ok(())
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

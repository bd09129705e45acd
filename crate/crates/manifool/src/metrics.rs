//! Invariance metrics over labeled datasets: the mean minimal fooling
//! score, misclassification curves against random transformations, and a
//! brute-force translation oracle for cross-checking the search.

use rayon::prelude::*;

use crate::attack::{manifool_multiclass, AttackParams};
use crate::classifier::{ClassifierModel, LabeledDataset};
use crate::data::derive_seed;
use crate::error::{Error, Result};
use crate::geodesic::{normalized_score, sample_random_transform, GeodesicParams};
use crate::group::{exp_map, TangentVector, Transform, TransformGroup};
use crate::image::Image;

/// Per-image outcome of an invariance evaluation.
#[derive(Debug, Clone)]
pub enum EvalOutcome {
    /// The model got the clean image wrong; counted as score zero.
    Misclassified { predicted: usize },
    /// The search found a fooling transformation.
    Fooled {
        score: f64,
        new_label: usize,
        iterations: usize,
    },
    /// The search failed; excluded from the mean.
    Failed { reason: String },
}

#[derive(Debug, Clone)]
pub struct ImageEval {
    pub index: usize,
    pub outcome: EvalOutcome,
}

/// Invariance evaluation of a model over a dataset.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub group: TransformGroup,
    /// Mean normalized fooling score over scored images (misclassified
    /// images contribute zero; failed searches are excluded).
    pub rho_hat: f64,
    pub per_image: Vec<ImageEval>,
    pub failure_count: usize,
}

impl EvalReport {
    /// Number of images that contributed a score to `rho_hat`.
    pub fn scored_count(&self) -> usize {
        self.per_image.len() - self.failure_count
    }

    /// CSV rows, one per image: `image,outcome,d_tilde,new_label,iterations`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,outcome,d_tilde,new_label,iterations\n");
        for eval in &self.per_image {
            match &eval.outcome {
                EvalOutcome::Misclassified { predicted } => {
                    out.push_str(&format!("{},misclassified,0,{},0\n", eval.index, predicted));
                }
                EvalOutcome::Fooled {
                    score,
                    new_label,
                    iterations,
                } => {
                    out.push_str(&format!(
                        "{},fooled,{},{},{}\n",
                        eval.index, score, new_label, iterations
                    ));
                }
                EvalOutcome::Failed { .. } => {
                    out.push_str(&format!("{},failed,,,\n", eval.index));
                }
            }
        }
        out
    }
}

/// Runs the multiclass search on every image and averages the normalized
/// fooling scores. Images the model already misclassifies score zero
/// without a search; images whose search fails are excluded and counted.
/// Fails with [`Error::AllFailed`] when no image yields a score.
pub fn invariance_score(
    data: &LabeledDataset,
    model: &ClassifierModel,
    group: TransformGroup,
    params: &AttackParams,
    geo: &GeodesicParams,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    params.validate()?;
    geo.validate()?;
    let evals: Vec<ImageEval> = (0..data.len())
        .into_par_iter()
        .map(|index| -> Result<ImageEval> {
            let (img, label) = data.get(index);
            let predicted = model.predict(img)?;
            if predicted != label {
                return Ok(ImageEval {
                    index,
                    outcome: EvalOutcome::Misclassified { predicted },
                });
            }
            let result = manifool_multiclass(img, model, group, params, geo)?;
            let outcome = if result.success {
                EvalOutcome::Fooled {
                    score: result.geodesic_score.expect("successful attack has a score"),
                    new_label: result.new_label.expect("successful attack has a label"),
                    iterations: result.iterations,
                }
            } else {
                let reason = result
                    .per_target
                    .iter()
                    .map(|attempt| match &attempt.outcome {
                        crate::attack::TargetOutcome::Failed { reason } => {
                            format!("label {}: {}", attempt.label, reason)
                        }
                        crate::attack::TargetOutcome::Fooled { .. } => String::new(),
                    })
                    .collect::<Vec<_>>()
                    .join("; ");
                EvalOutcome::Failed { reason }
            };
            Ok(ImageEval { index, outcome })
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut scored = 0usize;
    let mut failures = 0usize;
    for eval in &evals {
        match &eval.outcome {
            EvalOutcome::Misclassified { .. } => scored += 1,
            EvalOutcome::Fooled { score, .. } => {
                total += score;
                scored += 1;
            }
            EvalOutcome::Failed { .. } => failures += 1,
        }
    }
    if scored == 0 {
        return Err(Error::AllFailed);
    }
    Ok(EvalReport {
        group,
        rho_hat: total / scored as f64,
        per_image: evals,
        failure_count: failures,
    })
}

/// Misclassification rates under random transformations of fixed
/// normalized score, per grid point.
#[derive(Debug, Clone)]
pub struct RobustnessCurve {
    pub group: TransformGroup,
    pub r_grid: Vec<f64>,
    /// Samples whose transformation was found, per grid point.
    pub valid: Vec<usize>,
    /// Samples whose prediction changed, per grid point.
    pub flips: Vec<usize>,
    /// Samples excluded because no transformation reached the score.
    pub excluded: Vec<usize>,
    /// Requested samples per grid point (images times repetitions).
    pub requested: usize,
    /// `flips / valid`; NaN where no sample was valid.
    pub rates: Vec<f64>,
    /// Smallest score whose rate reaches one half, linearly interpolated.
    pub r_hat: Option<f64>,
}

impl RobustnessCurve {
    /// CSV rows: `r,requested,valid,flips,rate,excluded`; the rate column
    /// is empty where undefined.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("r,requested,valid,flips,rate,excluded\n");
        for (i, r) in self.r_grid.iter().enumerate() {
            let rate = if self.rates[i].is_nan() {
                String::new()
            } else {
                format!("{}", self.rates[i])
            };
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r, self.requested, self.valid[i], self.flips[i], rate, self.excluded[i]
            ));
        }
        out
    }
}

/// For each score in the strictly increasing `r_grid`, draws
/// `reps_per_image` random transformations of that score per image and
/// measures how often they change the model's prediction relative to the
/// clean image. Per-sample seeds are derived from the base seed, the score
/// bits, and the (image, repetition) indices, so results depend neither on
/// scheduling nor on the position of a score within the grid.
pub fn misclassification_curve(
    data: &LabeledDataset,
    model: &ClassifierModel,
    group: TransformGroup,
    r_grid: &[f64],
    reps_per_image: usize,
    seed: u64,
    geo: &GeodesicParams,
) -> Result<RobustnessCurve> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if r_grid.is_empty() {
        return Err(Error::InvalidParams("empty score grid".into()));
    }
    if r_grid.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
        return Err(Error::InvalidParams("scores must be positive".into()));
    }
    if r_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParams(
            "score grid must be strictly increasing".into(),
        ));
    }
    if reps_per_image == 0 {
        return Err(Error::InvalidParams("need at least one repetition".into()));
    }
    geo.validate()?;
    let mut base_predictions = Vec::with_capacity(data.len());
    for img in data.images() {
        base_predictions.push(model.predict(img)?);
    }
    let mut valid = Vec::with_capacity(r_grid.len());
    let mut flips = Vec::with_capacity(r_grid.len());
    let mut excluded = Vec::with_capacity(r_grid.len());
    for &r in r_grid {
        let outcomes: Vec<Result<Option<bool>>> = (0..data.len() * reps_per_image)
            .into_par_iter()
            .map(|flat| -> Result<Option<bool>> {
                let image_idx = flat / reps_per_image;
                let rep_idx = flat % reps_per_image;
                let img = &data.images()[image_idx];
                let sample_seed =
                    derive_seed(seed, &[r.to_bits(), image_idx as u64, rep_idx as u64]);
                match sample_random_transform(img, group, r, sample_seed, geo) {
                    Ok(t) => match img.warp(&t) {
                        Ok(warped) => {
                            let predicted = model.predict(&warped)?;
                            Ok(Some(predicted != base_predictions[image_idx]))
                        }
                        // A projective sample can place the frame across
                        // the horizon; treat it like an unreachable score.
                        Err(Error::HorizonPoint { .. }) => Ok(None),
                        Err(other) => Err(other),
                    },
                    Err(Error::BracketFailure(_)) => Ok(None),
                    Err(other) => Err(other),
                }
            })
            .collect();
        let mut point_valid = 0usize;
        let mut point_flips = 0usize;
        let mut point_excluded = 0usize;
        for outcome in outcomes {
            match outcome? {
                Some(flip) => {
                    point_valid += 1;
                    if flip {
                        point_flips += 1;
                    }
                }
                None => point_excluded += 1,
            }
        }
        valid.push(point_valid);
        flips.push(point_flips);
        excluded.push(point_excluded);
    }
    let rates: Vec<f64> = valid
        .iter()
        .zip(&flips)
        .map(|(&v, &f)| if v == 0 { f64::NAN } else { f as f64 / v as f64 })
        .collect();
    let mut curve = RobustnessCurve {
        group,
        r_grid: r_grid.to_vec(),
        valid,
        flips,
        excluded,
        requested: data.len() * reps_per_image,
        rates,
        r_hat: None,
    };
    curve.r_hat = r_hat(&curve);
    Ok(curve)
}

/// Smallest grid score at which the misclassification rate reaches one
/// half, linearly interpolating between the bracketing defined points.
/// `None` when the curve never reaches one half.
pub fn r_hat(curve: &RobustnessCurve) -> Option<f64> {
    let defined: Vec<(f64, f64)> = curve
        .r_grid
        .iter()
        .zip(&curve.rates)
        .filter(|(_, rate)| !rate.is_nan())
        .map(|(&r, &rate)| (r, rate))
        .collect();
    for (i, &(r, rate)) in defined.iter().enumerate() {
        if rate >= 0.5 {
            if i == 0 {
                return Some(r);
            }
            let (r_prev, rate_prev) = defined[i - 1];
            return Some(r_prev + (0.5 - rate_prev) * (r - r_prev) / (rate - rate_prev));
        }
    }
    None
}

/// Brute-force oracle: scans integer multiples of `grid_step` in both
/// translation axes out to `search_radius` and returns the label-changing
/// translation of smallest normalized geodesic score, with that score.
/// Returns `Ok(None)` when no scanned translation changes the label. An
/// image that already sheds `reference_label` yields the identity at score
/// zero.
pub fn oracle_min_translation(
    img: &Image,
    model: &ClassifierModel,
    reference_label: usize,
    search_radius: f64,
    grid_step: f64,
    geo: &GeodesicParams,
) -> Result<Option<(Transform, f64)>> {
    if !(grid_step > 0.0) || !grid_step.is_finite() {
        return Err(Error::InvalidParams("grid step must be positive".into()));
    }
    if !(search_radius >= 0.0) || !search_radius.is_finite() {
        return Err(Error::InvalidParams("search radius must be non-negative".into()));
    }
    geo.validate()?;
    if model.predict(img)? != reference_label {
        return Ok(Some((Transform::identity(), 0.0)));
    }
    let steps = (search_radius / grid_step).floor() as i64;
    let mut best: Option<(Transform, f64)> = None;
    for ky in -steps..=steps {
        for kx in -steps..=steps {
            if kx == 0 && ky == 0 {
                continue;
            }
            let v = TangentVector::new(
                TransformGroup::Translation,
                vec![kx as f64 * grid_step, ky as f64 * grid_step],
            )?;
            let t = exp_map(&v);
            let warped = img.warp(&t)?;
            if model.predict(&warped)? != reference_label {
                let score = normalized_score(img, &t, TransformGroup::Translation, geo)?;
                if best.as_ref().map_or(true, |(_, s)| score < *s) {
                    best = Some((t, score));
                }
            }
        }
    }
    Ok(best)
}

//! Geodesic distances on the transformation manifold of an image, and
//! random transformations sampled at a target distance.
//!
//! The manifold metric pulls the image-space L2 metric back through the
//! warp. Distances are estimated along the direct path: the one-parameter
//! family `s -> warp(img, exp(s v))` for `v = log(t)`, discretized into
//! segments of tangent length `step` whose image-space chord lengths are
//! summed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::group::{exp_map, log_map, TangentVector, Transform, TransformGroup};
use crate::image::Image;

/// Discretization of the direct-path estimator.
#[derive(Debug, Clone, Copy)]
pub struct GeodesicParams {
    /// Tangent-space arc length per segment.
    pub step: f64,
    /// Hard cap on the number of segments per path.
    pub max_segments: usize,
}

impl Default for GeodesicParams {
    fn default() -> GeodesicParams {
        GeodesicParams {
            step: 0.05,
            max_segments: 10_000,
        }
    }
}

impl GeodesicParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::InvalidParams("geodesic step must be positive".into()));
        }
        if self.max_segments == 0 {
            return Err(Error::InvalidParams("segment cap must be positive".into()));
        }
        Ok(())
    }
}

/// Image-space length of the direct path from the identity to `t`.
///
/// The path parameter is `v = log(t)` in the group's tangent space; the
/// identity transform gives exactly zero.
pub fn geodesic_distance(
    img: &Image,
    t: &Transform,
    group: TransformGroup,
    params: &GeodesicParams,
) -> Result<f64> {
    params.validate()?;
    let v = log_map(t, group)?;
    tangent_path_length(img, &v, Some(t), params)
}

/// Geodesic distance divided by the L2 norm of the image.
pub fn normalized_score(
    img: &Image,
    t: &Transform,
    group: TransformGroup,
    params: &GeodesicParams,
) -> Result<f64> {
    let norm = img.l2_norm();
    if norm == 0.0 {
        return Err(Error::ZeroImage);
    }
    Ok(geodesic_distance(img, t, group, params)? / norm)
}

/// Chord-sum length of `s -> warp(img, exp(s v))` for `s` in [0, 1] of the
/// given tangent vector. When `endpoint` is provided the final chord runs
/// to `warp(img, endpoint)` instead of `warp(img, exp(v))`; the two agree
/// whenever `v = log(endpoint)`.
fn tangent_path_length(
    img: &Image,
    v: &TangentVector,
    endpoint: Option<&Transform>,
    params: &GeodesicParams,
) -> Result<f64> {
    let norm = v.norm();
    let segments = if norm > 0.0 {
        (norm / params.step).floor() as usize
    } else {
        0
    };
    if segments > params.max_segments {
        return Err(Error::SegmentOverflow {
            segments,
            max: params.max_segments,
        });
    }
    let mut total = 0.0;
    let mut prev = img.clone();
    if segments > 0 {
        let unit = v.scaled(params.step / norm);
        for i in 1..=segments {
            let cur = img.warp(&exp_map(&unit.scaled(i as f64)))?;
            total += prev.l2_distance(&cur);
            prev = cur;
        }
    }
    let last = match endpoint {
        Some(t) => img.warp(t)?,
        None => img.warp(&exp_map(v))?,
    };
    total += prev.l2_distance(&last);
    Ok(total)
}

/// Draws a uniformly random direction on the unit sphere of the tangent
/// space and scales it until the normalized geodesic score of its
/// exponential hits `target_score` within 0.1% relative tolerance.
///
/// The scale is bracketed by doubling from a small seed value and then
/// bisected; both phases score candidate tangents directly, and the final
/// transform is re-scored through the matrix logarithm so that transforms
/// outside the principal branch are rejected rather than silently
/// mis-scored.
pub fn sample_random_transform(
    img: &Image,
    group: TransformGroup,
    target_score: f64,
    seed: u64,
    params: &GeodesicParams,
) -> Result<Transform> {
    params.validate()?;
    if !(target_score > 0.0) || !target_score.is_finite() {
        return Err(Error::InvalidParams("target score must be positive".into()));
    }
    let norm = img.l2_norm();
    if norm == 0.0 {
        return Err(Error::ZeroImage);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction = unit_sphere_sample(&mut rng, group.dim());
    let v = TangentVector::new(group, direction)?;
    let tolerance = 1e-3 * target_score;
    let score = |alpha: f64| -> Result<f64> {
        tangent_path_length(img, &v.scaled(alpha), None, params)
            .map(|len| len / norm)
            .map_err(|err| match err {
                Error::SegmentOverflow { .. } => Error::BracketFailure(format!(
                    "segment cap reached before score {target_score}"
                )),
                // Extreme path points can exponentiate outside the
                // numerically invertible range, or cross the projective
                // horizon; the direction is unusable at that magnitude.
                Error::InvalidParams(msg) => Error::BracketFailure(format!(
                    "path left the invertible range: {msg}"
                )),
                Error::HorizonPoint { x, y } => Error::BracketFailure(format!(
                    "path crossed the horizon at ({x}, {y})"
                )),
                other => other,
            })
    };
    // Doubling phase.
    let mut lo = 0.0f64;
    let mut s_lo = 0.0f64;
    let mut hi = 1e-3f64;
    let mut s_hi = score(hi)?;
    let mut doublings = 0usize;
    while s_hi < target_score - tolerance {
        if s_hi < s_lo - 1e-9 * s_lo.max(1.0) {
            return Err(Error::BracketFailure(
                "score is not monotone along the sampled direction".into(),
            ));
        }
        if doublings >= 40 {
            return Err(Error::BracketFailure(format!(
                "score plateaued at {s_hi} below target {target_score}"
            )));
        }
        lo = hi;
        s_lo = s_hi;
        hi *= 2.0;
        s_hi = score(hi)?;
        doublings += 1;
    }
    // Bisection phase.
    let mut alpha = hi;
    let mut s_alpha = s_hi;
    for _ in 0..200 {
        if (s_alpha - target_score).abs() <= tolerance {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let s_mid = score(mid)?;
        if s_mid < target_score {
            lo = mid;
        } else {
            hi = mid;
        }
        alpha = mid;
        s_alpha = s_mid;
    }
    if (s_alpha - target_score).abs() > tolerance {
        return Err(Error::BracketFailure(format!(
            "bisection stalled at score {s_alpha}, target {target_score}"
        )));
    }
    let t = exp_map(&v.scaled(alpha));
    // The re-score walks the log-route path, which differs from the sampled
    // tangent once the branch wraps; any failure there disqualifies the
    // sample rather than the caller's parameters.
    let check = normalized_score(img, &t, group, params).map_err(|err| match err {
        Error::LogUndefined(msg) => Error::BracketFailure(format!(
            "sampled transform left the principal branch: {msg}"
        )),
        Error::InvalidParams(msg) => Error::BracketFailure(format!(
            "log-route path left the invertible range: {msg}"
        )),
        Error::HorizonPoint { x, y } => Error::BracketFailure(format!(
            "log-route path crossed the horizon at ({x}, {y})"
        )),
        Error::SegmentOverflow { segments, max } => Error::BracketFailure(format!(
            "log-route path needs {segments} segments, cap is {max}"
        )),
        other => other,
    })?;
    if (check - target_score).abs() > tolerance {
        return Err(Error::BracketFailure(format!(
            "recomputed score {check} misses target {target_score}"
        )));
    }
    Ok(t)
}

/// Uniform direction on the unit sphere via normalized Gaussian draws.
/// Hand-rolled Box-Muller keeps the byte stream stable across dependency
/// versions.
fn unit_sphere_sample(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        let norm = draws.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return draws.iter().map(|v| v / norm).collect();
        }
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = ((rng.next_u64() >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
    let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

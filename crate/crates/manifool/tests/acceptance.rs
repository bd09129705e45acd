//! Acceptance suite: one test per release criterion. Each test prints an
//! `ACCEPTANCE NN name: PASS|FAIL (measurements)` line; run with
//! `cargo test --test acceptance -- --nocapture` to see the lines for
//! passing tests (failing tests dump theirs automatically).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use once_cell::sync::Lazy;
use tempfile::TempDir;

use manifool::attack::{manifool_multiclass, AttackParams, TargetOutcome};
use manifool::classifier::{Architecture, ClassifierModel, LabeledDataset};
use manifool::data::{synth_blobs, synth_digits, write_idx_images, write_idx_labels, DigitJitter};
use manifool::geodesic::{
    geodesic_distance, normalized_score, sample_random_transform, GeodesicParams,
};
use manifool::image::tangent_basis_with_step;
use manifool::metrics::{invariance_score, misclassification_curve, oracle_min_translation};
use manifool::{exp_map, log_map, Image, TangentVector, Transform, TransformGroup};

fn report(number: usize, name: &str, pass: bool, detail: &str, elapsed: f64, cap: f64) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {number:02} {name}: {verdict} ({detail}) [{elapsed:.1}s]");
    assert!(
        elapsed <= cap,
        "criterion {number} took {elapsed:.1}s, cap {cap}s"
    );
}

struct Lcg(u64);

impl Lcg {
    fn new(seed: u64) -> Lcg {
        Lcg(seed)
    }

    fn next_f64(&mut self) -> f64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }

    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }
}

fn shuffled(data: &LabeledDataset, seed: u64) -> LabeledDataset {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut state = seed;
    for i in (1..order.len()).rev() {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let j = (state >> 33) as usize % (i + 1);
        order.swap(i, j);
    }
    let images: Vec<Image> = order.iter().map(|&i| data.images()[i].clone()).collect();
    let labels: Vec<usize> = order.iter().map(|&i| data.labels()[i]).collect();
    LabeledDataset::new(images, labels).unwrap()
}

struct DigitFixture {
    train: LabeledDataset,
    test: LabeledDataset,
    cnn: ClassifierModel,
}

/// Digit corpus and trained classifier shared by the heavy criteria.
static DIGITS: Lazy<DigitFixture> = Lazy::new(|| {
    let corpus = shuffled(&synth_digits(150, DigitJitter::default(), 7).unwrap(), 99);
    let train = corpus.take(1000);
    let test = LabeledDataset::new(
        corpus.images()[1000..].to_vec(),
        corpus.labels()[1000..].to_vec(),
    )
    .unwrap();
    let cnn = ClassifierModel::new(Architecture::SmallCnn, 10, 28, 28, 1)
        .unwrap()
        .train_sgd(&train, 5, 0.1, 32, 1)
        .unwrap()
        .model;
    assert!(cnn.accuracy(&train).unwrap() >= 0.99);
    assert!(cnn.accuracy(&test).unwrap() >= 0.98);
    DigitFixture { train, test, cnn }
});

fn entry_error(t: &Transform, expected: &[[f64; 3]; 3]) -> f64 {
    let m = t.matrix();
    let mut worst = 0.0f64;
    for r in 0..3 {
        for c in 0..3 {
            worst = worst.max((m[(r, c)] - expected[r][c]).abs());
        }
    }
    worst
}

#[test]
fn criterion_01_lie_algebra() {
    let start = Instant::now();

    for group in TransformGroup::ALL {
        let t = exp_map(&TangentVector::zeros(group));
        assert_eq!(
            t.max_abs_diff(&Transform::identity()),
            0.0,
            "exp(0) is not the identity for {}",
            group.name()
        );
    }

    let mut roundtrip = 0.0f64;
    for (gi, group) in TransformGroup::ALL.iter().enumerate() {
        let mut rng = Lcg::new(201 + gi as u64);
        for _ in 0..100 {
            let mut coeffs: Vec<f64> =
                (0..group.dim()).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let norm: f64 = coeffs.iter().map(|c| c * c).sum::<f64>().sqrt();
            let target = 0.5 * rng.uniform(1e-3, 1.0);
            if norm > 1e-12 {
                let s = target / norm;
                for c in &mut coeffs {
                    *c *= s;
                }
            }
            let v = TangentVector::new(*group, coeffs.clone()).unwrap();
            let back = log_map(&exp_map(&v), *group).unwrap();
            for (a, b) in coeffs.iter().zip(back.coeffs()) {
                roundtrip = roundtrip.max((a - b).abs());
            }
        }
    }
    assert!(roundtrip <= 1e-9, "round-trip error {roundtrip}");

    let mut closed = 0.0f64;

    let t = exp_map(&TangentVector::new(TransformGroup::Translation, vec![3.25, -1.5]).unwrap());
    closed = closed.max(entry_error(
        &t,
        &[[1.0, 0.0, 3.25], [0.0, 1.0, -1.5], [0.0, 0.0, 1.0]],
    ));

    let (tx, ty, th) = (0.3f64, -1.1f64, 0.7f64);
    let (s, c) = th.sin_cos();
    let v00 = s / th;
    let v01 = -(1.0 - c) / th;
    let t = exp_map(
        &TangentVector::new(TransformGroup::RotationTranslation, vec![tx, ty, th]).unwrap(),
    );
    closed = closed.max(entry_error(
        &t,
        &[
            [c, -s, v00 * tx + v01 * ty],
            [s, c, -v01 * tx + v00 * ty],
            [0.0, 0.0, 1.0],
        ],
    ));

    let th = 1.2f64;
    let (s, c) = th.sin_cos();
    let t = exp_map(
        &TangentVector::new(TransformGroup::RotationTranslation, vec![0.0, 0.0, th]).unwrap(),
    );
    closed = closed.max(entry_error(
        &t,
        &[[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
    ));

    let (tx, ty, sc) = (1.2f64, 0.4f64, -0.35f64);
    let phi = (sc.exp() - 1.0) / sc;
    let t = exp_map(
        &TangentVector::new(TransformGroup::ScaleTranslation, vec![tx, ty, sc]).unwrap(),
    );
    closed = closed.max(entry_error(
        &t,
        &[
            [sc.exp(), 0.0, phi * tx],
            [0.0, sc.exp(), phi * ty],
            [0.0, 0.0, 1.0],
        ],
    ));

    assert!(closed <= 1e-12, "closed-form error {closed}");
    report(
        1,
        "lie_algebra",
        true,
        &format!("round-trip {roundtrip:.2e}, closed-form {closed:.2e}"),
        start.elapsed().as_secs_f64(),
        5.0,
    );
}

#[test]
fn criterion_02_warping() {
    let fx = &*DIGITS;
    let start = Instant::now();
    let img = &fx.test.images()[0];

    let same = img.warp(&Transform::identity()).unwrap();
    assert_eq!(same.pixels(), img.pixels(), "identity warp changed pixels");

    let mut shift_err = 0.0f64;
    for &(tx, ty) in &[(3i64, -2i64), (-5, 4), (1, 0), (0, -7)] {
        let t = exp_map(
            &TangentVector::new(TransformGroup::Translation, vec![tx as f64, ty as f64]).unwrap(),
        );
        let warped = img.warp(&t).unwrap();
        for row in 0..img.height() {
            for col in 0..img.width() {
                let sr = row as i64 - ty;
                let sc = col as i64 - tx;
                let expected = if sr >= 0
                    && sr < img.height() as i64
                    && sc >= 0
                    && sc < img.width() as i64
                {
                    img.pixel(sr as usize, sc as usize)
                } else {
                    0.0
                };
                shift_err = shift_err.max((warped.pixel(row, col) - expected).abs());
            }
        }
    }
    assert_eq!(shift_err, 0.0, "integer shift mismatch {shift_err}");

    let smooth = Image::from_fn(28, 28, |x, y| {
        0.5 + 0.3 * (0.31 * x).sin() * (0.23 * y).cos()
    });
    let t = exp_map(
        &TangentVector::new(TransformGroup::Similarity, vec![0.8, -0.5, 0.2, 0.1]).unwrap(),
    );
    let round = smooth
        .warp(&t)
        .unwrap()
        .warp(&t.inverse().unwrap())
        .unwrap();
    let mut interior = 0.0f64;
    for row in 7..21 {
        for col in 7..21 {
            interior = interior.max((round.pixel(row, col) - smooth.pixel(row, col)).abs());
        }
    }
    assert!(interior <= 0.05, "forward-inverse interior error {interior}");

    report(
        2,
        "warping",
        true,
        &format!("identity exact, shifts exact, round-trip interior {interior:.4}"),
        start.elapsed().as_secs_f64(),
        10.0,
    );
}

#[test]
fn criterion_03_gradients() {
    let fx = &*DIGITS;
    let start = Instant::now();
    // A generic smooth image: constant regions (digit backgrounds) put max
    // pool windows exactly on ties, where one-sided subgradients and central
    // differences legitimately disagree.
    let img = Image::from_fn(28, 28, |x, y| {
        0.5 + 0.25 * (0.37 * x).sin() * (0.53 * y).cos() + 0.004 * x + 0.007 * y
    });
    let img = &img;
    let n = img.pixels().len();

    let models = [
        fx.cnn.clone(),
        ClassifierModel::new(Architecture::Mlp { hidden: 64 }, 10, 28, 28, 5).unwrap(),
        ClassifierModel::new(Architecture::LinearSoftmax, 10, 28, 28, 6).unwrap(),
    ];
    let mut out_weights = vec![0.0; 10];
    out_weights[0] = 1.0;
    out_weights[3] = -1.0;
    let dot = |logits: &[f64]| -> f64 {
        logits
            .iter()
            .zip(&out_weights)
            .map(|(l, w)| l * w)
            .sum()
    };

    let h = 1e-4;
    let mut fd_rel = 0.0f64;
    for model in &models {
        let grad = model.input_gradient(img, &out_weights).unwrap();
        assert_eq!(grad.len(), n);
        let mut rng = Lcg::new(77);
        for _ in 0..20 {
            let idx = (rng.next_f64() * n as f64) as usize % n;
            let mut plus = img.pixels().to_vec();
            plus[idx] += h;
            let mut minus = img.pixels().to_vec();
            minus[idx] -= h;
            let gp = dot(&model.forward(&Image::new(28, 28, plus).unwrap()).unwrap());
            let gm = dot(&model.forward(&Image::new(28, 28, minus).unwrap()).unwrap());
            let fd = (gp - gm) / (2.0 * h);
            let g = grad[idx];
            let denom = g.abs().max(fd.abs());
            if denom > 1e-8 {
                fd_rel = fd_rel.max((g - fd).abs() / denom);
            }
        }
    }
    assert!(fd_rel <= 1e-4, "gradient relative error {fd_rel}");

    // Multilinear ramp: translation columns are exact under bilinear
    // sampling, so the second-order step dependence shows only in the
    // rotation and scale columns; halving the step four-folds it.
    let ramp = Image::from_fn(21, 21, |x, y| 0.3 + 0.04 * x + 0.05 * y + 0.006 * x * y);
    let group = TransformGroup::Similarity;
    let b1 = tangent_basis_with_step(&ramp, group, 0.05).unwrap();
    let b2 = tangent_basis_with_step(&ramp, group, 0.025).unwrap();
    let b3 = tangent_basis_with_step(&ramp, group, 0.0125).unwrap();
    let mut ratios = Vec::new();
    for j in 2..4 {
        let mut num = 0.0;
        let mut den = 0.0;
        for row in 4..=16 {
            for col in 4..=16 {
                let i = row * 21 + col;
                let d1 = b1.columns()[j][i] - b2.columns()[j][i];
                let d2 = b2.columns()[j][i] - b3.columns()[j][i];
                num += d1 * d1;
                den += d2 * d2;
            }
        }
        ratios.push((num / den).sqrt());
    }
    for (j, ratio) in ratios.iter().enumerate() {
        assert!(
            (3.0..=5.0).contains(ratio),
            "tangent basis column {} Richardson ratio {ratio}",
            j + 2
        );
    }

    report(
        3,
        "gradients",
        true,
        &format!("fd rel err {fd_rel:.2e}, Richardson ratios {ratios:.3?}"),
        start.elapsed().as_secs_f64(),
        30.0,
    );
}

#[test]
fn criterion_04_attack_postcondition() {
    let fx = &*DIGITS;
    let start = Instant::now();
    let params = AttackParams::default();
    let geo = GeodesicParams::default();

    let mut runs = 0usize;
    let mut successes = 0usize;
    let mut recomp_worst = 0.0f64;

    let mut check = |img: &Image, model: &ClassifierModel, group: TransformGroup| {
        let source = model.predict(img).unwrap();
        let result = manifool_multiclass(img, model, group, &params, &geo).unwrap();
        runs += 1;
        if result.success {
            successes += 1;
            let warped = img.warp(&result.tau_hat).unwrap();
            let flipped = model.predict(&warped).unwrap();
            assert_ne!(flipped, source, "reported success without a label flip");
            assert_eq!(Some(flipped), result.new_label);
        }
        for attempt in &result.per_target {
            if let TargetOutcome::Fooled { tau, .. } = &attempt.outcome {
                let mut recomposed = Transform::identity();
                for record in &attempt.trace {
                    let step = TangentVector::new(group, record.step_coeffs.clone()).unwrap();
                    recomposed = exp_map(&step).compose(&recomposed);
                }
                recomp_worst = recomp_worst.max(recomposed.max_abs_diff(tau));
            }
        }
    };

    for i in 0..20 {
        check(fx.test.get(i).0, &fx.cnn, TransformGroup::Translation);
    }
    for i in 20..40 {
        check(fx.test.get(i).0, &fx.cnn, TransformGroup::Similarity);
    }

    let blobs = synth_blobs(25, 16, 16, &[(-3.5, 0.0), (3.5, 0.0)], 1.8, 0.5, 3).unwrap();
    let linear = ClassifierModel::new(Architecture::LinearSoftmax, 2, 16, 16, 2)
        .unwrap()
        .train_sgd(&blobs, 10, 0.5, 8, 2)
        .unwrap()
        .model;
    for i in 0..10 {
        check(blobs.get(i).0, &linear, TransformGroup::RotationTranslation);
    }

    assert!(runs >= 50, "only {runs} attack runs");
    assert!(
        recomp_worst <= 1e-10,
        "trace recomposition error {recomp_worst}"
    );
    assert!(successes >= 25, "only {successes}/{runs} successes");

    report(
        4,
        "attack_postcondition",
        true,
        &format!("{successes}/{runs} fooled, every flip verified, recomposition {recomp_worst:.2e}"),
        start.elapsed().as_secs_f64(),
        300.0,
    );
}

#[test]
fn criterion_05_geodesic() {
    let fx = &*DIGITS;
    let start = Instant::now();
    let img = &fx.test.images()[0];
    let geo = GeodesicParams::default();
    let fine = GeodesicParams { step: 0.025, ..geo };

    let fixtures: [(TransformGroup, &[f64]); 4] = [
        (TransformGroup::RotationTranslation, &[1.5, -0.8, 0.4]),
        (TransformGroup::Similarity, &[2.0, 1.0, 0.3, 0.15]),
        (TransformGroup::Translation, &[2.5, 1.0]),
        (TransformGroup::Affine, &[1.0, -1.0, 0.1, 0.2, -0.1, 0.05]),
    ];
    let mut convergence = 0.0f64;
    for (group, coeffs) in &fixtures {
        let t = exp_map(&TangentVector::new(*group, coeffs.to_vec()).unwrap());
        let coarse = geodesic_distance(img, &t, *group, &geo).unwrap();
        let chord = img.l2_distance(&img.warp(&t).unwrap());
        assert!(
            coarse >= chord - 1e-9,
            "{}: path length {coarse} under the chord {chord}",
            group.name()
        );
        let refined = geodesic_distance(img, &t, *group, &fine).unwrap();
        convergence = convergence.max((coarse - refined).abs() / refined);
    }
    assert!(convergence <= 0.01, "step self-convergence {convergence}");

    let mut sampler_rel = 0.0f64;
    for (target, seed) in [(0.3, 4u64), (0.8, 5), (1.5, 6)] {
        let t =
            sample_random_transform(img, TransformGroup::Similarity, target, seed, &geo).unwrap();
        let score = normalized_score(img, &t, TransformGroup::Similarity, &geo).unwrap();
        sampler_rel = sampler_rel.max((score - target).abs() / target);
    }
    assert!(sampler_rel <= 1e-3, "sampler relative error {sampler_rel}");

    report(
        5,
        "geodesic",
        true,
        &format!(
            "chord bound holds, self-convergence {convergence:.2e}, sampler rel err {sampler_rel:.2e}"
        ),
        start.elapsed().as_secs_f64(),
        60.0,
    );
}

#[test]
fn criterion_06_oracle_comparison() {
    let fx = &*DIGITS;
    let start = Instant::now();
    let params = AttackParams::default();
    let geo = GeodesicParams::default();
    let group = TransformGroup::Translation;

    let mut ratios = Vec::new();
    let mut compared = 0usize;
    let mut checked = 0usize;
    let mut i = 0usize;
    while checked < 20 && i < fx.test.len() {
        let (img, label) = fx.test.get(i);
        i += 1;
        if fx.cnn.predict(img).unwrap() != label {
            continue;
        }
        checked += 1;
        let Some((_, oracle_score)) =
            oracle_min_translation(img, &fx.cnn, label, 12.0, 1.0, &geo).unwrap()
        else {
            continue;
        };
        let result = manifool_multiclass(img, &fx.cnn, group, &params, &geo).unwrap();
        if !result.success {
            continue;
        }
        let found = result.geodesic_score.unwrap();
        let eps = [[1.0, 0.0], [0.0, 1.0]]
            .iter()
            .map(|c| {
                let t = exp_map(&TangentVector::new(group, c.to_vec()).unwrap());
                normalized_score(img, &t, group, &geo).unwrap()
            })
            .fold(0.0f64, f64::max);
        assert!(
            found >= oracle_score - eps,
            "image {}: search found {found}, oracle {oracle_score}, grid resolution {eps}",
            i - 1
        );
        compared += 1;
        if oracle_score > 0.0 {
            ratios.push(found / oracle_score);
        }
    }
    assert!(compared >= 10, "only {compared} oracle comparisons");
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = ratios[ratios.len() / 2];
    assert!(median <= 1.5, "median search/oracle ratio {median}");

    report(
        6,
        "oracle_comparison",
        true,
        &format!("{compared} images, search never beats the oracle, median ratio {median:.4}"),
        start.elapsed().as_secs_f64(),
        600.0,
    );
}

#[test]
fn criterion_07_group_dimension_trend() {
    let fx = &*DIGITS;
    let start = Instant::now();
    let subset = fx.test.take(100);
    let params = AttackParams::default();
    let geo = GeodesicParams::default();

    let rho = |group: TransformGroup| -> f64 {
        invariance_score(&subset, &fx.cnn, group, &params, &geo)
            .unwrap()
            .rho_hat
    };
    let t = rho(TransformGroup::Translation);
    let rt = rho(TransformGroup::RotationTranslation);
    let sim = rho(TransformGroup::Similarity);
    assert!(
        t > rt && rt > sim,
        "rho_hat not ordered by group dimension: {t:.4} / {rt:.4} / {sim:.4}"
    );

    report(
        7,
        "group_dimension_trend",
        true,
        &format!("translation {t:.4} > rotation-translation {rt:.4} > similarity {sim:.4}"),
        start.elapsed().as_secs_f64(),
        1200.0,
    );
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        for k in i..=j {
            out[order[k]] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    out
}

fn spearman(pairs: &[(f64, f64)]) -> f64 {
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let ra = ranks(&xs);
    let rb = ranks(&ys);
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt())
}

#[test]
fn criterion_08_curve_shape() {
    let fx = &*DIGITS;
    let start = Instant::now();
    let subset = fx.test.take(25);
    let geo = GeodesicParams::default();
    let grid = [0.25, 0.75, 1.25, 2.0, 3.0];

    let curve = misclassification_curve(
        &subset,
        &fx.cnn,
        TransformGroup::Similarity,
        &grid,
        4,
        11,
        &geo,
    )
    .unwrap();
    let defined: Vec<(f64, f64)> = curve
        .r_grid
        .iter()
        .zip(&curve.rates)
        .filter(|(_, rate)| !rate.is_nan())
        .map(|(&r, &rate)| (r, rate))
        .collect();
    assert!(defined.len() >= 4, "only {} defined grid points", defined.len());
    assert_eq!(defined[0].0, grid[0], "smallest grid score has no rate");
    assert!(
        defined[0].1 <= 0.05,
        "rate {} at the smallest score {}",
        defined[0].1,
        defined[0].0
    );
    let corr = spearman(&defined);
    assert!(corr >= 0.8, "Spearman correlation {corr}");
    let r_hat = curve.r_hat.expect("curve never reaches one half");

    report(
        8,
        "curve_shape",
        true,
        &format!(
            "rate {:.3} at r {}, Spearman {corr:.3}, r_hat {r_hat:.4}",
            defined[0].1, defined[0].0
        ),
        start.elapsed().as_secs_f64(),
        900.0,
    );
}

#[test]
fn criterion_09_finetuning_trends() {
    let fx = &*DIGITS;
    let start = Instant::now();
    let params = AttackParams::default();
    let geo = GeodesicParams::default();
    let group = TransformGroup::Affine;

    let ft = fx.train.take(500);
    let rho_set = fx.test.take(50);
    let curve_set = fx.test.take(25);

    let before = invariance_score(&rho_set, &fx.cnn, group, &params, &geo)
        .unwrap()
        .rho_hat;
    let grid = [0.25, 0.75, 1.25, 1.5, 1.75, 2.0, 3.0];
    let pre = misclassification_curve(&curve_set, &fx.cnn, group, &grid, 4, 11, &geo).unwrap();
    let r_mid = pre.r_hat.expect("pre-fine-tuning curve never reaches one half");
    let rate_at = |model: &ClassifierModel| -> f64 {
        misclassification_curve(&curve_set, model, group, &[r_mid], 32, 13, &geo)
            .unwrap()
            .rates[0]
    };
    let rate_before = rate_at(&fx.cnn);

    // Every clean image plus one warped copy per successful attack target.
    let mut images: Vec<Image> = ft.images().to_vec();
    let mut labels: Vec<usize> = ft.labels().to_vec();
    let mut transforms: Vec<Option<Transform>> = vec![None; ft.len()];
    for i in 0..ft.len() {
        let (img, label) = ft.get(i);
        let result = manifool_multiclass(img, &fx.cnn, group, &params, &geo).unwrap();
        for attempt in &result.per_target {
            if let TargetOutcome::Fooled { tau, .. } = &attempt.outcome {
                images.push(img.clone());
                labels.push(label);
                transforms.push(Some(tau.clone()));
            }
        }
    }
    let union = LabeledDataset::new(images, labels).unwrap();
    let tuned = fx
        .cnn
        .finetune_adversarial(&union, &transforms, 1, 0.1, 0.1, 64, 1)
        .unwrap()
        .model;
    let clean = vec![None; union.len()];
    let base = fx
        .cnn
        .finetune_adversarial(&union, &clean, 1, 0.1, 0.1, 64, 1)
        .unwrap()
        .model;

    let after = invariance_score(&rho_set, &tuned, group, &params, &geo)
        .unwrap()
        .rho_hat;
    let after_base = invariance_score(&rho_set, &base, group, &params, &geo)
        .unwrap()
        .rho_hat;
    let rate_after = rate_at(&tuned);
    let drop = rate_before - rate_after;

    let a = after > before;
    let b = after > after_base;
    let c = drop >= 0.05;
    let tag = |ok: bool| if ok { "pass" } else { "fail" };
    println!(
        "  (a) rho_hat after {after:.4} > before {before:.4}: {}",
        tag(a)
    );
    println!(
        "  (b) rho_hat after {after:.4} > clean-baseline {after_base:.4}: {}",
        tag(b)
    );
    println!(
        "  (c) rate at r_hat {r_mid:.4}: {rate_before:.4} -> {rate_after:.4}, drop {drop:.4}, needs 0.0500: {}",
        tag(c)
    );
    report(
        9,
        "finetuning_trends",
        a && b && c,
        &format!(
            "rho {before:.4} -> {after:.4}, baseline {after_base:.4}, mid-curve drop {drop:.4}"
        ),
        start.elapsed().as_secs_f64(),
        1800.0,
    );
    assert!(a, "rho_hat did not increase: {after:.4} vs {before:.4}");
    assert!(
        b,
        "rho_hat does not exceed the clean baseline: {after:.4} vs {after_base:.4}"
    );
    assert!(
        c,
        "mid-curve misclassification rate dropped {drop:.4}, short of the required 0.05"
    );
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_manifool")
}

fn run_cli(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().unwrap()
}

struct CliFixture {
    dir: TempDir,
    images: PathBuf,
    labels: PathBuf,
    model: PathBuf,
    pgm: PathBuf,
}

static CLI: Lazy<CliFixture> = Lazy::new(|| {
    let dir = TempDir::new().unwrap();
    let centers = [(-4.0, -2.5), (4.0, -2.5), (0.0, 3.5)];
    let train = shuffled(&synth_blobs(40, 21, 21, &centers, 1.8, 0.4, 3).unwrap(), 17);
    let test = shuffled(&synth_blobs(10, 21, 21, &centers, 1.8, 0.4, 4).unwrap(), 18);
    let images = dir.path().join("blobs-images.idx");
    let labels = dir.path().join("blobs-labels.idx");
    let mut iw = std::io::BufWriter::new(std::fs::File::create(&images).unwrap());
    write_idx_images(&mut iw, test.images()).unwrap();
    drop(iw);
    let mut lw = std::io::BufWriter::new(std::fs::File::create(&labels).unwrap());
    write_idx_labels(&mut lw, test.labels()).unwrap();

    let model = dir.path().join("model.mfw");
    ClassifierModel::new(Architecture::LinearSoftmax, 3, 21, 21, 2)
        .unwrap()
        .train_sgd(&train, 12, 0.5, 8, 2)
        .unwrap()
        .model
        .save_weights_file(&model)
        .unwrap();
    let pgm = dir.path().join("img.pgm");
    test.images()[0].write_pgm_file(&pgm).unwrap();

    CliFixture {
        dir,
        images,
        labels,
        model,
        pgm,
    }
});

#[test]
fn criterion_10_determinism() {
    let fx = &*CLI;
    let start = Instant::now();
    let dir = fx.dir.path();

    let eval_rho = |jobs: &str, out: &Path| -> Output {
        run_cli(&[
            "eval-rho",
            "--model",
            fx.model.to_str().unwrap(),
            "--images",
            fx.images.to_str().unwrap(),
            "--labels",
            fx.labels.to_str().unwrap(),
            "--group",
            "similarity",
            "--limit",
            "10",
            "--jobs",
            jobs,
            "--out",
            out.to_str().unwrap(),
        ])
    };
    let rho_a = dir.join("rho-a.csv");
    let rho_b = dir.join("rho-b.csv");
    let rho_c = dir.join("rho-c.csv");
    let out_a = eval_rho("1", &rho_a);
    let out_b = eval_rho("1", &rho_b);
    let out_c = eval_rho("2", &rho_c);
    for out in [&out_a, &out_b, &out_c] {
        assert_eq!(out.status.code(), Some(0), "stderr: {:?}", out.stderr);
    }
    assert_eq!(out_a.stdout, out_b.stdout, "eval-rho rerun stdout differs");
    assert_eq!(out_a.stdout, out_c.stdout, "eval-rho stdout differs across jobs");
    let bytes_a = std::fs::read(&rho_a).unwrap();
    assert_eq!(bytes_a, std::fs::read(&rho_b).unwrap(), "eval-rho rerun CSV differs");
    assert_eq!(bytes_a, std::fs::read(&rho_c).unwrap(), "eval-rho CSV differs across jobs");

    let eval_curve = |jobs: &str, out: &Path| -> Output {
        run_cli(&[
            "eval-curve",
            "--model",
            fx.model.to_str().unwrap(),
            "--images",
            fx.images.to_str().unwrap(),
            "--labels",
            fx.labels.to_str().unwrap(),
            "--group",
            "similarity",
            "--r-grid",
            "0.3,1.0,2.0,3.5",
            "--reps",
            "3",
            "--seed",
            "11",
            "--limit",
            "8",
            "--jobs",
            jobs,
            "--out",
            out.to_str().unwrap(),
        ])
    };
    let curve_a = dir.join("curve-a.csv");
    let curve_b = dir.join("curve-b.csv");
    let curve_c = dir.join("curve-c.csv");
    let out_a = eval_curve("1", &curve_a);
    let out_b = eval_curve("1", &curve_b);
    let out_c = eval_curve("3", &curve_c);
    for out in [&out_a, &out_b, &out_c] {
        assert_eq!(out.status.code(), Some(0), "stderr: {:?}", out.stderr);
    }
    assert_eq!(out_a.stdout, out_b.stdout, "eval-curve rerun stdout differs");
    assert_eq!(out_a.stdout, out_c.stdout, "eval-curve stdout differs across jobs");
    let bytes_a = std::fs::read(&curve_a).unwrap();
    assert_eq!(bytes_a, std::fs::read(&curve_b).unwrap(), "eval-curve rerun CSV differs");
    assert_eq!(bytes_a, std::fs::read(&curve_c).unwrap(), "eval-curve CSV differs across jobs");

    let attack = |prefix: &Path| -> Output {
        run_cli(&[
            "attack",
            "--model",
            fx.model.to_str().unwrap(),
            "--image",
            fx.pgm.to_str().unwrap(),
            "--group",
            "similarity",
            "--out-prefix",
            prefix.to_str().unwrap(),
        ])
    };
    let att_a = dir.join("att-a");
    let att_b = dir.join("att-b");
    let out_a = attack(&att_a);
    let out_b = attack(&att_b);
    assert_eq!(out_a.status.code(), Some(0), "stderr: {:?}", out_a.stderr);
    assert_eq!(out_a.stdout, out_b.stdout, "attack rerun stdout differs");
    for ext in ["transform", "pgm", "csv"] {
        let a = std::fs::read(dir.join(format!("att-a.{ext}"))).unwrap();
        let b = std::fs::read(dir.join(format!("att-b.{ext}"))).unwrap();
        assert_eq!(a, b, "attack rerun .{ext} differs");
    }

    report(
        10,
        "determinism",
        true,
        "eval-rho, eval-curve, attack byte-stable across reruns and --jobs",
        start.elapsed().as_secs_f64(),
        300.0,
    );
}

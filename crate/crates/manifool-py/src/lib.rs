//! Python bindings: the core types (images, transforms, classifiers) plus
//! the fooling search, geodesic scoring, sampling, and evaluation metrics.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use manifool::attack::{manifool_multiclass, AttackParams};
use manifool::classifier::{Architecture, ClassifierModel, LabeledDataset};
use manifool::data::{synth_blobs, synth_digits, DigitJitter};
use manifool::geodesic::GeodesicParams;
use manifool::metrics;
use manifool::{exp_map, log_map, Image, TangentVector, Transform, TransformGroup};

fn err(e: manifool::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_group(name: &str) -> PyResult<TransformGroup> {
    TransformGroup::parse(name).map_err(err)
}

fn parse_arch(name: &str, hidden: usize) -> PyResult<Architecture> {
    match name.trim().to_ascii_lowercase().as_str() {
        "linear" => Ok(Architecture::LinearSoftmax),
        "mlp" => Ok(Architecture::Mlp { hidden }),
        "cnn" => Ok(Architecture::SmallCnn),
        other => Err(PyValueError::new_err(format!(
            "unknown architecture \"{other}\" (expected linear, mlp, or cnn)"
        ))),
    }
}

fn dataset(images: Vec<PyImage>, labels: Vec<usize>) -> PyResult<LabeledDataset> {
    LabeledDataset::new(images.into_iter().map(|i| i.inner).collect(), labels).map_err(err)
}

fn geo_params(step: f64) -> GeodesicParams {
    GeodesicParams {
        step,
        ..GeodesicParams::default()
    }
}

/// A grayscale image with f64 pixels in row-major order.
#[pyclass(name = "Image", from_py_object)]
#[derive(Clone)]
struct PyImage {
    inner: Image,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: usize, height: usize, pixels: Vec<f64>) -> PyResult<PyImage> {
        Ok(PyImage {
            inner: Image::new(width, height, pixels).map_err(err)?,
        })
    }

    #[staticmethod]
    fn zeros(width: usize, height: usize) -> PyImage {
        PyImage {
            inner: Image::zeros(width, height),
        }
    }

    #[staticmethod]
    fn read_pgm(path: &str) -> PyResult<PyImage> {
        Ok(PyImage {
            inner: Image::read_pgm_file(path).map_err(err)?,
        })
    }

    fn write_pgm(&self, path: &str) -> PyResult<()> {
        self.inner.write_pgm_file(path).map_err(err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    fn pixels(&self) -> Vec<f64> {
        self.inner.pixels().to_vec()
    }

    fn pixel(&self, row: usize, col: usize) -> PyResult<f64> {
        if row >= self.inner.height() || col >= self.inner.width() {
            return Err(PyValueError::new_err(format!(
                "pixel ({row}, {col}) outside {}x{}",
                self.inner.width(),
                self.inner.height()
            )));
        }
        Ok(self.inner.pixel(row, col))
    }

    fn warp(&self, t: &PyTransform) -> PyResult<PyImage> {
        Ok(PyImage {
            inner: self.inner.warp(&t.inner).map_err(err)?,
        })
    }

    fn l2_norm(&self) -> f64 {
        self.inner.l2_norm()
    }

    fn l2_distance(&self, other: &PyImage) -> PyResult<f64> {
        if (other.inner.width(), other.inner.height())
            != (self.inner.width(), self.inner.height())
        {
            return Err(PyValueError::new_err("image dimensions differ"));
        }
        Ok(self.inner.l2_distance(&other.inner))
    }

    fn max_abs_diff(&self, other: &PyImage) -> f64 {
        self.inner.max_abs_diff(&other.inner)
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.width(), self.inner.height())
    }
}

/// An invertible planar transformation (3x3 homogeneous matrix).
#[pyclass(name = "Transform", from_py_object)]
#[derive(Clone)]
struct PyTransform {
    inner: Transform,
}

#[pymethods]
impl PyTransform {
    #[staticmethod]
    fn identity() -> PyTransform {
        PyTransform {
            inner: Transform::identity(),
        }
    }

    /// Exponential of `coeffs` over the named group's generators.
    #[staticmethod]
    fn exp(group: &str, coeffs: Vec<f64>) -> PyResult<PyTransform> {
        let group = parse_group(group)?;
        let v = TangentVector::new(group, coeffs).map_err(err)?;
        Ok(PyTransform { inner: exp_map(&v) })
    }

    /// Tangent coefficients of this transform in the named group.
    fn log(&self, group: &str) -> PyResult<Vec<f64>> {
        let group = parse_group(group)?;
        Ok(log_map(&self.inner, group).map_err(err)?.coeffs().to_vec())
    }

    #[staticmethod]
    fn from_line(line: &str) -> PyResult<PyTransform> {
        Ok(PyTransform {
            inner: Transform::from_line(line).map_err(err)?,
        })
    }

    /// The nine matrix entries, row-major, space separated.
    fn to_line(&self) -> String {
        self.inner.to_line()
    }

    fn matrix(&self) -> Vec<Vec<f64>> {
        let m = self.inner.matrix();
        (0..3)
            .map(|r| (0..3).map(|c| m[(r, c)]).collect())
            .collect()
    }

    fn compose(&self, other: &PyTransform) -> PyTransform {
        PyTransform {
            inner: self.inner.compose(&other.inner),
        }
    }

    fn inverse(&self) -> PyResult<PyTransform> {
        Ok(PyTransform {
            inner: self.inner.inverse().map_err(err)?,
        })
    }

    fn determinant(&self) -> f64 {
        self.inner.determinant()
    }

    fn apply_point(&self, x: f64, y: f64) -> PyResult<(f64, f64)> {
        self.inner.apply_point(x, y).map_err(err)
    }

    fn max_abs_diff(&self, other: &PyTransform) -> f64 {
        self.inner.max_abs_diff(&other.inner)
    }

    fn __repr__(&self) -> String {
        format!("Transform({})", self.inner.to_line())
    }
}

/// A differentiable classifier (linear softmax, one-hidden-layer MLP, or
/// small CNN) over fixed-size grayscale images.
#[pyclass(name = "ClassifierModel", from_py_object)]
#[derive(Clone)]
struct PyClassifier {
    inner: ClassifierModel,
}

#[pymethods]
impl PyClassifier {
    #[new]
    #[pyo3(signature = (arch, classes, width, height, seed, hidden = 64))]
    fn new(
        arch: &str,
        classes: usize,
        width: usize,
        height: usize,
        seed: u64,
        hidden: usize,
    ) -> PyResult<PyClassifier> {
        Ok(PyClassifier {
            inner: ClassifierModel::new(parse_arch(arch, hidden)?, classes, width, height, seed)
                .map_err(err)?,
        })
    }

    #[staticmethod]
    fn load_weights(path: &str) -> PyResult<PyClassifier> {
        Ok(PyClassifier {
            inner: ClassifierModel::load_weights_file(path).map_err(err)?,
        })
    }

    fn save_weights(&self, path: &str) -> PyResult<()> {
        self.inner.save_weights_file(path).map_err(err)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn input_dims(&self) -> (usize, usize) {
        self.inner.input_dims()
    }

    fn forward(&self, img: &PyImage) -> PyResult<Vec<f64>> {
        self.inner.forward(&img.inner).map_err(err)
    }

    fn predict(&self, img: &PyImage) -> PyResult<usize> {
        self.inner.predict(&img.inner).map_err(err)
    }

    fn accuracy(&self, images: Vec<PyImage>, labels: Vec<usize>) -> PyResult<f64> {
        self.inner.accuracy(&dataset(images, labels)?).map_err(err)
    }

    fn input_gradient(&self, img: &PyImage, out_weights: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.input_gradient(&img.inner, &out_weights).map_err(err)
    }

    /// SGD with softmax cross-entropy; returns the trained model and the
    /// mean loss per epoch.
    fn train_sgd(
        &self,
        images: Vec<PyImage>,
        labels: Vec<usize>,
        epochs: usize,
        learning_rate: f64,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<(PyClassifier, Vec<f64>)> {
        let run = self
            .inner
            .train_sgd(&dataset(images, labels)?, epochs, learning_rate, batch_size, seed)
            .map_err(err)?;
        Ok((PyClassifier { inner: run.model }, run.epoch_loss))
    }

    /// Continues training on transformed copies: sample i is warped by
    /// `transforms[i]` when given, kept clean otherwise; the learning rate
    /// is scaled by `lr_scale`.
    fn finetune(
        &self,
        images: Vec<PyImage>,
        labels: Vec<usize>,
        transforms: Vec<Option<PyTransform>>,
        epochs: usize,
        learning_rate: f64,
        lr_scale: f64,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<(PyClassifier, Vec<f64>)> {
        let transforms: Vec<Option<Transform>> =
            transforms.into_iter().map(|t| t.map(|t| t.inner)).collect();
        let run = self
            .inner
            .finetune_adversarial(
                &dataset(images, labels)?,
                &transforms,
                epochs,
                learning_rate,
                lr_scale,
                batch_size,
                seed,
            )
            .map_err(err)?;
        Ok((PyClassifier { inner: run.model }, run.epoch_loss))
    }

    fn __repr__(&self) -> String {
        let (w, h) = self.inner.input_dims();
        format!(
            "ClassifierModel({} classes, {w}x{h}, {} params)",
            self.inner.num_classes(),
            self.inner.param_count()
        )
    }
}

/// Outcome of the fooling search.
#[pyclass(name = "FoolResult")]
struct PyFoolResult {
    #[pyo3(get)]
    success: bool,
    #[pyo3(get)]
    score: Option<f64>,
    #[pyo3(get)]
    new_label: Option<usize>,
    #[pyo3(get)]
    iterations: usize,
    #[pyo3(get)]
    transform: PyTransform,
    #[pyo3(get)]
    fooled_image: PyImage,
}

#[pymethods]
impl PyFoolResult {
    fn __repr__(&self) -> String {
        match (self.success, self.score, self.new_label) {
            (true, Some(score), Some(label)) => {
                format!("FoolResult(success, score {score:.6}, new label {label})")
            }
            _ => "FoolResult(failed)".into(),
        }
    }
}

/// Searches the group for the smallest label-changing transformation of
/// `img`, measured by normalized geodesic score.
#[pyfunction]
#[pyo3(signature = (img, model, group, max_iters = 50, momentum = 0.5, num_targets = 5, step = 0.05))]
fn attack(
    img: &PyImage,
    model: &PyClassifier,
    group: &str,
    max_iters: usize,
    momentum: f64,
    num_targets: usize,
    step: f64,
) -> PyResult<PyFoolResult> {
    let params = AttackParams {
        max_iters,
        momentum,
        num_targets,
        ..AttackParams::default()
    };
    let result = manifool_multiclass(
        &img.inner,
        &model.inner,
        parse_group(group)?,
        &params,
        &geo_params(step),
    )
    .map_err(err)?;
    Ok(PyFoolResult {
        success: result.success,
        score: result.geodesic_score,
        new_label: result.new_label,
        iterations: result.iterations,
        transform: PyTransform {
            inner: result.tau_hat,
        },
        fooled_image: PyImage {
            inner: result.fooled_image,
        },
    })
}

/// Image-space length of the direct path from the identity to `t`.
#[pyfunction]
#[pyo3(signature = (img, t, group, step = 0.05))]
fn geodesic_distance(img: &PyImage, t: &PyTransform, group: &str, step: f64) -> PyResult<f64> {
    manifool::geodesic::geodesic_distance(
        &img.inner,
        &t.inner,
        parse_group(group)?,
        &geo_params(step),
    )
    .map_err(err)
}

/// Geodesic distance divided by the image's L2 norm.
#[pyfunction]
#[pyo3(signature = (img, t, group, step = 0.05))]
fn normalized_score(img: &PyImage, t: &PyTransform, group: &str, step: f64) -> PyResult<f64> {
    manifool::geodesic::normalized_score(
        &img.inner,
        &t.inner,
        parse_group(group)?,
        &geo_params(step),
    )
    .map_err(err)
}

/// Draws a random transformation whose normalized score is `target_score`
/// to within one part in a thousand.
#[pyfunction]
#[pyo3(signature = (img, group, target_score, seed, step = 0.05))]
fn sample_random_transform(
    img: &PyImage,
    group: &str,
    target_score: f64,
    seed: u64,
    step: f64,
) -> PyResult<PyTransform> {
    Ok(PyTransform {
        inner: manifool::geodesic::sample_random_transform(
            &img.inner,
            parse_group(group)?,
            target_score,
            seed,
            &geo_params(step),
        )
        .map_err(err)?,
    })
}

/// Mean minimal fooling score over a dataset; returns (rho_hat,
/// failure_count).
#[pyfunction]
#[pyo3(signature = (images, labels, model, group, num_targets = 5, step = 0.05))]
fn invariance_score(
    images: Vec<PyImage>,
    labels: Vec<usize>,
    model: &PyClassifier,
    group: &str,
    num_targets: usize,
    step: f64,
) -> PyResult<(f64, usize)> {
    let params = AttackParams {
        num_targets,
        ..AttackParams::default()
    };
    let report = metrics::invariance_score(
        &dataset(images, labels)?,
        &model.inner,
        parse_group(group)?,
        &params,
        &geo_params(step),
    )
    .map_err(err)?;
    Ok((report.rho_hat, report.failure_count))
}

/// Misclassification rates under random transformations at each score in
/// `r_grid`; returns (rates, r_hat), with NaN where no sample was valid.
#[pyfunction]
#[pyo3(signature = (images, labels, model, group, r_grid, reps_per_image, seed, step = 0.05))]
#[allow(clippy::too_many_arguments)]
fn misclassification_curve(
    images: Vec<PyImage>,
    labels: Vec<usize>,
    model: &PyClassifier,
    group: &str,
    r_grid: Vec<f64>,
    reps_per_image: usize,
    seed: u64,
    step: f64,
) -> PyResult<(Vec<f64>, Option<f64>)> {
    let curve = metrics::misclassification_curve(
        &dataset(images, labels)?,
        &model.inner,
        parse_group(group)?,
        &r_grid,
        reps_per_image,
        seed,
        &geo_params(step),
    )
    .map_err(err)?;
    Ok((curve.rates.clone(), curve.r_hat))
}

/// Synthetic blob corpus; returns (images, labels).
#[pyfunction]
#[pyo3(signature = (n_per_class, width, height, centers, sigma, jitter, seed))]
fn blobs(
    n_per_class: usize,
    width: usize,
    height: usize,
    centers: Vec<(f64, f64)>,
    sigma: f64,
    jitter: f64,
    seed: u64,
) -> PyResult<(Vec<PyImage>, Vec<usize>)> {
    let data = synth_blobs(n_per_class, width, height, &centers, sigma, jitter, seed)
        .map_err(err)?;
    Ok(split(data))
}

/// Synthetic ten-class digit corpus; returns (images, labels).
#[pyfunction]
#[pyo3(signature = (n_per_class, seed, translate = 1.0, rotate = 0.0, log_scale = 0.0))]
fn digits(
    n_per_class: usize,
    seed: u64,
    translate: f64,
    rotate: f64,
    log_scale: f64,
) -> PyResult<(Vec<PyImage>, Vec<usize>)> {
    let jitter = DigitJitter {
        translate,
        rotate,
        log_scale,
    };
    Ok(split(synth_digits(n_per_class, jitter, seed).map_err(err)?))
}

fn split(data: LabeledDataset) -> (Vec<PyImage>, Vec<usize>) {
    let labels = data.labels().to_vec();
    let images = data
        .images()
        .iter()
        .map(|i| PyImage { inner: i.clone() })
        .collect();
    (images, labels)
}

#[pymodule]
fn manifool_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyTransform>()?;
    m.add_class::<PyClassifier>()?;
    m.add_class::<PyFoolResult>()?;
    m.add_function(wrap_pyfunction!(attack, m)?)?;
    m.add_function(wrap_pyfunction!(geodesic_distance, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_score, m)?)?;
    m.add_function(wrap_pyfunction!(sample_random_transform, m)?)?;
    m.add_function(wrap_pyfunction!(invariance_score, m)?)?;
    m.add_function(wrap_pyfunction!(misclassification_curve, m)?)?;
    m.add_function(wrap_pyfunction!(blobs, m)?)?;
    m.add_function(wrap_pyfunction!(digits, m)?)?;
    Ok(())
}

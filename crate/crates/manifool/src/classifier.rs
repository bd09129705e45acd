//! Small differentiable classifiers with analytic input gradients.
//!
//! Three architectures cover the scales this crate targets: a linear softmax
//! model, a one-hidden-layer ReLU perceptron, and a small convolutional
//! network (8 valid 5x5 maps, ReLU, 2x2 max pooling, one dense layer).
//! Parameters are stored as f32 for compact, bit-stable serialization; all
//! arithmetic runs in f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::group::Transform;
use crate::image::Image;

const WEIGHTS_MAGIC: &[u8; 4] = b"MFW1";
const CONV_MAPS: usize = 8;
const CONV_K: usize = 5;
const POOL: usize = 2;

/// Network architecture of a [`ClassifierModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// One dense layer straight to the logits.
    LinearSoftmax,
    /// Dense, ReLU, dense.
    Mlp { hidden: usize },
    /// 5x5 valid convolution to 8 maps, ReLU, 2x2 max pooling, dense.
    SmallCnn,
}

impl Architecture {
    fn tag(self) -> u32 {
        match self {
            Architecture::LinearSoftmax => 0,
            Architecture::Mlp { .. } => 1,
            Architecture::SmallCnn => 2,
        }
    }
}

/// Images paired with class labels, all of identical dimensions.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    images: Vec<Image>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>) -> Result<LabeledDataset> {
        if images.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(first) = images.first() {
            let (w, h) = (first.width(), first.height());
            if images.iter().any(|i| i.width() != w || i.height() != h) {
                return Err(Error::DimensionMismatch(
                    "images in a dataset must share dimensions".into(),
                ));
            }
        }
        Ok(LabeledDataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, index: usize) -> (&Image, usize) {
        (&self.images[index], self.labels[index])
    }

    /// The first `n` samples (all of them if `n` is larger).
    pub fn take(&self, n: usize) -> LabeledDataset {
        let n = n.min(self.len());
        LabeledDataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: ClassifierModel,
    /// Mean cross-entropy per epoch, measured as batches are visited.
    pub epoch_loss: Vec<f64>,
}

/// A classifier with explicit weights and analytic gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    arch: Architecture,
    num_classes: usize,
    width: usize,
    height: usize,
    params: Vec<f32>,
}

struct Layout {
    // (offset, length) per tensor, in parameter-vector order.
    tensors: Vec<(usize, usize)>,
    total: usize,
}

impl ClassifierModel {
    /// Fresh model with biases at zero and weights uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, drawn from a seeded generator.
    pub fn new(
        arch: Architecture,
        num_classes: usize,
        width: usize,
        height: usize,
        seed: u64,
    ) -> Result<ClassifierModel> {
        if num_classes < 2 {
            return Err(Error::InvalidParams("need at least 2 classes".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidParams("image dimensions must be positive".into()));
        }
        if let Architecture::Mlp { hidden } = arch {
            if hidden == 0 {
                return Err(Error::InvalidParams("hidden width must be positive".into()));
            }
        }
        if arch == Architecture::SmallCnn && (width < CONV_K + 1 || height < CONV_K + 1) {
            return Err(Error::InvalidParams(format!(
                "convolutional model needs at least {0}x{0} inputs",
                CONV_K + 1
            )));
        }
        let mut model = ClassifierModel {
            arch,
            num_classes,
            width,
            height,
            params: Vec::new(),
        };
        let layout = model.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0f32; layout.total];
        // Tensors alternate weight, bias; biases stay zero.
        let fan_ins = model.fan_ins();
        for (tensor, fan_in) in layout.tensors.chunks(2).zip(fan_ins) {
            let (offset, len) = tensor[0];
            let scale = 1.0 / (fan_in as f64).sqrt();
            for slot in &mut params[offset..offset + len] {
                *slot = ((rng.random::<f64>() * 2.0 - 1.0) * scale) as f32;
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Expected input dimensions as (width, height).
    pub fn input_dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn input_len(&self) -> usize {
        self.width * self.height
    }

    fn conv_out(&self) -> (usize, usize) {
        (self.width - CONV_K + 1, self.height - CONV_K + 1)
    }

    fn pooled_out(&self) -> (usize, usize) {
        let (cw, ch) = self.conv_out();
        (cw / POOL, ch / POOL)
    }

    fn fan_ins(&self) -> Vec<usize> {
        match self.arch {
            Architecture::LinearSoftmax => vec![self.input_len()],
            Architecture::Mlp { hidden } => vec![self.input_len(), hidden],
            Architecture::SmallCnn => {
                let (pw, ph) = self.pooled_out();
                vec![CONV_K * CONV_K, CONV_MAPS * pw * ph]
            }
        }
    }

    fn layout(&self) -> Layout {
        let n = self.input_len();
        let c = self.num_classes;
        let sizes: Vec<usize> = match self.arch {
            Architecture::LinearSoftmax => vec![c * n, c],
            Architecture::Mlp { hidden } => vec![hidden * n, hidden, c * hidden, c],
            Architecture::SmallCnn => {
                let (pw, ph) = self.pooled_out();
                let fc_in = CONV_MAPS * pw * ph;
                vec![CONV_MAPS * CONV_K * CONV_K, CONV_MAPS, c * fc_in, c]
            }
        };
        let mut tensors = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for size in sizes {
            tensors.push((offset, size));
            offset += size;
        }
        Layout {
            tensors,
            total: offset,
        }
    }

    fn check_input(&self, img: &Image) -> Result<()> {
        if img.width() != self.width || img.height() != self.height {
            return Err(Error::DimensionMismatch(format!(
                "model expects {}x{} inputs, got {}x{}",
                self.width,
                self.height,
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }

    /// Raw logits, one per class.
    pub fn forward(&self, img: &Image) -> Result<Vec<f64>> {
        self.check_input(img)?;
        Ok(self.forward_cached(img.pixels()).0)
    }

    /// Predicted label: argmax of the logits, lowest index on ties.
    pub fn predict(&self, img: &Image) -> Result<usize> {
        let logits = self.forward(img)?;
        Ok(argmax(&logits))
    }

    /// Fraction of samples whose prediction matches the label.
    pub fn accuracy(&self, data: &LabeledDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut hits = 0usize;
        for i in 0..data.len() {
            let (img, label) = data.get(i);
            if self.predict(img)? == label {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }

    /// Gradient with respect to the input pixels of the scalar
    /// `sum_k out_weights[k] * logit_k`.
    pub fn input_gradient(&self, img: &Image, out_weights: &[f64]) -> Result<Vec<f64>> {
        self.check_input(img)?;
        if out_weights.len() != self.num_classes {
            return Err(Error::DimensionMismatch(format!(
                "expected {} logit weights, got {}",
                self.num_classes,
                out_weights.len()
            )));
        }
        let (_, cache) = self.forward_cached(img.pixels());
        let mut dx = vec![0.0; self.input_len()];
        self.backward(img.pixels(), &cache, out_weights, &mut dx, None);
        Ok(dx)
    }

    fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, Cache) {
        let p = &self.params;
        let layout = self.layout();
        let c = self.num_classes;
        match self.arch {
            Architecture::LinearSoftmax => {
                let (w_off, _) = layout.tensors[0];
                let (b_off, _) = layout.tensors[1];
                let n = self.input_len();
                let mut logits = vec![0.0; c];
                for k in 0..c {
                    let row = &p[w_off + k * n..w_off + (k + 1) * n];
                    logits[k] = p[b_off + k] as f64
                        + row.iter().zip(x).map(|(w, v)| *w as f64 * v).sum::<f64>();
                }
                (logits, Cache::Linear)
            }
            Architecture::Mlp { hidden } => {
                let n = self.input_len();
                let (w1, _) = layout.tensors[0];
                let (b1, _) = layout.tensors[1];
                let (w2, _) = layout.tensors[2];
                let (b2, _) = layout.tensors[3];
                let mut pre = vec![0.0; hidden];
                for j in 0..hidden {
                    let row = &p[w1 + j * n..w1 + (j + 1) * n];
                    pre[j] = p[b1 + j] as f64
                        + row.iter().zip(x).map(|(w, v)| *w as f64 * v).sum::<f64>();
                }
                let act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
                let mut logits = vec![0.0; c];
                for k in 0..c {
                    let row = &p[w2 + k * hidden..w2 + (k + 1) * hidden];
                    logits[k] = p[b2 + k] as f64
                        + row.iter().zip(&act).map(|(w, v)| *w as f64 * v).sum::<f64>();
                }
                (logits, Cache::Mlp { pre, act })
            }
            Architecture::SmallCnn => {
                let (cw_off, _) = layout.tensors[0];
                let (cb_off, _) = layout.tensors[1];
                let (fw_off, _) = layout.tensors[2];
                let (fb_off, _) = layout.tensors[3];
                let (ow, oh) = self.conv_out();
                let (pw, ph) = self.pooled_out();
                let mut pre = vec![0.0; CONV_MAPS * oh * ow];
                for m in 0..CONV_MAPS {
                    let kernel = &p[cw_off + m * CONV_K * CONV_K..cw_off + (m + 1) * CONV_K * CONV_K];
                    let bias = p[cb_off + m] as f64;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bias;
                            for ky in 0..CONV_K {
                                let row = &x[(oy + ky) * self.width + ox..][..CONV_K];
                                let krow = &kernel[ky * CONV_K..ky * CONV_K + CONV_K];
                                for (kv, xv) in krow.iter().zip(row) {
                                    acc += *kv as f64 * xv;
                                }
                            }
                            pre[(m * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
                let mut pooled = vec![0.0; CONV_MAPS * ph * pw];
                let mut argmax = vec![0usize; CONV_MAPS * ph * pw];
                for m in 0..CONV_MAPS {
                    for py in 0..ph {
                        for px in 0..pw {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = 0usize;
                            for dy in 0..POOL {
                                for dx in 0..POOL {
                                    let idx = (m * oh + py * POOL + dy) * ow + px * POOL + dx;
                                    let v = pre[idx].max(0.0);
                                    // Strict comparison keeps the first
                                    // maximum in scan order on ties.
                                    if v > best {
                                        best = v;
                                        best_idx = idx;
                                    }
                                }
                            }
                            pooled[(m * ph + py) * pw + px] = best;
                            argmax[(m * ph + py) * pw + px] = best_idx;
                        }
                    }
                }
                let fc_in = pooled.len();
                let mut logits = vec![0.0; c];
                for k in 0..c {
                    let row = &p[fw_off + k * fc_in..fw_off + (k + 1) * fc_in];
                    logits[k] = p[fb_off + k] as f64
                        + row
                            .iter()
                            .zip(&pooled)
                            .map(|(w, v)| *w as f64 * v)
                            .sum::<f64>();
                }
                (
                    logits,
                    Cache::Cnn {
                        pre,
                        pooled,
                        argmax,
                    },
                )
            }
        }
    }

    /// Backpropagates `dlogits` through the cached forward pass. Writes the
    /// input gradient into `dx`; accumulates parameter gradients into
    /// `dparams` when given.
    fn backward(
        &self,
        x: &[f64],
        cache: &Cache,
        dlogits: &[f64],
        dx: &mut [f64],
        mut dparams: Option<&mut [f64]>,
    ) {
        let p = &self.params;
        let layout = self.layout();
        let c = self.num_classes;
        match (self.arch, cache) {
            (Architecture::LinearSoftmax, Cache::Linear) => {
                let n = self.input_len();
                let (w_off, _) = layout.tensors[0];
                let (b_off, _) = layout.tensors[1];
                for k in 0..c {
                    let g = dlogits[k];
                    if g == 0.0 {
                        continue;
                    }
                    let row = &p[w_off + k * n..w_off + (k + 1) * n];
                    for (slot, w) in dx.iter_mut().zip(row) {
                        *slot += g * *w as f64;
                    }
                    if let Some(dp) = dparams.as_deref_mut() {
                        for (i, xv) in x.iter().enumerate() {
                            dp[w_off + k * n + i] += g * xv;
                        }
                        dp[b_off + k] += g;
                    }
                }
            }
            (Architecture::Mlp { hidden }, Cache::Mlp { pre, act }) => {
                let n = self.input_len();
                let (w1, _) = layout.tensors[0];
                let (b1, _) = layout.tensors[1];
                let (w2, _) = layout.tensors[2];
                let (b2, _) = layout.tensors[3];
                let mut dact = vec![0.0; hidden];
                for k in 0..c {
                    let g = dlogits[k];
                    if g == 0.0 {
                        continue;
                    }
                    let row = &p[w2 + k * hidden..w2 + (k + 1) * hidden];
                    for (slot, w) in dact.iter_mut().zip(row) {
                        *slot += g * *w as f64;
                    }
                    if let Some(dp) = dparams.as_deref_mut() {
                        for (j, a) in act.iter().enumerate() {
                            dp[w2 + k * hidden + j] += g * a;
                        }
                        dp[b2 + k] += g;
                    }
                }
                for j in 0..hidden {
                    let g = if pre[j] > 0.0 { dact[j] } else { 0.0 };
                    if g == 0.0 {
                        continue;
                    }
                    let row = &p[w1 + j * n..w1 + (j + 1) * n];
                    for (slot, w) in dx.iter_mut().zip(row) {
                        *slot += g * *w as f64;
                    }
                    if let Some(dp) = dparams.as_deref_mut() {
                        for (i, xv) in x.iter().enumerate() {
                            dp[w1 + j * n + i] += g * xv;
                        }
                        dp[b1 + j] += g;
                    }
                }
            }
            (Architecture::SmallCnn, Cache::Cnn { pre, pooled, argmax }) => {
                let (cw_off, _) = layout.tensors[0];
                let (cb_off, _) = layout.tensors[1];
                let (fw_off, _) = layout.tensors[2];
                let (fb_off, _) = layout.tensors[3];
                let (ow, oh) = self.conv_out();
                let fc_in = pooled.len();
                let mut dpre = vec![0.0; pre.len()];
                for k in 0..c {
                    let g = dlogits[k];
                    if g == 0.0 {
                        continue;
                    }
                    let row = &p[fw_off + k * fc_in..fw_off + (k + 1) * fc_in];
                    for (j, w) in row.iter().enumerate() {
                        // Pooling routes the gradient to the argmax element;
                        // ReLU gates it on the pre-activation sign.
                        let src = argmax[j];
                        if pre[src] > 0.0 {
                            dpre[src] += g * *w as f64;
                        }
                    }
                    if let Some(dp) = dparams.as_deref_mut() {
                        for (j, v) in pooled.iter().enumerate() {
                            dp[fw_off + k * fc_in + j] += g * v;
                        }
                        dp[fb_off + k] += g;
                    }
                }
                for m in 0..CONV_MAPS {
                    let kernel =
                        &p[cw_off + m * CONV_K * CONV_K..cw_off + (m + 1) * CONV_K * CONV_K];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = dpre[(m * oh + oy) * ow + ox];
                            if g == 0.0 {
                                continue;
                            }
                            for ky in 0..CONV_K {
                                for kx in 0..CONV_K {
                                    let xi = (oy + ky) * self.width + ox + kx;
                                    dx[xi] += g * kernel[ky * CONV_K + kx] as f64;
                                    if let Some(dp) = dparams.as_deref_mut() {
                                        dp[cw_off + m * CONV_K * CONV_K + ky * CONV_K + kx] +=
                                            g * x[xi];
                                    }
                                }
                            }
                            if let Some(dp) = dparams.as_deref_mut() {
                                dp[cb_off + m] += g;
                            }
                        }
                    }
                }
            }
            _ => unreachable!("cache does not match architecture"),
        }
    }

    /// Minibatch SGD on the softmax cross-entropy, with a seeded shuffle
    /// each epoch. Returns the trained model and per-epoch mean losses.
    pub fn train_sgd(
        &self,
        data: &LabeledDataset,
        epochs: usize,
        learning_rate: f64,
        batch_size: usize,
        seed: u64,
    ) -> Result<TrainRun> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if batch_size == 0 {
            return Err(Error::InvalidParams("batch size must be positive".into()));
        }
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::InvalidParams("learning rate must be positive".into()));
        }
        if let Some(first) = data.images().first() {
            self.check_input(first)?;
        }
        if let Some(&bad) = data.labels().iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::InvalidParams(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        let mut model = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut epoch_loss = Vec::with_capacity(epochs);
        let mut grad = vec![0.0f64; model.params.len()];
        let mut dx_sink = vec![0.0f64; model.input_len()];
        for _ in 0..epochs {
            shuffle(&mut order, &mut rng);
            let mut total_loss = 0.0;
            for batch in order.chunks(batch_size) {
                grad.iter_mut().for_each(|g| *g = 0.0);
                for &idx in batch {
                    let (img, label) = data.get(idx);
                    let (logits, cache) = model.forward_cached(img.pixels());
                    let probs = softmax(&logits);
                    total_loss -= probs[label].max(1e-300).ln();
                    let mut dlogits = probs;
                    dlogits[label] -= 1.0;
                    dx_sink.iter_mut().for_each(|v| *v = 0.0);
                    model.backward(img.pixels(), &cache, &dlogits, &mut dx_sink, Some(&mut grad));
                }
                let scale = learning_rate / batch.len() as f64;
                for (param, g) in model.params.iter_mut().zip(&grad) {
                    *param = (*param as f64 - scale * g) as f32;
                }
            }
            epoch_loss.push(total_loss / data.len() as f64);
        }
        Ok(TrainRun { model, epoch_loss })
    }

    /// Continues training on transformed copies of the data: sample i is
    /// warped by `transforms[i]` when present, kept as-is otherwise. The
    /// learning rate is `learning_rate * lr_scale`.
    pub fn finetune_adversarial(
        &self,
        data: &LabeledDataset,
        transforms: &[Option<Transform>],
        epochs: usize,
        learning_rate: f64,
        lr_scale: f64,
        batch_size: usize,
        seed: u64,
    ) -> Result<TrainRun> {
        if transforms.len() != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} transforms for {} samples",
                transforms.len(),
                data.len()
            )));
        }
        if !(lr_scale > 0.0) || !lr_scale.is_finite() {
            return Err(Error::InvalidParams("lr scale must be positive".into()));
        }
        let mut images = Vec::with_capacity(data.len());
        for (img, t) in data.images().iter().zip(transforms) {
            images.push(match t {
                Some(t) => img.warp(t)?,
                None => img.clone(),
            });
        }
        let warped = LabeledDataset::new(images, data.labels().to_vec())?;
        self.train_sgd(&warped, epochs, learning_rate * lr_scale, batch_size, seed)
    }

    /// Writes the weights file: magic `MFW1`, then little-endian u32s for
    /// architecture tag, class count, width, height, and parameter count,
    /// then the raw f32 parameters.
    pub fn save_weights(&self, writer: &mut impl Write) -> Result<()> {
        writer.write_all(WEIGHTS_MAGIC)?;
        writer.write_u32::<LittleEndian>(self.arch.tag())?;
        writer.write_u32::<LittleEndian>(self.num_classes as u32)?;
        writer.write_u32::<LittleEndian>(self.width as u32)?;
        writer.write_u32::<LittleEndian>(self.height as u32)?;
        writer.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for &p in &self.params {
            writer.write_f32::<LittleEndian>(p)?;
        }
        Ok(())
    }

    pub fn save_weights_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = BufWriter::new(File::create(path)?);
        self.save_weights(&mut writer)?;
        writer.flush()?;
        Ok(())
    }

    /// Reads the format written by [`ClassifierModel::save_weights`]. The
    /// MLP hidden width is recovered from the parameter count.
    pub fn load_weights(reader: &mut impl Read) -> Result<ClassifierModel> {
        let mut magic = [0u8; 4];
        read_fully(reader, &mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::Format("bad weights magic".into()));
        }
        let tag = read_u32(reader)?;
        let num_classes = read_u32(reader)? as usize;
        let width = read_u32(reader)? as usize;
        let height = read_u32(reader)? as usize;
        let count = read_u32(reader)? as usize;
        if num_classes < 2 || width == 0 || height == 0 {
            return Err(Error::Format("bad weights header".into()));
        }
        let n = width * height;
        let c = num_classes;
        let arch = match tag {
            0 => Architecture::LinearSoftmax,
            1 => {
                // count = hidden * (n + 1 + c) + c
                let per_unit = n + 1 + c;
                if count <= c || (count - c) % per_unit != 0 {
                    return Err(Error::Format(
                        "parameter count does not match any hidden width".into(),
                    ));
                }
                let hidden = (count - c) / per_unit;
                if hidden == 0 {
                    return Err(Error::Format("zero hidden width".into()));
                }
                Architecture::Mlp { hidden }
            }
            2 => Architecture::SmallCnn,
            other => return Err(Error::Format(format!("unknown architecture tag {other}"))),
        };
        let mut model = ClassifierModel {
            arch,
            num_classes,
            width,
            height,
            params: Vec::new(),
        };
        if arch == Architecture::SmallCnn && (width < CONV_K + 1 || height < CONV_K + 1) {
            return Err(Error::Format("image too small for the convolutional stack".into()));
        }
        let expected = model.layout().total;
        if count != expected {
            return Err(Error::Format(format!(
                "expected {expected} parameters, header says {count}"
            )));
        }
        let mut params = vec![0.0f32; count];
        for slot in &mut params {
            let mut bytes = [0u8; 4];
            read_fully(reader, &mut bytes)?;
            *slot = f32::from_le_bytes(bytes);
        }
        let mut trailing = [0u8; 1];
        match reader.read(&mut trailing)? {
            0 => {}
            _ => return Err(Error::Format("trailing bytes after weights".into())),
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Format("non-finite weights".into()));
        }
        model.params = params;
        Ok(model)
    }

    pub fn load_weights_file(path: impl AsRef<Path>) -> Result<ClassifierModel> {
        let mut reader = BufReader::new(File::open(path)?);
        ClassifierModel::load_weights(&mut reader)
    }
}

enum Cache {
    Linear,
    Mlp { pre: Vec<f64>, act: Vec<f64> },
    Cnn {
        pre: Vec<f64>,
        pooled: Vec<f64>,
        argmax: Vec<usize>,
    },
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

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|v| v / sum).collect()
}

fn shuffle(values: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..values.len()).rev() {
        let j = rng.random_range(0..=i);
        values.swap(i, j);
    }
}

fn read_fully(reader: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    reader.read_exact(buf).map_err(|err| {
        if err.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("truncated weights file".into())
        } else {
            Error::Io(err)
        }
    })
}

fn read_u32(reader: &mut impl Read) -> Result<u32> {
    let mut bytes = [0u8; 4];
    read_fully(reader, &mut bytes)?;
    Ok(u32::from_le_bytes(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use approx::assert_abs_diff_eq;

    fn wavy_image(w: usize, h: usize, phase: f64) -> Image {
        Image::from_fn(w, h, |x, y| {
            0.5 + 0.4 * ((0.7 * x + phase).sin() * (0.5 * y - phase).cos())
        })
    }

    fn tiny_dataset(n_per_class: usize) -> LabeledDataset {
        // Two blob classes at mirrored offsets.
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n_per_class {
            let shift = (i as f64) * 0.17;
            images.push(Image::from_fn(12, 12, |x, y| {
                (-((x - 2.5 - shift).powi(2) + (y - 1.5).powi(2)) / 6.0).exp()
            }));
            labels.push(0);
            images.push(Image::from_fn(12, 12, |x, y| {
                (-((x + 2.5 + shift).powi(2) + (y + 1.5).powi(2)) / 6.0).exp()
            }));
            labels.push(1);
        }
        LabeledDataset::new(images, labels).unwrap()
    }

    fn check_input_gradient(model: &ClassifierModel, img: &Image) {
        // Central finite differences on a random logit combination.
        let out_weights: Vec<f64> = (0..model.num_classes())
            .map(|k| if k == 0 { 1.0 } else { -0.5 })
            .collect();
        let analytic = model.input_gradient(img, &out_weights).unwrap();
        let eps = 1e-5;
        let score = |im: &Image| {
            let logits = model.forward(im).unwrap();
            logits
                .iter()
                .zip(&out_weights)
                .map(|(l, w)| l * w)
                .sum::<f64>()
        };
        let mut max_rel = 0.0f64;
        // Probe a spread of pixels rather than the full image.
        for idx in (0..img.pixels().len()).step_by(7) {
            let mut plus = img.pixels().to_vec();
            plus[idx] += eps;
            let mut minus = img.pixels().to_vec();
            minus[idx] -= eps;
            let fd = (score(&Image::new(img.width(), img.height(), plus).unwrap())
                - score(&Image::new(img.width(), img.height(), minus).unwrap()))
                / (2.0 * eps);
            let denom = fd.abs().max(analytic[idx].abs()).max(1e-6);
            max_rel = max_rel.max((fd - analytic[idx]).abs() / denom);
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn linear_gradient_matches_finite_differences() {
        let model =
            ClassifierModel::new(Architecture::LinearSoftmax, 3, 10, 8, 11).unwrap();
        check_input_gradient(&model, &wavy_image(10, 8, 0.3));
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let model =
            ClassifierModel::new(Architecture::Mlp { hidden: 16 }, 4, 9, 9, 12).unwrap();
        check_input_gradient(&model, &wavy_image(9, 9, 1.1));
    }

    #[test]
    fn cnn_gradient_matches_finite_differences() {
        let model = ClassifierModel::new(Architecture::SmallCnn, 3, 14, 14, 13).unwrap();
        check_input_gradient(&model, &wavy_image(14, 14, 2.0));
    }

    #[test]
    fn prediction_is_argmax_of_forward() {
        let model = ClassifierModel::new(Architecture::Mlp { hidden: 8 }, 5, 7, 7, 3).unwrap();
        let img = wavy_image(7, 7, 0.0);
        let logits = model.forward(&img).unwrap();
        let pred = model.predict(&img).unwrap();
        assert!(logits.iter().all(|&l| l <= logits[pred]));
    }

    #[test]
    fn training_reduces_loss_and_fits_blobs() {
        let data = tiny_dataset(30);
        let model = ClassifierModel::new(Architecture::LinearSoftmax, 2, 12, 12, 5).unwrap();
        let run = model.train_sgd(&data, 8, 0.5, 8, 17).unwrap();
        assert!(run.epoch_loss.first().unwrap() > run.epoch_loss.last().unwrap());
        assert!(run.model.accuracy(&data).unwrap() > 0.95);
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_dataset(10);
        let model = ClassifierModel::new(Architecture::Mlp { hidden: 6 }, 2, 12, 12, 5).unwrap();
        let a = model.train_sgd(&data, 3, 0.2, 4, 99).unwrap();
        let b = model.train_sgd(&data, 3, 0.2, 4, 99).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.epoch_loss, b.epoch_loss);
    }

    #[test]
    fn weights_round_trip_bit_exactly() {
        for arch in [
            Architecture::LinearSoftmax,
            Architecture::Mlp { hidden: 13 },
            Architecture::SmallCnn,
        ] {
            let model = ClassifierModel::new(arch, 4, 12, 10, 42).unwrap();
            let mut buf = Vec::new();
            model.save_weights(&mut buf).unwrap();
            let back = ClassifierModel::load_weights(&mut buf.as_slice()).unwrap();
            assert_eq!(model, back);
        }
    }

    #[test]
    fn load_rejects_corrupt_files() {
        let model = ClassifierModel::new(Architecture::LinearSoftmax, 2, 4, 4, 0).unwrap();
        let mut buf = Vec::new();
        model.save_weights(&mut buf).unwrap();
        // Truncated.
        assert!(matches!(
            ClassifierModel::load_weights(&mut &buf[..buf.len() - 3]),
            Err(Error::Format(_))
        ));
        // Trailing garbage.
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(
            ClassifierModel::load_weights(&mut long.as_slice()),
            Err(Error::Format(_))
        ));
        // Bad magic.
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            ClassifierModel::load_weights(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
        // Inconsistent parameter count.
        let mut short_count = buf.clone();
        short_count[20] ^= 1;
        assert!(ClassifierModel::load_weights(&mut short_count.as_slice()).is_err());
    }

    #[test]
    fn mlp_hidden_width_survives_round_trip() {
        let model = ClassifierModel::new(Architecture::Mlp { hidden: 23 }, 7, 11, 5, 1).unwrap();
        let mut buf = Vec::new();
        model.save_weights(&mut buf).unwrap();
        let back = ClassifierModel::load_weights(&mut buf.as_slice()).unwrap();
        assert_eq!(back.arch(), Architecture::Mlp { hidden: 23 });
    }

    #[test]
    fn finetune_with_identity_transforms_matches_plain_training() {
        let data = tiny_dataset(10);
        let model = ClassifierModel::new(Architecture::LinearSoftmax, 2, 12, 12, 5).unwrap();
        let transforms: Vec<Option<Transform>> = (0..data.len())
            .map(|i| if i % 2 == 0 { Some(Transform::identity()) } else { None })
            .collect();
        let tuned = model
            .finetune_adversarial(&data, &transforms, 2, 0.4, 0.5, 4, 7)
            .unwrap();
        let plain = model.train_sgd(&data, 2, 0.2, 4, 7).unwrap();
        assert_eq!(tuned.model.params(), plain.model.params());
    }

    #[test]
    fn training_rejects_bad_arguments() {
        let data = tiny_dataset(2);
        let model = ClassifierModel::new(Architecture::LinearSoftmax, 2, 12, 12, 5).unwrap();
        assert!(matches!(
            model.train_sgd(&LabeledDataset::new(vec![], vec![]).unwrap(), 1, 0.1, 4, 0),
            Err(Error::EmptyDataset)
        ));
        assert!(model.train_sgd(&data, 1, 0.1, 0, 0).is_err());
        let mislabeled = LabeledDataset::new(
            data.images().to_vec(),
            data.labels().iter().map(|_| 9).collect(),
        )
        .unwrap();
        assert!(model.train_sgd(&mislabeled, 1, 0.1, 4, 0).is_err());
    }
}

//! Convolutional models assembled from unitary (or baseline) layers, with
//! a shared inference path, tape construction for training, and a
//! finite-difference gradient checker.

use crate::autograd::{Gradients, NodeId, Tape};
use crate::conv::{im2col, rows_to_tensor, ConvGeometry};
use crate::error::{Error, Result};
use crate::lie::{ExpmConfig, LieParams};
use crate::matrix::{random_gaussian, Matrix, Tensor4};
use crate::rng::Rng;
use crate::weight::{build_weight, guarded_norm, weight_case, FilterSpec, WeightCase};

/// Static shape of one convolutional layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub d_h: usize,
    pub d_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn filter_spec(&self) -> Result<FilterSpec> {
        FilterSpec::new(self.c_out, self.c_in, self.d_h, self.d_w)
    }

    pub fn geometry(&self, h: usize, w: usize) -> Result<ConvGeometry> {
        ConvGeometry::new(self.c_in, h, w, self.c_out, self.d_h, self.d_w, self.stride, self.pad)
    }

    /// Flattened weight shape (fan-in, fan-out).
    pub fn weight_shape(&self) -> (usize, usize) {
        (self.c_in * self.d_h * self.d_w, self.c_out)
    }
}

/// Weight storage for one conv layer.
#[derive(Debug, Clone)]
pub enum ConvWeights {
    /// Trainable packed Lie parameters; the unitary weight is rebuilt every
    /// forward pass.
    Lie(LieParams),
    /// Frozen, already-exponentiated unitary weight (inference artifact).
    Cached(Matrix),
    /// Plain trainable weight matrix, the non-unitary baseline.
    Free(Matrix),
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub shape: ConvShape,
    pub weights: ConvWeights,
}

/// How activations are normalized after each convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormScheme {
    /// Row normalization on projecting layers only; the unitary pipeline.
    UnitaryRows,
    /// Mean/variance normalization per sample per channel after every conv;
    /// the conventional baseline used for timing comparisons.
    PerSampleChannel,
    /// No normalization at all.
    None,
}

#[derive(Debug, Clone)]
pub struct DenseHead {
    pub w: Matrix,
    pub b: Matrix,
}

/// A conv stack with relu activations, global average pooling, and a plain
/// dense classifier head.
#[derive(Debug, Clone)]
pub struct Model {
    pub layers: Vec<ConvLayer>,
    /// Classifier head; absent only in the degenerate empty model.
    pub head: Option<DenseHead>,
    pub norm: NormScheme,
    pub expm_cfg: ExpmConfig,
    pub classes: usize,
}

/// Operation counts recorded during one inference call.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OpCounts {
    /// Matrix exponentials evaluated.
    pub expm_calls: usize,
    /// Row normalizations (one per Toeplitz row), per layer.
    pub row_norms_per_layer: Vec<usize>,
    /// Per-sample-per-channel normalizations, per layer.
    pub channel_norms_per_layer: Vec<usize>,
}

/// Epsilon inside the row-normalization guard.
pub const ROW_NORM_EPS: f64 = 1e-12;

const CHANNEL_NORM_EPS: f64 = 1e-5;

/// Named reference architecture: six unitary conv layers and a dense head.
///
/// shapes: in->9 3x3/1 p1, 9->9 1x1, 9->18 2x2/2, 18->18 1x1,
/// 18->18 2x2/2, 18->36 1x1, global average pool, dense 36->classes.
pub fn toy6_shapes(in_channels: usize) -> Vec<ConvShape> {
    vec![
        ConvShape { c_in: in_channels, c_out: 9, d_h: 3, d_w: 3, stride: 1, pad: 1 },
        ConvShape { c_in: 9, c_out: 9, d_h: 1, d_w: 1, stride: 1, pad: 0 },
        ConvShape { c_in: 9, c_out: 18, d_h: 2, d_w: 2, stride: 2, pad: 0 },
        ConvShape { c_in: 18, c_out: 18, d_h: 1, d_w: 1, stride: 1, pad: 0 },
        ConvShape { c_in: 18, c_out: 18, d_h: 2, d_w: 2, stride: 2, pad: 0 },
        ConvShape { c_in: 18, c_out: 36, d_h: 1, d_w: 1, stride: 1, pad: 0 },
    ]
}

impl Model {
    /// Builds a model with unitary layers from the given shapes; parameters
    /// are small random values drawn from `rng`.
    pub fn unitary(
        shapes: &[ConvShape],
        classes: usize,
        rng: &mut Rng,
        expm_cfg: ExpmConfig,
    ) -> Result<Model> {
        let mut layers = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let spec = shape.filter_spec()?;
            let (lm, lk) = spec.lie_shape();
            let lp = LieParams::random_gaussian(rng, lm, lk, 0.2)?;
            layers.push(ConvLayer { shape: *shape, weights: ConvWeights::Lie(lp) });
        }
        let head_in = shapes.last().map(|s| s.c_out).unwrap_or(1);
        let head = DenseHead {
            w: random_gaussian(rng, head_in, classes, 1.0 / (head_in as f64).sqrt())?,
            b: Matrix::zeros(1, classes),
        };
        Ok(Model { layers, head: Some(head), norm: NormScheme::UnitaryRows, expm_cfg, classes })
    }

    /// Same stack shapes with free gaussian weights; the non-unitary baseline.
    pub fn free(shapes: &[ConvShape], classes: usize, rng: &mut Rng) -> Result<Model> {
        let mut layers = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let (m, k) = shape.weight_shape();
            let w = random_gaussian(rng, m, k, 1.0 / (m as f64).sqrt())?;
            layers.push(ConvLayer { shape: *shape, weights: ConvWeights::Free(w) });
        }
        let head_in = shapes.last().map(|s| s.c_out).unwrap_or(1);
        let head = DenseHead {
            w: random_gaussian(rng, head_in, classes, 1.0 / (head_in as f64).sqrt())?,
            b: Matrix::zeros(1, classes),
        };
        Ok(Model {
            layers,
            head: Some(head),
            norm: NormScheme::None,
            expm_cfg: ExpmConfig::default(),
            classes,
        })
    }

    /// The `toy6` reference model.
    pub fn toy6(in_channels: usize, classes: usize, rng: &mut Rng) -> Result<Model> {
        Model::unitary(&toy6_shapes(in_channels), classes, rng, ExpmConfig::default())
    }

    /// True when every layer still carries trainable weights.
    pub fn is_trainable(&self) -> bool {
        self.layers
            .iter()
            .all(|l| matches!(l.weights, ConvWeights::Lie(_) | ConvWeights::Free(_)))
    }

    /// Replaces every Lie layer with its exponentiated weight so inference
    /// performs no exponentials. Caching an already-cached model is a no-op.
    pub fn cache_weights(&self) -> Result<Model> {
        let mut out = self.clone();
        for layer in &mut out.layers {
            match &layer.weights {
                ConvWeights::Lie(lp) => {
                    let spec = layer.shape.filter_spec()?;
                    let w = build_weight(lp, &spec, &self.expm_cfg)?;
                    layer.weights = ConvWeights::Cached(w.matrix().clone());
                }
                ConvWeights::Cached(_) => {}
                ConvWeights::Free(_) => {
                    return Err(Error::InvalidArgument(
                        "cannot cache a free-weight baseline model".into(),
                    ))
                }
            }
        }
        Ok(out)
    }

    /// Trainable parameter groups: one packed vector per Lie layer (or the
    /// flattened weight for free layers), then the head weight and bias.
    pub fn param_groups(&self) -> Vec<Vec<f64>> {
        let mut groups = Vec::new();
        for layer in &self.layers {
            match &layer.weights {
                ConvWeights::Lie(lp) => groups.push(lp.values().to_vec()),
                ConvWeights::Free(w) => groups.push(w.data().to_vec()),
                ConvWeights::Cached(_) => {}
            }
        }
        if let Some(head) = &self.head {
            groups.push(head.w.data().to_vec());
            groups.push(head.b.data().to_vec());
        }
        groups
    }

    /// Mutable views of the same parameter groups, in the same order.
    pub fn param_groups_mut(&mut self) -> Vec<&mut [f64]> {
        let mut groups: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.layers {
            match &mut layer.weights {
                ConvWeights::Lie(lp) => groups.push(lp.values_mut()),
                ConvWeights::Free(w) => groups.push(w.data_mut()),
                ConvWeights::Cached(_) => {}
            }
        }
        if let Some(head) = &mut self.head {
            groups.push(head.w.data_mut());
            groups.push(head.b.data_mut());
        }
        groups
    }

    pub fn param_count(&self) -> usize {
        self.param_groups().iter().map(Vec::len).sum()
    }

    /// Effective weight matrix of a layer for inference. Counts one
    /// exponential when the layer still holds Lie parameters.
    fn layer_weight(&self, layer: &ConvLayer, counts: &mut OpCounts) -> Result<Matrix> {
        match &layer.weights {
            ConvWeights::Lie(lp) => {
                let spec = layer.shape.filter_spec()?;
                counts.expm_calls += 1;
                Ok(build_weight(lp, &spec, &self.expm_cfg)?.matrix().clone())
            }
            ConvWeights::Cached(w) | ConvWeights::Free(w) => Ok(w.clone()),
        }
    }

    /// Effective weight matrices of every layer, exponentiating where the
    /// layer still holds Lie parameters.
    pub fn materialize_weights(&self) -> Result<Vec<Matrix>> {
        let mut counts = OpCounts::default();
        self.layers.iter().map(|l| self.layer_weight(l, &mut counts)).collect()
    }

    /// Forward pass without a tape. Returns logits and operation counts.
    pub fn infer(&self, batch: &Tensor4) -> Result<(Matrix, OpCounts)> {
        let mut counts = OpCounts {
            expm_calls: 0,
            row_norms_per_layer: vec![0; self.layers.len()],
            channel_norms_per_layer: vec![0; self.layers.len()],
        };
        let n = batch.dims().0;
        let mut act = batch.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let (_, _, h, w) = act.dims();
            let geom = layer.shape.geometry(h, w)?;
            let weight = self.layer_weight(layer, &mut counts)?;
            let toeplitz = im2col(&act, &geom)?;
            let mut y = toeplitz.mat.matmul(&weight)?;
            let (m, k) = layer.shape.weight_shape();
            if self.norm == NormScheme::UnitaryRows && weight_case(m, k) == WeightCase::Project {
                for r in 0..y.rows() {
                    let norm = guarded_norm(y.row(r), ROW_NORM_EPS);
                    for v in y.row_mut(r) {
                        *v /= norm;
                    }
                    counts.row_norms_per_layer[li] += 1;
                }
            }
            let mut out = rows_to_tensor(&y, &geom, n)?;
            if self.norm == NormScheme::PerSampleChannel {
                per_sample_channel_normalize(&mut out);
                counts.channel_norms_per_layer[li] += n * geom.out_dims().0;
            }
            for v in out.data_mut() {
                *v = v.max(0.0);
            }
            act = out;
        }
        let pooled = global_avg_pool(&act);
        let logits = match &self.head {
            Some(head) => dense_forward(&pooled, head)?,
            None => pooled,
        };
        Ok((logits, counts))
    }

    /// Like [`Model::infer`] but fans the batch out over `threads` chunks.
    /// Outputs are assembled in image order; bitwise determinism is only
    /// guaranteed at one thread.
    pub fn infer_threaded(&self, batch: &Tensor4, threads: usize) -> Result<(Matrix, OpCounts)> {
        let n = batch.dims().0;
        if threads <= 1 || n < 2 {
            return self.infer(batch);
        }
        let chunk = n.div_ceil(threads.min(n));
        let parts: Vec<Tensor4> =
            (0..n).step_by(chunk).map(|s| batch.slice_images(s, chunk.min(n - s))).collect();
        let results: Vec<Result<(Matrix, OpCounts)>> = std::thread::scope(|scope| {
            let handles: Vec<_> =
                parts.iter().map(|p| scope.spawn(move || self.infer(p))).collect();
            handles.into_iter().map(|h| h.join().expect("inference thread panicked")).collect()
        });
        let mut logits = Matrix::zeros(n, self.output_width(batch));
        let mut counts = OpCounts {
            expm_calls: 0,
            row_norms_per_layer: vec![0; self.layers.len()],
            channel_norms_per_layer: vec![0; self.layers.len()],
        };
        let mut row = 0;
        for part in results {
            let (part_logits, part_counts) = part?;
            for r in 0..part_logits.rows() {
                logits.row_mut(row).copy_from_slice(part_logits.row(r));
                row += 1;
            }
            counts.expm_calls += part_counts.expm_calls;
            for (a, b) in counts
                .row_norms_per_layer
                .iter_mut()
                .zip(&part_counts.row_norms_per_layer)
            {
                *a += b;
            }
            for (a, b) in counts
                .channel_norms_per_layer
                .iter_mut()
                .zip(&part_counts.channel_norms_per_layer)
            {
                *a += b;
            }
        }
        Ok((logits, counts))
    }

    fn output_width(&self, batch: &Tensor4) -> usize {
        match &self.head {
            Some(head) => head.w.cols(),
            None => self.layers.last().map(|l| l.shape.c_out).unwrap_or(batch.dims().1),
        }
    }

    /// Mean loss and accuracy over a labeled set.
    pub fn evaluate(&self, images: &Tensor4, labels: &[usize]) -> Result<(f64, f64)> {
        let (logits, _) = self.infer(images)?;
        let (_, loss) = crate::autograd::softmax_probs_and_loss(&logits, labels)?;
        let mut correct = 0usize;
        for (r, &label) in labels.iter().enumerate() {
            let row = logits.row(r);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap_or(0);
            if argmax == label {
                correct += 1;
            }
        }
        Ok((loss, correct as f64 / labels.len().max(1) as f64))
    }

    /// Records the forward pass on a tape. Returns the tape, the loss node,
    /// and the parameter leaf ids in [`Model::param_groups`] order. When
    /// `frozen_conv` is given, conv layers use those fixed weight matrices
    /// and receive no gradient.
    pub fn loss_tape(
        &self,
        batch: &Tensor4,
        labels: &[usize],
        frozen_conv: Option<&[Matrix]>,
    ) -> Result<(Tape, NodeId, Vec<Option<NodeId>>)> {
        if let Some(ws) = frozen_conv {
            if ws.len() != self.layers.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} frozen weights for {} layers",
                    ws.len(),
                    self.layers.len()
                )));
            }
        }
        let mut tape = Tape::new();
        let mut param_ids: Vec<Option<NodeId>> = Vec::new();
        let n = batch.dims().0;
        let mut act = tape.leaf_tensor(batch.clone());
        let mut act_dims = batch.dims();
        for (li, layer) in self.layers.iter().enumerate() {
            let (_, _, h, w) = act_dims;
            let geom = layer.shape.geometry(h, w)?;
            let (m, k) = layer.shape.weight_shape();
            let weight_node = if let Some(ws) = frozen_conv {
                if matches!(layer.weights, ConvWeights::Lie(_) | ConvWeights::Free(_)) {
                    param_ids.push(None);
                }
                tape.leaf(ws[li].clone())
            } else {
                match &layer.weights {
                    // a 1x1 ambient block has no free values; its weight is constant
                    ConvWeights::Lie(lp) if lp.values().is_empty() => {
                        param_ids.push(None);
                        let spec = layer.shape.filter_spec()?;
                        tape.leaf(build_weight(lp, &spec, &self.expm_cfg)?.matrix().clone())
                    }
                    ConvWeights::Lie(lp) => {
                        let packed = tape.leaf(Matrix::from_vec(
                            lp.values().len(),
                            1,
                            lp.values().to_vec(),
                        )?);
                        param_ids.push(Some(packed));
                        let a = tape.skew_from_packed(packed, lp.m(), lp.k())?;
                        let u = tape.expm(a, &self.expm_cfg)?;
                        let v = tape.slice_cols(u, lp.k())?;
                        if m > k {
                            v
                        } else {
                            tape.transpose(v)
                        }
                    }
                    ConvWeights::Free(w) => {
                        let node = tape.leaf(w.clone());
                        param_ids.push(Some(node));
                        node
                    }
                    ConvWeights::Cached(w) => tape.leaf(w.clone()),
                }
            };
            let t = tape.im2col(act, &geom)?;
            let mut y = tape.matmul(t, weight_node)?;
            if self.norm == NormScheme::UnitaryRows && weight_case(m, k) == WeightCase::Project {
                y = tape.row_normalize(y, ROW_NORM_EPS);
            }
            let out = tape.rows_to_tensor(y, &geom, n)?;
            act = tape.relu(out);
            let (c_out, h_out, w_out) = geom.out_dims();
            act_dims = (n, c_out, h_out, w_out);
        }
        let pooled = tape.global_avg_pool(act);
        let logits = match &self.head {
            Some(head) => {
                let hw = tape.leaf(head.w.clone());
                param_ids.push(Some(hw));
                let hb = tape.leaf(head.b.clone());
                param_ids.push(Some(hb));
                let z = tape.matmul(pooled, hw)?;
                tape.add_bias(z, hb)?
            }
            None => pooled,
        };
        let loss = tape.cross_entropy(logits, labels)?;
        Ok((tape, loss, param_ids))
    }

    /// Loss value for the current parameters (tape forward only).
    pub fn loss_value(&self, batch: &Tensor4, labels: &[usize]) -> Result<f64> {
        let (tape, loss, _) = self.loss_tape(batch, labels, None)?;
        Ok(tape.value(loss).as_mat().get(0, 0))
    }

    /// Loss and per-group gradients via one backward pass.
    pub fn gradients(&self, batch: &Tensor4, labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
        let (tape, loss, param_ids) = self.loss_tape(batch, labels, None)?;
        let loss_value = tape.value(loss).as_mat().get(0, 0);
        let grads = tape.backward(loss)?;
        let out = collect_group_grads(&tape, &grads, &param_ids);
        Ok((loss_value, out))
    }
}

/// Extracts per-group gradient vectors (zeros for frozen groups).
pub(crate) fn collect_group_grads(
    tape: &Tape,
    grads: &Gradients,
    param_ids: &[Option<NodeId>],
) -> Vec<Vec<f64>> {
    param_ids
        .iter()
        .map(|id| match id {
            Some(id) => match grads.mat(*id) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; tape.value(*id).as_mat().data().len()],
            },
            None => Vec::new(),
        })
        .collect()
}

/// Mean/variance normalization per sample per channel, in place.
pub fn per_sample_channel_normalize(t: &mut Tensor4) {
    let (n, c, h, w) = t.dims();
    let count = (h * w) as f64;
    for img in 0..n {
        for ch in 0..c {
            let mut mean = 0.0;
            for y in 0..h {
                for x in 0..w {
                    mean += t.get(img, ch, y, x);
                }
            }
            mean /= count;
            let mut var = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let d = t.get(img, ch, y, x) - mean;
                    var += d * d;
                }
            }
            var /= count;
            let inv = 1.0 / (var + CHANNEL_NORM_EPS).sqrt();
            for y in 0..h {
                for x in 0..w {
                    let v = (t.get(img, ch, y, x) - mean) * inv;
                    t.set(img, ch, y, x, v);
                }
            }
        }
    }
}

fn global_avg_pool(t: &Tensor4) -> Matrix {
    let (n, c, h, w) = t.dims();
    let mut out = Matrix::zeros(n, c);
    for img in 0..n {
        for ch in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    s += t.get(img, ch, y, x);
                }
            }
            out.set(img, ch, s / (h * w) as f64);
        }
    }
    out
}

fn dense_forward(x: &Matrix, head: &DenseHead) -> Result<Matrix> {
    let mut out = x.matmul(&head.w)?;
    for r in 0..out.rows() {
        for (v, b) in out.row_mut(r).iter_mut().zip(head.b.row(0)) {
            *v += b;
        }
    }
    Ok(out)
}

/// One entry of a gradient-check report.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub group: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

/// Result of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub worst: Vec<GradCheckEntry>,
    pub max_error: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// Central-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-6;

/// Compares the given analytic gradients against central finite differences
/// of the model's loss. The error is measured relative to
/// `max(|analytic|, |numeric|, 1)`, the natural scale of a mean
/// cross-entropy loss.
pub fn compare_grads_fd(
    model: &Model,
    batch: &Tensor4,
    labels: &[usize],
    analytic: &[Vec<f64>],
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut probe = model.clone();
    let group_sizes: Vec<usize> = probe.param_groups().iter().map(Vec::len).collect();
    if analytic.len() != group_sizes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gradient groups for {} parameter groups",
            analytic.len(),
            group_sizes.len()
        )));
    }
    let mut max_error = 0.0f64;
    let mut worst: Vec<GradCheckEntry> = Vec::new();
    let mut checked = 0usize;
    for (g, &size) in group_sizes.iter().enumerate() {
        for i in 0..size {
            let base = probe.param_groups_mut()[g][i];
            probe.param_groups_mut()[g][i] = base + GRAD_CHECK_STEP;
            let plus = probe.loss_value(batch, labels)?;
            probe.param_groups_mut()[g][i] = base - GRAD_CHECK_STEP;
            let minus = probe.loss_value(batch, labels)?;
            probe.param_groups_mut()[g][i] = base;
            let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
            let ad = analytic[g][i];
            let error = (numeric - ad).abs() / numeric.abs().max(ad.abs()).max(1.0);
            checked += 1;
            if error > max_error {
                max_error = error;
            }
            if error > tolerance {
                worst.push(GradCheckEntry { group: g, index: i, analytic: ad, numeric, error });
            }
        }
    }
    worst.sort_by(|a, b| b.error.partial_cmp(&a.error).unwrap_or(std::cmp::Ordering::Equal));
    worst.truncate(16);
    Ok(GradCheckReport { worst, max_error, checked, tolerance, pass: max_error <= tolerance })
}

/// Checks every trainable parameter of `model` against central differences.
pub fn grad_check(
    model: &Model,
    batch: &Tensor4,
    labels: &[usize],
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = model.gradients(batch, labels)?;
    compare_grads_fd(model, batch, labels, &grads, tolerance)
}

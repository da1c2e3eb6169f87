//! Desk-scale experiments: activation-norm propagation through deep stacks,
//! toy classifier training, overfitting-gap probes, and inference timing of
//! cached unitary weights against a per-sample-normalization baseline.

use std::io::Write as IoWrite;
use std::time::Instant;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::lie::{expm, lie_to_skew, ExpmConfig, LieParams};
use crate::matrix::{l2_norm, random_gaussian, Matrix, Tensor4};
use crate::model::{collect_group_grads, Model};
use crate::optim::{sgd_step, SgdConfig, SgdState};
use crate::rng::Rng;

/// Weight distribution of a square stack layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightKind {
    Unitary,
    Gaussian { std: f64 },
    /// Gaussian with the variance-preserving 1/sqrt(width) scale.
    GaussianNormalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    None,
    Relu,
}

/// A deep stack of square layers for the norm-propagation experiment.
#[derive(Debug, Clone)]
pub struct StackConfig {
    pub depth: usize,
    pub width: usize,
    pub kind: WeightKind,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

/// Everything one experiment run produced.
#[derive(Debug, Clone, Default)]
pub struct RunRecord {
    /// Activation norms: index 0 is the probe itself, then one per layer.
    pub layer_norms: Vec<f64>,
    /// Layer at which the activation norm stopped being finite.
    pub diverged_at: Option<usize>,
    pub curves: Vec<CurvePoint>,
    /// (phase name, seconds) wall-clock entries.
    pub phase_times: Vec<(String, f64)>,
    pub final_train: Option<Metrics>,
    pub final_test: Option<Metrics>,
}

impl RunRecord {
    /// Final over initial norm; infinite when the run diverged.
    pub fn norm_ratio(&self) -> f64 {
        match (self.layer_norms.first(), self.layer_norms.last()) {
            (Some(&first), Some(&last)) if first > 0.0 => last / first,
            _ => f64::NAN,
        }
    }
}

/// Feeds a probe vector through `depth` square layers of the given kind and
/// records the activation norm after each one. A non-finite norm is recorded
/// as the divergence depth, never a crash.
pub fn norm_propagation(cfg: &StackConfig, probe: &[f64]) -> Result<RunRecord> {
    if cfg.depth < 1 {
        return Err(Error::InvalidArgument("stack depth must be >= 1".into()));
    }
    if probe.len() != cfg.width {
        return Err(Error::InvalidArgument(format!(
            "probe length {} does not match width {}",
            probe.len(),
            cfg.width
        )));
    }
    let mut rng = Rng::new(cfg.seed);
    let expm_cfg = ExpmConfig::default();
    let mut x = Matrix::from_vec(cfg.width, 1, probe.to_vec())?;
    let mut record = RunRecord { layer_norms: vec![l2_norm(x.data())], ..Default::default() };
    for layer in 0..cfg.depth {
        let w = match cfg.kind {
            WeightKind::Unitary => {
                let lp = LieParams::random_gaussian(&mut rng, cfg.width, cfg.width, 0.5)?;
                expm(&lie_to_skew(&lp), &expm_cfg)?
            }
            WeightKind::Gaussian { std } => random_gaussian(&mut rng, cfg.width, cfg.width, std)?,
            WeightKind::GaussianNormalized => {
                random_gaussian(&mut rng, cfg.width, cfg.width, 1.0 / (cfg.width as f64).sqrt())?
            }
        };
        x = w.matmul(&x)?;
        if cfg.nonlinearity == Nonlinearity::Relu {
            for v in x.data_mut() {
                *v = v.max(0.0);
            }
        }
        let norm = l2_norm(x.data());
        if !norm.is_finite() {
            record.layer_norms.push(f64::INFINITY);
            record.diverged_at = Some(layer + 1);
            break;
        }
        record.layer_norms.push(norm);
    }
    Ok(record)
}

/// Training-loop knobs beyond the optimizer itself.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Exponentiate every N steps, reusing the previous unitary weights in
    /// between (1 = every step, the default).
    pub exp_every: usize,
}

impl Default for TrainSetup {
    fn default() -> Self {
        TrainSetup { epochs: 50, batch_size: 32, seed: 0, exp_every: 1 }
    }
}

fn desk_scale_check(data: &Dataset) -> Result<()> {
    let (_, _, h, w) = data.images.dims();
    if h > 16 || w > 16 || data.classes > 10 || data.len() > 5000 {
        return Err(Error::InvalidArgument(format!(
            "desk scale exceeded: {}x{} images, {} classes, {} samples (limits 16x16, 10, 5000)",
            h,
            w,
            data.classes,
            data.len()
        )));
    }
    Ok(())
}

/// Trains `model` in place with mini-batch SGD; records loss and accuracy
/// per epoch for both splits. A non-finite loss aborts with the record
/// marked diverged.
pub fn train_toy(
    model: &mut Model,
    train: &Dataset,
    test: Option<&Dataset>,
    sgd: &SgdConfig,
    setup: &TrainSetup,
) -> Result<RunRecord> {
    desk_scale_check(train)?;
    sgd.validate()?;
    if !model.is_trainable() {
        return Err(Error::InvalidArgument("model is inference-only; cannot train".into()));
    }
    if setup.batch_size < 1 || setup.exp_every < 1 {
        return Err(Error::InvalidArgument("batch_size and exp_every must be >= 1".into()));
    }
    let mut record = RunRecord::default();
    let group_sizes: Vec<usize> = model.param_groups().iter().map(Vec::len).collect();
    let mut state = SgdState::new(&group_sizes);
    let rng = Rng::new(setup.seed);

    let mut eval_secs = 0.0;
    let mut record_metrics = |model: &Model, epoch: usize, record: &mut RunRecord| -> Result<()> {
        let t0 = Instant::now();
        let (loss, acc) = model.evaluate(&train.images, &train.labels)?;
        record.curves.push(CurvePoint { epoch, split: Split::Train, loss, accuracy: acc });
        record.final_train = Some(Metrics { loss, accuracy: acc });
        if let Some(test) = test {
            let (loss, acc) = model.evaluate(&test.images, &test.labels)?;
            record.curves.push(CurvePoint { epoch, split: Split::Test, loss, accuracy: acc });
            record.final_test = Some(Metrics { loss, accuracy: acc });
        }
        eval_secs += t0.elapsed().as_secs_f64();
        Ok(())
    };

    record_metrics(model, 0, &mut record)?;

    let train_start = Instant::now();
    let mut frozen: Option<Vec<Matrix>> = None;
    let mut step = 0usize;
    'epochs: for epoch in 0..setup.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.derive(epoch as u64 + 1).shuffle(&mut order);
        for chunk in order.chunks(setup.batch_size) {
            let batch = train.subset(chunk);
            if setup.exp_every > 1 {
                if step % setup.exp_every == 0 {
                    frozen = None;
                } else if frozen.is_none() {
                    frozen = Some(model.materialize_weights()?);
                }
            }
            let (tape, loss_node, param_ids) =
                model.loss_tape(&batch.images, &batch.labels, frozen.as_deref())?;
            let loss = tape.value(loss_node).as_mat().get(0, 0);
            if !loss.is_finite() {
                record.diverged_at = Some(epoch);
                break 'epochs;
            }
            let grads = tape.backward(loss_node)?;
            let grad_groups = collect_group_grads(&tape, &grads, &param_ids);
            let mut params = model.param_groups_mut();
            let grad_refs: Vec<&[f64]> = grad_groups.iter().map(Vec::as_slice).collect();
            sgd_step(&mut params, &grad_refs, &mut state, sgd, epoch)?;
            if setup.exp_every > 1 && step % setup.exp_every == 0 {
                // weights changed; next frozen stretch re-exponentiates lazily
                frozen = None;
            }
            step += 1;
        }
        record_metrics(model, epoch + 1, &mut record)?;
    }
    let total = train_start.elapsed().as_secs_f64();
    record.phase_times.push(("train".into(), total - eval_secs.min(total)));
    record.phase_times.push(("eval".into(), eval_secs));
    Ok(record)
}

/// Final train loss, test loss, and their difference.
pub fn overfit_gap(run: &RunRecord) -> Result<(f64, f64, f64)> {
    match (run.final_train, run.final_test) {
        (Some(train), Some(test)) => Ok((train.loss, test.loss, test.loss - train.loss)),
        _ => Err(Error::InvalidArgument(
            "overfit gap needs a completed run with both splits".into(),
        )),
    }
}

/// One row of the inference benchmark.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub variant: String,
    pub batch: usize,
    pub median_us: f64,
    pub p10_us: f64,
    pub p90_us: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Times per-image inference wall-clock for each variant over `repeats`
/// batches. Variants must share identical conv stack shapes so the numbers
/// compare like for like. `threads` > 1 fans each batch out over chunks.
pub fn bench_inference(
    variants: &[(String, Model)],
    batch: &Tensor4,
    repeats: usize,
    threads: usize,
) -> Result<Vec<BenchRow>> {
    if variants.is_empty() || repeats == 0 {
        return Err(Error::InvalidArgument("need at least one variant and one repeat".into()));
    }
    let reference: Vec<_> = variants[0].1.layers.iter().map(|l| l.shape).collect();
    for (name, model) in variants {
        let shapes: Vec<_> = model.layers.iter().map(|l| l.shape).collect();
        if shapes != reference {
            return Err(Error::InvalidArgument(format!(
                "variant {name} has a different conv stack shape"
            )));
        }
    }
    let n = batch.dims().0;
    let mut rows = Vec::with_capacity(variants.len());
    for (name, model) in variants {
        model.infer_threaded(batch, threads)?; // warmup
        let mut samples = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t0 = Instant::now();
            let _ = model.infer_threaded(batch, threads)?;
            samples.push(t0.elapsed().as_secs_f64() * 1e6 / n as f64);
        }
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows.push(BenchRow {
            variant: name.clone(),
            batch: n,
            median_us: percentile(&samples, 0.5),
            p10_us: percentile(&samples, 0.1),
            p90_us: percentile(&samples, 0.9),
        });
    }
    Ok(rows)
}

/// Writes `norms.csv` rows: (layer_index, norm).
pub fn write_norms_csv<W: IoWrite>(mut w: W, norms: &[f64]) -> std::io::Result<()> {
    writeln!(w, "layer_index,norm")?;
    for (i, n) in norms.iter().enumerate() {
        writeln!(w, "{i},{n}")?;
    }
    Ok(())
}

/// Writes `curves.csv` rows: (epoch, split, loss, accuracy).
pub fn write_curves_csv<W: IoWrite>(mut w: W, curves: &[CurvePoint]) -> std::io::Result<()> {
    writeln!(w, "epoch,split,loss,accuracy")?;
    for p in curves {
        writeln!(w, "{},{},{},{}", p.epoch, p.split.as_str(), p.loss, p.accuracy)?;
    }
    Ok(())
}

/// Writes `bench.csv` rows: (variant, batch, median_us, p10_us, p90_us).
pub fn write_bench_csv<W: IoWrite>(mut w: W, rows: &[BenchRow]) -> std::io::Result<()> {
    writeln!(w, "variant,batch,median_us,p10_us,p90_us")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.variant, r.batch, r.median_us, r.p10_us, r.p90_us)?;
    }
    Ok(())
}

/// Unit-norm gaussian-direction probe.
pub fn unit_probe(rng: &mut Rng, width: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..width).map(|_| rng.normal()).collect();
    let n = l2_norm(&v);
    if n > 0.0 {
        for x in &mut v {
            *x /= n;
        }
    } else {
        v[0] = 1.0;
    }
    v
}

//! Single binary exposing the library: invariant checks, stability and
//! training experiments, inference benchmarks, and model import/export.
//!
//! Every run is deterministic given (--seed, --threads 1) and writes a
//! manifest (full configuration plus content hashes of its inputs) next to
//! its outputs.

use std::fmt::Write as FmtWrite;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use ulie::dataset::{self, Dataset};
use ulie::lab::{
    self, bench_inference, norm_propagation, train_toy, Nonlinearity, StackConfig, TrainSetup,
    WeightKind,
};
use ulie::lie::{expm_grad, expm_square, lie_to_skew, ExpmConfig, LieParams};
use ulie::matrix::{l2_norm, random_gaussian, Matrix};
use ulie::model::{Model, NormScheme};
use ulie::optim::SgdConfig;
use ulie::store::{self, StoreMode};
use ulie::weight::{apply_weight, build_weight, FilterSpec};
use ulie::Rng;

const USAGE_EXIT: u8 = 2;
const DIVERGED_EXIT: u8 = 3;

#[derive(Parser)]
#[command(name = "ulie", version, about = "Strictly orthogonal weights from Lie parameters")]
struct Cli {
    /// Seed for all randomness.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Directory for outputs and manifests.
    #[arg(long, global = true, default_value = "./out")]
    out: PathBuf,

    /// Evaluate the bare truncated series without scaling-and-squaring.
    #[arg(long, global = true)]
    strict_taylor: bool,

    /// Threads for batch-parallel evaluation; bitwise determinism is only
    /// guaranteed at 1.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Unitary,
    Gaussian,
    GaussianNormalized,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetArg {
    /// Linearly separable two-class 4x4 set.
    Separable2,
    /// Ten-class 8x8 oriented-grating set.
    Patterns10,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Lie,
    Dense,
}

#[derive(Subcommand)]
enum Command {
    /// Run the orthogonality, isometry, projection, and gradient invariant
    /// suites; nonzero exit on any failure.
    Check {
        /// Ambient unitary dimension.
        #[arg(long)]
        dim: usize,
        /// Active parameter columns (1..=dim).
        #[arg(long)]
        cols: usize,
        /// Random trials per suite.
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Propagate unit probes through a deep square stack and record norms.
    Stability {
        #[arg(long)]
        depth: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, value_enum, default_value_t = KindArg::Unitary)]
        kind: KindArg,
        /// Standard deviation for the gaussian kind.
        #[arg(long, default_value_t = 1.0)]
        std: f64,
        /// Apply relu after every layer.
        #[arg(long)]
        relu: bool,
        /// Probes per seed.
        #[arg(long, default_value_t = 10)]
        probes: usize,
        /// Independent seeds to aggregate over.
        #[arg(long, default_value_t = 10)]
        seeds: usize,
    },
    /// Train the reference model on a bundled synthetic dataset.
    Train {
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        /// Named architecture; `toy6` is the reference stack.
        #[arg(long, default_value = "toy6")]
        arch: String,
        #[arg(long, value_enum, default_value_t = DatasetArg::Separable2)]
        dataset: DatasetArg,
        /// Samples to generate before splitting.
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Fraction of samples in the training split.
        #[arg(long, default_value_t = 0.75)]
        train_fraction: f64,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        momentum: Option<f64>,
        #[arg(long)]
        weight_decay: Option<f64>,
        /// Exponentiate every N steps, sharing weights in between.
        #[arg(long, default_value_t = 1)]
        exp_every: usize,
    },
    /// Time cached-unitary inference against a per-sample-normalization
    /// baseline on the same conv stack.
    Bench {
        /// Model file; defaults to `<out>/model-lie.ulie`, or a fresh seeded
        /// model when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 1000)]
        repeats: usize,
        /// Bench on images from a CIFAR-10 binary batch instead of the
        /// synthetic set (model must have 3 input channels).
        #[arg(long)]
        cifar: Option<PathBuf>,
    },
    /// Re-save a model in lie-packed or dense-cached form.
    Export {
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Input model; defaults to `<out>/model-lie.ulie`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output path; defaults to `<out>/model-<mode>.ulie`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn usage_error(msg: &str) -> Result<u8, ulie::Error> {
    eprintln!("usage error: {msg}");
    Ok(USAGE_EXIT)
}

fn expm_cfg(strict: bool) -> ExpmConfig {
    if strict {
        ExpmConfig::strict_taylor()
    } else {
        ExpmConfig::default()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    fn new(cli: &Cli, command: &str) -> Manifest {
        let mut m = Manifest { entries: Vec::new() };
        m.push("command", command);
        m.push("seed", cli.seed);
        m.push("threads", cli.threads);
        m.push("strict_taylor", cli.strict_taylor);
        m
    }

    fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    fn push_input_hash(&mut self, name: &str, bytes: &[u8]) {
        self.push(&format!("input_sha256_{name}"), sha256_hex(bytes));
    }

    fn write(&self, out_dir: &Path, command: &str) -> Result<PathBuf, ulie::Error> {
        let path = out_dir.join(format!("{command}.manifest"));
        let mut text = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(text, "{k}={v}");
        }
        fs::write(&path, text)
            .map_err(|source| ulie::Error::Io { path: path.clone(), source })?;
        Ok(path)
    }
}

fn ensure_out_dir(path: &Path) -> Result<(), ulie::Error> {
    fs::create_dir_all(path).map_err(|source| ulie::Error::Io { path: path.to_path_buf(), source })
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<(), ulie::Error> {
    fs::write(path, bytes).map_err(|source| ulie::Error::Io { path: path.to_path_buf(), source })
}

fn run(cli: Cli) -> Result<u8, ulie::Error> {
    ensure_out_dir(&cli.out)?;
    match &cli.command {
        Command::Check { dim, cols, trials } => cmd_check(&cli, *dim, *cols, *trials),
        Command::Stability { depth, width, kind, std, relu, probes, seeds } => {
            cmd_stability(&cli, *depth, *width, *kind, *std, *relu, *probes, *seeds)
        }
        Command::Train {
            epochs,
            arch,
            dataset,
            samples,
            batch,
            train_fraction,
            lr,
            momentum,
            weight_decay,
            exp_every,
        } => cmd_train(
            &cli,
            *epochs,
            arch,
            *dataset,
            *samples,
            *batch,
            *train_fraction,
            *lr,
            *momentum,
            *weight_decay,
            *exp_every,
        ),
        Command::Bench { model, batch, repeats, cifar } => {
            cmd_bench(&cli, model.as_deref(), *batch, *repeats, cifar.as_deref())
        }
        Command::Export { mode, model, output } => {
            cmd_export(&cli, *mode, model.as_deref(), output.as_deref())
        }
    }
}

struct SuiteResult {
    name: &'static str,
    measured: f64,
    tolerance: f64,
}

impl SuiteResult {
    fn pass(&self) -> bool {
        self.measured <= self.tolerance
    }

    fn report(&self, trials: usize) -> bool {
        if self.pass() {
            println!(
                "{}: PASS (max error {:.3e}, tolerance {:.1e}, {} trials)",
                self.name, self.measured, self.tolerance, trials
            );
            true
        } else {
            println!(
                "{}: FAIL (max error {:.3e}, tolerance {:.1e}, {} trials)",
                self.name, self.measured, self.tolerance, trials
            );
            eprintln!(
                "invariant={} measured={:.6e} tolerance={:.1e} status=FAIL",
                self.name, self.measured, self.tolerance
            );
            false
        }
    }
}

fn cmd_check(cli: &Cli, dim: usize, cols: usize, trials: usize) -> Result<u8, ulie::Error> {
    if dim < 1 {
        return usage_error("--dim must be >= 1");
    }
    if cols < 1 || cols > dim {
        return usage_error("--cols must satisfy 1 <= cols <= dim");
    }
    if trials < 1 {
        return usage_error("--trials must be >= 1");
    }
    let cfg = expm_cfg(cli.strict_taylor);
    let mut rng = Rng::new(cli.seed);

    // orthogonality of the full square matrix
    let mut ortho_err = 0.0f64;
    for _ in 0..trials {
        let lp = LieParams::random_uniform(&mut rng, dim, cols, -5.0, 5.0)?;
        let u = ulie::lie::expm(&lie_to_skew(&lp), &cfg)?;
        let gram = u.transpose().matmul(&u)?;
        ortho_err = ortho_err.max(gram.max_abs_diff(&Matrix::identity(dim)));
    }

    // isometry: wide orientation (fan-in cols -> fan-out dim) preserves norms
    let mut iso_err = 0.0f64;
    for _ in 0..trials {
        let spec = FilterSpec::with_custom_mapping(dim, 1, 1, cols, cols, dim)?;
        let lp = LieParams::random_uniform(&mut rng, dim, cols, -3.0, 3.0)?;
        let w = build_weight(&lp, &spec, &cfg)?;
        let x = random_gaussian(&mut rng, 8, cols, 1.0)?;
        let y = apply_weight(&w, &x)?;
        for r in 0..y.rows() {
            let rel = (l2_norm(y.row(r)) - l2_norm(x.row(r))).abs() / l2_norm(x.row(r)).max(1e-300);
            iso_err = iso_err.max(rel);
        }
    }

    // projection: tall orientation contracts then renormalizes to unit rows
    let mut proj_err = 0.0f64;
    if cols < dim {
        for _ in 0..trials {
            let spec = FilterSpec::with_custom_mapping(cols, 1, 1, dim, dim, cols)?;
            let lp = LieParams::random_uniform(&mut rng, dim, cols, -3.0, 3.0)?;
            let w = build_weight(&lp, &spec, &cfg)?;
            let x = random_gaussian(&mut rng, 8, dim, 1.0)?;
            let raw = x.matmul(w.matrix())?;
            let y = apply_weight(&w, &x)?;
            for r in 0..y.rows() {
                let contraction = l2_norm(raw.row(r)) - l2_norm(x.row(r));
                proj_err = proj_err.max(contraction); // must stay <= 1e-12
                proj_err = proj_err.max((l2_norm(y.row(r)) - 1.0).abs());
            }
        }
    }

    // gradient: exponential adjoint against central finite differences, on a
    // dimension capped for finite-difference cost
    let gdim = dim.min(8);
    let gcols = cols.min(gdim);
    let mut grad_err = 0.0f64;
    for _ in 0..trials.min(5) {
        let lp = LieParams::random_uniform(&mut rng, gdim, gcols, -1.5, 1.5)?;
        let upstream = random_gaussian(&mut rng, gdim, gdim, 1.0)?;
        let da = expm_grad(&lie_to_skew(&lp), &upstream, &cfg)?;
        let h = 1e-6;
        for idx in 0..lp.values().len() {
            let (i, j) = lp.position(idx);
            let ad = da.get(i, j) - da.get(j, i);
            let eval = |delta: f64| -> Result<f64, ulie::Error> {
                let mut p = lp.clone();
                p.values_mut()[idx] += delta;
                let u = expm_square(lie_to_skew(&p).matrix(), &cfg)?;
                Ok(u.data().iter().zip(upstream.data()).map(|(x, g)| x * g).sum())
            };
            let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
            grad_err = grad_err.max((fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-6));
        }
    }

    let suites = [
        SuiteResult { name: "orthogonality", measured: ortho_err, tolerance: 1e-10 },
        SuiteResult { name: "isometry", measured: iso_err, tolerance: 1e-10 },
        SuiteResult { name: "projection", measured: proj_err, tolerance: 1e-12 },
        SuiteResult { name: "gradient", measured: grad_err, tolerance: 1e-5 },
    ];
    let mut all_pass = true;
    for s in &suites {
        all_pass &= s.report(trials);
    }

    let mut manifest = Manifest::new(cli, "check");
    manifest.push("dim", dim);
    manifest.push("cols", cols);
    manifest.push("trials", trials);
    for s in &suites {
        manifest.push(&format!("{}_max_error", s.name), format!("{:.6e}", s.measured));
    }
    manifest.write(&cli.out, "check")?;
    Ok(if all_pass { 0 } else { 1 })
}

#[allow(clippy::too_many_arguments)]
fn cmd_stability(
    cli: &Cli,
    depth: usize,
    width: usize,
    kind: KindArg,
    std: f64,
    relu: bool,
    probes: usize,
    seeds: usize,
) -> Result<u8, ulie::Error> {
    if depth < 1 {
        return usage_error("--depth must be >= 1");
    }
    if width < 1 {
        return usage_error("--width must be >= 1");
    }
    if probes < 1 || seeds < 1 {
        return usage_error("--probes and --seeds must be >= 1");
    }
    let weight_kind = match kind {
        KindArg::Unitary => WeightKind::Unitary,
        KindArg::Gaussian => WeightKind::Gaussian { std },
        KindArg::GaussianNormalized => WeightKind::GaussianNormalized,
    };
    let nonlinearity = if relu { Nonlinearity::Relu } else { Nonlinearity::None };

    let mut all_norms: Vec<Vec<f64>> = Vec::new(); // one per run, length depth+1
    let mut ratios = Vec::new();
    let mut diverged_runs = 0usize;
    for s in 0..seeds {
        let cfg = StackConfig {
            depth,
            width,
            kind: weight_kind,
            nonlinearity,
            seed: cli.seed.wrapping_add(s as u64),
        };
        let mut probe_rng = Rng::new(cli.seed.wrapping_add(s as u64)).derive(0xbeef);
        for _ in 0..probes {
            let probe = lab::unit_probe(&mut probe_rng, width);
            let rec = norm_propagation(&cfg, &probe)?;
            ratios.push(rec.norm_ratio());
            if rec.diverged_at.is_some() {
                diverged_runs += 1;
            }
            all_norms.push(rec.layer_norms);
        }
    }

    // per-layer median across runs; diverged runs stop early, so take the
    // median over whatever runs reached each layer
    let mut medians = Vec::with_capacity(depth + 1);
    for layer in 0..=depth {
        let mut vals: Vec<f64> =
            all_norms.iter().filter_map(|n| n.get(layer)).copied().collect();
        if vals.is_empty() {
            break;
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        medians.push(vals[vals.len() / 2]);
    }
    let norms_path = cli.out.join("norms.csv");
    let mut buf = Vec::new();
    lab::write_norms_csv(&mut buf, &medians).expect("vec write");
    write_output(&norms_path, &buf)?;

    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let median_ratio = ratios[ratios.len() / 2];
    println!(
        "final/initial norm ratio: {median_ratio:.6e} (median over {} runs, {} diverged)",
        ratios.len(),
        diverged_runs
    );
    println!("wrote {}", norms_path.display());

    let mut manifest = Manifest::new(cli, "stability");
    manifest.push("depth", depth);
    manifest.push("width", width);
    manifest.push(
        "kind",
        match kind {
            KindArg::Unitary => "unitary",
            KindArg::Gaussian => "gaussian",
            KindArg::GaussianNormalized => "gaussian-normalized",
        },
    );
    manifest.push("std", std);
    manifest.push("relu", relu);
    manifest.push("probes", probes);
    manifest.push("seeds", seeds);
    manifest.push("median_ratio", format!("{median_ratio:.6e}"));
    manifest.push("diverged_runs", diverged_runs);
    manifest.push("output", norms_path.display());
    manifest.write(&cli.out, "stability")?;
    Ok(0)
}

fn make_dataset(which: DatasetArg, samples: usize, seed: u64) -> Dataset {
    match which {
        DatasetArg::Separable2 => dataset::separable_two_class(samples, seed),
        DatasetArg::Patterns10 => dataset::pattern_ten_class(samples, 8, 0.05, seed),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cli: &Cli,
    epochs: usize,
    arch: &str,
    which: DatasetArg,
    samples: usize,
    batch: usize,
    train_fraction: f64,
    lr: Option<f64>,
    momentum: Option<f64>,
    weight_decay: Option<f64>,
    exp_every: usize,
) -> Result<u8, ulie::Error> {
    if arch != "toy6" {
        return usage_error("--arch only knows `toy6`");
    }
    if samples < 2 || batch < 1 || !(0.0..=1.0).contains(&train_fraction) {
        return usage_error("--samples must be >= 2, --batch >= 1, --train-fraction in [0, 1]");
    }
    let data = make_dataset(which, samples, cli.seed);
    let train_count = ((samples as f64) * train_fraction).round().max(1.0) as usize;
    let (train, test) = data.split(train_count.min(samples - 1), cli.seed ^ 0x5eed);

    let mut sgd = SgdConfig::default();
    if let Some(lr) = lr {
        sgd.lr = lr;
    }
    if let Some(m) = momentum {
        sgd.momentum = m;
    }
    if let Some(wd) = weight_decay {
        sgd.weight_decay = wd;
    }

    let mut rng = Rng::new(cli.seed);
    let mut model = Model::unitary(
        &ulie::model::toy6_shapes(1),
        data.classes,
        &mut rng,
        expm_cfg(cli.strict_taylor),
    )?;
    let setup = TrainSetup { epochs, batch_size: batch, seed: cli.seed, exp_every };
    let record = train_toy(&mut model, &train, Some(&test), &sgd, &setup)?;

    let curves_path = cli.out.join("curves.csv");
    let mut buf = Vec::new();
    lab::write_curves_csv(&mut buf, &record.curves).expect("vec write");
    write_output(&curves_path, &buf)?;

    let model_path = cli.out.join("model-lie.ulie");
    let diverged = record.diverged_at.is_some();
    if !diverged {
        store::save_file(&model, StoreMode::LiePacked, &model_path)?;
        println!("wrote {}", model_path.display());
    }
    println!("wrote {}", curves_path.display());
    if let Some(m) = record.final_train {
        println!("final train: loss {:.6} accuracy {:.4}", m.loss, m.accuracy);
    }
    if let Some(m) = record.final_test {
        println!("final test:  loss {:.6} accuracy {:.4}", m.loss, m.accuracy);
    }
    if let Some(epoch) = record.diverged_at {
        println!("DIVERGED at epoch {epoch} (non-finite loss)");
    }

    let mut manifest = Manifest::new(cli, "train");
    manifest.push("epochs", epochs);
    manifest.push("arch", arch);
    manifest.push(
        "dataset",
        match which {
            DatasetArg::Separable2 => "separable2",
            DatasetArg::Patterns10 => "patterns10",
        },
    );
    manifest.push("samples", samples);
    manifest.push("batch", batch);
    manifest.push("train_fraction", train_fraction);
    manifest.push("lr", sgd.lr);
    manifest.push("momentum", sgd.momentum);
    manifest.push("weight_decay", sgd.weight_decay);
    manifest.push("exp_every", exp_every);
    manifest.push_input_hash("dataset", &data.to_bytes());
    manifest.push("output_curves", curves_path.display());
    if !diverged {
        manifest.push("output_model", model_path.display());
    }
    manifest.push("diverged", diverged);
    manifest.write(&cli.out, "train")?;
    Ok(if diverged { DIVERGED_EXIT } else { 0 })
}

fn load_or_build_model(
    cli: &Cli,
    model_path: Option<&Path>,
    in_channels: usize,
    classes: usize,
) -> Result<(Model, Option<Vec<u8>>), ulie::Error> {
    let default_path = cli.out.join("model-lie.ulie");
    let path = model_path.map(Path::to_path_buf).or_else(|| {
        if default_path.exists() {
            Some(default_path)
        } else {
            None
        }
    });
    match path {
        Some(path) => {
            let bytes = fs::read(&path)
                .map_err(|source| ulie::Error::Io { path: path.clone(), source })?;
            let model = store::from_bytes(&bytes)?;
            println!("loaded {}", path.display());
            Ok((model, Some(bytes)))
        }
        None => {
            let mut rng = Rng::new(cli.seed);
            let model = Model::unitary(
                &ulie::model::toy6_shapes(in_channels),
                classes,
                &mut rng,
                expm_cfg(cli.strict_taylor),
            )?;
            println!("no model file found; built a fresh seeded toy6");
            Ok((model, None))
        }
    }
}

fn cmd_bench(
    cli: &Cli,
    model_path: Option<&Path>,
    batch: usize,
    repeats: usize,
    cifar: Option<&Path>,
) -> Result<u8, ulie::Error> {
    if batch < 1 || repeats < 1 {
        return usage_error("--batch and --repeats must be >= 1");
    }
    let (images, in_channels) = match cifar {
        Some(path) => {
            let data = dataset::load_cifar10(path)?;
            if data.len() < batch {
                return usage_error("cifar batch file has fewer images than --batch");
            }
            (data.images.slice_images(0, batch), 3)
        }
        None => (dataset::pattern_ten_class(batch, 8, 0.05, cli.seed).images, 1),
    };
    let (model, input_bytes) = load_or_build_model(cli, model_path, in_channels, 10)?;
    let cached = model.cache_weights()?;
    let mut baseline = cached.clone();
    baseline.norm = NormScheme::PerSampleChannel;

    let variants =
        [("unitary-cached".to_string(), cached), ("conv-channel-norm".to_string(), baseline)];
    let rows = bench_inference(&variants, &images, repeats, cli.threads)?;

    let bench_path = cli.out.join("bench.csv");
    let mut buf = Vec::new();
    lab::write_bench_csv(&mut buf, &rows).expect("vec write");
    write_output(&bench_path, &buf)?;
    for r in &rows {
        println!(
            "{}: median {:.2} us/image (p10 {:.2}, p90 {:.2}, batch {})",
            r.variant, r.median_us, r.p10_us, r.p90_us, r.batch
        );
    }
    if rows[0].median_us <= rows[1].median_us {
        let saved = 100.0 * (1.0 - rows[0].median_us / rows[1].median_us);
        println!("cached unitary inference is {saved:.1}% faster than the normalization baseline");
    } else {
        println!("normalization baseline was faster on this run");
    }
    println!("wrote {}", bench_path.display());

    let mut manifest = Manifest::new(cli, "bench");
    manifest.push("batch", batch);
    manifest.push("repeats", repeats);
    if let Some(bytes) = input_bytes {
        manifest.push_input_hash("model", &bytes);
    }
    for r in &rows {
        manifest.push(&format!("median_us_{}", r.variant), format!("{:.3}", r.median_us));
    }
    manifest.push("output", bench_path.display());
    manifest.write(&cli.out, "bench")?;
    Ok(0)
}

fn cmd_export(
    cli: &Cli,
    mode: ModeArg,
    model_path: Option<&Path>,
    output: Option<&Path>,
) -> Result<u8, ulie::Error> {
    let (model, input_bytes) = load_or_build_model(cli, model_path, 1, 10)?;
    let (store_mode, tag) = match mode {
        ModeArg::Lie => (StoreMode::LiePacked, "lie"),
        ModeArg::Dense => (StoreMode::DenseCached, "dense"),
    };
    let out_path =
        output.map(Path::to_path_buf).unwrap_or_else(|| cli.out.join(format!("model-{tag}.ulie")));
    let bytes = store::to_bytes(&model, store_mode)?;
    write_output(&out_path, &bytes)?;
    println!("wrote {} ({} bytes)", out_path.display(), bytes.len());

    // When the parameters are still available, report the size of both modes.
    let mut reduction = None;
    if model.is_trainable() {
        let lie_len = store::to_bytes(&model, StoreMode::LiePacked)?.len();
        let dense_len = store::to_bytes(&model, StoreMode::DenseCached)?.len();
        let r = 1.0 - lie_len as f64 / dense_len as f64;
        println!(
            "lie-packed {} bytes vs dense-cached {} bytes: {:.1}% reduction",
            lie_len,
            dense_len,
            r * 100.0
        );
        reduction = Some(r);
    }

    let mut manifest = Manifest::new(cli, "export");
    manifest.push("mode", tag);
    if let Some(bytes) = input_bytes {
        manifest.push_input_hash("model", &bytes);
    }
    manifest.push("output", out_path.display());
    manifest.push("output_bytes", bytes.len());
    if let Some(r) = reduction {
        manifest.push("reduction", format!("{:.4}", r));
    }
    manifest.write(&cli.out, "export")?;
    Ok(0)
}

//! Acceptance suite: one test per shipping criterion, each printing a
//! PASS/FAIL line with the measured value against its pinned tolerance.
//! Run with `cargo test -p ulie --test acceptance -- --nocapture`.

use std::time::Instant;

use ulie::dataset::separable_two_class;
use ulie::lab::{
    bench_inference, norm_propagation, train_toy, Nonlinearity, Split, StackConfig, TrainSetup,
    WeightKind,
};
use ulie::lie::{expm, lie_to_skew, packed_len, ExpmConfig, LieParams};
use ulie::matrix::{l2_norm, random_gaussian, Matrix, Tensor4};
use ulie::model::{grad_check, Model, NormScheme};
use ulie::optim::SgdConfig;
use ulie::store::{self, StoreMode};
use ulie::weight::{apply_weight, build_weight, flatten_filters, FilterSpec};
use ulie::{conv, Rng};

fn report(criterion: usize, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("criterion {criterion} ({name}): {status} - {detail}");
}

/// Independent reference exponential: plain term-by-term Taylor summation
/// (no grouped evaluation) with its own scaling-and-squaring.
fn reference_expm(a: &Matrix, degree: usize, threshold: f64) -> Matrix {
    let n = a.rows();
    let norm = a.one_norm();
    let s = if norm > threshold { (norm / threshold).log2().ceil() as i32 } else { 0 };
    let b = a.scale(0.5f64.powi(s));
    let mut sum = Matrix::identity(n);
    let mut term = Matrix::identity(n);
    for step in 1..=degree {
        term = term.matmul(&b).unwrap().scale(1.0 / step as f64);
        sum = sum.add(&term).unwrap();
    }
    for _ in 0..s {
        sum = sum.matmul(&sum).unwrap();
    }
    sum
}

#[test]
fn criterion_1_unitarity() {
    let t0 = Instant::now();
    let cfg = ExpmConfig::default();
    let mut rng = Rng::new(1001);
    let mut max_defect = 0.0f64;
    for &m in &[4usize, 16, 64, 256] {
        for _ in 0..25 {
            let lp = LieParams::random_uniform(&mut rng, m, m, -5.0, 5.0).unwrap();
            let u = expm(&lie_to_skew(&lp), &cfg).unwrap();
            let defect = u.transpose().matmul(&u).unwrap().max_abs_diff(&Matrix::identity(m));
            max_defect = max_defect.max(defect);
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = max_defect < 1e-10 && elapsed < 30.0;
    report(
        1,
        "unitarity",
        pass,
        &format!("max |U^T U - I| = {max_defect:.3e} (tol 1e-10) over 100 draws in {elapsed:.1}s (limit 30s)"),
    );
    assert!(pass);
}

#[test]
fn criterion_2_exponential_oracle() {
    let cfg = ExpmConfig::default();
    let mut rng = Rng::new(1002);
    let mut max_diff = 0.0f64;
    for trial in 0..50 {
        let m = 2 + rng.below(63); // up to 64
        let lp = LieParams::random_uniform(&mut rng, m, m, -2.0, 2.0).unwrap();
        let a = lie_to_skew(&lp);
        let fast = expm(&a, &cfg).unwrap();
        let reference = reference_expm(a.matrix(), 30, 1.0);
        let diff = fast.max_abs_diff(&reference);
        max_diff = max_diff.max(diff);
        assert!(diff < 1e-9, "trial {trial} m={m}: diff {diff:.3e}");
    }
    let pass = max_diff < 1e-9;
    report(
        2,
        "exponential oracle",
        pass,
        &format!("max |grouped_18 - reference_30| = {max_diff:.3e} (tol 1e-9) over 50 skew draws"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_rectangular_norm_contracts() {
    let cfg = ExpmConfig::default();
    let mut rng = Rng::new(1003);
    let mut iso_rel = 0.0f64;
    let mut unit_err = 0.0f64;
    let mut contraction_excess = f64::NEG_INFINITY;
    let mut rows_checked = 0usize;
    while rows_checked < 10_000 {
        let a = 1 + rng.below(24);
        let b = 1 + rng.below(24);
        let (m, k) = (a.max(b), a.min(b).max(1));
        // isometry orientation: fan-in k <= fan-out m
        {
            let spec = FilterSpec::with_custom_mapping(m, 1, 1, k, k, m).unwrap();
            let lp = LieParams::random_uniform(&mut rng, m, k, -3.0, 3.0).unwrap();
            let w = build_weight(&lp, &spec, &cfg).unwrap();
            let x = random_gaussian(&mut rng, 25, k, 1.0).unwrap();
            let y = apply_weight(&w, &x).unwrap();
            for r in 0..y.rows() {
                let rel =
                    (l2_norm(y.row(r)) - l2_norm(x.row(r))).abs() / l2_norm(x.row(r)).max(1e-300);
                iso_rel = iso_rel.max(rel);
            }
        }
        // projection orientation: fan-in m > fan-out k
        if m > k {
            let spec = FilterSpec::with_custom_mapping(k, 1, 1, m, m, k).unwrap();
            let lp = LieParams::random_uniform(&mut rng, m, k, -3.0, 3.0).unwrap();
            let w = build_weight(&lp, &spec, &cfg).unwrap();
            let x = random_gaussian(&mut rng, 25, m, 1.0).unwrap();
            let raw = x.matmul(w.matrix()).unwrap();
            let y = apply_weight(&w, &x).unwrap();
            for r in 0..y.rows() {
                contraction_excess =
                    contraction_excess.max(l2_norm(raw.row(r)) - l2_norm(x.row(r)));
                unit_err = unit_err.max((l2_norm(y.row(r)) - 1.0).abs());
                rows_checked += 1;
            }
        }
    }
    let pass = iso_rel < 1e-10 && unit_err < 1e-12 && contraction_excess <= 1e-12;
    report(
        3,
        "rectangular norm contracts",
        pass,
        &format!(
            "isometry rel {iso_rel:.3e} (tol 1e-10); unit-row err {unit_err:.3e} (tol 1e-12); \
             contraction excess {contraction_excess:.3e} (tol 1e-12) over {rows_checked} rows"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_convolution_equivalence() {
    let mut rng = Rng::new(1004);
    let mut done = 0usize;
    let mut max_diff = 0.0f64;
    while done < 200 {
        let c_in = 1 + rng.below(4);
        let c_out = 1 + rng.below(4);
        let d_h = 1 + rng.below(3);
        let d_w = 1 + rng.below(3);
        let pad = rng.below(2);
        let stride = 1 + rng.below(2);
        let h = d_h + stride * (1 + rng.below(3));
        let w = d_w + stride * (1 + rng.below(3));
        if h > 8 || w > 8 {
            continue;
        }
        let g = match conv::ConvGeometry::new(c_in, h, w, c_out, d_h, d_w, stride, pad) {
            Ok(g) => g,
            Err(_) => continue,
        };
        let n = 1 + rng.below(2);
        let image = Tensor4::from_vec(
            n,
            c_in,
            h,
            w,
            (0..n * c_in * h * w).map(|_| rng.normal()).collect(),
        )
        .unwrap();
        let filters = Tensor4::from_vec(
            c_out,
            c_in,
            d_h,
            d_w,
            (0..c_out * c_in * d_h * d_w).map(|_| rng.normal()).collect(),
        )
        .unwrap();
        let spec = FilterSpec::new(c_out, c_in, d_h, d_w).unwrap();
        let direct = conv::conv_direct(&image, &filters, &g).unwrap();
        let toeplitz = conv::im2col(&image, &g).unwrap();
        let flat = flatten_filters(&filters, &spec).unwrap();
        let product = conv::rows_to_tensor(&toeplitz.mat.matmul(&flat).unwrap(), &g, n).unwrap();
        max_diff = max_diff.max(direct.max_abs_diff(&product));
        done += 1;
    }
    let pass = max_diff < 1e-12;
    report(
        4,
        "convolution equivalence",
        pass,
        &format!("max |toeplitz - direct| = {max_diff:.3e} (tol 1e-12) over 200 geometries"),
    );
    assert!(pass);
}

#[test]
fn criterion_5_gradient_correctness() {
    let mut rng = Rng::new(1005);
    let model = Model::toy6(1, 10, &mut rng).unwrap();
    let batch = Tensor4::from_vec(
        2,
        1,
        4,
        4,
        (0..32).map(|_| rng.normal() * 0.5).collect(),
    )
    .unwrap();
    let labels = vec![3usize, 7];
    let t0 = Instant::now();
    let rep = grad_check(&model, &batch, &labels, 1e-5).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        5,
        "gradient correctness",
        rep.pass,
        &format!(
            "{} parameters checked, max error {:.3e} (tol 1e-5, h=1e-6) in {elapsed:.1}s",
            rep.checked, rep.max_error
        ),
    );
    assert!(rep.pass, "worst offenders: {:?}", &rep.worst[..rep.worst.len().min(3)]);
    assert_eq!(rep.checked, model.param_count());
}

#[test]
fn criterion_6_stability() {
    let t0 = Instant::now();
    // unitary: exact norm preservation over 100 layers
    let probe = ulie::lab::unit_probe(&mut Rng::new(61), 64);
    let unitary = norm_propagation(
        &StackConfig {
            depth: 100,
            width: 64,
            kind: WeightKind::Unitary,
            nonlinearity: Nonlinearity::None,
            seed: 6001,
        },
        &probe,
    )
    .unwrap();
    let max_rel = unitary
        .layer_norms
        .iter()
        .map(|n| (n - unitary.layer_norms[0]).abs() / unitary.layer_norms[0])
        .fold(0.0f64, f64::max);

    // gaussian std 1.0: median ratio over 10 seeds leaves [0.1, 10]
    let mut ratios: Vec<f64> = (0..10)
        .map(|s| {
            let rec = norm_propagation(
                &StackConfig {
                    depth: 100,
                    width: 64,
                    kind: WeightKind::Gaussian { std: 1.0 },
                    nonlinearity: Nonlinearity::None,
                    seed: 7000 + s,
                },
                &probe,
            )
            .unwrap();
            rec.norm_ratio()
        })
        .collect();
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let median = ratios[5];
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = max_rel < 1e-6 && !(0.1..=10.0).contains(&median) && elapsed < 10.0;
    report(
        6,
        "stability",
        pass,
        &format!(
            "unitary max drift {max_rel:.3e} (tol 1e-6); gaussian median ratio {median:.3e} \
             (must leave [0.1, 10]); {elapsed:.1}s (limit 10s)"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_caching_equivalence() {
    // briefly train so the cached model comes from a genuinely trained state
    let data = separable_two_class(32, 71);
    let mut model = Model::toy6(1, 2, &mut Rng::new(1007)).unwrap();
    let sgd = SgdConfig { lr: 0.05, ..Default::default() };
    let setup = TrainSetup { epochs: 3, batch_size: 16, seed: 7, exp_every: 1 };
    train_toy(&mut model, &data, None, &sgd, &setup).unwrap();

    let lie_bytes = store::to_bytes(&model, StoreMode::LiePacked).unwrap();
    let dense_bytes = store::to_bytes(&model, StoreMode::DenseCached).unwrap();
    let lie = store::from_bytes(&lie_bytes).unwrap();
    let dense = store::from_bytes(&dense_bytes).unwrap();

    let batch = data.images.slice_images(0, 8);
    let (a, live_counts) = lie.infer(&batch).unwrap();
    let (b, cached_counts) = dense.infer(&batch).unwrap();
    let identical = a.data() == b.data();
    let pass = identical && cached_counts.expm_calls == 0 && live_counts.expm_calls > 0;
    report(
        7,
        "caching equivalence",
        pass,
        &format!(
            "outputs bit-identical: {identical}; exponentials live={} cached={}",
            live_counts.expm_calls, cached_counts.expm_calls
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_disk_savings() {
    // square 64x64 layer stores 2016 packed vs 4096 dense values
    let packed = packed_len(64, 64);
    let fewer = 1.0 - packed as f64 / 4096.0;

    let model = Model::toy6(1, 10, &mut Rng::new(1008)).unwrap();
    let lie_len = store::to_bytes(&model, StoreMode::LiePacked).unwrap().len();
    let dense_len = store::to_bytes(&model, StoreMode::DenseCached).unwrap().len();
    let reduction = 1.0 - lie_len as f64 / dense_len as f64;

    let pass = packed == 2016 && (fewer - 0.5078125).abs() < 1e-9 && (0.15..=0.50).contains(&reduction);
    report(
        8,
        "disk savings",
        pass,
        &format!(
            "64x64 layer: {packed} vs 4096 values ({:.1}% fewer); toy6 file {lie_len} vs \
             {dense_len} bytes ({:.1}% smaller, band 15-50%)",
            fewer * 100.0,
            reduction * 100.0
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_timing_direction() {
    let model = Model::toy6(1, 10, &mut Rng::new(1009)).unwrap();
    let cached = model.cache_weights().unwrap();
    let mut baseline = cached.clone();
    baseline.norm = NormScheme::PerSampleChannel;
    let batch = ulie::dataset::pattern_ten_class(4, 8, 0.05, 9).images;
    let rows = bench_inference(
        &[("unitary-cached".into(), cached), ("conv-channel-norm".into(), baseline)],
        &batch,
        1000,
        1,
    )
    .unwrap();
    let pass = rows[0].median_us <= rows[1].median_us;
    report(
        9,
        "timing direction",
        pass,
        &format!(
            "cached unitary median {:.2} us/image <= normalization baseline {:.2} us/image \
             over 1000 batches",
            rows[0].median_us, rows[1].median_us
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_toy_learning_smoke() {
    let t0 = Instant::now();
    // three seeds reach 99% train accuracy within 50 epochs
    let mut accuracies = Vec::new();
    for seed in 0..3u64 {
        let data = separable_two_class(64, 100 + seed);
        let mut model = Model::toy6(1, 2, &mut Rng::new(200 + seed)).unwrap();
        let sgd = SgdConfig { lr: 0.05, ..Default::default() };
        let setup = TrainSetup { epochs: 50, batch_size: 16, seed, exp_every: 1 };
        let run = train_toy(&mut model, &data, None, &sgd, &setup).unwrap();
        assert!(run.diverged_at.is_none(), "seed {seed} diverged");
        let best = run
            .curves
            .iter()
            .filter(|p| p.split == Split::Train)
            .map(|p| p.accuracy)
            .fold(0.0f64, f64::max);
        accuracies.push(best);
    }
    let min_acc = accuracies.iter().cloned().fold(1.0f64, f64::min);

    // under lr 0.01 the training loss never increases across the first 10 epochs
    let data = separable_two_class(64, 300);
    let mut model = Model::toy6(1, 2, &mut Rng::new(301)).unwrap();
    let sgd = SgdConfig { lr: 0.01, ..Default::default() };
    let setup = TrainSetup { epochs: 10, batch_size: 64, seed: 3, exp_every: 1 };
    let run = train_toy(&mut model, &data, None, &sgd, &setup).unwrap();
    let losses: Vec<f64> =
        run.curves.iter().filter(|p| p.split == Split::Train).map(|p| p.loss).collect();
    let monotone = losses.windows(2).all(|w| w[1] <= w[0] + 1e-12);

    let elapsed = t0.elapsed().as_secs_f64();
    let pass = min_acc >= 0.99 && monotone && elapsed < 300.0;
    report(
        10,
        "toy learning smoke",
        pass,
        &format!(
            "min train accuracy over 3 seeds {:.3} (need 0.99); lr-0.01 losses non-increasing: \
             {monotone}; {elapsed:.1}s (limit 300s)",
            min_acc
        ),
    );
    assert!(pass, "accuracies {accuracies:?}, losses {losses:?}");
}

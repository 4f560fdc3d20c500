//! Acceptance gate. Every criterion prints one PASS/FAIL line to stderr
//! (bypassing test output capture) and the test fails if any criterion does.
//!
//! Set `LSAMESH_FULL_DATA` to a directory of registered meshes to run the
//! optional full-scale training hook; it never gates.

mod common;

use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use lsamesh::conv::{LsaConvConfig, LsaConvLayer, Weighting};
use lsamesh::harness::{
    generate_synthetic, run_experiment, run_on_dataset, Ablation, Dataset, DatasetSource, ExperimentConfig,
    ExperimentReport, SyntheticSpec,
};
use lsamesh::mesh::{build_neighbor_table, icosahedron, icosphere, NeighborOrder};
use lsamesh::model::{train, TrainOutputs};
use lsamesh::tensor::{finite_difference_check, read_manifest, Tensor};
use lsamesh::{DType, LsaAutoencoder, ModelConfig, Normalizer, SamplingOperator, TrainConfig};

struct Gate {
    failed: Vec<String>,
}

impl Gate {
    fn record(&mut self, id: &str, ok: bool, detail: impl AsRef<str>) {
        let line = format!("{} [{id}] {}", if ok { "PASS" } else { "FAIL" }, detail.as_ref());
        let _ = writeln!(std::io::stderr(), "{line}");
        if !ok {
            self.failed.push(line);
        }
    }
}

fn info(id: &str, detail: impl AsRef<str>) {
    let _ = writeln!(std::io::stderr(), "INFO [{id}] {}", detail.as_ref());
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------------------
// 1. gradient correctness

fn gradient_checks(gate: &mut Gate) {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst: Vec<(&str, f64)> = Vec::new();

    let x = random(&[4, 6], &mut r).map(|v| 3.0 * v);
    let e = finite_difference_check(&[x], 1e-6, |t, v| Ok(t.elu(v[0], 1.0))).unwrap();
    worst.push(("elu", e));

    let (a, b) = (random(&[5, 4], &mut r), random(&[4, 3], &mut r));
    let e = finite_difference_check(&[a, b], 1e-5, |t, v| t.matmul(v[0], v[1])).unwrap();
    worst.push(("matmul", e));

    let table = random_table(7, 4, &mut r);
    let x = random(&[2, 7, 3], &mut r);
    let e = finite_difference_check(std::slice::from_ref(&x), 1e-5, |t, v| t.gather(v[0], &table)).unwrap();
    worst.push(("gather", e));

    let blocks = random(&[2, 7, 4, 3], &mut r);
    let p = random(&[7, 4, 4], &mut r);
    let e = finite_difference_check(&[blocks, p], 1e-5, |t, v| t.soft_permute(v[0], v[1])).unwrap();
    worst.push(("soft_permute", e));

    let layer_check = |layer: &LsaConvLayer, table: &Arc<lsamesh::NeighborTable>, x: &Tensor| {
        let mut inputs: Vec<Tensor> = layer.params().iter().map(|p| p.value.clone()).collect();
        inputs.push(x.clone());
        finite_difference_check(&inputs, 1e-5, |tape, vars| {
            let (params, x) = vars.split_at(vars.len() - 1);
            layer.forward_graph(tape, params, x[0], table)
        })
        .unwrap()
    };
    let full = random_layer(7, LsaConvConfig::new(4, 3, 2).with_activation(ELU, true), &mut r);
    worst.push(("lsa_conv full", layer_check(&full, &table, &x)));
    let fac = random_layer(7, LsaConvConfig::new(4, 3, 2).with_activation(ELU, true).factorized(3), &mut r);
    worst.push(("lsa_conv factorized", layer_check(&fac, &table, &x)));

    let op = SamplingOperator::build(&icosphere(1, 1.0), 4).unwrap();
    let mut e = 0.0f64;
    for m in [Arc::new(op.down.clone()), Arc::new(op.up.clone())] {
        let xs = random(&[2, m.cols(), 2], &mut r);
        e = e.max(finite_difference_check(&[xs], 1e-5, |t, v| t.vertex_map(v[0], &m)).unwrap());
    }
    worst.push(("sampling", e));

    let cfg = ModelConfig {
        latent_dim: 2,
        enc_channels: vec![2; 4],
        dec_channels: vec![2; 4],
        ..Default::default()
    };
    let model = LsaAutoencoder::<f64>::new(cfg, icosahedron(1.0), Normalizer::identity(12), 3).unwrap();
    let mut inputs: Vec<Tensor> = model
        .params()
        .iter()
        .map(|p| p.value.map(|v| v + 0.1 * (v * 17.0).sin()))
        .collect();
    inputs.push(random(&[2, 12, 3], &mut r));
    let e = finite_difference_check(&inputs, 1e-5, |tape, vars| {
        let (params, x) = vars.split_at(vars.len() - 1);
        Ok(model.forward_graph(tape, params, x[0])?.0)
    })
    .unwrap();
    worst.push(("autoencoder (N=12)", e));

    let elapsed = start.elapsed();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let parts: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    gate.record(
        "1 gradients",
        max < 1e-4 && elapsed < Duration::from_secs(60),
        format!("max rel err {max:.2e} < 1e-4 in {:.1}s < 60s ({})", secs(elapsed), parts.join(", ")),
    );
}

// ---------------------------------------------------------------------------
// 2. scalar-loop oracle and factorized/full equivalence

fn oracle_equivalence(gate: &mut Gate) {
    let mut r = rng(202);
    let mut worst = 0.0f64;
    for trial in 0..30 {
        let n = 1 + trial % 10;
        let k = 1 + (trial * 7) % 6;
        let (d_in, d_out) = (1 + trial % 4, 1 + (trial / 3) % 4);
        let inner = trial % 3 != 0;
        let cfg = LsaConvConfig::new(k, d_in, d_out).with_activation(ELU, inner);
        let table = random_table(n, k, &mut r);
        let layer = random_layer(n, cfg, &mut r);
        let x = random(&[2, n, d_in], &mut r);
        let y = layer.forward(&x, &table).unwrap();
        let p = layer.effective_p().unwrap();
        let want = scalar_loop_conv(&x, &table, &p, &layer.w.value, &layer.b.value, &cfg);
        worst = worst.max(max_abs_diff(&y, &want));
    }
    gate.record("2a scalar oracle", worst <= 1e-12, format!("30 random N<=10 layers, max |diff| {worst:.2e} <= 1e-12"));

    let n = 8;
    let k = 5;
    let table = random_table(n, k, &mut r);
    let mut fac = random_layer(n, LsaConvConfig::new(k, 3, 4).factorized(n), &mut r);
    let Weighting::Factorized { v, basis } = &mut fac.weighting else { unreachable!() };
    v.value = Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
    let mut full = LsaConvLayer::new("full", n, LsaConvConfig::new(k, 3, 4), &mut r).unwrap();
    full.weighting = Weighting::Full {
        p: lsamesh::Parameter::new("full.P", basis.value.clone()),
    };
    full.w = fac.w.clone();
    full.b = fac.b.clone();
    let x = random(&[3, n, 3], &mut r);
    let diff = max_abs_diff(&fac.forward(&x, &table).unwrap(), &full.forward(&x, &table).unwrap());
    gate.record("2b factorized B=N, V=I", diff <= 1e-12, format!("max |diff| {diff:.2e} <= 1e-12"));
}

// ---------------------------------------------------------------------------
// 3a. reshuffle equivariance

fn reshuffle_equivariance(gate: &mut Gate) {
    let mut r = rng(303);
    let mesh = icosphere(2, 1.0);
    let n = mesh.num_vertices();
    let mut worst = 0.0f64;
    for k in [3, 7, 9] {
        let base = Arc::new(build_neighbor_table(&mesh, k, NeighborOrder::ByIndex).unwrap());
        let shuffled = Arc::new(build_neighbor_table(&mesh, k, NeighborOrder::SeededShuffle { seed: 5 }).unwrap());
        let layer = random_layer(n, LsaConvConfig::new(k, 3, 4).with_activation(ELU, true), &mut r);
        let p = layer.effective_p().unwrap();
        let mut moved = p.clone();
        for i in 0..n {
            for j in 0..k {
                let src = (0..k).find(|&s| base.raw_row(i)[s] == shuffled.raw_row(i)[j]).unwrap();
                for t in 0..k {
                    moved.data_mut()[(i * k + j) * k + t] = p.data()[(i * k + src) * k + t];
                }
            }
        }
        let mut compensated = layer.clone();
        compensated.weighting = Weighting::Full {
            p: lsamesh::Parameter::new("c.P", moved),
        };
        let x = random(&[2, n, 3], &mut r);
        let a = layer.forward(&x, &base).unwrap();
        let b = compensated.forward(&x, &shuffled).unwrap();
        worst = worst.max(max_abs_diff(&a, &b));
    }
    gate.record("3a reshuffle equivariance", worst <= 1e-12, format!("K in {{3,7,9}} on 162 vertices, max |diff| {worst:.2e} <= 1e-12"));
}

// ---------------------------------------------------------------------------
// 3b, 4, 5. synthetic training runs

const EPOCHS: usize = 30;

/// Two-level model sized for a single desktop core.
fn synthetic_config(cache: &Path) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSource::Synthetic(SyntheticSpec::default()),
        model: ModelConfig {
            sampling_factors: vec![4, 4],
            enc_channels: vec![16, 32],
            dec_channels: vec![32, 16],
            ..Default::default()
        },
        train: TrainConfig {
            lr: 3e-3,
            batch_size: 16,
            epochs: EPOCHS,
            dtype: DType::F64,
            ..Default::default()
        },
        sampling_cache: Some(cache.to_path_buf()),
        ..Default::default()
    }
}

fn synthetic_runs(gate: &mut Gate) {
    let cache = tempfile::tempdir().unwrap();
    let data: Dataset = generate_synthetic(&SyntheticSpec::default()).unwrap();
    assert_eq!((data.num_vertices(), data.train.shape()[0], data.test.shape()[0]), (162, 2000, 200));
    let run = |ablation: Ablation| -> (ExperimentReport, Duration) {
        let cfg = ExperimentConfig {
            ablation,
            ..synthetic_config(cache.path())
        };
        let start = Instant::now();
        let report = run_on_dataset(&cfg, &data).unwrap();
        let elapsed = start.elapsed();
        info(
            "runs",
            format!(
                "{}: test {:.4} mm, best val {:.4} mm at epoch {}, {:.0}s",
                ablation.label(),
                report.test_error_mm,
                report.best_val_error_mm,
                report.best_epoch,
                secs(elapsed)
            ),
        );
        (report, elapsed)
    };

    let (base, base_time) = run(Ablation::None);
    let pca = base.pca_test_error_mm;
    gate.record(
        "4 beats PCA",
        base.test_error_mm < pca && EPOCHS <= 100 && base_time < Duration::from_secs(15 * 60),
        format!(
            "d=8 test {:.4} mm < PCA-8 {pca:.4} mm after {EPOCHS} epochs in {:.0}s < 900s",
            base.test_error_mm,
            secs(base_time)
        ),
    );

    let (shuffled, _) = run(Ablation::Reshuffle { seed: 1 });
    let rel = (shuffled.test_error_mm - base.test_error_mm).abs() / base.test_error_mm;
    gate.record(
        "3b reshuffle ablation",
        rel <= 0.10,
        format!("{:.4} vs {:.4} mm, relative gap {:.1}% <= 10%", shuffled.test_error_mm, base.test_error_mm, 100.0 * rel),
    );

    let (frozen, _) = run(Ablation::NoWeightingMatrix);
    let worse = frozen.test_error_mm / base.test_error_mm - 1.0;
    gate.record(
        "5a frozen identity P",
        worse >= 0.10,
        format!("{:.4} vs {:.4} mm, {:.1}% worse >= 10%", frozen.test_error_mm, base.test_error_mm, 100.0 * worse),
    );

    let (random_init, _) = run(Ablation::RandomInit {
        bound: Ablation::RANDOM_INIT_BOUND,
    });
    gate.record(
        "5b identity beats random init",
        base.test_error_mm < random_init.test_error_mm,
        format!(
            "identity {:.4} mm < U(-{b}, {b}) {:.4} mm at {EPOCHS} epochs",
            base.test_error_mm,
            random_init.test_error_mm,
            b = Ablation::RANDOM_INIT_BOUND
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. parameter accounting

fn parameter_accounting(gate: &mut Gate) {
    let dir = tempfile::tempdir().unwrap();
    let template = icosphere(3, 1.0);
    let n = template.num_vertices();
    let (k, bases) = (9usize, 8usize);
    let full_cfg = ModelConfig {
        sampling_factors: vec![4, 4],
        enc_channels: vec![4, 4],
        dec_channels: vec![4, 4],
        ..Default::default()
    };
    let fac_cfg = ModelConfig {
        factorized_bases: Some(bases),
        ..full_cfg.clone()
    };
    let full = LsaAutoencoder::<f64>::new(full_cfg, template.clone(), Normalizer::identity(n), 1).unwrap();
    let fac = LsaAutoencoder::<f64>::new(fac_cfg, template, Normalizer::identity(n), 1).unwrap();

    // Audit from the saved manifests only.
    let audit = |model: &LsaAutoencoder<f64>, name: &str| -> (Vec<(String, usize)>, usize) {
        let path = dir.path().join(name);
        model.save(&path, None).unwrap();
        let records = read_manifest(&path.join("params.bin")).unwrap();
        let weighting: Vec<(String, usize)> = records
            .iter()
            .filter(|r| r.trainable && [".P", ".V", ".P_b"].iter().any(|s| r.name.ends_with(s)))
            .map(|r| (r.name.clone(), r.shape.iter().product()))
            .collect();
        let trainable = records.iter().filter(|r| r.trainable).map(|r| r.shape.iter().product::<usize>()).sum();
        (weighting, trainable)
    };
    let (full_w, full_total) = audit(&full, "full");
    let (fac_w, fac_total) = audit(&fac, "fac");

    let layers = full.config().conv_layers();
    let mut exact = true;
    for (name, level, _) in &layers {
        let nl = full.level_sizes()[*level];
        let p = full_w.iter().find(|(n, _)| *n == format!("{name}.P")).map(|e| e.1);
        let v = fac_w.iter().find(|(n, _)| *n == format!("{name}.V")).map(|e| e.1);
        let pb = fac_w.iter().find(|(n, _)| *n == format!("{name}.P_b")).map(|e| e.1);
        let (Some(p), Some(v), Some(pb)) = (p, v, pb) else {
            exact = false;
            continue;
        };
        // ratio p / (v + pb) must equal (N K^2) / (N B + B K^2) exactly.
        exact &= p == nl * k * k && v + pb == nl * bases + bases * k * k;
        exact &= p * (nl * bases + bases * k * k) == (v + pb) * (nl * k * k);
    }
    let full_sum: usize = full_w.iter().map(|e| e.1).sum();
    let fac_sum: usize = fac_w.iter().map(|e| e.1).sum();
    let counted = full.parameter_count().weighting == full_sum
        && fac.parameter_count().weighting == fac_sum
        && full.parameter_count().total() == full_total
        && fac.parameter_count().total() == fac_total;
    gate.record(
        "6 factorized reduction",
        exact && counted && layers.len() == 5,
        format!(
            "{} layers on 642 vertices, weighting {full_sum} -> {fac_sum} ({:.2}x), per-layer factors exact, manifest audit matches parameter_count",
            layers.len(),
            full_sum as f64 / fac_sum as f64
        ),
    );

    let reference = ModelConfig {
        latent_dim: 32,
        ..Default::default()
    };
    let count = reference.parameter_count(&reference.nominal_level_sizes(5023)).total();
    info(
        "6 reference size",
        format!(
            "default architecture, d=32 on 5023 vertices: {count} parameters ({:+.2}% vs 1,867K, not gating)",
            100.0 * (count as f64 / 1_867_000.0 - 1.0)
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. sampling validity

fn sampling_validity(gate: &mut Gate) {
    let mut ok = true;
    let mut worst_row = 0.0f64;
    let mut worst_const = 0.0f64;
    let mut sizes = Vec::new();
    for sub in [1u32, 2, 3] {
        let mesh = icosphere(sub, 1.0);
        let n = mesh.num_vertices();
        let op = SamplingOperator::build(&mesh, 4).unwrap();
        let m = op.coarse_vertices();
        sizes.push(format!("{n}->{m}"));
        ok &= m == n.div_ceil(4);
        for row in op.up.to_dense() {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let coarse = Tensor::from_fn(&[1, m, 3], |i| (i as f64 * 0.37).sin());
        let back = op.down.apply(&op.up.apply(&coarse).unwrap()).unwrap();
        ok &= back == coarse;
        let fine: Tensor = Tensor::from_fn(&[1, n, 3], |i| [2.5, -1.0, 0.125][i % 3]);
        let kept = op.down.apply(&fine).unwrap();
        ok &= op.kept.iter().enumerate().all(|(r, &v)| (0..3).all(|c| kept.data()[r * 3 + c] == fine.data()[v * 3 + c]));
        let round = op.up.apply(&kept).unwrap();
        worst_const = worst_const.max(max_abs_diff(&round, &fine));
    }
    gate.record(
        "7 sampling",
        ok && worst_row <= 1e-12 && worst_const <= 1e-12,
        format!(
            "sizes {} = ceil(N/4), U row sums within {worst_row:.1e}, D U exact, constants within {worst_const:.1e}",
            sizes.join(", ")
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. determinism and persistence

fn tiny_experiment(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSource::Synthetic(SyntheticSpec {
            base: lsamesh::harness::BaseShape::Icosphere {
                subdivisions: 1,
                radius: 100.0,
            },
            num_train: 40,
            num_test: 10,
            ..Default::default()
        }),
        model: ModelConfig {
            k: 5,
            enc_channels: vec![4, 4],
            dec_channels: vec![4, 4],
            sampling_factors: vec![4, 4],
            ..Default::default()
        },
        train: TrainConfig {
            epochs: 4,
            batch_size: 8,
            val_size: 8,
            lr: 3e-3,
            ..Default::default()
        },
        output_dir: Some(out.to_path_buf()),
        ..Default::default()
    }
}

fn determinism(gate: &mut Gate) {
    let dir = tempfile::tempdir().unwrap();
    let mut same = true;
    for dtype in [DType::F64, DType::F32] {
        let files: Vec<(Vec<u8>, Vec<u8>)> = ["a", "b"]
            .iter()
            .map(|run| {
                let out = dir.path().join(format!("{dtype:?}-{run}"));
                let mut cfg = tiny_experiment(&out);
                cfg.train.dtype = dtype;
                run_experiment(&cfg).unwrap();
                (std::fs::read(out.join("log.csv")).unwrap(), std::fs::read(out.join("report.json")).unwrap())
            })
            .collect();
        same &= files[0] == files[1] && !files[0].0.is_empty();
    }
    gate.record("8a seeded logs", same, "two seeded runs per dtype give byte-identical log.csv and report.json");

    let data = generate_synthetic(&SyntheticSpec {
        base: lsamesh::harness::BaseShape::Icosphere {
            subdivisions: 1,
            radius: 100.0,
        },
        num_train: 24,
        num_test: 6,
        ..Default::default()
    })
    .unwrap();
    let cfg = tiny_experiment(dir.path());
    let mut exact = true;
    let model_dir = dir.path().join("ckpt");
    let mut model = LsaAutoencoder::<f64>::new(
        cfg.model.clone(),
        data.template.clone(),
        Normalizer::fit(&data.train, cfg.model.std_mode).unwrap(),
        9,
    )
    .unwrap();
    let outputs = TrainOutputs {
        log_csv: None,
        checkpoint_dir: Some(model_dir.clone()),
    };
    train(&mut model, &data.train, &data.test, &cfg.train, &outputs).unwrap();
    let loaded = LsaAutoencoder::<f64>::load(&model_dir).unwrap();
    exact &= model.forward(&data.test).unwrap() == loaded.forward(&data.test).unwrap();
    let f32_model = LsaAutoencoder::<f32>::new(cfg.model.clone(), data.template.clone(), Normalizer::identity(42), 4).unwrap();
    f32_model.save(&dir.path().join("f32"), None).unwrap();
    let f32_loaded = LsaAutoencoder::<f32>::load(&dir.path().join("f32")).unwrap();
    let x = data.test.cast::<f32>();
    exact &= f32_model.forward(&x).unwrap() == f32_loaded.forward(&x).unwrap();
    gate.record("8b checkpoint round trip", exact, "trained f64 and fresh f32 models reload with bit-identical outputs");
}

// ---------------------------------------------------------------------------
// 9. optional full-scale hook

fn full_scale_hook() {
    let Some(dir) = std::env::var_os("LSAMESH_FULL_DATA") else {
        info("9 full scale", "skipped (set LSAMESH_FULL_DATA to a registered mesh directory; not gating)");
        return;
    };
    let cfg = ExperimentConfig {
        dataset: DatasetSource::Path(dir.into()),
        model: ModelConfig {
            latent_dim: 8,
            ..Default::default()
        },
        ..Default::default()
    };
    match run_experiment(&cfg) {
        Ok(r) => info("9 full scale", format!("test {:.4} mm (reference 3.492 / 0.117 mm, not asserted)", r.test_error_mm)),
        Err(e) => info("9 full scale", format!("did not complete: {e}")),
    }
}

#[test]
fn acceptance() {
    let mut gate = Gate { failed: Vec::new() };
    gradient_checks(&mut gate);
    oracle_equivalence(&mut gate);
    reshuffle_equivariance(&mut gate);
    parameter_accounting(&mut gate);
    sampling_validity(&mut gate);
    determinism(&mut gate);
    synthetic_runs(&mut gate);
    full_scale_hook();
    assert!(gate.failed.is_empty(), "failed criteria:\n{}", gate.failed.join("\n"));
}

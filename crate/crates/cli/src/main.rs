use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lsamesh::harness::{
    cached_hierarchy, export_error_map, generate_synthetic, neighbor_size_sweep, run_experiment, stack_meshes, sweep_to_csv,
    Ablation, Dataset, DatasetSource, ExperimentConfig, ExperimentReport,
};
use lsamesh::mesh::{build_neighbor_table, load_mesh, save_mesh, MeshFormat};
use lsamesh::model::{evaluate, read_model_manifest, select_samples, split_validation};
use lsamesh::{DType, Error, LsaAutoencoder, MeshTopology, Real, Tensor};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "lsamesh", version, about = "Mesh autoencoders built on locally structure-aware convolutions")]
struct Cli {
    /// Experiment configuration (JSON); missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed (and the synthetic seed for `synth`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run sweeps sequentially. Every computation is single-threaded, so
    /// results are reproducible with or without this flag.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true, value_enum)]
    dtype: Option<DtypeArg>,
    /// Output directory or file, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationKind {
    Baseline,
    Reshuffle,
    RandomInit,
    NoWeightingMatrix,
}

#[derive(Subcommand)]
enum Command {
    /// Builds neighbor tables and the sampling hierarchy for a template.
    Preprocess {
        /// Template mesh; defaults to the configured dataset's template.
        #[arg(long)]
        mesh: Option<PathBuf>,
    },
    /// Generates the configured synthetic dataset.
    Synth,
    /// Trains the configured model and the PCA baseline.
    Train,
    /// Re-evaluates a trained run on one split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Encodes meshes (a file or a directory) to latent codes (CSV).
    Encode {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        input: PathBuf,
    },
    /// Decodes latent codes (CSV, one code per line) to OBJ meshes.
    Decode {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        latents: PathBuf,
    },
    /// Runs the baseline and the requested ablations on one split.
    Ablate {
        #[arg(long, value_enum, value_delimiter = ',', default_value = "baseline,reshuffle,random-init,no-weighting-matrix")]
        kinds: Vec<AblationKind>,
        #[arg(long, default_value_t = 1)]
        reshuffle_seed: u64,
        #[arg(long, default_value_t = Ablation::RANDOM_INIT_BOUND)]
        init_bound: f64,
    },
    /// Trains one model per neighbor size.
    SweepK {
        #[arg(long, value_delimiter = ',', default_value = "5,7,9,11")]
        ks: Vec<usize>,
        #[arg(long)]
        parallel: bool,
    },
    /// Writes a PLY with the per-vertex error of one reconstructed sample.
    ExportErrors {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Directory written by `train`.
    #[arg(long)]
    run: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.chain().find_map(|c| c.downcast_ref::<Error>()).map_or(1, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).map_err(Error::from).with_context(|| format!("parsing {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
    }
    if let Some(d) = cli.dtype {
        config.train.dtype = match d {
            DtypeArg::F32 => DType::F32,
            DtypeArg::F64 => DType::F64,
        };
    }
    config.model.validate()?;
    config.train.validate()?;
    Ok(config)
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from("runs"))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Preprocess { mesh } => preprocess(cli, mesh.as_deref()),
        Command::Synth => synth(cli),
        Command::Train => train(cli),
        Command::Eval { run, split } => with_model(&run.run, |m| eval(m, &run.run, *split)),
        Command::Encode { run, input } => with_model(&run.run, |m| encode(cli, m, input)),
        Command::Decode { run, latents } => with_model(&run.run, |m| decode(cli, m, latents)),
        Command::Ablate {
            kinds,
            reshuffle_seed,
            init_bound,
        } => ablate(cli, kinds, *reshuffle_seed, *init_bound),
        Command::SweepK { ks, parallel } => sweep(cli, ks, *parallel && !cli.deterministic),
        Command::ExportErrors { run, split, index } => {
            with_model(&run.run, |m| export_errors(cli, m, &run.run, *split, *index))
        }
    }
}

fn preprocess(cli: &Cli, mesh: Option<&Path>) -> anyhow::Result<()> {
    let config = load_config(cli)?;
    let template = match mesh {
        Some(p) => load_mesh(p, None)?,
        None => config.dataset.load()?.template,
    };
    let out = out_dir(cli);
    let factors = &config.model.sampling_factors;
    let ops = cached_hierarchy(&template, factors, &out)?;
    let mut levels: Vec<MeshTopology> = vec![template];
    levels.extend(ops.iter().map(|op| op.coarse.clone()));
    let mut sizes = Vec::new();
    for (i, mesh) in levels.iter().enumerate().take(factors.len()) {
        let table = build_neighbor_table(mesh, config.model.k, config.model.neighbor_order)?;
        table.save(&out.join(format!("neighbors_{i}.bin")))?;
        sizes.push(mesh.num_vertices());
    }
    sizes.push(levels.last().map_or(0, MeshTopology::num_vertices));
    log::info!("level sizes {sizes:?} written to {}", out.display());
    println!("{}", serde_json::to_string(&serde_json::json!({ "level_sizes": sizes }))?);
    Ok(())
}

fn synth(cli: &Cli) -> anyhow::Result<()> {
    let config = load_config(cli)?;
    let DatasetSource::Synthetic(mut spec) = config.dataset else {
        bail!(Error::Config("`synth` needs a synthetic dataset in the configuration".into()));
    };
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let data = generate_synthetic(&spec)?;
    let out = out_dir(cli);
    data.save(&out, Some(serde_json::to_value(&spec)?))?;
    println!("{}", serde_json::to_string(&data.summary(None))?);
    Ok(())
}

fn train(cli: &Cli) -> anyhow::Result<()> {
    let mut config = load_config(cli)?;
    let out = out_dir(cli);
    config.output_dir = Some(out.clone());
    write_json(&out.join("config.json"), &config)?;
    let report = run_experiment(&config)?;
    println!(
        "{}",
        serde_json::json!({
            "test_error_mm": report.test_error_mm,
            "pca_test_error_mm": report.pca_test_error_mm,
            "best_epoch": report.best_epoch,
            "best_val_error_mm": report.best_val_error_mm,
            "parameter_count": report.parameter_count,
        })
    );
    Ok(())
}

/// A loaded model in its stored precision.
enum AnyModel {
    F32(LsaAutoencoder<f32>),
    F64(LsaAutoencoder<f64>),
}

fn with_model(dir: &Path, f: impl FnOnce(AnyModel) -> anyhow::Result<()>) -> anyhow::Result<()> {
    let model_dir = dir.join("model");
    let manifest = read_model_manifest(&model_dir)?;
    let model = match manifest.dtype {
        DType::F32 => AnyModel::F32(LsaAutoencoder::load(&model_dir)?),
        DType::F64 => AnyModel::F64(LsaAutoencoder::load(&model_dir)?),
    };
    f(model)
}

macro_rules! dispatch_model {
    ($m:expr, $f:ident $(, $arg:expr)*) => {
        match $m {
            AnyModel::F32(m) => $f(&m $(, $arg)*),
            AnyModel::F64(m) => $f(&m $(, $arg)*),
        }
    };
}

fn read_run(dir: &Path) -> anyhow::Result<(ExperimentConfig, ExperimentReport)> {
    let read = |name: &str| -> anyhow::Result<String> {
        let p = dir.join(name);
        fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))
    };
    let config: ExperimentConfig = serde_json::from_str(&read("config.json")?).map_err(Error::from)?;
    let report: ExperimentReport = serde_json::from_str(&read("report.json")?).map_err(Error::from)?;
    Ok((config, report))
}

/// Samples of `split`, using the hold-out recorded in the run's report.
fn split_data(dir: &Path, split: Split) -> anyhow::Result<(Dataset, Tensor<f64>, f64, ExperimentConfig)> {
    let (config, report) = read_run(dir)?;
    let data = config.dataset.load()?;
    let s = data.train.shape()[0];
    let tc = &report.train;
    let (train_idx, val_idx) = split_validation(s, tc.val_size.min(s.saturating_sub(2)), tc.seed)?;
    if val_idx != report.val_indices {
        bail!("the dataset no longer reproduces the run's validation split");
    }
    let samples = match split {
        Split::Train => select_samples(&data.train, &train_idx)?,
        Split::Val => select_samples(&data.train, &val_idx)?,
        Split::Test => data.test.clone(),
    };
    Ok((data, samples, report.best_val_error_mm, config))
}

fn eval(model: AnyModel, dir: &Path, split: Split) -> anyhow::Result<()> {
    fn run<T: Real>(m: &LsaAutoencoder<T>, dir: &Path, split: Split) -> anyhow::Result<()> {
        let (_, samples, best_val, config) = split_data(dir, split)?;
        let error = evaluate(m, &samples, config.train.batch_size.max(64))?;
        let name = match split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        println!(
            "{}",
            serde_json::json!({ "split": name, "samples": samples.shape()[0], "error_mm": error, "recorded_best_val_error_mm": best_val })
        );
        Ok(())
    }
    dispatch_model!(model, run, dir, split)
}

fn read_meshes(input: &Path, template: &MeshTopology) -> anyhow::Result<(Vec<PathBuf>, Tensor<f64>)> {
    let files = if input.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && MeshFormat::from_path(p).is_ok())
            .collect();
        files.sort();
        files
    } else {
        vec![input.to_path_buf()]
    };
    if files.is_empty() {
        bail!(Error::Config(format!("no meshes found at {}", input.display())));
    }
    let data = stack_meshes(&files, template)?;
    Ok((files, data))
}

fn encode(cli: &Cli, model: AnyModel, input: &Path) -> anyhow::Result<()> {
    fn run<T: Real>(m: &LsaAutoencoder<T>, input: &Path) -> anyhow::Result<String> {
        let (files, data) = read_meshes(input, m.template())?;
        let z = m.encode(&data.cast::<T>())?.cast::<f64>();
        let d = m.latent_dim();
        let mut csv = String::from("file");
        (0..d).for_each(|j| csv.push_str(&format!(",z{j}")));
        csv.push('\n');
        for (f, row) in files.iter().zip(z.data().chunks(d)) {
            let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            csv.push_str(&name);
            row.iter().for_each(|v| csv.push_str(&format!(",{v}")));
            csv.push('\n');
        }
        Ok(csv)
    }
    let csv = dispatch_model!(model, run, input)?;
    match &cli.out {
        Some(path) => fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

/// Parses latent codes: one per line, comma separated. A leading
/// non-numeric column (as written by `encode`) and a header are skipped.
fn parse_latents(text: &str, d: usize) -> anyhow::Result<Vec<Vec<f64>>> {
    let mut codes = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).filter(|f| !f.is_empty()).collect();
        if fields.is_empty() {
            continue;
        }
        let nums: Vec<f64> = fields.iter().filter_map(|f| f.parse().ok()).collect();
        if nums.is_empty() {
            continue;
        }
        let nums = if nums.len() == d { nums } else { fields[fields.len().saturating_sub(d)..].iter().filter_map(|f| f.parse().ok()).collect() };
        if nums.len() != d {
            bail!(Error::Config(format!("line {}: expected {d} latent values", no + 1)));
        }
        codes.push(nums);
    }
    Ok(codes)
}

fn decode(cli: &Cli, model: AnyModel, latents: &Path) -> anyhow::Result<()> {
    fn run<T: Real>(m: &LsaAutoencoder<T>, latents: &Path, out: &Path) -> anyhow::Result<()> {
        let text = fs::read_to_string(latents).with_context(|| format!("reading {}", latents.display()))?;
        let d = m.latent_dim();
        let codes = parse_latents(&text, d)?;
        let z = Tensor::new(vec![codes.len(), d], codes.concat())?;
        let shapes = m.decode(&z.cast::<T>())?.cast::<f64>();
        fs::create_dir_all(out)?;
        let per = m.num_vertices() * 3;
        for (i, s) in shapes.data().chunks(per).enumerate() {
            let pos: Vec<[f64; 3]> = s.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            let mesh = m.template().clone().with_positions(pos)?;
            save_mesh(&out.join(format!("{i:05}.obj")), &mesh, Some(MeshFormat::Obj))?;
        }
        log::info!("decoded {} meshes into {}", codes.len(), out.display());
        Ok(())
    }
    let out = out_dir(cli);
    dispatch_model!(model, run, latents, &out)
}

fn ablate(cli: &Cli, kinds: &[AblationKind], reshuffle_seed: u64, bound: f64) -> anyhow::Result<()> {
    let base = load_config(cli)?;
    let out = out_dir(cli);
    let data = base.dataset.load()?;
    let mut summary = String::from("ablation,test_error_mm,best_val_error_mm,pca_test_error_mm,parameter_count\n");
    for kind in kinds {
        let ablation = match kind {
            AblationKind::Baseline => Ablation::None,
            AblationKind::Reshuffle => Ablation::Reshuffle { seed: reshuffle_seed },
            AblationKind::RandomInit => Ablation::RandomInit { bound },
            AblationKind::NoWeightingMatrix => Ablation::NoWeightingMatrix,
        };
        let mut config = base.clone();
        config.ablation = ablation;
        let dir = out.join(ablation.label());
        config.output_dir = Some(dir.clone());
        write_json(&dir.join("config.json"), &config)?;
        let r = lsamesh::harness::run_on_dataset(&config, &data)?;
        summary.push_str(&format!(
            "{},{},{},{},{}\n",
            ablation.label(),
            r.test_error_mm,
            r.best_val_error_mm,
            r.pca_test_error_mm,
            r.parameter_count.total
        ));
    }
    fs::create_dir_all(&out)?;
    fs::write(out.join("ablation.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn sweep(cli: &Cli, ks: &[usize], parallel: bool) -> anyhow::Result<()> {
    let mut config = load_config(cli)?;
    config.output_dir = Some(out_dir(cli));
    let rows = neighbor_size_sweep(&config, ks, parallel)?;
    print!("{}", sweep_to_csv(&rows));
    Ok(())
}

fn export_errors(cli: &Cli, model: AnyModel, dir: &Path, split: Split, index: usize) -> anyhow::Result<()> {
    fn run<T: Real>(m: &LsaAutoencoder<T>, dir: &Path, split: Split, index: usize, out: &Path) -> anyhow::Result<()> {
        let (data, samples, _, _) = split_data(dir, split)?;
        if index >= samples.shape()[0] {
            bail!(Error::Config(format!("index {index} outside the {} samples of the split", samples.shape()[0])));
        }
        let truth = select_samples(&samples, &[index])?;
        let pred = m.reconstruct(&truth.cast::<T>(), 1)?.cast::<f64>();
        let errors = export_error_map(&pred, &truth, data.template.faces(), out)?;
        let mean = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
        println!("{}", serde_json::json!({ "path": out, "mean_error_mm": mean, "max_error_mm": errors.iter().copied().fold(0.0, f64::max) }));
        Ok(())
    }
    let out = cli.out.clone().unwrap_or_else(|| dir.join(format!("errors_{index}.ply")));
    dispatch_model!(model, run, dir, split, index, &out)
}

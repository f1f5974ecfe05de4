//! Command-line entry points for desk-scale experiments.
//!
//! Exit codes: 0 success, 2 bad flags or arguments, 3 I/O failure,
//! 4 shape errors, 5 non-finite training loss.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use scatnet::data::synthetic::{gen_synthetic_cyclones, gen_synthetic_storms};
use scatnet::data::{
    load_manifest, load_tensor_file, save_tensor_file, subsample_stratified, subsample_tc, Dataset,
    SplitRole, Task,
};
use scatnet::explain::{channel_disk, integrated_gradients, spatial_map};
use scatnet::filterbank::build_morlet_bank;
use scatnet::model::{batch_from_samples, Model, ModelConfig};
use scatnet::params::GraphBinding;
use scatnet::scattering::{scatter2d, Path as ScatPath};
use scatnet::tensor::graph::Graph;
use scatnet::tensor::Tensor;
use scatnet::training::{evaluate, train, TaskMetrics, TrainConfig};
use scatnet::Error;

#[derive(Parser)]
#[command(name = "scatnet", version, about = "Attention-based scattering network")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Regression,
    Classification,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Regression => Task::Regression,
            TaskArg::Classification => Task::Classification,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackboneArg {
    Scattering,
    Conv,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Ig,
    Attention,
}

#[derive(Subcommand)]
enum Cmd {
    /// Scattering transform of a (C, H, W) tensor file; writes the
    /// coefficients plus a path-table CSV sidecar.
    Scatter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
        scales: u32,
        #[arg(long, default_value_t = 6, value_parser = clap::value_parser!(u32).range(1..))]
        orients: u32,
        /// Also write the filter spectra as a tensor file.
        #[arg(long)]
        dump_filters: Option<PathBuf>,
    },
    /// Train a model on a synthetic dataset (`synthetic:cyclones`,
    /// `synthetic:storms`) or a `path,target` manifest.
    Train {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        data: String,
        /// Training samples drawn by the task's subsampling rule.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
        scales: u32,
        #[arg(long, default_value_t = 6, value_parser = clap::value_parser!(u32).range(1..))]
        orients: u32,
        #[arg(long, value_enum, default_value_t = BackboneArg::Scattering)]
        backbone: BackboneArg,
        #[arg(long)]
        out_ckpt: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; prints metrics and optionally writes them.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: String,
        /// Test samples when generating synthetic data.
        #[arg(long, default_value_t = 400)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        metrics_out: Option<PathBuf>,
    },
    /// Attribution or attention maps for one (C, H, W) input tensor.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(1..))]
        steps: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Format(_) => 3,
        Error::ShapeMismatch { .. } | Error::Dims(_) | Error::NotPowerOfTwo(..) | Error::KindMismatch { .. } => 4,
        Error::NonFiniteLoss { .. } | Error::NonFinite { .. } => 5,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn run(cli: Cli) -> scatnet::Result<()> {
    match cli.cmd {
        Cmd::Scatter { input, out, scales, orients, dump_filters } => {
            cmd_scatter(&input, &out, scales as usize, orients as usize, dump_filters.as_deref())
        }
        Cmd::Train { task, data, n, seed, epochs, batch, lr, scales, orients, backbone, out_ckpt, history } => {
            cmd_train(
                task.into(),
                &data,
                n,
                seed,
                epochs,
                batch,
                lr,
                scales as usize,
                orients as usize,
                backbone,
                &out_ckpt,
                history.as_deref(),
            )
        }
        Cmd::Eval { ckpt, data, n, seed, metrics_out } => cmd_eval(&ckpt, &data, n, seed, metrics_out.as_deref()),
        Cmd::Explain { ckpt, input, method, steps, out } => {
            cmd_explain(&ckpt, &input, method, steps as usize, &out)
        }
    }
}

fn cmd_scatter(input: &Path, out: &Path, scales: usize, orients: usize, dump_filters: Option<&Path>) -> scatnet::Result<()> {
    let x = load_tensor_file(input)?.to_f32();
    let (c, h, w) = match x.dims() {
        [c, h, w] => (*c, *h, *w),
        other => return Err(Error::Dims(format!("scatter input must be (C, H, W), got {other:?}"))),
    };
    let bank = build_morlet_bank::<f32>(scales, orients, h, w)?;
    let batch = x.reshaped(&[1, c, h, w])?;
    let coeffs = scatter2d(&batch, &bank)?;
    let dims = coeffs.values.dims().to_vec();
    let values = coeffs.values.reshaped(&dims[1..])?;
    save_tensor_file(out, &values)?;

    let mut table = String::from("k,order,j1,theta1,j2,theta2\n");
    for (k, p) in coeffs.paths.iter() {
        let (j1, t1, j2, t2) = match p {
            ScatPath::Order0 => (String::new(), String::new(), String::new(), String::new()),
            ScatPath::Order1 { j1, theta1 } => (j1.to_string(), theta1.to_string(), String::new(), String::new()),
            ScatPath::Order2 { j1, theta1, j2, theta2 } => {
                (j1.to_string(), theta1.to_string(), j2.to_string(), theta2.to_string())
            }
        };
        table.push_str(&format!("{k},{},{j1},{t1},{j2},{t2}\n", p.order()));
    }
    let sidecar = out.with_extension("paths.csv");
    let tmp = sidecar.with_extension("paths.csv.tmp");
    std::fs::write(&tmp, table)?;
    std::fs::rename(&tmp, &sidecar)?;

    if let Some(fp) = dump_filters {
        save_tensor_file(fp, &bank.export_spectra())?;
    }
    println!(
        "scatter: {:?} -> {:?} ({} paths), wrote {}",
        &[c, h, w],
        values.dims(),
        coeffs.paths.count(),
        out.display()
    );
    Ok(())
}

/// Derived seeds keep the synthetic train pool, validation and test sets
/// disjoint streams.
fn synth_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
}

fn synthetic_dataset(spec: &str, n: usize, seed: u64) -> scatnet::Result<Option<Dataset>> {
    match spec {
        "synthetic:cyclones" => Ok(Some(gen_synthetic_cyclones(n, seed))),
        "synthetic:storms" => Ok(Some(gen_synthetic_storms(n, seed))),
        s if s.starts_with("synthetic:") => {
            Err(Error::InvalidArgument(format!("unknown synthetic dataset `{s}`")))
        }
        _ => Ok(None),
    }
}

fn subsample_for_task(ds: &Dataset, task: Task, n: usize, seed: u64) -> scatnet::Result<Dataset> {
    match task {
        Task::Regression => subsample_tc(ds, n, seed),
        Task::Classification => subsample_stratified(ds, n, seed),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    task: Task,
    data: &str,
    n: usize,
    seed: u64,
    epochs: usize,
    batch: usize,
    lr: f64,
    scales: usize,
    orients: usize,
    backbone: BackboneArg,
    out_ckpt: &Path,
    history_path: Option<&Path>,
) -> scatnet::Result<()> {
    let (mut train_set, mut val_set) = if let Some(pool) = synthetic_dataset(data, 2 * n, synth_seed(seed, 1))? {
        if task != pool.task {
            return Err(Error::InvalidArgument(format!(
                "--task {} does not match dataset `{data}`",
                task.as_str()
            )));
        }
        let val_n = (n / 5).clamp(32, 512);
        let val = synthetic_dataset(data, val_n, synth_seed(seed, 2))?.expect("same spec").with_role(SplitRole::Val);
        (subsample_for_task(&pool, task, n, seed)?, val)
    } else {
        let full = load_manifest(data, task, SplitRole::Train)?;
        if full.len() < 10 {
            return Err(Error::Dataset(format!("manifest holds only {} samples", full.len())));
        }
        // hold out the last 20% for validation, subsample the rest
        let cut = full.len() - full.len() / 5;
        let train_idx: Vec<usize> = (0..cut).collect();
        let val_idx: Vec<usize> = (cut..full.len()).collect();
        let train_pool = full.subset(&train_idx)?;
        let val = full.subset(&val_idx)?.with_role(SplitRole::Val);
        (subsample_for_task(&train_pool, task, n, seed)?, val)
    };
    let norm = train_set.compute_norm_stats()?.clone();
    val_set.adopt_norm(&norm);

    let (c, h, w) = train_set.input_dims()?;
    let config = ModelConfig::new(task, c, h, w, scales, orients);
    let mut model = match backbone {
        BackboneArg::Scattering => Model::<f32>::new_scattering(config, seed)?,
        BackboneArg::Conv => Model::<f32>::conv_baseline(config, seed)?,
    };
    let mut tc = TrainConfig::new(task);
    tc.epochs = epochs;
    tc.batch_size = batch;
    tc.learning_rate = lr;
    tc.seed = seed;

    eprintln!(
        "training {} on {} (n={}, val={}, {} parameters)",
        match backbone {
            BackboneArg::Scattering => "scattering model",
            BackboneArg::Conv => "conv baseline",
        },
        data,
        train_set.len(),
        val_set.len(),
        model.param_count()
    );
    let history = train(&mut model, &train_set, &val_set, &tc)?;
    model.save_checkpoint(out_ckpt)?;
    if let Some(hp) = history_path {
        history.to_csv(hp)?;
    }
    if let Some(last) = history.epochs.last() {
        println!(
            "trained {} epochs (best {}): train loss {:.6}, val loss {:.6}, val metric {:.4}",
            history.epochs.len(),
            history.best_epoch,
            last.train_loss,
            last.val_loss,
            last.val_metric
        );
    }
    println!("checkpoint: {}", out_ckpt.display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &str, n: usize, seed: u64, metrics_out: Option<&Path>) -> scatnet::Result<()> {
    let mut model = Model::<f32>::load_checkpoint(ckpt)?;
    let mut ds = match synthetic_dataset(data, n, synth_seed(seed, 3))? {
        Some(ds) => ds.with_role(SplitRole::Test),
        None => load_manifest(data, model.config.task, SplitRole::Test)?,
    };
    if ds.task != model.config.task {
        return Err(Error::InvalidArgument("dataset task does not match checkpoint".into()));
    }
    let norm = model
        .data_norm
        .clone()
        .ok_or_else(|| Error::Format("checkpoint carries no normalization statistics".into()))?;
    ds.adopt_norm(&norm);
    let report = evaluate(&mut model, &ds, 32)?;
    let text = match &report.metrics {
        TaskMetrics::Regression(m) => {
            let r2 = m.r2.map(|v| v.to_string()).unwrap_or_else(|| "undefined".into());
            format!("rmse={}\nr2={r2}\nloss={}\n", m.rmse, report.loss)
        }
        TaskMetrics::Classification(m) => {
            format!("accuracy={}\nf1={}\nloss={}\n", m.accuracy, m.f1, report.loss)
        }
    };
    print!("{text}");
    if let Some(mp) = metrics_out {
        let tmp = mp.with_extension("metrics.tmp");
        std::fs::write(&tmp, &text)?;
        std::fs::rename(&tmp, mp)?;
    }
    Ok(())
}

fn cmd_explain(ckpt: &Path, input: &Path, method: MethodArg, steps: usize, out: &Path) -> scatnet::Result<()> {
    let mut model = Model::<f32>::load_checkpoint(ckpt)?;
    let raw = load_tensor_file(input)?.to_f32();
    let cfg = model.config;
    if raw.dims() != [cfg.channels, cfg.height, cfg.width] {
        return Err(Error::ShapeMismatch {
            expected: vec![cfg.channels, cfg.height, cfg.width],
            got: raw.dims().to_vec(),
        });
    }
    let norm = model
        .data_norm
        .clone()
        .ok_or_else(|| Error::Format("checkpoint carries no normalization statistics".into()))?;
    let mut sample = Dataset::new(
        cfg.task,
        SplitRole::Test,
        vec![scatnet::data::Sample { input: raw, target: 0.0, meta: scatnet::data::SampleMeta::None }],
    );
    sample.adopt_norm(&norm);
    let (x, _) = sample.prepared(0)?;
    let x: Tensor<f32> = batch_from_samples::<f32>(&[x])?.reshaped(&[cfg.channels, cfg.height, cfg.width])?;

    match method {
        MethodArg::Ig => {
            let att = integrated_gradients(&mut model, &x, steps)?;
            save_tensor_file(out, &att.scores)?;
            let rel = if att.delta.abs() > 0.0 {
                att.completeness_residual / att.delta.abs()
            } else {
                0.0
            };
            println!(
                "integrated gradients: steps={steps}, delta={:.6}, completeness residual={:.3e} ({:.3}% of |delta|)",
                att.delta,
                att.completeness_residual,
                100.0 * rel
            );
            println!("attribution: {}", out.display());
        }
        MethodArg::Attention => {
            let mut g = Graph::new();
            let bind = GraphBinding::bind_all(&mut g, &model.store)?;
            let leaf = g.leaf(x.reshaped(&[1, cfg.channels, cfg.height, cfg.width])?, false)?;
            let (_, trace) = model.forward(&mut g, &bind, leaf, false)?;
            let maps: scatnet::Result<Vec<Tensor<f32>>> = trace
                .a_s
                .iter()
                .map(|&n| {
                    let t = g.real(n)?;
                    let d = t.dims().to_vec();
                    t.reshaped(&d[1..])
                })
                .collect();
            let overlay = spatial_map(&maps?, cfg.height, cfg.width)?;
            save_tensor_file(out, &overlay)?;
            let gates: scatnet::Result<Vec<Vec<f64>>> = trace
                .a_c
                .iter()
                .map(|&n| Ok(g.real(n)?.data().iter().map(|&v| v as f64).collect()))
                .collect();
            let table = scatnet::scattering::PathTable::new(cfg.scales, cfg.orientations);
            let disk = channel_disk(&gates?, &table)?;
            let disk_path = out.with_extension("disk.csv");
            disk.to_csv(&disk_path)?;
            println!("attention maps: {} (disk: {})", out.display(), disk_path.display());
        }
    }
    Ok(())
}

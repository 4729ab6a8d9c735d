//! Command-line entry points tying the pipeline together: `simulate` writes
//! a dataset, `train` fits a model and writes checkpoints, `eval` scores a
//! checkpoint's charts, `rollout` exports an action-conditioned latent
//! trajectory, and `gradcheck` verifies the analytic gradients of the full
//! loss on a tiny model.
//!
//! One JSON configuration document drives every command; everything that a
//! command writes (datasets, checkpoints, CSVs) is reproducible byte-for-
//! byte from that document and the seeds inside it.
//!
//! Exit codes: 0 success · 2 usage/configuration · 3 I/O or file format ·
//! 4 numerical failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::chartmetrics::{
    chart_report, default_k, pca2_fit, procrustes_align, write_metrics_csv, TrajMetrics,
};
use crate::checkpoint::{build_checkpoint, load_checkpoint, restore_model, save_checkpoint};
use crate::config::{parse_run_config, RunConfig};
use crate::dataset::{read_dataset, write_dataset, Dataset};
use crate::encoder::{encoder_forward, EncoderConfig};
use crate::error::{DataError, MetricsError, ModelError, SimError};
use crate::gradcheck::{grad_check, GradCheckConfig};
use crate::graph::{Graph, NodeId};
use crate::losses::{loss_total, LossWeights, RolloutNodes};
use crate::model::{ModelConfig, WorldModel};
use crate::params::{bind_params, collect_grads, ParamKind};
use crate::predictor::{rollout_forward, PredictorConfig, PredictorKind};
use crate::preprocess::{to_model_input, truncate_delay};
use crate::rng::{derive_seed, stream};
use crate::sim::generate_trajectory;
use crate::tensor::Tensor;
use crate::trainer::{train_from, write_log_csv, TrainResume};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// A command failure carrying its process exit code.
#[derive(Debug)]
pub struct CmdError {
    pub code: i32,
    pub message: String,
}

impl CmdError {
    fn usage(message: impl Into<String>) -> Self {
        CmdError { code: EXIT_USAGE, message: message.into() }
    }

    fn io(message: impl Into<String>) -> Self {
        CmdError { code: EXIT_IO, message: message.into() }
    }
}

impl From<DataError> for CmdError {
    fn from(e: DataError) -> Self {
        let code = match &e {
            DataError::Config(_) | DataError::Json(_) => EXIT_USAGE,
            DataError::NonFinite { .. } => EXIT_NUMERIC,
            _ => EXIT_IO,
        };
        CmdError { code, message: e.to_string() }
    }
}

impl From<ModelError> for CmdError {
    fn from(e: ModelError) -> Self {
        let code = match &e {
            ModelError::NonFiniteLoss { .. } | ModelError::Numerics(_) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        CmdError { code, message: e.to_string() }
    }
}

impl From<SimError> for CmdError {
    fn from(e: SimError) -> Self {
        CmdError { code: EXIT_USAGE, message: e.to_string() }
    }
}

impl From<MetricsError> for CmdError {
    fn from(e: MetricsError) -> Self {
        let code = match &e {
            MetricsError::Degenerate { .. } => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        CmdError { code, message: e.to_string() }
    }
}

#[derive(Parser)]
#[command(
    name = "chartwm",
    about = "Self-supervised radio charting with matrix-exponential latent dynamics",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a trajectory dataset from the configured scene.
    Simulate(SimulateArgs),
    /// Train a world model and write per-epoch checkpoints plus a loss log.
    Train(TrainArgs),
    /// Score a checkpoint's latent charts against ground-truth positions.
    Eval(EvalArgs),
    /// Export an action-conditioned latent rollout as CSV.
    Rollout(RolloutArgs),
    /// Verify analytic gradients of the full loss against central
    /// differences on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Configuration document (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output dataset path.
    #[arg(long)]
    out: PathBuf,
    /// Number of trajectories.
    #[arg(long, default_value_t = 64)]
    trajectories: usize,
    /// Transitions per trajectory (each yields T+1 snapshots).
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Master seed; defaults to the config's data_seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Configuration document (JSON). Required unless --resume is given.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset.
    #[arg(long)]
    data: PathBuf,
    /// Directory for checkpoints and the loss log.
    #[arg(long)]
    out_dir: PathBuf,
    /// Override the predictor family from the config.
    #[arg(long, value_parser = parse_predictor)]
    predictor: Option<PredictorKind>,
    /// Comma-separated loss components to disable (tf, roll, var, cov, idm).
    #[arg(long)]
    ablate: Option<String>,
    /// Continue a run from this checkpoint (uses its embedded config; the
    /// log covers only the new steps).
    #[arg(long, conflicts_with_all = ["config", "predictor", "ablate"])]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    /// Held-out dataset.
    #[arg(long)]
    data: PathBuf,
    /// Output metrics CSV.
    #[arg(long)]
    out: PathBuf,
    /// Neighborhood size override for trustworthiness/continuity.
    #[arg(long)]
    k: Option<usize>,
    /// Histogram resolution override for the Rajski distance.
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Trajectory index.
    #[arg(long)]
    traj: usize,
    /// Start snapshot.
    #[arg(long, default_value_t = 0)]
    start: usize,
    /// Rollout steps (actions taken from the recorded trajectory).
    #[arg(long)]
    horizon: usize,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Optional configuration document; its model section must stay tiny
    /// (latent dimension at most 8).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Negative control: negate the analytic gradient of this parameter so
    /// the check must fail.
    #[arg(long)]
    corrupt: Option<String>,
}

fn parse_predictor(s: &str) -> Result<PredictorKind, String> {
    match s {
        "homomorphic" => Ok(PredictorKind::Homomorphic),
        "mlp" => Ok(PredictorKind::Mlp),
        "film" => Ok(PredictorKind::Film),
        "gru" => Ok(PredictorKind::Gru),
        other => Err(format!("unknown predictor {other} (homomorphic|mlp|film|gru)")),
    }
}

/// Parse and run from process arguments; returns the exit code.
pub fn run_from_env() -> i32 {
    run(std::env::args_os())
}

/// Run with explicit arguments (first element is the program name).
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with success status.
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Rollout(a) => cmd_rollout(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig, CmdError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CmdError::io(format!("cannot read config {}: {e}", path.display())))?;
    let cfg = parse_run_config(&text)
        .map_err(|e| CmdError::usage(format!("config {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), CmdError> {
    let cfg = load_config(&args.config)?;
    if args.trajectories == 0 || args.steps == 0 {
        return Err(CmdError::usage("need at least 1 trajectory and 1 step"));
    }
    let seed = args.seed.unwrap_or(cfg.data_seed);
    let mut trajectories = Vec::with_capacity(args.trajectories);
    for i in 0..args.trajectories {
        let traj_seed = derive_seed(seed, "trajectory", i as u64);
        let traj = generate_trajectory(&cfg.scene, &cfg.motion, args.steps, traj_seed)?;
        let path_len: f64 = traj
            .snapshots
            .windows(2)
            .map(|w| {
                let (a, b) = (&w[0].pos, &w[1].pos);
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
            })
            .sum();
        let duration = traj.snapshots.last().unwrap().t - traj.snapshots[0].t;
        println!(
            "traj {i}: T={} path_len={:.2}m mean_speed={:.2}m/s",
            args.steps,
            path_len,
            if duration > 0.0 { path_len / duration } else { 0.0 }
        );
        trajectories.push(traj);
    }
    let ds = Dataset { b: cfg.scene.b, m: cfg.scene.m, n_sub: cfg.scene.n_sub, trajectories };
    write_dataset(&ds, &args.out)
        .map_err(|e| CmdError::io(format!("writing {}: {e}", args.out.display())))?;
    println!("wrote {} trajectories to {}", args.trajectories, args.out.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), CmdError> {
    let dataset = read_dataset(&args.data)?;
    let (config, mut model, resume) = match &args.resume {
        Some(path) => {
            let restored = restore_model(&load_checkpoint(path)?)?;
            let (enc_state, dyn_state) = restored.opt.ok_or_else(|| {
                CmdError::usage(format!(
                    "{} carries no optimizer state and cannot seed a resumed run",
                    path.display()
                ))
            })?;
            let resume = TrainResume {
                start_step: restored.global_step as usize,
                enc_state,
                dyn_state,
            };
            (restored.config, restored.model, Some(resume))
        }
        None => {
            let path = args.config.as_ref().ok_or_else(|| {
                CmdError::usage("either --config or --resume is required")
            })?;
            let mut config = load_config(path)?;
            if let Some(kind) = args.predictor {
                config.model.predictor.kind = kind;
            }
            if let Some(list) = &args.ablate {
                apply_ablation(&mut config.train.toggles, list)?;
            }
            let model = WorldModel::new(config.model.clone(), config.model_seed)?;
            (config, model, None)
        }
    };

    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CmdError::io(format!("creating {}: {e}", args.out_dir.display())))?;
    let config_json = config.to_json();
    let out_dir = args.out_dir.clone();
    let log = train_from(
        &mut model,
        &dataset,
        &config.preproc,
        &config.train,
        &config.weights,
        resume,
        |end| {
            let ckpt = build_checkpoint(
                &config_json,
                end.model,
                end.global_step as u64,
                Some((end.enc_state, end.dyn_state)),
            )
            .map_err(|e| ModelError::InvalidConfig {
                field: "checkpoint".into(),
                reason: e.to_string(),
            })?;
            let io_err = |e: DataError| ModelError::InvalidConfig {
                field: "checkpoint write".into(),
                reason: e.to_string(),
            };
            save_checkpoint(&out_dir.join(format!("epoch_{:04}.ckpt", end.epoch)), &ckpt)
                .map_err(io_err)?;
            save_checkpoint(&out_dir.join("final.ckpt"), &ckpt).map_err(io_err)?;
            write_log_csv(&out_dir.join("log.csv"), end.log).map_err(io_err)?;
            let last = end.log.last().expect("an epoch has at least one step");
            println!(
                "epoch {} step {} total {:.5} (tf {:.5} roll {:.5} var {:.5} cov {:.5} idm {:.5})",
                end.epoch,
                last.step,
                last.loss.total,
                last.loss.tf,
                last.loss.roll,
                last.loss.var,
                last.loss.cov,
                last.loss.idm
            );
            Ok(())
        },
    )?;
    println!("trained {} steps; artifacts in {}", log.len(), args.out_dir.display());
    Ok(())
}

fn apply_ablation(
    toggles: &mut crate::trainer::LossToggles,
    list: &str,
) -> Result<(), CmdError> {
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match name {
            "tf" => toggles.tf = false,
            "roll" => toggles.roll = false,
            "var" => toggles.var = false,
            "cov" => toggles.cov = false,
            "idm" => toggles.idm = false,
            other => {
                return Err(CmdError::usage(format!(
                    "unknown loss component {other} (tf|roll|var|cov|idm)"
                )))
            }
        }
    }
    Ok(())
}

/// Preprocess one trajectory into a stacked (n, 2, rows, taps) model input.
fn trajectory_input(
    ds: &Dataset,
    traj: usize,
    l_taps: usize,
) -> Result<Tensor, CmdError> {
    let rows = ds.b * ds.m;
    let tr = &ds.trajectories[traj];
    let n = tr.snapshots.len();
    let plane = 2 * rows * l_taps;
    let mut x = Tensor::zeros(&[n, 2, rows, l_taps]);
    for (i, snap) in tr.snapshots.iter().enumerate() {
        let taps = truncate_delay(&snap.h, rows, ds.n_sub, l_taps)?;
        let t = to_model_input(&taps, rows, l_taps);
        x.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(t.data());
    }
    Ok(x)
}

fn check_geometry(config: &RunConfig, ds: &Dataset) -> Result<(), CmdError> {
    if ds.b * ds.m != config.model.in_rows || ds.n_sub < config.preproc.l_taps {
        return Err(CmdError::usage(format!(
            "dataset geometry (b={} m={} n_sub={}) does not match the checkpoint's model \
             (in_rows={} l_taps={})",
            ds.b, ds.m, ds.n_sub, config.model.in_rows, config.preproc.l_taps
        )));
    }
    Ok(())
}

fn positions_xy(ds: &Dataset, traj: usize) -> Tensor {
    let tr = &ds.trajectories[traj];
    let n = tr.snapshots.len();
    let mut x = Tensor::zeros(&[n, 2]);
    for (i, s) in tr.snapshots.iter().enumerate() {
        x.set2(i, 0, s.pos[0]);
        x.set2(i, 1, s.pos[1]);
    }
    x
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CmdError> {
    let restored = restore_model(&load_checkpoint(&args.ckpt)?)?;
    let dataset = read_dataset(&args.data)?;
    check_geometry(&restored.config, &dataset)?;
    let bins = args.bins.unwrap_or(restored.config.eval.bins);

    let mut rows = Vec::new();
    for ti in 0..dataset.trajectories.len() {
        let x = trajectory_input(&dataset, ti, restored.config.preproc.l_taps)?;
        let z = restored.model.encode_eval(&x, true)?;
        let gt = positions_xy(&dataset, ti);
        let n = dataset.trajectories[ti].snapshots.len();
        let k = args.k.or(restored.config.eval.k).unwrap_or_else(|| default_k(n));
        let report = chart_report(&gt, &z, k, bins)?;
        println!(
            "traj {ti}: n={n} tw={:.4} ct={:.4} ks={:.4} rd={:.4}",
            report.tw, report.ct, report.ks, report.rd
        );
        rows.push(TrajMetrics { traj_id: ti, n, report });
    }
    write_metrics_csv(&args.out, &rows)
        .map_err(|e| CmdError::io(format!("writing {}: {e}", args.out.display())))?;
    let mean = |f: fn(&TrajMetrics) -> f64| -> f64 {
        rows.iter().map(f).sum::<f64>() / rows.len() as f64
    };
    println!(
        "mean over {} trajectories: tw={:.4} ct={:.4} ks={:.4} rd={:.4} -> {}",
        rows.len(),
        mean(|r| r.report.tw),
        mean(|r| r.report.ct),
        mean(|r| r.report.ks),
        mean(|r| r.report.rd),
        args.out.display()
    );
    Ok(())
}

fn cmd_rollout(args: &RolloutArgs) -> Result<(), CmdError> {
    let restored = restore_model(&load_checkpoint(&args.ckpt)?)?;
    let dataset = read_dataset(&args.data)?;
    check_geometry(&restored.config, &dataset)?;
    if args.traj >= dataset.trajectories.len() {
        return Err(CmdError::usage(format!(
            "trajectory {} out of range ({} in dataset)",
            args.traj,
            dataset.trajectories.len()
        )));
    }
    let tr = &dataset.trajectories[args.traj];
    let available = tr.actions.len().saturating_sub(args.start);
    if args.start >= tr.snapshots.len() || args.horizon > available {
        return Err(ModelError::HorizonOverrun { horizon: args.horizon, available }.into());
    }

    // Chart frame from the full trajectory: encode everything with the EMA
    // encoder, fit the 2-D projection, and align it onto ground truth. The
    // rollout itself sees only the starting snapshot — the frame is for
    // rendering its predictions in world coordinates.
    let x_all = trajectory_input(&dataset, args.traj, restored.config.preproc.l_taps)?;
    let z_all = restored.model.encode_eval(&x_all, true)?;
    let basis = pca2_fit(&z_all)?;
    let gt_xy = positions_xy(&dataset, args.traj);
    let (_, transform, _) = procrustes_align(&basis.project(&z_all), &gt_xy)?;

    let d = restored.config.model.latent_dim();
    let plane_len = x_all.data().len() / tr.snapshots.len();
    let x0 = Tensor::from_vec(
        &[1, 2, restored.config.model.in_rows, restored.config.model.in_taps],
        x_all.data()[args.start * plane_len..(args.start + 1) * plane_len].to_vec(),
    );
    let z0 = restored.model.encode_eval(&x0, true)?;
    let actions: Vec<[f64; 2]> = tr.actions[args.start..args.start + args.horizon].to_vec();
    let preds = restored.model.rollout_latent(z0.data(), &actions)?;

    let mut csv = String::from("step");
    for j in 0..d {
        csv.push_str(&format!(",latent_{j}"));
    }
    csv.push_str(",pca_x,pca_y,aligned_x,aligned_y,gt_x,gt_y,gt_z,gap\n");
    for step in 0..=args.horizon {
        let latent: Vec<f64> = if step == 0 {
            z0.data().to_vec()
        } else {
            let row = (step - 1) * d;
            preds.data()[row..row + d].to_vec()
        };
        let pca = basis.project_row(&latent);
        let aligned = transform.apply(pca);
        let pos = tr.snapshots[args.start + step].pos;
        let gap = ((aligned[0] - pos[0]).powi(2) + (aligned[1] - pos[1]).powi(2)).sqrt();
        csv.push_str(&step.to_string());
        for v in &latent {
            csv.push_str(&format!(",{v:.6e}"));
        }
        csv.push_str(&format!(
            ",{:.6},{:.6},{:.6},{:.6},{:.4},{:.4},{:.4},{:.6}\n",
            pca[0], pca[1], aligned[0], aligned[1], pos[0], pos[1], pos[2], gap
        ));
    }
    crate::dataset::atomic_write(&args.out, csv.as_bytes())
        .map_err(|e| CmdError::io(format!("writing {}: {e}", args.out.display())))?;
    println!(
        "rolled out {} steps of trajectory {} from snapshot {} -> {}",
        args.horizon,
        args.traj,
        args.start,
        args.out.display()
    );
    Ok(())
}

/// The fixed probe geometry for gradient checking: a small but complete
/// model driving all five losses through a 3-step rollout of 2 segments.
pub const GRADCHECK_HORIZON: usize = 3;
pub const GRADCHECK_BATCH: usize = 2;

fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            depths: vec![1],
            channels: vec![4],
            latent_dim: 4,
            ..EncoderConfig::default()
        },
        predictor: PredictorConfig { kind: PredictorKind::Homomorphic, hidden: 8 },
        idm_hidden: 8,
        in_rows: 4,
        in_taps: 8,
    }
}

/// Build the full-loss gradient check on a tiny model and run it. Exposed
/// for the test suites; the `gradcheck` subcommand is a thin wrapper.
pub fn run_gradcheck(
    model_cfg: &ModelConfig,
    tolerance: f64,
    corrupt: Option<String>,
) -> Result<crate::gradcheck::GradReport, CmdError> {
    model_cfg.validate()?;
    if model_cfg.latent_dim() > 8 {
        return Err(CmdError::usage(format!(
            "gradient checking wants a tiny model: latent dimension {} > 8",
            model_cfg.latent_dim()
        )));
    }
    let model = WorldModel::new(model_cfg.clone(), 99)?;
    let (h, k) = (GRADCHECK_HORIZON, GRADCHECK_BATCH);
    let mut x_on = Tensor::zeros(&[(h + 1) * k, 2, model_cfg.in_rows, model_cfg.in_taps]);
    x_on.fill_normal(&mut stream(1234, "gradcheck-x", 0), 1.0);
    let mut x_tg = x_on.clone();
    // Mild corruption stands in for masking so the two branches differ.
    x_tg.fill_normal(&mut stream(1234, "gradcheck-t", 0), 1.0);
    let mut action_data = Vec::new();
    for j in 0..h {
        let mut a = Tensor::zeros(&[k, 2]);
        a.fill_uniform(&mut stream(1234, "gradcheck-a", j as u64), -1.0, 1.0);
        action_data.push(a);
    }

    let mut params: Vec<(String, Tensor)> = Vec::new();
    for (name, t, kind) in model.online.iter() {
        if kind != ParamKind::Buffer {
            params.push((format!("online.{name}"), t.clone()));
        }
    }
    for (name, t, _) in model.dynamics.iter() {
        params.push((format!("dynamics.{name}"), t.clone()));
    }

    let enc_cfg = model_cfg.encoder.clone();
    let pred_cfg = model_cfg.predictor.clone();
    let d = model_cfg.latent_dim();
    let weights = LossWeights::default();
    let builder = move |probe: &[(String, Tensor)]| -> (f64, Vec<(String, Tensor)>) {
        let mut online = model.online.clone();
        let mut dynamics = model.dynamics.clone();
        for (name, t) in probe {
            if let Some(rest) = name.strip_prefix("online.") {
                online.get_mut(rest).data_mut().copy_from_slice(t.data());
            } else if let Some(rest) = name.strip_prefix("dynamics.") {
                dynamics.get_mut(rest).data_mut().copy_from_slice(t.data());
            }
        }
        let mut g = Graph::new();
        let on_bound = bind_params(&mut g, &online, true);
        let tg_bound = bind_params(&mut g, &model.target, false);
        let dyn_bound = bind_params(&mut g, &dynamics, true);
        let idm_bound = bind_params(&mut g, &model.idm, false);
        let xo = g.constant(x_on.clone());
        let xt = g.constant(x_tg.clone());
        let enc_on = encoder_forward(&mut g, &enc_cfg, &online, &on_bound, "enc", xo, true);
        let enc_tg = encoder_forward(&mut g, &enc_cfg, &model.target, &tg_bound, "enc", xt, true);
        let online_slices: Vec<NodeId> =
            (0..=h).map(|t| g.slice_rows(enc_on.latent, t * k, k)).collect();
        let target_slices: Vec<NodeId> =
            (0..=h).map(|t| g.slice_rows(enc_tg.latent, t * k, k)).collect();
        let action_nodes: Vec<NodeId> =
            action_data.iter().map(|a| g.constant(a.clone())).collect();
        let pred = rollout_forward(
            &mut g,
            &pred_cfg,
            &dyn_bound,
            "dyn",
            d,
            online_slices[0],
            &action_nodes,
        );
        let nodes = RolloutNodes {
            pred,
            target: target_slices,
            online: online_slices,
            actions: action_nodes,
        };
        let ln = loss_total(&mut g, &nodes, &weights, &idm_bound, false)
            .expect("gradcheck loss graph must build");
        let grads = g.backward(ln.total).expect("gradcheck backward must run");
        let mut out = Vec::new();
        for (name, grad) in collect_grads(&g, &grads, &online, &on_bound) {
            out.push((format!("online.{name}"), grad));
        }
        for (name, grad) in collect_grads(&g, &grads, &dynamics, &dyn_bound) {
            out.push((format!("dynamics.{name}"), grad));
        }
        (g.value(ln.total).item(), out)
    };

    let cfg = GradCheckConfig { tolerance, corrupt, ..GradCheckConfig::default() };
    let report = grad_check(&params, &builder, &cfg)
        .map_err(|e| CmdError { code: EXIT_NUMERIC, message: e.to_string() })?;
    Ok(report)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), CmdError> {
    let model_cfg = match &args.config {
        Some(path) => load_config(path)?.model,
        None => gradcheck_model_config(),
    };
    let report = run_gradcheck(&model_cfg, args.tolerance, args.corrupt.clone())?;
    println!(
        "{} probes, max relative error {:.3e} (worst: {}), tolerance {:.1e}: {}",
        report.probes,
        report.max_rel_err,
        report.worst,
        report.tolerance,
        if report.pass { "PASS" } else { "FAIL" }
    );
    if report.pass {
        Ok(())
    } else {
        Err(CmdError {
            code: EXIT_NUMERIC,
            message: format!(
                "analytic gradients disagree with central differences ({:.3e} > {:.1e})",
                report.max_rel_err, report.tolerance
            ),
        })
    }
}

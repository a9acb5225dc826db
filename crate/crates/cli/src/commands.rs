use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context};
use log::{debug, info};
use sft_core::data::{gen_majority_task, Dataset};
use sft_core::decompose::{decompose_ffn, decomposed_skeleton, reconstruction_error, ResidualMode, SplitPlan};
use sft_core::nn::{build_model, names, read_checkpoint, write_checkpoint, LayerStack, ModelConfig};
use sft_core::perfmodel::{breakeven_bandwidth, comm_volume, estimate as estimate_mode, format_bytes, Breakeven, Mode, PerfParams};
use sft_core::splitnet::{
    evaluate, run_cloud, run_edge, run_local, run_split_loopback, session_config, split_for, tail_accuracy,
    write_metrics_csv, SplitPoint, TrainMetrics, TrainOptions,
};
use sft_core::tensor::{Matrix, Rng};
use sft_core::wire::{self, Conn, Role, Throttle, WireError};

use crate::config::{Settings, MODEL_KEYS, OPTIM_KEYS, PLAN_KEYS};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_CONNECT: u8 = 3;
pub const EXIT_TRAIN: u8 = 4;

/// An error together with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn config(error: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_CONFIG, error: error.into() }
    }

    pub fn train(error: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_TRAIN, error: error.into() }
    }

    /// Training-time error; a refused handshake counts as configuration.
    fn from_run(error: sft_core::Error) -> Self {
        match error {
            sft_core::Error::Wire(WireError::Rejected { .. }) => Self::config(error),
            other => Self::train(other),
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

trait OrExit<T> {
    fn or_exit(self, code: u8) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for Result<T, E> {
    fn or_exit(self, code: u8) -> Outcome<T> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

const TRAIN_KEYS: &[&str] = &[
    "role",
    "decompose",
    "iterations",
    "batch_size",
    "seed",
    "data_seed",
    "data_size",
    "data_path",
    "peer",
    "listen",
    "connect_timeout_ms",
    "bandwidth_bps",
    "metrics_out",
    "checkpoint_out",
    "checkpoint_in",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RunRole {
    Local,
    Loopback,
    Edge,
    Cloud,
}

impl std::str::FromStr for RunRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "local" => Ok(RunRole::Local),
            "loopback" => Ok(RunRole::Loopback),
            "edge" => Ok(RunRole::Edge),
            "cloud" => Ok(RunRole::Cloud),
            _ => Err("expected local, loopback, edge or cloud".into()),
        }
    }
}

/// `None` when the key is set to an empty string.
fn output_path(s: &Settings, key: &str, default: &str) -> anyhow::Result<Option<String>> {
    let v = s.get(key, default.to_owned())?;
    Ok((!v.is_empty()).then_some(v))
}

fn load_dataset(s: &Settings, cfg: &ModelConfig) -> anyhow::Result<Dataset> {
    let data = match s.raw("data_path") {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("opening {p}"))?;
            Dataset::read_csv(BufReader::new(f)).with_context(|| format!("reading {p}"))?
        }
        None => gen_majority_task(s.get("data_size", 2048usize)?, cfg, s.get("data_seed", 0u64)?)?,
    };
    data.validate(cfg)?;
    Ok(data)
}

fn read_entries(path: &str) -> anyhow::Result<Vec<(String, Matrix)>> {
    let f = File::open(path).with_context(|| format!("opening {path}"))?;
    read_checkpoint(BufReader::new(f)).with_context(|| format!("reading {path}"))
}

fn save_checkpoint(path: &str, stack: &LayerStack) -> anyhow::Result<()> {
    let f = File::create(path).with_context(|| format!("creating {path}"))?;
    write_checkpoint(BufWriter::new(f), stack.named_params())?;
    Ok(())
}

/// The model prepared for `point`: built from `seed`, optionally loaded from
/// a checkpoint (plain or already decomposed), then decomposed if needed.
fn load_model(s: &Settings, cfg: &ModelConfig, point: Option<SplitPoint>) -> anyhow::Result<LayerStack> {
    let base = build_model(cfg, s.get("seed", 0u64)?)?;
    let plan = match point {
        Some(SplitPoint::Decomposed(p)) => Some(p),
        _ => None,
    };
    let Some(path) = s.raw("checkpoint_in") else {
        return Ok(match plan {
            Some(p) => decompose_ffn(&base, &p)?,
            None => base,
        });
    };
    let entries = read_entries(path)?;
    let prefix = plan.map(|p| format!("{}.", names::ffn1(p.split_layer)));
    let already = prefix.as_ref().is_some_and(|pre| entries.iter().any(|(n, _)| n.starts_with(pre)));
    if already {
        let mut stack = decomposed_skeleton(&base, plan.as_ref().expect("prefix implies plan"))?;
        stack.load_params(entries).with_context(|| format!("loading {path}"))?;
        Ok(stack)
    } else {
        let mut stack = base;
        stack.load_params(entries).with_context(|| format!("loading {path}"))?;
        Ok(match plan {
            Some(p) => decompose_ffn(&stack, &p)?,
            None => stack,
        })
    }
}

/// Retries refused connections until `timeout` has passed, so an edge may
/// start before its cloud.
fn connect_with_retry(addr: &str, timeout: Duration) -> std::io::Result<TcpStream> {
    let deadline = Instant::now() + timeout;
    loop {
        let left = deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1));
        match wire::connect(addr, left) {
            Ok(s) => return Ok(s),
            Err(e) => {
                if Instant::now() + Duration::from_millis(50) >= deadline {
                    return Err(e);
                }
                debug!("connect to {addr}: {e}; retrying");
                std::thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

struct TrainPlan {
    cfg: ModelConfig,
    role: RunRole,
    point: Option<SplitPoint>,
    opts: TrainOptions,
    bandwidth: Option<f64>,
}

fn train_plan(s: &Settings) -> anyhow::Result<TrainPlan> {
    s.check_keys(&[MODEL_KEYS, PLAN_KEYS, OPTIM_KEYS, TRAIN_KEYS])?;
    let cfg = s.model()?;
    let role: RunRole = s.get("role", RunRole::Loopback)?;
    let point = if s.flag("decompose", true)? {
        let plan = s.plan(&cfg)?;
        if role != RunRole::Local && plan.residual == ResidualMode::KeptLocal {
            bail!("residual mode kept-local cannot be split; use eliminated or kept-transfer");
        }
        Some(SplitPoint::Decomposed(plan))
    } else if role == RunRole::Local {
        None
    } else {
        let l: usize = s.get("split_layer", cfg.n_blocks.saturating_sub(1).max(1))?;
        if l == 0 || l > cfg.n_blocks {
            bail!("split layer {l} outside 1..={}", cfg.n_blocks);
        }
        Some(SplitPoint::Block(l))
    };
    let opts = TrainOptions {
        iterations: s.get("iterations", 300)?,
        batch_size: s.get("batch_size", 32)?,
        data_seed: s.get("data_seed", 0)?,
        optim: s.optim()?,
    };
    if opts.batch_size == 0 {
        bail!("batch_size must be at least 1");
    }
    let bandwidth = s.opt::<f64>("bandwidth_bps")?.filter(|&b| b > 0.0);
    if let Some(b) = bandwidth {
        Throttle::new(b)?;
    }
    match role {
        RunRole::Edge if s.raw("peer").is_none() => bail!("role edge needs a peer address"),
        RunRole::Cloud if s.raw("listen").is_none() => bail!("role cloud needs a listen address"),
        _ => {}
    }
    Ok(TrainPlan { cfg, role, point, opts, bandwidth })
}

fn report(label: &str, rows: &[TrainMetrics]) {
    let Some(last) = rows.last() else {
        println!("{label}: no iterations");
        return;
    };
    println!(
        "{label}: {} iterations, final loss {:.4}, last-20 accuracy {:.3}, {} B up / {} B down per iteration",
        rows.len(),
        last.loss,
        tail_accuracy(rows, 20),
        last.bytes_up,
        last.bytes_down
    );
}

pub fn train(s: &Settings) -> Outcome {
    let plan = train_plan(s).or_exit(EXIT_CONFIG)?;
    let metrics_out = output_path(s, "metrics_out", "metrics.csv").or_exit(EXIT_CONFIG)?;
    let checkpoint_out = output_path(s, "checkpoint_out", "checkpoint.sftw").or_exit(EXIT_CONFIG)?;
    let model = load_model(s, &plan.cfg, plan.point).or_exit(EXIT_CONFIG)?;
    let throttle = || plan.bandwidth.map(Throttle::new).transpose().expect("bandwidth validated");
    let started = Instant::now();
    info!("training as {:?}, {} parameters", plan.role, model.num_params());

    let (rows, trained, data) = match plan.role {
        RunRole::Local => {
            let data = load_dataset(s, &plan.cfg).or_exit(EXIT_CONFIG)?;
            let mut stack = model;
            let rows = run_local(&mut stack, &data, &plan.opts).map_err(Failure::from_run)?;
            (rows, stack, Some(data))
        }
        RunRole::Loopback => {
            let data = load_dataset(s, &plan.cfg).or_exit(EXIT_CONFIG)?;
            let point = plan.point.expect("split roles have a split point");
            let run = run_split_loopback(&model, plan.cfg.digest(), point, &data, &plan.opts, plan.bandwidth)
                .map_err(Failure::from_run)?;
            let stack = run.model.join().or_exit(EXIT_TRAIN)?;
            (run.edge, stack, Some(data))
        }
        RunRole::Edge => {
            let data = load_dataset(s, &plan.cfg).or_exit(EXIT_CONFIG)?;
            let point = plan.point.expect("split roles have a split point");
            let parts = split_for(model, point).or_exit(EXIT_CONFIG)?;
            let session = session_config(plan.cfg.digest(), point, plan.opts.batch_size, plan.cfg.seq_len);
            let peer: String = s.require("peer").or_exit(EXIT_CONFIG)?;
            let timeout = Duration::from_millis(s.get("connect_timeout_ms", 5000u64).or_exit(EXIT_CONFIG)?);
            let stream = connect_with_retry(&peer, timeout)
                .with_context(|| format!("connecting to {peer}"))
                .or_exit(EXIT_CONNECT)?;
            info!("connected to {peer}");
            let conn = Conn::new(stream, Role::Edge).with_throttle(throttle());
            let (net1, rows) = run_edge(parts.net1, conn, session, &data, &plan.opts).map_err(Failure::from_run)?;
            (rows, net1, None)
        }
        RunRole::Cloud => {
            let point = plan.point.expect("split roles have a split point");
            let parts = split_for(model, point).or_exit(EXIT_CONFIG)?;
            let session = session_config(plan.cfg.digest(), point, plan.opts.batch_size, plan.cfg.seq_len);
            let listen: String = s.require("listen").or_exit(EXIT_CONFIG)?;
            let listener = TcpListener::bind(&listen)
                .with_context(|| format!("listening on {listen}"))
                .or_exit(EXIT_CONNECT)?;
            info!("listening on {}", listener.local_addr().or_exit(EXIT_CONNECT)?);
            let (stream, peer) = wire::accept_one(&listener).context("accepting").or_exit(EXIT_CONNECT)?;
            info!("edge connected from {peer}");
            let conn = Conn::new(stream, Role::Cloud).with_throttle(throttle());
            let (net2, rows) = run_cloud(parts.net2, conn, session, plan.opts.optim).map_err(Failure::from_run)?;
            (rows, net2, None)
        }
    };

    report(&format!("{:?}", plan.role).to_lowercase(), &rows);
    if let Some(data) = data {
        let mut eval_model = trained.clone();
        let acc = evaluate(&mut eval_model, &data, plan.opts.batch_size).or_exit(EXIT_TRAIN)?;
        println!("training-set accuracy {acc:.4}");
    }
    println!("elapsed {:.2} s", started.elapsed().as_secs_f64());
    if let Some(path) = metrics_out {
        let f = File::create(&path).with_context(|| format!("creating {path}")).or_exit(EXIT_TRAIN)?;
        write_metrics_csv(BufWriter::new(f), &rows).or_exit(EXIT_TRAIN)?;
        info!("metrics written to {path}");
    }
    if let Some(path) = checkpoint_out {
        save_checkpoint(&path, &trained).or_exit(EXIT_TRAIN)?;
        info!("checkpoint written to {path}");
    }
    Ok(())
}

const DECOMPOSE_KEYS: &[&str] = &["seed", "checkpoint_in", "checkpoint_out"];

pub fn decompose(s: &Settings) -> Outcome {
    s.check_keys(&[MODEL_KEYS, PLAN_KEYS, DECOMPOSE_KEYS]).or_exit(EXIT_CONFIG)?;
    let cfg = s.model().or_exit(EXIT_CONFIG)?;
    let plan: SplitPlan = s.plan(&cfg).or_exit(EXIT_CONFIG)?;
    let out = output_path(s, "checkpoint_out", "decomposed.sftw").or_exit(EXIT_CONFIG)?;
    let base = load_model(s, &cfg, None).or_exit(EXIT_CONFIG)?;
    let down = names::ffn_down(plan.split_layer);
    let w = &base
        .layer(&down)
        .ok_or_else(|| anyhow!("model has no layer {down}"))
        .or_exit(EXIT_CONFIG)?
        .params[0]
        .value;

    println!("{down}.weight {}x{}", w.rows(), w.cols());
    println!("rank,rel_error");
    for r in 1..=w.rows().min(w.cols()) {
        let e = reconstruction_error(w, r).or_exit(EXIT_TRAIN)?;
        println!("{r},{e:.3e}");
    }

    let mut original = base.clone();
    let mut decomposed = decompose_ffn(&base, &plan).or_exit(EXIT_CONFIG)?;
    let mut rng = Rng::seed(s.get("seed", 0u64).or_exit(EXIT_CONFIG)?);
    let tokens = Matrix::from_vec(
        8,
        cfg.seq_len,
        (0..8 * cfg.seq_len).map(|_| rng.below(cfg.vocab_size) as f32).collect(),
    )
    .or_exit(EXIT_TRAIN)?;
    let a = original.forward(&tokens).or_exit(EXIT_TRAIN)?;
    let b = decomposed.forward(&tokens).or_exit(EXIT_TRAIN)?;
    let change = a.sub(&b).or_exit(EXIT_TRAIN)?.frobenius_norm() / a.frobenius_norm().max(f64::MIN_POSITIVE);
    println!(
        "selected rank {} ({} residual): rel_error {:.3e}, logits change {:.3e}",
        plan.rank,
        plan.residual,
        reconstruction_error(w, plan.rank).or_exit(EXIT_TRAIN)?,
        change
    );
    if let Some(path) = out {
        save_checkpoint(&path, &decomposed).or_exit(EXIT_TRAIN)?;
        println!("wrote {path}");
    }
    Ok(())
}

const ESTIMATE_KEYS: &[&str] = &[
    "t_edge_layer_ms",
    "t_cloud_layer_ms",
    "n_edge_layers",
    "n_cloud_layers",
    "t_naive_ms",
    "t_comm_sl_ms",
    "t_comm_sft_ms",
    "batch",
    "tokens",
    "d_model",
    "rank",
    "bandwidth_bps",
];

/// Highest rank covered by `--sweep`.
pub const SWEEP_MAX_RANK: u64 = 64;

pub fn estimate(s: &Settings, sweep: bool) -> Outcome {
    s.check_keys(&[ESTIMATE_KEYS]).or_exit(EXIT_CONFIG)?;
    let read = || -> anyhow::Result<[PerfParams; 3]> {
        let base = PerfParams {
            t_edge_layer_ms: s.get("t_edge_layer_ms", 0.0)?,
            t_cloud_layer_ms: s.get("t_cloud_layer_ms", 0.0)?,
            n_edge_layers: s.get("n_edge_layers", 0)?,
            n_cloud_layers: s.get("n_cloud_layers", 0)?,
            volume_bytes: 0,
            bandwidth_bps: s.get("bandwidth_bps", 0.0)?,
            t_comm_override_ms: None,
            t_naive_override_ms: s.opt("t_naive_ms")?,
        };
        base.validate()?;
        let (batch, tokens): (u64, u64) = (s.get("batch", 0)?, s.get("tokens", 0)?);
        let sl = PerfParams {
            volume_bytes: comm_volume(batch, tokens, s.get("d_model", 0)?, 4),
            t_comm_override_ms: s.opt("t_comm_sl_ms")?,
            ..base
        };
        let sft = PerfParams {
            volume_bytes: comm_volume(batch, tokens, s.get("rank", 0)?, 4),
            t_comm_override_ms: s.opt("t_comm_sft_ms")?,
            ..base
        };
        Ok([base, sl, sft])
    };
    let [base, sl, sft] = read().or_exit(EXIT_CONFIG)?;
    let (batch, tokens) = (s.get("batch", 0u64).or_exit(EXIT_CONFIG)?, s.get("tokens", 0u64).or_exit(EXIT_CONFIG)?);

    let mut out = std::io::stdout().lock();
    if sweep {
        if base.bandwidth_bps <= 0.0 {
            return Err(Failure::config(anyhow!("--sweep needs a positive bandwidth_bps")));
        }
        writeln!(out, "rank,volume_bytes,comm_ms,total_ms").or_exit(EXIT_TRAIN)?;
        for r in 1..=SWEEP_MAX_RANK {
            let p = PerfParams {
                volume_bytes: comm_volume(batch, tokens, r, 4),
                t_comm_override_ms: None,
                ..base
            };
            let e = estimate_mode(Mode::Sft, &p).or_exit(EXIT_CONFIG)?;
            writeln!(out, "{r},{},{:.4},{:.4}", p.volume_bytes, e.comm_ms, e.total_ms).or_exit(EXIT_TRAIN)?;
        }
        return Ok(());
    }

    let rows = [
        (estimate_mode(Mode::Naive, &base).or_exit(EXIT_CONFIG)?, 0),
        (estimate_mode(Mode::Sl, &sl).or_exit(EXIT_CONFIG)?, sl.volume_bytes),
        (estimate_mode(Mode::Sft, &sft).or_exit(EXIT_CONFIG)?, sft.volume_bytes),
    ];
    writeln!(out, "{:<6} {:>12} {:>12} {:>12}  volume", "mode", "compute_ms", "comm_ms", "total_ms").or_exit(EXIT_TRAIN)?;
    for (e, bytes) in rows {
        writeln!(
            out,
            "{:<6} {:>12.1} {:>12.1} {:>12.1}  {}",
            e.mode.to_string(),
            e.compute_ms,
            e.comm_ms,
            e.total_ms,
            format_bytes(bytes)
        )
        .or_exit(EXIT_TRAIN)?;
    }
    let t_naive = base.naive_ms();
    let line = match breakeven_bandwidth(&PerfParams { t_comm_override_ms: None, ..sft }, t_naive).or_exit(EXIT_CONFIG)? {
        Breakeven::Bandwidth(bps) => format!("sft breakeven bandwidth {:.1} Mbps", bps / 1e6),
        Breakeven::NeverBeneficial { compute_ms } => {
            format!("sft never beats local training: split compute {compute_ms:.1} ms >= {t_naive:.1} ms")
        }
    };
    writeln!(out, "{line}").or_exit(EXIT_TRAIN)?;
    Ok(())
}

const GENDATA_KEYS: &[&str] = &["size", "seed", "out"];

pub fn gendata(s: &Settings) -> Outcome {
    s.check_keys(&[MODEL_KEYS, GENDATA_KEYS]).or_exit(EXIT_CONFIG)?;
    let cfg = s.model().or_exit(EXIT_CONFIG)?;
    let size: usize = s.get("size", 1000).or_exit(EXIT_CONFIG)?;
    let seed: u64 = s.get("seed", 0).or_exit(EXIT_CONFIG)?;
    let out: String = s.require("out").or_exit(EXIT_CONFIG)?;
    let data = gen_majority_task(size, &cfg, seed).or_exit(EXIT_CONFIG)?;
    let f = File::create(Path::new(&out)).with_context(|| format!("creating {out}")).or_exit(EXIT_TRAIN)?;
    data.write_csv(BufWriter::new(f)).or_exit(EXIT_TRAIN)?;
    let positive = data.labels.iter().filter(|&&l| l == 1).count();
    println!(
        "wrote {} rows to {out}, label 1 fraction {:.3}",
        data.len(),
        positive as f64 / data.len() as f64
    );
    Ok(())
}

//! Split fine-tuning: the decomposed model is cut right after FFN-1 of the
//! split block, the lower half runs on the edge and the upper half on the
//! cloud, and every iteration exchanges the rank-`R` activation, the labels
//! and the activation gradient.

use std::io::{Read, Write};
use std::time::{Duration, Instant};

use crate::data::{batches, Dataset};
use crate::decompose::{ResidualMode, SplitPlan};
use crate::error::{Error, Result};
use crate::nn::{accuracy, cross_entropy, names, LayerStack, OptimAlgorithm, OptimState};
use crate::tensor::Matrix;
use crate::wire::{
    handshake, pipe, Conn, Frame, MetricsPayload, MsgType, Role, SessionConfig, Throttle, WireError,
    PROTOCOL_VERSION,
};

/// Where the model is cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPoint {
    /// After FFN-1 of a decomposed block.
    Decomposed(SplitPlan),
    /// After the final LayerNorm of block `l` of an undecomposed model, so
    /// the full `d`-wide hidden state crosses the link. This is plain split
    /// learning and serves as the traffic baseline.
    Block(usize),
}

impl SplitPoint {
    pub fn split_layer(&self) -> usize {
        match self {
            SplitPoint::Decomposed(p) => p.split_layer,
            SplitPoint::Block(l) => *l,
        }
    }

    pub fn transfers_residual(&self) -> bool {
        matches!(self, SplitPoint::Decomposed(p) if p.residual == ResidualMode::KeptWithTransfer)
    }
}

/// The two halves of a split model.
#[derive(Debug, Clone)]
pub struct PartitionedModel {
    pub net1: LayerStack,
    pub net2: LayerStack,
    pub point: SplitPoint,
}

impl PartitionedModel {
    /// Rejoins the halves into one stack.
    pub fn join(self) -> Result<LayerStack> {
        LayerStack::concat(self.net1, self.net2)
    }
}

/// Cuts a model already rewritten by
/// [`decompose_ffn`](crate::decompose::decompose_ffn) with the same plan.
pub fn partition(stack: LayerStack, plan: &SplitPlan) -> Result<PartitionedModel> {
    let l = plan.split_layer;
    match plan.residual {
        ResidualMode::KeptLocal => {
            return Err(Error::Plan("kept-local residual cannot be split across two machines".into()))
        }
        ResidualMode::Eliminated if stack.index_of(&names::ffn_res(l)).is_some() => {
            return Err(Error::Plan(format!("plan eliminates block {l}'s residual but the model keeps it")))
        }
        ResidualMode::KeptWithTransfer if stack.index_of(&names::ffn_res(l)).is_none() => {
            return Err(Error::Plan(format!("plan keeps block {l}'s residual but the model has none")))
        }
        _ => {}
    }
    let ffn1 = stack
        .index_of(&names::ffn1(l))
        .ok_or_else(|| Error::Plan(format!("block {l} is not decomposed")))?;
    let rank = stack.layers()[ffn1].params[0].value.cols();
    if rank != plan.rank {
        return Err(Error::Plan(format!("model has rank {rank}, plan says {}", plan.rank)));
    }
    let (net1, net2) = stack.split_at(ffn1 + 1)?;
    Ok(PartitionedModel {
        net1,
        net2,
        point: SplitPoint::Decomposed(*plan),
    })
}

/// Cuts an undecomposed model after block `l`.
pub fn partition_at_block(stack: LayerStack, l: usize) -> Result<PartitionedModel> {
    let norm = stack
        .index_of(&names::ffn_norm(l))
        .ok_or_else(|| Error::Plan(format!("no block {l}")))?;
    let (net1, net2) = stack.split_at(norm + 1)?;
    if net1.export_at().is_some() {
        return Err(Error::Plan("a residual crosses the block boundary".into()));
    }
    Ok(PartitionedModel {
        net1,
        net2,
        point: SplitPoint::Block(l),
    })
}

/// Splits a prepared stack at `point`.
pub fn split_for(stack: LayerStack, point: SplitPoint) -> Result<PartitionedModel> {
    match point {
        SplitPoint::Decomposed(plan) => partition(stack, &plan),
        SplitPoint::Block(l) => partition_at_block(stack, l),
    }
}

/// One row of training telemetry.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainMetrics {
    pub iteration: u64,
    pub loss: f32,
    pub batch_accuracy: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub t_edge_ms: f64,
    pub t_cloud_ms: f64,
    pub t_comm_ms: f64,
}

pub const METRICS_CSV_HEADER: &str = "iter,loss,acc,bytes_up,bytes_down,t_edge_ms,t_cloud_ms,t_comm_ms";

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[TrainMetrics]) -> Result<()> {
    writeln!(w, "{METRICS_CSV_HEADER}")?;
    for m in rows {
        writeln!(
            w,
            "{},{},{},{},{},{:.3},{:.3},{:.3}",
            m.iteration, m.loss, m.batch_accuracy, m.bytes_up, m.bytes_down, m.t_edge_ms, m.t_cloud_ms, m.t_comm_ms
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Loop settings shared by local and split runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub iterations: u64,
    pub batch_size: usize,
    /// Seeds the batch order.
    pub data_seed: u64,
    pub optim: OptimAlgorithm,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch_size: 32,
            data_seed: 0,
            optim: OptimAlgorithm::default(),
        }
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Plain single-process training.
pub fn run_local(stack: &mut LayerStack, data: &Dataset, opts: &TrainOptions) -> Result<Vec<TrainMetrics>> {
    let mut opt = OptimState::new(opts.optim);
    let mut stream = batches(data, opts.batch_size, opts.data_seed)?;
    let mut out = Vec::with_capacity(opts.iterations as usize);
    for iteration in 1..=opts.iterations {
        let (tokens, labels) = stream.next().expect("batch stream is endless");
        let t0 = Instant::now();
        let logits = stack.forward(&tokens)?;
        let (loss, d_logits) = cross_entropy(&logits, &labels)?;
        stack.backward(&d_logits)?;
        opt.step(stack)?;
        out.push(TrainMetrics {
            iteration,
            loss,
            batch_accuracy: accuracy(&logits, &labels) as f64 / labels.len() as f64,
            t_edge_ms: ms(t0.elapsed()),
            ..Default::default()
        });
    }
    Ok(out)
}

/// Session parameters for a cut of `model` with the given batch shape.
pub fn session_config(
    model_digest: u64,
    point: SplitPoint,
    batch_size: usize,
    seq_len: usize,
) -> SessionConfig {
    let (rank, residual) = match point {
        SplitPoint::Decomposed(p) => (p.rank as u32, p.residual),
        SplitPoint::Block(_) => (0, ResidualMode::Eliminated),
    };
    SessionConfig {
        version: PROTOCOL_VERSION,
        model_digest,
        split_layer: point.split_layer() as u32,
        rank,
        residual,
        batch: batch_size as u32,
        seq_len: seq_len as u32,
    }
}

/// Edge half of a running session.
#[derive(Debug)]
pub struct EdgeSession<S> {
    pub net1: LayerStack,
    opt: OptimState,
    conn: Conn<S>,
    session: SessionConfig,
    iteration: u64,
}

impl<S: Read + Write> EdgeSession<S> {
    /// Performs the handshake and returns a session ready to train.
    pub fn start(net1: LayerStack, optim: OptimAlgorithm, mut conn: Conn<S>, session: SessionConfig) -> Result<Self> {
        handshake(&mut conn, &session)?;
        Ok(Self {
            net1,
            opt: OptimState::new(optim),
            conn,
            session,
            iteration: 0,
        })
    }

    pub fn session(&self) -> &SessionConfig {
        &self.session
    }

    /// One edge iteration: forward `net1`, ship the activation (plus the
    /// residual operand if negotiated) and labels, wait for the gradient,
    /// backward and step.
    pub fn step(&mut self, tokens: &Matrix, labels: &[u32]) -> Result<TrainMetrics> {
        let it = self.iteration + 1;
        let transfer = self.session.transfers_residual();
        let t0 = Instant::now();
        let act = self.net1.forward(tokens)?;
        let residual = if transfer {
            Some(self.net1.exported().cloned().ok_or_else(|| {
                Error::Plan("session transfers a residual the edge model does not export".into())
            })?)
        } else {
            None
        };
        let t_fwd = t0.elapsed();

        let up0 = self.conn.bytes_sent();
        let down0 = self.conn.bytes_received();
        let t1 = Instant::now();
        self.conn.send(&Frame::tensor(MsgType::Activation, it, &act))?;
        if let Some(r) = &residual {
            self.conn.send(&Frame::tensor(MsgType::Residual, it, r))?;
        }
        self.conn.send(&Frame::labels(it, labels))?;
        let grad = self.conn.expect(MsgType::Gradient)?.to_matrix()?;
        let d_residual = if transfer {
            Some(self.conn.expect(MsgType::Residual)?.to_matrix()?)
        } else {
            None
        };
        let metrics = MetricsPayload::decode(&self.conn.expect(MsgType::Metrics)?.payload)?;
        let t_round = t1.elapsed();

        if grad.shape() != act.shape() {
            return Err(WireError::Protocol(format!(
                "gradient is {}x{}, activation was {}x{}",
                grad.rows(),
                grad.cols(),
                act.rows(),
                act.cols()
            ))
            .into());
        }
        if let (Some(d), Some(r)) = (&d_residual, &residual) {
            if d.shape() != r.shape() {
                return Err(WireError::Protocol("residual gradient shape differs from residual".into()).into());
            }
        }
        let t2 = Instant::now();
        self.net1.backward_with(&grad, d_residual.as_ref())?;
        self.opt.step(&mut self.net1)?;
        let t_bwd = t2.elapsed();
        self.iteration = it;
        let t_cloud_ms = f64::from(metrics.cloud_ms);
        Ok(TrainMetrics {
            iteration: it,
            loss: metrics.loss,
            batch_accuracy: f64::from(metrics.correct) / f64::from(metrics.total.max(1)),
            bytes_up: self.conn.bytes_sent() - up0,
            bytes_down: self.conn.bytes_received() - down0,
            t_edge_ms: ms(t_fwd + t_bwd),
            t_cloud_ms,
            t_comm_ms: (ms(t_round) - t_cloud_ms).max(0.0),
        })
    }

    /// Sends SHUTDOWN and returns the trained lower half.
    pub fn finish(mut self) -> Result<LayerStack> {
        self.conn.shutdown()?;
        Ok(self.net1)
    }
}

/// Cloud half of a running session.
#[derive(Debug)]
pub struct CloudSession<S> {
    pub net2: LayerStack,
    opt: OptimState,
    conn: Conn<S>,
    session: SessionConfig,
}

impl<S: Read + Write> CloudSession<S> {
    /// Waits for the edge's HELLO and accepts it if it matches `expected`.
    pub fn accept(net2: LayerStack, optim: OptimAlgorithm, mut conn: Conn<S>, expected: SessionConfig) -> Result<Self> {
        let session = handshake(&mut conn, &expected)?;
        Ok(Self {
            net2,
            opt: OptimState::new(optim),
            conn,
            session,
        })
    }

    /// Serves one iteration. Returns `None` once the edge shuts down.
    pub fn step(&mut self) -> Result<Option<TrainMetrics>> {
        let first = match self.conn.recv() {
            Ok(f) => f,
            Err(WireError::Closed) => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        if first.msg_type == MsgType::Shutdown {
            return Ok(None);
        }
        let it = first.iteration;
        let down0 = self.conn.bytes_sent();
        let up0 = self.conn.bytes_received() - first.wire_len() as u64;
        let act = first.to_matrix()?;
        let residual = if self.session.transfers_residual() {
            Some(self.conn.expect(MsgType::Residual)?.to_matrix()?)
        } else {
            None
        };
        let labels = self.conn.expect(MsgType::Labels)?.to_labels()?;

        let t0 = Instant::now();
        let result = self.compute(&act, residual.as_ref(), &labels);
        let (loss, correct, grads) = match result {
            Ok(v) => v,
            Err(e) => {
                let _ = self.conn.shutdown();
                return Err(e);
            }
        };
        let t_cloud = t0.elapsed();
        self.conn.send(&Frame::tensor(MsgType::Gradient, it, &grads.input))?;
        if let Some(ext) = &grads.external {
            self.conn.send(&Frame::tensor(MsgType::Residual, it, ext))?;
        }
        let payload = MetricsPayload {
            loss,
            correct: correct as u32,
            total: labels.len() as u32,
            cloud_ms: ms(t_cloud) as f32,
        };
        self.conn.send(&Frame::control(MsgType::Metrics, it, payload.encode()))?;
        Ok(Some(TrainMetrics {
            iteration: it,
            loss,
            batch_accuracy: correct as f64 / labels.len().max(1) as f64,
            bytes_up: self.conn.bytes_received() - up0,
            bytes_down: self.conn.bytes_sent() - down0,
            t_cloud_ms: ms(t_cloud),
            ..Default::default()
        }))
    }

    fn compute(
        &mut self,
        act: &Matrix,
        residual: Option<&Matrix>,
        labels: &[u32],
    ) -> Result<(f32, usize, crate::nn::InputGrads)> {
        let logits = self.net2.forward_with(act, residual)?;
        let (loss, d_logits) = cross_entropy(&logits, labels)?;
        let correct = accuracy(&logits, labels);
        let grads = self.net2.backward_with(&d_logits, None)?;
        if residual.is_some() && grads.external.is_none() {
            return Err(Error::Plan("cloud model ignores the transferred residual".into()));
        }
        self.opt.step(&mut self.net2)?;
        Ok((loss, correct, grads))
    }

    /// Serves iterations until the edge shuts down.
    pub fn serve(&mut self) -> Result<Vec<TrainMetrics>> {
        let mut out = Vec::new();
        while let Some(m) = self.step()? {
            out.push(m);
        }
        Ok(out)
    }
}

/// Drives an edge session over `data` for `opts.iterations` steps.
pub fn run_edge<S: Read + Write>(
    net1: LayerStack,
    conn: Conn<S>,
    session: SessionConfig,
    data: &Dataset,
    opts: &TrainOptions,
) -> Result<(LayerStack, Vec<TrainMetrics>)> {
    let mut edge = EdgeSession::start(net1, opts.optim, conn, session)?;
    let mut stream = batches(data, opts.batch_size, opts.data_seed)?;
    let mut out = Vec::with_capacity(opts.iterations as usize);
    for _ in 0..opts.iterations {
        let (tokens, labels) = stream.next().expect("batch stream is endless");
        out.push(edge.step(&tokens, &labels)?);
    }
    Ok((edge.finish()?, out))
}

/// Drives a cloud session until the edge hangs up.
pub fn run_cloud<S: Read + Write>(
    net2: LayerStack,
    conn: Conn<S>,
    expected: SessionConfig,
    optim: OptimAlgorithm,
) -> Result<(LayerStack, Vec<TrainMetrics>)> {
    let mut cloud = CloudSession::accept(net2, optim, conn, expected)?;
    let out = cloud.serve()?;
    Ok((cloud.net2, out))
}

/// Result of a split run: per-side metrics and the trained halves.
#[derive(Debug)]
pub struct SplitRun {
    pub edge: Vec<TrainMetrics>,
    pub cloud: Vec<TrainMetrics>,
    pub model: PartitionedModel,
}

/// Split training with edge and cloud on two threads joined by an
/// in-memory pipe. `stack` must already be prepared for `point`
/// (decomposed with the same plan, or untouched for a block cut).
pub fn run_split_loopback(
    stack: &LayerStack,
    model_digest: u64,
    point: SplitPoint,
    data: &Dataset,
    opts: &TrainOptions,
    bandwidth_bps: Option<f64>,
) -> Result<SplitRun> {
    let parts = split_for(stack.clone(), point)?;
    let session = session_config(model_digest, point, opts.batch_size, data.seq_len);
    let throttle = |bw: Option<f64>| -> Result<Option<Throttle>> { Ok(bw.map(Throttle::new).transpose()?) };
    let (edge_end, cloud_end) = pipe();
    let edge_conn = Conn::new(edge_end, Role::Edge).with_throttle(throttle(bandwidth_bps)?);
    let cloud_conn = Conn::new(cloud_end, Role::Cloud).with_throttle(throttle(bandwidth_bps)?);
    let optim = opts.optim;
    let net2 = parts.net2;
    let cloud = std::thread::spawn(move || run_cloud(net2, cloud_conn, session, optim));
    let edge = run_edge(parts.net1, edge_conn, session, data, opts);
    let cloud = cloud
        .join()
        .map_err(|_| Error::InvalidArgument("cloud thread panicked".into()))?;
    // A cloud failure also breaks the edge; report the cloud's cause.
    let (net2, cloud_metrics) = cloud?;
    let (net1, edge_metrics) = edge?;
    Ok(SplitRun {
        edge: edge_metrics,
        cloud: cloud_metrics,
        model: PartitionedModel { net1, net2, point },
    })
}

/// Classification accuracy of `stack` over the whole dataset.
pub fn evaluate(stack: &mut LayerStack, data: &Dataset, batch_size: usize) -> Result<f64> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch_size) {
        let (tokens, labels) = data.gather(chunk);
        let logits = stack.forward(&tokens)?;
        correct += accuracy(&logits, &labels);
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Mean batch accuracy over the last `n` rows.
pub fn tail_accuracy(rows: &[TrainMetrics], n: usize) -> f64 {
    let tail = &rows[rows.len().saturating_sub(n)..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter().map(|m| m.batch_accuracy).sum::<f64>() / tail.len() as f64
}

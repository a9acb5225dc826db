use std::net::TcpListener;
use std::time::Duration;

use sft_core::data::{gen_majority_task, Dataset};
use sft_core::decompose::{decompose_ffn, ResidualMode, SplitPlan};
use sft_core::nn::{build_model, LayerStack, ModelConfig};
use sft_core::splitnet::{
    partition, run_cloud, run_edge, run_local, run_split_loopback, session_config, split_for, EdgeSession,
    SplitPoint, TrainMetrics, TrainOptions,
};
use sft_core::tensor::{Matrix, Rng};
use sft_core::wire::{self, Conn, Frame, MetricsPayload, MsgType, Role, WireError};

const B: usize = 32;

fn setup(plan: &SplitPlan, seed: u64) -> (ModelConfig, LayerStack, Dataset) {
    let cfg = ModelConfig::default();
    let model = decompose_ffn(&build_model(&cfg, seed).unwrap(), plan).unwrap();
    let data = gen_majority_task(512, &cfg, seed + 10).unwrap();
    (cfg, model, data)
}

fn opts(iterations: u64) -> TrainOptions {
    TrainOptions {
        iterations,
        batch_size: B,
        data_seed: 5,
        ..Default::default()
    }
}

fn losses(rows: &[TrainMetrics]) -> Vec<u32> {
    rows.iter().map(|m| m.loss.to_bits()).collect()
}

fn params(stack: &LayerStack) -> Vec<(String, Vec<u32>)> {
    stack
        .named_params()
        .into_iter()
        .map(|(n, m)| (n, m.as_slice().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn halves_compose_bit_exactly() {
    for residual in [ResidualMode::Eliminated, ResidualMode::KeptWithTransfer] {
        let plan = SplitPlan::new(2, 8, residual);
        let (cfg, mut model, _) = setup(&plan, 1);
        let mut parts = partition(model.clone(), &plan).unwrap();
        let mut rng = Rng::seed(3);
        for _ in 0..10 {
            let x = Matrix::from_vec(4, cfg.seq_len, (0..4 * cfg.seq_len).map(|_| rng.below(cfg.vocab_size) as f32).collect())
                .unwrap();
            let a = parts.net1.forward(&x).unwrap();
            let ext = parts.net1.exported().cloned();
            let split = parts.net2.forward_with(&a, ext.as_ref()).unwrap();
            assert_eq!(split, model.forward(&x).unwrap());
        }
        let n1: std::collections::BTreeSet<_> = parts.net1.named_params().into_iter().map(|(n, _)| n).collect();
        assert!(parts.net2.named_params().iter().all(|(n, _)| !n1.contains(n)));
    }
}

#[test]
fn loopback_reproduces_local_training() {
    for residual in [ResidualMode::Eliminated, ResidualMode::KeptWithTransfer] {
        let plan = SplitPlan::new(3, 8, residual);
        let (cfg, model, data) = setup(&plan, 2);
        let mut local = model.clone();
        let local_rows = run_local(&mut local, &data, &opts(50)).unwrap();
        let run = run_split_loopback(&model, cfg.digest(), SplitPoint::Decomposed(plan), &data, &opts(50), None).unwrap();
        assert_eq!(losses(&run.edge), losses(&local_rows), "{residual}");
        assert_eq!(losses(&run.cloud), losses(&local_rows));
        let joined = run.model.join().unwrap();
        assert_eq!(params(&joined), params(&local));
        let ids: Vec<u64> = run.edge.iter().map(|m| m.iteration).collect();
        assert_eq!(ids, (1..=50).collect::<Vec<_>>());
    }
}

#[test]
fn tcp_reproduces_local_training() {
    let plan = SplitPlan::new(3, 8, ResidualMode::Eliminated);
    let (cfg, model, data) = setup(&plan, 3);
    let mut local = model.clone();
    let local_rows = run_local(&mut local, &data, &opts(20)).unwrap();

    let parts = partition(model, &plan).unwrap();
    let session = session_config(cfg.digest(), SplitPoint::Decomposed(plan), B, cfg.seq_len);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let net2 = parts.net2;
    let optim = opts(20).optim;
    let cloud = std::thread::spawn(move || {
        let (stream, _) = wire::accept_one(&listener).unwrap();
        run_cloud(net2, Conn::new(stream, Role::Cloud), session, optim)
    });
    let stream = wire::connect(&addr, Duration::from_secs(5)).unwrap();
    let (_, edge_rows) = run_edge(parts.net1, Conn::new(stream, Role::Edge), session, &data, &opts(20)).unwrap();
    let (_, cloud_rows) = cloud.join().unwrap().unwrap();
    assert_eq!(losses(&edge_rows), losses(&local_rows));
    assert_eq!(cloud_rows.len(), 20);
}

#[test]
fn byte_accounting_is_closed_form() {
    let (b, s, d, r) = (B as u64, 16u64, 32u64, 4u64);
    let header2 = 22 + 8; // two dims
    let labels = 22 + 4 + 4 * b;
    let mut up = Vec::new();
    for residual in [ResidualMode::Eliminated, ResidualMode::KeptWithTransfer] {
        let plan = SplitPlan::new(3, r as usize, residual);
        let (cfg, model, data) = setup(&plan, 4);
        let run = run_split_loopback(&model, cfg.digest(), SplitPoint::Decomposed(plan), &data, &opts(3), None).unwrap();
        assert!(run.edge.iter().all(|m| m.bytes_up == run.edge[0].bytes_up));
        assert_eq!(run.edge[0].bytes_up, run.cloud[0].bytes_up);
        assert_eq!(run.edge[0].bytes_down, run.cloud[0].bytes_down);
        up.push(run.edge[0].bytes_up);
    }
    assert_eq!(up[0], header2 + b * s * r * 4 + labels);
    assert_eq!(up[1] - up[0], b * s * d * 4 + header2);

    let cfg = ModelConfig::default();
    let base = build_model(&cfg, 4).unwrap();
    let data = gen_majority_task(512, &cfg, 14).unwrap();
    let sl = run_split_loopback(&base, cfg.digest(), SplitPoint::Block(3), &data, &opts(2), None).unwrap();
    assert_eq!(sl.edge[0].bytes_up, header2 + b * s * d * 4 + labels);
    let ratio = sl.edge[0].bytes_up as f64 / up[0] as f64;
    assert!((ratio / 8.0 - 1.0).abs() < 0.02, "{ratio}");
}

#[test]
fn first_cloud_loss_is_near_ln2() {
    let plan = SplitPlan::new(3, 8, ResidualMode::Eliminated);
    let (cfg, model, data) = setup(&plan, 6);
    let run = run_split_loopback(&model, cfg.digest(), SplitPoint::Decomposed(plan), &data, &opts(1), None).unwrap();
    assert!((f64::from(run.cloud[0].loss) - 2f64.ln()).abs() < 0.1, "{}", run.cloud[0].loss);
}

#[test]
fn zero_gradient_leaves_edge_unchanged() {
    let plan = SplitPlan::new(2, 8, ResidualMode::Eliminated);
    let (cfg, model, data) = setup(&plan, 7);
    let parts = partition(model, &plan).unwrap();
    let before = params(&parts.net1);
    let session = session_config(cfg.digest(), SplitPoint::Decomposed(plan), B, cfg.seq_len);
    let (a, c) = wire::pipe();
    // A hand-rolled cloud that answers every activation with zeros.
    let fake = std::thread::spawn(move || {
        let mut conn = Conn::new(c, Role::Cloud);
        wire::handshake(&mut conn, &session).unwrap();
        let act = conn.recv().unwrap().to_matrix().unwrap();
        let labels = conn.recv().unwrap().to_labels().unwrap();
        conn.send(&Frame::tensor(MsgType::Gradient, 1, &Matrix::zeros(act.rows(), act.cols()))).unwrap();
        let m = MetricsPayload { loss: 0.0, correct: 0, total: labels.len() as u32, cloud_ms: 0.0 };
        conn.send(&Frame::control(MsgType::Metrics, 1, m.encode())).unwrap();
        conn.recv().unwrap().msg_type
    });
    let mut edge = EdgeSession::start(parts.net1, opts(1).optim, Conn::new(a, Role::Edge), session).unwrap();
    let (x, y) = data.gather(&(0..B).collect::<Vec<_>>());
    edge.step(&x, &y).unwrap();
    assert_eq!(params(&edge.net1), before);
    edge.finish().unwrap();
    assert_eq!(fake.join().unwrap(), MsgType::Shutdown);
}

#[test]
fn wrong_gradient_shape_is_a_protocol_error() {
    let plan = SplitPlan::new(2, 8, ResidualMode::Eliminated);
    let (cfg, model, data) = setup(&plan, 8);
    let parts = partition(model, &plan).unwrap();
    let session = session_config(cfg.digest(), SplitPoint::Decomposed(plan), B, cfg.seq_len);
    let (a, c) = wire::pipe();
    let fake = std::thread::spawn(move || {
        let mut conn = Conn::new(c, Role::Cloud);
        wire::handshake(&mut conn, &session).unwrap();
        conn.recv().unwrap();
        conn.recv().unwrap();
        conn.send(&Frame::tensor(MsgType::Gradient, 1, &Matrix::zeros(3, 3))).unwrap();
        let m = MetricsPayload { loss: 0.0, correct: 0, total: 1, cloud_ms: 0.0 };
        conn.send(&Frame::control(MsgType::Metrics, 1, m.encode())).unwrap();
    });
    let mut edge = EdgeSession::start(parts.net1, opts(1).optim, Conn::new(a, Role::Edge), session).unwrap();
    let (x, y) = data.gather(&(0..B).collect::<Vec<_>>());
    let err = edge.step(&x, &y).unwrap_err();
    assert!(matches!(err, sft_core::Error::Wire(WireError::Protocol(_))), "{err}");
    fake.join().unwrap();
}

#[test]
fn bad_label_is_reported_by_cloud() {
    let plan = SplitPlan::new(2, 8, ResidualMode::Eliminated);
    let (cfg, model, mut data) = setup(&plan, 9);
    data.labels.iter_mut().for_each(|l| *l = 5);
    let err = run_split_loopback(&model, cfg.digest(), SplitPoint::Decomposed(plan), &data, &opts(2), None).unwrap_err();
    assert!(
        matches!(err, sft_core::Error::Label { label: 5, .. } | sft_core::Error::Wire(WireError::Closed)),
        "{err}"
    );
}

#[test]
fn kept_local_cannot_be_split() {
    let plan = SplitPlan::new(2, 8, ResidualMode::KeptLocal);
    let (cfg, model, data) = setup(&plan, 10);
    assert!(split_for(model.clone(), SplitPoint::Decomposed(plan)).is_err());
    assert!(run_split_loopback(&model, cfg.digest(), SplitPoint::Decomposed(plan), &data, &opts(1), None).is_err());
}

#[test]
fn local_training_is_deterministic() {
    let plan = SplitPlan::new(2, 8, ResidualMode::Eliminated);
    let (_, model, data) = setup(&plan, 11);
    let mut a = model.clone();
    let mut b = model;
    assert_eq!(losses(&run_local(&mut a, &data, &opts(5)).unwrap()), losses(&run_local(&mut b, &data, &opts(5)).unwrap()));
}

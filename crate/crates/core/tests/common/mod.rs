//! Test-only oracles: an f64 straight-line reimplementation of every layer
//! and a central finite-difference gradient checker built on it.

#![allow(dead_code)]

use sft_core::nn::{Layer, LayerKind, LayerStack, Param, Skip};
use sft_core::tensor::{Dist, Matrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct M64 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl M64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }
    pub fn of(m: &Matrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: m.as_slice().iter().map(|&v| f64::from(v)).collect(),
        }
    }
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

fn mm(a: &M64, b: &M64) -> M64 {
    assert_eq!(a.cols, b.rows);
    let mut o = M64::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut s = 0.0;
            for k in 0..a.cols {
                s += a.at(i, k) * b.at(k, j);
            }
            *o.at_mut(i, j) = s;
        }
    }
    o
}

fn affine(x: &M64, w: &M64, b: Option<&M64>) -> M64 {
    let mut y = mm(x, w);
    if let Some(b) = b {
        for r in 0..y.rows {
            for c in 0..y.cols {
                *y.at_mut(r, c) += b.at(0, c);
            }
        }
    }
    y
}

fn gelu64(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Output of one layer, recomputed from scratch in f64.
pub fn shadow_layer(kind: &LayerKind, p: &[M64], x: &M64, skip: Option<&M64>) -> M64 {
    match kind {
        LayerKind::Embedding { seq_len } => {
            let (tok, pos) = (&p[0], &p[1]);
            let mut o = M64::zeros(x.rows * seq_len, tok.cols);
            for b in 0..x.rows {
                for s in 0..*seq_len {
                    let id = x.at(b, s) as usize;
                    for c in 0..tok.cols {
                        *o.at_mut(b * seq_len + s, c) = tok.at(id, c) + pos.at(s, c);
                    }
                }
            }
            o
        }
        LayerKind::Attention { heads, seq_len } => {
            let d = x.cols;
            let dh = d / heads;
            let q = affine(x, &p[0], Some(&p[1]));
            let k = affine(x, &p[2], Some(&p[3]));
            let v = affine(x, &p[4], Some(&p[5]));
            let mut ctx = M64::zeros(x.rows, d);
            for b in 0..x.rows / seq_len {
                for h in 0..*heads {
                    for i in 0..*seq_len {
                        let qi = b * seq_len + i;
                        let scores: Vec<f64> = (0..*seq_len)
                            .map(|j| {
                                let kj = b * seq_len + j;
                                (0..dh).map(|t| q.at(qi, h * dh + t) * k.at(kj, h * dh + t)).sum::<f64>()
                                    / (dh as f64).sqrt()
                            })
                            .collect();
                        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                        for t in 0..dh {
                            *ctx.at_mut(qi, h * dh + t) = (0..*seq_len)
                                .map(|j| (scores[j] - m).exp() / z * v.at(b * seq_len + j, h * dh + t))
                                .sum();
                        }
                    }
                }
            }
            affine(&ctx, &p[6], Some(&p[7]))
        }
        LayerKind::LayerNorm => {
            let mut o = M64::zeros(x.rows, x.cols);
            for r in 0..x.rows {
                let row = &x.data[r * x.cols..(r + 1) * x.cols];
                let mean = row.iter().sum::<f64>() / x.cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.cols as f64;
                for (c, &v) in row.iter().enumerate() {
                    *o.at_mut(r, c) = (v - mean) / (var + 1e-5).sqrt() * p[0].at(0, c) + p[1].at(0, c);
                }
            }
            o
        }
        LayerKind::LinearUp | LayerKind::LinearDown | LayerKind::Ffn3 => affine(x, &p[0], Some(&p[1])),
        LayerKind::Ffn1 => affine(x, &p[0], None),
        LayerKind::Ffn2 => {
            let mut o = x.clone();
            for r in 0..o.rows {
                for c in 0..o.cols {
                    *o.at_mut(r, c) *= p[0].at(0, c);
                }
            }
            o
        }
        LayerKind::Gelu => M64 {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().map(|&v| gelu64(v)).collect(),
        },
        LayerKind::ResidualAdd { .. } => {
            let s = skip.expect("residual operand");
            M64 {
                rows: x.rows,
                cols: x.cols,
                data: x.data.iter().zip(&s.data).map(|(a, b)| a + b).collect(),
            }
        }
        LayerKind::Classifier { seq_len } => {
            let batch = x.rows / seq_len;
            let mut pooled = M64::zeros(batch, x.cols);
            for b in 0..batch {
                for s in 0..*seq_len {
                    for c in 0..x.cols {
                        *pooled.at_mut(b, c) += x.at(b * seq_len + s, c) / *seq_len as f64;
                    }
                }
            }
            affine(&pooled, &p[0], Some(&p[1]))
        }
    }
}

/// Parameters of every layer as f64.
pub fn params64(stack: &LayerStack) -> Vec<Vec<M64>> {
    stack
        .layers()
        .iter()
        .map(|l| l.params.iter().map(|p| M64::of(&p.value)).collect())
        .collect()
}

/// Whole-stack forward in f64.
pub fn shadow_forward(stack: &LayerStack, params: &[Vec<M64>], x: &M64, external: Option<&M64>) -> M64 {
    let mut inputs: Vec<M64> = Vec::with_capacity(stack.len());
    let mut h = x.clone();
    for (i, layer) in stack.layers().iter().enumerate() {
        inputs.push(h.clone());
        let skip = match layer.kind {
            LayerKind::ResidualAdd { skip: Skip::Layer(j) } => Some(&inputs[j]),
            LayerKind::ResidualAdd { skip: Skip::External } => external,
            _ => None,
        };
        h = shadow_layer(&layer.kind, &params[i], &h, skip);
    }
    h
}

/// Mean cross-entropy in f64.
pub fn shadow_cross_entropy(logits: &M64, labels: &[u32]) -> f64 {
    let mut total = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        let row = &logits.data[r * logits.cols..(r + 1) * logits.cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        total += m + z.ln() - row[l as usize];
    }
    total / labels.len() as f64
}

/// How the scalar loss is formed from the stack output.
#[derive(Debug, Clone)]
pub enum Objective {
    /// `sum(out * probe)`; the upstream gradient is `probe`.
    Probe(Matrix),
    CrossEntropy(Vec<u32>),
}

impl Objective {
    fn value(&self, out: &M64) -> f64 {
        match self {
            Objective::Probe(p) => out.data.iter().zip(p.as_slice()).map(|(a, &b)| a * f64::from(b)).sum(),
            Objective::CrossEntropy(labels) => shadow_cross_entropy(out, labels),
        }
    }
}

/// Relative mismatch of one gradient tensor.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub mismatch: f64,
    pub checked: usize,
}

pub const GRADCHECK_EPS: f64 = 1e-3;
pub const GRADCHECK_TOL: f64 = 1e-2;
const MAX_ENTRIES: usize = 24;

/// Floor for the mismatch denominator. Some gradients are identically zero
/// (the key bias of attention cancels in the softmax), and the ratio of two
/// rounding-noise values says nothing.
pub const GRADCHECK_FLOOR: f64 = 1e-3;

fn mismatch(analytic: &[f64], numeric: &[f64]) -> f64 {
    let max = |v: &[f64]| v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    diff / (max(analytic) + max(numeric)).max(GRADCHECK_FLOOR)
}

fn sample_entries(len: usize, rng: &mut Rng) -> Vec<usize> {
    if len <= MAX_ENTRIES {
        return (0..len).collect();
    }
    (0..MAX_ENTRIES).map(|_| rng.below(len)).collect()
}

/// Compares the stack's analytic gradients (parameters, input unless
/// `tokens_in`, and the external operand) with central differences of the
/// f64 shadow.
pub fn gradcheck(
    stack: &mut LayerStack,
    x: &Matrix,
    external: Option<&Matrix>,
    objective: &Objective,
    seed: u64,
) -> Vec<GradReport> {
    let out = stack.forward_with(x, external).expect("forward");
    let d_out = match objective {
        Objective::Probe(p) => p.clone(),
        Objective::CrossEntropy(labels) => sft_core::nn::cross_entropy(&out, labels).expect("loss").1,
    };
    let grads = stack.backward_with(&d_out, None).expect("backward");

    let mut rng = Rng::seed(seed ^ 0x9e37);
    let params = params64(stack);
    let x64 = M64::of(x);
    let ext64 = external.map(M64::of);
    let loss_with = |params: &[Vec<M64>], x: &M64, ext: Option<&M64>| objective.value(&shadow_forward(stack, params, x, ext));
    let mut reports = Vec::new();

    for (li, layer) in stack.layers().iter().enumerate() {
        for (pi, p) in layer.params.iter().enumerate() {
            let idx = sample_entries(p.value.len(), &mut rng);
            let mut perturbed = params.clone();
            let mut numeric = Vec::with_capacity(idx.len());
            for &e in &idx {
                let orig = perturbed[li][pi].data[e];
                perturbed[li][pi].data[e] = orig + GRADCHECK_EPS;
                let up = loss_with(&perturbed, &x64, ext64.as_ref());
                perturbed[li][pi].data[e] = orig - GRADCHECK_EPS;
                let down = loss_with(&perturbed, &x64, ext64.as_ref());
                perturbed[li][pi].data[e] = orig;
                numeric.push((up - down) / (2.0 * GRADCHECK_EPS));
            }
            let analytic: Vec<f64> = idx.iter().map(|&e| f64::from(p.grad.as_slice()[e])).collect();
            reports.push(GradReport {
                name: format!("{}.{}", layer.name, p.name),
                mismatch: mismatch(&analytic, &numeric),
                checked: idx.len(),
            });
        }
    }

    let tokens_in = matches!(stack.layers().first().map(|l| &l.kind), Some(LayerKind::Embedding { .. }));
    let mut inputs: Vec<(&str, &Matrix, bool)> = Vec::new();
    if !tokens_in {
        inputs.push(("input", &grads.input, false));
    }
    if let Some(g) = &grads.external {
        inputs.push(("external", g, true));
    }
    for (name, g, is_ext) in inputs {
        let idx = sample_entries(g.len(), &mut rng);
        let mut xs = x64.clone();
        let mut es = ext64.clone();
        let mut numeric = Vec::new();
        for &e in &idx {
            let target = if is_ext { &mut es.as_mut().unwrap().data[e] } else { &mut xs.data[e] };
            let orig = *target;
            *target = orig + GRADCHECK_EPS;
            let up = loss_with(&params, &xs, es.as_ref());
            let target = if is_ext { &mut es.as_mut().unwrap().data[e] } else { &mut xs.data[e] };
            *target = orig - GRADCHECK_EPS;
            let down = loss_with(&params, &xs, es.as_ref());
            let target = if is_ext { &mut es.as_mut().unwrap().data[e] } else { &mut xs.data[e] };
            *target = orig;
            numeric.push((up - down) / (2.0 * GRADCHECK_EPS));
        }
        let analytic: Vec<f64> = idx.iter().map(|&e| f64::from(g.as_slice()[e])).collect();
        reports.push(GradReport {
            name: name.to_string(),
            mismatch: mismatch(&analytic, &numeric),
            checked: idx.len(),
        });
    }
    reports
}

pub fn normal(rows: usize, cols: usize, std: f32, rng: &mut Rng) -> Matrix {
    Matrix::seeded_fill(rows, cols, Dist::Normal { mean: 0.0, std }, rng).unwrap()
}

pub const SMALL_BATCH: usize = 2;
pub const SMALL_SEQ: usize = 4;
pub const SMALL_D: usize = 8;
pub const SMALL_H: usize = 12;
pub const SMALL_R: usize = 5;
pub const SMALL_VOCAB: usize = 11;

/// One small single-layer (or tiny multi-layer) case per layer kind, as
/// `(kind label, stack, input, external operand)`.
pub fn layer_cases(seed: u64) -> Vec<(&'static str, LayerStack, Matrix, Option<Matrix>)> {
    let mut rng = Rng::seed(seed);
    let (b, s, d, h, r) = (SMALL_BATCH, SMALL_SEQ, SMALL_D, SMALL_H, SMALL_R);
    let n = b * s;
    let mut rnd = |rows, cols, std| normal(rows, cols, std, &mut rng);
    let single = |l: Layer| LayerStack::new(vec![l]).unwrap();

    let mut cases = Vec::new();
    let tokens = {
        let mut tr = Rng::seed(seed + 1);
        Matrix::from_vec(b, s, (0..n).map(|_| tr.below(SMALL_VOCAB) as f32).collect()).unwrap()
    };
    cases.push((
        "embedding",
        single(Layer::new(
            "embed",
            LayerKind::Embedding { seq_len: s },
            vec![Param::new("tok", rnd(SMALL_VOCAB, d, 1.0)), Param::new("pos", rnd(s, d, 1.0))],
        )),
        tokens,
        None,
    ));
    let attn_params = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"]
        .into_iter()
        .map(|name| {
            let rows = if name.starts_with('w') { d } else { 1 };
            Param::new(name, rnd(rows, d, 0.5))
        })
        .collect();
    cases.push((
        "attention",
        single(Layer::new("attn", LayerKind::Attention { heads: 2, seq_len: s }, attn_params)),
        rnd(n, d, 1.0),
        None,
    ));
    cases.push((
        "layer_norm",
        single(Layer::new(
            "norm",
            LayerKind::LayerNorm,
            vec![Param::new("gamma", rnd(1, d, 1.0)), Param::new("beta", rnd(1, d, 1.0))],
        )),
        rnd(n, d, 1.0),
        None,
    ));
    let lin = |name: &str, kind: LayerKind, i: usize, o: usize, rnd: &mut dyn FnMut(usize, usize, f32) -> Matrix| {
        Layer::new(name, kind, vec![Param::new("weight", rnd(i, o, 0.5)), Param::new("bias", rnd(1, o, 0.5))])
    };
    cases.push(("linear_up", single(lin("up", LayerKind::LinearUp, d, h, &mut rnd)), rnd(n, d, 1.0), None));
    cases.push(("gelu", single(Layer::new("gelu", LayerKind::Gelu, vec![])), rnd(n, h, 1.5), None));
    cases.push(("linear_down", single(lin("down", LayerKind::LinearDown, h, d, &mut rnd)), rnd(n, h, 1.0), None));
    cases.push((
        "ffn1",
        single(Layer::new("ffn1", LayerKind::Ffn1, vec![Param::new("weight", rnd(h, r, 0.5))])),
        rnd(n, h, 1.0),
        None,
    ));
    cases.push((
        "ffn2",
        single(Layer::new("ffn2", LayerKind::Ffn2, vec![Param::new("sigma", rnd(1, r, 1.0))])),
        rnd(n, r, 1.0),
        None,
    ));
    cases.push(("ffn3", single(lin("ffn3", LayerKind::Ffn3, r, d, &mut rnd)), rnd(n, r, 1.0), None));
    cases.push((
        "classifier",
        single(lin("classifier", LayerKind::Classifier { seq_len: s }, d, 3, &mut rnd)),
        rnd(n, d, 1.0),
        None,
    ));
    // Internal skip: the gradient reaches the LayerNorm input by two paths.
    cases.push((
        "residual_add",
        LayerStack::new(vec![
            Layer::new(
                "norm",
                LayerKind::LayerNorm,
                vec![Param::new("gamma", rnd(1, d, 1.0)), Param::new("beta", rnd(1, d, 1.0))],
            ),
            Layer::new("gelu", LayerKind::Gelu, vec![]),
            Layer::new("res", LayerKind::ResidualAdd { skip: Skip::Layer(0) }, vec![]),
        ])
        .unwrap(),
        rnd(n, d, 1.0),
        None,
    ));
    cases.push((
        "residual_add_external",
        LayerStack::new(vec![
            Layer::new("gelu", LayerKind::Gelu, vec![]),
            Layer::new("res", LayerKind::ResidualAdd { skip: Skip::External }, vec![]),
        ])
        .unwrap(),
        rnd(n, d, 1.0),
        Some(rnd(n, d, 1.0)),
    ));
    cases
}

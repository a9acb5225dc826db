use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f32 = 0.797_884_6;
const GELU_A: f32 = 0.044_715;

/// Where a [`LayerKind::ResidualAdd`] takes its second operand from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Skip {
    /// The input of the layer at this index in the same stack.
    Layer(usize),
    /// A matrix handed to the stack alongside its main input. Used on the
    /// cloud side when the residual of the split block is kept and shipped.
    External,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    /// Token plus learned positional embedding. Input is a `batch x seq`
    /// matrix of token ids stored as floats.
    Embedding { seq_len: usize },
    Attention { heads: usize, seq_len: usize },
    LayerNorm,
    LinearUp,
    Gelu,
    LinearDown,
    ResidualAdd { skip: Skip },
    /// Mean-pool each sequence, then a linear map to class logits.
    Classifier { seq_len: usize },
    /// Projection onto the leading singular vectors (no bias). Last edge layer.
    Ffn1,
    /// Trainable diagonal scaling by the singular values.
    Ffn2,
    /// Right singular vectors plus the original bias.
    Ffn3,
}

impl LayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Embedding { .. } => "embedding",
            LayerKind::Attention { .. } => "attention",
            LayerKind::LayerNorm => "layer_norm",
            LayerKind::LinearUp => "linear_up",
            LayerKind::Gelu => "gelu",
            LayerKind::LinearDown => "linear_down",
            LayerKind::ResidualAdd { .. } => "residual_add",
            LayerKind::Classifier { .. } => "classifier",
            LayerKind::Ffn1 => "ffn1",
            LayerKind::Ffn2 => "ffn2",
            LayerKind::Ffn3 => "ffn3",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: &'static str,
    pub value: Matrix,
    pub grad: Matrix,
}

impl Param {
    pub fn new(name: &'static str, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self { name, value, grad }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub params: Vec<Param>,
    pub(crate) has_grads: bool,
}

/// Everything a layer's backward pass needs from its forward pass.
#[derive(Debug, Clone)]
pub(crate) enum Cache {
    Nothing,
    Input(Matrix),
    Tokens(Vec<usize>, usize),
    Attention(AttentionCache),
    LayerNorm { xhat: Matrix, inv_std: Vec<f32> },
    Pooled { pooled: Matrix, batch: usize },
}

#[derive(Debug, Clone)]
pub(crate) struct AttentionCache {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    ctx: Matrix,
    /// Softmax rows per `(batch, head)`, each `seq x seq`.
    probs: Vec<Matrix>,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind, params: Vec<Param>) -> Self {
        Self {
            name: name.into(),
            kind,
            params,
            has_grads: false,
        }
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn p(&self, i: usize) -> &Matrix {
        &self.params[i].value
    }

    pub(crate) fn forward(&self, x: &Matrix, skip: Option<&Matrix>) -> Result<(Matrix, Cache)> {
        match &self.kind {
            LayerKind::Embedding { seq_len } => self.embedding_forward(x, *seq_len),
            LayerKind::Attention { heads, seq_len } => self.attention_forward(x, *heads, *seq_len),
            LayerKind::LayerNorm => layer_norm_forward(x, self.p(0), self.p(1)),
            LayerKind::LinearUp | LayerKind::LinearDown | LayerKind::Ffn3 => {
                let y = linear(x, self.p(0), Some(self.p(1)))?;
                Ok((y, Cache::Input(x.clone())))
            }
            LayerKind::Ffn1 => Ok((linear(x, self.p(0), None)?, Cache::Input(x.clone()))),
            LayerKind::Ffn2 => {
                let sigma = self.p(0);
                check_row_vector(sigma, x.cols(), "ffn2 scale")?;
                let mut y = x.clone();
                for r in 0..y.rows() {
                    for (v, s) in y.row_mut(r).iter_mut().zip(sigma.as_slice()) {
                        *v *= s;
                    }
                }
                Ok((y, Cache::Input(x.clone())))
            }
            LayerKind::Gelu => Ok((x.map(gelu), Cache::Input(x.clone()))),
            LayerKind::ResidualAdd { .. } => {
                let skip = skip.ok_or_else(|| {
                    Error::Shape(format!("{}: residual operand missing", self.name))
                })?;
                Ok((x.add(skip)?, Cache::Nothing))
            }
            LayerKind::Classifier { seq_len } => self.classifier_forward(x, *seq_len),
        }
    }

    /// Writes parameter gradients and returns the gradient w.r.t. the input.
    pub(crate) fn backward(&mut self, cache: Cache, d_out: &Matrix) -> Result<Matrix> {
        let d_in = match (&self.kind, cache) {
            (LayerKind::Embedding { .. }, Cache::Tokens(ids, batch)) => {
                self.embedding_backward(&ids, batch, d_out)?
            }
            (LayerKind::Attention { heads, seq_len }, Cache::Attention(c)) => {
                let (heads, seq_len) = (*heads, *seq_len);
                self.attention_backward(c, heads, seq_len, d_out)?
            }
            (LayerKind::LayerNorm, Cache::LayerNorm { xhat, inv_std }) => {
                let (d_x, d_gamma, d_beta) =
                    layer_norm_backward(&xhat, &inv_std, &self.params[0].value, d_out)?;
                self.params[0].grad = d_gamma;
                self.params[1].grad = d_beta;
                d_x
            }
            (LayerKind::LinearUp | LayerKind::LinearDown | LayerKind::Ffn3, Cache::Input(x)) => {
                let d_x = d_out.matmul(&self.params[0].value.transpose())?;
                self.params[0].grad = x.t_matmul(d_out)?;
                self.params[1].grad = d_out.sum_rows();
                d_x
            }
            (LayerKind::Ffn1, Cache::Input(x)) => {
                let d_x = d_out.matmul(&self.params[0].value.transpose())?;
                self.params[0].grad = x.t_matmul(d_out)?;
                d_x
            }
            (LayerKind::Ffn2, Cache::Input(x)) => {
                check_same(&x, d_out, &self.name)?;
                let sigma = &self.params[0].value;
                let mut d_sigma = Matrix::zeros(1, sigma.cols());
                let mut d_x = d_out.clone();
                for r in 0..x.rows() {
                    let (xr, dr) = (x.row(r), d_out.row(r));
                    for c in 0..sigma.cols() {
                        let acc = d_sigma.get(0, c) + xr[c] * dr[c];
                        d_sigma.set(0, c, acc);
                    }
                    for (v, s) in d_x.row_mut(r).iter_mut().zip(sigma.as_slice()) {
                        *v *= s;
                    }
                }
                self.params[0].grad = d_sigma;
                d_x
            }
            (LayerKind::Gelu, Cache::Input(x)) => {
                check_same(&x, d_out, &self.name)?;
                let data = x
                    .as_slice()
                    .iter()
                    .zip(d_out.as_slice())
                    .map(|(&xv, &d)| d * gelu_grad(xv))
                    .collect();
                Matrix::from_vec(x.rows(), x.cols(), data)?
            }
            (LayerKind::ResidualAdd { .. }, Cache::Nothing) => d_out.clone(),
            (LayerKind::Classifier { seq_len }, Cache::Pooled { pooled, batch }) => {
                let seq_len = *seq_len;
                let d_pooled = d_out.matmul(&self.params[0].value.transpose())?;
                self.params[0].grad = pooled.t_matmul(d_out)?;
                self.params[1].grad = d_out.sum_rows();
                let inv = 1.0 / seq_len as f32;
                let mut d_x = Matrix::zeros(batch * seq_len, d_pooled.cols());
                for b in 0..batch {
                    for s in 0..seq_len {
                        for (o, g) in d_x.row_mut(b * seq_len + s).iter_mut().zip(d_pooled.row(b)) {
                            *o = g * inv;
                        }
                    }
                }
                d_x
            }
            (_, cache) => {
                return Err(Error::BackwardBeforeForward(format!(
                    "{}: cache {:?} does not belong to this layer",
                    self.name,
                    std::mem::discriminant(&cache)
                )))
            }
        };
        self.has_grads = true;
        Ok(d_in)
    }

    fn embedding_forward(&self, x: &Matrix, seq_len: usize) -> Result<(Matrix, Cache)> {
        let (tok, pos) = (self.p(0), self.p(1));
        if x.cols() != seq_len {
            return Err(Error::Shape(format!(
                "{}: expected token matrix with {seq_len} columns, got {}x{}",
                self.name,
                x.rows(),
                x.cols()
            )));
        }
        let batch = x.rows();
        let d = tok.cols();
        let mut ids = Vec::with_capacity(x.len());
        for &v in x.as_slice() {
            if v < 0.0 || v.fract() != 0.0 || v as usize >= tok.rows() {
                return Err(Error::Data(format!(
                    "{}: token id {v} outside vocabulary of {}",
                    self.name,
                    tok.rows()
                )));
            }
            ids.push(v as usize);
        }
        let mut out = Matrix::zeros(batch * seq_len, d);
        for (row, &id) in ids.iter().enumerate() {
            let s = row % seq_len;
            let (t, p) = (tok.row(id), pos.row(s));
            for ((o, a), b) in out.row_mut(row).iter_mut().zip(t).zip(p) {
                *o = a + b;
            }
        }
        Ok((out, Cache::Tokens(ids, batch)))
    }

    fn embedding_backward(&mut self, ids: &[usize], batch: usize, d_out: &Matrix) -> Result<Matrix> {
        let seq_len = ids.len() / batch.max(1);
        let d = self.params[0].value.cols();
        if d_out.shape() != (ids.len(), d) {
            return Err(Error::Shape(format!(
                "{}: gradient {}x{} for {} tokens of width {d}",
                self.name,
                d_out.rows(),
                d_out.cols(),
                ids.len()
            )));
        }
        let mut d_tok = Matrix::zeros(self.params[0].value.rows(), d);
        let mut d_pos = Matrix::zeros(self.params[1].value.rows(), d);
        for (row, &id) in ids.iter().enumerate() {
            let g = d_out.row(row);
            for (o, v) in d_tok.row_mut(id).iter_mut().zip(g) {
                *o += v;
            }
            for (o, v) in d_pos.row_mut(row % seq_len).iter_mut().zip(g) {
                *o += v;
            }
        }
        self.params[0].grad = d_tok;
        self.params[1].grad = d_pos;
        Ok(Matrix::zeros(batch, seq_len))
    }

    fn attention_forward(&self, x: &Matrix, heads: usize, seq_len: usize) -> Result<(Matrix, Cache)> {
        let d = x.cols();
        if !x.rows().is_multiple_of(seq_len) || !d.is_multiple_of(heads) {
            return Err(Error::Shape(format!(
                "{}: {}x{} input with seq_len {seq_len}, {heads} heads",
                self.name,
                x.rows(),
                d
            )));
        }
        let q = linear(x, self.p(0), Some(self.p(1)))?;
        let k = linear(x, self.p(2), Some(self.p(3)))?;
        let v = linear(x, self.p(4), Some(self.p(5)))?;
        let batch = x.rows() / seq_len;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut ctx = Matrix::zeros(x.rows(), d);
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let rows = (b * seq_len, (b + 1) * seq_len);
            for h in 0..heads {
                let cols = (h * dh, (h + 1) * dh);
                let qh = block(&q, rows, cols);
                let kh = block(&k, rows, cols);
                let vh = block(&v, rows, cols);
                let mut scores = qh.matmul(&kh.transpose())?.scale(scale);
                softmax_rows(&mut scores);
                let ch = scores.matmul(&vh)?;
                put_block(&mut ctx, &ch, rows.0, cols.0);
                probs.push(scores);
            }
        }
        let out = linear(&ctx, self.p(6), Some(self.p(7)))?;
        let cache = AttentionCache {
            x: x.clone(),
            q,
            k,
            v,
            ctx,
            probs,
        };
        Ok((out, Cache::Attention(cache)))
    }

    fn attention_backward(
        &mut self,
        c: AttentionCache,
        heads: usize,
        seq_len: usize,
        d_out: &Matrix,
    ) -> Result<Matrix> {
        check_same(&c.ctx, d_out, &self.name)?;
        let d = c.x.cols();
        let dh = d / heads;
        let batch = c.x.rows() / seq_len;
        let scale = 1.0 / (dh as f32).sqrt();

        let d_ctx = d_out.matmul(&self.p(6).transpose())?;
        let d_wo = c.ctx.t_matmul(d_out)?;
        let d_bo = d_out.sum_rows();

        let mut d_q = Matrix::zeros(c.x.rows(), d);
        let mut d_k = Matrix::zeros(c.x.rows(), d);
        let mut d_v = Matrix::zeros(c.x.rows(), d);
        for b in 0..batch {
            let rows = (b * seq_len, (b + 1) * seq_len);
            for h in 0..heads {
                let cols = (h * dh, (h + 1) * dh);
                let p = &c.probs[b * heads + h];
                let qh = block(&c.q, rows, cols);
                let kh = block(&c.k, rows, cols);
                let vh = block(&c.v, rows, cols);
                let dch = block(&d_ctx, rows, cols);

                let d_p = dch.matmul(&vh.transpose())?;
                put_block(&mut d_v, &p.t_matmul(&dch)?, rows.0, cols.0);
                let mut d_s = Matrix::zeros(seq_len, seq_len);
                for i in 0..seq_len {
                    let (pr, dpr) = (p.row(i), d_p.row(i));
                    let mut dot = 0.0f32;
                    for j in 0..seq_len {
                        dot += pr[j] * dpr[j];
                    }
                    for (j, o) in d_s.row_mut(i).iter_mut().enumerate() {
                        *o = pr[j] * (dpr[j] - dot) * scale;
                    }
                }
                put_block(&mut d_q, &d_s.matmul(&kh)?, rows.0, cols.0);
                put_block(&mut d_k, &d_s.t_matmul(&qh)?, rows.0, cols.0);
            }
        }

        let mut d_x = d_q.matmul(&self.p(0).transpose())?;
        d_x.add_assign(&d_k.matmul(&self.p(2).transpose())?)?;
        d_x.add_assign(&d_v.matmul(&self.p(4).transpose())?)?;

        let grads = [
            c.x.t_matmul(&d_q)?,
            d_q.sum_rows(),
            c.x.t_matmul(&d_k)?,
            d_k.sum_rows(),
            c.x.t_matmul(&d_v)?,
            d_v.sum_rows(),
            d_wo,
            d_bo,
        ];
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.grad = g;
        }
        Ok(d_x)
    }

    fn classifier_forward(&self, x: &Matrix, seq_len: usize) -> Result<(Matrix, Cache)> {
        if !x.rows().is_multiple_of(seq_len) {
            return Err(Error::Shape(format!(
                "{}: {} rows is not a whole number of length-{seq_len} sequences",
                self.name,
                x.rows()
            )));
        }
        let batch = x.rows() / seq_len;
        let inv = 1.0 / seq_len as f32;
        let mut pooled = Matrix::zeros(batch, x.cols());
        for b in 0..batch {
            let out = pooled.row_mut(b);
            for s in 0..seq_len {
                for (o, v) in out.iter_mut().zip(x.row(b * seq_len + s)) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let logits = linear(&pooled, self.p(0), Some(self.p(1)))?;
        Ok((logits, Cache::Pooled { pooled, batch }))
    }
}

/// `x w + b` with `b` broadcast over rows.
pub fn linear(x: &Matrix, w: &Matrix, b: Option<&Matrix>) -> Result<Matrix> {
    let mut y = x.matmul(w)?;
    if let Some(b) = b {
        y.add_row_broadcast(b)?;
    }
    Ok(y)
}

#[inline]
pub fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn layer_norm_forward(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> Result<(Matrix, Cache)> {
    let n = x.cols();
    check_row_vector(gamma, n, "layer norm gamma")?;
    check_row_vector(beta, n, "layer norm beta")?;
    let mut xhat = Matrix::zeros(x.rows(), n);
    let mut y = Matrix::zeros(x.rows(), n);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
        let var = row
            .iter()
            .map(|&v| (f64::from(v) - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let istd = (1.0 / (var + LAYER_NORM_EPS).sqrt()) as f32;
        let mean = mean as f32;
        inv_std.push(istd);
        for (c, &v) in row.iter().enumerate() {
            let h = (v - mean) * istd;
            xhat.set(r, c, h);
            y.set(r, c, h * gamma.get(0, c) + beta.get(0, c));
        }
    }
    Ok((y, Cache::LayerNorm { xhat, inv_std }))
}

fn layer_norm_backward(
    xhat: &Matrix,
    inv_std: &[f32],
    gamma: &Matrix,
    d_out: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    check_same(xhat, d_out, "layer norm")?;
    let n = xhat.cols();
    let nf = n as f32;
    let mut d_gamma = Matrix::zeros(1, n);
    let mut d_beta = Matrix::zeros(1, n);
    let mut d_x = Matrix::zeros(xhat.rows(), n);
    let mut d_xhat = vec![0.0f32; n];
    for (r, &istd) in inv_std.iter().enumerate() {
        let (h, g) = (xhat.row(r), d_out.row(r));
        let mut sum_d = 0.0f32;
        let mut sum_dh = 0.0f32;
        for c in 0..n {
            d_gamma.as_mut_slice()[c] += g[c] * h[c];
            d_beta.as_mut_slice()[c] += g[c];
            d_xhat[c] = g[c] * gamma.get(0, c);
            sum_d += d_xhat[c];
            sum_dh += d_xhat[c] * h[c];
        }
        let scale = istd / nf;
        for (c, o) in d_x.row_mut(r).iter_mut().enumerate() {
            *o = scale * (nf * d_xhat[c] - sum_d - h[c] * sum_dh);
        }
    }
    Ok((d_x, d_gamma, d_beta))
}

fn block(m: &Matrix, rows: (usize, usize), cols: (usize, usize)) -> Matrix {
    let mut out = Matrix::zeros(rows.1 - rows.0, cols.1 - cols.0);
    for r in rows.0..rows.1 {
        out.row_mut(r - rows.0).copy_from_slice(&m.row(r)[cols.0..cols.1]);
    }
    out
}

fn put_block(dst: &mut Matrix, src: &Matrix, row0: usize, col0: usize) {
    for r in 0..src.rows() {
        dst.row_mut(row0 + r)[col0..col0 + src.cols()].copy_from_slice(src.row(r));
    }
}

fn check_same(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: gradient {}x{} for activation {}x{}",
            b.rows(),
            b.cols(),
            a.rows(),
            a.cols()
        )));
    }
    Ok(())
}

fn check_row_vector(v: &Matrix, n: usize, what: &str) -> Result<()> {
    if v.shape() != (1, n) {
        return Err(Error::Shape(format!(
            "{what}: expected 1x{n}, got {}x{}",
            v.rows(),
            v.cols()
        )));
    }
    Ok(())
}

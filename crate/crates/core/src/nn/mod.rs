//! A small post-norm transformer encoder classifier with hand-written
//! backward passes.

mod checkpoint;
mod layer;
mod loss;
mod optim;
mod stack;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layer::{gelu, gelu_grad, linear, softmax_rows, Layer, LayerKind, Param, Skip, LAYER_NORM_EPS};
pub use loss::{accuracy, cross_entropy};
pub use optim::{OptimAlgorithm, OptimState};
pub use stack::{InputGrads, LayerStack};

use crate::error::{Error, Result};
use crate::tensor::{Dist, Matrix, Rng};

/// Transformer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    /// Hidden width `d`.
    pub d_model: usize,
    /// Inner FFN width `H`.
    pub ffn_dim: usize,
    /// Number of transformer blocks `L`.
    pub n_blocks: usize,
    pub n_heads: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            seq_len: 16,
            d_model: 32,
            ffn_dim: 128,
            n_blocks: 4,
            n_heads: 2,
            n_classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
            ("d_model", self.d_model),
            ("ffn_dim", self.ffn_dim),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.ffn_dim < self.d_model {
            return Err(Error::Config(format!(
                "ffn_dim {} is smaller than d_model {}",
                self.ffn_dim, self.d_model
            )));
        }
        Ok(())
    }

    /// Stable 64-bit FNV-1a digest of the hyperparameters. Both ends of a
    /// split session compare it during the handshake.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in [
            self.vocab_size,
            self.seq_len,
            self.d_model,
            self.ffn_dim,
            self.n_blocks,
            self.n_heads,
            self.n_classes,
        ] {
            for byte in (v as u64).to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Layer names used inside the stack. Blocks are numbered from 1.
pub mod names {
    pub const EMBEDDING: &str = "embed";
    pub const CLASSIFIER: &str = "classifier";

    pub fn attn(block: usize) -> String {
        format!("block{block}.attn")
    }
    pub fn attn_res(block: usize) -> String {
        format!("block{block}.attn_res")
    }
    pub fn attn_norm(block: usize) -> String {
        format!("block{block}.attn_norm")
    }
    pub fn ffn_up(block: usize) -> String {
        format!("block{block}.ffn_up")
    }
    pub fn gelu(block: usize) -> String {
        format!("block{block}.gelu")
    }
    pub fn ffn_down(block: usize) -> String {
        format!("block{block}.ffn_down")
    }
    pub fn ffn_res(block: usize) -> String {
        format!("block{block}.ffn_res")
    }
    pub fn ffn_norm(block: usize) -> String {
        format!("block{block}.ffn_norm")
    }
    pub fn ffn1(block: usize) -> String {
        format!("ffn1.{block}")
    }
    pub fn ffn2(block: usize) -> String {
        format!("ffn2.{block}")
    }
    pub fn ffn3(block: usize) -> String {
        format!("ffn3.{block}")
    }
}

fn normal(rows: usize, cols: usize, std: f32, rng: &mut Rng) -> Result<Matrix> {
    Matrix::seeded_fill(rows, cols, Dist::Normal { mean: 0.0, std }, rng)
}

fn dense(rows: usize, cols: usize, rng: &mut Rng) -> Result<Matrix> {
    normal(rows, cols, 1.0 / (rows as f32).sqrt(), rng)
}

/// Builds a freshly initialised model. The result plays the role of the
/// "pretrained" network that fine-tuning starts from.
///
/// Weights are drawn `N(0, 1/fan_in)`, embeddings `N(0, 1)`, biases and
/// LayerNorm shifts start at zero, LayerNorm scales at one. The classifier
/// uses a small `N(0, 0.02^2)` so the initial logits are nearly uniform.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<LayerStack> {
    cfg.validate()?;
    let mut rng = Rng::seed(seed);
    let d = cfg.d_model;
    let h = cfg.ffn_dim;
    let s = cfg.seq_len;
    let mut layers = vec![Layer::new(
        names::EMBEDDING,
        LayerKind::Embedding { seq_len: s },
        vec![
            Param::new("tok", normal(cfg.vocab_size, d, 1.0, &mut rng)?),
            Param::new("pos", normal(s, d, 1.0, &mut rng)?),
        ],
    )];
    let norm = |name: String| {
        Layer::new(
            name,
            LayerKind::LayerNorm,
            vec![
                Param::new("gamma", Matrix::filled(1, d, 1.0)),
                Param::new("beta", Matrix::zeros(1, d)),
            ],
        )
    };
    for b in 1..=cfg.n_blocks {
        let attn_idx = layers.len();
        let mut attn = Vec::new();
        for w in ["q", "k", "v", "o"] {
            let (wn, bn): (&'static str, &'static str) = match w {
                "q" => ("wq", "bq"),
                "k" => ("wk", "bk"),
                "v" => ("wv", "bv"),
                _ => ("wo", "bo"),
            };
            attn.push(Param::new(wn, dense(d, d, &mut rng)?));
            attn.push(Param::new(bn, Matrix::zeros(1, d)));
        }
        layers.push(Layer::new(
            names::attn(b),
            LayerKind::Attention {
                heads: cfg.n_heads,
                seq_len: s,
            },
            attn,
        ));
        layers.push(Layer::new(
            names::attn_res(b),
            LayerKind::ResidualAdd { skip: Skip::Layer(attn_idx) },
            vec![],
        ));
        layers.push(norm(names::attn_norm(b)));
        let up_idx = layers.len();
        layers.push(Layer::new(
            names::ffn_up(b),
            LayerKind::LinearUp,
            vec![
                Param::new("weight", dense(d, h, &mut rng)?),
                Param::new("bias", Matrix::zeros(1, h)),
            ],
        ));
        layers.push(Layer::new(names::gelu(b), LayerKind::Gelu, vec![]));
        layers.push(Layer::new(
            names::ffn_down(b),
            LayerKind::LinearDown,
            vec![
                Param::new("weight", dense(h, d, &mut rng)?),
                Param::new("bias", Matrix::zeros(1, d)),
            ],
        ));
        layers.push(Layer::new(
            names::ffn_res(b),
            LayerKind::ResidualAdd { skip: Skip::Layer(up_idx) },
            vec![],
        ));
        layers.push(norm(names::ffn_norm(b)));
    }
    layers.push(Layer::new(
        names::CLASSIFIER,
        LayerKind::Classifier { seq_len: s },
        vec![
            Param::new("weight", normal(d, cfg.n_classes, 0.02, &mut rng)?),
            Param::new("bias", Matrix::zeros(1, cfg.n_classes)),
        ],
    ));
    LayerStack::new(layers)
}

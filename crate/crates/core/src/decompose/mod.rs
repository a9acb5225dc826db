//! Low-rank rewrite of a block's FFN down-projection.
//!
//! The down-projection `y = x W + b` with `W` of shape `H x d` is factored as
//! `W = u diag(sigma) v` and replaced by three trainable layers:
//!
//! | layer  | map            | parameters          | side  |
//! |--------|----------------|---------------------|-------|
//! | FFN-1  | `H -> R`       | `u` (`H x R`)       | edge  |
//! | FFN-2  | `R -> R` diag  | `sigma` (`1 x R`)   | cloud |
//! | FFN-3  | `R -> d`       | `v` (`R x d`), `b`  | cloud |
//!
//! so only the `R`-wide output of FFN-1 has to cross the network.

mod svd;

pub use svd::{reconstruction_error, svd, svd64, Svd64, SvdResult, MAX_SWEEPS, ORTHOGONALITY_TOL};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{names, Layer, LayerKind, LayerStack, ModelConfig, Param};
use crate::tensor::Matrix;

/// What happens to the residual connection around the decomposed FFN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResidualMode {
    /// Removed, so the cloud needs nothing but the rank-`R` activation.
    Eliminated,
    /// Kept; only valid for single-process runs.
    KeptLocal,
    /// Kept; the edge ships the block input alongside the activation.
    KeptWithTransfer,
}

impl ResidualMode {
    pub fn code(self) -> u8 {
        match self {
            ResidualMode::Eliminated => 0,
            ResidualMode::KeptLocal => 1,
            ResidualMode::KeptWithTransfer => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ResidualMode::Eliminated),
            1 => Some(ResidualMode::KeptLocal),
            2 => Some(ResidualMode::KeptWithTransfer),
            _ => None,
        }
    }
}

impl fmt::Display for ResidualMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResidualMode::Eliminated => "eliminated",
            ResidualMode::KeptLocal => "kept-local",
            ResidualMode::KeptWithTransfer => "kept-transfer",
        })
    }
}

impl FromStr for ResidualMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "eliminated" | "none" => Ok(ResidualMode::Eliminated),
            "kept-local" | "local" => Ok(ResidualMode::KeptLocal),
            "kept-transfer" | "kept-with-transfer" | "transfer" => Ok(ResidualMode::KeptWithTransfer),
            other => Err(Error::Plan(format!("unknown residual mode {other:?}"))),
        }
    }
}

/// Which block to split at, how many singular components to keep, and what
/// to do with the block's FFN residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SplitPlan {
    /// Block index, counted from 1.
    pub split_layer: usize,
    pub rank: usize,
    pub residual: ResidualMode,
}

impl SplitPlan {
    pub fn new(split_layer: usize, rank: usize, residual: ResidualMode) -> Self {
        Self {
            split_layer,
            rank,
            residual,
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.split_layer == 0 || self.split_layer > cfg.n_blocks {
            return Err(Error::Plan(format!(
                "split layer {} outside 1..={}",
                self.split_layer, cfg.n_blocks
            )));
        }
        let max_rank = cfg.d_model.min(cfg.ffn_dim);
        if self.rank == 0 || self.rank > max_rank {
            return Err(Error::Plan(format!("rank {} outside 1..={max_rank}", self.rank)));
        }
        Ok(())
    }
}

/// Returns a copy of `stack` with block `plan.split_layer`'s down-projection
/// replaced by FFN-1/FFN-2/FFN-3 initialised from its rank-`plan.rank` SVD.
/// With [`ResidualMode::Eliminated`] the residual add around that FFN is
/// dropped; the following LayerNorm stays.
pub fn decompose_ffn(stack: &LayerStack, plan: &SplitPlan) -> Result<LayerStack> {
    let l = plan.split_layer;
    if l == 0 {
        return Err(Error::Plan("split layer is counted from 1".into()));
    }
    let down_name = names::ffn_down(l);
    let idx = stack
        .index_of(&down_name)
        .ok_or_else(|| Error::Plan(format!("no layer {down_name}; block missing or already decomposed")))?;
    let down = &stack.layers()[idx];
    let w = &down.params[0].value;
    let b = &down.params[1].value;
    let max_rank = w.rows().min(w.cols());
    if plan.rank == 0 || plan.rank > max_rank {
        return Err(Error::Plan(format!("rank {} outside 1..={max_rank}", plan.rank)));
    }
    let factors = svd(w)?.truncate(plan.rank)?;
    let new_layers = vec![
        Layer::new(names::ffn1(l), LayerKind::Ffn1, vec![Param::new("weight", factors.u)]),
        Layer::new(
            names::ffn2(l),
            LayerKind::Ffn2,
            vec![Param::new("sigma", Matrix::from_vec(1, plan.rank, factors.sigma)?)],
        ),
        Layer::new(
            names::ffn3(l),
            LayerKind::Ffn3,
            vec![Param::new("weight", factors.v), Param::new("bias", b.clone())],
        ),
    ];
    let mut out = stack.clone();
    out.splice(idx..idx + 1, new_layers)?;
    if plan.residual == ResidualMode::Eliminated {
        let res = out
            .index_of(&names::ffn_res(l))
            .ok_or_else(|| Error::Plan(format!("block {l} has no FFN residual to remove")))?;
        out.splice(res..res + 1, vec![])?;
    }
    Ok(out)
}

/// Architecture of a decomposed model with the given plan, without running
/// an SVD. Parameters are placeholders, to be overwritten from a checkpoint.
pub fn decomposed_skeleton(stack: &LayerStack, plan: &SplitPlan) -> Result<LayerStack> {
    let l = plan.split_layer;
    let down_name = names::ffn_down(l);
    let idx = stack
        .index_of(&down_name)
        .ok_or_else(|| Error::Plan(format!("no layer {down_name}")))?;
    let (h, d) = stack.layers()[idx].params[0].value.shape();
    if plan.rank == 0 || plan.rank > h.min(d) {
        return Err(Error::Plan(format!("rank {} outside 1..={}", plan.rank, h.min(d))));
    }
    let r = plan.rank;
    let new_layers = vec![
        Layer::new(names::ffn1(l), LayerKind::Ffn1, vec![Param::new("weight", Matrix::zeros(h, r))]),
        Layer::new(names::ffn2(l), LayerKind::Ffn2, vec![Param::new("sigma", Matrix::zeros(1, r))]),
        Layer::new(
            names::ffn3(l),
            LayerKind::Ffn3,
            vec![Param::new("weight", Matrix::zeros(r, d)), Param::new("bias", Matrix::zeros(1, d))],
        ),
    ];
    let mut out = stack.clone();
    out.splice(idx..idx + 1, new_layers)?;
    if plan.residual == ResidualMode::Eliminated {
        if let Some(res) = out.index_of(&names::ffn_res(l)) {
            out.splice(res..res + 1, vec![])?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_model;
    use crate::tensor::{Dist, Rng};

    fn tokens(batch: usize, cfg: &ModelConfig, seed: u64) -> Matrix {
        let mut rng = Rng::seed(seed);
        let data = (0..batch * cfg.seq_len).map(|_| rng.below(cfg.vocab_size) as f32).collect();
        Matrix::from_vec(batch, cfg.seq_len, data).unwrap()
    }

    #[test]
    fn plan_validation() {
        let cfg = ModelConfig::default();
        assert!(SplitPlan::new(0, 4, ResidualMode::Eliminated).validate(&cfg).is_err());
        assert!(SplitPlan::new(5, 4, ResidualMode::Eliminated).validate(&cfg).is_err());
        assert!(SplitPlan::new(4, 0, ResidualMode::Eliminated).validate(&cfg).is_err());
        assert!(SplitPlan::new(4, 33, ResidualMode::Eliminated).validate(&cfg).is_err());
        SplitPlan::new(4, 32, ResidualMode::Eliminated).validate(&cfg).unwrap();
    }

    #[test]
    fn residual_mode_parsing() {
        for m in [ResidualMode::Eliminated, ResidualMode::KeptLocal, ResidualMode::KeptWithTransfer] {
            assert_eq!(m.to_string().parse::<ResidualMode>().unwrap(), m);
            assert_eq!(ResidualMode::from_code(m.code()), Some(m));
        }
        assert!("sometimes".parse::<ResidualMode>().is_err());
    }

    #[test]
    fn decomposition_layout() {
        let cfg = ModelConfig { n_blocks: 2, ..Default::default() };
        let base = build_model(&cfg, 1).unwrap();
        let plan = SplitPlan::new(2, 4, ResidualMode::Eliminated);
        let dec = decompose_ffn(&base, &plan).unwrap();
        assert_eq!(dec.len(), base.len() + 1);
        assert!(dec.layer("block2.ffn_down").is_none());
        assert!(dec.layer("block2.ffn_res").is_none());
        assert!(dec.layer("block1.ffn_res").is_some());
        assert_eq!(dec.layer("ffn1.2").unwrap().params[0].value.shape(), (128, 4));
        assert_eq!(dec.layer("ffn2.2").unwrap().params[0].value.shape(), (1, 4));
        assert_eq!(dec.layer("ffn3.2").unwrap().params[0].value.shape(), (4, 32));
        // Decomposing the same block twice is an error.
        assert!(decompose_ffn(&dec, &plan).is_err());

        let kept = decompose_ffn(&base, &SplitPlan { residual: ResidualMode::KeptLocal, ..plan }).unwrap();
        assert_eq!(kept.len(), base.len() + 2);
        let skel = decomposed_skeleton(&base, &plan).unwrap();
        let names_a: Vec<_> = skel.named_params().into_iter().map(|(n, m)| (n, m.shape())).collect();
        let names_b: Vec<_> = dec.named_params().into_iter().map(|(n, m)| (n, m.shape())).collect();
        assert_eq!(names_a, names_b);
    }

    #[test]
    fn rank_one_ffn_matches_closed_form() {
        let cfg = ModelConfig { n_blocks: 1, ..Default::default() };
        let base = build_model(&cfg, 2).unwrap();
        let dec = decompose_ffn(&base, &SplitPlan::new(1, 1, ResidualMode::Eliminated)).unwrap();
        let mut rng = Rng::seed(3);
        let x = Matrix::seeded_fill(5, cfg.ffn_dim, Dist::Normal { mean: 0.0, std: 1.0 }, &mut rng).unwrap();
        let u = &dec.layer("ffn1.1").unwrap().params[0].value;
        let s = dec.layer("ffn2.1").unwrap().params[0].value.get(0, 0);
        let v = &dec.layer("ffn3.1").unwrap().params[0].value;
        let b = &dec.layer("ffn3.1").unwrap().params[1].value;
        let mut sub = LayerStack::new(
            ["ffn1.1", "ffn2.1", "ffn3.1"].iter().map(|n| dec.layer(n).unwrap().clone()).collect(),
        )
        .unwrap();
        let got = sub.forward(&x).unwrap();
        for r in 0..5 {
            let mut xu = 0.0f32;
            for k in 0..cfg.ffn_dim {
                xu += x.get(r, k) * u.get(k, 0);
            }
            for c in 0..cfg.d_model {
                let want = xu * s * v.get(0, c) + b.get(0, c);
                assert!((got.get(r, c) - want).abs() <= 1e-5 * (1.0 + want.abs()), "{r},{c}");
            }
        }
        // Bias comes from the original down-projection.
        assert_eq!(b, &base.layer("block1.ffn_down").unwrap().params[1].value);
    }

    #[test]
    fn full_rank_preserves_outputs() {
        let cfg = ModelConfig::default();
        let mut base = build_model(&cfg, 4).unwrap();
        let mut dec = decompose_ffn(&base, &SplitPlan::new(2, 32, ResidualMode::KeptLocal)).unwrap();
        let x = tokens(8, &cfg, 5);
        let a = base.forward(&x).unwrap();
        let b = dec.forward(&x).unwrap();
        let rel = a.sub(&b).unwrap().frobenius_norm() / a.frobenius_norm();
        assert!(rel < 1e-4, "{rel}");
    }

    #[test]
    fn cut_activation_has_rank_columns() {
        let cfg = ModelConfig::default();
        let plan = SplitPlan::new(2, 8, ResidualMode::Eliminated);
        let dec = decompose_ffn(&build_model(&cfg, 6).unwrap(), &plan).unwrap();
        let at = dec.index_of(&names::ffn1(2)).unwrap() + 1;
        let (mut lower, _) = dec.split_at(at).unwrap();
        let a = lower.forward(&tokens(4, &cfg, 7)).unwrap();
        assert_eq!(a.shape(), (4 * cfg.seq_len, plan.rank));
    }
}

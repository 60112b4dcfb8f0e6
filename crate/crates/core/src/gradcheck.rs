//! Analytic gradients against central finite differences on a small random
//! network.

use crate::error::Result;
use crate::model::{forward, forward_backward, sample_loss, DialogueContext, Gold, ModelDims, ModelParams, VariantConfig};
use crate::numerics::{finite_diff_grad, max_relative_error, ParamSet, Rng};
use crate::trainer::TrainConfig;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Tensor holding the worst entry.
    pub worst: String,
    pub scalars: usize,
}

const TINY_ACTS: usize = 3;
const TINY_CANDIDATES: usize = 10;
const TINY_VOCAB: usize = 12;
const HISTORY_TURNS: usize = 2;

/// Small enough for a full finite-difference sweep in about a second.
pub fn tiny_dims() -> ModelDims {
    ModelDims {
        n_acts: TINY_ACTS,
        n_candidates: TINY_CANDIDATES,
        vocab_size: TINY_VOCAB,
        embed_dim: 8,
        hidden: 6,
        conv_windows: vec![(2, 2), (3, 2)],
        ae_hidden: 5,
        ae_out: 7,
    }
}

/// Layer sizes from `cfg` with the tiny act, candidate and vocabulary counts.
pub fn dims_from_config(cfg: &TrainConfig) -> ModelDims {
    ModelDims {
        n_acts: TINY_ACTS,
        n_candidates: TINY_CANDIDATES,
        vocab_size: TINY_VOCAB,
        embed_dim: cfg.embed_dim,
        hidden: cfg.hidden,
        conv_windows: cfg.conv_windows.clone(),
        ae_hidden: cfg.ae_hidden,
        ae_out: cfg.ae_out,
    }
}

fn random_context(dims: &ModelDims, rng: &mut Rng) -> DialogueContext {
    let turns = HISTORY_TURNS;
    let utt = |rng: &mut Rng| -> Vec<usize> { (0..1 + rng.below(4)).map(|_| 1 + rng.below(dims.vocab_size - 1)).collect() };
    let hist_utts: Vec<Vec<usize>> = (0..turns).map(|_| utt(rng)).collect();
    DialogueContext {
        hist_acts: (0..turns).map(|_| rng.below(dims.n_acts)).collect(),
        current_user_utt: hist_utts[turns - 1].clone(),
        hist_utts,
    }
}

/// Compares backprop with finite differences over every parameter,
/// embeddings included, for one random sample.
pub fn gradient_check(dims: &ModelDims, variant: &VariantConfig, seed: u64, eps: f64) -> Result<GradCheck> {
    let mut rng = Rng::seed(seed);
    let params = ModelParams::init(dims.clone(), variant, None, &mut rng)?;
    let ctx = random_context(dims, &mut rng);
    let gold = Gold {
        act: rng.below(dims.n_acts),
        utt: Some(rng.below(dims.n_candidates)),
    };
    let analytic = forward_backward(&ctx, &gold, &params, variant)?.grads;
    let numeric = finite_diff_grad(
        |p: &ModelParams| {
            forward(&ctx, p, variant)
                .and_then(|f| sample_loss(&f, &gold, variant))
                .unwrap_or(f64::NAN)
        },
        &params,
        eps,
    )?;
    let (max_relative_error, worst) = max_relative_error(&analytic, &numeric)?;
    Ok(GradCheck {
        max_relative_error,
        worst,
        scalars: params.scalar_count(),
    })
}

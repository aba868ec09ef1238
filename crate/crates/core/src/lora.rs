//! Low-rank adaptation of frozen linear layers.
//!
//! An adapter on target weight W (D_in x D_out) adds `(alpha/r) * x·A·B` to
//! the base map `x·W`, with A: D_in x r and B: r x D_out. B starts at zero,
//! so attaching adapters changes no output until B receives an update.

use serde::{Deserialize, Serialize};

use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// Parameter path of the adapted base weight.
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn a_path(&self) -> String {
        format!("lora.{}.a", self.target)
    }

    pub fn b_path(&self) -> String {
        format!("lora.{}.b", self.target)
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Adapter parameter count for one D_in x D_out target.
pub fn lora_param_count(d_in: usize, d_out: usize, rank: usize) -> usize {
    rank * (d_in + d_out)
}

/// Base weights eligible for adapters in stage 2: 2-D linear layers that stay
/// frozen while training (spatial attention projections, MLP weights and the
/// projector). Temporal projections and the head are excluded because they
/// train directly and their base values must not drift under an adapter.
pub fn default_lora_targets(model: &Model) -> Vec<String> {
    let mut targets = Vec::new();
    for m in 0..model.config.blocks {
        for name in ["wq", "wk", "wv", "wo"] {
            targets.push(format!("blocks.{m}.spatial.{name}"));
        }
        targets.push(format!("blocks.{m}.mlp.fc1.weight"));
        targets.push(format!("blocks.{m}.mlp.fc2.weight"));
    }
    targets.push("projector.weight".to_string());
    targets
}

/// Attaches adapters to the given targets. A is scaled-uniform initialized,
/// B is zero, so the adapted forward equals the base forward exactly.
pub fn attach_lora(
    model: &mut Model,
    targets: &[String],
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<()> {
    if rank == 0 {
        return Err(Error::Config("adapter rank must be >= 1".into()));
    }
    let mut rng = SeededRng::derive(seed, "lora");
    for target in targets {
        let base = model.params.by_path(target)?;
        if base.value.shape().len() != 2 {
            return Err(Error::Config(format!(
                "adapter target {target:?} is not 2-D (shape {:?})",
                base.value.shape()
            )));
        }
        if model.adapters.iter().any(|a| &a.target == target) {
            return Err(Error::Config(format!("adapter already attached to {target:?}")));
        }
        let (d_in, d_out) = base.value.dims2();
        let adapter = LoraAdapter {
            target: target.clone(),
            rank,
            alpha,
        };
        let limit = (6.0 / (d_in + rank) as f64).sqrt();
        let a = Tensor::from_fn(&[d_in, rank], |_| rng.uniform(-limit, limit));
        model.params.insert(adapter.a_path(), a);
        model.params.insert(adapter.b_path(), Tensor::zeros(&[rank, d_out]));
        model.adapters.push(adapter);
    }
    Ok(())
}

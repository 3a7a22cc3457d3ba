//! Multi-phase pretraining of a backbone on the synthetic mixture.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneDims, PretrainConfig, PretrainLog};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{pretraining_corpus, MixConfig, World};

/// One mixture drawn fresh and trained on for `train.epochs` epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainPhase {
    #[serde(default)]
    pub mix: MixConfig,
    #[serde(default)]
    pub train: PretrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainPlan {
    pub dims: BackboneDims,
    pub init_seed: u64,
    pub phases: Vec<PretrainPhase>,
}

impl Default for PretrainPlan {
    /// A broad first phase, then a shorter one weighted toward generation
    /// examples, whose label token is learned more slowly than the rest.
    fn default() -> Self {
        Self {
            dims: BackboneDims::default(),
            init_seed: 7,
            phases: vec![
                PretrainPhase {
                    mix: MixConfig { size: 60_000, seed: 1, ..MixConfig::default() },
                    train: PretrainConfig { epochs: 2, lr: 3e-3, ..PretrainConfig::default() },
                },
                PretrainPhase {
                    mix: MixConfig { size: 30_000, seed: 2, shares: [0.2, 0.4, 0.1, 0.2, 0.05, 0.05], ..MixConfig::default() },
                    train: PretrainConfig { epochs: 2, lr: 1e-3, seed: 1, ..PretrainConfig::default() },
                },
            ],
        }
    }
}

impl PretrainPlan {
    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.phases.is_empty() {
            return Err(Error::Config("a pretraining plan needs at least one phase".into()));
        }
        for p in &self.phases {
            if p.mix.size == 0 || p.train.epochs == 0 || p.train.batch_size == 0 {
                return Err(Error::Config("phase size, epochs and batch_size must be positive".into()));
            }
            if !(p.train.lr > 0.0) {
                return Err(Error::Config("phase lr must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Builds a backbone over `world`'s vocabulary and runs every phase.
/// `on_epoch(phase, epoch, mean_token_nll)` reports progress.
pub fn pretrain_backbone<T: Scalar>(
    world: &World,
    plan: &PretrainPlan,
    mut on_epoch: impl FnMut(usize, usize, f64),
) -> Result<(Backbone<T>, Vec<PretrainLog>)> {
    plan.validate()?;
    let vocab = world.vocabulary();
    let mut model = Backbone::<T>::new(plan.dims, vocab.clone(), plan.init_seed)?;
    let mut logs = Vec::new();
    for (i, phase) in plan.phases.iter().enumerate() {
        let corpus = pretraining_corpus(world, &vocab, &phase.mix)?;
        let (trained, log) = model.pretrain(&corpus, &phase.train, |e, l| on_epoch(i, e, l))?;
        logs.push(log);
        model = if i + 1 < plan.phases.len() { trained.thawed_copy() } else { trained };
    }
    Ok((model, logs))
}

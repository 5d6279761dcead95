use serde::{Deserialize, Serialize};

use crate::apog::{default_transfer_plan, TransferPlan};
use crate::backbone::ModelConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub ce: f64,
    pub dn: f64,
    pub gn: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ce: 1.0, dn: 1.0, gn: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.ce, self.dn, self.gn].iter().all(|g| g.is_finite() && *g >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }
}

/// How per-sample squared distances between feature maps or clips enter the
/// training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Squared Frobenius norm, summed over elements.
    Sum,
    /// Squared Frobenius norm divided by the element count.
    #[default]
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Subtracted from the learning rate after every epoch.
    pub lr_decay: f64,
    pub lr_floor: f64,
    pub seed: u64,
    pub apog: bool,
    pub vdg: bool,
    /// `None` selects the adjacent bottom-up chain.
    pub plan: Option<TransferPlan>,
    pub loss_weights: LossWeights,
    /// Drop probability before the classifier.
    pub dropout: f64,
    pub bn_momentum: f64,
    /// Synthesize common features for `(view, class)` pairs absent from training.
    pub compensate: bool,
    /// Momentum of the running class centres that transfer pulls towards.
    pub prototype_momentum: f64,
    /// Reduction of the transfer, alignment, reconstruction and cycle terms.
    pub loss_reduction: Reduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 300,
            batch_size: 16,
            learning_rate: 1e-3,
            lr_decay: 1e-5,
            lr_floor: 1e-5,
            seed: 0,
            apog: true,
            vdg: true,
            plan: None,
            loss_weights: LossWeights::default(),
            dropout: 0.9,
            bn_momentum: 0.1,
            compensate: true,
            prototype_momentum: 0.9,
            loss_reduction: Reduction::Mean,
        }
    }
}

impl TrainConfig {
    /// Settings sized for a single CPU in minutes.
    pub fn desk() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            dropout: 0.2,
            loss_weights: LossWeights { ce: 1.0, dn: 0.1, gn: 0.1 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss_weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.learning_rate > 0.0 && self.lr_decay >= 0.0 && self.lr_floor > 0.0) {
            return Err(Error::InvalidConfig("learning-rate schedule must be positive".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::InvalidConfig(format!("bn momentum {} outside (0, 1]", self.bn_momentum)));
        }
        if !(0.0..1.0).contains(&self.prototype_momentum) {
            return Err(Error::InvalidConfig(format!("prototype momentum {} outside [0, 1)", self.prototype_momentum)));
        }
        self.plan()?.validate(self.model.views)
    }

    pub fn plan(&self) -> Result<TransferPlan> {
        match &self.plan {
            Some(p) => Ok(p.clone()),
            None => default_transfer_plan(self.model.views),
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        (self.learning_rate - self.lr_decay * epoch as f64).max(self.lr_floor)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serializable config")
    }
}

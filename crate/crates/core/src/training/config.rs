use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::Architecture;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Entropy minimization on every sample.
    Shot,
    /// Entropy maximization on confident centroid-hypothesis conflicts.
    Rchc,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Shot => "shot",
            Mode::Rchc => "rchc",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "shot" => Ok(Mode::Shot),
            "rchc" => Ok(Mode::Rchc),
            other => Err(Error::config(format!("mode: expected 'shot' or 'rchc', got '{other}'"))),
        }
    }
}

/// Hyperparameters of both training stages.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationConfig {
    pub mode: Mode,
    /// Uncertainty-ratio threshold below which a conflicting pseudo-label is trusted.
    pub r_th: f64,
    /// Weight of the pseudo-label cross-entropy.
    pub alpha_ce: f64,
    /// Weight of the rotation loss.
    pub beta_rot: f64,
    /// Label smoothing of the source objective.
    pub alpha_smooth: f64,
    /// Adaptation epochs.
    pub epochs: usize,
    pub source_epochs: usize,
    pub batch_size: usize,
    /// Learning rate of the bottleneck, normalization, classifier and rotation
    /// head; the feature extractor uses a tenth of it.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub rotation_enabled: bool,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub embed_dim: usize,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            mode: Mode::Rchc,
            r_th: 0.65,
            alpha_ce: 0.3,
            beta_rot: 0.6,
            alpha_smooth: 0.1,
            epochs: 15,
            source_epochs: 30,
            batch_size: 64,
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-3,
            seed: 2019,
            rotation_enabled: false,
            hidden_width: 64,
            hidden_layers: 2,
            embed_dim: 16,
        }
    }
}

impl AdaptationConfig {
    pub fn lr_new_layers(&self) -> f64 {
        self.lr
    }

    pub fn lr_backbone(&self) -> f64 {
        self.lr / 10.0
    }

    /// Threshold actually applied: SHOT never flags conflicts.
    pub fn effective_r_th(&self) -> f64 {
        match self.mode {
            Mode::Shot => 0.0,
            Mode::Rchc => self.r_th,
        }
    }

    pub fn architecture(&self, in_dim: usize, n_classes: usize) -> Architecture {
        Architecture {
            in_dim,
            hidden: vec![self.hidden_width; self.hidden_layers],
            embed_dim: self.embed_dim,
            n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::config(format!("{field}: {why}")));
        if !(0.0..=1.0).contains(&self.r_th) {
            return bad("r_th", format!("{} is outside [0, 1]", self.r_th));
        }
        for (name, v) in [("alpha_ce", self.alpha_ce), ("beta_rot", self.beta_rot), ("weight_decay", self.weight_decay)] {
            if !v.is_finite() || v < 0.0 {
                return bad(name, format!("{v} must be a finite non-negative number"));
            }
        }
        if !(0.0..1.0).contains(&self.alpha_smooth) {
            return bad("alpha_smooth", format!("{} is outside [0, 1)", self.alpha_smooth));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return bad("lr", format!("{} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("{} is outside [0, 1)", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.hidden_width == 0 || self.embed_dim == 0 {
            return bad("hidden_width/embed_dim", "must be at least 1".into());
        }
        Ok(())
    }
}

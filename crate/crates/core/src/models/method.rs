use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An uncertainty-estimation method and the hyperparameters only it uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum MethodConfig {
    /// A single point-estimate network.
    Deterministic,
    /// Variational layers everywhere. `sigma_init` scales the sigma
    /// sub-layer initialisation relative to the mean sub-layer.
    Vnn { sigma_init: f64 },
    /// Bayes-by-backprop: Gaussian weights, ELBO training.
    Bbb { prior_std: f64, kl_weight: f64 },
    /// Monte Carlo dropout after every hidden layer.
    Mcd { dropout_rate: f64 },
    /// Independently initialised and trained members.
    Ensemble { members: usize },
    /// Linear hypermodel `theta = a + B z` over the base network's parameters.
    /// `init_scale` sets the spread of `B` relative to the base initialisation.
    Hypermodel { index_dim: usize, init_scale: f64 },
}

impl MethodConfig {
    pub const VNN: Self = MethodConfig::Vnn { sigma_init: 0.1 };
    pub const BBB: Self = MethodConfig::Bbb { prior_std: 1.0, kl_weight: 1.0 };
    pub const MCD: Self = MethodConfig::Mcd { dropout_rate: 0.1 };
    pub const HYPERMODEL: Self = MethodConfig::Hypermodel { index_dim: 8, init_scale: 0.1 };

    pub fn ensemble(members: usize) -> Self {
        MethodConfig::Ensemble { members }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match *self {
            MethodConfig::Vnn { sigma_init } if !(sigma_init >= 0.0) => {
                bad(format!("vnn sigma_init must be >= 0, got {sigma_init}"))
            }
            MethodConfig::Bbb { prior_std, kl_weight } if !(prior_std > 0.0 && kl_weight >= 0.0) => {
                bad(format!("bbb needs prior_std > 0 and kl_weight >= 0, got {prior_std}, {kl_weight}"))
            }
            MethodConfig::Mcd { dropout_rate } if !(0.0..1.0).contains(&dropout_rate) => {
                bad(format!("dropout rate must lie in [0, 1), got {dropout_rate}"))
            }
            MethodConfig::Ensemble { members: 0 } => bad("ensemble needs at least one member".into()),
            MethodConfig::Hypermodel { index_dim: 0, .. } => {
                bad("hypermodel index dimension must be >= 1".into())
            }
            MethodConfig::Hypermodel { init_scale, .. } if !(init_scale >= 0.0) => {
                bad("hypermodel init_scale must be >= 0".into())
            }
            _ => Ok(()),
        }
    }

    /// Short identifier used in result tables, e.g. `ensemble-10`.
    pub fn id(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for MethodConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodConfig::Deterministic => f.write_str("deterministic"),
            MethodConfig::Vnn { .. } => f.write_str("vnn"),
            MethodConfig::Bbb { .. } => f.write_str("bbb"),
            MethodConfig::Mcd { .. } => f.write_str("mcd"),
            MethodConfig::Ensemble { members } => write!(f, "ensemble-{members}"),
            MethodConfig::Hypermodel { .. } => f.write_str("hypermodel"),
        }
    }
}

impl FromStr for MethodConfig {
    type Err = Error;

    /// Parses an identifier with default hyperparameters.
    fn from_str(s: &str) -> Result<Self> {
        let m = match s {
            "deterministic" => MethodConfig::Deterministic,
            "vnn" => Self::VNN,
            "bbb" => Self::BBB,
            "mcd" => Self::MCD,
            "hypermodel" => Self::HYPERMODEL,
            "ensemble" => Self::ensemble(10),
            other => match other.strip_prefix("ensemble-").map(str::parse::<usize>) {
                Some(Ok(k)) => Self::ensemble(k),
                _ => return Err(Error::Config(format!("unknown method `{other}`"))),
            },
        };
        m.validate()?;
        Ok(m)
    }
}

//! TOML run configuration. Every key has a default from the selected
//! profile; a config file overrides any subset of keys and command-line
//! flags override both.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::benchmark::{BenchConfig, TrainingSettings};
use crate::error::{Error, Result};
use crate::gp::NngpConfig;
use crate::models::{Architecture, MethodConfig};
use crate::tensor::{OptimizerConfig, OptimizerKind, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Small grid that runs on a single desktop core.
    Desk,
    /// The full-size grid; long-running.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VnnSection {
    pub sigma_init: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BbbSection {
    pub prior_std: f64,
    pub kl_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McdSection {
    pub dropout_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypermodelSection {
    pub index_dim: usize,
    pub init_scale: f64,
}

/// Hyperparameters applied to every method named in a method list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSections {
    pub vnn: VnnSection,
    pub bbb: BbbSection,
    pub mcd: McdSection,
    pub hypermodel: HypermodelSection,
}

impl Default for MethodSections {
    fn default() -> Self {
        let MethodConfig::Vnn { sigma_init } = MethodConfig::VNN else { unreachable!() };
        let MethodConfig::Bbb { prior_std, kl_weight } = MethodConfig::BBB else { unreachable!() };
        let MethodConfig::Mcd { dropout_rate } = MethodConfig::MCD else { unreachable!() };
        let MethodConfig::Hypermodel { index_dim, init_scale } = MethodConfig::HYPERMODEL else {
            unreachable!()
        };
        Self {
            vnn: VnnSection { sigma_init },
            bbb: BbbSection { prior_std, kl_weight },
            mcd: McdSection { dropout_rate },
            hypermodel: HypermodelSection { index_dim, init_scale },
        }
    }
}

impl MethodSections {
    /// Resolves a method id (`vnn`, `ensemble-10`, ...) with these
    /// hyperparameters.
    pub fn resolve(&self, id: &str) -> Result<MethodConfig> {
        let m = match id.parse::<MethodConfig>()? {
            MethodConfig::Vnn { .. } => MethodConfig::Vnn { sigma_init: self.vnn.sigma_init },
            MethodConfig::Bbb { .. } => {
                MethodConfig::Bbb { prior_std: self.bbb.prior_std, kl_weight: self.bbb.kl_weight }
            }
            MethodConfig::Mcd { .. } => MethodConfig::Mcd { dropout_rate: self.mcd.dropout_rate },
            MethodConfig::Hypermodel { .. } => MethodConfig::Hypermodel {
                index_dim: self.hypermodel.index_dim,
                init_scale: self.hypermodel.init_scale,
            },
            other => other,
        };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub input_dims: Vec<usize>,
    pub lambdas: Vec<usize>,
    pub noise_stds: Vec<f64>,
    /// Number of repetitions; their seeds derive from the master seed.
    pub seed_count: usize,
    pub n_test: usize,
    pub predictive_samples: usize,
    pub methods: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionTraining {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NngpSection {
    pub depth: usize,
    pub weight_variance: f64,
    pub bias_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchFile {
    pub grid: GridSection,
    pub training: RegressionTraining,
    pub nngp: NngpSection,
    #[serde(flatten)]
    pub methods: MethodSections,
}

impl BenchFile {
    pub fn defaults(profile: Profile) -> Self {
        let nngp = NngpConfig::default();
        let t = TrainingSettings::default();
        let (input_dims, seed_count) = match profile {
            Profile::Desk => (vec![2, 10], 5),
            Profile::Paper => (vec![10, 100, 1000], 10),
        };
        Self {
            grid: GridSection {
                input_dims,
                lambdas: vec![1, 10, 100],
                noise_stds: vec![0.01, 0.1, 1.0],
                seed_count,
                n_test: 100,
                predictive_samples: 100,
                methods: ["vnn", "bbb", "mcd", "ensemble-10", "hypermodel"].map(String::from).to_vec(),
            },
            training: RegressionTraining {
                hidden: t.hidden,
                steps: t.steps,
                batch_size: t.batch_size,
                optimizer: t.optimizer.kind,
                learning_rate: t.optimizer.learning_rate,
                weight_decay: t.optimizer.weight_decay,
            },
            nngp: NngpSection {
                depth: nngp.depth,
                weight_variance: nngp.weight_variance,
                bias_variance: nngp.bias_variance,
            },
            methods: MethodSections::default(),
        }
    }

    /// Expands the grid into benchmark cells.
    pub fn cells(&self, master_seed: u64) -> Result<Vec<BenchConfig>> {
        let g = &self.grid;
        if g.input_dims.is_empty() || g.lambdas.is_empty() || g.noise_stds.is_empty() {
            return Err(Error::Config("grid.input_dims, grid.lambdas and grid.noise_stds must be non-empty".into()));
        }
        if g.seed_count == 0 {
            return Err(Error::Config("grid.seed_count must be >= 1".into()));
        }
        let methods = g
            .methods
            .iter()
            .map(|m| self.methods.resolve(m))
            .collect::<Result<Vec<_>>>()?;
        let seeds = derive_seeds(master_seed, g.seed_count);
        let training = TrainingSettings {
            hidden: self.training.hidden.clone(),
            steps: self.training.steps,
            batch_size: self.training.batch_size,
            optimizer: OptimizerConfig {
                kind: self.training.optimizer,
                learning_rate: self.training.learning_rate,
                weight_decay: self.training.weight_decay,
                ..Default::default()
            },
        };
        let mut cells = Vec::new();
        for &d in &g.input_dims {
            for &lambda in &g.lambdas {
                for &eps in &g.noise_stds {
                    let cell = BenchConfig {
                        input_dim: d,
                        lambda,
                        noise_std: eps,
                        n_test: g.n_test,
                        seeds: seeds.clone(),
                        predictive_samples: g.predictive_samples,
                        methods: methods.clone(),
                        nngp: NngpConfig {
                            depth: self.nngp.depth,
                            weight_variance: self.nngp.weight_variance,
                            bias_variance: self.nngp.bias_variance,
                            input_dim: d,
                        },
                        training: training.clone(),
                    };
                    cell.validate()?;
                    cells.push(cell);
                }
            }
        }
        Ok(cells)
    }
}

pub fn derive_seeds(master_seed: u64, count: usize) -> Vec<u64> {
    let root = RngStream::new(master_seed);
    (0..count).map(|i| root.child("repetition", i as u64).derive_u64()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifySection {
    pub architectures: Vec<String>,
    pub methods: Vec<String>,
    /// Stratified training subset size (0 = full training split).
    pub train_size: usize,
    /// Held out from the remaining training images, used to rank models.
    pub validation_size: usize,
    /// Stratified test subset size (0 = full test split).
    pub test_size: usize,
    pub epochs: usize,
    /// Batch size for fully connected presets.
    pub batch_size: usize,
    /// Batch size for convolutional presets, which need more steps.
    pub conv_batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub predictive_samples: usize,
    /// Standardize pixels with the training subset's mean and std.
    pub standardize: bool,
    /// Dataset root; empty means `$VARNET_DATA_DIR` or `./data`.
    pub data_dir: String,
    pub save_checkpoints: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyFile {
    pub classify: ClassifySection,
    #[serde(flatten)]
    pub methods: MethodSections,
}

impl ClassifyFile {
    pub fn defaults(profile: Profile) -> Self {
        let (architectures, methods, train_size, test_size) = match profile {
            Profile::Desk => (vec!["mlp", "micro"], vec!["deterministic", "vnn"], 10_000, 2_000),
            Profile::Paper => (
                vec!["mlp", "base", "mini", "micro"],
                vec!["deterministic", "vnn", "bbb", "mcd", "ensemble-10", "hypermodel"],
                0,
                0,
            ),
        };
        Self {
            classify: ClassifySection {
                architectures: architectures.into_iter().map(String::from).collect(),
                methods: methods.into_iter().map(String::from).collect(),
                train_size,
                validation_size: 1_000,
                test_size,
                epochs: 5,
                batch_size: 128,
                conv_batch_size: 32,
                learning_rate: 1e-3,
                weight_decay: 0.0,
                predictive_samples: 10,
                standardize: false,
                data_dir: String::new(),
                save_checkpoints: true,
            },
            methods: MethodSections::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.classify;
        for a in &c.architectures {
            Architecture::preset(a)?;
        }
        for m in &c.methods {
            self.methods.resolve(m)?;
        }
        if c.architectures.is_empty() || c.methods.is_empty() {
            return Err(Error::Config("classify.architectures and classify.methods must be non-empty".into()));
        }
        if c.batch_size == 0 || c.conv_batch_size == 0 || c.predictive_samples == 0 {
            return Err(Error::Config(
                "classify.batch_size, conv_batch_size and predictive_samples must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Value, over: toml::Value, path: &str) -> Result<()> {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &p)?,
                    None => return Err(Error::Config(format!("unknown key `{p}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Overlays `text` (TOML) on `defaults`, rejecting unknown keys and
/// reporting type errors with the offending key.
pub fn overlay<T: Serialize + DeserializeOwned>(defaults: &T, text: &str) -> Result<T> {
    let mut base = toml::Value::try_from(defaults).map_err(|e| Error::Config(e.to_string()))?;
    let over: toml::Value = toml::from_str::<toml::Table>(text)
        .map(toml::Value::Table)
        .map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
    merge(&mut base, over, "")?;
    base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

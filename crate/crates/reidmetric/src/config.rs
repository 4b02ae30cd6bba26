//! TOML config file mirroring the training setup. Unknown keys are hard
//! errors in every section. All keys have defaults except the model
//! shape and dataset paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, DomainSpec};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::numkit::{Matrix, Rng};
use crate::optim::{AmsgradConfig, Schedule};
use crate::trainer::{LossKind, SamplerConfig, TrainConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Training objective; `softmax` selects the CE ablation baseline.
    #[serde(default = "default_objective")]
    pub objective: LossKind,
    #[serde(default)]
    pub eval_every: Option<usize>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optim: AmsgradConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub generate: Option<GenerateSection>,
}

fn default_seed() -> u64 {
    42
}
fn default_objective() -> LossKind {
    LossKind::Identity
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_manifest: Option<PathBuf>,
    pub query_manifest: Option<PathBuf>,
    pub gallery_manifest: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { max_k: default_max_k(), query_fraction: default_query_fraction() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_max_k")]
    pub max_k: usize,
    #[serde(default = "default_query_fraction")]
    pub query_fraction: f64,
}

fn default_max_k() -> usize {
    10
}
fn default_query_fraction() -> f64 {
    0.3
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    #[serde(default = "default_true")]
    pub shared_prototypes: bool,
    pub domains: Vec<DomainSection>,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub tag: String,
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub latent_dim: usize,
    #[serde(default)]
    pub sigma_within: f64,
    #[serde(default = "default_cameras")]
    pub cameras: usize,
    #[serde(default)]
    pub transform: TransformSpec,
    /// Constant offset applied to every coordinate.
    #[serde(default)]
    pub offset: f64,
}

fn default_cameras() -> usize {
    4
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformSpec {
    Identity,
    Scale { factor: f64 },
    /// Random orthogonal matrix (QR of a seeded Gaussian draw) times a
    /// scale factor.
    RandomOrthogonal { scale: f64, seed: u64 },
    Matrix { values: Vec<f64> },
}

impl Default for TransformSpec {
    fn default() -> Self {
        TransformSpec::Identity
    }
}

/// Orthonormal basis via Gram-Schmidt on a seeded Gaussian matrix.
fn random_orthogonal(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while cols.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for c in &cols {
            let proj = crate::numkit::dot(&v, c);
            for (vi, ci) in v.iter_mut().zip(c) {
                *vi -= proj * ci;
            }
        }
        if let Ok(u) = crate::numkit::l2_normalize(&v) {
            cols.push(u);
        }
    }
    let mut m = Matrix::zeros(dim, dim);
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            m.set(i, j, *v);
        }
    }
    m.data().to_vec()
}

impl DomainSection {
    pub fn to_domain_spec(&self) -> Result<DomainSpec> {
        let d = self.latent_dim;
        let transform = match &self.transform {
            TransformSpec::Identity => {
                let mut t = vec![0.0; d * d];
                for i in 0..d {
                    t[i * d + i] = 1.0;
                }
                t
            }
            TransformSpec::Scale { factor } => {
                let mut t = vec![0.0; d * d];
                for i in 0..d {
                    t[i * d + i] = *factor;
                }
                t
            }
            TransformSpec::RandomOrthogonal { scale, seed } => random_orthogonal(d, *seed)
                .into_iter()
                .map(|v| v * scale)
                .collect(),
            TransformSpec::Matrix { values } => values.clone(),
        };
        let spec = DomainSpec {
            tag: self.tag.clone(),
            num_identities: self.num_identities,
            samples_per_identity: self.samples_per_identity,
            latent_dim: d,
            sigma_within: self.sigma_within,
            transform,
            offset: vec![self.offset; d],
            cameras: self.cameras,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))
    }

    pub fn to_train_config(&self) -> Result<TrainConfig> {
        let model = self
            .model
            .clone()
            .ok_or_else(|| Error::Config("config has no [model] section".into()))?;
        let cfg = TrainConfig {
            model,
            loss: self.loss,
            loss_kind: self.objective,
            optim: self.optim,
            schedule: self.schedule.clone(),
            sampler: self.sampler,
            augment: self.augment.clone(),
            seed: self.seed,
            eval_every: self.eval_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_everything_but_paths() {
        let cfg = ConfigFile::parse("").unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.objective, LossKind::Identity);
        assert_eq!(cfg.schedule.base_lr, 0.0015);
        assert_eq!(cfg.schedule.drop_epochs, vec![40, 50]);
        assert_eq!(cfg.schedule.total_epochs, 65);
        assert_eq!(cfg.sampler.batch_size, 64);
        assert_eq!(cfg.loss.scale, 30.0);
        assert_eq!(cfg.loss.margin, 0.35);
        assert_eq!(cfg.loss.alpha, 0.3);
        assert!(cfg.model.is_none());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ConfigFile::parse("totally_unknown = 1").is_err());
        assert!(ConfigFile::parse("[loss]\nscale = 30.0\nbogus = 2").is_err());
        assert!(ConfigFile::parse("[schedule]\nbase_lr = 0.1\ntypo_epochs = 3").is_err());
    }

    #[test]
    fn full_train_config_round_trip() {
        let text = r#"
seed = 7
objective = "am_softmax"

[model]
input = { kind = "vector", dim = 16 }
hidden = [32]
embedding_dim = 8
num_classes = 10

[loss]
scale = 30.0
margin = 0.35
alpha = 0.3

[schedule]
total_epochs = 10
drop_epochs = [6, 8]
warmup_epochs = 2

[sampler]
identities_per_batch = 4
images_per_identity = 4
batch_size = 16
"#;
        let cfg = ConfigFile::parse(text).unwrap();
        let tc = cfg.to_train_config().unwrap();
        assert_eq!(tc.seed, 7);
        assert_eq!(tc.loss_kind, LossKind::AmSoftmax);
        assert_eq!(tc.model.num_classes, 10);
    }

    #[test]
    fn random_orthogonal_is_orthonormal_and_deterministic() {
        let a = random_orthogonal(6, 9);
        let b = random_orthogonal(6, 9);
        assert_eq!(a, b);
        let m = Matrix::from_vec(6, 6, a).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let d = crate::numkit::dot(&m.col(i), &m.col(j));
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn domain_section_builds_valid_spec() {
        let text = r#"
[generate]
shared_prototypes = true

[[generate.domains]]
tag = "source"
num_identities = 10
samples_per_identity = 5
latent_dim = 4
sigma_within = 0.1
transform = { kind = "identity" }

[[generate.domains]]
tag = "target"
num_identities = 10
samples_per_identity = 5
latent_dim = 4
sigma_within = 0.1
transform = { kind = "random_orthogonal", scale = 1.5, seed = 3 }
offset = 0.2
"#;
        let cfg = ConfigFile::parse(text).unwrap();
        let generate = cfg.generate.unwrap();
        assert!(generate.shared_prototypes);
        let specs: Vec<_> = generate
            .domains
            .iter()
            .map(|d| d.to_domain_spec().unwrap())
            .collect();
        assert_eq!(specs.len(), 2);
        assert_eq!(specs[1].offset, vec![0.2; 4]);
    }
}

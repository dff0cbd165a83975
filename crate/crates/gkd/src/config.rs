//! Flat TOML experiment configuration.
//!
//! Every hyperparameter is a top-level key whose default is the documented
//! value; unknown keys are rejected. [`ExperimentConfig::hash`] covers
//! everything that influences results (not the output directory or the
//! phase selection) and is stamped into every artifact.

use std::fs;
use std::path::{Path, PathBuf};

use gkd_core::graphs::NodeMode;
use gkd_core::losses::LossWeights;
use gkd_core::nets::NetConfig;
use gkd_core::synthdata::{DomainSpec, IntensityProfile, ShapeFamily, SynthConfig, Tactic, Texture};
use gkd_core::trainer::{EvalConfig, Phase, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, GkdError, Result};
use crate::hash::ConfigHash;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKey {
    EllipseBlob,
    RibbonCurve,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKey {
    Smooth,
    Striped,
    Speckled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeModeKey {
    #[serde(rename = "self")]
    SelfProduct,
    Cross,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub phases: Vec<String>,

    pub image_size: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub domain_seed_a: u64,
    pub domain_seed_b: u64,
    pub a_shape: ShapeKey,
    pub a_fg_mean: f64,
    pub a_bg_mean: f64,
    pub a_noise_sigma: f64,
    pub a_texture: TextureKey,
    pub b_shape: ShapeKey,
    pub b_fg_mean: f64,
    pub b_bg_mean: f64,
    pub b_noise_sigma: f64,
    pub b_texture: TextureKey,

    pub latent_dim: usize,
    pub teacher_widths: Vec<usize>,
    pub student_widths: Vec<usize>,
    pub psae_widths: Vec<usize>,
    pub header_width: usize,

    pub batch_size: usize,
    pub batch_size_p1: usize,
    pub lr: f64,
    pub epochs_p1: usize,
    pub epochs_p2: usize,
    pub epochs_p3: usize,
    pub epochs_p4: usize,
    pub tactics: Vec<String>,
    pub k: usize,
    pub node_mode: NodeModeKey,
    pub use_intra: bool,
    pub use_inter: bool,
    pub use_cross: bool,
    pub warm_start_student: bool,

    pub lambda_msan: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,

    pub threshold: f64,
    pub cov_eps: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let a = DomainSpec::domain_a();
        let b = DomainSpec::domain_b();
        let net = NetConfig::default();
        let train = TrainConfig::default();
        let w = LossWeights::default();
        let ev = EvalConfig::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("gkd-out"),
            phases: Phase::ALL.iter().map(|p| p.tag().to_string()).collect(),
            image_size: SynthConfig::default().size,
            n_train: 64,
            n_test: 96,
            domain_seed_a: 1,
            domain_seed_b: 2,
            a_shape: shape_key(a.shape_family),
            a_fg_mean: a.intensity.fg_mean,
            a_bg_mean: a.intensity.bg_mean,
            a_noise_sigma: a.intensity.noise_sigma,
            a_texture: texture_key(a.texture),
            b_shape: shape_key(b.shape_family),
            b_fg_mean: b.intensity.fg_mean,
            b_bg_mean: b.intensity.bg_mean,
            b_noise_sigma: b.intensity.noise_sigma,
            b_texture: texture_key(b.texture),
            latent_dim: net.latent_dim,
            teacher_widths: net.teacher_widths,
            student_widths: net.student_widths,
            psae_widths: net.psae_widths,
            header_width: net.header_width,
            batch_size: train.batch_size,
            batch_size_p1: train.batch_size_p1,
            lr: train.lr,
            epochs_p1: train.epochs_p1,
            epochs_p2: train.epochs_p2,
            epochs_p3: train.epochs_p3,
            epochs_p4: train.epochs_p4,
            tactics: train.tactics.iter().map(|t| t.as_str().to_string()).collect(),
            k: train.tactics.len(),
            node_mode: NodeModeKey::SelfProduct,
            use_intra: train.use_intra,
            use_inter: train.use_inter,
            use_cross: train.use_cross,
            warm_start_student: train.warm_start_student,
            lambda_msan: w.lambda_msan,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            threshold: ev.threshold,
            cov_eps: ev.cov_eps,
        }
    }
}

fn shape_key(s: ShapeFamily) -> ShapeKey {
    match s {
        ShapeFamily::EllipseBlob => ShapeKey::EllipseBlob,
        ShapeFamily::RibbonCurve => ShapeKey::RibbonCurve,
    }
}

fn texture_key(t: Texture) -> TextureKey {
    match t {
        Texture::Smooth => TextureKey::Smooth,
        Texture::Striped => TextureKey::Striped,
        Texture::Speckled => TextureKey::Speckled,
    }
}

fn domain(shape: ShapeKey, fg: f64, bg: f64, noise: f64, texture: TextureKey) -> DomainSpec {
    DomainSpec {
        shape_family: match shape {
            ShapeKey::EllipseBlob => ShapeFamily::EllipseBlob,
            ShapeKey::RibbonCurve => ShapeFamily::RibbonCurve,
        },
        intensity: IntensityProfile {
            fg_mean: fg,
            bg_mean: bg,
            noise_sigma: noise,
        },
        texture: match texture {
            TextureKey::Smooth => Texture::Smooth,
            TextureKey::Striped => Texture::Striped,
            TextureKey::Speckled => Texture::Speckled,
        },
    }
}

fn cfg_err(e: impl std::fmt::Display) -> GkdError {
    GkdError::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(cfg_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Checks every derived core configuration.
    pub fn validate(&self) -> Result<()> {
        self.synth().domain_a.validate().map_err(|e| cfg_err(format!("domain A: {e}")))?;
        self.synth().domain_b.validate().map_err(|e| cfg_err(format!("domain B: {e}")))?;
        if self.n_train == 0 || self.n_test == 0 {
            return Err(cfg_err("n_train and n_test must be at least 1"));
        }
        self.net().validate().map_err(cfg_err)?;
        self.train()?.validate().map_err(cfg_err)?;
        self.weights().validate().map_err(cfg_err)?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(cfg_err(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if !(self.cov_eps >= 0.0 && self.cov_eps.is_finite()) {
            return Err(cfg_err(format!("cov_eps must be finite and >= 0, got {}", self.cov_eps)));
        }
        self.phase_list()?;
        Ok(())
    }

    pub fn phase_list(&self) -> Result<Vec<Phase>> {
        parse_phases(&self.phases.join(","))
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            domain_a: domain(self.a_shape, self.a_fg_mean, self.a_bg_mean, self.a_noise_sigma, self.a_texture),
            domain_b: domain(self.b_shape, self.b_fg_mean, self.b_bg_mean, self.b_noise_sigma, self.b_texture),
            size: self.image_size,
        }
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            latent_dim: self.latent_dim,
            teacher_widths: self.teacher_widths.clone(),
            student_widths: self.student_widths.clone(),
            psae_widths: self.psae_widths.clone(),
            header_width: self.header_width,
            input_size: self.image_size,
        }
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let all = self
            .tactics
            .iter()
            .map(|t| t.parse::<Tactic>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(cfg_err)?;
        if self.k > all.len() {
            return Err(cfg_err(format!("k = {} exceeds the {} listed tactics", self.k, all.len())));
        }
        Ok(TrainConfig {
            batch_size: self.batch_size,
            batch_size_p1: self.batch_size_p1,
            lr: self.lr,
            epochs_p1: self.epochs_p1,
            epochs_p2: self.epochs_p2,
            epochs_p3: self.epochs_p3,
            epochs_p4: self.epochs_p4,
            tactics: all[..self.k].to_vec(),
            seed: self.seed,
            node_mode: match self.node_mode {
                NodeModeKey::SelfProduct => NodeMode::SelfProduct,
                NodeModeKey::Cross => NodeMode::CrossProduct,
            },
            use_intra: self.use_intra,
            use_inter: self.use_inter,
            use_cross: self.use_cross,
            warm_start_student: self.warm_start_student,
        })
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_msan: self.lambda_msan,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            threshold: self.threshold,
            cov_eps: self.cov_eps,
            with_fsd: true,
        }
    }

    /// Hash of every result-affecting key.
    pub fn hash(&self) -> ConfigHash {
        let view = Self {
            out_dir: PathBuf::new(),
            phases: Vec::new(),
            ..self.clone()
        };
        ConfigHash::of(view.to_toml_string().as_bytes())
    }

    /// Hash of the network shapes only; checkpoints are compatible iff it matches.
    pub fn net_hash(&self) -> ConfigHash {
        let n = self.net();
        let s = format!(
            "latent_dim={};teacher={:?};student={:?};psae={:?};header={};size={}",
            n.latent_dim, n.teacher_widths, n.student_widths, n.psae_widths, n.header_width, n.input_size
        );
        ConfigHash::of(s.as_bytes())
    }
}

/// Parses `P1,P2` style lists into sorted, deduplicated phases.
pub fn parse_phases(s: &str) -> Result<Vec<Phase>> {
    let mut v = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<Phase>().map_err(cfg_err))
        .collect::<Result<Vec<_>>>()?;
    v.sort();
    v.dedup();
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn paper_defaults() {
        let c = ExperimentConfig::default();
        assert_eq!((c.lambda_msan, c.alpha, c.beta, c.gamma), (0.5, 100.0, 100.0, 0.5));
        assert_eq!((c.batch_size, c.lr, c.k), (16, 0.003, 4));
        assert_eq!((c.threshold, c.cov_eps, c.latent_dim), (0.5, 1e-6, 64));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_str("seed = 1\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = ExperimentConfig::from_toml_str("seed = 9\nalpha = 10.0\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.alpha, 10.0);
        assert_eq!(c.beta, 100.0);
    }

    #[test]
    fn hash_ignores_plumbing_but_not_hyperparameters() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            out_dir: "elsewhere".into(),
            phases: vec!["P1".into()],
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig { gamma: 0.25, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.net_hash(), c.net_hash());
    }

    #[test]
    fn invalid_values_are_reported() {
        assert!(ExperimentConfig::from_toml_str("lr = -1.0").is_err());
        assert!(ExperimentConfig::from_toml_str("k = 5").is_err());
        assert!(ExperimentConfig::from_toml_str("tactics = [\"cutout\", \"rotate\"]").is_err());
        assert!(ExperimentConfig::from_toml_str("phases = [\"P7\"]").is_err());
        assert!(ExperimentConfig::from_toml_str("image_size = 40").is_err());
    }
}

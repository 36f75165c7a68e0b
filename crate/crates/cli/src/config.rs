//! Flat JSON experiment configuration.
//!
//! Every key has a default, so a config file only needs to name what it
//! changes; unknown keys are rejected to catch typos. Command-line flags
//! override file keys after loading. The defaults mirror the reference
//! hyperparameters (lr 0.003, lambda 3, temperature 2, beta 0.5, EWC 300)
//! with desk-scale schedule overrides (3 tasks, 3 rounds, 2 epochs).

use fcil_core::client::{Method, StrategyConfig};
use fcil_core::condense::CondenseConfig;
use fcil_core::dataset::{load_raw_dir, noisy_blobs, DatasetSpec, ImageShape};
use fcil_core::model::{Activation, ArchSpec};
use fcil_core::runtime::SimulationConfig;
use fcil_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

fn d_dataset() -> String {
    "synthetic".into()
}
fn d_tasks() -> usize {
    3
}
fn d_classes_per_task() -> usize {
    4
}
fn d_samples_per_class() -> usize {
    20
}
fn d_test_per_class() -> usize {
    8
}
fn d_blob_noise() -> f64 {
    0.35
}
fn d_image_size() -> usize {
    16
}
fn d_channels() -> usize {
    3
}
fn d_arch() -> String {
    "mlp".into()
}
fn d_hidden() -> usize {
    64
}
fn d_conv_blocks() -> usize {
    2
}
fn d_conv_width() -> usize {
    8
}
fn d_activation() -> String {
    "relu".into()
}
fn d_clients_initial() -> usize {
    4
}
fn d_clients_increment() -> usize {
    1
}
fn d_transition_fraction() -> f64 {
    0.5
}
fn d_round_clients() -> usize {
    3
}
fn d_sigma() -> f64 {
    0.5
}
fn d_memory_budget() -> usize {
    24
}
fn d_rounds_per_task() -> usize {
    3
}
fn d_epochs() -> usize {
    2
}
fn d_lr() -> f64 {
    0.003
}
fn d_lambda() -> f64 {
    3.0
}
fn d_kd_temperature() -> f64 {
    2.0
}
fn d_beta() -> f64 {
    0.5
}
fn d_tau() -> f64 {
    0.5
}
fn d_ewc_factor() -> f64 {
    300.0
}
fn d_cond_eta() -> f64 {
    0.01
}
fn d_cond_exemplar_lr() -> f64 {
    0.01
}
fn d_cond_iterations() -> usize {
    1
}
fn d_batch() -> usize {
    32
}
fn d_vae_hidden() -> usize {
    32
}
fn d_vae_latent() -> usize {
    8
}
fn d_vae_embed() -> usize {
    8
}
fn d_vae_beta() -> f64 {
    1.0
}
fn d_vae_lr() -> f64 {
    0.01
}
fn d_proto_per_class() -> usize {
    8
}
fn d_true() -> bool {
    true
}
fn d_false() -> bool {
    false
}
fn d_baseline_inits() -> usize {
    3
}
fn d_method() -> String {
    "ecoral".into()
}
fn d_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn d_output_dir() -> String {
    "runs".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// "synthetic" or a directory holding meta.json plus raw image banks.
    #[serde(default = "d_dataset")]
    pub dataset: String,
    #[serde(default = "d_tasks")]
    pub tasks: usize,
    #[serde(default = "d_classes_per_task")]
    pub classes_per_task: usize,
    /// Synthetic data only: training images generated per class.
    #[serde(default = "d_samples_per_class")]
    pub samples_per_class: usize,
    #[serde(default = "d_test_per_class")]
    pub test_per_class: usize,
    /// Synthetic data only: per-pixel Gaussian noise scale around centers.
    #[serde(default = "d_blob_noise")]
    pub blob_noise: f64,
    #[serde(default = "d_image_size")]
    pub image_size: usize,
    #[serde(default = "d_channels")]
    pub channels: usize,
    /// "mlp" or "conv".
    #[serde(default = "d_arch")]
    pub arch: String,
    #[serde(default = "d_hidden")]
    pub hidden: usize,
    #[serde(default = "d_conv_blocks")]
    pub conv_blocks: usize,
    #[serde(default = "d_conv_width")]
    pub conv_width: usize,
    /// "relu" or "tanh".
    #[serde(default = "d_activation")]
    pub activation: String,
    #[serde(default = "d_clients_initial")]
    pub clients_initial: usize,
    #[serde(default = "d_clients_increment")]
    pub clients_increment: usize,
    #[serde(default = "d_transition_fraction")]
    pub transition_fraction: f64,
    #[serde(default = "d_round_clients")]
    pub round_clients: usize,
    #[serde(default = "d_false")]
    pub include_old_clients: bool,
    #[serde(default = "d_sigma")]
    pub sigma: f64,
    #[serde(default = "d_memory_budget")]
    pub memory_budget: usize,
    #[serde(default = "d_rounds_per_task")]
    pub rounds_per_task: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    /// Weight shared by the distillation and rehearsal terms.
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_kd_temperature")]
    pub kd_temperature: f64,
    /// Contrastive-compensation weight inside condensation.
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_tau")]
    pub tau: f64,
    #[serde(default = "d_ewc_factor")]
    pub ewc_factor: f64,
    #[serde(default = "d_cond_eta")]
    pub cond_eta: f64,
    #[serde(default = "d_cond_exemplar_lr")]
    pub cond_exemplar_lr: f64,
    #[serde(default = "d_cond_iterations")]
    pub cond_iterations: usize,
    #[serde(default = "d_batch")]
    pub batch_n: usize,
    #[serde(default = "d_batch")]
    pub batch_m: usize,
    #[serde(default = "d_true")]
    pub adjustable_memory: bool,
    #[serde(default = "d_vae_hidden")]
    pub vae_hidden: usize,
    #[serde(default = "d_vae_latent")]
    pub vae_latent: usize,
    #[serde(default = "d_vae_embed")]
    pub vae_embed: usize,
    #[serde(default = "d_vae_beta")]
    pub vae_beta: f64,
    #[serde(default = "d_vae_lr")]
    pub vae_lr: f64,
    #[serde(default = "d_proto_per_class")]
    pub proto_per_class: usize,
    #[serde(default = "d_true")]
    pub aggregate_vae_every_round: bool,
    #[serde(default = "d_baseline_inits")]
    pub baseline_inits: usize,
    #[serde(default = "d_method")]
    pub method: String,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "d_output_dir")]
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config uses defaults")
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn method(&self) -> Result<Method> {
        Method::parse(&self.method)
    }

    pub fn shape(&self) -> ImageShape {
        ImageShape {
            height: self.image_size,
            width: self.image_size,
            channels: self.channels,
        }
    }

    pub fn arch_spec(&self) -> Result<ArchSpec> {
        let activation = match self.activation.as_str() {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            other => {
                return Err(Error::invalid(
                    "activation",
                    format!("unknown activation {other:?} (expected relu|tanh)"),
                ))
            }
        };
        match self.arch.as_str() {
            "mlp" => Ok(ArchSpec::Mlp {
                hidden: self.hidden,
                activation,
            }),
            "conv" => Ok(ArchSpec::Conv {
                blocks: self.conv_blocks,
                width: self.conv_width,
                activation,
            }),
            other => Err(Error::invalid(
                "arch",
                format!("unknown architecture {other:?} (expected mlp|conv)"),
            )),
        }
    }

    pub fn strategy(&self, method: Method) -> StrategyConfig {
        StrategyConfig {
            method,
            lr: self.lr,
            lambda_kd: self.lambda,
            lambda_mem: self.lambda,
            kd_temperature: self.kd_temperature,
            ewc_factor: self.ewc_factor,
            epochs: self.epochs,
            batch_n: self.batch_n,
            batch_m: self.batch_m,
            condense: CondenseConfig {
                eta: self.cond_eta,
                exemplar_lr: self.cond_exemplar_lr,
                tau: self.tau,
                beta: self.beta,
                grad_match: true,
                relationship: true,
                iterations: self.cond_iterations,
            },
            use_vae: method == Method::Ecoral,
            vae_lr: self.vae_lr,
            adjustable_memory: self.adjustable_memory,
        }
    }

    pub fn simulation(&self, method: Method, seed: u64) -> Result<SimulationConfig> {
        let cfg = SimulationConfig {
            arch: self.arch_spec()?,
            input: self.shape(),
            tasks: self.tasks,
            classes_per_task: self.classes_per_task,
            clients_initial: self.clients_initial,
            clients_increment: self.clients_increment,
            transition_fraction: self.transition_fraction,
            round_clients: self.round_clients,
            rounds_per_task: self.rounds_per_task,
            include_old_clients: self.include_old_clients,
            sigma: self.sigma,
            memory_budget: self.memory_budget,
            strategy: self.strategy(method),
            vae_hidden: self.vae_hidden,
            vae_latent: self.vae_latent,
            vae_embed: self.vae_embed,
            vae_beta: self.vae_beta,
            aggregate_vae_every_round: self.aggregate_vae_every_round,
            proto_per_class: self.proto_per_class,
            baseline_inits: self.baseline_inits,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Train/test pair for one run. Synthetic data derives from the run
    /// seed, so equal seeds compare methods on identical data.
    pub fn load_data(&self, seed: u64) -> Result<(DatasetSpec, DatasetSpec)> {
        if self.dataset == "synthetic" {
            let classes = self.tasks * self.classes_per_task;
            let train =
                noisy_blobs(classes, self.samples_per_class, self.shape(), self.blob_noise, seed, 0)?;
            let test =
                noisy_blobs(classes, self.test_per_class, self.shape(), self.blob_noise, seed, 1)?;
            Ok((train, test))
        } else {
            let root = Path::new(&self.dataset);
            let train = load_raw_dir(&root.join("train"))?;
            let test = load_raw_dir(&root.join("test"))?;
            Ok((train, test))
        }
    }

    /// Full validation: local fields first, then the assembled simulation
    /// config, so error messages name the offending key.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("seeds", "need at least one seed"));
        }
        if self.dataset == "synthetic"
            && (self.samples_per_class == 0 || self.test_per_class == 0)
        {
            return Err(Error::invalid(
                "samples_per_class/test_per_class",
                "must be positive for synthetic data",
            ));
        }
        if self.image_size == 0 || self.channels == 0 {
            return Err(Error::invalid("image_size/channels", "must be positive"));
        }
        let method = self.method()?;
        self.simulation(method, self.seeds[0])?;
        Ok(())
    }
}

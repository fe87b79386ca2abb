//! Flat key=value run configuration. Files hold one `key = value` per line
//! (# starts a comment line); command-line --set overrides win over the
//! file, which wins over defaults. Unknown keys are rejected up front, and
//! the effective configuration echoes back out in a form that re-parses to
//! the same config.

use equinv::{Error, Result};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: String,
    pub data_dir: String,
    pub out_dir: String,
    pub seed: u64,

    pub backbone: String,
    pub embed_dim: usize,
    pub invariant_dim: usize,
    pub head_hidden: usize,

    pub transform_preset: String,
    pub transform_subset: Option<usize>,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub generations: usize,
    pub micro_batches: usize,
    pub augment: bool,
    pub bank_momentum: f64,

    pub tau: f64,
    pub kd_temperature: f64,
    pub w_eq: f64,
    pub w_in: f64,
    pub w_kd: f64,
    pub negatives_per_batch: usize,

    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub num_tasks: usize,
    pub eval_split: String,

    pub seeds: Vec<u64>,
    pub embed_limit: usize,

    pub synth_classes: usize,
    pub synth_per_class: usize,
    pub synth_image_size: usize,
    pub synth_train_classes: usize,
    pub synth_val_classes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: "synthetic".into(),
            data_dir: String::new(),
            out_dir: "runs/default".into(),
            seed: 1,
            backbone: "conv4-tiny".into(),
            embed_dim: 64,
            invariant_dim: 64,
            head_hidden: 64,
            transform_preset: "m4".into(),
            transform_subset: None,
            epochs: 5,
            batch_size: 16,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_epochs: vec![],
            lr_decay_factor: 0.1,
            generations: 1,
            micro_batches: 1,
            augment: true,
            bank_momentum: 0.5,
            tau: 1.0,
            kd_temperature: 4.0,
            w_eq: 1.0,
            w_in: 1.0,
            w_kd: 1.0,
            negatives_per_batch: 6400,
            n_way: 5,
            k_shot: 1,
            q_query: 15,
            num_tasks: 600,
            eval_split: "test".into(),
            seeds: vec![1, 2, 3],
            embed_limit: 1000,
            synth_classes: 10,
            synth_per_class: 24,
            synth_image_size: 16,
            synth_train_classes: 5,
            synth_val_classes: 2,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("key {key}: cannot parse value {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(vec![]);
    }
    value.split(',').map(|p| parse(key, p.trim())).collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "dataset" => self.dataset = value.to_string(),
            "data_dir" => self.data_dir = value.to_string(),
            "out_dir" => self.out_dir = value.to_string(),
            "seed" => self.seed = parse(key, value)?,
            "backbone" => self.backbone = value.to_string(),
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "invariant_dim" => self.invariant_dim = parse(key, value)?,
            "head_hidden" => self.head_hidden = parse(key, value)?,
            "transform_preset" => self.transform_preset = value.to_string(),
            "transform_subset" => {
                self.transform_subset =
                    if value.is_empty() { None } else { Some(parse(key, value)?) }
            }
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "lr_decay_epochs" => self.lr_decay_epochs = parse_list(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, value)?,
            "generations" => self.generations = parse(key, value)?,
            "micro_batches" => self.micro_batches = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            "bank_momentum" => self.bank_momentum = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "kd_temperature" => self.kd_temperature = parse(key, value)?,
            "w_eq" => self.w_eq = parse(key, value)?,
            "w_in" => self.w_in = parse(key, value)?,
            "w_kd" => self.w_kd = parse(key, value)?,
            "negatives_per_batch" => self.negatives_per_batch = parse(key, value)?,
            "n_way" => self.n_way = parse(key, value)?,
            "k_shot" => self.k_shot = parse(key, value)?,
            "q_query" => self.q_query = parse(key, value)?,
            "num_tasks" => self.num_tasks = parse(key, value)?,
            "eval_split" => self.eval_split = value.to_string(),
            "seeds" => self.seeds = parse_list(key, value)?,
            "embed_limit" => self.embed_limit = parse(key, value)?,
            "synth_classes" => self.synth_classes = parse(key, value)?,
            "synth_per_class" => self.synth_per_class = parse(key, value)?,
            "synth_image_size" => self.synth_image_size = parse(key, value)?,
            "synth_train_classes" => self.synth_train_classes = parse(key, value)?,
            "synth_val_classes" => self.synth_val_classes = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_line(&mut self, line: &str) -> Result<()> {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            return Ok(());
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("expected key=value, got {line:?}")))?;
        self.set(key.trim(), value)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut config = RunConfig::default();
        let text = std::fs::read_to_string(path)?;
        for line in text.lines() {
            config.apply_line(line)?;
        }
        Ok(config)
    }

    /// Canonical key=value listing; parsing it back yields this config.
    pub fn echo(&self) -> String {
        let subset = self.transform_subset.map(|k| k.to_string()).unwrap_or_default();
        let list = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let seeds = self.seeds.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        format!(
            "dataset = {}\ndata_dir = {}\nout_dir = {}\nseed = {}\n\
             backbone = {}\nembed_dim = {}\ninvariant_dim = {}\nhead_hidden = {}\n\
             transform_preset = {}\ntransform_subset = {}\n\
             epochs = {}\nbatch_size = {}\nlr = {}\nmomentum = {}\nweight_decay = {}\n\
             lr_decay_epochs = {}\nlr_decay_factor = {}\ngenerations = {}\n\
             micro_batches = {}\naugment = {}\nbank_momentum = {}\n\
             tau = {}\nkd_temperature = {}\nw_eq = {}\nw_in = {}\nw_kd = {}\n\
             negatives_per_batch = {}\n\
             n_way = {}\nk_shot = {}\nq_query = {}\nnum_tasks = {}\neval_split = {}\n\
             seeds = {}\nembed_limit = {}\n\
             synth_classes = {}\nsynth_per_class = {}\nsynth_image_size = {}\n\
             synth_train_classes = {}\nsynth_val_classes = {}\n",
            self.dataset,
            self.data_dir,
            self.out_dir,
            self.seed,
            self.backbone,
            self.embed_dim,
            self.invariant_dim,
            self.head_hidden,
            self.transform_preset,
            subset,
            self.epochs,
            self.batch_size,
            self.lr,
            self.momentum,
            self.weight_decay,
            list(&self.lr_decay_epochs),
            self.lr_decay_factor,
            self.generations,
            self.micro_batches,
            self.augment,
            self.bank_momentum,
            self.tau,
            self.kd_temperature,
            self.w_eq,
            self.w_in,
            self.w_kd,
            self.negatives_per_batch,
            self.n_way,
            self.k_shot,
            self.q_query,
            self.num_tasks,
            self.eval_split,
            seeds,
            self.embed_limit,
            self.synth_classes,
            self.synth_per_class,
            self.synth_image_size,
            self.synth_train_classes,
            self.synth_val_classes,
        )
    }

    #[cfg(test)]
    pub fn parse_echo(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        for line in text.lines() {
            config.apply_line(line)?;
        }
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut config = RunConfig::default();
        config.set("dataset", "cifar-fs").unwrap();
        config.set("lr_decay_epochs", "30,60").unwrap();
        config.set("transform_subset", "12").unwrap();
        config.set("seeds", "4,5").unwrap();
        config.set("augment", "false").unwrap();
        config.set("weight_decay", "0.0005").unwrap();
        let reparsed = RunConfig::parse_echo(&config.echo()).unwrap();
        assert_eq!(config, reparsed);
        assert_eq!(reparsed.echo(), config.echo());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut config = RunConfig::default();
        assert!(config.set("learning_rate", "0.1").is_err());
        assert!(config.apply_line("nope = 1").is_err());
        assert!(config.apply_line("# comment").is_ok());
        assert!(config.apply_line("").is_ok());
        assert!(config.apply_line("no-equals-sign").is_err());
    }

    #[test]
    fn empty_values_clear_optionals() {
        let mut config = RunConfig::default();
        config.set("transform_subset", "8").unwrap();
        config.set("transform_subset", "").unwrap();
        assert_eq!(config.transform_subset, None);
        config.set("lr_decay_epochs", "").unwrap();
        assert!(config.lr_decay_epochs.is_empty());
    }
}

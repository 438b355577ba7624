//! Run configuration: a flat `key = value` file, command-line overrides and
//! built-in defaults.
//!
//! File syntax: one `key = value` per line. Blank lines and lines whose first
//! non-space character is `#` are ignored. Keys must appear in [`SCHEMA`];
//! anything else, a repeated key, or a line without `=` is an error.
//!
//! Precedence, highest first: command-line flag, config file, the
//! `MPU_RNN_SEED` environment variable (for `seed` only), built-in default.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::analysis::Convention;
use crate::cells::CellKind;
use crate::error::{Error, Result};
use crate::network::{Arch, NetworkConfig, Readout, ReadoutMatrices};
use crate::training::TrainConfig;

pub const SEED_ENV: &str = "MPU_RNN_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfigKey {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> ConfigKey {
    ConfigKey {
        name,
        default,
        help,
    }
}

/// Every accepted key with its default.
pub const SCHEMA: &[ConfigKey] = &[
    key("cell", "gru", "gru | lstm | mpu | mpu_c"),
    key("arch", "general", "general | hybrid | bidirectional"),
    key("readout", "last", "last | stacked | per-layer"),
    key("readout_matrices", "split", "split | shared"),
    key("layers", "2", "number of recurrent layers"),
    key(
        "hidden",
        "32",
        "hidden size, one value or a comma list per layer",
    ),
    key("input_dim", "2", "coordinates per dot, 2 or 3"),
    key("classes", "10", "number of classes"),
    key(
        "skip_input",
        "true",
        "feed the network input to every layer",
    ),
    key(
        "dropout_keep",
        "0.6",
        "keep probability on inter-layer outputs",
    ),
    key("batch_size", "256", "mini-batch size"),
    key("epochs", "50", "maximum epochs"),
    key("lr", "0.001", "rmsprop learning rate"),
    key("decay", "0.9", "rmsprop decay"),
    key("epsilon", "1e-8", "rmsprop epsilon"),
    key("clip_norm", "5", "global gradient-norm clip, or none"),
    key(
        "patience",
        "none",
        "epochs without validation gain before stopping",
    ),
    key(
        "target_val_acc",
        "none",
        "stop once validation accuracy reaches this",
    ),
    key("threads", "1", "worker threads"),
    key("seed", "0", "master seed"),
    key("per_class", "600", "samples per class for gen-data"),
    key("train_frac", "0.8", "training share per class"),
    key("val_frac", "0.1", "validation share per class"),
    key("jitter", "1.5", "per-dot Gaussian jitter for gen-data"),
    key(
        "data_dir",
        "data",
        "directory holding train.txt, val.txt, test.txt",
    ),
    key("out_dir", "out", "directory for checkpoints and metrics"),
    key(
        "convention",
        "paper-table",
        "parameter counting: paper-table | full-actual",
    ),
];

/// Where a resolved value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Origin {
    Default,
    Env,
    File,
    Flag,
}

fn schema_key(name: &str) -> Option<&'static ConfigKey> {
    SCHEMA.iter().find(|k| k.name == name)
}

/// Parses a config file into `(line, key, value)` triples.
pub fn parse_config_file(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let no = i + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: no,
            msg: format!("expected `key = value`, found `{line}`"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if schema_key(k).is_none() {
            return Err(Error::Parse {
                line: no,
                msg: format!("unknown key `{k}`"),
            });
        }
        if out.iter().any(|(_, seen, _)| seen == k) {
            return Err(Error::Parse {
                line: no,
                msg: format!("key `{k}` given twice"),
            });
        }
        out.push((no, k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub cell: CellKind,
    pub arch: Arch,
    pub readout: Readout,
    pub readout_matrices: ReadoutMatrices,
    pub layers: usize,
    pub hidden: Vec<usize>,
    pub input_dim: usize,
    pub classes: usize,
    pub skip_input: bool,
    pub dropout_keep: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub clip_norm: Option<f64>,
    pub patience: Option<usize>,
    pub target_val_acc: Option<f64>,
    pub threads: usize,
    pub seed: u64,
    pub per_class: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    pub jitter: f64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub convention: Convention,
    origins: BTreeMap<&'static str, Origin>,
}

fn value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn optional<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        value(key, v).map(Some)
    }
}

fn enum_value<T: std::str::FromStr<Err = Error>>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|e: Error| match e {
        Error::Config(msg) => Error::Config(format!("`{key}`: {msg}")),
        other => other,
    })
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::resolve(None, &[], None).expect("built-in defaults are valid")
    }
}

impl RunConfig {
    /// Merges defaults, `MPU_RNN_SEED`, the file text and flag overrides.
    pub fn resolve(
        file: Option<&str>,
        flags: &[(String, String)],
        env_seed: Option<&str>,
    ) -> Result<Self> {
        let mut raw: BTreeMap<&'static str, (String, Origin)> = SCHEMA
            .iter()
            .map(|k| (k.name, (k.default.to_string(), Origin::Default)))
            .collect();
        if let Some(seed) = env_seed {
            raw.insert("seed", (seed.trim().to_string(), Origin::Env));
        }
        if let Some(text) = file {
            for (_, k, v) in parse_config_file(text)? {
                let key = schema_key(&k).expect("checked by the parser");
                raw.insert(key.name, (v, Origin::File));
            }
        }
        for (k, v) in flags {
            let key = schema_key(k).ok_or_else(|| Error::Config(format!("unknown key `{k}`")))?;
            raw.insert(key.name, (v.trim().to_string(), Origin::Flag));
        }
        let get = |k: &str| raw[k].0.as_str();

        let layers: usize = value("layers", get("layers"))?;
        let hidden: Vec<usize> = get("hidden")
            .split(',')
            .map(|s| value("hidden", s.trim()))
            .collect::<Result<_>>()?;
        let hidden = match hidden.len() {
            1 => vec![hidden[0]; layers],
            n if n == layers => hidden,
            n => {
                return Err(Error::Config(format!(
                    "`hidden` lists {n} sizes for {layers} layers"
                )));
            }
        };
        let cfg = RunConfig {
            cell: enum_value("cell", get("cell"))?,
            arch: enum_value("arch", get("arch"))?,
            readout: enum_value("readout", get("readout"))?,
            readout_matrices: enum_value("readout_matrices", get("readout_matrices"))?,
            layers,
            hidden,
            input_dim: value("input_dim", get("input_dim"))?,
            classes: value("classes", get("classes"))?,
            skip_input: value("skip_input", get("skip_input"))?,
            dropout_keep: value("dropout_keep", get("dropout_keep"))?,
            batch_size: value("batch_size", get("batch_size"))?,
            epochs: value("epochs", get("epochs"))?,
            lr: value("lr", get("lr"))?,
            decay: value("decay", get("decay"))?,
            epsilon: value("epsilon", get("epsilon"))?,
            clip_norm: optional("clip_norm", get("clip_norm"))?,
            patience: optional("patience", get("patience"))?,
            target_val_acc: optional("target_val_acc", get("target_val_acc"))?,
            threads: value("threads", get("threads"))?,
            seed: value("seed", get("seed"))?,
            per_class: value("per_class", get("per_class"))?,
            train_frac: value("train_frac", get("train_frac"))?,
            val_frac: value("val_frac", get("val_frac"))?,
            jitter: value("jitter", get("jitter"))?,
            data_dir: PathBuf::from(get("data_dir")),
            out_dir: PathBuf::from(get("out_dir")),
            convention: enum_value("convention", get("convention"))?,
            origins: raw.iter().map(|(k, (_, o))| (*k, *o)).collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Like [`resolve`](Self::resolve), reading `MPU_RNN_SEED` from the environment.
    pub fn from_env(file: Option<&str>, flags: &[(String, String)]) -> Result<Self> {
        let env = std::env::var(SEED_ENV).ok();
        Self::resolve(file, flags, env.as_deref())
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("classes", self.classes),
            ("batch_size", self.batch_size),
            ("threads", self.threads),
            ("per_class", self.per_class),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be at least 1")));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("`hidden` sizes must be at least 1".into()));
        }
        if !(2..=3).contains(&self.input_dim) {
            return Err(Error::Config(format!(
                "`input_dim` must be 2 or 3, got {}",
                self.input_dim
            )));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Config("`lr` must be a non-negative number".into()));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config("`decay` must lie in (0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("`epsilon` must be positive".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("`clip_norm` must be positive or none".into()));
        }
        if !(self.train_frac > 0.0
            && self.val_frac >= 0.0
            && self.train_frac + self.val_frac <= 1.0 + 1e-12)
        {
            return Err(Error::Config(
                "`train_frac` and `val_frac` must be shares summing to at most 1".into(),
            ));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::Config("`jitter` must be non-negative".into()));
        }
        self.network_config(self.input_dim, self.classes).validate()
    }

    pub fn origin(&self, key: &str) -> Option<Origin> {
        self.origins.get(key).copied()
    }

    pub fn network_config(&self, input_dim: usize, classes: usize) -> NetworkConfig {
        let mut cfg = NetworkConfig::new(self.cell, self.layers, 1, input_dim, classes)
            .with_arch(self.arch)
            .with_readout(self.readout)
            .with_readout_matrices(self.readout_matrices)
            .with_skip_input(self.skip_input)
            .with_dropout_keep(self.dropout_keep);
        cfg.hidden = self.hidden.clone();
        cfg
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            learning_rate: self.lr,
            decay: self.decay,
            epsilon: self.epsilon,
            clip_norm: self.clip_norm,
            patience: self.patience,
            target_val_acc: self.target_val_acc,
            threads: self.threads,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flag(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    /// A non-default value for each key, used for the file and for the flag.
    fn alternatives(key: &str) -> (&'static str, &'static str) {
        match key {
            "cell" => ("mpu", "lstm"),
            "arch" => ("hybrid", "bidirectional"),
            "readout" => ("stacked", "per-layer"),
            "readout_matrices" => ("shared", "split"),
            "layers" => ("3", "4"),
            "hidden" => ("8", "16"),
            "input_dim" => ("3", "2"),
            "classes" => ("4", "5"),
            "skip_input" => ("false", "true"),
            "dropout_keep" => ("0.5", "0.9"),
            "batch_size" => ("16", "32"),
            "epochs" => ("7", "9"),
            "lr" => ("0.01", "0.02"),
            "decay" => ("0.8", "0.95"),
            "epsilon" => ("1e-6", "1e-7"),
            "clip_norm" => ("none", "2"),
            "patience" => ("3", "4"),
            "target_val_acc" => ("0.9", "0.95"),
            "threads" => ("2", "3"),
            "seed" => ("11", "12"),
            "per_class" => ("20", "30"),
            "train_frac" => ("0.7", "0.6"),
            "val_frac" => ("0.15", "0.05"),
            "jitter" => ("0.5", "0"),
            "data_dir" => ("d1", "d2"),
            "out_dir" => ("o1", "o2"),
            "convention" => ("full-actual", "paper-table"),
            other => panic!("no alternatives for {other}"),
        }
    }

    #[test]
    fn precedence_per_key() {
        let defaults = RunConfig::resolve(None, &[], None).unwrap();
        for k in SCHEMA {
            let (file_v, flag_v) = alternatives(k.name);
            let file = format!("# test\n{} = {file_v}\n", k.name);

            let from_file = RunConfig::resolve(Some(&file), &[], None).unwrap();
            assert_eq!(from_file.origin(k.name), Some(Origin::File), "{}", k.name);
            assert_ne!(from_file, defaults, "{}", k.name);

            let from_flag = RunConfig::resolve(Some(&file), &[flag(k.name, flag_v)], None).unwrap();
            assert_eq!(from_flag.origin(k.name), Some(Origin::Flag), "{}", k.name);
            let flag_only = RunConfig::resolve(None, &[flag(k.name, flag_v)], None).unwrap();
            assert_eq!(from_flag, flag_only, "{}", k.name);
            assert_ne!(from_flag, from_file, "{}", k.name);

            let untouched = SCHEMA.iter().filter(|o| o.name != k.name);
            for o in untouched {
                assert_eq!(from_flag.origin(o.name), Some(Origin::Default));
            }
        }
    }

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.cell, CellKind::Gru);
        assert_eq!(c.hidden, vec![32, 32]);
        assert_eq!(c.batch_size, 256);
        assert_eq!(c.dropout_keep, 0.6);
        assert_eq!(c.clip_norm, Some(5.0));
        assert_eq!(c.patience, None);
        assert_eq!(c.seed, 0);
        let t = c.train_config();
        assert_eq!((t.learning_rate, t.decay, t.epsilon), (1e-3, 0.9, 1e-8));
    }

    #[test]
    fn seed_env_sits_between_default_and_file() {
        let env = RunConfig::resolve(None, &[], Some("77")).unwrap();
        assert_eq!((env.seed, env.origin("seed")), (77, Some(Origin::Env)));
        let file = RunConfig::resolve(Some("seed = 5"), &[], Some("77")).unwrap();
        assert_eq!(file.seed, 5);
        let flag = RunConfig::resolve(Some("seed = 5"), &[flag("seed", "6")], Some("77")).unwrap();
        assert_eq!(flag.seed, 6);
        assert!(RunConfig::resolve(None, &[], Some("abc")).is_err());
    }

    #[test]
    fn file_errors() {
        assert!(matches!(
            parse_config_file("colour = red"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_config_file("\n\nlayers 3"),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(matches!(
            parse_config_file("seed = 1\nseed = 2"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(RunConfig::resolve(None, &[flag("colour", "red")], None).is_err());
        assert!(RunConfig::resolve(Some("layers = x"), &[], None).is_err());
        assert!(RunConfig::resolve(Some("layers = 3\nhidden = 4,5"), &[], None).is_err());
        assert!(RunConfig::resolve(Some("readout = stacked\nhidden = 4,5"), &[], None).is_err());
    }

    #[test]
    fn hidden_list() {
        let c = RunConfig::resolve(
            Some("layers = 3\nhidden = 4, 5,6\n  # trailing comment"),
            &[],
            None,
        )
        .unwrap();
        assert_eq!(c.hidden, vec![4, 5, 6]);
        assert_eq!(c.network_config(2, 3).hidden, vec![4, 5, 6]);
    }
}

//! Option structs for every subcommand and their resolution.
//!
//! Each subcommand gets two structs from [`options!`]: a clap struct whose
//! fields are all optional, and a resolved struct with defaults. Resolution
//! layers defaults, then the subcommand's table from the TOML config file,
//! then the flags actually given.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::failure::Failure;

macro_rules! options {
    ($args:ident => $cfg:ident {
        $( $(#[doc = $doc:expr])* $field:ident : $ty:ty = $default:expr $(=> [$($attr:tt)*])? ),* $(,)?
    }) => {
        #[derive(Debug, Clone, Default, clap::Args, Serialize)]
        pub struct $args {
            $(
                $(#[doc = $doc])*
                #[arg(long $(, $($attr)*)?)]
                #[serde(skip_serializing_if = "Option::is_none")]
                pub $field: Option<$ty>,
            )*
        }

        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields, default)]
        pub struct $cfg {
            $( pub $field: $ty, )*
        }

        impl Default for $cfg {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }
    };
}

options!(InitModelArgs => InitModelConfig {
    /// Vocabulary size
    vocab: usize = 32,
    /// Maximum sequence length
    max_len: usize = 12,
    hidden: usize = 16,
    layers: usize = 2,
    heads: usize = 2,
    /// Classifier width (1 for regression)
    classes: usize = 2,
    seed: u64 = 0,
    /// Pretrain the encoder on pair-identity data before swapping in a fresh head
    pretrain: bool = true => [num_args = 0..=1, default_missing_value = "true"],
    pretrain_epochs: usize = 20,
    pretrain_lr: f64 = 1e-2,
    pretrain_size: usize = 2048,
    pretrain_seed: u64 = 5,
    /// Payload width: f64 or f32
    precision: String = "f64".into(),
    out: PathBuf = PathBuf::new(),
});

options!(GenMaskArgs => GenMaskConfig {
    checkpoint: PathBuf = PathBuf::new(),
    /// Fraction of eligible parameters to select, in (0, 1]
    sparsity: f64 = 0.005,
    /// group_wise or global
    scope: String = "group_wise".into(),
    /// smallest, largest, middle, random or diff
    selector: String = "smallest".into(),
    /// Always tune normalization parameters
    tune_norm: bool = true => [num_args = 0..=1, default_missing_value = "true"],
    /// Allow embeddings to be selected
    tune_embed: bool = false => [num_args = 0..=1, default_missing_value = "true"],
    /// Seed for the random selector
    seed: u64 = 0,
    /// Fine-tuned checkpoint for the diff selector
    reference: PathBuf = PathBuf::new(),
    out: PathBuf = PathBuf::new(),
});

options!(TrainArgs => TrainCliConfig {
    /// full_ft, linear_ft, linear_ft_norm, bitfit, pafi, adapter, or an adapter kind
    mode: String = "full_ft".into(),
    checkpoint: PathBuf = PathBuf::new(),
    /// PFMK mask (pafi mode)
    mask: PathBuf = PathBuf::new(),
    /// adapter, pfeiffer_adapter, lora, hiwi_bias or hiwi_weight (adapter mode)
    adapter_kind: String = String::new(),
    r: usize = 16,
    /// Adapter nonlinearity: relu, gelu or identity
    f: String = "relu".into(),
    lora_scale: f64 = 1.0,
    /// classification or regression
    task: String = "classification".into(),
    task_seed: u64 = 0,
    train_size: usize = 512,
    dev_size: usize = 256,
    seed: u64 = 0,
    lr: f64 = 1e-2,
    batch_size: usize = 32,
    epochs: usize = 20,
    /// adam or sgd
    optimizer: String = "adam".into(),
    /// constant or linear_decay
    schedule: String = "constant".into(),
    /// Gradient-norm clip; 0 disables it
    grad_clip: f64 = 0.0,
    precision: String = "f64".into(),
    out: PathBuf = PathBuf::new(),
});

options!(MergeArgs => MergeConfig {
    checkpoint: PathBuf = PathBuf::new(),
    adapter_weights: PathBuf = PathBuf::new(),
    /// lora, hiwi_bias or hiwi_weight
    kind: String = String::new(),
    f: String = "relu".into(),
    lora_scale: f64 = 1.0,
    precision: String = "f64".into(),
    out: PathBuf = PathBuf::new(),
});

options!(CountParamsArgs => CountParamsConfig {
    /// A method name or `all`
    method: String = "all".into(),
    /// V
    vocab: u64 = 0 => [short = 'V'],
    /// n
    max_len: u64 = 0 => [short = 'n'],
    /// d
    hidden: u64 = 0 => [short = 'd'],
    /// L
    layers: u64 = 0 => [short = 'L'],
    /// Bottleneck r; 0 means not given
    r: u64 = 0 => [short = 'r'],
    /// Prefix length l; 0 means not given
    l: u64 = 0 => [short = 'l'],
    /// Prefix bottleneck m; 0 means not given
    m: u64 = 0 => [short = 'm'],
    /// pretty or tsv
    format: String = "pretty".into(),
    /// Also write the TSV table here
    out: PathBuf = PathBuf::new(),
});

options!(EvalArgs => EvalConfig {
    checkpoint: PathBuf = PathBuf::new(),
    /// Unmerged adapters to evaluate through
    adapter_weights: PathBuf = PathBuf::new(),
    kind: String = String::new(),
    f: String = "relu".into(),
    lora_scale: f64 = 1.0,
    task: String = "classification".into(),
    task_seed: u64 = 0,
    train_size: usize = 512,
    dev_size: usize = 256,
    /// auto, accuracy or pearson
    metric: String = "auto".into(),
    /// Also write the JSON record here
    out: PathBuf = PathBuf::new(),
});

options!(DumpTaskArgs => DumpTaskConfig {
    task: String = "classification".into(),
    task_seed: u64 = 0,
    train_size: usize = 512,
    dev_size: usize = 256,
    /// TSV destination; standard output when absent
    out: PathBuf = PathBuf::new(),
});

/// Defaults ← `[command]` table of the config file ← given flags.
pub fn resolve<C, A>(command: &str, file: Option<&Path>, flags: &A) -> Result<C, Failure>
where
    C: Default + Serialize + DeserializeOwned,
    A: Serialize,
{
    let mut merged = serde_json::to_value(C::default()).expect("defaults serialize");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Load(format!("{}: {e}", path.display())))?;
        let doc: toml::Table = toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        if let Some(table) = doc.get(command) {
            let v = serde_json::to_value(table).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            overlay(&mut merged, v, &format!("[{command}] in {}", path.display()))?;
        }
    }
    overlay(&mut merged, serde_json::to_value(flags).expect("flags serialize"), "flags")?;
    serde_json::from_value(merged).map_err(|e| Failure::Usage(format!("{command}: {e}")))
}

fn overlay(base: &mut Value, top: Value, source: &str) -> Result<(), Failure> {
    let (Value::Object(base), Value::Object(top)) = (base, top) else {
        return Err(Failure::Usage(format!("{source} must be a table")));
    };
    for (k, v) in top {
        if !base.contains_key(&k) {
            return Err(Failure::Usage(format!("unknown option {k:?} in {source}")));
        }
        base.insert(k, v);
    }
    Ok(())
}

pub fn require<'a>(path: &'a Path, flag: &str) -> Result<&'a Path, Failure> {
    if path.as_os_str().is_empty() {
        Err(Failure::Usage(format!("--{flag} is required")))
    } else {
        Ok(path)
    }
}

pub fn given(path: &Path) -> Option<&Path> {
    (!path.as_os_str().is_empty()).then_some(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(&file, "[train]\nlr = 0.5\nepochs = 3\n[eval]\nmetric = \"accuracy\"\n").unwrap();
        let flags = TrainArgs {
            epochs: Some(7),
            ..Default::default()
        };
        let c: TrainCliConfig = resolve("train", Some(&file), &flags).unwrap();
        assert_eq!((c.lr, c.epochs, c.batch_size), (0.5, 7, 32));
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(&file, "[train]\nlearning_rate = 0.5\n").unwrap();
        let err = resolve::<TrainCliConfig, _>("train", Some(&file), &TrainArgs::default()).unwrap_err();
        assert_eq!(err.code(), 2);
        assert!(err.to_string().contains("learning_rate"));
    }
}

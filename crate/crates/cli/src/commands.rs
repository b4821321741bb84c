use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pafi_core::accounting::{count, CountReport, Method, ModelDims};
use pafi_core::adapters::{merged_bias_artifact, AdapterInit};
use pafi_core::bench::model::with_adapter_groups;
use pafi_core::bench::{build_model, evaluate, pretrain, Dataset, Pretraining, SyntheticTask, TaskKind, ToyModel, ToyModelConfig};
use pafi_core::checkpoint::{content_hash, load_checkpoint, manifest_path, save_checkpoint, Precision};
use pafi_core::mask::{deserialize_mask, serialize_mask};
use pafi_core::mask::{ablation_mask, diff_mask, eligible_count, pafi_mask};
use pafi_core::trainer::{train, Optimizer, Schedule};
use pafi_core::{AdapterKind, AdapterSpec, AdapterWeights, MaskPolicy, Nonlinearity, ParameterStore, Scope, Selector, TrainConfig, TrainMode};
use serde_json::json;

use crate::config::*;
use crate::failure::Failure;

/// What a command read and wrote, for the run manifest.
#[derive(Debug, Default)]
pub struct Run {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    /// The manifest is written next to this file.
    pub primary: Option<PathBuf>,
    /// A failure reported only after every output is on disk.
    pub deferred: Option<Failure>,
}

fn parse<T: FromStr<Err = pafi_core::Error>>(s: &str) -> Result<T, Failure> {
    s.parse().map_err(Failure::from)
}

fn precision(s: &str) -> Result<Precision, Failure> {
    match s {
        "f64" => Ok(Precision::F64),
        "f32" => Ok(Precision::F32),
        _ => Err(Failure::Usage(format!("precision must be f64 or f32, got {s:?}"))),
    }
}

fn load_store(path: &Path) -> Result<ParameterStore, Failure> {
    load_checkpoint(path).map_err(|e| Failure::Load(format!("{}: {e}", path.display())))
}

fn save_store(store: &ParameterStore, path: &Path, p: Precision, run: &mut Run) -> Result<(), Failure> {
    save_checkpoint(store, path, p).map_err(|e| Failure::Write(format!("{}: {e}", path.display())))?;
    run.outputs.push(path.to_path_buf());
    run.outputs.push(manifest_path(path));
    Ok(())
}

fn write_text(path: &Path, text: &str, run: &mut Run) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Write(format!("{}: {e}", path.display())))?;
    run.outputs.push(path.to_path_buf());
    Ok(())
}

/// `dir/name.ext` → `dir/name.tag.ext`.
pub fn derived(path: &Path, tag: &str, ext: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{tag}.{ext}"))
}

fn model_of(store: &ParameterStore) -> Result<ToyModel, Failure> {
    ToyModel::from_store(store).map_err(|e| Failure::Usage(format!("checkpoint is not a toy encoder: {e}")))
}

/// The synthetic task, sized to the model's vocabulary and length.
fn task_data(kind: &str, seed: u64, train: usize, dev: usize, model: &ToyModelConfig) -> Result<Dataset, Failure> {
    let kind: TaskKind = parse(kind)?;
    if model.classes != kind.head_width() {
        return Err(Failure::Usage(format!(
            "{kind} needs a {}-wide head but the checkpoint has {} classes",
            kind.head_width(),
            model.classes
        )));
    }
    let spec = SyntheticTask {
        kind,
        seed,
        train_size: train,
        dev_size: dev,
        vocab: model.vocab,
        seq_len: SyntheticTask::default().seq_len.min(model.max_len),
        ..SyntheticTask::default()
    };
    Ok(spec.generate()?)
}

fn adapter_spec(kind: AdapterKind, r: usize, f: &str, scale: f64, targets: Vec<String>) -> Result<AdapterSpec, Failure> {
    if r == 0 {
        return Err(Failure::Usage("adapter bottleneck r must be >= 1".into()));
    }
    Ok(AdapterSpec {
        kind,
        r,
        f: parse::<Nonlinearity>(f)?,
        targets,
        init: AdapterInit::default(),
        lora_scale: scale,
    })
}

/// Adapters read back from an artifact, with the spec that evaluates them.
fn load_adapters(path: &Path, kind: &str, f: &str, scale: f64) -> Result<(AdapterWeights, AdapterSpec, PathBuf), Failure> {
    if kind.is_empty() {
        return Err(Failure::Usage("--kind is required with adapter weights".into()));
    }
    let kind: AdapterKind = parse(kind)?;
    let store = load_store(path)?;
    let weights = AdapterWeights::from_store(kind, &store)?;
    let r = weights.pairs.values().map(|p| p.bottleneck()).min().unwrap_or(1);
    let spec = adapter_spec(kind, r, f, scale, weights.pairs.keys().cloned().collect())?;
    Ok((weights, spec, path.to_path_buf()))
}

pub fn init_model(c: &InitModelConfig) -> Result<Run, Failure> {
    let out = require(&c.out, "out")?;
    let p = precision(&c.precision)?;
    let config = ToyModelConfig {
        vocab: c.vocab,
        max_len: c.max_len,
        hidden: c.hidden,
        layers: c.layers,
        heads: c.heads,
        classes: c.classes,
        ..ToyModelConfig::default()
    };
    let store = if c.pretrain {
        let spec = Pretraining {
            task: SyntheticTask {
                seed: c.pretrain_seed,
                train_size: c.pretrain_size,
                vocab: c.vocab,
                seq_len: SyntheticTask::default().seq_len.min(c.max_len),
                ..SyntheticTask::default()
            },
            epochs: c.pretrain_epochs,
            learning_rate: c.pretrain_lr,
        };
        let done = pretrain(config, c.seed, &spec)?;
        eprintln!("pretraining dev accuracy {:.4}", done.pretrain_accuracy);
        done.store
    } else {
        build_model(config, c.seed)?.0
    };
    let mut run = Run {
        seed: Some(c.seed),
        primary: Some(out.to_path_buf()),
        ..Run::default()
    };
    save_store(&store, out, p, &mut run)?;
    Ok(run)
}

pub fn gen_mask(c: &GenMaskConfig) -> Result<Run, Failure> {
    let ckpt = require(&c.checkpoint, "checkpoint")?;
    let out = require(&c.out, "out")?;
    if !(c.sparsity > 0.0 && c.sparsity <= 1.0) {
        return Err(Failure::Usage(format!("--sparsity must lie in (0, 1], got {}", c.sparsity)));
    }
    let scope: Scope = parse(&c.scope)?;
    let selector: Selector = parse(&c.selector)?;
    let policy = MaskPolicy {
        tune_norm: c.tune_norm,
        tune_embed: c.tune_embed,
    };
    let mut run = Run {
        inputs: vec![ckpt.to_path_buf()],
        seed: Some(c.seed),
        primary: Some(out.to_path_buf()),
        ..Run::default()
    };
    let store = load_store(ckpt)?;
    let k_of = |policy| ((c.sparsity * eligible_count(&store, policy) as f64).round() as usize).max(1);
    let mask = match selector {
        Selector::Smallest => pafi_mask(&store, c.sparsity, scope, policy)?,
        Selector::Largest | Selector::Middle | Selector::Random => {
            ablation_mask(&store, k_of(policy), selector, scope, policy, c.seed)?
        }
        Selector::Diff => {
            let reference = require(&c.reference, "reference")?;
            run.inputs.push(reference.to_path_buf());
            let tuned = load_store(reference)?;
            let k = k_of(MaskPolicy {
                tune_norm: false,
                tune_embed: true,
            });
            diff_mask(&store, &tuned, k)?
        }
        Selector::Fisher | Selector::Mode => {
            return Err(Failure::Usage(format!(
                "the {selector} selector needs task data and is not available from gen-mask"
            )))
        }
    };
    serialize_mask(&mask, out).map_err(|e| Failure::Write(format!("{}: {e}", out.display())))?;
    run.outputs.push(out.to_path_buf());
    let forced = store.count_where(|g| mask.policy.tune_norm && g.role().is_norm());
    eprintln!(
        "mask selects {} of {} eligible parameters plus {forced} always-tuned norm parameters ({} selector, {})",
        mask.selected() - forced,
        eligible_count(&store, mask.policy),
        mask.selector,
        mask.scope
    );
    Ok(run)
}

fn train_mode(c: &TrainCliConfig, store: &ParameterStore, run: &mut Run) -> Result<TrainMode, Failure> {
    let mode = c.mode.to_ascii_lowercase().replace('-', "_");
    let kind_from_mode = mode.parse::<AdapterKind>().ok().filter(|_| mode != "adapter");
    if mode != "pafi" && given(&c.mask).is_some() {
        return Err(Failure::Usage("--mask only applies to pafi mode".into()));
    }
    if mode != "adapter" && kind_from_mode.is_none() && !c.adapter_kind.is_empty() {
        return Err(Failure::Usage("--adapter-kind only applies to adapter mode".into()));
    }
    let adapter = |kind: AdapterKind| -> Result<TrainMode, Failure> {
        let meta = store
            .meta()
            .ok_or_else(|| Failure::Usage("checkpoint carries no model dimensions".into()))?;
        let defaults = AdapterSpec::new(kind, c.r, meta)?;
        Ok(TrainMode::Adapter(adapter_spec(kind, c.r, &c.f, c.lora_scale, defaults.targets)?))
    };
    Ok(match mode.as_str() {
        "full_ft" => TrainMode::FullFt,
        "linear_ft" => TrainMode::LinearFt,
        "linear_ft_norm" => TrainMode::LinearFtNorm,
        "bitfit" => TrainMode::BitFit,
        "pafi" => {
            let path = given(&c.mask).ok_or_else(|| Failure::Usage("pafi mode needs --mask".into()))?;
            let mask = deserialize_mask(path).map_err(|e| Failure::Load(format!("{}: {e}", path.display())))?;
            run.inputs.push(path.to_path_buf());
            if mask.provenance != content_hash(store) {
                return Err(Failure::Usage(format!(
                    "mask {} was generated from a different checkpoint",
                    path.display()
                )));
            }
            TrainMode::Pafi(mask)
        }
        "adapter" => {
            if c.adapter_kind.is_empty() {
                return Err(Failure::Usage("adapter mode needs --adapter-kind".into()));
            }
            adapter(parse(&c.adapter_kind)?)?
        }
        _ => match kind_from_mode {
            Some(kind) => adapter(kind)?,
            None => return Err(Failure::Usage(format!("unknown training mode {:?}", c.mode))),
        },
    })
}

pub fn train_cmd(c: &TrainCliConfig) -> Result<Run, Failure> {
    let ckpt = require(&c.checkpoint, "checkpoint")?;
    let out = require(&c.out, "out")?;
    let p = precision(&c.precision)?;
    let mut run = Run {
        inputs: vec![ckpt.to_path_buf()],
        seed: Some(c.seed),
        primary: Some(out.to_path_buf()),
        ..Run::default()
    };
    let store = load_store(ckpt)?;
    let model = model_of(&store)?;
    let mode = train_mode(c, &store, &mut run)?;
    let data = task_data(&c.task, c.task_seed, c.train_size, c.dev_size, model.config())?;
    let mut config = TrainConfig::new(mode);
    config.learning_rate = c.lr;
    config.batch_size = c.batch_size;
    config.epochs = c.epochs;
    config.seed = c.seed;
    config.optimizer = match c.optimizer.as_str() {
        "adam" => Optimizer::adam(),
        "sgd" => Optimizer::Sgd,
        other => return Err(Failure::Usage(format!("optimizer must be adam or sgd, got {other:?}"))),
    };
    config.schedule = match c.schedule.as_str() {
        "constant" => Schedule::Constant,
        "linear_decay" => Schedule::LinearDecay,
        other => return Err(Failure::Usage(format!("schedule must be constant or linear_decay, got {other:?}"))),
    };
    config.grad_clip = (c.grad_clip != 0.0).then_some(c.grad_clip);
    let outcome = train(&model, &store, &data, &config)?;

    match (&config.mode, &outcome.adapters) {
        (TrainMode::Adapter(spec), Some(weights)) => {
            let base = outcome.params.filtered(|g| !g.role().is_adapter());
            save_store(&base, out, p, &mut run)?;
            save_store(&weights.to_store(), &derived(out, "adapters", "pfrg"), p, &mut run)?;
            if spec.kind == AdapterKind::HiwiBias {
                let merged = weights.merge_into(&base, spec)?;
                let artifact = merged_bias_artifact(&merged, weights)?;
                save_store(&artifact, &derived(out, "bias", "pfrg"), p, &mut run)?;
            }
        }
        _ => save_store(&outcome.params, out, p, &mut run)?,
    }
    let jsonl = outcome.report.to_jsonl();
    write_text(&derived(out, "report", "jsonl"), &jsonl, &mut run)?;
    print!("{}", jsonl.lines().last().map(|l| format!("{l}\n")).unwrap_or_default());
    if outcome.report.frozen_violations > 0 {
        run.deferred = Some(Failure::Frozen(outcome.report.frozen_violations));
    }
    Ok(run)
}

pub fn merge(c: &MergeConfig) -> Result<Run, Failure> {
    let ckpt = require(&c.checkpoint, "checkpoint")?;
    let wpath = require(&c.adapter_weights, "adapter-weights")?;
    let out = require(&c.out, "out")?;
    let p = precision(&c.precision)?;
    let base = load_store(ckpt)?;
    let (weights, spec, wpath) = load_adapters(wpath, &c.kind, &c.f, c.lora_scale)?;
    let merged = weights.merge_into(&base, &spec)?;
    let mut run = Run {
        inputs: vec![ckpt.to_path_buf(), wpath],
        primary: Some(out.to_path_buf()),
        ..Run::default()
    };
    save_store(&merged, out, p, &mut run)?;
    Ok(run)
}

fn dims(c: &CountParamsConfig) -> ModelDims {
    let opt = |v: u64| (v > 0).then_some(v);
    ModelDims {
        r: opt(c.r),
        prefix_len: opt(c.l),
        prefix_bottleneck: opt(c.m),
        ..ModelDims::new(c.vocab, c.max_len, c.hidden, c.layers)
    }
}

fn tsv_table(rows: &[CountReport]) -> String {
    let mut s = String::from("method\ttuned\tstored\ttuned_pct\tstored_pct\n");
    for r in rows {
        writeln!(s, "{}\t{}\t{}\t{}\t{}", r.method, r.tuned, r.stored, r.tuned_pct, r.stored_pct).unwrap();
    }
    s
}

fn pretty_table(rows: &[CountReport]) -> String {
    let mut s = format!("{:<18}{:>14}{:>14}{:>11}{:>11}\n", "method", "#tuned", "#stored", "tuned", "stored");
    for r in rows {
        writeln!(
            s,
            "{:<18}{:>14}{:>14}{:>10.4}%{:>10.4}%",
            r.method.name(),
            r.tuned,
            r.stored,
            r.tuned_pct,
            r.stored_pct
        )
        .unwrap();
    }
    s
}

pub fn count_params(c: &CountParamsConfig) -> Result<Run, Failure> {
    let methods: Vec<Method> = if c.method.eq_ignore_ascii_case("all") {
        Method::ALL.to_vec()
    } else {
        vec![parse(&c.method)?]
    };
    let d = dims(c);
    let rows = methods
        .into_iter()
        .map(|m| count(m, &d).map_err(|e| Failure::Usage(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let tsv = tsv_table(&rows);
    match c.format.as_str() {
        "tsv" => print!("{tsv}"),
        "pretty" => print!("{}", pretty_table(&rows)),
        other => return Err(Failure::Usage(format!("format must be pretty or tsv, got {other:?}"))),
    }
    let mut run = Run::default();
    if let Some(out) = given(&c.out) {
        write_text(out, &tsv, &mut run)?;
        run.primary = Some(out.to_path_buf());
    }
    Ok(run)
}

pub fn eval(c: &EvalConfig) -> Result<Run, Failure> {
    let ckpt = require(&c.checkpoint, "checkpoint")?;
    let mut run = Run {
        inputs: vec![ckpt.to_path_buf()],
        seed: Some(c.task_seed),
        ..Run::default()
    };
    let store = load_store(ckpt)?;
    let mut model = model_of(&store)?;
    let mut params = store.clone();
    if let Some(path) = given(&c.adapter_weights) {
        let (weights, spec, path) = load_adapters(path, &c.kind, &c.f, c.lora_scale)?;
        run.inputs.push(path);
        params = with_adapter_groups(&store, &weights)?;
        model = model.with_adapters(spec);
    } else if !c.kind.is_empty() {
        return Err(Failure::Usage("--kind only applies with --adapter-weights".into()));
    }
    let data = task_data(&c.task, c.task_seed, c.train_size, c.dev_size, model.config())?;
    let fits = matches!(
        (c.metric.as_str(), data.kind),
        ("auto", _) | ("accuracy", TaskKind::Classification) | ("pearson", TaskKind::Regression)
    );
    if !fits {
        return Err(Failure::Usage(format!("metric {:?} does not apply to {} tasks", c.metric, data.kind)));
    }
    let metric = evaluate(&model, &params, data.kind, &data.dev, 64)?;
    if metric.degenerate {
        eprintln!("warning: predictions have zero variance; {} reported as 0", metric.name);
    }
    let record = json!({
        "checkpoint": ckpt.display().to_string(),
        "task": data.kind.name(),
        "task_seed": c.task_seed,
        "split": "dev",
        "examples": data.dev.len(),
        "metric": metric.name,
        "value": metric.value,
        "degenerate": metric.degenerate,
    });
    let line = format!("{record}\n");
    print!("{line}");
    if let Some(out) = given(&c.out) {
        write_text(out, &line, &mut run)?;
        run.primary = Some(out.to_path_buf());
    }
    Ok(run)
}

pub fn dump_task(c: &DumpTaskConfig) -> Result<Run, Failure> {
    let spec = SyntheticTask {
        kind: parse(&c.task)?,
        seed: c.task_seed,
        train_size: c.train_size,
        dev_size: c.dev_size,
        ..SyntheticTask::default()
    };
    let data = spec.generate()?;
    let mut tsv = String::from("split\ttokens\tlabel\n");
    for (split, tokens, label) in data.rows() {
        writeln!(tsv, "{split}\t{tokens}\t{label}").unwrap();
    }
    let mut run = Run {
        seed: Some(c.task_seed),
        ..Run::default()
    };
    match given(&c.out) {
        Some(out) => {
            write_text(out, &tsv, &mut run)?;
            run.primary = Some(out.to_path_buf());
        }
        None => print!("{tsv}"),
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_paths() {
        assert_eq!(derived(Path::new("out/run.pfrg"), "report", "jsonl"), PathBuf::from("out/run.report.jsonl"));
        assert_eq!(derived(Path::new("m"), "manifest", "json"), PathBuf::from("m.manifest.json"));
    }

    #[test]
    fn count_tables_agree() {
        let c = CountParamsConfig {
            vocab: 50,
            max_len: 16,
            hidden: 8,
            layers: 2,
            r: 2,
            l: 4,
            m: 4,
            ..CountParamsConfig::default()
        };
        let rows: Vec<_> = Method::ALL.iter().map(|&m| count(m, &dims(&c)).unwrap()).collect();
        let tsv = tsv_table(&rows);
        assert_eq!(tsv.lines().count(), 11);
        assert!(tsv.lines().nth(1).unwrap().starts_with("full_ft\t"));
        assert_eq!(pretty_table(&rows).lines().count(), 11);
    }
}

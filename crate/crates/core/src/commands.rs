//! Subcommand implementations behind the command-line front end.

use std::path::{Path, PathBuf};

use crate::data::{write_layout, DomainDataset, SyntheticSpec};
use crate::engine::{run_ctta, run_looa, ProtocolResult};
use crate::error::{Error, Result};
use crate::io::report::write_records_file;
use crate::io::{bench_table, load_model, save_model, CheckpointMeta, Protocol, RunConfig, Summary, SummaryRow};
use crate::metrics::benchmark;
use crate::nn::{ArchSpec, NetworkModel};
use crate::train::{train_looa, train_single_source, Checkpoint};

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("checkpoints")
}

/// Leave-one-out checkpoints serve both `looa` and `bs1`.
fn checkpoint_kind(protocol: Protocol) -> &'static str {
    match protocol {
        Protocol::Looa | Protocol::Bs1 => "looa",
        Protocol::Ctta => "ctta",
    }
}

pub fn checkpoint_path(cfg: &RunConfig, subject: &str) -> PathBuf {
    checkpoint_dir(cfg).join(format!("{}-{subject}.oftta", checkpoint_kind(cfg.protocol)))
}

/// Train per protocol and write one weight file per checkpoint.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let (domains, arch) = cfg.load_data()?;
    create_dir(&checkpoint_dir(cfg))?;
    let subjects: Vec<String> = domains.iter().map(|d| d.subject().to_string()).collect();
    let (checkpoints, metas): (Vec<Checkpoint>, Vec<CheckpointMeta>) = match cfg.protocol {
        Protocol::Looa | Protocol::Bs1 => {
            let cps = train_looa(&domains, &arch, &cfg.train)?;
            let metas = subjects
                .iter()
                .zip(&cps)
                .map(|(held, cp)| CheckpointMeta {
                    sources: subjects.iter().filter(|s| *s != held).cloned().collect(),
                    held_out: Some(held.clone()),
                    epoch: cp.epoch,
                    val_loss: cp.val_loss,
                })
                .collect();
            (cps, metas)
        }
        Protocol::Ctta => {
            let cps = train_single_source(&domains, &arch, &cfg.train)?;
            let metas = subjects
                .iter()
                .zip(&cps)
                .map(|(src, cp)| CheckpointMeta {
                    sources: vec![src.clone()],
                    held_out: None,
                    epoch: cp.epoch,
                    val_loss: cp.val_loss,
                })
                .collect();
            (cps, metas)
        }
    };
    let mut paths = Vec::with_capacity(checkpoints.len());
    for ((subject, cp), meta) in subjects.iter().zip(&checkpoints).zip(metas) {
        let path = checkpoint_path(cfg, subject);
        save_model(&path, &cp.model, Some(meta))?;
        log::info!("wrote {} (epoch {}, val loss {:.4})", path.display(), cp.epoch, cp.val_loss);
        paths.push(path);
    }
    Ok(paths)
}

fn load_checkpoint(cfg: &RunConfig, subject: &str, arch: &ArchSpec) -> Result<(NetworkModel<f32>, CheckpointMeta)> {
    let path = checkpoint_path(cfg, subject);
    if !path.exists() {
        return Err(Error::config(format!(
            "no checkpoint for domain `{subject}` at {} (run `train` first)",
            path.display()
        )));
    }
    let (model, meta) = load_model(&path)?;
    let meta = meta.ok_or_else(|| Error::Data(format!("{} carries no training metadata", path.display())))?;
    let fits = model.arch.input_height == arch.input_height
        && model.arch.input_width == arch.input_width
        && model.arch.num_classes == arch.num_classes;
    if !fits {
        return Err(Error::Data(format!(
            "{} was trained for {}x{} windows with {} classes, dataset has {}x{} with {}",
            path.display(),
            model.arch.input_height,
            model.arch.input_width,
            model.arch.num_classes,
            arch.input_height,
            arch.input_width,
            arch.num_classes
        )));
    }
    let consistent = match cfg.protocol {
        Protocol::Ctta => meta.sources == [subject],
        _ => meta.held_out.as_deref() == Some(subject),
    };
    if !consistent {
        return Err(Error::Data(format!(
            "{} was trained on {:?} (held out {:?}), which does not fit domain `{subject}`",
            path.display(),
            meta.sources,
            meta.held_out
        )));
    }
    Ok((model, meta))
}

/// Every `(group, result)` of the configured protocol for one method.
fn run_protocol(
    cfg: &RunConfig,
    domains: &[DomainDataset],
    models: &[NetworkModel<f32>],
    method: crate::engine::TtaMethod,
) -> Result<Vec<(String, ProtocolResult)>> {
    let adapt = cfg.adaptation(method, cfg.seeds[0]);
    match cfg.protocol {
        Protocol::Looa | Protocol::Bs1 => Ok(vec![("all".to_string(), run_looa(models, domains, &adapt, &cfg.seeds)?)]),
        Protocol::Ctta => domains
            .iter()
            .zip(models)
            .map(|(src, model)| {
                let targets: Vec<DomainDataset> = domains.iter().filter(|d| d.subject() != src.subject()).cloned().collect();
                Ok((src.subject().to_string(), run_ctta(model, src.subject(), &targets, &adapt, &cfg.seeds)?))
            })
            .collect(),
    }
}

/// Adapt with every configured method and seed; writes per-batch JSONL
/// records and the summary table.
pub fn cmd_adapt(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let (domains, arch) = cfg.load_data()?;
    let models = domains
        .iter()
        .map(|d| load_checkpoint(cfg, d.subject(), &arch).map(|(m, _)| m))
        .collect::<Result<Vec<_>>>()?;
    let dir = cfg.output_dir.join(format!("adapt-{}", cfg.protocol));
    create_dir(&dir)?;
    let mut rows = Vec::new();
    let mut written = Vec::new();
    for &method in &cfg.methods {
        let results = run_protocol(cfg, &domains, &models, method)?;
        let path = dir.join(format!("records-{}.jsonl", method.to_string().replace(':', "_")));
        write_records_file(&path, &results)?;
        written.push(path);
        rows.extend(results.iter().map(|(g, r)| SummaryRow::from_result(g, r)));
    }
    if cfg.protocol == Protocol::Ctta {
        rows.sort_by(|a, b| a.group.cmp(&b.group));
    }
    let summary = Summary {
        protocol: cfg.protocol.to_string(),
        seeds: cfg.seeds.clone(),
        rows,
    };
    summary.write(&dir, "summary")?;
    print!("{}", summary.to_table());
    written.push(dir.join("summary.json"));
    written.push(dir.join("summary.txt"));
    Ok(written)
}

/// Time every configured method on the first domain with its checkpoint.
pub fn cmd_bench(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let (domains, arch) = cfg.load_data()?;
    let target = &domains[0];
    let (model, _) = load_checkpoint(cfg, target.subject(), &arch)?;
    let adapt = cfg.adaptation(cfg.methods[0], cfg.seeds[0]);
    let report = benchmark(&cfg.methods, &model, target, &adapt, cfg.bench.repetitions)?;
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("bench.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    let table = bench_table(&report);
    let txt = cfg.output_dir.join("bench.txt");
    std::fs::write(&txt, &table).map_err(|e| Error::io(&txt, e))?;
    print!("{table}");
    Ok(path)
}

/// Write a synthetic corpus in the UCI-like directory layout.
pub fn cmd_gen_data(spec: &SyntheticSpec, out: &Path) -> Result<PathBuf> {
    let domains = crate::data::generate_synthetic(spec)?;
    let signals: Vec<String> = (0..spec.axes).map(|c| format!("syn_axis{c}")).collect();
    write_layout(out, &domains, &signals)?;
    Ok(out.to_path_buf())
}

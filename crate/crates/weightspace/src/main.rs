//! Command-line pipeline driver.
//!
//! Subcommands map 1:1 onto the library stages: `zoo-gen` → `align` →
//! `pretrain` → `embed` → `probe`, with `analyze`, `sample`, `finetune` and
//! `report` branching off the shared artifacts. All stages read one JSON run
//! configuration, derive their randomness from its single seed, and write
//! their outputs (plus a resolved-config copy and input hashes) into a
//! per-stage directory under `out_dir`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use weightspace::align::align_zoo;
use weightspace::analyze::{
    linear_probe, spectral_report, weight_statistics, write_probe_json, write_scatter_svg,
    write_spectral_csv, ProbeReport, ProbeRow, SpectralReport,
};
use weightspace::autoencoder::{
    load_autoencoder, pretrain, save_autoencoder, write_training_log, Autoencoder,
};
use weightspace::config::{streams, write_stage_metadata, RunConfig};
use weightspace::embed::{
    embed_model, save_embeddings, summarize, write_summary_csv, EmbeddingSequence,
};
use weightspace::error::{Error, Result};
use weightspace::sample::{bootstrap, finetune, write_sampling_report, PromptSet};
use weightspace::tokenizer::{standardize, tokenize, PreprocessState};
use weightspace::zoo::{
    derive_seed, evaluate, generate_task, load_checkpoint, load_zoo, save_zoo, train_zoo,
    Dataset, Split, TaskSpec, Zoo,
};

#[derive(Parser)]
#[command(name = "weightspace", version, about = "Weight-space representation learning pipeline")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true, default_value = "run.json")]
    config: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base-model zoo.
    ZooGen,
    /// Align all zoo checkpoints to a reference model.
    Align,
    /// Pretrain the token autoencoder on the aligned zoo.
    Pretrain,
    /// Embed every checkpoint and export aggregates.
    Embed,
    /// Linear-probe embeddings and weight statistics for model properties.
    Probe,
    /// Spectral weight diagnostics.
    Analyze {
        /// Also emit SVG scatter plots.
        #[arg(long)]
        plots: bool,
    },
    /// Sample new models by KDE bootstrap in embedding space.
    Sample,
    /// Fine-tune a checkpoint (default: the best sampled model).
    Finetune {
        /// Checkpoint container directory to start from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Merge stage outputs into a single report.
    Report {
        /// Also emit SVG scatter plots.
        #[arg(long)]
        plots: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Json(_) => 2,
        Error::Data(_) | Error::Format(_) => 3,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
        _ => 1,
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(&cli.config)?;
    match &cli.command {
        Command::ZooGen => cmd_zoo_gen(&cfg),
        Command::Align => cmd_align(&cfg),
        Command::Pretrain => cmd_pretrain(&cfg),
        Command::Embed => cmd_embed(&cfg),
        Command::Probe => cmd_probe(&cfg),
        Command::Analyze { plots } => cmd_analyze(&cfg, *plots),
        Command::Sample => cmd_sample(&cfg),
        Command::Finetune { checkpoint } => cmd_finetune(&cfg, checkpoint.as_deref()),
        Command::Report { plots } => cmd_report(&cfg, *plots),
    }
}

/// Missing-artifact guard: stages never create their own inputs.
fn require(path: &Path, produced_by: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Data(format!(
            "missing input {} (run `{produced_by}` first)",
            path.display()
        )));
    }
    Ok(())
}

fn cmd_zoo_gen(cfg: &RunConfig) -> Result<()> {
    let arch = cfg.zoo.arch.build();
    let zoo = train_zoo::<f32>(
        &arch,
        &cfg.zoo.task,
        cfg.zoo.n_models,
        cfg.zoo.n_train,
        cfg.zoo.n_test,
        &cfg.zoo.train,
        derive_seed(cfg.seed, streams::ZOO),
    )?;
    let dir = cfg.zoo_dir();
    save_zoo(&dir, &zoo)?;
    write_stage_metadata(&dir, "zoo-gen", cfg, &[])?;
    println!(
        "zoo-gen: wrote {} checkpoints to {}",
        zoo.checkpoints.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_align(cfg: &RunConfig) -> Result<()> {
    let zoo_dir = cfg.zoo_dir();
    require(&zoo_dir, "zoo-gen")?;
    let zoo = load_zoo::<f32>(&zoo_dir)?;
    let reference = match &cfg.zoo.reference {
        Some(id) => id.clone(),
        None => zoo
            .split_ids(Split::Train)
            .first()
            .cloned()
            .ok_or_else(|| Error::Data("zoo has no training models".into()))?,
    };
    let aligned = align_zoo(&zoo, &reference)?;
    let dir = cfg.aligned_dir();
    save_zoo(&dir, &aligned)?;
    write_stage_metadata(&dir, "align", cfg, &[&zoo_dir])?;
    println!("align: reference {reference}, wrote {}", dir.display());
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    let aligned_dir = cfg.aligned_dir();
    require(&aligned_dir, "align")?;
    let zoo = load_zoo::<f32>(&aligned_dir)?;
    let out = pretrain(&zoo, &cfg.autoencoder)?;
    let dir = cfg.autoencoder_dir();
    save_autoencoder(&dir, &out.model, &out.state)?;
    write_training_log(&dir.join("training_log.csv"), &out.log)?;
    write_stage_metadata(&dir, "pretrain", cfg, &[&aligned_dir])?;
    let best = out
        .log
        .iter()
        .map(|e| e.val_rec)
        .fold(f64::INFINITY, f64::min);
    println!(
        "pretrain: {} epochs, best val reconstruction {best:.6}, wrote {}",
        out.log.len(),
        dir.display()
    );
    Ok(())
}

fn load_trained(cfg: &RunConfig) -> Result<(Zoo<f32>, Autoencoder<f32>, PreprocessState)> {
    let aligned_dir = cfg.aligned_dir();
    let ae_dir = cfg.autoencoder_dir();
    require(&aligned_dir, "align")?;
    require(&ae_dir, "pretrain")?;
    let zoo = load_zoo::<f32>(&aligned_dir)?;
    let (model, state) = load_autoencoder::<f32>(&ae_dir)?;
    Ok((zoo, model, state))
}

fn embed_all(
    cfg: &RunConfig,
    zoo: &Zoo<f32>,
    model: &Autoencoder<f32>,
    state: &PreprocessState,
) -> Result<Vec<EmbeddingSequence<f32>>> {
    let ws_inf = cfg.embed.ws_inf.unwrap_or(model.config.ws);
    let halo = cfg.embed.halo.unwrap_or(model.config.ws / 4);
    zoo.checkpoints
        .iter()
        .map(|c| {
            let seq = tokenize(&standardize(c, state)?, model.config.d_t)?;
            embed_model(model, &seq, &c.meta.model_id, c.meta.epoch, ws_inf, halo)
        })
        .collect()
}

fn cmd_embed(cfg: &RunConfig) -> Result<()> {
    let (zoo, model, state) = load_trained(cfg)?;
    let embeddings = embed_all(cfg, &zoo, &model, &state)?;
    let dir = cfg.embeddings_dir();
    save_embeddings(&dir, &embeddings)?;
    let summaries = embeddings.iter().map(summarize).collect::<Result<Vec<_>>>()?;
    write_summary_csv(&dir.join("summary.csv"), &summaries)?;
    write_stage_metadata(&dir, "embed", cfg, &[&cfg.aligned_dir(), &cfg.autoencoder_dir()])?;
    println!(
        "embed: wrote {} embedding sequences to {}",
        embeddings.len(),
        dir.display()
    );
    Ok(())
}

/// Build probe rows for one feature source over all non-excluded
/// checkpoints; train split trains the probe, test split scores it.
fn probe_rows(
    zoo: &Zoo<f32>,
    target: fn(&weightspace::zoo::ZooEntry) -> f64,
    features: &dyn Fn(&str, usize) -> Option<Vec<f64>>,
) -> Vec<ProbeRow> {
    zoo.manifest
        .entries
        .iter()
        .filter(|e| !e.excluded && e.split != Split::Val)
        .filter_map(|e| {
            Some(ProbeRow {
                model_id: e.model_id.clone(),
                features: features(&e.model_id, e.epoch)?,
                target: target(e),
                train: e.split == Split::Train,
            })
        })
        .collect()
}

fn cmd_probe(cfg: &RunConfig) -> Result<()> {
    let (zoo, model, state) = load_trained(cfg)?;
    let embeddings = embed_all(cfg, &zoo, &model, &state)?;
    let latent_means: std::collections::BTreeMap<(String, usize), Vec<f64>> = embeddings
        .iter()
        .map(|e| {
            Ok((
                (e.model_id.clone(), e.epoch),
                weightspace::embed::aggregate_mean(e)?,
            ))
        })
        .collect::<Result<_>>()?;
    let stats: std::collections::BTreeMap<(String, usize), Vec<f64>> = zoo
        .checkpoints
        .iter()
        .map(|c| {
            (
                (c.meta.model_id.clone(), c.meta.epoch),
                weight_statistics(c),
            )
        })
        .collect();
    let latent = |id: &str, ep: usize| latent_means.get(&(id.to_string(), ep)).cloned();
    let sw = |id: &str, ep: usize| stats.get(&(id.to_string(), ep)).cloned();

    let mut reports: Vec<ProbeReport> = Vec::new();
    type Target = fn(&weightspace::zoo::ZooEntry) -> f64;
    let targets: [(&str, Target); 3] = [
        ("acc", |e| e.test_acc),
        ("epoch", |e| e.epoch as f64),
        ("ggap", |e| e.ggap),
    ];
    for (name, target) in targets {
        reports.push(linear_probe(
            &probe_rows(&zoo, target, &latent),
            name,
            "latent_mean",
        )?);
        reports.push(linear_probe(
            &probe_rows(&zoo, target, &sw),
            name,
            "weight_stats",
        )?);
    }
    let dir = cfg.probe_dir();
    std::fs::create_dir_all(&dir)?;
    write_probe_json(&dir.join("probe.json"), &reports)?;
    write_stage_metadata(&dir, "probe", cfg, &[&cfg.aligned_dir(), &cfg.autoencoder_dir()])?;
    for r in &reports {
        println!(
            "probe: {} from {} -> R² {}",
            r.target,
            r.feature_source,
            r.r2.map_or("undefined".into(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}

fn cmd_analyze(cfg: &RunConfig, plots: bool) -> Result<()> {
    let zoo_dir = cfg.zoo_dir();
    require(&zoo_dir, "zoo-gen")?;
    let zoo = load_zoo::<f32>(&zoo_dir)?;
    let reports: Vec<SpectralReport> = zoo
        .checkpoints
        .iter()
        .map(spectral_report)
        .collect::<Result<_>>()?;
    let dir = cfg.analyze_dir();
    std::fs::create_dir_all(&dir)?;
    write_spectral_csv(&dir.join("spectral.csv"), &reports)?;
    if plots {
        let acc_of = |id: &str, ep: usize| {
            zoo.manifest
                .entries
                .iter()
                .find(|e| e.model_id == id && e.epoch == ep)
                .map(|e| e.test_acc)
        };
        let points: Vec<(f64, f64)> = reports
            .iter()
            .filter_map(|r| Some((r.mean_log_spectral_norm, acc_of(&r.model_id, r.epoch)?)))
            .collect();
        write_scatter_svg(
            &dir.join("log_spectral_norm_vs_acc.svg"),
            &points,
            "mean log spectral norm",
            "test accuracy",
            "spectral norm vs accuracy",
        )?;
        let alpha_points: Vec<(f64, f64)> = reports
            .iter()
            .filter_map(|r| Some((r.mean_alpha?, acc_of(&r.model_id, r.epoch)?)))
            .collect();
        if !alpha_points.is_empty() {
            write_scatter_svg(
                &dir.join("alpha_vs_acc.svg"),
                &alpha_points,
                "mean power-law alpha",
                "test accuracy",
                "tail exponent vs accuracy",
            )?;
        }
    }
    write_stage_metadata(&dir, "analyze", cfg, &[&zoo_dir])?;
    println!("analyze: wrote {} model reports to {}", reports.len(), dir.display());
    Ok(())
}

fn eval_dataset(cfg: &RunConfig, stream: u64, n: usize) -> Result<Dataset<f32>> {
    let spec = TaskSpec {
        seed: derive_seed(cfg.seed, stream),
        ..cfg.zoo.task.clone()
    };
    generate_task(&spec, n)
}

fn cmd_sample(cfg: &RunConfig) -> Result<()> {
    let (zoo, model, state) = load_trained(cfg)?;
    let arch = cfg.zoo.arch.build();
    // prompt examples: final-epoch train-split embeddings
    let last = *zoo
        .snapshot_epochs()
        .last()
        .ok_or_else(|| Error::Data("zoo has no checkpoints".into()))?;
    let prompt_embeddings: Vec<EmbeddingSequence<f32>> = {
        let all = embed_all(cfg, &zoo, &model, &state)?;
        let train_ids = zoo.split_ids(Split::Train);
        all.into_iter()
            .filter(|e| e.epoch == last && train_ids.contains(&e.model_id))
            .collect()
    };
    let prompts = PromptSet {
        embeddings: prompt_embeddings,
    };
    let select = eval_dataset(cfg, streams::EVAL_DATA, cfg.zoo.n_test.max(64))?;
    let metric = move |m: &weightspace::zoo::ModelCheckpoint<f32>| Ok(evaluate(m, &select)?.0);
    let condition = eval_dataset(cfg, streams::SAMPLE, cfg.zoo.n_test.max(64))?;
    let out = bootstrap(
        &model,
        &state,
        &arch,
        Some(&prompts),
        &cfg.sample,
        &condition,
        &metric,
    )?;
    let dir = cfg.sample_dir();
    let report = write_sampling_report(&dir, &cfg.sample, &out)?;
    write_stage_metadata(&dir, "sample", cfg, &[&cfg.aligned_dir(), &cfg.autoencoder_dir()])?;
    for t in &report.trace {
        println!(
            "sample: iteration {} best kept {:.4}",
            t.iteration, t.best_kept
        );
    }
    Ok(())
}

fn cmd_finetune(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let default = cfg.sample_dir().join("kept00");
    let ckpt_dir = checkpoint.unwrap_or(&default);
    require(ckpt_dir, "sample")?;
    let ckpt = load_checkpoint::<f32>(ckpt_dir)?;
    let train = eval_dataset(cfg, streams::TASK, cfg.zoo.n_train)?;
    let test = eval_dataset(cfg, streams::EVAL_DATA, cfg.zoo.n_test)?;
    let (tuned, trajectory) = finetune(
        &ckpt,
        &train,
        &test,
        cfg.finetune.epochs,
        cfg.finetune.lr,
        cfg.finetune.batch_size,
        derive_seed(cfg.seed, streams::FINETUNE),
    )?;
    let dir = cfg.finetune_dir();
    std::fs::create_dir_all(&dir)?;
    weightspace::zoo::save_checkpoint(&dir.join("finetuned"), &tuned)?;
    let mut csv = String::from("epoch,test_acc\n");
    for (ep, acc) in &trajectory {
        csv.push_str(&format!("{ep},{acc}\n"));
    }
    std::fs::write(dir.join("trajectory.csv"), csv)?;
    write_stage_metadata(&dir, "finetune", cfg, &[ckpt_dir])?;
    println!(
        "finetune: {} epochs, final accuracy {:.4}",
        cfg.finetune.epochs,
        trajectory.last().map(|&(_, a)| a).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_report(cfg: &RunConfig, plots: bool) -> Result<()> {
    let dir = cfg.report_dir();
    std::fs::create_dir_all(&dir)?;
    let mut sections = serde_json::Map::new();
    let probe_path = cfg.probe_dir().join("probe.json");
    if probe_path.exists() {
        sections.insert(
            "probe".into(),
            serde_json::from_str(&std::fs::read_to_string(&probe_path)?)?,
        );
    }
    let sampling_path = cfg.sample_dir().join("sampling.json");
    if sampling_path.exists() {
        sections.insert(
            "sampling".into(),
            serde_json::from_str(&std::fs::read_to_string(&sampling_path)?)?,
        );
    }
    let spectral_path = cfg.analyze_dir().join("spectral.csv");
    if spectral_path.exists() {
        sections.insert(
            "spectral_csv".into(),
            serde_json::Value::String(std::fs::read_to_string(&spectral_path)?),
        );
    }
    if sections.is_empty() {
        return Err(Error::Data(
            "no stage outputs found; run probe/analyze/sample first".into(),
        ));
    }
    if plots {
        // probe R² bar-equivalent: scatter of target index vs R²
        if let Some(serde_json::Value::Array(probes)) = sections.get("probe") {
            let points: Vec<(f64, f64)> = probes
                .iter()
                .enumerate()
                .filter_map(|(i, p)| Some((i as f64, p.get("r2")?.as_f64()?)))
                .collect();
            if !points.is_empty() {
                write_scatter_svg(
                    &dir.join("probe_r2.svg"),
                    &points,
                    "probe index",
                    "test R²",
                    "probe quality",
                )?;
            }
        }
    }
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&serde_json::Value::Object(sections))?,
    )?;
    write_stage_metadata(&dir, "report", cfg, &[])?;
    println!("report: wrote {}", dir.join("report.json").display());
    Ok(())
}

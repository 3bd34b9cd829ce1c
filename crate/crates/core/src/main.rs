use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use doremi::checkpoint::Checkpoint;
use doremi::moe::write_traces;
use doremi::pretrain::Pretrainer;
use doremi::synth::{save_cloud, CorpusManifest, Split};
use doremi::train::{
    bench, evaluate, finetune, joint_train, plant_domain_embedding, pretrain_backbone, write_utilization_csv,
    DoremiModel, Evaluation, MetricsReport, PreparedCorpus, Task, TrainConfig,
};

#[derive(Parser)]
#[command(name = "doremi", version, about = "Domain-representation mixture of experts for multi-domain point clouds")]
struct Cli {
    /// Training config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or checkpoint file for `pretrain`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log progress (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its manifest.
    GenData {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Self-supervised teacher-student pretraining.
    Pretrain {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Joint multi-domain training.
    Train,
    /// Fine-tune a trained model on one domain.
    Finetune {
        #[arg(long)]
        base: PathBuf,
        /// Defaults to the first held-out domain.
        #[arg(long)]
        domain: Option<u32>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a trained model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Evaluate one domain instead of every training domain.
        #[arg(long)]
        domain: Option<u32>,
    },
    /// Export routing traces and per-domain expert utilization.
    AnalyzeExperts {
        #[arg(long)]
        model: PathBuf,
        /// `DOMAIN:EXPERT`: steer the domain's embedding toward one expert first.
        #[arg(long)]
        plant: Option<String>,
        #[arg(long, default_value_t = 150)]
        plant_steps: usize,
        #[arg(long, default_value_t = 1.0)]
        plant_step_size: f64,
        /// Training scenes of the planted domain used for the steering objective.
        #[arg(long, default_value_t = 1)]
        plant_scenes: usize,
    },
    /// Activated parameters and throughput.
    Bench {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        passes: usize,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = |default: &str| cli.out.clone().unwrap_or_else(|| PathBuf::from(default));

    match cli.command {
        Command::GenData { corpus } => gen_data(&manifest(corpus.as_deref().or(cfg.corpus.as_deref()))?, &out("data")),
        Command::Pretrain { corpus, epochs } => {
            let m = manifest(corpus.as_deref().or(cfg.corpus.as_deref()))?;
            cmd_pretrain(&cfg, &m, epochs, &out("pretrain.ckpt"))
        }
        Command::Train => cmd_train(&cfg, &out("runs/train")),
        Command::Finetune { base, domain, epochs } => cmd_finetune(&cfg, &base, domain, epochs, &out("runs/finetune")),
        Command::Eval { model, domain } => cmd_eval(&cfg, &model, domain, &out("runs/eval")),
        Command::AnalyzeExperts {
            model,
            plant,
            plant_steps,
            plant_step_size,
            plant_scenes,
        } => {
            let plant = plant.map(|p| (p, plant_steps, plant_step_size, plant_scenes));
            cmd_analyze(&cfg, &model, plant, &out("runs/analysis"))
        }
        Command::Bench { model, passes } => cmd_bench(&cfg, model.as_deref(), passes, &out("runs/bench")),
    }
}

fn manifest(path: Option<&Path>) -> Result<CorpusManifest> {
    Ok(match path {
        Some(p) => CorpusManifest::load(p).with_context(|| format!("loading corpus {}", p.display()))?,
        None => CorpusManifest::standard(),
    })
}

fn gen_data(m: &CorpusManifest, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    m.save(&dir.join("manifest.toml"))?;
    let mut total = 0usize;
    for d in &m.domains {
        let sub = dir.join(&d.name);
        fs::create_dir_all(&sub)?;
        for split in [Split::Train, Split::Eval] {
            let tag = if split == Split::Train { "train" } else { "eval" };
            for (seed, cloud) in m.seeds(split).seeds().zip(m.scenes(d.domain_id, split)?) {
                save_cloud(&sub.join(format!("{tag}-{seed}.cloud")), &cloud)?;
                total += cloud.len();
            }
        }
    }
    println!("wrote {} domains, {total} points to {}", m.domains.len(), dir.display());
    Ok(())
}

fn cmd_pretrain(cfg: &TrainConfig, m: &CorpusManifest, epochs: Option<usize>, out: &Path) -> Result<()> {
    let epochs = epochs.unwrap_or(cfg.pretrain_config().epochs);
    let mut p = Pretrainer::new(cfg.pretrain_config(), cfg.seed)?;
    let mut scenes = Vec::new();
    for d in m.training_domains() {
        scenes.extend(m.scenes(d.domain_id, Split::Train)?);
    }
    let history = p.run(&scenes, epochs)?;
    let path = if out.extension().is_some_and(|e| e == "ckpt") {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        out.to_path_buf()
    } else {
        fs::create_dir_all(out)?;
        out.join("pretrain.ckpt")
    };
    let hash = p.checkpoint().save(&path)?;
    println!(
        "pretrained {epochs} epochs, final loss {:.5}; {} sha256 {hash}",
        history.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn training_eval(model: &DoremiModel, corpus: &PreparedCorpus, split: Split) -> Result<Evaluation> {
    let scenes = corpus.scenes(split, &model.domain_ids)?;
    Ok(evaluate(model, &scenes, Task::ClassContrast)?)
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Eval => "eval",
    }
}

fn cmd_train(cfg: &TrainConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let m = manifest(cfg.corpus.as_deref())?;
    let corpus = PreparedCorpus::new(m.clone(), &cfg.backbone.geometry())?;
    let pretrained = match &cfg.pretrained {
        Some(p) => Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => {
            let c = pretrain_backbone(cfg, &m)?;
            c.save(&dir.join("pretrain.ckpt"))?;
            c
        }
    };
    let outcome = joint_train(cfg, &corpus, Some(&pretrained))?;
    let eval = training_eval(&outcome.model, &corpus, cfg.eval_split)?;
    let report = MetricsReport::new(&cfg.name, cfg.seed, split_name(cfg.eval_split), &outcome.model, &eval, &outcome.history)?;
    let hash = outcome.model.checkpoint(cfg).save(&dir.join("model.ckpt"))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    fs::write(dir.join("report.json"), report.to_json()? + "\n")?;
    write_utilization_csv(fs::File::create(dir.join("utilization.csv"))?, &eval, experts(&outcome.model))?;
    println!(
        "{}: mIoU {:.4} mAcc {:.4} allAcc {:.4} alpha {} model sha256 {hash}",
        cfg.name,
        report.metrics.miou,
        report.metrics.macc,
        report.metrics.allacc,
        report.alpha.map_or("-".into(), |a| format!("{a:.4}")),
    );
    Ok(())
}

fn experts(model: &DoremiModel) -> usize {
    model.layers.first().map_or(0, |l| l.bank.len())
}

/// Rebuilds a trained model from the config stored in its checkpoint.
fn load_model(path: &Path) -> Result<(TrainConfig, DoremiModel)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg: TrainConfig = serde_json::from_value(ckpt.meta["config"].clone()).context("checkpoint config")?;
    let domains: Vec<u32> = serde_json::from_value(ckpt.meta["domains"].clone()).context("checkpoint domains")?;
    let model = DoremiModel::from_checkpoint(&cfg, &domains, &ckpt)?;
    Ok((cfg, model))
}

fn cmd_finetune(cfg: &TrainConfig, base: &Path, domain: Option<u32>, epochs: Option<usize>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (mut base_cfg, model) = load_model(base)?;
    base_cfg.seed = cfg.seed;
    let m = manifest(base_cfg.corpus.as_deref())?;
    let Some(domain) = domain.or_else(|| m.held_out.first().copied()) else {
        bail!("no --domain given and the corpus has no held-out domain");
    };
    let epochs = epochs.unwrap_or(cfg.finetune_epochs);
    let corpus = PreparedCorpus::new(m, &base_cfg.backbone.geometry())?;
    let scenes = corpus.scenes(Split::Eval, &[domain])?;
    let before = evaluate(&model, &scenes, Task::Segmentation)?;
    let tuned = finetune(&base_cfg, &model, &corpus, domain, epochs)?;
    let after = evaluate(&tuned.model, &scenes, Task::Segmentation)?;
    let zero_shot = MetricsReport::new("zero-shot", cfg.seed, "eval", &model, &before, &[])?;
    let finetuned = MetricsReport::new("finetuned", cfg.seed, "eval", &tuned.model, &after, &tuned.history)?;
    write_json(&dir.join("report.json"), &serde_json::json!({ "domain": domain, "zero_shot": zero_shot, "finetuned": finetuned }))?;
    tuned.model.checkpoint(&base_cfg).save(&dir.join("model.ckpt"))?;
    println!(
        "domain {domain}: zero-shot mIoU {:.4} (loss {:.4}) -> finetuned mIoU {:.4} (loss {:.4}) after {epochs} epochs",
        before.metrics.miou, before.loss, after.metrics.miou, after.loss
    );
    Ok(())
}

fn cmd_eval(cfg: &TrainConfig, path: &Path, domain: Option<u32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (model_cfg, model) = load_model(path)?;
    let corpus = PreparedCorpus::new(manifest(model_cfg.corpus.as_deref())?, &model_cfg.backbone.geometry())?;
    let domains = domain.map_or_else(|| model.domain_ids.clone(), |d| vec![d]);
    let scenes = corpus.scenes(cfg.eval_split, &domains)?;
    let eval = evaluate(&model, &scenes, Task::ClassContrast)?;
    let report = MetricsReport::new(&model_cfg.name, model_cfg.seed, split_name(cfg.eval_split), &model, &eval, &[])?;
    fs::write(dir.join("report.json"), report.to_json()? + "\n")?;
    println!(
        "mIoU {:.4} mAcc {:.4} allAcc {:.4} over {} scenes",
        report.metrics.miou,
        report.metrics.macc,
        report.metrics.allacc,
        scenes.len()
    );
    Ok(())
}

fn parse_plant(s: &str) -> Result<(u32, usize)> {
    let (d, e) = s.split_once(':').context("--plant expects DOMAIN:EXPERT")?;
    Ok((d.trim().parse()?, e.trim().parse()?))
}

fn cmd_analyze(cfg: &TrainConfig, path: &Path, plant: Option<(String, usize, f64, usize)>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (model_cfg, mut model) = load_model(path)?;
    if model.layers.is_empty() {
        bail!("model has no mixture layers");
    }
    let corpus = PreparedCorpus::new(manifest(model_cfg.corpus.as_deref())?, &model_cfg.backbone.geometry())?;
    if let Some((p, steps, step_size, n)) = plant {
        let (domain, expert) = parse_plant(&p)?;
        let mut scenes = corpus.scenes(Split::Train, &[domain])?;
        scenes.truncate(n.max(1));
        let h = plant_domain_embedding(&mut model, &scenes, domain, expert, steps, step_size)?;
        info!("planted domain {domain} -> expert {expert}: log p {:?}", h);
    }
    let eval = training_eval(&model, &corpus, cfg.eval_split)?;
    let k = experts(&model);
    write_utilization_csv(fs::File::create(dir.join("utilization.csv"))?, &eval, k)?;
    for (at, rows) in eval.layers.iter().zip(&eval.traces) {
        let f = fs::File::create(dir.join(format!("traces_stage{}_block{}.csv", at.stage, at.block)))?;
        write_traces(f, rows)?;
    }
    let util = eval.utilization(k)?;
    for (at, hist) in eval.layers.iter().zip(&util) {
        for (domain, h) in hist {
            let top = doremi::train::argmax(h);
            let cells: Vec<String> = h.iter().map(|v| format!("{v:.3}")).collect();
            println!("stage {} block {} domain {domain}: top expert {top} [{}]", at.stage, at.block, cells.join(" "));
        }
    }
    let summary = serde_json::json!({
        "layers": eval.layers,
        "utilization": util,
        "alpha_per_layer": eval.alpha_per_layer()?,
        "mean_k": doremi::train::mean_active(&eval),
    });
    write_json(&dir.join("analysis.json"), &summary)?;
    Ok(())
}

fn cmd_bench(cfg: &TrainConfig, path: Option<&Path>, passes: usize, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (model_cfg, model) = match path {
        Some(p) => load_model(p)?,
        None => {
            let m = manifest(cfg.corpus.as_deref())?;
            let domains: Vec<u32> = m.training_domains().map(|d| d.domain_id).collect();
            (cfg.clone(), DoremiModel::build(cfg, &domains, None)?)
        }
    };
    let corpus = PreparedCorpus::new(manifest(model_cfg.corpus.as_deref())?, &model_cfg.backbone.geometry())?;
    let scenes = corpus.scenes(cfg.eval_split, &model.domain_ids)?;
    let eval = evaluate(&model, &scenes, Task::ClassContrast)?;
    let report = bench(&model, &scenes, &eval, passes)?;
    write_json(&dir.join("bench.json"), &report)?;
    println!(
        "activated params {:.1} of {} total; {:.2} scenes/s (median of {passes})",
        report.audit.activated, report.audit.total, report.scenes_per_s
    );
    Ok(())
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use concept_em::config::RunConfig;
use concept_em::diffusion::load_checkpoint;
use concept_em::eval::EvalReport;
use concept_em::personalize::{default_concepts, ConceptSpec, PersonalizationConfig};
use concept_em::pipeline::{self, Layout, Mode, PersonalizeOptions};
use concept_em::scene::load_sample;
use concept_em::{Error, Result};

/// Concept tokens and latent masks for a small text-to-image diffusion model.
///
/// Any config key can be overridden from the environment as
/// CEM_<SECTION>__<KEY>, e.g. CEM_PERSONALIZE__LAMBDA_ATTN=0.05.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// TOML run configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output location; its meaning depends on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Rerun stages even when their outputs are up to date.
    #[arg(long, global = true)]
    force: bool,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus (--out: corpus directory).
    Synth,
    /// Pretrain on <corpus>/train (--out: checkpoint path).
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Learn concept tokens and masks for one scene (--out: run directory).
    Personalize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// JSON list of {label, placeholder, init}; defaults to every sprite
        /// and the background as [v1], [v2], ...
        #[arg(long)]
        concepts: Option<PathBuf>,
        /// Write per-layer cross-attention maps of the final tokens.
        #[arg(long)]
        dump_attn: bool,
        /// Stop after Stage 2 without fine-tuning the model.
        #[arg(long)]
        no_finetune: bool,
    },
    /// Sample one image per (prompt, seed) (--out: image directory).
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        /// One prompt per line.
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1")]
        seeds: Vec<u64>,
        /// Sampler steps; defaults to eval.sample_steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a pipeline run directory (--out: report directory).
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        /// Corpus root holding the held-out GT; defaults to <run>/corpus.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Summarize evaluation reports into the comparison table.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Run pipeline stages under --out (or the configured output root).
    Run {
        /// Comma-separated subset of synth,pretrain,personalize,generate,evaluate,report.
        #[arg(long, default_value = "all")]
        stages: String,
    },
}

fn sub_dirs(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Err(Error::MissingInput(dir.to_path_buf()));
    }
    let mut v: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    Ok(v)
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), std::env::vars())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let out = |default: PathBuf| cli.out.clone().unwrap_or(default);
    let Some(command) = cli.command else {
        return Err(Error::Config("no subcommand given (see --help)".into()));
    };
    match command {
        Command::Synth => {
            pipeline::synth(&cfg.corpus, cfg.seed, &out(cfg.out.join("corpus")))?;
        }
        Command::Pretrain { corpus } => {
            let path = out(cfg.out.join("pretrain").join("model.ckpt"));
            pipeline::pretrain_from_dir(&corpus, &cfg.model, &cfg.train, cfg.seed, &path)?;
        }
        Command::Personalize { ckpt, scene, concepts, dump_attn, no_finetune } => {
            let params = load_checkpoint(&ckpt)?;
            let scene = load_sample(&scene)?;
            let concepts: Vec<ConceptSpec> = match concepts {
                Some(p) if !p.exists() => return Err(Error::MissingInput(p)),
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).map_err(|e| Error::Config(e.to_string()))?,
                None => default_concepts(&scene),
            };
            let dir = out(cfg.out.join("personalize").join(&scene.sample_id));
            let config = PersonalizationConfig { seed: cfg.seed, ..cfg.personalize.clone() };
            let opts = PersonalizeOptions { finetune: !no_finetune, dump_attn };
            let (summary, _) = pipeline::personalize_scene(&params, &scene, &concepts, &config, &dir, opts)?;
            if let (Some(a), Some(b)) = (summary.iou_history.first(), summary.iou_history.last()) {
                for (label, v) in &a.iou {
                    eprintln!("{label}: IoU {v:.3} -> {:.3}", b.iou[label]);
                }
            }
            std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
        }
        Command::Generate { ckpt, prompts, seeds, steps } => {
            if !prompts.exists() {
                return Err(Error::MissingInput(prompts));
            }
            let params = load_checkpoint(&ckpt)?;
            let lines: Vec<String> = std::fs::read_to_string(&prompts)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            let files = pipeline::generate_gallery(&params, &lines, &seeds, steps.unwrap_or(cfg.eval.sample_steps), &out(cfg.out.join("gallery")))?;
            eprintln!("wrote {} images", files.len());
        }
        Command::Evaluate { run, gt } => {
            let layout = Layout::new(&run);
            let corpus = gt.unwrap_or_else(|| layout.corpus());
            let scenes = sub_dirs(&run.join("personalize"))?;
            let embedder = pipeline::corpus_embedder(&load_checkpoint(&layout.checkpoint())?, &corpus)?;
            let dir = out(run.join("eval"));
            for mode in [Mode::Ours, Mode::Baseline] {
                let present: Vec<String> = scenes.iter().filter(|s| layout.run_dir(s, mode).exists()).cloned().collect();
                if present.is_empty() {
                    continue;
                }
                let report = pipeline::evaluate_mode(&layout, &corpus, &cfg.eval, mode, &present, Some(&embedder))?;
                report.write_jsonl(&dir.join(format!("{}.jsonl", mode.name())))?;
                report.write_iou_csv(&dir.join(format!("{}_iou.csv", mode.name())))?;
            }
        }
        Command::Report { run } => {
            let layout = Layout::new(&run);
            let ours = EvalReport::read_jsonl(&layout.report_path(Mode::Ours))?;
            let bpath = layout.report_path(Mode::Baseline);
            let baseline = if bpath.exists() { Some(EvalReport::read_jsonl(&bpath)?) } else { None };
            let (text, _) = pipeline::render_report(&ours, baseline.as_ref())?;
            let path = out(run.join("report").join("table.txt"));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&path, &text)?;
            print!("{text}");
        }
        Command::Run { stages } => {
            if let Some(o) = cli.out {
                cfg.out = o;
            }
            let stages = pipeline::parse_stages(&stages)?;
            for (stage, outcome) in pipeline::run_pipeline(&cfg, &stages, cli.force)? {
                eprintln!("{}: {}", stage.name(), if outcome == pipeline::Outcome::Ran { "done" } else { "up-to-date" });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 3 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

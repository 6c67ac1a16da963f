//! End-to-end runs: `synth -> pretrain -> personalize -> generate -> evaluate -> report`.
//!
//! Layout under the output root:
//!
//! ```text
//! config.toml                      resolved configuration
//! corpus/{train,heldout}/<id>/     scenes with GT masks
//! pretrain/model.ckpt, losses.csv
//! personalize/<scene>/<mode>/      history.csv, masks/, tokens.json, summary.json, model.ckpt
//! generate/<scene>/<mode>/<label>/ t<template>_s<seed>.png
//! generate/<scene>/random/         the same prompts with a never-trained placeholder
//! eval/<mode>.jsonl, eval/<mode>_iou.csv
//! report/table.txt, report/deltas.json
//! ```
//!
//! Every stage directory carries a `.stamp` with the hash of the config
//! sections it depends on. A stage whose stamp matches is skipped unless
//! forced.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::attention::{dump_attention, AttentionStack};
use crate::config::{EvalSpec, RunConfig};
use crate::diffusion::{
    load_checkpoint, pretrain, q_sample, sample_batch, save_checkpoint, ModelConfig, ModelParams, TrainConfig,
};
use crate::error::{Error, Result};
use crate::eval::{compare_runs, format_delta_table, iou_curve_from, metric, score_gallery, Embedder, EvalReport, Gallery, MetricRecord, Target};
use crate::mask::iou;
use crate::personalize::{default_concepts, Cadence, ConceptSpec, EmSession, IouRecord, LossRecord, PersonalizationConfig};
use crate::rng::{derive, gaussian_vec, rng_for};
use crate::scene::io::{image_to_png, mask_to_png, png_to_image};
use crate::scene::{generate_corpus, load_corpus_split, load_sample, save_corpus, CorpusSpec, SceneSample, BACKGROUND};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Pretrain,
    Personalize,
    Generate,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Synth, Stage::Pretrain, Stage::Personalize, Stage::Generate, Stage::Evaluate, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Pretrain => "pretrain",
            Stage::Personalize => "personalize",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    fn dir(self) -> &'static str {
        match self {
            Stage::Synth => "corpus",
            Stage::Evaluate => "eval",
            other => other.name(),
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Comma-separated stage list; `all` selects every stage.
pub fn parse_stages(s: &str) -> Result<Vec<Stage>> {
    if s.trim() == "all" {
        return Ok(Stage::ALL.to_vec());
    }
    let mut v = s.split(',').map(|p| p.trim().parse()).collect::<Result<Vec<Stage>>>()?;
    v.sort();
    v.dedup();
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

/// Personalization variants run per scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Ours,
    /// Masks fixed at their initialization.
    Baseline,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Ours => "ours",
            Mode::Baseline => "baseline",
        }
    }

    pub fn config(self, base: &PersonalizationConfig) -> PersonalizationConfig {
        match self {
            Mode::Ours => base.clone(),
            Mode::Baseline => PersonalizationConfig { mask_update_every: Cadence::Never, ..base.clone() },
        }
    }
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("pretrain").join("model.ckpt")
    }

    pub fn run_dir(&self, scene: &str, mode: Mode) -> PathBuf {
        self.root.join("personalize").join(scene).join(mode.name())
    }

    pub fn gallery_dir(&self, scene: &str, sub: &str) -> PathBuf {
        self.root.join("generate").join(scene).join(sub)
    }

    pub fn report_path(&self, mode: Mode) -> PathBuf {
        self.root.join("eval").join(format!("{}.jsonl", mode.name()))
    }

    fn stamp(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.dir()).join(".stamp")
    }
}

/// Per-stage hashes, each chained on its upstream stage.
fn stage_hashes(cfg: &RunConfig) -> Result<BTreeMap<Stage, String>> {
    let mut h = BTreeMap::new();
    let synth = RunConfig::section_hash(&[&cfg.seed, &cfg.corpus])?;
    let pre = RunConfig::section_hash(&[&synth, &cfg.model, &cfg.train])?;
    let pers = RunConfig::section_hash(&[&pre, &cfg.personalize, &cfg.scenes])?;
    let generate = RunConfig::section_hash(&[&pers, &cfg.eval])?;
    let evaluate = RunConfig::section_hash(&[&generate, &"evaluate"])?;
    let report = RunConfig::section_hash(&[&evaluate, &"report"])?;
    for (s, v) in Stage::ALL.into_iter().zip([synth, pre, pers, generate, evaluate, report]) {
        h.insert(s, v);
    }
    Ok(h)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.to_path_buf()))
    }
}

/// Writes `contents` only when the file is missing or different.
fn write_if_changed(path: &Path, contents: &str) -> Result<()> {
    if std::fs::read_to_string(path).ok().as_deref() == Some(contents) {
        return Ok(());
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

pub fn synth(spec: &CorpusSpec, seed: u64, out: &Path) -> Result<usize> {
    let corpus = generate_corpus(spec, seed)?;
    save_corpus(&corpus, out)?;
    log::info!("synth: {} train + {} held-out scenes -> {}", corpus.train.len(), corpus.heldout.len(), out.display());
    Ok(corpus.len())
}

/// Pretrains on `<corpus>/train` and writes the checkpoint plus `losses.csv`
/// next to it.
pub fn pretrain_from_dir(corpus: &Path, model: &ModelConfig, train: &TrainConfig, seed: u64, out: &Path) -> Result<ModelParams> {
    let scenes = load_corpus_split(corpus, "train")?;
    log::info!("pretrain: {} scenes, {} steps", scenes.len(), train.steps);
    let report = pretrain(&scenes, model, train, seed, |_, _| {})?;
    save_checkpoint(&report.params, out)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        writeln!(csv, "{i},{l}").unwrap();
    }
    std::fs::write(out.with_file_name("losses.csv"), csv)?;
    Ok(report.params)
}

/// Everything evaluation needs from one personalization run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scene: String,
    pub mode: String,
    pub prompt: String,
    /// GT label -> placeholder.
    pub placeholders: BTreeMap<String, String>,
    pub iou_history: Vec<IouRecord>,
    /// IoU of the thresholded masks before refinement, at initialization.
    pub iou_binary_init: BTreeMap<String, f64>,
    pub attn_probe_start: f64,
    pub attn_probe_end: f64,
    pub finetuned: bool,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PersonalizeOptions {
    /// Run Stage 3 and save the personalized checkpoint.
    pub finetune: bool,
    /// Write per-layer attention maps of the final tokens.
    pub dump_attn: bool,
}

fn history_csv(labels: &[String], losses: &[LossRecord], ious: &[IouRecord]) -> String {
    let by_step: BTreeMap<usize, &IouRecord> = ious.iter().map(|r| (r.step, r)).collect();
    let mut s = String::from("step,t,l_mask,l_attn");
    for l in labels {
        write!(s, ",iou_{l}").unwrap();
    }
    s.push('\n');
    let iou_cols = |s: &mut String, step: usize| {
        for l in labels {
            match by_step.get(&step).and_then(|r| r.iou.get(l)) {
                Some(v) => write!(s, ",{v}").unwrap(),
                None => s.push(','),
            }
        }
        s.push('\n');
    };
    s.push_str("0,,,");
    iou_cols(&mut s, 0);
    for r in losses {
        write!(s, "{},{},{},{}", r.step + 1, r.t, r.l_mask, r.l_attn).unwrap();
        iou_cols(&mut s, r.step + 1);
    }
    s
}

fn save_masks(session: &EmSession, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (label, m) in &session.state.masks {
        let stem = format!("u{:03}_{label}", session.state.mask_updates);
        mask_to_png(m.effective()).save(dir.join(format!("{stem}.png")))?;
    }
    Ok(())
}

fn dump_final_attention(session: &EmSession, dir: &Path) -> Result<()> {
    let params = &session.params;
    let t = params.num_timesteps() / 2;
    let (h, w, c) = session.problem.z0.z.dim();
    let eps = gaussian_vec(&mut rng_for(session.config.seed, "attn-dump", 0), h * w * c);
    let eps = Array3::from_shape_vec((h, w, c), eps.into_iter().map(f64::from).collect()).map_err(|e| Error::Shape(e.to_string()))?;
    let zt = q_sample(&session.problem.z0, t, &eps, &params.schedule)?;
    let prompt = session.problem.encode(params)?;
    let x = params.latents_to_tensor(&[&zt.z])?;
    let (_, caps) = params.forward(&x, &[t], &prompt.features.unsqueeze(0)?)?;
    let stack = AttentionStack::from_captures(&caps, t)?.remove(0);
    dump_attention(&stack, &session.problem.positions, dir)
}

/// Personalizes one scene into `out`. Returns the summary and, when
/// fine-tuned, the personalized model.
pub fn personalize_scene(
    params: &ModelParams,
    scene: &SceneSample,
    concepts: &[ConceptSpec],
    config: &PersonalizationConfig,
    out: &Path,
    opts: PersonalizeOptions,
) -> Result<(RunSummary, Option<ModelParams>)> {
    std::fs::create_dir_all(out)?;
    let mut session = EmSession::new(params, scene, concepts, config)?;
    let mask_dir = out.join("masks");
    save_masks(&session, &mask_dir)?;
    let iou_binary_init = session
        .problem
        .concepts
        .iter()
        .map(|c| Ok((c.label.clone(), iou(&session.state.masks[&c.label].binary, &scene.gt_masks[&c.label])?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let attn_probe_start = session.probe_attention_loss()?;
    let mut saved = 0;
    for _ in 0..config.stage2_steps {
        session.run_stage2_steps(1)?;
        if session.state.mask_updates > saved {
            saved = session.state.mask_updates;
            save_masks(&session, &mask_dir)?;
        }
        if session.state.step % 50 == 0 {
            let last = session.state.loss_history.last().unwrap();
            log::info!("{}: step {}/{} L_mask {:.4} L_attn {:.4}", scene.sample_id, session.state.step, config.stage2_steps, last.l_mask, last.l_attn);
        }
    }
    let attn_probe_end = session.probe_attention_loss()?;
    let labels: Vec<String> = session.problem.concepts.iter().map(|c| c.label.clone()).collect();
    std::fs::write(out.join("history.csv"), history_csv(&labels, &session.state.loss_history, &session.state.iou_history))?;
    if opts.dump_attn {
        dump_final_attention(&session, &out.join("attn"))?;
    }
    let model = if opts.finetune {
        let m = session.joint_finetune()?;
        save_checkpoint(&m, &out.join("model.ckpt"))?;
        Some(m)
    } else {
        None
    };
    std::fs::write(out.join("tokens.json"), serde_json::to_string_pretty(&session.state.tokens)?)?;
    let summary = RunSummary {
        scene: scene.sample_id.clone(),
        mode: if config.mask_update_every == Cadence::Never { Mode::Baseline } else { Mode::Ours }.name().into(),
        prompt: session.problem.prompt_text(),
        placeholders: session.problem.concepts.iter().map(|c| (c.label.clone(), c.placeholder.clone())).collect(),
        iou_history: session.state.iou_history.clone(),
        iou_binary_init,
        attn_probe_start,
        attn_probe_end,
        finetuned: opts.finetune,
        warnings: session.state.warnings.clone(),
    };
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok((summary, model))
}

/// Placeholder-looking words of a prompt.
fn placeholders_in(prompt: &str) -> impl Iterator<Item = &str> {
    prompt.split_whitespace().filter(|w| w.starts_with('[') && w.ends_with(']'))
}

fn render(params: &ModelParams, prompt: &str, seeds: &[u64], steps: usize, dir: &Path, stem: &str) -> Result<Vec<(u64, PathBuf)>> {
    std::fs::create_dir_all(dir)?;
    let enc = params.encode_text(prompt)?;
    let images = sample_batch(params, &enc, steps, seeds)?;
    seeds
        .iter()
        .zip(images)
        .map(|(&seed, im)| {
            let path = dir.join(format!("{stem}_s{seed}.png"));
            image_to_png(&im).save(&path)?;
            Ok((seed, path))
        })
        .collect()
}

/// One image per (prompt, seed) as `p<index>_s<seed>.png`, plus
/// `prompts.txt`. Every placeholder must be registered in `params`.
pub fn generate_gallery(params: &ModelParams, prompts: &[String], seeds: &[u64], steps: usize, out: &Path) -> Result<Vec<PathBuf>> {
    for p in prompts {
        if let Some(bad) = placeholders_in(p).find(|w| !params.registered.contains(*w)) {
            return Err(Error::UnknownPlaceholder(bad.to_string()));
        }
        params.encode_text(p)?;
    }
    let mut files = Vec::new();
    for (i, p) in prompts.iter().enumerate() {
        files.extend(render(params, p, seeds, steps, out, &format!("p{i:02}"))?.into_iter().map(|(_, f)| f));
    }
    std::fs::write(out.join("prompts.txt"), prompts.join("\n") + "\n")?;
    Ok(files)
}

fn sprite_labels(summary: &RunSummary) -> Vec<String> {
    summary.placeholders.keys().filter(|l| l.as_str() != BACKGROUND).cloned().collect()
}

fn read_summary(dir: &Path) -> Result<RunSummary> {
    let p = dir.join("summary.json");
    require(&p)?;
    Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
}

/// Samples every eval template for each sprite concept of a personalized
/// scene, and the same templates with the never-trained placeholder.
pub fn generate_scene(layout: &Layout, scene: &str, mode: Mode, spec: &EvalSpec, with_random: bool) -> Result<()> {
    let run = layout.run_dir(scene, mode);
    let summary = read_summary(&run)?;
    let ckpt = run.join("model.ckpt");
    require(&ckpt)?;
    let params = load_checkpoint(&ckpt)?;
    for label in sprite_labels(&summary) {
        let ph = &summary.placeholders[&label];
        let dir = layout.gallery_dir(scene, mode.name()).join(&label);
        for t in 0..spec.templates.len() {
            render(&params, &spec.prompt(t, ph), &spec.seeds, spec.sample_steps, &dir, &format!("t{t:02}"))?;
        }
    }
    if with_random {
        let dir = layout.gallery_dir(scene, "random");
        for t in 0..spec.templates.len() {
            render(&params, &spec.prompt(t, &spec.random_placeholder), &spec.seeds, spec.sample_steps, &dir, &format!("t{t:02}"))?;
        }
    }
    log::info!("generate: {scene} ({})", mode.name());
    Ok(())
}

fn load_gallery(dir: &Path, template: usize, prompt: String, placeholder: &str, seeds: &[u64]) -> Result<Gallery> {
    let images = seeds
        .iter()
        .map(|&s| {
            let p = dir.join(format!("t{template:02}_s{s}.png"));
            require(&p)?;
            Ok((s, png_to_image(&image::open(&p)?.to_rgb8())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Gallery { prompt, placeholder: placeholder.to_string(), images })
}

/// Mask metrics of one run summary.
pub fn mask_records(summary: &RunSummary) -> Result<Vec<MetricRecord>> {
    let labels = summary.placeholders.keys().cloned().collect();
    let curves = iou_curve_from(&summary.iou_history, &labels)?;
    let sc = summary.scene.as_str();
    let mut out = Vec::new();
    for (label, series) in &curves {
        for &(step, v) in series {
            out.push(MetricRecord::new(sc, metric::IOU, Some(v)).concept(label).step(step));
        }
        out.push(MetricRecord::new(sc, metric::IOU_INIT, Some(series[0].1)).concept(label));
        out.push(MetricRecord::new(sc, metric::IOU_FINAL, Some(series[series.len() - 1].1)).concept(label));
        out.push(MetricRecord::new(sc, metric::IOU_BINARY_INIT, summary.iou_binary_init.get(label).copied()).concept(label));
    }
    out.push(MetricRecord::new(sc, metric::ATTN_LOSS_START, Some(summary.attn_probe_start)));
    out.push(MetricRecord::new(sc, metric::ATTN_LOSS_END, Some(summary.attn_probe_end)));
    Ok(out)
}

/// Embedder centered on up to 256 training scenes.
pub fn corpus_embedder(params: &ModelParams, corpus: &Path) -> Result<Embedder> {
    let train = load_corpus_split(corpus, "train")?;
    let images: Vec<Array3<f32>> = train.iter().take(256).map(|s| s.image.clone()).collect();
    Embedder::new(params).with_center(&images)
}

/// Report for every personalized scene of one mode under `layout`.
pub fn evaluate_mode(layout: &Layout, corpus: &Path, spec: &EvalSpec, mode: Mode, scenes: &[String], embedder: Option<&Embedder>) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    report.meta.insert("mode".into(), mode.name().into());
    report.meta.insert("scores".into(), "desk-scale analogs from a frozen denoiser trunk".into());
    for scene_id in scenes {
        let run = layout.run_dir(scene_id, mode);
        let summary = read_summary(&run)?;
        for r in mask_records(&summary)? {
            report.push(r)?;
        }
        let Some(embedder) = embedder else { continue };
        if !summary.finetuned {
            continue;
        }
        let scene = load_sample(&corpus.join("heldout").join(scene_id))?;
        let params = load_checkpoint(&run.join("model.ckpt"))?;
        for label in sprite_labels(&summary) {
            let ph = &summary.placeholders[&label];
            let target = Target { scene: scene_id, label: &label, image: &scene.image, mask: &scene.gt_masks[&label] };
            let dir = layout.gallery_dir(scene_id, mode.name()).join(&label);
            let random_dir = layout.gallery_dir(scene_id, "random");
            for t in 0..spec.templates.len() {
                let g = load_gallery(&dir, t, spec.prompt(t, ph), ph, &spec.seeds)?;
                for r in score_gallery(embedder, &params, &g, &target, spec, metric::SIMILARITY, true)? {
                    report.push(r)?;
                }
                if mode == Mode::Ours {
                    let rp = &spec.random_placeholder;
                    let g = load_gallery(&random_dir, t, spec.prompt(t, rp), rp, &spec.seeds)?;
                    for r in score_gallery(embedder, &params, &g, &target, spec, metric::SIMILARITY_RANDOM, false)? {
                        report.push(r)?;
                    }
                }
            }
        }
        log::info!("evaluate: {scene_id} ({})", mode.name());
    }
    Ok(report)
}

/// Plain-text summary: the delta table and the headline means.
pub fn render_report(ours: &EvalReport, baseline: Option<&EvalReport>) -> Result<(String, Option<Vec<crate::eval::DeltaRow>>)> {
    let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    let mut s = String::new();
    writeln!(s, "scenes: {}", ours.scenes().len()).unwrap();
    for m in [metric::IOU_BINARY_INIT, metric::IOU_INIT, metric::IOU_FINAL, metric::ATTN_LOSS_START, metric::ATTN_LOSS_END, metric::SIMILARITY, metric::SIMILARITY_RANDOM, metric::DIVERSITY] {
        writeln!(s, "{m:<26} {}", f(ours.mean(m))).unwrap();
    }
    let rows = match baseline {
        Some(b) => {
            let rows = compare_runs(ours, b)?;
            s.push_str("\nours vs fixed-mask baseline\n");
            s.push_str(&format_delta_table(&rows));
            Some(rows)
        }
        None => None,
    };
    Ok((s, rows))
}

fn heldout_ids(layout: &Layout, count: usize) -> Result<Vec<String>> {
    let dir = layout.corpus().join("heldout");
    require(&dir)?;
    let mut ids: Vec<String> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("meta.json").exists())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    if ids.len() < count {
        return Err(Error::Config(format!("{count} scenes requested, {} held out", ids.len())));
    }
    ids.truncate(count);
    Ok(ids)
}

fn modes(cfg: &RunConfig) -> Vec<Mode> {
    if cfg.scenes.baseline {
        vec![Mode::Ours, Mode::Baseline]
    } else {
        vec![Mode::Ours]
    }
}

fn generates(cfg: &RunConfig, mode: Mode) -> bool {
    mode == Mode::Ours || cfg.scenes.baseline_generation
}

fn run_stage(cfg: &RunConfig, layout: &Layout, stage: Stage) -> Result<()> {
    match stage {
        Stage::Synth => {
            synth(&cfg.corpus, cfg.seed, &layout.corpus())?;
        }
        Stage::Pretrain => {
            require(&layout.corpus().join("train"))?;
            pretrain_from_dir(&layout.corpus(), &cfg.model, &cfg.train, cfg.seed, &layout.checkpoint())?;
        }
        Stage::Personalize => {
            require(&layout.checkpoint())?;
            let params = load_checkpoint(&layout.checkpoint())?;
            for (i, id) in heldout_ids(layout, cfg.scenes.count)?.iter().enumerate() {
                let scene = load_sample(&layout.corpus().join("heldout").join(id))?;
                let concepts = default_concepts(&scene);
                let base = PersonalizationConfig { seed: derive(cfg.seed, "personalize", i as u64), ..cfg.personalize.clone() };
                for mode in modes(cfg) {
                    let opts = PersonalizeOptions { finetune: generates(cfg, mode), dump_attn: false };
                    log::info!("personalize: {id} ({})", mode.name());
                    personalize_scene(&params, &scene, &concepts, &mode.config(&base), &layout.run_dir(id, mode), opts)?;
                }
            }
        }
        Stage::Generate => {
            for id in heldout_ids(layout, cfg.scenes.count)? {
                for mode in modes(cfg).into_iter().filter(|&m| generates(cfg, m)) {
                    generate_scene(layout, &id, mode, &cfg.eval, mode == Mode::Ours)?;
                }
            }
        }
        Stage::Evaluate => {
            let ids = heldout_ids(layout, cfg.scenes.count)?;
            require(&layout.checkpoint())?;
            let embedder = corpus_embedder(&load_checkpoint(&layout.checkpoint())?, &layout.corpus())?;
            for mode in modes(cfg) {
                let emb = generates(cfg, mode).then_some(&embedder);
                let mut report = evaluate_mode(layout, &layout.corpus(), &cfg.eval, mode, &ids, emb)?;
                report.meta.insert("seed".into(), cfg.seed.to_string());
                report.write_jsonl(&layout.report_path(mode))?;
                report.write_iou_csv(&layout.root.join("eval").join(format!("{}_iou.csv", mode.name())))?;
            }
        }
        Stage::Report => {
            let ours = EvalReport::read_jsonl(&layout.report_path(Mode::Ours))?;
            let baseline = if cfg.scenes.baseline { Some(EvalReport::read_jsonl(&layout.report_path(Mode::Baseline))?) } else { None };
            let (text, rows) = render_report(&ours, baseline.as_ref())?;
            let dir = layout.root.join("report");
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("table.txt"), &text)?;
            if let Some(rows) = rows {
                std::fs::write(dir.join("deltas.json"), serde_json::to_string_pretty(&rows)?)?;
            }
            eprint!("{text}");
        }
    }
    Ok(())
}

/// Runs the requested stages in pipeline order under `cfg.out`.
pub fn run_pipeline(cfg: &RunConfig, stages: &[Stage], force: bool) -> Result<Vec<(Stage, Outcome)>> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out);
    std::fs::create_dir_all(&layout.root)?;
    write_if_changed(&layout.root.join("config.toml"), &cfg.to_toml()?)?;
    let hashes = stage_hashes(cfg)?;
    let mut sorted = stages.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut outcomes = Vec::new();
    for stage in sorted {
        let stamp = layout.stamp(stage);
        if !force && std::fs::read_to_string(&stamp).ok().as_deref() == Some(hashes[&stage].as_str()) {
            log::info!("{}: up-to-date", stage.name());
            outcomes.push((stage, Outcome::UpToDate));
            continue;
        }
        log::info!("{}: running", stage.name());
        run_stage(cfg, &layout, stage)?;
        std::fs::create_dir_all(stamp.parent().unwrap())?;
        std::fs::write(&stamp, &hashes[&stage])?;
        outcomes.push((stage, Outcome::Ran));
    }
    Ok(outcomes)
}

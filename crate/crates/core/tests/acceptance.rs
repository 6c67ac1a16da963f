//! Acceptance suite A1-A8. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! The pretrained checkpoint is cached under the cargo test tmpdir, keyed by
//! the hash of corpus, model and training settings; the first run trains it
//! (about 40-60 minutes on one CPU core).

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use candle_core::DType;
use ndarray::{Array2, Array3};
use rand::Rng as _;

use concept_em::config::{EvalSpec, RunConfig};
use concept_em::diffusion::{load_checkpoint, ldm_loss, pretrain, sample_batch, save_checkpoint, LatentState, ModelConfig, ModelParams, TrainConfig};
use concept_em::eval::{compare_runs, metric, score_gallery, Embedder, EvalReport, Gallery, MetricRecord, Target};
use concept_em::mask::{iou, CrfParams, DenseKernel};
use concept_em::personalize::{default_concepts, masked_diffusion_loss, Cadence, EmSession, PersonalizationConfig, StepSample};
use concept_em::pipeline::{run_pipeline, Stage};
use concept_em::rng::{derive, gaussian_vec, rng_for};
use concept_em::scene::{generate_split, CorpusSpec, SceneSample, Split};

const A1_TOL: f64 = 1e-9;
const A2_TOL: f64 = 1e-6;
const A3_STEP: f64 = 1e-4;
const A3_TOL: f64 = 1e-3;
const A4_MIN_SCENES: usize = 10;
const A4_MIN_GAIN: f64 = 0.05;
const A4_MIN_FINAL: f64 = 0.60;
const A5_MIN_FRACTION: f64 = 0.70;
const A6_MAX_RATIO: f64 = 0.5;
const A6_MIN_MARGIN: f64 = 0.1;
/// Eval templates and seeds used for the A6 similarity comparison.
const A6_TEMPLATES: usize = 4;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

struct Setup {
    params: ModelParams,
    train: Vec<SceneSample>,
    heldout: Vec<SceneSample>,
    personalize: PersonalizationConfig,
}

fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn setup() -> Result<Setup, Box<dyn std::error::Error>> {
    let cfg = RunConfig::default();
    let (corpus, model, train_cfg, seed) = (CorpusSpec::default(), ModelConfig::default(), TrainConfig::default(), cfg.seed);
    let key = RunConfig::section_hash(&[&seed, &corpus, &model, &train_cfg])?;
    let path = cache_dir().join(format!("pretrain-{}.ckpt", &key[..16]));
    let train = generate_split(&corpus, Split::Train, seed)?;
    let params = if path.exists() {
        eprintln!("using cached checkpoint {}", path.display());
        load_checkpoint(&path)?
    } else {
        eprintln!("pretraining {} steps (cached afterwards at {})", train_cfg.steps, path.display());
        let start = Instant::now();
        let report = pretrain(&train, &model, &train_cfg, seed, |step, loss| {
            if (step + 1) % 250 == 0 {
                eprintln!("  pretrain step {}: loss {loss:.4} ({:.0}s)", step + 1, start.elapsed().as_secs_f64());
            }
        })?;
        save_checkpoint(&report.params, &path)?;
        report.params
    };
    let heldout = generate_split(&corpus, Split::Heldout, seed)?;
    Ok(Setup { params, train, heldout, personalize: cfg.personalize })
}

fn random_eps(dim: (usize, usize, usize), seed: u64) -> Array3<f64> {
    let v = gaussian_vec(&mut rng_for(seed, "acceptance-eps", 0), dim.0 * dim.1 * dim.2);
    Array3::from_shape_vec(dim, v.into_iter().map(f64::from).collect()).unwrap()
}

fn a1(s: &Setup) -> Outcome {
    let p = s.params.to_dtype(DType::F64)?;
    let mut worst: f64 = 0.0;
    for (k, scene) in s.heldout.iter().take(3).enumerate() {
        let z0 = LatentState::from_image(&scene.image);
        let prompt = p.encode_text(&scene.caption.text())?;
        let eps = random_eps(z0.z.dim(), k as u64);
        let t = [5, 50, 95][k];
        let ones = Array2::from_elem((z0.z.dim().0, z0.z.dim().1), true);
        let masked = masked_diffusion_loss(&p, &z0, &prompt, &ones, t, &eps)?;
        let plain = ldm_loss(&p, &[(&z0, &prompt)], &[t], std::slice::from_ref(&eps))?;
        worst = worst.max((masked - plain).abs());
    }
    Ok((worst < A1_TOL, format!("max |masked - plain| = {worst:.2e} (< {A1_TOL:.0e}) over 3 scenes")))
}

/// Every pixel pair and label visited explicitly.
fn oracle_step(q: &Array3<f64>, unary: &Array3<f64>, image: &Array3<f32>, p: &CrfParams) -> Array3<f64> {
    let (h, w, l) = q.dim();
    let mut out = Array3::zeros((h, w, l));
    for yi in 0..h {
        for xi in 0..w {
            let mut logits = vec![0.0; l];
            for (lab, logit) in logits.iter_mut().enumerate() {
                let mut m = 0.0;
                for yj in 0..h {
                    for xj in 0..w {
                        if (yi, xi) == (yj, xj) {
                            continue;
                        }
                        let dp = ((yi as f64 - yj as f64).powi(2) + (xi as f64 - xj as f64).powi(2)) as f64;
                        let mut dc = 0.0;
                        for c in 0..3 {
                            dc += (f64::from(image[[yi, xi, c]]) - f64::from(image[[yj, xj, c]])).powi(2);
                        }
                        let k = p.w_appearance * (-dp / (2.0 * p.theta_alpha * p.theta_alpha) - dc / (2.0 * p.theta_beta * p.theta_beta)).exp()
                            + p.w_smooth * (-dp / (2.0 * p.theta_gamma * p.theta_gamma)).exp();
                        m += k * q[[yj, xj, lab]];
                    }
                }
                *logit = -unary[[yi, xi, lab]] + m;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
            for lab in 0..l {
                out[[yi, xi, lab]] = (logits[lab] - max).exp() / z;
            }
        }
    }
    out
}

fn a2() -> Outcome {
    let p = CrfParams::default();
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for h in 2..=5 {
        for w in 2..=5 {
            for l in [2, 3] {
                let seed = (h * 100 + w * 10 + l) as u64;
                let mut rng = rng_for(seed, "a2", 0);
                let image = Array3::from_shape_fn((h, w, 3), |_| rng.random::<f32>());
                let mut q = Array3::from_shape_fn((h, w, l), |_| rng.random::<f64>() + 0.01);
                for mut row in q.lanes_mut(ndarray::Axis(2)) {
                    let s = row.sum();
                    row /= s;
                }
                let unary = q.mapv(|v| -v.ln());
                let kernel = DenseKernel::new(&image, &p)?;
                let (mut fast, mut slow) = (q.clone(), q.clone());
                for _ in 0..5 {
                    fast = kernel.step(&fast, &unary)?;
                    slow = oracle_step(&slow, &unary, &image, &p);
                }
                let d = fast.iter().zip(slow.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst = worst.max(d);
                cases += 1;
            }
        }
    }
    Ok((worst < A2_TOL, format!("max |Q - Q_oracle| = {worst:.2e} (< {A2_TOL:.0e}) over {cases} cases, 5 iterations")))
}

fn a3(s: &Setup) -> Outcome {
    let p64 = s.params.to_dtype(DType::F64)?;
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for (i, scene) in s.heldout.iter().take(3).enumerate() {
        let config = PersonalizationConfig { init_timesteps: 10, seed: derive(7, "a3", i as u64), ..s.personalize.clone() };
        let mut session = EmSession::new(&p64, scene, &default_concepts(scene), &config)?;
        let draw = StepSample::fixed(20 + 30 * i, random_eps(session.problem.z0.z.dim(), 100 + i as u64));
        let (_, grads) = session.token_gradient(&draw)?;
        let mut rng = rng_for(i as u64, "a3-direction", 0);
        for (k, g) in grads.iter().enumerate() {
            let slot = session.problem.slots[k];
            let row = session.state.tokens[k].embedding.clone();
            let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            let random: Vec<f64> = (0..g.len()).map(|_| rng.random::<f64>() - 0.5).collect();
            let rnorm = random.iter().map(|v| v * v).sum::<f64>().sqrt();
            for dir in [g.iter().map(|v| v / gnorm).collect::<Vec<_>>(), random.iter().map(|v| v / rnorm).collect()] {
                let shifted = |sign: f64| -> Vec<f64> { row.iter().zip(&dir).map(|(r, d)| r + sign * A3_STEP * d).collect() };
                session.params.set_placeholder_row(slot, &shifted(1.0))?;
                let fp = session.objective_value(&draw)?;
                session.params.set_placeholder_row(slot, &shifted(-1.0))?;
                let fm = session.objective_value(&draw)?;
                session.params.set_placeholder_row(slot, &row)?;
                let fd = (fp - fm) / (2.0 * A3_STEP);
                let analytic: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
                worst = worst.max((fd - analytic).abs() / gnorm.max(1e-12));
                checks += 1;
            }
        }
    }
    Ok((worst < A3_TOL, format!("max |fd - analytic| / |grad| = {worst:.2e} (< {A3_TOL:.0e}) over {checks} directional checks on 3 scenes")))
}

#[derive(Default)]
struct SceneRun {
    id: String,
    init: BTreeMap<String, f64>,
    binary_init: BTreeMap<String, f64>,
    last: BTreeMap<String, f64>,
    baseline_series: BTreeMap<String, Vec<f64>>,
    baseline_updates: usize,
    probe_start: f64,
    probe_end: f64,
    sim_token: Vec<Option<f64>>,
    sim_random: Vec<Option<f64>>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn run_scene(s: &Setup, embedder: &Embedder, i: usize, scene: &SceneSample) -> Result<SceneRun, Box<dyn std::error::Error>> {
    let start = Instant::now();
    let concepts = default_concepts(scene);
    let config = PersonalizationConfig { seed: derive(0, "personalize", i as u64), ..s.personalize.clone() };
    let mut ours = EmSession::new(&s.params, scene, &concepts, &config)?;
    let mut run = SceneRun { id: scene.sample_id.clone(), ..Default::default() };
    run.init = ours.state.iou_history[0].iou.clone();
    for c in &concepts {
        run.binary_init.insert(c.label.clone(), iou(&ours.state.masks[&c.label].binary, &scene.gt_masks[&c.label])?);
    }
    run.probe_start = ours.probe_attention_loss()?;
    ours.run_stage2(|_| {})?;
    run.probe_end = ours.probe_attention_loss()?;
    run.last = ours.state.iou_history.last().unwrap().iou.clone();

    let base_cfg = PersonalizationConfig { mask_update_every: Cadence::Never, ..config.clone() };
    let mut base = EmSession::new(&s.params, scene, &concepts, &base_cfg)?;
    base.run_stage2(|_| {})?;
    run.baseline_updates = base.state.mask_updates;
    for rec in &base.state.iou_history {
        for (l, v) in &rec.iou {
            run.baseline_series.entry(l.clone()).or_default().push(*v);
        }
    }

    let tuned = ours.joint_finetune()?;
    let spec = EvalSpec::default();
    let first = &concepts[0];
    let target = Target { scene: &scene.sample_id, label: &first.label, image: &scene.image, mask: &scene.gt_masks[&first.label] };
    for t in 0..A6_TEMPLATES {
        for (ph, sink) in [(&first.placeholder, &mut run.sim_token), (&spec.random_placeholder, &mut run.sim_random)] {
            let prompt = spec.prompt(t, ph);
            let images = sample_batch(&tuned, &tuned.encode_text(&prompt)?, spec.sample_steps, &spec.seeds)?;
            let gallery = Gallery { prompt, placeholder: ph.clone(), images: spec.seeds.iter().copied().zip(images).collect() };
            for r in score_gallery(embedder, &tuned, &gallery, &target, &spec, metric::SIMILARITY, false)? {
                sink.push(r.value);
            }
        }
    }
    eprintln!(
        "  {} ({:.0}s): IoU {:.3} -> {:.3}, attn probe {:.4} -> {:.4}, similarity {:.3} vs random {:.3}",
        run.id,
        start.elapsed().as_secs_f64(),
        mean(run.init.values().copied()),
        mean(run.last.values().copied()),
        run.probe_start,
        run.probe_end,
        mean(run.sim_token.iter().flatten().copied()),
        mean(run.sim_random.iter().flatten().copied()),
    );
    Ok(run)
}

fn scene_runs(s: &Setup) -> Result<Vec<SceneRun>, Box<dyn std::error::Error>> {
    let images: Vec<Array3<f32>> = s.train.iter().take(256).map(|x| x.image.clone()).collect();
    let embedder = Embedder::new(&s.params).with_center(&images)?;
    let scenes: Vec<&SceneSample> = s.heldout.iter().filter(|x| x.sprites.len() == 2).take(A4_MIN_SCENES).collect();
    if scenes.len() < A4_MIN_SCENES {
        return Err(format!("only {} held-out scenes with two sprites", scenes.len()).into());
    }
    eprintln!("personalizing {} held-out scenes", scenes.len());
    scenes.iter().enumerate().map(|(i, sc)| run_scene(s, &embedder, i, sc)).collect()
}

fn a4(runs: &[SceneRun], s: &Setup) -> Outcome {
    let init = mean(runs.iter().map(|r| mean(r.init.values().copied())));
    let last = mean(runs.iter().map(|r| mean(r.last.values().copied())));
    let expected_len = s.personalize.stage2_steps / s.personalize.iou_log_every + 1;
    let constant = runs.iter().all(|r| {
        r.baseline_updates == 0 && r.baseline_series.values().all(|v| v.len() == expected_len && v.iter().all(|x| x.to_bits() == v[0].to_bits()))
    });
    let pass = last - init >= A4_MIN_GAIN && last >= A4_MIN_FINAL && constant;
    Ok((
        pass,
        format!(
            "{} scenes: mean IoU {init:.3} -> {last:.3} (gain {:+.3}, need >= {A4_MIN_GAIN}; final need >= {A4_MIN_FINAL}); baseline series constant: {constant}",
            runs.len(),
            last - init
        ),
    ))
}

fn a5(runs: &[SceneRun]) -> Outcome {
    let better = runs.iter().filter(|r| mean(r.init.values().copied()) >= mean(r.binary_init.values().copied())).count();
    let frac = better as f64 / runs.len() as f64;
    let (b, c) = (mean(runs.iter().map(|r| mean(r.binary_init.values().copied()))), mean(runs.iter().map(|r| mean(r.init.values().copied()))));
    Ok((frac >= A5_MIN_FRACTION, format!("refined >= binarized on {better}/{} scenes ({:.0}%, need >= {:.0}%); mean IoU {b:.3} -> {c:.3}", runs.len(), 100.0 * frac, 100.0 * A5_MIN_FRACTION)))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn a6(runs: &[SceneRun]) -> Outcome {
    let ratio = median(runs.iter().map(|r| r.probe_end / r.probe_start).collect());
    let token: Vec<f64> = runs.iter().flat_map(|r| r.sim_token.iter().flatten().copied()).collect();
    let random: Vec<f64> = runs.iter().flat_map(|r| r.sim_random.iter().flatten().copied()).collect();
    let missing = runs.iter().map(|r| r.sim_token.iter().chain(&r.sim_random).filter(|v| v.is_none()).count()).sum::<usize>();
    let margin = mean(token.iter().copied()) - mean(random.iter().copied());
    Ok((
        ratio <= A6_MAX_RATIO && margin > A6_MIN_MARGIN,
        format!(
            "median L_attn end/start = {ratio:.3} (need <= {A6_MAX_RATIO}); similarity [v1] {:.3} vs random {:.3}, margin {margin:+.3} (need > {A6_MIN_MARGIN}); {missing} samples without a region",
            mean(token.iter().copied()),
            mean(random.iter().copied())
        ),
    ))
}

fn a7() -> Outcome {
    let dir = tempfile::tempdir()?;
    let fixture = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml");
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let mut cfg = RunConfig::load(Some(&fixture), Vec::new())?;
        cfg.out = dir.path().join(run);
        run_pipeline(&cfg, &Stage::ALL, false)?;
        let mut contents = BTreeMap::new();
        for entry in walk(&cfg.out)? {
            let rel = entry.strip_prefix(&cfg.out)?.to_path_buf();
            let name = rel.to_string_lossy();
            if name.ends_with("history.csv") || name.starts_with("eval/") || name.starts_with("report/") {
                contents.insert(rel.clone(), std::fs::read(&entry)?);
            }
        }
        files.push(contents);
    }
    let n_hist = files[0].keys().filter(|k| k.to_string_lossy().ends_with("history.csv")).count();
    let same = files[0] == files[1] && n_hist > 0;
    Ok((same, format!("{} artifacts ({n_hist} history.csv) bit-identical across two runs: {same}", files[0].len())))
}

fn walk(root: &std::path::Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    Ok(out)
}

fn a8(runs: &[SceneRun]) -> Outcome {
    let mut ours = EvalReport::default();
    let mut baseline = EvalReport::default();
    for r in runs {
        for (label, v) in &r.last {
            ours.push(MetricRecord::new(&r.id, metric::IOU_FINAL, Some(*v)).concept(label))?;
        }
        for (label, series) in &r.baseline_series {
            baseline.push(MetricRecord::new(&r.id, metric::IOU_FINAL, series.last().copied()).concept(label))?;
        }
    }
    let rows = compare_runs(&ours, &baseline)?;
    let delta = rows.iter().find(|r| r.metric == metric::IOU_FINAL).and_then(|r| r.delta).unwrap_or(f64::NAN);
    Ok((delta > 0.0, format!("mean final IoU delta (ours - baseline) = {delta:+.4} (need > 0)")))
}

fn report(results: &mut Vec<(String, bool)>, id: &str, start: Instant, outcome: Outcome) {
    let secs = start.elapsed().as_secs_f64();
    let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!("{id} {} {detail} [{secs:.1}s]", if pass { "PASS" } else { "FAIL" });
    results.push((id.to_string(), pass));
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut results = Vec::new();

    let t = Instant::now();
    report(&mut results, "A2", t, a2());
    let t = Instant::now();
    report(&mut results, "A7", t, a7());

    let t = Instant::now();
    let s = match setup() {
        Ok(s) => s,
        Err(e) => {
            for id in ["A1", "A3", "A4", "A5", "A6", "A8"] {
                report(&mut results, id, t, Err(format!("setup failed: {e}").into()));
            }
            return ExitCode::FAILURE;
        }
    };
    eprintln!("setup done in {:.0}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    report(&mut results, "A1", t, a1(&s));
    let t = Instant::now();
    report(&mut results, "A3", t, a3(&s));

    let t = Instant::now();
    match scene_runs(&s) {
        Ok(runs) => {
            report(&mut results, "A4", t, a4(&runs, &s));
            report(&mut results, "A5", t, a5(&runs));
            report(&mut results, "A6", t, a6(&runs));
            report(&mut results, "A8", t, a8(&runs));
        }
        Err(e) => {
            for id in ["A4", "A5", "A6", "A8"] {
                report(&mut results, id, t, Err(format!("{e}").into()));
            }
        }
    }
    let failed: Vec<&str> = results.iter().filter(|(_, p)| !p).map(|(id, _)| id.as_str()).collect();
    println!("acceptance: {}/{} passed{}", results.len() - failed.len(), results.len(), if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(" ")) });
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

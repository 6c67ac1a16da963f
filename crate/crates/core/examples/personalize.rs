//! Learn concept tokens and masks on held-out scenes and print how the
//! masks and losses evolve.
//!
//! cargo run --example personalize -- <pretrained.ckpt> [scenes] [stage2_steps]
//!
//! Extra settings come from the environment, e.g. CEM_PERSONALIZE__LAMBDA_ATTN=0.1.

use std::time::Instant;

use concept_em::config::RunConfig;
use concept_em::diffusion::load_checkpoint;
use concept_em::mask::iou;
use concept_em::personalize::{default_concepts, EmSession, PersonalizationConfig};
use concept_em::rng::derive;
use concept_em::scene::{generate_split, Split};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().ok_or_else(|| anyhow::anyhow!("usage: personalize <ckpt> [scenes] [stage2_steps]"))?;
    let scenes: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2);
    let cfg = RunConfig::load(None, std::env::vars())?;
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(cfg.personalize.stage2_steps);

    let params = load_checkpoint(std::path::Path::new(&ckpt))?;
    let heldout = generate_split(&cfg.corpus, Split::Heldout, cfg.seed)?;
    for (i, scene) in heldout.iter().take(scenes).enumerate() {
        let config = PersonalizationConfig { stage2_steps: steps, seed: derive(cfg.seed, "personalize", i as u64), ..cfg.personalize.clone() };
        let start = Instant::now();
        let mut s = EmSession::new(&params, scene, &default_concepts(scene), &config)?;
        println!("{} `{}`", scene.sample_id, s.problem.prompt_text());
        for (label, m) in &s.state.masks {
            let gt = &scene.gt_masks[label];
            println!("  init {label:<11} binary {:.3} refined {:.3}", iou(&m.binary, gt)?, iou(m.effective(), gt)?);
        }
        let probe0 = s.probe_attention_loss()?;
        s.run_stage2(|st| {
            if st.step % 50 == 0 {
                let recent = &st.loss_history[st.loss_history.len().saturating_sub(50)..];
                let n = recent.len() as f64;
                let lm = recent.iter().map(|r| r.l_mask).sum::<f64>() / n;
                let la = recent.iter().map(|r| r.l_attn).sum::<f64>() / n;
                let ious = st.iou_history.last().map(|r| r.iou.values().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" "));
                println!("  step {:>4} L_mask {lm:.4} L_attn {la:.4} iou {}", st.step, ious.unwrap_or_default());
            }
        })?;
        let probe1 = s.probe_attention_loss()?;
        let first = &s.state.iou_history[0].iou;
        let last = &s.state.iou_history[s.state.iou_history.len() - 1].iou;
        for (label, v) in first {
            println!("  {label:<11} IoU {v:.3} -> {:.3}", last[label]);
        }
        println!("  attention probe {probe0:.4} -> {probe1:.4}, {:.1}s", start.elapsed().as_secs_f64());
        for w in &s.state.warnings {
            println!("  warning: {w}");
        }
    }
    Ok(())
}

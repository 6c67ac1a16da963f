//! Pretrain the denoiser on a freshly generated sprite corpus and save it.
//!
//! cargo run --example pretrain -- [steps] [out.ckpt]

use concept_em::diffusion::{pretrain, save_checkpoint, ModelConfig, TrainConfig};
use concept_em::scene::{generate_split, CorpusSpec, Split};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);
    let out = args.next().unwrap_or_else(|| "pretrained.ckpt".into());

    let spec = CorpusSpec::default();
    let corpus = generate_split(&spec, Split::Train, 0)?;
    let train = TrainConfig { steps, log_every: 25, ..Default::default() };
    let start = std::time::Instant::now();
    let report = pretrain(&corpus, &ModelConfig::default(), &train, 0, |_, _| {})?;
    let secs = start.elapsed().as_secs_f64();
    println!(
        "{} steps in {:.1}s ({:.3}s/step), {} parameters, final loss {:.4}",
        steps,
        secs,
        secs / steps.max(1) as f64,
        report.params.store().num_params(),
        report.losses.last().copied().unwrap_or(f64::NAN)
    );
    save_checkpoint(&report.params, std::path::Path::new(&out))?;
    println!("saved {out}");
    Ok(())
}

//! Sample images from a checkpoint for a handful of prompts.
//!
//! cargo run --example generate -- <model.ckpt> [out_dir] [prompt ...]
//!
//! Placeholders such as `[v1]` only work with a personalized checkpoint.

use std::path::Path;

use concept_em::diffusion::load_checkpoint;
use concept_em::pipeline::generate_gallery;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().ok_or_else(|| anyhow::anyhow!("usage: generate <ckpt> [out_dir] [prompt ...]"))?;
    let out = args.next().unwrap_or_else(|| "gallery".into());
    let mut prompts: Vec<String> = args.collect();
    if prompts.is_empty() {
        prompts = vec!["a photo of a red circle".into(), "a blue square on a gray background".into()];
    }
    let params = load_checkpoint(Path::new(&ckpt))?;
    let files = generate_gallery(&params, &prompts, &[0, 1, 2], 50, Path::new(&out))?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

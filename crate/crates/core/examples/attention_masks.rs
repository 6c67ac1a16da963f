//! Extract latent masks for one held-out scene from cross-attention and
//! write the soft, thresholded and refined masks as PNGs.
//!
//! cargo run --example attention_masks -- <pretrained.ckpt> [scene_index] [out_dir]

use std::path::Path;

use concept_em::diffusion::load_checkpoint;
use concept_em::mask::iou;
use concept_em::personalize::{default_concepts, EmSession, PersonalizationConfig};
use concept_em::scene::{generate_split, image_to_png, mask_to_png, soft_to_png, CorpusSpec, Split};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().ok_or_else(|| anyhow::anyhow!("usage: attention_masks <ckpt> [scene_index] [out_dir]"))?;
    let index: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let out = args.next().unwrap_or_else(|| "attention".into());
    let out = Path::new(&out);
    std::fs::create_dir_all(out)?;

    let params = load_checkpoint(Path::new(&ckpt))?;
    let heldout = generate_split(&CorpusSpec::default(), Split::Heldout, 0)?;
    let scene = heldout.get(index).ok_or_else(|| anyhow::anyhow!("only {} held-out scenes", heldout.len()))?;
    // Stage 1 only: placeholder tokens start as class-word copies, then masks
    // are read off their timestep-averaged attention.
    let session = EmSession::new(&params, scene, &default_concepts(scene), &PersonalizationConfig::default())?;
    let (masks, warnings) = (&session.state.masks, &session.state.warnings);

    image_to_png(&scene.image).save(out.join("image.png"))?;
    println!("{} `{}`", scene.sample_id, session.problem.prompt_text());
    for (label, m) in masks {
        soft_to_png(&m.soft).save(out.join(format!("{label}_soft.png")))?;
        mask_to_png(&m.binary).save(out.join(format!("{label}_binary.png")))?;
        mask_to_png(&m.refined).save(out.join(format!("{label}_refined.png")))?;
        let gt = &scene.gt_masks[label];
        println!("  {} {label:<11} binary {:.3} refined {:.3}", m.concept_id, iou(&m.binary, gt)?, iou(&m.refined, gt)?);
    }
    for w in warnings {
        println!("  warning: {w}");
    }
    println!("wrote {}", out.display());
    Ok(())
}

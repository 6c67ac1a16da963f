//! Refine deliberately sloppy masks with the dense CRF and report how much
//! closer they land to the ground truth.
//!
//! cargo run --example crf_refine -- [scenes]

use ndarray::Array2;

use concept_em::mask::{crf_refine, iou, CrfParams};
use concept_em::scene::{generate_split, CorpusSpec, Split};

/// Grows the mask by `r` pixels (box neighbourhood), the kind of halo a
/// low-resolution attention map leaves around an object.
fn dilate(m: &Array2<bool>, r: usize) -> Array2<bool> {
    let (h, w) = m.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let ys = y.saturating_sub(r)..(y + r + 1).min(h);
        ys.into_iter().any(|yy| (x.saturating_sub(r)..(x + r + 1).min(w)).any(|xx| m[[yy, xx]]))
    })
}

fn main() -> anyhow::Result<()> {
    let n: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(5);
    let heldout = generate_split(&CorpusSpec::default(), Split::Heldout, 0)?;
    let params = CrfParams::default();
    let (mut before, mut after, mut count) = (0.0, 0.0, 0.0);
    for scene in heldout.iter().take(n) {
        let labels: Vec<&str> = scene.caption.positions.keys().map(String::as_str).collect();
        let sloppy: Vec<Array2<bool>> = labels.iter().map(|l| dilate(&scene.gt_masks[*l], 2)).collect();
        let out = crf_refine(&scene.image, &sloppy, &params)?;
        for (k, label) in labels.iter().enumerate() {
            let gt = &scene.gt_masks[*label];
            let (b, a) = (iou(&sloppy[k], gt)?, iou(&out.masks[k], gt)?);
            println!("{} {label:<11} dilated {b:.3} refined {a:.3}", scene.sample_id);
            before += b;
            after += a;
            count += 1.0;
        }
    }
    println!("mean IoU {:.3} -> {:.3}", before / count, after / count);
    Ok(())
}

//! On-disk layout: `<root>/<split>/<sample_id>/{image.png, mask_<label>.png, meta.json}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb as PixelRgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{BackgroundSpec, Caption, ConceptSprite, Corpus, SceneSample, SpriteLayout};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Meta {
    sample_id: String,
    height: usize,
    width: usize,
    caption: Caption,
    labels: Vec<String>,
    layout: Vec<SpriteLayout>,
    sprites: Vec<ConceptSprite>,
    background: BackgroundSpec,
}

pub fn image_to_png(image: &Array3<f32>) -> RgbImage {
    let (h, w, _) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        PixelRgb([px(0), px(1), px(2)])
    })
}

pub fn png_to_image(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        f32::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    })
}

pub fn mask_to_png(mask: &Array2<bool>) -> GrayImage {
    let (h, w) = mask.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }]))
}

pub fn png_to_mask(img: &GrayImage) -> Array2<bool> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0] >= 128)
}

/// Grayscale raster of a map with values in [0, 1].
pub fn soft_to_png(map: &Array2<f64>) -> GrayImage {
    let (h, w) = map.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(map[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

pub fn save_sample(scene: &SceneSample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    image_to_png(&scene.image).save(dir.join("image.png"))?;
    for (label, mask) in &scene.gt_masks {
        mask_to_png(mask).save(dir.join(format!("mask_{label}.png")))?;
    }
    let meta = Meta {
        sample_id: scene.sample_id.clone(),
        height: scene.height(),
        width: scene.width(),
        caption: scene.caption.clone(),
        labels: scene.gt_masks.keys().cloned().collect(),
        layout: scene.layout.clone(),
        sprites: scene.sprites.clone(),
        background: scene.background.clone(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_sample(dir: &Path) -> Result<SceneSample> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::MissingInput(meta_path));
    }
    let meta: Meta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
    let image = png_to_image(&image::open(dir.join("image.png"))?.to_rgb8());
    if image.dim() != (meta.height, meta.width, 3) {
        return Err(Error::Shape(format!("{}: image size disagrees with meta.json", dir.display())));
    }
    let mut gt_masks = BTreeMap::new();
    for label in &meta.labels {
        let m = png_to_mask(&image::open(dir.join(format!("mask_{label}.png")))?.to_luma8());
        gt_masks.insert(label.clone(), m);
    }
    Ok(SceneSample {
        sample_id: meta.sample_id,
        image,
        caption: meta.caption,
        gt_masks,
        layout: meta.layout,
        sprites: meta.sprites,
        background: meta.background,
    })
}

pub fn save_corpus(corpus: &Corpus, root: &Path) -> Result<()> {
    for (split, samples) in [("train", &corpus.train), ("heldout", &corpus.heldout)] {
        for s in samples {
            save_sample(s, &root.join(split).join(&s.sample_id))?;
        }
    }
    Ok(())
}

/// Loads every sample under `<root>/<split>/`, ordered by sample id.
pub fn load_corpus_split(root: &Path, split: &str) -> Result<Vec<SceneSample>> {
    let dir = root.join(split);
    if !dir.is_dir() {
        return Err(Error::MissingInput(dir));
    }
    let mut dirs: Vec<_> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("meta.json").exists())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_sample(d)).collect()
}

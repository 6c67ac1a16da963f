//! Procedural scenes: textured shape sprites over a textured background,
//! with exact per-pixel ground-truth labels.

mod caption;
mod corpus;
pub mod io;

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

pub use caption::{caption_for, Caption, NUM_TEMPLATES};
pub use corpus::{generate_corpus, generate_split, Corpus, CorpusSpec, Split};
pub use io::{image_to_png, load_corpus_split, load_sample, mask_to_png, png_to_image, png_to_mask, save_corpus, save_sample, soft_to_png};

pub const BACKGROUND: &str = "background";
pub const MAX_SPRITES: usize = 4;
const MAX_OVERLAP: f64 = 0.10;

pub type Rgb = [f32; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Star,
    Blob,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Star,
        ShapeKind::Blob,
    ];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Star => "star",
            ShapeKind::Blob => "blob",
        }
    }

    /// Color the pretraining corpus associates with this kind.
    pub fn canonical_fill(self) -> Rgb {
        match self {
            ShapeKind::Circle => [0.85, 0.20, 0.20],
            ShapeKind::Square => [0.20, 0.35, 0.85],
            ShapeKind::Triangle => [0.20, 0.75, 0.30],
            ShapeKind::Star => [0.95, 0.85, 0.20],
            ShapeKind::Blob => [0.65, 0.30, 0.80],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureKind {
    Solid,
    Stripes,
    Dots,
}

impl TextureKind {
    pub const ALL: [TextureKind; 3] = [TextureKind::Solid, TextureKind::Stripes, TextureKind::Dots];

    pub fn word(self) -> &'static str {
        match self {
            TextureKind::Solid => "solid",
            TextureKind::Stripes => "stripes",
            TextureKind::Dots => "dots",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSprite {
    pub sprite_id: String,
    pub shape_kind: ShapeKind,
    pub fill: Rgb,
    pub texture: TextureKind,
    /// Texture period in pixels.
    pub period: u32,
    /// Diameter as a fraction of the image side.
    pub size_frac: f64,
    pub class_word: String,
    /// Outline perturbation phases, only used by blobs.
    #[serde(default)]
    pub wobble: [f64; 2],
}

impl ConceptSprite {
    pub fn new(sprite_id: impl Into<String>, shape_kind: ShapeKind, fill: Rgb, size_frac: f64) -> Self {
        Self {
            sprite_id: sprite_id.into(),
            shape_kind,
            fill,
            texture: TextureKind::Solid,
            period: 4,
            size_frac,
            class_word: shape_kind.word().to_string(),
            wobble: [0.0, 0.0],
        }
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if !(self.size_frac > 0.1 && self.size_frac <= 0.5) {
            return Err(Error::InvalidLayout(format!(
                "sprite {} size_frac {} outside (0.1, 0.5]",
                self.sprite_id, self.size_frac
            )));
        }
        if self.fill.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidLayout(format!("sprite {} fill outside [0,1]", self.sprite_id)));
        }
        if self.sprite_id == BACKGROUND {
            return Err(Error::InvalidLayout("sprite id `background` is reserved".into()));
        }
        vocab.id(&self.class_word)?;
        Ok(())
    }

    /// Whether the point (x, y), in pixels relative to the sprite center,
    /// lies inside the shape of radius `r`.
    fn contains(&self, x: f64, y: f64, r: f64) -> bool {
        match self.shape_kind {
            ShapeKind::Circle => x * x + y * y <= r * r,
            ShapeKind::Square => x.abs() <= r && y.abs() <= r,
            ShapeKind::Triangle => {
                // upward equilateral triangle inscribed in the radius-r circle
                let verts = regular_polygon(3, r, -PI / 2.0);
                point_in_polygon(x, y, &verts)
            }
            ShapeKind::Star => {
                let mut verts = Vec::with_capacity(10);
                for k in 0..10 {
                    let a = -PI / 2.0 + k as f64 * PI / 5.0;
                    let rr = if k % 2 == 0 { r } else { 0.45 * r };
                    verts.push((rr * a.cos(), rr * a.sin()));
                }
                point_in_polygon(x, y, &verts)
            }
            ShapeKind::Blob => {
                let rho = (x * x + y * y).sqrt();
                let theta = y.atan2(x);
                let edge = r
                    * (0.8
                        + 0.1 * (2.0 * theta + self.wobble[0]).sin()
                        + 0.1 * (3.0 * theta + self.wobble[1]).sin());
                rho <= edge
            }
        }
    }
}

fn regular_polygon(n: usize, r: f64, phase: f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|k| {
            let a = phase + 2.0 * PI * k as f64 / n as f64;
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

fn point_in_polygon(x: f64, y: f64, verts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = verts.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub texture: TextureKind,
    pub period: u32,
    pub base: Rgb,
    pub accent: Rgb,
}

impl BackgroundSpec {
    pub fn solid(color: Rgb) -> Self {
        Self { texture: TextureKind::Solid, period: 4, base: color, accent: color }
    }
}

/// Sprite center in fractions of the image side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub cx: f64,
    pub cy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteLayout {
    pub sprite_id: String,
    pub cx: f64,
    pub cy: f64,
    pub size_frac: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub sample_id: String,
    /// H x W x 3, values k/255.
    pub image: Array3<f32>,
    pub caption: Caption,
    /// Keyed by sprite id plus [`BACKGROUND`].
    pub gt_masks: BTreeMap<String, Array2<bool>>,
    pub layout: Vec<SpriteLayout>,
    pub sprites: Vec<ConceptSprite>,
    pub background: BackgroundSpec,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.gt_masks.keys().map(String::as_str)
    }

    pub fn sprite(&self, sprite_id: &str) -> Option<&ConceptSprite> {
        self.sprites.iter().find(|s| s.sprite_id == sprite_id)
    }

    /// Vocabulary word naming the concept behind a GT label.
    pub fn class_word(&self, label: &str) -> Option<&str> {
        if label == BACKGROUND {
            Some(self.background.texture.word())
        } else {
            self.sprite(label).map(|s| s.class_word.as_str())
        }
    }
}

fn texture_on(texture: TextureKind, period: u32, x: usize, y: usize) -> bool {
    let p = period.max(2) as usize;
    match texture {
        TextureKind::Solid => false,
        TextureKind::Stripes => ((x + y) % p) < p / 2,
        TextureKind::Dots => {
            let cx = (x % p) as f64 + 0.5 - p as f64 / 2.0;
            let cy = (y % p) as f64 + 0.5 - p as f64 / 2.0;
            cx * cx + cy * cy <= (p as f64 / 4.0).powi(2) + 0.25
        }
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn sprite_accent(fill: Rgb) -> Rgb {
    [fill[0] * 0.5, fill[1] * 0.5, fill[2] * 0.5]
}

/// Rasterizes the sprites in order (later sprites on top) over the
/// background. Ground-truth labels follow the topmost sprite, so the returned
/// masks partition the canvas.
pub fn render_scene(
    sprites: &[ConceptSprite],
    background: &BackgroundSpec,
    layout: &[Placement],
    height: usize,
    width: usize,
    vocab: &Vocabulary,
) -> Result<SceneSample> {
    if sprites.len() > MAX_SPRITES {
        return Err(Error::InvalidLayout(format!("{} sprites, at most {MAX_SPRITES}", sprites.len())));
    }
    if sprites.len() != layout.len() {
        return Err(Error::InvalidLayout("one placement per sprite required".into()));
    }
    if height == 0 || width == 0 {
        return Err(Error::InvalidLayout("empty canvas".into()));
    }
    let side = height.min(width) as f64;
    let mut footprints = Vec::with_capacity(sprites.len());
    for (i, (s, p)) in sprites.iter().zip(layout).enumerate() {
        s.validate(vocab)?;
        if sprites[..i].iter().any(|o| o.sprite_id == s.sprite_id) {
            return Err(Error::InvalidLayout(format!("duplicate sprite id {}", s.sprite_id)));
        }
        let r = s.size_frac * side / 2.0;
        let (cx, cy) = (p.cx * width as f64, p.cy * height as f64);
        let eps = 1e-9;
        if cx - r < -eps || cy - r < -eps || cx + r > width as f64 + eps || cy + r > height as f64 + eps {
            return Err(Error::InvalidLayout(format!("sprite {} leaves the canvas", s.sprite_id)));
        }
        let fp = Array2::from_shape_fn((height, width), |(y, x)| {
            s.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r)
        });
        if !fp.iter().any(|&b| b) {
            return Err(Error::InvalidLayout(format!("sprite {} rasterizes to nothing", s.sprite_id)));
        }
        footprints.push(fp);
    }
    for i in 0..footprints.len() {
        for j in (i + 1)..footprints.len() {
            let a = footprints[i].iter().filter(|&&b| b).count();
            let b = footprints[j].iter().filter(|&&b| b).count();
            let both = footprints[i].iter().zip(footprints[j].iter()).filter(|(x, y)| **x && **y).count();
            if both as f64 > MAX_OVERLAP * a.min(b) as f64 {
                return Err(Error::InvalidLayout(format!(
                    "sprites {} and {} overlap by {both} px",
                    sprites[i].sprite_id, sprites[j].sprite_id
                )));
            }
        }
    }

    let mut label = Array2::<usize>::from_elem((height, width), usize::MAX);
    for (k, fp) in footprints.iter().enumerate() {
        for ((y, x), &on) in fp.indexed_iter() {
            if on {
                label[[y, x]] = k;
            }
        }
    }

    let mut image = Array3::<f32>::zeros((height, width, 3));
    for ((y, x), &l) in label.indexed_iter() {
        let rgb = if l == usize::MAX {
            if texture_on(background.texture, background.period, x, y) {
                background.accent
            } else {
                background.base
            }
        } else {
            let s = &sprites[l];
            if texture_on(s.texture, s.period, x, y) {
                sprite_accent(s.fill)
            } else {
                s.fill
            }
        };
        for c in 0..3 {
            image[[y, x, c]] = quantize(rgb[c]);
        }
    }

    let mut gt_masks = BTreeMap::new();
    for (k, s) in sprites.iter().enumerate() {
        let m = label.mapv(|l| l == k);
        if !m.iter().any(|&b| b) {
            return Err(Error::InvalidLayout(format!("sprite {} fully occluded", s.sprite_id)));
        }
        gt_masks.insert(s.sprite_id.clone(), m);
    }
    gt_masks.insert(BACKGROUND.to_string(), label.mapv(|l| l == usize::MAX));

    let layout_meta = sprites
        .iter()
        .zip(layout)
        .map(|(s, p)| SpriteLayout { sprite_id: s.sprite_id.clone(), cx: p.cx, cy: p.cy, size_frac: s.size_frac })
        .collect();

    let mut scene = SceneSample {
        sample_id: String::new(),
        image,
        caption: Caption::default(),
        gt_masks,
        layout: layout_meta,
        sprites: sprites.to_vec(),
        background: background.clone(),
    };
    scene.caption = caption_for(&scene, 0, vocab)?;
    Ok(scene)
}

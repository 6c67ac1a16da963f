use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{render_scene, BackgroundSpec, ConceptSprite, Placement, Rgb, SceneSample, ShapeKind, TextureKind};
use crate::error::{Error, Result};
use crate::rng::{rng_for, Rng};
use crate::vocab::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub train_size: usize,
    pub heldout_size: usize,
    pub image_size: usize,
    /// Sprite count -> relative weight for the training split.
    pub sprite_counts: BTreeMap<usize, f64>,
    /// Sprites per held-out scene.
    pub heldout_sprites: usize,
    pub size_frac_min: f64,
    pub size_frac_max: f64,
    /// Per-channel uniform jitter around a kind's canonical fill (train).
    pub color_jitter: f32,
    /// Blend weight towards a random foreign color for held-out sprites,
    /// drawn uniformly from this range.
    pub heldout_shift: [f32; 2],
    /// Probability that a training sprite is solid.
    pub solid_prob: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            train_size: 3000,
            heldout_size: 12,
            image_size: 32,
            sprite_counts: [(1, 1.0), (2, 1.0), (3, 1.0)].into_iter().collect(),
            heldout_sprites: 2,
            size_frac_min: 0.3,
            size_frac_max: 0.45,
            color_jitter: 0.08,
            heldout_shift: [0.25, 0.5],
            solid_prob: 0.7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        if !(self.size_frac_min > 0.1 && self.size_frac_min <= self.size_frac_max && self.size_frac_max <= 0.5) {
            return Err(Error::Config("size_frac range must lie in (0.1, 0.5]".into()));
        }
        if self.sprite_counts.is_empty()
            || self.sprite_counts.keys().any(|&k| k > super::MAX_SPRITES)
            || self.sprite_counts.values().any(|&w| !(w >= 0.0) || !w.is_finite())
            || self.sprite_counts.values().sum::<f64>() <= 0.0
        {
            return Err(Error::Config("sprite_counts must be nonnegative weights over 0..=4".into()));
        }
        if !(0.0..=1.0).contains(&self.solid_prob) {
            return Err(Error::Config("solid_prob must lie in [0, 1]".into()));
        }
        if self.heldout_sprites > super::MAX_SPRITES {
            return Err(Error::Config("heldout_sprites must be at most 4".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<SceneSample>,
    pub heldout: Vec<SceneSample>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.train.len() + self.heldout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &SceneSample> {
        self.train.iter().chain(&self.heldout)
    }
}

pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus> {
    Ok(Corpus {
        train: generate_split(spec, Split::Train, seed)?,
        heldout: generate_split(spec, Split::Heldout, seed)?,
    })
}

/// Each sample draws its randomness from (seed, split, index) only.
pub fn generate_split(spec: &CorpusSpec, split: Split, seed: u64) -> Result<Vec<SceneSample>> {
    spec.validate()?;
    let vocab = Vocabulary::default();
    let n = match split {
        Split::Train => spec.train_size,
        Split::Heldout => spec.heldout_size,
    };
    (0..n)
        .map(|i| {
            let mut rng = rng_for(seed, split.name(), i as u64);
            let mut scene = random_scene(spec, split, &mut rng, &vocab)?;
            scene.sample_id = format!("{}-{:05}", split.name(), i);
            Ok(scene)
        })
        .collect()
}

fn draw_count(spec: &CorpusSpec, rng: &mut Rng) -> usize {
    let total: f64 = spec.sprite_counts.values().sum();
    let mut u = rng.random::<f64>() * total;
    for (&k, &w) in &spec.sprite_counts {
        if u < w {
            return k;
        }
        u -= w;
    }
    *spec.sprite_counts.keys().last().unwrap()
}

fn jitter(c: Rgb, amount: f32, rng: &mut Rng) -> Rgb {
    c.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn random_background(rng: &mut Rng) -> BackgroundSpec {
    let level = rng.random_range(0.35f32..0.7);
    let tint = [0, 1, 2].map(|_| rng.random_range(-0.05f32..0.05));
    let base = [0, 1, 2].map(|c| (level + tint[c]).clamp(0.0, 1.0));
    let delta = if rng.random_bool(0.5) { 0.2 } else { -0.2 };
    let accent = base.map(|v| (v + delta).clamp(0.0, 1.0));
    let texture = *TextureKind::ALL.choose(rng).unwrap();
    BackgroundSpec { texture, period: rng.random_range(4..=6), base, accent }
}

fn random_scene(spec: &CorpusSpec, split: Split, rng: &mut Rng, vocab: &Vocabulary) -> Result<SceneSample> {
    let count = match split {
        Split::Train => draw_count(spec, rng),
        Split::Heldout => spec.heldout_sprites,
    };
    let background = random_background(rng);
    let mut kinds = ShapeKind::ALL.to_vec();
    kinds.shuffle(rng);
    let mut sprites = Vec::with_capacity(count);
    for (k, &kind) in kinds.iter().take(count).enumerate() {
        let canonical = kind.canonical_fill();
        let (fill, texture) = match split {
            Split::Train => {
                let tex = if rng.random_bool(spec.solid_prob) {
                    TextureKind::Solid
                } else if rng.random_bool(0.5) {
                    TextureKind::Stripes
                } else {
                    TextureKind::Dots
                };
                (jitter(canonical, spec.color_jitter, rng), tex)
            }
            Split::Heldout => {
                let other = kinds[(k + count) % kinds.len()].canonical_fill();
                let w = rng.random_range(spec.heldout_shift[0]..=spec.heldout_shift[1]);
                let blended = [0, 1, 2].map(|c| canonical[c] * (1.0 - w) + other[c] * w);
                (blended, *TextureKind::ALL.choose(rng).unwrap())
            }
        };
        sprites.push(ConceptSprite {
            sprite_id: format!("s{k}"),
            shape_kind: kind,
            fill,
            texture,
            period: rng.random_range(3..=5),
            size_frac: rng.random_range(spec.size_frac_min..=spec.size_frac_max),
            class_word: kind.word().to_string(),
            wobble: [rng.random_range(0.0..6.28), rng.random_range(0.0..6.28)],
        });
    }

    // rejection-sample placements; shrink sprites if a crowded draw keeps failing
    for attempt in 0..400 {
        if attempt > 0 && attempt % 100 == 0 {
            for s in &mut sprites {
                s.size_frac = (s.size_frac * 0.85).max(0.11);
            }
        }
        let layout: Vec<Placement> = sprites
            .iter()
            .map(|s| {
                let r = s.size_frac / 2.0;
                Placement { cx: rng.random_range(r..=1.0 - r), cy: rng.random_range(r..=1.0 - r) }
            })
            .collect();
        match render_scene(&sprites, &background, &layout, spec.image_size, spec.image_size, vocab) {
            Ok(scene) => return Ok(scene),
            Err(Error::InvalidLayout(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::InvalidLayout(format!("could not place {count} sprites")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::BACKGROUND;

    fn small(n: usize) -> CorpusSpec {
        CorpusSpec { train_size: n, heldout_size: 4, ..Default::default() }
    }

    #[test]
    fn zero_size_is_empty() {
        let spec = CorpusSpec { train_size: 0, heldout_size: 0, ..Default::default() };
        assert!(generate_corpus(&spec, 1).unwrap().is_empty());
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_corpus(&small(20), 9).unwrap();
        let b = generate_corpus(&small(20), 9).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&small(20), 10).unwrap();
        assert_ne!(a.train[0].image, c.train[0].image);
    }

    #[test]
    fn sprite_count_frequencies() {
        let spec = CorpusSpec { train_size: 1000, heldout_size: 0, image_size: 16, ..Default::default() };
        let corpus = generate_split(&spec, Split::Train, 3).unwrap();
        let mut hist = [0usize; 5];
        for s in &corpus {
            hist[s.sprites.len()] += 1;
        }
        for k in 1..=3 {
            let f = hist[k] as f64 / 1000.0;
            assert!((f - 1.0 / 3.0).abs() <= 0.05, "count {k}: {f}");
        }
    }

    #[test]
    fn splits_disjoint_and_valid() {
        let corpus = generate_corpus(&small(30), 4).unwrap();
        let train_ids: std::collections::BTreeSet<_> = corpus.train.iter().map(|s| &s.sample_id).collect();
        assert!(corpus.heldout.iter().all(|s| !train_ids.contains(&s.sample_id)));
        for s in corpus.iter() {
            assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
            for label in s.caption.positions.keys() {
                assert!(s.gt_masks[label].iter().any(|&b| b), "{} {label}", s.sample_id);
            }
            assert!(s.caption.len() <= crate::diffusion::MAX_TOKENS);
            assert!(s.gt_masks.contains_key(BACKGROUND));
        }
        assert!(corpus.heldout.iter().all(|s| s.sprites.len() == 2));
    }
}

//! Mask IoU curves, embedding-based similarity and diversity, and
//! ours-vs-baseline comparisons.
//!
//! Similarity and diversity use one frozen feature extractor: the encoder
//! trunk of the pretrained denoiser at t = 0, pooled to per-channel means and
//! standard deviations. Scores are desk-scale analogs, not CLIP or LPIPS.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use candle_core::{Device, Tensor};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::attention::average_over_timesteps;
use crate::config::EvalSpec;
use crate::diffusion::{LatentState, ModelParams};
use crate::error::{Error, Result};
use crate::mask::binarize;
use crate::personalize::{IouRecord, OptimState};
use crate::rng::derive;

/// IoU series of one concept: (step, IoU) at initialization and after every
/// mask update (or logging point for the baseline).
pub type IouSeries = Vec<(usize, f64)>;

pub fn iou_curve(state: &OptimState, gt_labels: &BTreeSet<String>) -> Result<BTreeMap<String, IouSeries>> {
    iou_curve_from(&state.iou_history, gt_labels)
}

pub fn iou_curve_from(history: &[IouRecord], gt_labels: &BTreeSet<String>) -> Result<BTreeMap<String, IouSeries>> {
    if history.is_empty() {
        return Err(Error::Eval("empty IoU history".into()));
    }
    let mut out: BTreeMap<String, IouSeries> = BTreeMap::new();
    for rec in history {
        for (label, &v) in &rec.iou {
            if !gt_labels.contains(label) {
                return Err(Error::MissingMask(label.clone()));
            }
            out.entry(label.clone()).or_default().push((rec.step, v));
        }
    }
    Ok(out)
}

/// Centered moving average with the window truncated at the ends.
pub fn smooth(series: &IouSeries, window: usize) -> IouSeries {
    let half = window / 2;
    (0..series.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(series.len());
            let mean = series[lo..hi].iter().map(|(_, v)| v).sum::<f64>() / (hi - lo) as f64;
            (series[i].0, mean)
        })
        .collect()
}

/// Bounding box (y0, y1, x0, x1), half-open, of the set pixels.
pub fn bounding_box(mask: &Array2<bool>) -> Option<(usize, usize, usize, usize)> {
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for ((y, x), &v) in mask.indexed_iter() {
        if v {
            bb = Some(match bb {
                None => (y, y + 1, x, x + 1),
                Some((y0, y1, x0, x1)) => (y0.min(y), y1.max(y + 1), x0.min(x), x1.max(x + 1)),
            });
        }
    }
    bb
}

/// Bilinear resampling of a crop to `size` x `size` (half-pixel centers).
pub fn crop_resize(image: &Array3<f32>, bbox: (usize, usize, usize, usize), size: usize) -> Array3<f32> {
    let (y0, y1, x0, x1) = bbox;
    let (h, w) = (y1 - y0, x1 - x0);
    let sample = |pos: f64, n: usize| -> (usize, usize, f64) {
        let p = pos.clamp(0.0, (n - 1) as f64);
        let lo = p.floor() as usize;
        (lo, (lo + 1).min(n - 1), p - lo as f64)
    };
    Array3::from_shape_fn((size, size, 3), |(i, j, c)| {
        let (ya, yb, fy) = sample((i as f64 + 0.5) * h as f64 / size as f64 - 0.5, h);
        let (xa, xb, fx) = sample((j as f64 + 0.5) * w as f64 / size as f64 - 0.5, w);
        let at = |y: usize, x: usize| f64::from(image[[y0 + y, x0 + x, c]]);
        let v = at(ya, xa) * (1.0 - fy) * (1.0 - fx) + at(ya, xb) * (1.0 - fy) * fx + at(yb, xa) * fy * (1.0 - fx) + at(yb, xb) * fy * fx;
        v as f32
    })
}

/// Frozen feature extractor built from a pretrained denoiser.
pub struct Embedder {
    params: ModelParams,
    center: Option<Vec<f64>>,
}

impl Embedder {
    pub fn new(params: &ModelParams) -> Self {
        Self { params: params.clone(), center: None }
    }

    /// Subtracts the mean feature of `images` from every embedding, so that
    /// cosine scores measure deviations from a typical scene.
    pub fn with_center(mut self, images: &[Array3<f32>]) -> Result<Self> {
        if images.is_empty() {
            return Ok(self);
        }
        let feats = self.raw_features(images)?;
        let d = feats[0].len();
        let mut mean = vec![0.0; d];
        for f in &feats {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / feats.len() as f64;
            }
        }
        self.center = Some(mean);
        Ok(self)
    }

    fn raw_features(&self, images: &[Array3<f32>]) -> Result<Vec<Vec<f64>>> {
        let size = self.params.config.image_size;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            let mut data = Vec::with_capacity(chunk.len() * 3 * size * size);
            for im in chunk {
                if im.dim() != (size, size, 3) {
                    return Err(Error::Shape(format!("embedder expects {size}x{size}x3, got {:?}", im.dim())));
                }
                for c in 0..3 {
                    for y in 0..size {
                        for x in 0..size {
                            data.push(2.0 * im[[y, x, c]] - 1.0);
                        }
                    }
                }
            }
            let x = Tensor::from_vec(data, (chunk.len(), 3, size, size), &Device::Cpu)?.to_dtype(self.params.dtype())?;
            let feats = self.params.unet().trunk(&x, 0)?;
            let mut parts = Vec::new();
            for t in [&feats.half, &feats.quarter] {
                let (b, c, h, w) = t.dims4()?;
                let flat = t.reshape((b, c, h * w))?;
                parts.push(flat.mean(2)?);
                let centered = flat.broadcast_sub(&flat.mean_keepdim(2)?)?;
                parts.push(centered.sqr()?.mean(2)?.sqrt()?);
            }
            let rows: Vec<Vec<f64>> = Tensor::cat(&parts, 1)?.to_dtype(candle_core::DType::F64)?.to_vec2()?;
            out.extend(rows);
        }
        Ok(out)
    }

    pub fn embed(&self, images: &[Array3<f32>]) -> Result<Vec<Vec<f64>>> {
        let mut feats = self.raw_features(images)?;
        if let Some(c) = &self.center {
            for f in &mut feats {
                for (v, m) in f.iter_mut().zip(c) {
                    *v -= m;
                }
            }
        }
        Ok(feats)
    }

    /// Embedding of the region's bounding-box crop, resized to the working size.
    pub fn embed_region(&self, image: &Array3<f32>, region: &Array2<bool>) -> Result<Option<Vec<f64>>> {
        let Some(bb) = bounding_box(region) else { return Ok(None) };
        let crop = crop_resize(image, bb, self.params.config.image_size);
        Ok(Some(self.embed(&[crop])?.remove(0)))
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity between the generated image's detected region and the
/// target concept's GT crop. `None` when no region was detected.
pub fn concept_similarity(
    embedder: &Embedder,
    generated: &Array3<f32>,
    region: &Array2<bool>,
    target_image: &Array3<f32>,
    target_mask: &Array2<bool>,
) -> Result<Option<f64>> {
    let Some(a) = embedder.embed_region(generated, region)? else { return Ok(None) };
    let b = embedder
        .embed_region(target_image, target_mask)?
        .ok_or_else(|| Error::EmptyMask("target concept has an empty GT mask".into()))?;
    Ok(Some(cosine(&a, &b)))
}

/// Mean over all pairs of 1 - cosine similarity of embeddings.
pub fn diversity(embedder: &Embedder, samples: &[Array3<f32>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Eval("diversity needs at least two samples".into()));
    }
    let feats = embedder.embed(samples)?;
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..feats.len() {
        for j in (i + 1)..feats.len() {
            total += 1.0 - cosine(&feats[i], &feats[j]);
            pairs += 1;
        }
    }
    Ok((total / pairs as f64).max(0.0))
}

/// Region of `placeholder` in a generated image: its timestep-averaged
/// attention under `prompt`, thresholded.
pub fn locate_concept(
    params: &ModelParams,
    image: &Array3<f32>,
    prompt: &str,
    placeholder: &str,
    spec: &EvalSpec,
    seed: u64,
) -> Result<Array2<bool>> {
    let enc = params.encode_text(prompt)?;
    let p = enc.position(placeholder)?;
    let soft = average_over_timesteps(params, &LatentState::from_image(image), &enc, p, spec.region_timesteps, derive(seed, "region", 0))?;
    Ok(binarize(&soft, spec.threshold))
}

/// Samples of one prompt, keyed by sampler seed.
#[derive(Clone, Debug)]
pub struct Gallery {
    pub prompt: String,
    pub placeholder: String,
    pub images: Vec<(u64, Array3<f32>)>,
}

/// Which concept a gallery is scored against.
pub struct Target<'a> {
    pub scene: &'a str,
    pub label: &'a str,
    pub image: &'a Array3<f32>,
    pub mask: &'a Array2<bool>,
}

/// Per-sample similarity records under `similarity_metric` and, for the
/// concept's own token, one diversity record per prompt.
pub fn score_gallery(
    embedder: &Embedder,
    params: &ModelParams,
    gallery: &Gallery,
    target: &Target,
    spec: &EvalSpec,
    similarity_metric: &str,
    with_diversity: bool,
) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for (seed, image) in &gallery.images {
        let region = locate_concept(params, image, &gallery.prompt, &gallery.placeholder, spec, *seed)?;
        let score = concept_similarity(embedder, image, &region, target.image, target.mask)?;
        if score.is_none() {
            log::warn!("{}: no region for {} in `{}` (seed {seed})", target.scene, gallery.placeholder, gallery.prompt);
        }
        out.push(MetricRecord::new(target.scene, similarity_metric, score).concept(target.label).prompt(&gallery.prompt).seed(*seed));
    }
    if with_diversity && gallery.images.len() >= 2 {
        let images: Vec<Array3<f32>> = gallery.images.iter().map(|(_, im)| im.clone()).collect();
        let d = diversity(embedder, &images)?;
        out.push(MetricRecord::new(target.scene, metric::DIVERSITY, Some(d)).concept(target.label).prompt(&gallery.prompt));
    }
    Ok(out)
}

/// One measured value. Missing values (e.g. no detected region) keep their
/// record with `value = None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub scene: String,
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub value: Option<f64>,
}

impl MetricRecord {
    pub fn new(scene: &str, metric: &str, value: Option<f64>) -> Self {
        Self { scene: scene.into(), metric: metric.into(), concept: None, step: None, prompt: None, seed: None, value }
    }

    pub fn concept(mut self, c: &str) -> Self {
        self.concept = Some(c.into());
        self
    }

    pub fn step(mut self, s: usize) -> Self {
        self.step = Some(s);
        self
    }

    pub fn prompt(mut self, p: &str) -> Self {
        self.prompt = Some(p.into());
        self
    }

    pub fn seed(mut self, s: u64) -> Self {
        self.seed = Some(s);
        self
    }
}

pub mod metric {
    pub const IOU: &str = "iou";
    pub const IOU_INIT: &str = "iou_init";
    pub const IOU_FINAL: &str = "iou_final";
    pub const IOU_BINARY_INIT: &str = "iou_binary_init";
    pub const ATTN_LOSS_START: &str = "attn_loss_start";
    pub const ATTN_LOSS_END: &str = "attn_loss_end";
    pub const SIMILARITY: &str = "similarity";
    pub const SIMILARITY_RANDOM: &str = "similarity_random_token";
    pub const DIVERSITY: &str = "diversity";
}

/// Metrics that enter the ours-vs-baseline table.
pub const COMPARED_METRICS: [&str; 4] = [metric::IOU_INIT, metric::IOU_FINAL, metric::SIMILARITY, metric::DIVERSITY];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Free-form run metadata (config hash, mode, seed ...).
    pub meta: BTreeMap<String, String>,
    pub records: Vec<MetricRecord>,
}

impl EvalReport {
    pub fn push(&mut self, r: MetricRecord) -> Result<()> {
        if let Some(v) = r.value {
            if !v.is_finite() {
                return Err(Error::Eval(format!("non-finite {} for {}", r.metric, r.scene)));
            }
            if r.metric.starts_with("iou") && !(0.0..=1.0).contains(&v) {
                return Err(Error::Eval(format!("IoU {v} outside [0, 1]")));
            }
            if r.metric == metric::DIVERSITY && v < 0.0 {
                return Err(Error::Eval("negative diversity".into()));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn extend(&mut self, other: EvalReport) -> Result<()> {
        for r in other.records {
            self.push(r)?;
        }
        Ok(())
    }

    pub fn scenes(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.scene.clone()).collect()
    }

    pub fn values<'a>(&'a self, metric: &'a str) -> impl Iterator<Item = f64> + 'a {
        self.records.iter().filter(move |r| r.metric == metric).filter_map(|r| r.value)
    }

    /// Mean of a metric over all records that carry a value.
    pub fn mean(&self, metric: &str) -> Option<f64> {
        let v: Vec<f64> = self.values(metric).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Per-scene mean of a metric.
    pub fn scene_means(&self, metric: &str) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.metric == metric) {
            if let Some(v) = r.value {
                let e = acc.entry(r.scene.clone()).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    /// IoU series per (scene, concept).
    pub fn iou_series(&self) -> BTreeMap<(String, String), IouSeries> {
        let mut out: BTreeMap<(String, String), IouSeries> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.metric == metric::IOU) {
            if let (Some(c), Some(s), Some(v)) = (&r.concept, r.step, r.value) {
                out.entry((r.scene.clone(), c.clone())).or_default().push((s, v));
            }
        }
        out
    }

    /// JSON lines: a metadata line followed by one line per record.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{}", serde_json::to_string(&serde_json::json!({ "meta": self.meta }))?)?;
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut report = EvalReport::default();
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if i == 0 {
                #[derive(Deserialize)]
                struct Head {
                    meta: BTreeMap<String, String>,
                }
                report.meta = serde_json::from_str::<Head>(&line)?.meta;
            } else {
                report.records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(report)
    }

    /// Fig.-3-style series as CSV: scene, concept, step, iou, smoothed iou.
    pub fn write_iou_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("scene,concept,step,iou,iou_smoothed\n");
        for ((scene, concept), series) in self.iou_series() {
            for ((step, v), (_, s)) in series.iter().zip(smooth(&series, 3)) {
                out.push_str(&format!("{scene},{concept},{step},{v},{s}\n"));
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub metric: String,
    pub ours: Option<f64>,
    pub baseline: Option<f64>,
    /// ours - baseline
    pub delta: Option<f64>,
}

/// Mean per-metric deltas (ours - baseline) over matched scene sets.
pub fn compare_runs(ours: &EvalReport, baseline: &EvalReport) -> Result<Vec<DeltaRow>> {
    if ours.scenes() != baseline.scenes() {
        return Err(Error::Eval("ours and baseline cover different scenes".into()));
    }
    Ok(COMPARED_METRICS
        .iter()
        .map(|&m| {
            let (a, b) = (ours.mean(m), baseline.mean(m));
            DeltaRow { metric: m.to_string(), ours: a, baseline: b, delta: a.zip(b).map(|(x, y)| x - y) }
        })
        .collect())
}

pub fn format_delta_table(rows: &[DeltaRow]) -> String {
    let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    let mut s = format!("{:<26} {:>10} {:>10} {:>10}\n", "metric (analog)", "ours", "baseline", "delta");
    for r in rows {
        s.push_str(&format!("{:<26} {:>10} {:>10} {:>10}\n", r.metric, f(r.ours), f(r.baseline), f(r.delta)));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ModelConfig;
    use crate::personalize::IouRecord;
    use candle_core::DType;
    use rand::Rng as _;

    fn tiny() -> ModelParams {
        let mut c = ModelConfig::default();
        c.image_size = 16;
        c.unet.channels = [8, 16, 16];
        c.unet.time_dim = 16;
        c.unet.groups = 4;
        c.unet.head_dim = 8;
        c.cond_dim = 16;
        c.text_layers = 1;
        c.timesteps = 20;
        ModelParams::new(c, 3, DType::F32).unwrap()
    }

    fn noise_image(seed: u64) -> Array3<f32> {
        let mut rng = crate::rng::rng_for(seed, "noise-image", 0);
        Array3::from_shape_fn((16, 16, 3), |_| rng.random::<f32>())
    }

    fn state_with(series: &[(usize, f64)]) -> OptimState {
        OptimState {
            tokens: vec![],
            masks: BTreeMap::new(),
            step: 0,
            mask_updates: 0,
            loss_history: vec![],
            iou_history: series
                .iter()
                .map(|&(s, v)| IouRecord { step: s, iou: [("sprite0".to_string(), v)].into_iter().collect() })
                .collect(),
            warnings: vec![],
        }
    }

    #[test]
    fn iou_curve_shapes() {
        let labels: BTreeSet<String> = ["sprite0".to_string()].into();
        let c = iou_curve(&state_with(&[(0, 1.0), (25, 1.0), (50, 1.0)]), &labels).unwrap();
        assert_eq!(c["sprite0"].len(), 3);
        assert!(smooth(&c["sprite0"], 3).iter().all(|&(_, v)| v == 1.0));
        assert!(iou_curve(&state_with(&[(0, 0.5)]), &BTreeSet::new()).is_err());
        assert!(iou_curve(&state_with(&[]), &labels).is_err());
        let s = smooth(&vec![(0, 0.0), (1, 0.3), (2, 0.6)], 3);
        assert!((s[1].1 - 0.3).abs() < 1e-12 && (s[0].1 - 0.15).abs() < 1e-12);
    }

    #[test]
    fn self_similarity_and_symmetry() {
        let e = Embedder::new(&tiny()).with_center(&[noise_image(1), noise_image(2)]).unwrap();
        let img = noise_image(3);
        let mask = Array2::from_shape_fn((16, 16), |(y, x)| (3..11).contains(&y) && (5..13).contains(&x));
        let s = concept_similarity(&e, &img, &mask, &img, &mask).unwrap().unwrap();
        assert!((s - 1.0).abs() < 1e-6);
        let other = noise_image(4);
        let full = Array2::from_elem((16, 16), true);
        let ab = concept_similarity(&e, &img, &mask, &other, &full).unwrap().unwrap();
        let ba = concept_similarity(&e, &other, &full, &img, &mask).unwrap().unwrap();
        assert!((ab - ba).abs() < 1e-12);
        let empty = Array2::from_elem((16, 16), false);
        assert_eq!(concept_similarity(&e, &img, &empty, &img, &mask).unwrap(), None);
    }

    #[test]
    fn diversity_properties() {
        let e = Embedder::new(&tiny());
        let a = noise_image(1);
        assert!(diversity(&e, &[a.clone(), a.clone(), a.clone()]).unwrap().abs() < 1e-12);
        let xs = vec![noise_image(1), noise_image(2), noise_image(3)];
        let ys = vec![noise_image(3), noise_image(1), noise_image(2)];
        let (dx, dy) = (diversity(&e, &xs).unwrap(), diversity(&e, &ys).unwrap());
        assert!((dx - dy).abs() < 1e-12 && dx >= 0.0);
        assert!(diversity(&e, &xs[..1]).is_err());
    }

    #[test]
    fn crop_of_full_box_is_identity() {
        let img = noise_image(5);
        let out = crop_resize(&img, (0, 16, 0, 16), 16);
        assert!(out.iter().zip(img.iter()).all(|(a, b)| (a - b).abs() < 1e-6));
        assert_eq!(bounding_box(&Array2::from_elem((3, 3), false)), None);
    }

    fn report(values: &[(&str, f64)]) -> EvalReport {
        let mut r = EvalReport::default();
        for (scene, v) in values {
            for m in COMPARED_METRICS {
                r.push(MetricRecord::new(scene, m, Some(*v))).unwrap();
            }
        }
        r
    }

    #[test]
    fn compare_identical_is_zero() {
        let a = report(&[("s0", 0.5), ("s1", 0.7)]);
        let rows = compare_runs(&a, &a).unwrap();
        assert_eq!(rows.len(), COMPARED_METRICS.len());
        assert!(rows.iter().all(|r| r.delta == Some(0.0)));
        assert!(compare_runs(&a, &report(&[("s0", 0.5)])).is_err());
        let b = report(&[("s0", 0.3), ("s1", 0.9)]);
        assert!(compare_runs(&a, &b).unwrap().iter().all(|r| r.delta.unwrap().abs() < 1e-12));
    }

    #[test]
    fn report_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = report(&[("s0", 0.1 + 0.2)]);
        r.meta.insert("mode".into(), "ours".into());
        r.push(MetricRecord::new("s0", metric::IOU, Some(1.0 / 3.0)).concept("sprite0").step(25)).unwrap();
        r.push(MetricRecord::new("s0", metric::SIMILARITY, None).prompt("a photo of a [v1]").seed(3)).unwrap();
        let p = dir.path().join("r.jsonl");
        r.write_jsonl(&p).unwrap();
        assert_eq!(EvalReport::read_jsonl(&p).unwrap(), r);
        assert!(r.clone().push(MetricRecord::new("s0", metric::IOU, Some(1.5))).is_err());
        assert!(r.clone().push(MetricRecord::new("s0", metric::SIMILARITY, Some(f64::NAN))).is_err());
    }
}

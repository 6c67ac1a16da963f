//! Binary masks from attention maps, dense-CRF refinement and IoU.
//!
//! The CRF uses explicit O(N^2) message passing over all pixel pairs with a
//! Potts compatibility. At the working resolution that is about a million
//! kernel entries, cheap enough to keep the implementation obviously right.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrfParams {
    pub n_iters: usize,
    pub w_appearance: f64,
    /// Spatial bandwidth of the appearance kernel, in pixels.
    pub theta_alpha: f64,
    /// Color bandwidth, in [0, 1] color units.
    pub theta_beta: f64,
    pub w_smooth: f64,
    /// Spatial bandwidth of the smoothness kernel, in pixels.
    pub theta_gamma: f64,
    pub unary_temperature: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            n_iters: 5,
            w_appearance: 2.0,
            theta_alpha: 4.0,
            theta_beta: 0.1,
            w_smooth: 1.0,
            theta_gamma: 1.5,
            unary_temperature: 0.5,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        let thetas = [self.theta_alpha, self.theta_beta, self.theta_gamma, self.unary_temperature];
        if self.w_appearance < 0.0 || self.w_smooth < 0.0 || thetas.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config("CRF weights must be >= 0 and bandwidths > 0".into()));
        }
        Ok(())
    }
}

/// Soft, thresholded and CRF-refined masks of one concept.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMask {
    pub concept_id: String,
    pub soft: Array2<f64>,
    pub binary: Array2<bool>,
    pub refined: Array2<bool>,
    /// Set when the refinement came back empty (attention collapse).
    pub collapsed: bool,
}

impl LatentMask {
    /// The mask used for supervision: the refined mask, or the binary one
    /// when refinement collapsed.
    pub fn effective(&self) -> &Array2<bool> {
        if self.collapsed {
            &self.binary
        } else {
            &self.refined
        }
    }
}

pub fn binarize(soft: &Array2<f64>, threshold: f64) -> Array2<bool> {
    soft.mapv(|v| v >= threshold)
}

pub fn iou(a: &Array2<bool>, b: &Array2<bool>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("iou of {:?} and {:?}", a.dim(), b.dim())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Union of several masks of equal shape.
pub fn union(masks: &[&Array2<bool>]) -> Result<Array2<bool>> {
    let first = masks.first().ok_or_else(|| Error::EmptyMask("union of no masks".into()))?;
    let mut out = Array2::from_elem(first.dim(), false);
    for m in masks {
        if m.dim() != out.dim() {
            return Err(Error::Shape("masks in a union must share a shape".into()));
        }
        out.zip_mut_with(m, |o, &v| *o |= v);
    }
    Ok(out)
}

/// Appends the background channel: the complement of the union.
pub fn with_background(binaries: &[Array2<bool>]) -> Result<Vec<Array2<bool>>> {
    let refs: Vec<&Array2<bool>> = binaries.iter().collect();
    let u = union(&refs)?;
    let mut out = binaries.to_vec();
    out.push(u.mapv(|v| !v));
    Ok(out)
}

/// Per-pixel softmax of the stacked {0, 1} channel scores divided by the
/// temperature: an (H, W, L) label distribution.
pub fn unary_from_masks(binaries: &[Array2<bool>], temperature: f64) -> Result<Array3<f64>> {
    let scores: Vec<Array2<f64>> = binaries.iter().map(|b| b.mapv(|v| if v { 1.0 } else { 0.0 })).collect();
    softmax_scores(&scores, temperature)
}

fn softmax_scores(scores: &[Array2<f64>], temperature: f64) -> Result<Array3<f64>> {
    let first = scores.first().ok_or_else(|| Error::EmptyMask("empty label stack".into()))?;
    if !(temperature > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let (h, w) = first.dim();
    if scores.iter().any(|s| s.dim() != (h, w)) {
        return Err(Error::Shape("label channels must share a shape".into()));
    }
    let l = scores.len();
    let mut out = Array3::zeros((h, w, l));
    for y in 0..h {
        for x in 0..w {
            let max = scores.iter().map(|s| s[[y, x]] / temperature).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (k, s) in scores.iter().enumerate() {
                let e = (s[[y, x]] / temperature - max).exp();
                out[[y, x, k]] = e;
                z += e;
            }
            for k in 0..l {
                out[[y, x, k]] /= z;
            }
        }
    }
    Ok(out)
}

/// Dense pairwise kernel over all pixel pairs, zero on the diagonal.
pub struct DenseKernel {
    k: Array2<f64>,
    h: usize,
    w: usize,
}

impl DenseKernel {
    pub fn new(image: &Array3<f32>, params: &CrfParams) -> Result<Self> {
        params.validate()?;
        let (h, w, c) = image.dim();
        let n = h * w;
        let mut k = Array2::zeros((n, n));
        let (a2, b2, g2) = (
            2.0 * params.theta_alpha.powi(2),
            2.0 * params.theta_beta.powi(2),
            2.0 * params.theta_gamma.powi(2),
        );
        for i in 0..n {
            let (yi, xi) = (i / w, i % w);
            for j in (i + 1)..n {
                let (yj, xj) = (j / w, j % w);
                let dp = (yi as f64 - yj as f64).powi(2) + (xi as f64 - xj as f64).powi(2);
                let dc: f64 = (0..c).map(|ch| f64::from(image[[yi, xi, ch]] - image[[yj, xj, ch]]).powi(2)).sum();
                let v = params.w_appearance * (-dp / a2 - dc / b2).exp() + params.w_smooth * (-dp / g2).exp();
                k[[i, j]] = v;
                k[[j, i]] = v;
            }
        }
        Ok(Self { k, h, w })
    }

    /// One mean-field update: Q'_i(l) ∝ exp(-unary_i(l) + sum_{j != i} k_ij Q_j(l)).
    pub fn step(&self, q: &Array3<f64>, unary: &Array3<f64>) -> Result<Array3<f64>> {
        let (h, w, l) = q.dim();
        if (h, w) != (self.h, self.w) || unary.dim() != q.dim() {
            return Err(Error::Shape(format!("Q {:?}, unary {:?}, kernel {}x{}", q.dim(), unary.dim(), self.h, self.w)));
        }
        check_normalized(q)?;
        let qf = q.view().into_shape_with_order((h * w, l)).map_err(|e| Error::Shape(e.to_string()))?;
        let msg = self.k.dot(&qf);
        let uf = unary.view().into_shape_with_order((h * w, l)).map_err(|e| Error::Shape(e.to_string()))?;
        let mut out = Array2::zeros((h * w, l));
        for i in 0..h * w {
            let logits: Vec<f64> = (0..l).map(|k| -uf[[i, k]] + msg[[i, k]]).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
            for k in 0..l {
                out[[i, k]] = (logits[k] - max).exp() / z;
            }
        }
        out.into_shape_with_order((h, w, l)).map_err(|e| Error::Shape(e.to_string()))
    }
}

fn check_normalized(q: &Array3<f64>) -> Result<()> {
    for row in q.lanes(Axis(2)) {
        let s: f64 = row.sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Numeric { location: "mean_field_step".into(), detail: format!("Q row sums to {s}") });
        }
    }
    Ok(())
}

pub fn mean_field_step(q: &Array3<f64>, unary: &Array3<f64>, image: &Array3<f32>, params: &CrfParams) -> Result<Array3<f64>> {
    if image.dim().0 != q.dim().0 || image.dim().1 != q.dim().1 {
        return Err(Error::Shape("image and Q differ in size".into()));
    }
    DenseKernel::new(image, params)?.step(q, unary)
}

/// Refined concept masks plus, per concept, whether it collapsed to empty.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfOutput {
    pub masks: Vec<Array2<bool>>,
    pub collapsed: Vec<bool>,
}

/// Joint refinement of all concept masks against a shared background label.
/// Returns mutually exclusive masks, one per input concept.
pub fn crf_refine(image: &Array3<f32>, binaries: &[Array2<bool>], params: &CrfParams) -> Result<CrfOutput> {
    if binaries.is_empty() {
        return Err(Error::EmptyMask("no concept masks to refine".into()));
    }
    let (h, w, _) = image.dim();
    if binaries.iter().any(|b| b.dim() != (h, w)) {
        return Err(Error::Shape("image and masks must share spatial size".into()));
    }
    let stack = with_background(binaries)?;
    let probs = unary_from_masks(&stack, params.unary_temperature)?;
    let unary = probs.mapv(|p| -p.ln());
    let mut q = probs;
    if params.n_iters > 0 {
        let kernel = DenseKernel::new(image, params)?;
        for _ in 0..params.n_iters {
            q = kernel.step(&q, &unary)?;
        }
    }
    let labels = argmax_labels(&q);
    let mut masks = Vec::with_capacity(binaries.len());
    let mut collapsed = Vec::with_capacity(binaries.len());
    for (k, b) in binaries.iter().enumerate() {
        let m = if b.iter().any(|&v| v) { labels.mapv(|l| l == k) } else { Array2::from_elem((h, w), false) };
        let empty = !m.iter().any(|&v| v);
        if empty {
            log::warn!("concept {k} has an empty refined mask");
        }
        masks.push(m);
        collapsed.push(empty);
    }
    Ok(CrfOutput { masks, collapsed })
}

/// Argmax over the label axis; ties go to the lowest index.
pub fn argmax_labels(q: &Array3<f64>) -> Array2<usize> {
    let (h, w, l) = q.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for k in 1..l {
            if q[[y, x, k]] > q[[y, x, best]] {
                best = k;
            }
        }
        best
    })
}

//! Reference loss kernels with analytic gradients.
//!
//! Every kernel has a slice form over `f64` data (planar probability stacks:
//! channel `c` of voxel `i` at `c * n + i`) and a [`Volume`] wrapper. The
//! slice forms are what finite-difference checks and external training code
//! compare against. Reductions sum fixed-size chunks in parallel and combine
//! the partials in chunk order, so results do not depend on thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PenaltyMatrix;
use crate::volume::{Volume, MAX_TOOTH_CLASS, NUM_CLASSES, PROB_SUM_TOL};

const CHUNK: usize = 4096;
const LOG_CLAMP: f64 = 1e-12;
const UNIT_TOL: f64 = 1e-3;

/// Deterministic parallel sum of `f(i)` for `i in 0..n`.
fn det_sum(n: usize, f: impl Fn(usize) -> f64 + Sync) -> f64 {
    let partials: Vec<f64> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| (c * CHUNK..((c + 1) * CHUNK).min(n)).map(&f).sum())
        .collect();
    partials.iter().sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_edt: f64,
    pub lambda_seg: f64,
    pub lambda_dir: f64,
    /// Voxel counts per class, background first.
    pub class_frequencies: Vec<f64>,
    /// Weight of the GeoWDL term inside the segmentation loss.
    pub seg_geo_weight: f64,
    /// Weight of the cross-entropy term inside the segmentation loss.
    pub seg_wce_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_edt: 10.0,
            lambda_seg: 0.1,
            lambda_dir: 1e-6,
            class_frequencies: vec![1.0; NUM_CLASSES],
            seg_geo_weight: 1.0,
            seg_wce_weight: 1.0,
        }
    }
}

impl LossWeights {
    /// Defaults with class frequencies counted from a label volume.
    pub fn with_frequencies_from(labels: &Volume) -> Result<Self> {
        let mut freq = vec![0.0; NUM_CLASSES];
        for (i, &l) in labels.as_labels()?.iter().enumerate() {
            if l > MAX_TOOTH_CLASS {
                return Err(Error::LabelOutOfRange { value: l, index: i });
            }
            freq[l as usize] += 1.0;
        }
        let w = LossWeights { class_frequencies: freq, ..Default::default() };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_edt", self.lambda_edt),
            ("lambda_seg", self.lambda_seg),
            ("lambda_dir", self.lambda_dir),
            ("seg_geo_weight", self.seg_geo_weight),
            ("seg_wce_weight", self.seg_wce_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidInput(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if self.class_frequencies.len() != NUM_CLASSES {
            return Err(Error::InvalidInput(format!(
                "class_frequencies has {} entries, expected {NUM_CLASSES}",
                self.class_frequencies.len()
            )));
        }
        if self.class_frequencies.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::InvalidInput("class frequencies must be non-negative".into()));
        }
        if !self.class_frequencies.iter().any(|&f| f > 0.0) {
            return Err(Error::InvalidInput("at least one class frequency must be positive".into()));
        }
        Ok(())
    }

    /// Inverse-frequency class weights scaled to sum to 33 over classes with a
    /// positive frequency; classes never seen get weight 0.
    pub fn wce_weights(&self) -> Result<[f64; NUM_CLASSES]> {
        self.validate()?;
        let mut w = [0.0; NUM_CLASSES];
        for (wc, &f) in w.iter_mut().zip(&self.class_frequencies) {
            if f > 0.0 {
                *wc = 1.0 / f;
            }
        }
        let s: f64 = w.iter().sum();
        for wc in &mut w {
            *wc *= NUM_CLASSES as f64 / s;
        }
        Ok(w)
    }
}

fn check_pm(pm: &PenaltyMatrix) -> Result<()> {
    if pm.matrix.len() != NUM_CLASSES || pm.matrix.iter().any(|r| r.len() != NUM_CLASSES) {
        return Err(Error::Shape(format!("penalty matrix must be {NUM_CLASSES}×{NUM_CLASSES}")));
    }
    Ok(())
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.len() != NUM_CLASSES {
        return Err(Error::Shape(format!("{what} has {} entries, expected {NUM_CLASSES}", p.len())));
    }
    if p.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::InvalidInput(format!("{what} has negative or NaN entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::InvalidInput(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// `Σ_l gt_l Σ_l' M[l][l'] pred_l'` for one voxel.
pub fn wasserstein_mass(pred: &[f64], gt: &[f64], pm: &PenaltyMatrix) -> Result<f64> {
    check_pm(pm)?;
    check_distribution(pred, "prediction")?;
    check_distribution(gt, "ground truth")?;
    let mut w = 0.0;
    for (l, &g) in gt.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &pm.matrix[l];
        w += g * row.iter().zip(pred).map(|(m, p)| m * p).sum::<f64>();
    }
    Ok(w)
}

fn check_stacks(pred: &[f64], gt: &[f64], n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidInput("empty volume".into()));
    }
    if pred.len() != NUM_CLASSES * n || gt.len() != NUM_CLASSES * n {
        return Err(Error::Shape(format!(
            "probability stacks must hold {NUM_CLASSES}×{n} values (pred {}, gt {})",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Per-voxel `(W_i, t_i)` where `t_i` is the ground-truth tooth mass.
fn voxel_mass(pred: &[f64], gt: &[f64], n: usize, i: usize, pm: &PenaltyMatrix) -> (f64, f64) {
    let mut w = 0.0;
    let mut t = 0.0;
    for l in 0..NUM_CLASSES {
        let g = gt[l * n + i];
        if g == 0.0 {
            continue;
        }
        if l > 0 {
            t += g;
        }
        let row = &pm.matrix[l];
        let mut inner = 0.0;
        for (lp, m) in row.iter().enumerate() {
            inner += m * pred[lp * n + i];
        }
        w += g * inner;
    }
    (w, t)
}

/// Sums `(A, S)`: tooth-class agreement mass and total Wasserstein mass.
fn geo_wdl_terms(pred: &[f64], gt: &[f64], n: usize, pm: &PenaltyMatrix) -> (f64, f64) {
    let a = det_sum(n, |i| {
        let (w, t) = voxel_mass(pred, gt, n, i, pm);
        t * (1.0 - w)
    });
    let s = det_sum(n, |i| voxel_mass(pred, gt, n, i, pm).0);
    (a, s)
}

/// Geometric Wasserstein Dice loss on planar stacks of `n` voxels:
/// `1 − 2A / (2A + S)` with `A = Σ_{l≥1} Σ_i gt_il (1 − W_i)` and `S = Σ_i W_i`.
/// Returns 0 when the denominator vanishes (no tooth mass and no penalty).
pub fn geo_wdl_slices(pred: &[f64], gt: &[f64], n: usize, pm: &PenaltyMatrix) -> Result<f64> {
    check_pm(pm)?;
    check_stacks(pred, gt, n)?;
    let (a, s) = geo_wdl_terms(pred, gt, n, pm);
    let den = 2.0 * a + s;
    Ok(if den == 0.0 { 0.0 } else { 1.0 - 2.0 * a / den })
}

/// Gradient of [`geo_wdl_slices`] with respect to `pred`, same layout.
pub fn geo_wdl_grad(pred: &[f64], gt: &[f64], n: usize, pm: &PenaltyMatrix) -> Result<Vec<f64>> {
    check_pm(pm)?;
    check_stacks(pred, gt, n)?;
    let (a, s) = geo_wdl_terms(pred, gt, n, pm);
    let den = 2.0 * a + s;
    let mut grad = vec![0.0; NUM_CLASSES * n];
    if den == 0.0 {
        return Ok(grad);
    }
    let scale = 2.0 / (den * den);
    for i in 0..n {
        let t: f64 = (1..NUM_CLASSES).map(|l| gt[l * n + i]).sum();
        let factor = scale * (s * t + a);
        for lp in 0..NUM_CLASSES {
            let g: f64 = (0..NUM_CLASSES).map(|l| gt[l * n + i] * pm.matrix[l][lp]).sum();
            grad[lp * n + i] = factor * g;
        }
    }
    Ok(grad)
}

fn prob_stack_f64(v: &Volume, what: &str) -> Result<Vec<f64>> {
    let (channels, data) = v.as_prob_stack()?;
    if channels != NUM_CLASSES {
        return Err(Error::Shape(format!("{what} has {channels} channels, expected {NUM_CLASSES}")));
    }
    v.check_prob_normalized()?;
    Ok(data.iter().map(|&x| x as f64).collect())
}

pub fn geo_wdl(pred: &Volume, gt: &Volume, pm: &PenaltyMatrix) -> Result<f64> {
    pred.same_dims(gt)?;
    let p = prob_stack_f64(pred, "prediction")?;
    let g = prob_stack_f64(gt, "ground truth")?;
    geo_wdl_slices(&p, &g, pred.len(), pm)
}

fn check_labels(labels: &[u16]) -> Result<()> {
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l > MAX_TOOTH_CLASS) {
        return Err(Error::LabelOutOfRange { value: l, index: i });
    }
    Ok(())
}

/// Mean over voxels of `−w_c log(pred_ic)` with `c` the label at voxel `i`.
pub fn wce_slices(pred: &[f64], labels: &[u16], w: &LossWeights) -> Result<f64> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty volume".into()));
    }
    if pred.len() != NUM_CLASSES * n {
        return Err(Error::Shape(format!("prediction holds {} values, expected {}", pred.len(), NUM_CLASSES * n)));
    }
    check_labels(labels)?;
    let weights = w.wce_weights()?;
    if let Some(&c) = labels.iter().find(|&&c| w.class_frequencies[c as usize] <= 0.0) {
        return Err(Error::InvalidInput(format!("class {c} occurs in the labels but has zero recorded frequency")));
    }
    let total = det_sum(n, |i| {
        let c = labels[i] as usize;
        -weights[c] * pred[c * n + i].max(LOG_CLAMP).ln()
    });
    Ok(total / n as f64)
}

/// Gradient of [`wce_slices`] with respect to `pred`.
pub fn wce_grad(pred: &[f64], labels: &[u16], w: &LossWeights) -> Result<Vec<f64>> {
    wce_slices(pred, labels, w)?;
    let n = labels.len();
    let weights = w.wce_weights()?;
    let mut grad = vec![0.0; pred.len()];
    for (i, &c) in labels.iter().enumerate() {
        let j = c as usize * n + i;
        if pred[j] > LOG_CLAMP {
            grad[j] = -weights[c as usize] / (pred[j] * n as f64);
        }
    }
    Ok(grad)
}

pub fn weighted_cross_entropy(pred: &Volume, gt_labels: &Volume, w: &LossWeights) -> Result<f64> {
    pred.same_dims(gt_labels)?;
    let p = prob_stack_f64(pred, "prediction")?;
    wce_slices(&p, gt_labels.as_labels()?, w)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegLoss {
    pub geo_wdl: f64,
    pub wce: f64,
    pub seg: f64,
}

/// Weighted sum of GeoWDL (against the one-hot labels) and weighted cross-entropy.
pub fn segmentation_loss(pred: &Volume, gt_labels: &Volume, pm: &PenaltyMatrix, w: &LossWeights) -> Result<SegLoss> {
    pred.same_dims(gt_labels)?;
    let p = prob_stack_f64(pred, "prediction")?;
    let labels = gt_labels.as_labels()?;
    check_labels(labels)?;
    let n = labels.len();
    let mut g = vec![0.0; NUM_CLASSES * n];
    for (i, &c) in labels.iter().enumerate() {
        g[c as usize * n + i] = 1.0;
    }
    let geo = geo_wdl_slices(&p, &g, n, pm)?;
    let wce = wce_slices(&p, labels, w)?;
    Ok(SegLoss { geo_wdl: geo, wce, seg: w.seg_geo_weight * geo + w.seg_wce_weight * wce })
}

/// Mean squared error.
pub fn edt_loss_slices(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} vs {} values", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("empty volume".into()));
    }
    Ok(det_sum(pred.len(), |i| (pred[i] - gt[i]).powi(2)) / pred.len() as f64)
}

pub fn edt_loss_grad(pred: &[f64], gt: &[f64]) -> Result<Vec<f64>> {
    edt_loss_slices(pred, gt)?;
    let n = pred.len() as f64;
    Ok(pred.iter().zip(gt).map(|(p, g)| 2.0 * (p - g) / n).collect())
}

pub fn edt_loss(pred_energy: &Volume, gt_energy: &Volume) -> Result<f64> {
    pred_energy.same_dims(gt_energy)?;
    let p: Vec<f64> = pred_energy.as_scalar()?.iter().map(|&x| x as f64).collect();
    let g: Vec<f64> = gt_energy.as_scalar()?.iter().map(|&x| x as f64).collect();
    edt_loss_slices(&p, &g)
}

fn norm(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Indices contributing to the direction loss: tooth voxels whose ground
/// truth direction is defined. Errors on non-unit vectors there.
fn direction_support(pred: &[[f64; 3]], gt: &[[f64; 3]], mask: &[u16]) -> Result<Vec<usize>> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::Shape(format!("{} / {} / {} voxels", pred.len(), gt.len(), mask.len())));
    }
    check_labels(mask)?;
    let mut idx = Vec::new();
    for i in 0..mask.len() {
        if mask[i] == 0 {
            continue;
        }
        let ng = norm(&gt[i]);
        if ng == 0.0 {
            continue;
        }
        let np = norm(&pred[i]);
        if np == 0.0 {
            return Err(Error::InvalidInput(format!("zero-length predicted direction at tooth voxel {i}")));
        }
        if (ng - 1.0).abs() > UNIT_TOL || (np - 1.0).abs() > UNIT_TOL {
            return Err(Error::InvalidInput(format!(
                "direction at voxel {i} is not unit length (gt {ng}, pred {np})"
            )));
        }
        idx.push(i);
    }
    Ok(idx)
}

/// `Σ arccos(clamp(⟨gt, pred⟩, −1, 1))²` over tooth voxels (mask in 1..=32)
/// with a non-zero ground-truth direction; divided by the number of such
/// voxels when `mean` is set (0 if there are none).
pub fn direction_loss_slices(pred: &[[f64; 3]], gt: &[[f64; 3]], mask: &[u16], mean: bool) -> Result<f64> {
    let idx = direction_support(pred, gt, mask)?;
    let total = det_sum(idx.len(), |k| {
        let i = idx[k];
        dot(&gt[i], &pred[i]).clamp(-1.0, 1.0).acos().powi(2)
    });
    Ok(if mean {
        if idx.is_empty() {
            0.0
        } else {
            total / idx.len() as f64
        }
    } else {
        total
    })
}

/// Gradient of the summed [`direction_loss_slices`] with respect to `pred`.
/// Zero where the clamp is active.
pub fn direction_loss_grad(pred: &[[f64; 3]], gt: &[[f64; 3]], mask: &[u16]) -> Result<Vec<[f64; 3]>> {
    let idx = direction_support(pred, gt, mask)?;
    let mut grad = vec![[0.0; 3]; pred.len()];
    for i in idx {
        let c = dot(&gt[i], &pred[i]);
        if c.abs() >= 1.0 {
            continue;
        }
        let f = -2.0 * c.acos() / (1.0 - c * c).sqrt();
        grad[i] = [f * gt[i][0], f * gt[i][1], f * gt[i][2]];
    }
    Ok(grad)
}

pub fn direction_loss(pred_dir: &Volume, gt_dir: &Volume, tooth_mask: &Volume, mean: bool) -> Result<f64> {
    pred_dir.same_dims(gt_dir)?;
    pred_dir.same_dims(tooth_mask)?;
    let cvt = |v: &Volume| -> Result<Vec<[f64; 3]>> {
        Ok(v.as_vector3()?.iter().map(|u| [u[0] as f64, u[1] as f64, u[2] as f64]).collect())
    };
    direction_loss_slices(&cvt(pred_dir)?, &cvt(gt_dir)?, tooth_mask.as_labels()?, mean)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub edt: f64,
    pub seg: f64,
    pub dir: f64,
}

/// `λ_edt·edt + λ_seg·seg + λ_dir·dir`.
pub fn total_loss(parts: LossParts, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("edt", parts.edt), ("seg", parts.seg), ("dir", parts.dir)] {
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!("{name} loss is not finite")));
        }
    }
    Ok(w.lambda_edt * parts.edt + w.lambda_seg * parts.seg + w.lambda_dir * parts.dir)
}

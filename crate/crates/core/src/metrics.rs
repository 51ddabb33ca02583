//! Evaluation metrics: per-class overlap and surface distances, binary
//! recall, surface Dice, and instance detection / classification scores.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{squared_edt_box, INF};
use crate::grid::{Grid, OFFSETS_6};
use crate::instance::InstanceMap;
use crate::volume::{Volume, MAX_TOOTH_CLASS};

pub const REPORT_SCHEMA: u32 = 1;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapScores {
    pub dsc: f64,
    pub precision: f64,
    pub recall: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Dice, precision and recall of class `c`. `None` when the class occurs in
/// neither volume. Undefined precision or recall (empty prediction or empty
/// ground truth) is reported as 0.
pub fn dice_pr_rc_slices(pred: &[u16], gt: &[u16], c: u16) -> Option<OverlapScores> {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p == c, g == c) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return None;
    }
    Some(OverlapScores { dsc: ratio(2 * tp, 2 * tp + fp + fn_), precision: ratio(tp, tp + fp), recall: ratio(tp, tp + fn_) })
}

pub fn dice_pr_rc(pred: &Volume, gt: &Volume, c: u16) -> Result<Option<OverlapScores>> {
    pred.same_dims(gt)?;
    Ok(dice_pr_rc_slices(pred.as_labels()?, gt.as_labels()?, c))
}

/// Voxels of `mask` with at least one face neighbour outside it; neighbours
/// beyond the grid count as outside.
pub fn surface_voxels(mask: &[bool], grid: Grid) -> Vec<usize> {
    (0..mask.len())
        .filter(|&i| mask[i] && OFFSETS_6.iter().any(|&o| grid.offset(i, o).is_none_or(|j| !mask[j])))
        .collect()
}

/// Squared Euclidean distance (in units of `spacing`) from each voxel of
/// `from` to the nearest voxel of `to`. `to` must be non-empty.
pub fn directed_sq_distances(from: &[usize], to: &[usize], grid: Grid, spacing: [f64; 3]) -> Vec<f64> {
    assert!(!to.is_empty(), "target set must be non-empty");
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for &i in from.iter().chain(to) {
        let c = grid.coords(i);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let bd: [usize; 3] = std::array::from_fn(|a| hi[a] - lo[a] + 1);
    let local = |i: usize| {
        let c = grid.coords(i);
        (c[0] - lo[0]) + bd[0] * ((c[1] - lo[1]) + bd[1] * (c[2] - lo[2]))
    };
    let mut buf = vec![INF; bd[0] * bd[1] * bd[2]];
    for &i in to {
        buf[local(i)] = 0.0;
    }
    squared_edt_box(&mut buf, bd, spacing);
    from.iter().map(|&i| buf[local(i)]).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HausdorffVariant {
    /// Maximum surface distance.
    #[default]
    Max,
    /// 95th percentile of each directed distance set, then the larger one.
    P95,
}

fn percentile95(mut d: Vec<f64>) -> f64 {
    d.sort_by(f64::total_cmp);
    let rank = ((0.95 * d.len() as f64).ceil() as usize).clamp(1, d.len());
    d[rank - 1]
}

/// Symmetric Hausdorff distance in mm between the surfaces of class `c`.
/// `None` when the class is missing from either volume.
pub fn hausdorff_mm_variant(pred: &Volume, gt: &Volume, c: u16, variant: HausdorffVariant) -> Result<Option<f64>> {
    pred.same_dims(gt)?;
    let grid = pred.grid();
    let a: Vec<bool> = pred.as_labels()?.iter().map(|&v| v == c).collect();
    let b: Vec<bool> = gt.as_labels()?.iter().map(|&v| v == c).collect();
    let (sa, sb) = (surface_voxels(&a, grid), surface_voxels(&b, grid));
    if sa.is_empty() || sb.is_empty() {
        return Ok(None);
    }
    let sp = pred.spacing();
    let isotropic = sp.iter().all(|&s| s == sp[0]);
    // Integer voxel distances are exact; scale once at the end.
    let (w, scale) = if isotropic { ([1.0; 3], sp[0]) } else { (sp, 1.0) };
    let dab = directed_sq_distances(&sa, &sb, grid, w);
    let dba = directed_sq_distances(&sb, &sa, grid, w);
    let reduce = |d: Vec<f64>| match variant {
        HausdorffVariant::Max => d.into_iter().fold(0.0, f64::max),
        HausdorffVariant::P95 => percentile95(d),
    };
    Ok(Some(reduce(dab).max(reduce(dba)).sqrt() * scale))
}

pub fn hausdorff_mm(pred: &Volume, gt: &Volume, c: u16) -> Result<Option<f64>> {
    hausdorff_mm_variant(pred, gt, c, HausdorffVariant::Max)
}

fn binary(v: &Volume) -> Result<Vec<bool>> {
    Ok(v.as_labels()?.iter().map(|&l| l != 0).collect())
}

/// Normalized surface Dice of the foreground masks at tolerance `tau`
/// voxels. Both surfaces empty gives 1; exactly one empty gives 0.
pub fn nsd(pred: &Volume, gt: &Volume, tau: f64) -> Result<f64> {
    pred.same_dims(gt)?;
    let grid = pred.grid();
    let sp = surface_voxels(&binary(pred)?, grid);
    let sg = surface_voxels(&binary(gt)?, grid);
    if sp.is_empty() && sg.is_empty() {
        return Ok(1.0);
    }
    if sp.is_empty() || sg.is_empty() {
        return Ok(0.0);
    }
    let t2 = tau * tau;
    let close = |d: Vec<f64>| d.into_iter().filter(|&x| x <= t2).count();
    let n = close(directed_sq_distances(&sp, &sg, grid, [1.0; 3])) + close(directed_sq_distances(&sg, &sp, grid, [1.0; 3]));
    Ok(n as f64 / (sp.len() + sg.len()) as f64)
}

pub fn nsd1(pred: &Volume, gt: &Volume) -> Result<f64> {
    nsd(pred, gt, 1.0)
}

/// Foreground recall; `None` for an empty ground truth.
pub fn binary_recall(pred: &Volume, gt: &Volume) -> Result<Option<f64>> {
    pred.same_dims(gt)?;
    let (p, g) = (pred.as_labels()?, gt.as_labels()?);
    let gt_n = g.iter().filter(|&&v| v != 0).count();
    if gt_n == 0 {
        return Ok(None);
    }
    let tp = p.iter().zip(g).filter(|(&a, &b)| a != 0 && b != 0).count();
    Ok(Some(tp as f64 / gt_n as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub gt_instance: u16,
    pub pred_instance: u16,
    pub iou: f64,
}

/// Detected pairs plus instance counts on both sides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    pub pairs: Vec<MatchPair>,
    pub n_gt: usize,
    pub n_pred: usize,
}

impl Matching {
    /// Detected fraction of ground-truth instances; `None` without any.
    pub fn detection_accuracy(&self) -> Option<f64> {
        (self.n_gt > 0).then(|| self.pairs.len() as f64 / self.n_gt as f64)
    }
}

/// IoU of every overlapping `(gt, pred)` instance pair.
pub fn instance_ious(pred: &InstanceMap, gt: &InstanceMap) -> Result<Vec<MatchPair>> {
    pred.labels().same_dims(gt.labels())?;
    let mut inter: HashMap<(u16, u16), usize> = HashMap::new();
    for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
        if p != 0 && g != 0 {
            *inter.entry((g, p)).or_default() += 1;
        }
    }
    let mut out: Vec<MatchPair> = inter
        .into_iter()
        .map(|((g, p), i)| {
            let union = gt.records()[g as usize - 1].voxel_count + pred.records()[p as usize - 1].voxel_count - i;
            MatchPair { gt_instance: g, pred_instance: p, iou: i as f64 / union as f64 }
        })
        .collect();
    out.sort_by(|a, b| (a.gt_instance, a.pred_instance).cmp(&(b.gt_instance, b.pred_instance)));
    Ok(out)
}

/// Greedy one-to-one matching by descending IoU (ties: lower gt id, then
/// lower pred id); pairs with IoU strictly above `iou_thresh` are detections.
pub fn detection_match(pred: &InstanceMap, gt: &InstanceMap, iou_thresh: f64) -> Result<Matching> {
    let mut cands = instance_ious(pred, gt)?;
    cands.sort_by(|a, b| {
        b.iou.total_cmp(&a.iou).then(a.gt_instance.cmp(&b.gt_instance)).then(a.pred_instance.cmp(&b.pred_instance))
    });
    let mut used_g = vec![false; gt.count() + 1];
    let mut used_p = vec![false; pred.count() + 1];
    let mut pairs = Vec::new();
    for c in cands {
        if c.iou <= iou_thresh {
            break;
        }
        if used_g[c.gt_instance as usize] || used_p[c.pred_instance as usize] {
            continue;
        }
        used_g[c.gt_instance as usize] = true;
        used_p[c.pred_instance as usize] = true;
        pairs.push(c);
    }
    pairs.sort_by_key(|p| p.gt_instance);
    Ok(Matching { pairs, n_gt: gt.count(), n_pred: pred.count() })
}

/// Micro F1 of instance classification. A detected pair with equal assigned
/// classes is a true positive; a mislabeled pair counts as both a false
/// positive and a false negative; unmatched instances are false positives
/// (pred) or false negatives (gt). 1 when there is nothing to score.
pub fn classification_f1(m: &Matching, pred: &InstanceMap, gt: &InstanceMap) -> f64 {
    let mut tp = 0usize;
    let mut wrong = 0usize;
    for p in &m.pairs {
        let cg = gt.records()[p.gt_instance as usize - 1].assigned_class;
        let cp = pred.records()[p.pred_instance as usize - 1].assigned_class;
        if cg.is_some() && cg == cp {
            tp += 1;
        } else {
            wrong += 1;
        }
    }
    let fp = wrong + (m.n_pred - m.pairs.len());
    let fn_ = wrong + (m.n_gt - m.pairs.len());
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        1.0
    } else {
        2.0 * tp as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dsc: f64,
    pub precision: f64,
    pub recall: f64,
    pub hd_mm: Option<f64>,
    pub in_gt: bool,
    pub in_pred: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dsc_mean: Option<f64>,
    pub pr_mean: Option<f64>,
    pub rc_mean: Option<f64>,
    pub hd_mean_mm: Option<f64>,
    pub nsd1: f64,
    pub rc_b: Option<f64>,
    pub da: Option<f64>,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema: u32,
    pub per_class: BTreeMap<u16, ClassMetrics>,
    pub aggregate: Aggregate,
    pub matching: Matching,
    /// Ground-truth classes without a Hausdorff distance (absent from the prediction).
    pub missing_hd: Vec<u16>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: MetricReport = serde_json::from_str(text)?;
        if r.schema != REPORT_SCHEMA {
            return Err(Error::Unsupported(format!("report schema {}", r.schema)));
        }
        Ok(r)
    }
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Full report. Instance maps default to one instance per class of the
/// corresponding label volume. Class means run over tooth classes present in
/// the ground truth, in class order.
pub fn evaluate(
    pred_labels: &Volume,
    gt_labels: &Volume,
    pred_instances: Option<&InstanceMap>,
    gt_instances: Option<&InstanceMap>,
) -> Result<MetricReport> {
    pred_labels.same_dims(gt_labels)?;
    let (p, g) = (pred_labels.as_labels()?, gt_labels.as_labels()?);
    for (v, name) in [(p, "prediction"), (g, "ground truth")] {
        if let Some((i, &c)) = v.iter().enumerate().find(|(_, &c)| c > MAX_TOOTH_CLASS) {
            log::error!("{name} label {c} out of range");
            return Err(Error::LabelOutOfRange { value: c, index: i });
        }
    }
    let mut present = [(false, false); MAX_TOOTH_CLASS as usize + 1];
    for (&a, &b) in p.iter().zip(g) {
        present[a as usize].0 = true;
        present[b as usize].1 = true;
    }
    let classes: Vec<u16> = (1..=MAX_TOOTH_CLASS).filter(|&c| present[c as usize].0 || present[c as usize].1).collect();
    let per_class: Vec<(u16, ClassMetrics)> = classes
        .par_iter()
        .map(|&c| {
            let s = dice_pr_rc_slices(p, g, c).expect("class present on one side");
            let hd = hausdorff_mm(pred_labels, gt_labels, c)?;
            Ok((
                c,
                ClassMetrics {
                    dsc: s.dsc,
                    precision: s.precision,
                    recall: s.recall,
                    hd_mm: hd,
                    in_pred: present[c as usize].0,
                    in_gt: present[c as usize].1,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let per_class: BTreeMap<u16, ClassMetrics> = per_class.into_iter().collect();
    let gt_classes = || per_class.values().filter(|m| m.in_gt);

    let owned_p;
    let pi = match pred_instances {
        Some(m) => m,
        None => {
            owned_p = InstanceMap::from_class_labels(pred_labels)?;
            &owned_p
        }
    };
    let owned_g;
    let gi = match gt_instances {
        Some(m) => m,
        None => {
            owned_g = InstanceMap::from_class_labels(gt_labels)?;
            &owned_g
        }
    };
    let matching = detection_match(pi, gi, DEFAULT_IOU_THRESHOLD)?;
    let aggregate = Aggregate {
        dsc_mean: mean(gt_classes().map(|m| m.dsc)),
        pr_mean: mean(gt_classes().map(|m| m.precision)),
        rc_mean: mean(gt_classes().map(|m| m.recall)),
        hd_mean_mm: mean(gt_classes().filter_map(|m| m.hd_mm)),
        nsd1: nsd1(pred_labels, gt_labels)?,
        rc_b: binary_recall(pred_labels, gt_labels)?,
        da: matching.detection_accuracy(),
        f1: classification_f1(&matching, pi, gi),
    };
    let missing_hd = per_class.iter().filter(|(_, m)| m.in_gt && m.hd_mm.is_none()).map(|(&c, _)| c).collect();
    Ok(MetricReport { schema: REPORT_SCHEMA, per_class, aggregate, matching, missing_hd })
}

/// Mean of each aggregate field over scans, skipping missing values.
pub fn average_aggregates(reports: &[MetricReport]) -> Option<Aggregate> {
    if reports.is_empty() {
        return None;
    }
    let a = || reports.iter().map(|r| &r.aggregate);
    Some(Aggregate {
        dsc_mean: mean(a().filter_map(|x| x.dsc_mean)),
        pr_mean: mean(a().filter_map(|x| x.pr_mean)),
        rc_mean: mean(a().filter_map(|x| x.rc_mean)),
        hd_mean_mm: mean(a().filter_map(|x| x.hd_mean_mm)),
        nsd1: mean(a().map(|x| x.nsd1)).expect("non-empty"),
        rc_b: mean(a().filter_map(|x| x.rc_b)),
        da: mean(a().filter_map(|x| x.da)),
        f1: mean(a().map(|x| x.f1)).expect("non-empty"),
    })
}

//! Synthetic dentitions with exact ground truth.
//!
//! Teeth sit on two parabolic arches in the axial plane, the upper arch above
//! the lower one. Patient right is +x, anterior +y and superior +z, so
//! quadrant 1 (upper right) occupies the +x, +z side of the volume.
//! Everything is derived from the `PhantomSpec` and its seed: per-tooth jitter comes
//! from a Xoshiro256++ stream keyed by `(seed, tooth)`, corruption noise from
//! a single stream keyed by the seed.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{descent_targets, instance_edt, DirectionField, EnergyField, EnergySource};
use crate::geometry::quadrant_to_universal;
use crate::grid::{Connectivity, Grid};
use crate::instance::InstanceMap;
use crate::volume::{Payload, Volume, NUM_CLASSES};

pub const MIN_MARGIN: usize = 2;
const SEPARATED_GAP: f64 = 3.0;
const TOUCHING_OVERLAP: f64 = 1.5;
/// Vertical clearance between upper and lower crowns before jitter.
const ARCH_GAP: f64 = 4.0;
const ELLIPSOID_STRETCH: f64 = 1.3;
const ROOT_LENGTH: f64 = 1.6;
const ROOT_BASE: f64 = 0.45;
const ROOT_OFFSET: f64 = 0.45;
const ROOT_APEX_RADIUS: f64 = 0.5;
/// Arch curvature: `y = −(ARCH_SHAPE / L) x²` for a quadrant arc of length `L`.
const ARCH_SHAPE: f64 = 0.8;
const JITTER_KEY: u64 = 0x9E37_79B9_7F4A_7C15;
/// Noise level at which the full pipeline is expected to stay near perfect
/// (detection exact, Dice at least 0.99).
pub const SMALL_NOISE_SIGMA: f64 = 0.1;
const NOISE_KEY: u64 = 0xD1B5_4A32_D192_ED03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToothShape {
    Sphere,
    Ellipsoid,
    TwoRoot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Contact {
    Separated,
    Touching,
}

fn default_spacing() -> f64 {
    0.4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub teeth_per_quadrant: u8,
    pub tooth_shape: ToothShape,
    pub contact: Contact,
    pub jitter_seed: u64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "default_spacing")]
    pub spacing_mm: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [96, 72, 64],
            teeth_per_quadrant: 4,
            tooth_shape: ToothShape::Sphere,
            contact: Contact::Separated,
            jitter_seed: 0,
            noise_sigma: 0.0,
            spacing_mm: 0.4,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.teeth_per_quadrant) {
            return Err(Error::Phantom(format!("teeth_per_quadrant must be 1..=8, got {}", self.teeth_per_quadrant)));
        }
        if self.dims.contains(&0) {
            return Err(Error::Phantom("dims must be positive".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Phantom(format!("noise_sigma must be ≥ 0, got {}", self.noise_sigma)));
        }
        if !(self.spacing_mm.is_finite() && self.spacing_mm > 0.0) {
            return Err(Error::Phantom("spacing_mm must be positive".into()));
        }
        Ok(())
    }

    fn gap(&self) -> f64 {
        match self.contact {
            Contact::Separated => SEPARATED_GAP,
            Contact::Touching => -TOUCHING_OVERLAP,
        }
    }
}

/// Crown radius in voxels by position (1 = central incisor).
pub fn crown_radius(position: u8) -> f64 {
    if position >= 6 {
        5.0
    } else {
        4.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToothPlacement {
    pub class: u16,
    pub quadrant: u8,
    pub position: u8,
    /// Crown centre in voxel coordinates.
    pub center: [f64; 3],
    pub radius: f64,
    /// Unit tangent of the arch at the tooth, in the axial plane.
    pub tangent: [f64; 2],
    /// +1 for upper teeth (roots point up), −1 for lower teeth.
    pub root_sign: f64,
}

impl ToothPlacement {
    fn half_height(&self, shape: ToothShape) -> f64 {
        match shape {
            ToothShape::Sphere => self.radius,
            _ => ELLIPSOID_STRETCH * self.radius,
        }
    }

    /// Voxel-space bounding box `[lo, hi]` (inclusive, possibly outside the grid).
    fn bounds(&self, shape: ToothShape) -> ([f64; 3], [f64; 3]) {
        let r = self.radius;
        let hz = self.half_height(shape);
        let (up, down) = match shape {
            ToothShape::TwoRoot => (hz + ROOT_LENGTH * r, hz),
            _ => (hz, hz),
        };
        let (zlo, zhi) = if self.root_sign > 0.0 { (down, up) } else { (up, down) };
        let c = self.center;
        ([c[0] - r, c[1] - r, c[2] - zlo], [c[0] + r, c[1] + r, c[2] + zhi])
    }

    /// Depth score of voxel `v`: ≤ 0 inside, more negative deeper.
    fn score(&self, shape: ToothShape, v: [f64; 3]) -> f64 {
        let r = self.radius;
        let d = [v[0] - self.center[0], v[1] - self.center[1], v[2] - self.center[2]];
        let crown = match shape {
            ToothShape::Sphere => (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() - r,
            _ => {
                let dz = d[2] / ELLIPSOID_STRETCH;
                (d[0] * d[0] + d[1] * d[1] + dz * dz).sqrt() - r
            }
        };
        if shape != ToothShape::TwoRoot {
            return crown;
        }
        let len = ELLIPSOID_STRETCH * r + ROOT_LENGTH * r;
        let h = d[2] * self.root_sign;
        if !(0.0..=len).contains(&h) {
            return crown;
        }
        let t = h / len;
        let radius = ROOT_BASE * r * (1.0 - t) + ROOT_APEX_RADIUS * t;
        let mut best = crown;
        for side in [-1.0, 1.0] {
            let off = side * ROOT_OFFSET * r;
            let dx = d[0] - off * self.tangent[0];
            let dy = d[1] - off * self.tangent[1];
            best = best.min((dx * dx + dy * dy).sqrt() - radius);
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub gt_labels: Volume,
    pub gt_instances: InstanceMap,
    pub teeth: Vec<ToothPlacement>,
}

impl Phantom {
    /// Ground-truth energy and directions.
    pub fn targets(&self) -> (EnergyField, DirectionField) {
        descent_targets(&self.gt_instances)
    }
}

/// Centres along one side of a parabola `y = −a x²`, starting at the midline
/// and walking outwards. Each centre is found by marching along the curve
/// until its chord distance to the previous centre reaches the target.
fn march(a: f64, radii: &[f64], gap: f64) -> Vec<([f64; 2], [f64; 2])> {
    const STEP: f64 = 1e-3;
    let mut out = Vec::with_capacity(radii.len());
    let mut x = (2.0 * radii[0] + gap) / 2.0;
    let mut prev = [x, -a * x * x];
    let tangent = |x: f64| {
        let dy = -2.0 * a * x;
        let n = (1.0 + dy * dy).sqrt();
        [1.0 / n, dy / n]
    };
    out.push((prev, tangent(x)));
    for w in radii.windows(2) {
        let target = w[0] + w[1] + gap;
        loop {
            x += STEP;
            let p = [x, -a * x * x];
            let d = ((p[0] - prev[0]).powi(2) + (p[1] - prev[1]).powi(2)).sqrt();
            if d >= target {
                prev = p;
                break;
            }
        }
        out.push((prev, tangent(x)));
    }
    out
}

fn tooth_rng(seed: u64, class: u16) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed ^ (class as u64).wrapping_mul(JITTER_KEY))
}

/// Tooth centres and sizes for a spec, checked against the volume margins.
pub fn layout(spec: &PhantomSpec) -> Result<Vec<ToothPlacement>> {
    spec.validate()?;
    let m = spec.teeth_per_quadrant;
    let radii: Vec<f64> = (1..=m).map(crown_radius).collect();
    let gap = spec.gap();
    let arc: f64 = radii.iter().map(|r| 2.0 * r).sum::<f64>() + gap * m as f64;
    let a = ARCH_SHAPE / arc;
    let side = march(a, &radii, gap);

    let [nx, ny, nz] = spec.dims.map(|d| d as f64);
    let cx = (nx - 1.0) / 2.0;
    let y_front = side.iter().map(|(p, _)| p[1]).fold(f64::MIN, f64::max) + radii[0];
    let y_back = side.iter().zip(&radii).map(|((p, _), r)| p[1] - r).fold(f64::MAX, f64::min);
    let y_shift = (ny - 1.0) / 2.0 - (y_front + y_back) / 2.0;
    let max_hz = radii.iter().fold(0.0f64, |h, r| {
        h.max(if spec.tooth_shape == ToothShape::Sphere { *r } else { ELLIPSOID_STRETCH * r })
    });
    let cz = (nz - 1.0) / 2.0;
    let arch_dz = max_hz + ARCH_GAP / 2.0;

    let mut teeth = Vec::new();
    for q in 1..=4u8 {
        let sx = if q == 1 || q == 4 { 1.0 } else { -1.0 };
        let upper = q <= 2;
        for (k, ((p, t), &r)) in side.iter().zip(&radii).enumerate() {
            let pos = k as u8 + 1;
            let class = quadrant_to_universal(q, pos).expect("valid key");
            let jitter = tooth_rng(spec.jitter_seed, class).random_range(-1i32..=1) as f64;
            let z = if upper { cz + arch_dz } else { cz - arch_dz } + jitter;
            teeth.push(ToothPlacement {
                class,
                quadrant: q,
                position: pos,
                center: [cx + sx * p[0], p[1] + y_shift, z],
                radius: r,
                tangent: [sx * t[0], t[1]],
                root_sign: if upper { 1.0 } else { -1.0 },
            });
        }
    }
    teeth.sort_by_key(|t| t.class);

    let lo_ok = MIN_MARGIN as f64;
    for t in &teeth {
        let (lo, hi) = t.bounds(spec.tooth_shape);
        for ax in 0..3 {
            let hi_ok = spec.dims[ax] as f64 - 1.0 - MIN_MARGIN as f64;
            if lo[ax] < lo_ok || hi[ax] > hi_ok {
                return Err(Error::Phantom(format!(
                    "tooth {} spans [{:.1}, {:.1}] on axis {ax}, which violates the {MIN_MARGIN}-voxel margin of dims {:?}",
                    t.class, lo[ax], hi[ax], spec.dims
                )));
            }
        }
    }
    Ok(teeth)
}

/// Rasterizes the phantom. Voxels claimed by several teeth go to the one
/// they lie deepest in (lower class on exact ties).
pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    let teeth = layout(spec)?;
    let grid = Grid::new(spec.dims);
    let mut labels = vec![0u16; grid.len()];
    let mut depth = vec![f64::INFINITY; grid.len()];
    for t in &teeth {
        let (lo, hi) = t.bounds(spec.tooth_shape);
        let lo = lo.map(|v| v.floor().max(0.0) as usize);
        let hi: [usize; 3] = std::array::from_fn(|a| (hi[a].ceil() as usize).min(spec.dims[a] - 1));
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let s = t.score(spec.tooth_shape, [x as f64, y as f64, z as f64]);
                    let i = grid.index(x, y, z);
                    if s <= 0.0 && s < depth[i] {
                        depth[i] = s;
                        labels[i] = t.class;
                    }
                }
            }
        }
    }
    carve_contacts(&mut labels, spec)?;
    let gt_labels = Volume::labels(spec.dims, [spec.spacing_mm; 3], labels)?;
    let mut gt_instances = InstanceMap::from_class_labels(&gt_labels)?;
    let ids = gt_instances.ids().to_vec();
    for rec in gt_instances.records_mut() {
        let t = teeth.iter().find(|t| Some(t.class) == rec.assigned_class).expect("class placed");
        let c = t.center.map(|v| v.round() as usize);
        let i = grid.index(c[0], c[1], c[2]);
        if ids[i] == rec.instance_id {
            rec.seed_voxels = vec![i];
        }
    }
    gt_instances.validate()?;
    Ok(Phantom { gt_labels, gt_instances, teeth })
}

/// Clears contact voxels that have no deeper 6-neighbour in their own tooth,
/// repeating until none are left. Such voxels sit on an energy plateau shared
/// with the neighbouring tooth, so no flood from the cores can tell them
/// apart; clearing them leaves small embrasures around each contact.
fn carve_contacts(labels: &mut [u16], spec: &PhantomSpec) -> Result<()> {
    let grid = Grid::new(spec.dims);
    loop {
        let vol = Volume::labels(spec.dims, [spec.spacing_mm; 3], labels.to_vec())?;
        let energy = instance_edt(&InstanceMap::from_class_labels(&vol)?);
        let e = energy.values();
        let ambiguous: Vec<usize> = (0..labels.len())
            .into_par_iter()
            .filter(|&i| {
                let l = labels[i];
                if l == 0 {
                    return false;
                }
                let mut contact = false;
                let mut deeper = false;
                for j in grid.neighbors(i, Connectivity::Six) {
                    if labels[j] == l {
                        deeper |= e[j] > 1.0;
                    } else if labels[j] != 0 {
                        contact = true;
                    }
                }
                contact && !deeper
            })
            .collect();
        if ambiguous.is_empty() {
            return Ok(());
        }
        for i in ambiguous {
            labels[i] = 0;
        }
    }
}

/// Simulated network outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Corrupted {
    pub pred_probs: Volume,
    pub pred_energy: EnergyField,
    pub pred_dir: Volume,
}

/// Noisy stand-ins for model predictions. With `sigma = 0` the outputs are
/// the exact ground-truth encodings (one-hot, EDT energy, EDT directions).
/// Otherwise class logits `onehot + N(0, σ)` go through a softmax at
/// temperature σ, energies get additive `N(0, σ)` noise clamped at zero, and
/// tooth directions get `N(0, σ)` per component before re-normalization.
pub fn corrupt(ph: &Phantom, sigma: f64, seed: u64) -> Result<Corrupted> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Phantom(format!("noise sigma must be ≥ 0, got {sigma}")));
    }
    let (energy, dirs) = ph.targets();
    let labels = ph.gt_labels.as_labels()?;
    let n = labels.len();
    if sigma == 0.0 {
        return Ok(Corrupted {
            pred_probs: crate::volume::one_hot(&ph.gt_labels)?,
            pred_energy: EnergyField { energy: energy.energy, source: EnergySource::ModelPrediction },
            pred_dir: dirs.directions,
        });
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ NOISE_KEY);
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Phantom(e.to_string()))?;

    let mut probs = vec![0.0f32; NUM_CLASSES * n];
    let mut logits = [0.0f64; NUM_CLASSES];
    for (i, &l) in labels.iter().enumerate() {
        for (c, z) in logits.iter_mut().enumerate() {
            let onehot = if c == l as usize { 1.0 } else { 0.0 };
            *z = (onehot + normal.sample(&mut rng)) / sigma;
        }
        let mx = logits.iter().copied().fold(f64::MIN, f64::max);
        let s: f64 = logits.iter().map(|z| (z - mx).exp()).sum();
        for (c, z) in logits.iter().enumerate() {
            probs[c * n + i] = ((z - mx).exp() / s) as f32;
        }
    }

    let e: Vec<f32> = energy.values().iter().map(|&v| (v as f64 + normal.sample(&mut rng)).max(0.0) as f32).collect();

    let gt_dirs = dirs.directions.as_vector3()?;
    let mut d = Vec::with_capacity(n);
    for (i, u) in gt_dirs.iter().enumerate() {
        if labels[i] == 0 {
            d.push([0.0f32; 3]);
            continue;
        }
        let mut v = [0.0f64; 3];
        loop {
            for (k, vk) in v.iter_mut().enumerate() {
                *vk = u[k] as f64 + normal.sample(&mut rng);
            }
            let m = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if m > 1e-12 {
                d.push([(v[0] / m) as f32, (v[1] / m) as f32, (v[2] / m) as f32]);
                break;
            }
        }
    }

    let like = &ph.gt_labels;
    Ok(Corrupted {
        pred_probs: Volume::prob_stack(like.dims(), like.spacing(), NUM_CLASSES, probs)?,
        pred_energy: EnergyField::prediction(like.with_payload(Payload::Scalar(e))?)?,
        pred_dir: like.with_payload(Payload::Vector3(d))?,
    })
}

//! Watershed supervision targets: per-instance exact distance transform and
//! Sobel gradient directions.
//!
//! Distances are in voxel units. A voxel's energy is its Euclidean distance
//! to the nearest voxel outside its own instance, where everything beyond the
//! grid counts as outside.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::instance::InstanceMap;
use crate::volume::{Payload, Volume};

/// Gradient magnitudes at or below this get the zero direction.
pub const DIRECTION_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnergySource {
    GroundTruthEdt,
    ModelPrediction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyField {
    pub energy: Volume,
    pub source: EnergySource,
}

impl EnergyField {
    pub fn prediction(energy: Volume) -> Result<Self> {
        energy.as_scalar()?;
        Ok(EnergyField { energy, source: EnergySource::ModelPrediction })
    }

    pub fn values(&self) -> &[f32] {
        self.energy.as_scalar().expect("energy is scalar")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionField {
    pub directions: Volume,
    pub magnitude: Volume,
}

pub(crate) const INF: f64 = 1e20;

/// 1D squared distance transform of sampled function `f` with sample spacing
/// `w` (Felzenszwalb & Huttenlocher lower envelope of parabolas). `v` and `z`
/// are scratch.
fn dt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64], w: f64) {
    let w2 = w * w;
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -INF;
    z[1] = INF;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + w2 * (q * q) as f64) - (f[p] + w2 * (p * p) as f64)) / (2.0 * w2 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = INF;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = w2 * d * d + f[v[k]];
    }
}

/// Squared EDT in place on a dense box of size `d` (x fastest), where zeros
/// mark feature voxels and `INF` everything else. `w` is the voxel spacing.
pub(crate) fn squared_edt_box(buf: &mut [f64], d: [usize; 3], w: [f64; 3]) {
    let maxn = d[0].max(d[1]).max(d[2]);
    let mut f = vec![0.0; maxn];
    let mut out = vec![0.0; maxn];
    let mut v = vec![0usize; maxn];
    let mut z = vec![0.0; maxn + 1];
    let stride = [1, d[0], d[0] * d[1]];
    for axis in 0..3 {
        let n = d[axis];
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for j in 0..d[b] {
            for i in 0..d[a] {
                let base = i * stride[a] + j * stride[b];
                for q in 0..n {
                    f[q] = buf[base + q * stride[axis]];
                }
                dt_1d(&f[..n], &mut out[..n], &mut v[..n], &mut z[..n + 1], w[axis]);
                for q in 0..n {
                    buf[base + q * stride[axis]] = out[q];
                }
            }
        }
    }
}

/// `(voxel index, distance)` pairs for one instance's voxels.
fn edt_of_instance(dims: [usize; 3], voxels: &[usize]) -> Vec<(usize, f32)> {
    let nx = dims[0];
    let nxy = dims[0] * dims[1];
    let mut lo = [isize::MAX; 3];
    let mut hi = [isize::MIN; 3];
    for &i in voxels {
        let c = [(i % nx) as isize, ((i / nx) % dims[1]) as isize, (i / nxy) as isize];
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    // One voxel of padding; padded voxels may lie outside the grid, which
    // is treated as outside the instance anyway.
    let bd: [usize; 3] = std::array::from_fn(|a| (hi[a] - lo[a] + 3) as usize);
    let mut buf = vec![0.0; bd[0] * bd[1] * bd[2]];
    let local = |i: usize| {
        let x = (i % nx) as isize - lo[0] + 1;
        let y = ((i / nx) % dims[1]) as isize - lo[1] + 1;
        let z = (i / nxy) as isize - lo[2] + 1;
        x as usize + bd[0] * (y as usize + bd[1] * z as usize)
    };
    for &i in voxels {
        buf[local(i)] = INF;
    }
    squared_edt_box(&mut buf, bd, [1.0; 3]);
    voxels.iter().map(|&i| (i, (buf[local(i)] as f32).sqrt())).collect()
}

/// Exact per-instance Euclidean distance transform. Background is 0.
pub fn instance_edt(instances: &InstanceMap) -> EnergyField {
    let labels = instances.labels();
    let ids = instances.ids();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); instances.count()];
    for (i, &id) in ids.iter().enumerate() {
        if id > 0 {
            members[id as usize - 1].push(i);
        }
    }
    let dims = labels.dims();
    let parts: Vec<Vec<(usize, f32)>> =
        members.par_iter().filter(|m| !m.is_empty()).map(|m| edt_of_instance(dims, m)).collect();
    let mut energy = vec![0.0f32; labels.len()];
    for (i, d) in parts.into_iter().flatten() {
        energy[i] = d;
    }
    let energy = labels.with_payload(Payload::Scalar(energy)).expect("same grid").with_normalized(false);
    EnergyField { energy, source: EnergySource::GroundTruthEdt }
}

/// One separable 3-tap pass along `axis` with replicate padding:
/// `out[i] = k[0]·in[i−1] + k[1]·in[i] + k[2]·in[i+1]`.
fn pass_axis(input: &[f64], dims: [usize; 3], axis: usize, k: [f64; 3]) -> Vec<f64> {
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let n = dims[axis];
    let mut out = vec![0.0; input.len()];
    out.par_iter_mut().enumerate().for_each(|(i, o)| {
        let q = (i / stride) % n;
        let prev = if q == 0 { i } else { i - stride };
        let next = if q + 1 == n { i } else { i + stride };
        *o = k[0] * input[prev] + k[1] * input[i] + k[2] * input[next];
    });
    out
}

const DERIV: [f64; 3] = [-1.0, 0.0, 1.0];
const SMOOTH: [f64; 3] = [1.0, 2.0, 1.0];

/// Raw 3³ Sobel-Feldman response per axis: central difference along the
/// axis, `[1, 2, 1]` smoothing along the other two. A unit ramp gives 32 in
/// the interior.
pub fn sobel_raw(e: &[f64], dims: [usize; 3]) -> [Vec<f64>; 3] {
    std::array::from_fn(|d| {
        let mut g = pass_axis(e, dims, d, DERIV);
        for a in (0..3).filter(|&a| a != d) {
            g = pass_axis(&g, dims, a, SMOOTH);
        }
        g
    })
}

/// Unit direction and magnitude of the Sobel gradient of `g`.
fn normalize(g: &[Vec<f64>; 3]) -> (Vec<[f32; 3]>, Vec<f32>) {
    (0..g[0].len())
        .into_par_iter()
        .map(|i| {
            let v = [g[0][i], g[1][i], g[2][i]];
            let m = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let u = if m > DIRECTION_EPS {
                [(v[0] / m) as f32, (v[1] / m) as f32, (v[2] / m) as f32]
            } else {
                [0.0; 3]
            };
            (u, m as f32)
        })
        .unzip()
}

pub fn sobel_gradient(e: &EnergyField) -> DirectionField {
    let vol = &e.energy;
    let data: Vec<f64> = e.values().iter().map(|&x| x as f64).collect();
    let g = sobel_raw(&data, vol.dims());
    let (dirs, mag) = normalize(&g);
    DirectionField {
        directions: vol.with_payload(Payload::Vector3(dirs)).expect("same grid"),
        magnitude: vol.with_payload(Payload::Scalar(mag)).expect("same grid"),
    }
}

/// EDT energy plus its gradient directions, with directions zeroed outside
/// the instances.
pub fn descent_targets(instances: &InstanceMap) -> (EnergyField, DirectionField) {
    let energy = instance_edt(instances);
    let mut dirs = sobel_gradient(&energy);
    let ids = instances.ids();
    if let Payload::Vector3(v) = dirs.directions.payload() {
        let masked: Vec<[f32; 3]> = v.iter().zip(ids).map(|(u, &id)| if id == 0 { [0.0; 3] } else { *u }).collect();
        dirs.directions = dirs.directions.with_payload(Payload::Vector3(masked)).expect("same grid");
    }
    (energy, dirs)
}

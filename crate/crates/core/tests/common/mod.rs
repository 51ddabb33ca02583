//! Brute-force oracles and random fixtures shared by the integration tests
//! and the acceptance harness. Everything here is written from definitions,
//! without calling the library code it checks.

#![allow(dead_code)]

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use toothseg::geometry::PenaltyMatrix;
use toothseg::NUM_CLASSES;

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn xyz(i: usize, d: [usize; 3]) -> [i64; 3] {
    [(i % d[0]) as i64, ((i / d[0]) % d[1]) as i64, (i / (d[0] * d[1])) as i64]
}

pub fn idx(c: [i64; 3], d: [usize; 3]) -> Option<usize> {
    if (0..3).all(|a| c[a] >= 0 && (c[a] as usize) < d[a]) {
        Some(c[0] as usize + d[0] * (c[1] as usize + d[1] * c[2] as usize))
    } else {
        None
    }
}

pub fn d2(a: [i64; 3], b: [i64; 3]) -> i64 {
    (0..3).map(|k| (a[k] - b[k]).pow(2)).sum()
}

/// Face neighbours, in or out of the grid.
pub fn face(c: [i64; 3]) -> [[i64; 3]; 6] {
    [
        [c[0] - 1, c[1], c[2]],
        [c[0] + 1, c[1], c[2]],
        [c[0], c[1] - 1, c[2]],
        [c[0], c[1] + 1, c[2]],
        [c[0], c[1], c[2] - 1],
        [c[0], c[1], c[2] + 1],
    ]
}

pub fn ring(c: [i64; 3]) -> Vec<[i64; 3]> {
    let mut v = Vec::with_capacity(26);
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                if (dx, dy, dz) != (0, 0, 0) {
                    v.push([c[0] + dx, c[1] + dy, c[2] + dz]);
                }
            }
        }
    }
    v
}

pub fn random_dims(r: &mut StdRng, max: usize) -> [usize; 3] {
    [r.random_range(1..=max), r.random_range(1..=max), r.random_range(1..=max)]
}

/// Labels `0..=k` made of random overlapping boxes plus salt noise.
pub fn random_blobs(r: &mut StdRng, d: [usize; 3], k: u16) -> Vec<u16> {
    let n = d[0] * d[1] * d[2];
    let mut l = vec![0u16; n];
    for id in 1..=k {
        let lo: [usize; 3] = std::array::from_fn(|a| r.random_range(0..d[a]));
        let hi: [usize; 3] = std::array::from_fn(|a| (lo[a] + r.random_range(0..=d[a] / 2 + 1)).min(d[a] - 1));
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    l[x + d[0] * (y + d[1] * z)] = id;
                }
            }
        }
    }
    for v in l.iter_mut() {
        if r.random_bool(0.05) {
            *v = r.random_range(0..=k);
        }
    }
    l
}

/// Distance from every voxel to the nearest voxel with a different label,
/// where anything beyond the grid counts as different. 0 on background.
pub fn brute_edt(l: &[u16], d: [usize; 3]) -> Vec<f32> {
    let n = l.len();
    (0..n)
        .map(|i| {
            if l[i] == 0 {
                return 0.0;
            }
            let c = xyz(i, d);
            let mut best = (0..3).map(|a| (c[a] + 1).min(d[a] as i64 - c[a]).pow(2)).min().unwrap();
            for j in 0..n {
                if l[j] != l[i] {
                    best = best.min(d2(c, xyz(j, d)));
                }
            }
            (best as f32).sqrt()
        })
        .collect()
}

/// Regional maxima of `e` inside `mask` with positive value: 26-connected
/// equal plateaus without a strictly higher neighbour in the mask.
pub fn brute_maxima(e: &[f32], mask: &[bool], d: [usize; 3]) -> Vec<(f32, Vec<usize>)> {
    let n = e.len();
    let mut plateau_of = vec![usize::MAX; n];
    let mut plateaus: Vec<Vec<usize>> = Vec::new();
    for s in 0..n {
        if !mask[s] || plateau_of[s] != usize::MAX {
            continue;
        }
        let id = plateaus.len();
        let mut members = vec![s];
        plateau_of[s] = id;
        let mut k = 0;
        while k < members.len() {
            let c = xyz(members[k], d);
            for nb in ring(c) {
                if let Some(j) = idx(nb, d) {
                    if mask[j] && e[j] == e[s] && plateau_of[j] == usize::MAX {
                        plateau_of[j] = id;
                        members.push(j);
                    }
                }
            }
            k += 1;
        }
        members.sort_unstable();
        plateaus.push(members);
    }
    plateaus
        .into_iter()
        .filter(|p| {
            let v = e[p[0]];
            v > 0.0
                && p.iter().all(|&i| {
                    ring(xyz(i, d)).into_iter().filter_map(|c| idx(c, d)).all(|j| !mask[j] || e[j] <= v)
                })
        })
        .map(|p| (e[p[0]], p))
        .collect()
}

/// Seed oracle: every maximum grows its `beta·peak` component by repeated
/// full sweeps; components reaching above their peak are dropped, the rest
/// are merged while any two overlap, filtered by size and sorted by
/// (peak desc, peak voxel asc). Returns `(voxels, peak, peak_voxel)`.
pub fn brute_seeds(e: &[f32], mask: &[bool], d: [usize; 3], beta: f64, min_voxels: usize) -> Vec<(Vec<usize>, f32, usize)> {
    let n = e.len();
    let mut comps: Vec<(Vec<bool>, f32, usize)> = Vec::new();
    for (p, plateau) in brute_maxima(e, mask, d) {
        let thr = (beta * p as f64) as f32;
        let mut inside = vec![false; n];
        for &i in &plateau {
            inside[i] = true;
        }
        loop {
            let mut changed = false;
            for i in 0..n {
                if inside[i] || !mask[i] || e[i] < thr {
                    continue;
                }
                if ring(xyz(i, d)).into_iter().filter_map(|c| idx(c, d)).any(|j| inside[j]) {
                    inside[i] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        if (0..n).all(|i| !inside[i] || e[i] <= p) {
            comps.push((inside, p, plateau[0]));
        }
    }
    loop {
        let mut merged = false;
        'outer: for a in 0..comps.len() {
            for b in a + 1..comps.len() {
                if (0..n).any(|i| comps[a].0[i] && comps[b].0[i]) {
                    let (vb, pb, sb) = comps.remove(b);
                    let ca = &mut comps[a];
                    for i in 0..n {
                        ca.0[i] |= vb[i];
                    }
                    if pb > ca.1 || (pb == ca.1 && sb < ca.2) {
                        ca.1 = pb;
                        ca.2 = sb;
                    }
                    merged = true;
                    break 'outer;
                }
            }
        }
        if !merged {
            break;
        }
    }
    let mut out: Vec<(Vec<usize>, f32, usize)> = comps
        .into_iter()
        .map(|(m, p, s)| ((0..n).filter(|&i| m[i]).collect::<Vec<_>>(), p, s))
        .filter(|(v, _, _)| v.len() >= min_voxels)
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.2.cmp(&b.2)));
    out
}

/// Priority flood by linear scan of the open list: repeatedly take the open
/// entry with the highest priority (then lowest id, then lowest voxel),
/// label its unlabeled face neighbours in the mask with its id and open them
/// at `min(energy, priority)`. Seed `k` carries id `k + 1`.
pub fn brute_flood(e: &[f32], mask: &[bool], seeds: &[Vec<usize>], d: [usize; 3]) -> Vec<u16> {
    let mut lab = vec![0u16; e.len()];
    let mut open: Vec<(f32, u16, usize)> = Vec::new();
    for (k, s) in seeds.iter().enumerate() {
        for &v in s {
            lab[v] = k as u16 + 1;
            open.push((e[v], k as u16 + 1, v));
        }
    }
    while !open.is_empty() {
        let mut best = 0;
        for k in 1..open.len() {
            let (a, b) = (open[k], open[best]);
            if a.0 > b.0 || (a.0 == b.0 && (a.1 < b.1 || (a.1 == b.1 && a.2 < b.2))) {
                best = k;
            }
        }
        let (p, id, v) = open.swap_remove(best);
        for c in face(xyz(v, d)) {
            if let Some(j) = idx(c, d) {
                if mask[j] && lab[j] == 0 {
                    lab[j] = id;
                    open.push((e[j].min(p), id, j));
                }
            }
        }
    }
    lab
}

/// Random energy: a few bumps with quantized heights so ties are common.
pub fn random_energy(r: &mut StdRng, d: [usize; 3]) -> Vec<f32> {
    let n = d[0] * d[1] * d[2];
    let bumps: Vec<([f64; 3], f64, f64)> = (0..r.random_range(1..=5))
        .map(|_| {
            let c = std::array::from_fn(|a| r.random_range(0.0..d[a] as f64));
            (c, r.random_range(1.0..6.0), r.random_range(1.0..4.0))
        })
        .collect();
    (0..n)
        .map(|i| {
            let c = xyz(i, d);
            let v = bumps
                .iter()
                .map(|(m, h, w)| {
                    let q: f64 = (0..3).map(|a| (c[a] as f64 - m[a]).powi(2)).sum();
                    h * (-q / (2.0 * w * w)).exp()
                })
                .fold(0.0, f64::max);
            let noise = r.random_range(0..3) as f64 * 0.25;
            ((v + noise) * 4.0).round() as f32 / 4.0
        })
        .collect()
}

/// Surface voxels: in the set with a face neighbour outside it or outside the grid.
pub fn brute_surface(m: &[bool], d: [usize; 3]) -> Vec<usize> {
    (0..m.len())
        .filter(|&i| m[i] && face(xyz(i, d)).iter().any(|&c| idx(c, d).is_none_or(|j| !m[j])))
        .collect()
}

/// Squared distances (voxel units) from each voxel of `a` to the nearest of `b`.
pub fn brute_directed(a: &[usize], b: &[usize], d: [usize; 3]) -> Vec<i64> {
    a.iter().map(|&i| b.iter().map(|&j| d2(xyz(i, d), xyz(j, d))).min().unwrap()).collect()
}

/// Symmetric Hausdorff in mm on an isotropic grid.
pub fn brute_hd(p: &[bool], g: &[bool], d: [usize; 3], spacing: f64) -> Option<f64> {
    let (sp, sg) = (brute_surface(p, d), brute_surface(g, d));
    if sp.is_empty() || sg.is_empty() {
        return None;
    }
    let m = brute_directed(&sp, &sg, d).into_iter().chain(brute_directed(&sg, &sp, d)).max().unwrap();
    Some((m as f64).sqrt() * spacing)
}

pub fn brute_nsd1(p: &[bool], g: &[bool], d: [usize; 3]) -> f64 {
    let (sp, sg) = (brute_surface(p, d), brute_surface(g, d));
    match (sp.is_empty(), sg.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let close = brute_directed(&sp, &sg, d).into_iter().chain(brute_directed(&sg, &sp, d)).filter(|&x| x <= 1).count();
    close as f64 / (sp.len() + sg.len()) as f64
}

/// Intersection over union of two id sets.
pub fn brute_iou(p: &[u16], g: &[u16], pid: u16, gid: u16) -> f64 {
    let inter = p.iter().zip(g).filter(|(&a, &b)| a == pid && b == gid).count();
    let uni = p.iter().zip(g).filter(|(&a, &b)| a == pid || b == gid).count();
    inter as f64 / uni as f64
}

/// Loss written as plain nested loops over voxels and class pairs.
pub fn scalar_geo_wdl(pred: &[f64], gt: &[f64], n: usize, pm: &PenaltyMatrix) -> f64 {
    let c = NUM_CLASSES;
    let mut w = vec![0.0; n];
    for (i, wi) in w.iter_mut().enumerate() {
        for l in 0..c {
            for lp in 0..c {
                *wi += gt[l * n + i] * pm.matrix[l][lp] * pred[lp * n + i];
            }
        }
    }
    let mut num = 0.0;
    for l in 1..c {
        for i in 0..n {
            num += gt[l * n + i] * (1.0 - w[i]);
        }
    }
    let mut den = 2.0 * num;
    for wi in &w {
        den += wi;
    }
    if den == 0.0 {
        0.0
    } else {
        1.0 - 2.0 * num / den
    }
}

/// Random planar probability stack over `n` voxels, each voxel a random
/// mixture concentrated on a few classes.
pub fn random_probs(r: &mut StdRng, n: usize) -> Vec<f64> {
    let mut p = vec![0.0; NUM_CLASSES * n];
    for i in 0..n {
        let k = r.random_range(1..=4);
        let mut s = 0.0;
        for _ in 0..k {
            let c = r.random_range(0..NUM_CLASSES);
            let v: f64 = r.random_range(0.01..1.0);
            p[c * n + i] += v;
            s += v;
        }
        for c in 0..NUM_CLASSES {
            p[c * n + i] /= s;
        }
    }
    p
}

pub fn one_hot_planar(labels: &[u16]) -> Vec<f64> {
    let n = labels.len();
    let mut p = vec![0.0; NUM_CLASSES * n];
    for (i, &l) in labels.iter().enumerate() {
        p[l as usize * n + i] = 1.0;
    }
    p
}

pub fn random_unit(r: &mut StdRng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
        let m = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if m > 0.1 && m <= 1.0 {
            return [v[0] / m, v[1] / m, v[2] / m];
        }
    }
}

/// Relative error with an absolute floor for values near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

//! Marker-based instance separation: binarize the semantic prediction, pick
//! seeds from energy peaks, flood from them, then vote a class per instance.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::EnergyField;
use crate::grid::{Connectivity, Grid};
use crate::instance::{InstanceMap, InstanceRecord};
use crate::volume::{class_map, Payload, Volume, MAX_TOOTH_CLASS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WatershedConfig {
    /// Seed threshold as a fraction of each regional maximum.
    pub beta: f64,
    pub seed_connectivity: Connectivity,
    pub flood_connectivity: Connectivity,
    pub min_seed_voxels: usize,
    pub min_instance_voxels: usize,
}

impl Default for WatershedConfig {
    fn default() -> Self {
        WatershedConfig {
            beta: 0.5,
            seed_connectivity: Connectivity::TwentySix,
            flood_connectivity: Connectivity::Six,
            min_seed_voxels: 8,
            min_instance_voxels: 50,
        }
    }
}

impl WatershedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidInput(format!("beta must lie in (0, 1), got {}", self.beta)));
        }
        if self.min_seed_voxels == 0 || self.min_instance_voxels == 0 {
            return Err(Error::InvalidInput("minimum seed and instance sizes must be positive".into()));
        }
        Ok(())
    }
}

/// 1 where the predicted class is a tooth, 0 elsewhere.
pub fn binarize_segmentation(seg: &Volume) -> Result<Volume> {
    let classes = class_map(seg)?;
    let mask = classes.into_iter().map(|c| u16::from(c != 0)).collect();
    seg.with_payload(Payload::Labels(mask))
}

/// One connected seed region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seed {
    /// Sorted linear voxel indices.
    pub voxels: Vec<usize>,
    /// Highest energy among the regional maxima merged into this seed.
    pub peak: f32,
    /// Smallest voxel index on the highest merged maximum.
    pub peak_voxel: usize,
}

fn mask_bits(mask: &Volume) -> Result<Vec<bool>> {
    Ok(mask.as_labels()?.iter().map(|&m| m != 0).collect())
}

fn energy_values<'a>(e: &'a EnergyField, mask: &Volume) -> Result<&'a [f32]> {
    e.energy.same_dims(mask)?;
    let v = e.values();
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("energy is not finite at voxel {i}")));
    }
    Ok(v)
}

/// Regional maxima: connected plateaus of equal energy inside the mask with
/// no strictly higher neighbour inside the mask. Returns `(value, sorted voxels)`.
pub fn regional_maxima(e: &[f32], inside: &[bool], grid: Grid, conn: Connectivity) -> Vec<(f32, Vec<usize>)> {
    let mut seen = vec![false; e.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..e.len() {
        if !inside[start] || seen[start] {
            continue;
        }
        let val = e[start];
        let mut plateau = vec![start];
        let mut is_max = true;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            for j in grid.neighbors(i, conn) {
                if !inside[j] {
                    continue;
                }
                if e[j] > val {
                    is_max = false;
                } else if e[j] == val && !seen[j] {
                    seen[j] = true;
                    plateau.push(j);
                    stack.push(j);
                }
            }
        }
        if is_max {
            plateau.sort_unstable();
            out.push((val, plateau));
        }
    }
    out
}

/// Connected component of `{inside ∧ e ≥ threshold}` containing `start`.
fn grow(e: &[f32], inside: &[bool], grid: Grid, conn: Connectivity, start: &[usize], threshold: f32) -> Vec<usize> {
    let mut seen = std::collections::HashSet::new();
    let mut stack: Vec<usize> = start.to_vec();
    seen.extend(start.iter().copied());
    while let Some(i) = stack.pop() {
        for j in grid.neighbors(i, conn) {
            if inside[j] && e[j] >= threshold && seen.insert(j) {
                stack.push(j);
            }
        }
    }
    let mut v: Vec<usize> = seen.into_iter().collect();
    v.sort_unstable();
    v
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Seeds from regional maxima thresholded at `beta` times their own peak.
/// Each maximum grows the connected set of mask voxels at or above that
/// threshold. Regions that reach energy above their own peak are dropped as
/// subsidiary peaks of a deeper basin; the rest are merged where they overlap
/// (equal peaks) and kept if they reach `min_seed_voxels`. Ordered by peak
/// descending, then peak voxel index ascending.
pub fn extract_seeds(e: &EnergyField, mask: &Volume, cfg: &WatershedConfig) -> Result<Vec<Seed>> {
    cfg.validate()?;
    let vals = energy_values(e, mask)?;
    let inside = mask_bits(mask)?;
    let grid = mask.grid();
    let maxima: Vec<(f32, Vec<usize>)> = regional_maxima(vals, &inside, grid, cfg.seed_connectivity)
        .into_iter()
        .filter(|(p, _)| *p > 0.0)
        .collect();
    // A maximum whose region climbs above its own peak belongs to a deeper
    // basin and is absorbed by it rather than unioned with it.
    let (maxima, regions): (Vec<_>, Vec<_>) = maxima
        .into_par_iter()
        .filter_map(|(p, plateau)| {
            let thr = (cfg.beta * p as f64) as f32;
            let region = grow(vals, &inside, grid, cfg.seed_connectivity, &plateau, thr);
            region.iter().all(|&v| vals[v] <= p).then_some(((p, plateau), region))
        })
        .unzip();

    let mut parent: Vec<usize> = (0..regions.len()).collect();
    let mut owner = vec![usize::MAX; vals.len()];
    for (r, region) in regions.iter().enumerate() {
        for &v in region {
            if owner[v] == usize::MAX {
                owner[v] = r;
            } else {
                let (a, b) = (find(&mut parent, owner[v]), find(&mut parent, r));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }

    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for r in 0..regions.len() {
        let root = find(&mut parent, r);
        groups.entry(root).or_default().push(r);
    }
    let mut seeds: Vec<Seed> = groups
        .into_values()
        .map(|members| {
            let mut voxels: Vec<usize> = members.iter().flat_map(|&r| regions[r].iter().copied()).collect();
            voxels.sort_unstable();
            voxels.dedup();
            let (peak, peak_voxel) = members
                .iter()
                .map(|&r| (maxima[r].0, maxima[r].1[0]))
                .min_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)))
                .expect("group is non-empty");
            Seed { voxels, peak, peak_voxel }
        })
        .filter(|s| s.voxels.len() >= cfg.min_seed_voxels)
        .collect();
    seeds.sort_by(|a, b| b.peak.total_cmp(&a.peak).then(a.peak_voxel.cmp(&b.peak_voxel)));
    Ok(seeds)
}

/// Queue entry; the heap pops the greatest: highest priority, then lowest
/// instance id, then lowest voxel index.
#[derive(Clone, Copy, Debug)]
struct Entry {
    priority: f32,
    id: u16,
    voxel: usize,
}

impl Entry {
    fn cmp_key(&self, other: &Self) -> Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then(other.id.cmp(&self.id))
            .then(other.voxel.cmp(&self.voxel))
    }
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp_key(other) == Ordering::Equal
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cmp_key(other)
    }
}

/// Priority flood from the seeds over the mask. Seed `k` (0-based) floods as
/// instance `k + 1`; instances smaller than `min_instance_voxels` are erased
/// and the rest renumbered in seed order.
pub fn seeded_watershed(e: &EnergyField, seeds: &[Seed], mask: &Volume, cfg: &WatershedConfig) -> Result<InstanceMap> {
    cfg.validate()?;
    let vals = energy_values(e, mask)?;
    let inside = mask_bits(mask)?;
    let grid = mask.grid();
    if seeds.len() >= u16::MAX as usize {
        return Err(Error::Seeds(format!("{} seeds exceed the instance id range", seeds.len())));
    }
    let mut labels = vec![0u16; vals.len()];
    let mut heap = BinaryHeap::new();
    for (k, s) in seeds.iter().enumerate() {
        if s.voxels.is_empty() {
            return Err(Error::Seeds(format!("seed {k} is empty")));
        }
        let id = (k + 1) as u16;
        for &v in &s.voxels {
            if v >= vals.len() || !inside[v] {
                return Err(Error::Seeds(format!("seed {k} voxel {v} lies outside the mask")));
            }
            if labels[v] != 0 {
                return Err(Error::Seeds(format!("seeds {} and {k} overlap at voxel {v}", labels[v] - 1)));
            }
            labels[v] = id;
            heap.push(Entry { priority: vals[v], id, voxel: v });
        }
    }
    while let Some(Entry { priority, id, voxel }) = heap.pop() {
        for j in grid.neighbors(voxel, cfg.flood_connectivity) {
            if inside[j] && labels[j] == 0 {
                labels[j] = id;
                heap.push(Entry { priority: vals[j].min(priority), id, voxel: j });
            }
        }
    }
    finalize(mask, labels, seeds, cfg.min_instance_voxels)
}

fn finalize(like: &Volume, mut labels: Vec<u16>, seeds: &[Seed], min_voxels: usize) -> Result<InstanceMap> {
    let mut counts = vec![0usize; seeds.len() + 1];
    for &l in &labels {
        counts[l as usize] += 1;
    }
    let mut remap = vec![0u16; seeds.len() + 1];
    let mut records = Vec::new();
    for (k, s) in seeds.iter().enumerate() {
        if counts[k + 1] >= min_voxels {
            let id = (records.len() + 1) as u16;
            remap[k + 1] = id;
            records.push(InstanceRecord {
                instance_id: id,
                seed_voxels: s.voxels.clone(),
                voxel_count: counts[k + 1],
                assigned_class: None,
                seed_peak_energy: Some(s.peak),
            });
        }
    }
    for l in &mut labels {
        *l = remap[*l as usize];
    }
    InstanceMap::new(like.with_payload(Payload::Labels(labels))?, records)
}

/// Tooth-class vote histogram of one instance, indexed by class.
fn votes(instances: &InstanceMap, classes: &[u16]) -> Vec<[usize; MAX_TOOTH_CLASS as usize + 1]> {
    let mut h = vec![[0usize; MAX_TOOTH_CLASS as usize + 1]; instances.count()];
    for (&id, &c) in instances.ids().iter().zip(classes) {
        if id > 0 && c > 0 && c <= MAX_TOOTH_CLASS {
            h[id as usize - 1][c as usize] += 1;
        }
    }
    h
}

/// Assigns each instance the tooth class most frequent inside it (lower class
/// wins ties). Classes are unique: larger instances choose first (lower id on
/// equal size) and a taken class passes the instance to its next best vote.
/// Instances left without any available voted class stay unassigned.
pub fn majority_vote(instances: &InstanceMap, seg: &Volume) -> Result<InstanceMap> {
    instances.labels().same_dims(seg)?;
    let classes = class_map(seg)?;
    let hist = votes(instances, &classes);
    let mut order: Vec<usize> = (0..instances.count()).collect();
    let recs = instances.records();
    order.sort_by(|&a, &b| recs[b].voxel_count.cmp(&recs[a].voxel_count).then(a.cmp(&b)));
    let mut taken = [false; MAX_TOOTH_CLASS as usize + 1];
    let mut out = instances.clone();
    for k in order {
        let mut ranked: Vec<usize> = (1..=MAX_TOOTH_CLASS as usize).filter(|&c| hist[k][c] > 0).collect();
        ranked.sort_by(|&a, &b| hist[k][b].cmp(&hist[k][a]).then(a.cmp(&b)));
        let choice = ranked.into_iter().find(|&c| !taken[c]);
        if let Some(c) = choice {
            taken[c] = true;
        } else {
            log::debug!("instance {} received no available tooth class", k + 1);
        }
        out.records_mut()[k].assigned_class = choice.map(|c| c as u16);
    }
    Ok(out)
}

/// Binarize, seed, flood and vote.
pub fn run_pipeline(energy: &EnergyField, seg: &Volume, cfg: &WatershedConfig) -> Result<InstanceMap> {
    let mask = binarize_segmentation(seg)?;
    let seeds = extract_seeds(energy, &mask, cfg)?;
    log::info!("extracted {} seeds", seeds.len());
    let instances = seeded_watershed(energy, &seeds, &mask, cfg)?;
    majority_vote(&instances, seg)
}

//! Labeled tooth instances and their per-instance records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Payload, Volume, MAX_TOOTH_CLASS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: u16,
    /// Linear voxel indices of the seed that grew this instance.
    pub seed_voxels: Vec<usize>,
    pub voxel_count: usize,
    /// Universal Numbering class, `None` when no tooth class could be assigned.
    pub assigned_class: Option<u16>,
    /// Highest energy inside the seed, when the instance came from a watershed.
    pub seed_peak_energy: Option<f32>,
}

/// Instance labels (0 = background, 1..=K) plus one record per instance.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMap {
    labels: Volume,
    records: Vec<InstanceRecord>,
}

impl InstanceMap {
    /// Builds a map and checks every invariant: contiguous ids, matching voxel
    /// counts, non-empty seeds that carry their own id.
    pub fn new(labels: Volume, records: Vec<InstanceRecord>) -> Result<Self> {
        let map = InstanceMap { labels, records };
        map.validate()?;
        Ok(map)
    }

    pub fn empty_like(v: &Volume) -> Result<Self> {
        let labels = v.with_payload(Payload::Labels(vec![0; v.len()]))?;
        Ok(InstanceMap { labels, records: Vec::new() })
    }

    /// One instance per tooth class present in a semantic label volume. Ids are
    /// assigned in increasing class order and every instance keeps its class.
    pub fn from_class_labels(semantic: &Volume) -> Result<Self> {
        let l = semantic.as_labels()?;
        if let Some((i, &c)) = l.iter().enumerate().find(|(_, &c)| c > MAX_TOOTH_CLASS) {
            return Err(Error::LabelOutOfRange { value: c, index: i });
        }
        let mut map = Self::from_instance_labels(semantic)?;
        for r in &mut map.records {
            let first = r.seed_voxels[0];
            r.assigned_class = Some(l[first]);
        }
        Ok(map)
    }

    /// Relabels arbitrary instance ids to 1..=K in increasing id order. Seeds
    /// are set to each instance's first voxel; classes are left unassigned.
    pub fn from_instance_labels(labels: &Volume) -> Result<Self> {
        let l = labels.as_labels()?;
        let mut first: BTreeMap<u16, (usize, usize)> = BTreeMap::new();
        for (i, &v) in l.iter().enumerate() {
            if v != 0 {
                first.entry(v).or_insert((i, 0)).1 += 1;
            }
        }
        let remap: BTreeMap<u16, u16> =
            first.keys().enumerate().map(|(k, &old)| (old, (k + 1) as u16)).collect();
        let relabeled: Vec<u16> = l.iter().map(|&v| if v == 0 { 0 } else { remap[&v] }).collect();
        let records = first
            .iter()
            .map(|(old, &(seed, count))| InstanceRecord {
                instance_id: remap[old],
                seed_voxels: vec![seed],
                voxel_count: count,
                assigned_class: None,
                seed_peak_energy: None,
            })
            .collect();
        Ok(InstanceMap { labels: labels.with_payload(Payload::Labels(relabeled))?, records })
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.labels.as_labels()?;
        let k = self.records.len();
        let mut counts = vec![0usize; k + 1];
        for &v in l {
            let v = v as usize;
            if v > k {
                return Err(Error::InvalidInput(format!("instance id {v} exceeds instance count {k}")));
            }
            counts[v] += 1;
        }
        for (i, r) in self.records.iter().enumerate() {
            let id = r.instance_id as usize;
            if id != i + 1 {
                return Err(Error::InvalidInput(format!("record {i} has id {id}, ids must be 1..=K in order")));
            }
            if counts[id] != r.voxel_count {
                return Err(Error::InvalidInput(format!(
                    "instance {id} records {} voxels but the map holds {}",
                    r.voxel_count, counts[id]
                )));
            }
            if r.seed_voxels.is_empty() {
                return Err(Error::InvalidInput(format!("instance {id} has no seed voxels")));
            }
            if let Some(&s) = r.seed_voxels.iter().find(|&&s| s >= l.len() || l[s] as usize != id) {
                return Err(Error::InvalidInput(format!("seed voxel {s} does not carry instance {id}")));
            }
            if let Some(c) = r.assigned_class {
                if c == 0 || c > MAX_TOOTH_CLASS {
                    return Err(Error::InvalidInput(format!("instance {id} has class {c} outside 1..=32")));
                }
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> &Volume {
        &self.labels
    }

    pub fn ids(&self) -> &[u16] {
        self.labels.as_labels().expect("instance map holds labels")
    }

    pub fn records(&self) -> &[InstanceRecord] {
        &self.records
    }

    pub fn records_mut(&mut self) -> &mut [InstanceRecord] {
        &mut self.records
    }

    pub fn count(&self) -> usize {
        self.records.len()
    }

    /// Semantic labels painted from each instance's assigned class; unassigned
    /// instances become background.
    pub fn class_labels(&self) -> Result<Volume> {
        let mut lut = vec![0u16; self.records.len() + 1];
        for r in &self.records {
            lut[r.instance_id as usize] = r.assigned_class.unwrap_or(0);
        }
        let painted = self.ids().iter().map(|&id| lut[id as usize]).collect();
        self.labels.with_payload(Payload::Labels(painted))
    }
}

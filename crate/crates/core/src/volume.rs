//! Dense 3D grids shared by every module.
//!
//! All volumes live in canonical RAS voxel order: x (towards patient Right)
//! varies fastest, then y (Anterior), then z (Superior). Readers reorient
//! on load, so nothing downstream has to inspect orientation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Number of semantic classes: background plus Universal Numbering teeth 1..=32.
pub const NUM_CLASSES: usize = 33;
/// Highest tooth class in Universal Numbering.
pub const MAX_TOOTH_CLASS: u16 = 32;

/// Sum-to-one tolerance for normalized probability stacks.
pub const PROB_SUM_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayloadKind {
    #[serde(rename = "scalar-f32")]
    Scalar,
    #[serde(rename = "vector3-f32")]
    Vector3,
    #[serde(rename = "label-u16")]
    Labels,
    #[serde(rename = "prob-stack-f32")]
    ProbStack,
}

impl PayloadKind {
    pub fn tag(self) -> &'static str {
        match self {
            PayloadKind::Scalar => "scalar-f32",
            PayloadKind::Vector3 => "vector3-f32",
            PayloadKind::Labels => "label-u16",
            PayloadKind::ProbStack => "prob-stack-f32",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "scalar-f32" => Some(PayloadKind::Scalar),
            "vector3-f32" => Some(PayloadKind::Vector3),
            "label-u16" => Some(PayloadKind::Labels),
            "prob-stack-f32" => Some(PayloadKind::ProbStack),
            _ => None,
        }
    }
}

impl std::fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Voxel data. Probability stacks are planar: channel `c` of voxel `i` is
/// `data[c * n_voxels + i]`.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Scalar(Vec<f32>),
    Vector3(Vec<[f32; 3]>),
    Labels(Vec<u16>),
    ProbStack { channels: usize, data: Vec<f32> },
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::Scalar(_) => PayloadKind::Scalar,
            Payload::Vector3(_) => PayloadKind::Vector3,
            Payload::Labels(_) => PayloadKind::Labels,
            Payload::ProbStack { .. } => PayloadKind::ProbStack,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Payload::Scalar(_) | Payload::Labels(_) => 1,
            Payload::Vector3(_) => 3,
            Payload::ProbStack { channels, .. } => *channels,
        }
    }

    fn voxel_count(&self) -> usize {
        match self {
            Payload::Scalar(v) => v.len(),
            Payload::Vector3(v) => v.len(),
            Payload::Labels(v) => v.len(),
            Payload::ProbStack { channels, data } => {
                if *channels == 0 {
                    0
                } else {
                    data.len() / channels
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    /// Set on probability stacks that sum to one per voxel and on scans that
    /// went through intensity normalization.
    normalized: bool,
    payload: Payload,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], payload: Payload) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidVolume(format!("spacing must be positive, got {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidVolume(format!("origin must be finite, got {origin:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if let Payload::ProbStack { channels, data } = &payload {
            if *channels == 0 || data.len() != channels * n {
                return Err(Error::InvalidVolume(format!(
                    "prob-stack with {channels} channels needs {} values, got {}",
                    channels * n,
                    data.len()
                )));
            }
        } else if payload.voxel_count() != n {
            return Err(Error::InvalidVolume(format!(
                "payload has {} voxels, dims {dims:?} need {n}",
                payload.voxel_count()
            )));
        }
        Ok(Volume { dims, spacing, origin, normalized: false, payload })
    }

    pub fn scalar(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        Self::new(dims, spacing, [0.0; 3], Payload::Scalar(data))
    }

    pub fn labels(dims: [usize; 3], spacing: [f64; 3], data: Vec<u16>) -> Result<Self> {
        Self::new(dims, spacing, [0.0; 3], Payload::Labels(data))
    }

    pub fn vector3(dims: [usize; 3], spacing: [f64; 3], data: Vec<[f32; 3]>) -> Result<Self> {
        Self::new(dims, spacing, [0.0; 3], Payload::Vector3(data))
    }

    /// Probability stack; `data` is planar (see [`Payload`]). Marked normalized
    /// only if every voxel sums to one within [`PROB_SUM_TOL`].
    pub fn prob_stack(dims: [usize; 3], spacing: [f64; 3], channels: usize, data: Vec<f32>) -> Result<Self> {
        let mut v = Self::new(dims, spacing, [0.0; 3], Payload::ProbStack { channels, data })?;
        v.normalized = v.check_prob_normalized().is_ok();
        Ok(v)
    }

    /// New volume with this one's geometry and a different payload.
    pub fn with_payload(&self, payload: Payload) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.origin, payload)
    }

    pub fn with_origin(mut self, origin: [f64; 3]) -> Self {
        self.origin = origin;
        self
    }

    pub fn with_normalized(mut self, normalized: bool) -> Self {
        self.normalized = normalized;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.dims)
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn into_payload(self) -> Payload {
        self.payload
    }

    pub fn kind(&self) -> PayloadKind {
        self.payload.kind()
    }

    pub fn channels(&self) -> usize {
        self.payload.channels()
    }

    fn mismatch(&self, expected: PayloadKind) -> Error {
        Error::PayloadMismatch { expected: expected.to_string(), found: self.kind().to_string() }
    }

    pub fn as_scalar(&self) -> Result<&[f32]> {
        match &self.payload {
            Payload::Scalar(v) => Ok(v),
            _ => Err(self.mismatch(PayloadKind::Scalar)),
        }
    }

    pub fn as_labels(&self) -> Result<&[u16]> {
        match &self.payload {
            Payload::Labels(v) => Ok(v),
            _ => Err(self.mismatch(PayloadKind::Labels)),
        }
    }

    pub fn as_vector3(&self) -> Result<&[[f32; 3]]> {
        match &self.payload {
            Payload::Vector3(v) => Ok(v),
            _ => Err(self.mismatch(PayloadKind::Vector3)),
        }
    }

    /// `(channels, planar data)`.
    pub fn as_prob_stack(&self) -> Result<(usize, &[f32])> {
        match &self.payload {
            Payload::ProbStack { channels, data } => Ok((*channels, data)),
            _ => Err(self.mismatch(PayloadKind::ProbStack)),
        }
    }

    /// Checks the prob-stack invariant: non-negative channels summing to one.
    pub fn check_prob_normalized(&self) -> Result<()> {
        let (c, data) = self.as_prob_stack()?;
        let n = self.len();
        for i in 0..n {
            let mut s = 0.0f64;
            for ch in 0..c {
                let p = data[ch * n + i];
                if !(p >= 0.0) {
                    return Err(Error::InvalidInput(format!("negative or NaN probability at voxel {i}")));
                }
                s += p as f64;
            }
            if (s - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::InvalidInput(format!("probabilities at voxel {i} sum to {s}")));
            }
        }
        Ok(())
    }

    pub fn same_dims(&self, other: &Volume) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("dims {:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(())
    }

    /// World coordinate (mm) of voxel `(i, j, k)` under the canonical RAS affine.
    pub fn world(&self, ijk: [f64; 3]) -> [f64; 3] {
        [
            self.origin[0] + ijk[0] * self.spacing[0],
            self.origin[1] + ijk[1] * self.spacing[1],
            self.origin[2] + ijk[2] * self.spacing[2],
        ]
    }
}

/// Class per voxel: labels as-is, probability stacks by argmax (ties go to the
/// lower channel).
pub fn class_map(seg: &Volume) -> Result<Vec<u16>> {
    match seg.payload() {
        Payload::Labels(l) => Ok(l.clone()),
        Payload::ProbStack { channels, data } => {
            let n = seg.len();
            Ok((0..n)
                .map(|i| {
                    let mut best = 0usize;
                    let mut best_p = data[i];
                    for c in 1..*channels {
                        let p = data[c * n + i];
                        if p > best_p {
                            best = c;
                            best_p = p;
                        }
                    }
                    best as u16
                })
                .collect())
        }
        _ => Err(Error::PayloadMismatch {
            expected: "label-u16 or prob-stack-f32".into(),
            found: seg.kind().to_string(),
        }),
    }
}

/// One-hot encoding of a label volume into a 33-channel probability stack;
/// channel 0 is background.
pub fn one_hot(labels: &Volume) -> Result<Volume> {
    let l = labels.as_labels()?;
    let n = l.len();
    let mut data = vec![0.0f32; NUM_CLASSES * n];
    for (i, &c) in l.iter().enumerate() {
        if c > MAX_TOOTH_CLASS {
            return Err(Error::LabelOutOfRange { value: c, index: i });
        }
        data[c as usize * n + i] = 1.0;
    }
    Ok(labels
        .with_payload(Payload::ProbStack { channels: NUM_CLASSES, data })?
        .with_normalized(true))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dims_and_bad_spacing() {
        assert!(Volume::scalar([0, 1, 1], [1.0; 3], vec![]).is_err());
        assert!(Volume::scalar([1, 1, 1], [0.0, 1.0, 1.0], vec![0.0]).is_err());
        assert!(Volume::scalar([2, 1, 1], [1.0; 3], vec![0.0]).is_err());
    }

    #[test]
    fn one_hot_background_volume() {
        let v = Volume::labels([2, 2, 2], [0.4; 3], vec![0; 8]).unwrap();
        let oh = one_hot(&v).unwrap();
        let (c, data) = oh.as_prob_stack().unwrap();
        assert_eq!(c, 33);
        assert!(data[..8].iter().all(|&p| p == 1.0));
        assert!(data[8..].iter().all(|&p| p == 0.0));
        assert!(oh.is_normalized());
    }

    #[test]
    fn one_hot_single_voxel_class_17() {
        let mut l = vec![0u16; 27];
        l[13] = 17;
        let v = Volume::labels([3, 3, 3], [0.4; 3], l).unwrap();
        let oh = one_hot(&v).unwrap();
        let (_, data) = oh.as_prob_stack().unwrap();
        assert_eq!(data[17 * 27 + 13], 1.0);
        assert_eq!(data[13], 0.0);
    }

    #[test]
    fn one_hot_rejects_class_above_32() {
        let v = Volume::labels([1, 1, 1], [0.4; 3], vec![33]).unwrap();
        assert!(matches!(one_hot(&v), Err(Error::LabelOutOfRange { value: 33, .. })));
    }

    #[test]
    fn argmax_recovers_random_labels() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(7);
        let l: Vec<u16> = (0..64).map(|_| rng.random_range(0..=32)).collect();
        let v = Volume::labels([4, 4, 4], [0.4; 3], l.clone()).unwrap();
        assert_eq!(class_map(&one_hot(&v).unwrap()).unwrap(), l);
    }

    #[test]
    fn prob_stack_normalization_flag() {
        let ok = Volume::prob_stack([1, 1, 1], [1.0; 3], 2, vec![0.25, 0.75]).unwrap();
        assert!(ok.is_normalized());
        let bad = Volume::prob_stack([1, 1, 1], [1.0; 3], 2, vec![0.25, 0.5]).unwrap();
        assert!(!bad.is_normalized());
    }
}

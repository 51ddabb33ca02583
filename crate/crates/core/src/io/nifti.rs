//! Single-file NIfTI-1 (`n+1\0`), datatypes uint8/int16/uint16/float32,
//! optional gzip. Multi-channel payloads use the fifth dimension.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{Payload, PayloadKind, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_UINT16: i16 = 512;

const INTENT_VECTOR: i16 = 1007;
const NORMALIZED_TAG: &[u8] = b"toothseg:normalized";

/// Voxel-to-world (RAS mm) mapping: `world = linear * ijk + offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NiftiAffine {
    pub linear: [[f64; 3]; 3],
    pub offset: [f64; 3],
}

impl NiftiAffine {
    pub fn apply(&self, ijk: [f64; 3]) -> [f64; 3] {
        let mut w = self.offset;
        for (r, row) in self.linear.iter().enumerate() {
            for c in 0..3 {
                w[r] += row[c] * ijk[c];
            }
        }
        w
    }

    fn determinant(&self) -> f64 {
        let m = &self.linear;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}

struct Header {
    dims: [usize; 3],
    channels: usize,
    datatype: i16,
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
    affine: NiftiAffine,
    normalized: bool,
    big_endian: bool,
}

fn header_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Header { path: path.to_path_buf(), reason: reason.into() }
}

fn parse_header(path: &Path, b: &[u8]) -> Result<Header> {
    if b.len() < HEADER_SIZE {
        return Err(header_err(path, format!("file has {} bytes, header needs 348", b.len())));
    }
    let big_endian = if LittleEndian::read_i32(&b[0..4]) == 348 {
        false
    } else if BigEndian::read_i32(&b[0..4]) == 348 {
        true
    } else {
        return Err(header_err(path, "sizeof_hdr is not 348"));
    };
    if &b[344..348] != b"n+1\0" {
        return Err(header_err(path, "magic is not \"n+1\\0\" (only single-file NIfTI-1 is supported)"));
    }
    let i16_at = |o: usize| if big_endian { BigEndian::read_i16(&b[o..]) } else { LittleEndian::read_i16(&b[o..]) };
    let f32_at = |o: usize| if big_endian { BigEndian::read_f32(&b[o..]) } else { LittleEndian::read_f32(&b[o..]) };

    let mut dim = [0i16; 8];
    for (k, d) in dim.iter_mut().enumerate() {
        *d = i16_at(40 + 2 * k);
    }
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(header_err(path, format!("dim[0] = {ndim} is out of range")));
    }
    let axis = |k: usize| -> usize {
        if k as i16 <= ndim {
            dim[k].max(1) as usize
        } else {
            1
        }
    };
    if (1..=ndim as usize).any(|k| dim[k] < 1) {
        return Err(header_err(path, format!("non-positive dimension in {dim:?}")));
    }
    let dims = [axis(1), axis(2), axis(3)];
    let channels = axis(4) * axis(5) * axis(6) * axis(7);

    let mut pixdim = [0f32; 8];
    for (k, p) in pixdim.iter_mut().enumerate() {
        *p = f32_at(76 + 4 * k);
    }
    let datatype = i16_at(70);
    let vox_offset = f32_at(108);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(header_err(path, format!("vox_offset {vox_offset} is invalid")));
    }
    let qform_code = i16_at(252);
    let sform_code = i16_at(254);

    let affine = if sform_code > 0 {
        let row = |o: usize| [f32_at(o) as f64, f32_at(o + 4) as f64, f32_at(o + 8) as f64, f32_at(o + 12) as f64];
        let (x, y, z) = (row(280), row(296), row(312));
        NiftiAffine {
            linear: [[x[0], x[1], x[2]], [y[0], y[1], y[2]], [z[0], z[1], z[2]]],
            offset: [x[3], y[3], z[3]],
        }
    } else if qform_code > 0 {
        let (qb, qc, qd) = (f32_at(256) as f64, f32_at(260) as f64, f32_at(264) as f64);
        let qa = (1.0 - (qb * qb + qc * qc + qd * qd)).max(0.0).sqrt();
        let rot = [
            [qa * qa + qb * qb - qc * qc - qd * qd, 2.0 * (qb * qc - qa * qd), 2.0 * (qb * qd + qa * qc)],
            [2.0 * (qb * qc + qa * qd), qa * qa + qc * qc - qb * qb - qd * qd, 2.0 * (qc * qd - qa * qb)],
            [2.0 * (qb * qd - qa * qc), 2.0 * (qc * qd + qa * qb), qa * qa + qd * qd - qc * qc - qb * qb],
        ];
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let scale = [pixdim[1] as f64, pixdim[2] as f64, pixdim[3] as f64 * qfac];
        let mut linear = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                linear[r][c] = rot[r][c] * scale[c];
            }
        }
        NiftiAffine { linear, offset: [f32_at(268) as f64, f32_at(272) as f64, f32_at(276) as f64] }
    } else {
        let p = |k: usize| if pixdim[k] > 0.0 { pixdim[k] as f64 } else { 1.0 };
        NiftiAffine { linear: [[p(1), 0.0, 0.0], [0.0, p(2), 0.0], [0.0, 0.0, p(3)]], offset: [0.0; 3] }
    };

    let descrip = &b[148..228];
    let normalized = descrip.starts_with(NORMALIZED_TAG);

    Ok(Header {
        dims,
        channels,
        datatype,
        vox_offset: vox_offset as usize,
        scl_slope: f32_at(112),
        scl_inter: f32_at(116),
        affine,
        normalized,
        big_endian,
    })
}

/// Axis permutation and flips that bring voxel axes onto increasing R, A, S.
/// `perm[w]` is the stored voxel axis that runs along world axis `w`.
fn ras_reorientation(a: &NiftiAffine) -> Result<([usize; 3], [bool; 3])> {
    let det = a.determinant();
    if !det.is_finite() || det.abs() < 1e-12 {
        return Err(Error::Orientation(format!("determinant {det}")));
    }
    let mut perm = [usize::MAX; 3];
    let mut flip = [false; 3];
    for j in 0..3 {
        let col = [a.linear[0][j], a.linear[1][j], a.linear[2][j]];
        let (w, _) = col
            .iter()
            .enumerate()
            .map(|(w, v)| (w, v.abs()))
            .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if perm[w] != usize::MAX {
            return Err(Error::Orientation(format!("voxel axes {} and {j} both map to world axis {w}", perm[w])));
        }
        perm[w] = j;
        flip[w] = col[w] < 0.0;
    }
    Ok((perm, flip))
}

fn decode_values(h: &Header, path: &Path, raw: &[u8], count: usize) -> Result<Vec<f64>> {
    let width = match h.datatype {
        DT_UINT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(Error::Unsupported(format!("NIfTI datatype {other}"))),
    };
    let start = h.vox_offset;
    let end = start + count * width;
    if raw.len() < end {
        return Err(header_err(path, format!("data block truncated: need {end} bytes, have {}", raw.len())));
    }
    let d = &raw[start..end];
    let be = h.big_endian;
    Ok(match h.datatype {
        DT_UINT8 => d.iter().map(|&v| v as f64).collect(),
        DT_INT16 => d
            .chunks_exact(2)
            .map(|c| if be { BigEndian::read_i16(c) } else { LittleEndian::read_i16(c) } as f64)
            .collect(),
        DT_UINT16 => d
            .chunks_exact(2)
            .map(|c| if be { BigEndian::read_u16(c) } else { LittleEndian::read_u16(c) } as f64)
            .collect(),
        _ => d
            .chunks_exact(4)
            .map(|c| if be { BigEndian::read_f32(c) } else { LittleEndian::read_f32(c) } as f64)
            .collect(),
    })
}

fn datatype_name(dt: i16) -> &'static str {
    match dt {
        DT_UINT8 => "uint8",
        DT_INT16 => "int16",
        DT_UINT16 => "uint16",
        DT_FLOAT32 => "float32",
        _ => "unsupported",
    }
}

pub fn read_nifti(path: &Path, expected: PayloadKind) -> Result<Volume> {
    let file = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if file.len() >= 2 && file[0] == 0x1F && file[1] == 0x8B {
        let mut out = Vec::new();
        MultiGzDecoder::new(Cursor::new(&file)).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        out
    } else {
        file
    };
    let h = parse_header(path, &bytes)?;

    let found = format!("{} with {} channel(s)", datatype_name(h.datatype), h.channels);
    let mismatch = || Error::PayloadMismatch { expected: expected.to_string(), found: found.clone() };
    match expected {
        PayloadKind::Labels if h.datatype == DT_FLOAT32 || h.channels != 1 => return Err(mismatch()),
        PayloadKind::Scalar if h.channels != 1 => return Err(mismatch()),
        PayloadKind::Vector3 if h.channels != 3 || h.datatype != DT_FLOAT32 => return Err(mismatch()),
        PayloadKind::ProbStack if h.datatype != DT_FLOAT32 => return Err(mismatch()),
        _ => {}
    }

    let n = h.dims.iter().product::<usize>();
    let values = decode_values(&h, path, &bytes, n * h.channels)?;
    let (perm, flip) = ras_reorientation(&h.affine)?;

    let new_dims = [h.dims[perm[0]], h.dims[perm[1]], h.dims[perm[2]]];
    let mut spacing = [0.0; 3];
    let mut corner = [0.0; 3];
    for w in 0..3 {
        let j = perm[w];
        spacing[w] = (0..3).map(|r| h.affine.linear[r][j].powi(2)).sum::<f64>().sqrt();
        corner[j] = if flip[w] { (h.dims[j] - 1) as f64 } else { 0.0 };
    }
    let origin = h.affine.apply(corner);

    // Map each canonical voxel back to its stored index.
    let src_index = |i: usize| -> usize {
        let x = i % new_dims[0];
        let yz = i / new_dims[0];
        let canon = [x, yz % new_dims[1], yz / new_dims[1]];
        let mut old = [0usize; 3];
        for w in 0..3 {
            let j = perm[w];
            old[j] = if flip[w] { h.dims[j] - 1 - canon[w] } else { canon[w] };
        }
        old[0] + h.dims[0] * (old[1] + h.dims[1] * old[2])
    };
    let identity = perm == [0, 1, 2] && flip == [false; 3];
    let index_map: Vec<usize> = if identity { (0..n).collect() } else { (0..n).map(src_index).collect() };

    let apply_scale = h.scl_slope != 0.0 && !(h.scl_slope == 1.0 && h.scl_inter == 0.0);
    let scaled = |v: f64| if apply_scale { v * h.scl_slope as f64 + h.scl_inter as f64 } else { v };

    let payload = match expected {
        PayloadKind::Scalar => Payload::Scalar(index_map.iter().map(|&s| scaled(values[s]) as f32).collect()),
        PayloadKind::Labels => {
            let mut out = Vec::with_capacity(n);
            for &s in &index_map {
                let v = scaled(values[s]);
                if !(0.0..=u16::MAX as f64).contains(&v) || v.fract() != 0.0 {
                    return Err(Error::PayloadMismatch {
                        expected: expected.to_string(),
                        found: format!("non-integer or negative label value {v}"),
                    });
                }
                out.push(v as u16);
            }
            Payload::Labels(out)
        }
        PayloadKind::ProbStack => {
            let c = h.channels;
            let mut data = vec![0f32; c * n];
            for ch in 0..c {
                for (i, &s) in index_map.iter().enumerate() {
                    data[ch * n + i] = scaled(values[ch * n + s]) as f32;
                }
            }
            Payload::ProbStack { channels: c, data }
        }
        PayloadKind::Vector3 => {
            let mut out = Vec::with_capacity(n);
            for &s in &index_map {
                let stored = [values[s], values[n + s], values[2 * n + s]];
                let mut v = [0f32; 3];
                for w in 0..3 {
                    let comp = stored[perm[w]];
                    v[w] = if flip[w] { -comp } else { comp } as f32;
                }
                out.push(v);
            }
            Payload::Vector3(out)
        }
    };
    Ok(Volume::new(new_dims, spacing, origin, payload)?.with_normalized(h.normalized))
}

fn build_header(v: &Volume) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';
    let [nx, ny, nz] = v.dims();
    let channels = v.channels();
    let mut dim = [3i16, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    if channels > 1 || v.kind() == PayloadKind::ProbStack || v.kind() == PayloadKind::Vector3 {
        dim[0] = 5;
        dim[5] = channels as i16;
    }
    for (k, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * k..], *d);
    }
    let (datatype, bitpix) = if v.kind() == PayloadKind::Labels { (DT_UINT16, 16) } else { (DT_FLOAT32, 32) };
    if matches!(v.kind(), PayloadKind::Vector3 | PayloadKind::ProbStack) {
        LittleEndian::write_i16(&mut h[68..], INTENT_VECTOR);
    }
    LittleEndian::write_i16(&mut h[70..], datatype);
    LittleEndian::write_i16(&mut h[72..], bitpix);
    let sp = v.spacing();
    let pixdim = [1.0f32, sp[0] as f32, sp[1] as f32, sp[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (k, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * k..], *p);
    }
    LittleEndian::write_f32(&mut h[108..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0);
    h[123] = 2; // mm
    if v.is_normalized() {
        h[148..148 + NORMALIZED_TAG.len()].copy_from_slice(NORMALIZED_TAG);
    }
    let o = v.origin();
    LittleEndian::write_i16(&mut h[252..], 1);
    LittleEndian::write_i16(&mut h[254..], 1);
    LittleEndian::write_f32(&mut h[268..], o[0] as f32);
    LittleEndian::write_f32(&mut h[272..], o[1] as f32);
    LittleEndian::write_f32(&mut h[276..], o[2] as f32);
    for r in 0..3 {
        let base = 280 + 16 * r;
        LittleEndian::write_f32(&mut h[base + 4 * r..], sp[r] as f32);
        LittleEndian::write_f32(&mut h[base + 12..], o[r] as f32);
    }
    let intent: &[u8] = match v.kind() {
        PayloadKind::Vector3 => b"vector3",
        PayloadKind::ProbStack => b"prob-stack",
        _ => b"",
    };
    h[328..328 + intent.len()].copy_from_slice(intent);
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

/// Writes canonical RAS volumes with identical qform and sform (both code 1).
/// Geometry is stored as float32, as the format requires.
pub fn write_nifti(v: &Volume, path: &Path, gzip: bool) -> Result<()> {
    if v.dims().iter().any(|&d| d > i16::MAX as usize) || v.channels() > i16::MAX as usize {
        return Err(Error::Unsupported("dimension exceeds the NIfTI-1 limit of 32767".into()));
    }
    let mut buf = build_header(v);
    let n = v.len();
    match v.payload() {
        Payload::Scalar(d) => d.iter().for_each(|x| buf.write_f32::<LittleEndian>(*x).unwrap()),
        Payload::Labels(d) => d.iter().for_each(|x| buf.write_u16::<LittleEndian>(*x).unwrap()),
        Payload::ProbStack { data, .. } => data.iter().for_each(|x| buf.write_f32::<LittleEndian>(*x).unwrap()),
        Payload::Vector3(d) => {
            buf.reserve(12 * n);
            for c in 0..3 {
                d.iter().for_each(|x| buf.write_f32::<LittleEndian>(x[c]).unwrap());
            }
        }
    }
    let out = if gzip {
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&buf).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        buf
    };
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(diag: [f64; 3], offset: [f64; 3]) -> NiftiAffine {
        NiftiAffine {
            linear: [[diag[0], 0.0, 0.0], [0.0, diag[1], 0.0], [0.0, 0.0, diag[2]]],
            offset,
        }
    }

    #[test]
    fn ras_reorientation_of_lps() {
        let (perm, flip) = ras_reorientation(&affine([-1.0, -1.0, 1.0], [0.0; 3])).unwrap();
        assert_eq!(perm, [0, 1, 2]);
        assert_eq!(flip, [true, true, false]);
    }

    #[test]
    fn ras_reorientation_of_permuted_axes() {
        let a = NiftiAffine { linear: [[0.0, 0.0, 2.0], [1.0, 0.0, 0.0], [0.0, -3.0, 0.0]], offset: [0.0; 3] };
        let (perm, flip) = ras_reorientation(&a).unwrap();
        assert_eq!(perm, [2, 0, 1]);
        assert_eq!(flip, [false, false, true]);
    }

    #[test]
    fn singular_affine_is_rejected() {
        let a = affine([1.0, 0.0, 1.0], [0.0; 3]);
        assert!(matches!(ras_reorientation(&a), Err(Error::Orientation(_))));
    }
}

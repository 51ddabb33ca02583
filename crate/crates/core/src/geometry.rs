//! Tooth centroid tables and the 33×33 class-dissimilarity matrix built from them.
//!
//! Teeth are addressed either by Universal Numbering (1..=32, starting at the
//! maxillary right third molar) or by `(quadrant, position)` where quadrants
//! run upper-right, upper-left, lower-left, lower-right and positions run
//! 1 = central incisor .. 8 = third molar.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::NUM_CLASSES;

pub const QUADRANTS: usize = 4;
pub const POSITIONS: usize = 8;
pub const TOOTH_CLASSES: usize = 32;

/// Raw background penalty used when none is given.
pub const DEFAULT_BACKGROUND_PENALTY: f64 = 2.0;

const BUNDLED_MALE: &str = include_str!("../data/centroids_male.csv");
const BUNDLED_FEMALE: &str = include_str!("../data/centroids_female.csv");

/// `(quadrant, position)` of a Universal Numbering tooth.
pub fn universal_to_quadrant(tooth: u16) -> Option<(u8, u8)> {
    let t = tooth as i32;
    let (k, m) = match t {
        1..=8 => (1, 9 - t),
        9..=16 => (2, t - 8),
        17..=24 => (3, 25 - t),
        25..=32 => (4, t - 24),
        _ => return None,
    };
    Some((k as u8, m as u8))
}

/// Universal Numbering tooth at `(quadrant, position)`.
pub fn quadrant_to_universal(quadrant: u8, position: u8) -> Option<u16> {
    if !(1..=8).contains(&position) {
        return None;
    }
    let m = position as u16;
    match quadrant {
        1 => Some(9 - m),
        2 => Some(8 + m),
        3 => Some(25 - m),
        4 => Some(24 + m),
        _ => None,
    }
}

/// Class names in matrix order: `background`, `tooth_1` .. `tooth_32`.
pub fn class_names() -> Vec<String> {
    std::iter::once("background".to_string())
        .chain((1..=TOOTH_CLASSES).map(|n| format!("tooth_{n}")))
        .collect()
}

/// Per-tooth 2D geometric centres keyed by `(quadrant, position)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidTable {
    entries: BTreeMap<(u8, u8), [f64; 2]>,
    pub provenance: String,
}

impl CentroidTable {
    /// Builds a (possibly partial) table. Keys must be in range, coordinates finite.
    pub fn from_entries(
        entries: impl IntoIterator<Item = ((u8, u8), [f64; 2])>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for ((k, m), xy) in entries {
            if !(1..=4).contains(&k) || !(1..=8).contains(&m) {
                return Err(Error::Centroids(format!("key ({k},{m}) out of range")));
            }
            if !xy.iter().all(|v| v.is_finite()) {
                return Err(Error::Centroids(format!("non-finite coordinate at ({k},{m})")));
            }
            if map.insert((k, m), xy).is_some() {
                return Err(Error::Centroids(format!("duplicate entry ({k},{m})")));
            }
        }
        Ok(CentroidTable { entries: map, provenance: provenance.into() })
    }

    /// Parses `quadrant,position,x,y` CSV text. Lines starting with `#` are
    /// comments; `# provenance: <tag>` sets the provenance.
    pub fn parse_csv(text: &str, default_provenance: &str) -> Result<Self> {
        let provenance = text
            .lines()
            .filter_map(|l| l.trim().strip_prefix('#'))
            .find_map(|l| l.trim().strip_prefix("provenance:"))
            .map(|p| p.trim().to_string())
            .unwrap_or_else(|| default_provenance.to_string());
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = rdr
            .headers()
            .map_err(|e| Error::Centroids(format!("cannot read header: {e}")))?
            .clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.eq_ignore_ascii_case(name))
                .ok_or_else(|| Error::Centroids(format!("missing column {name:?}")))
        };
        let (ck, cm, cx, cy) = (col("quadrant")?, col("position")?, col("x")?, col("y")?);
        let mut entries = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Centroids(format!("row {}: {e}", line + 1)))?;
            let field = |c: usize| rec.get(c).unwrap_or("");
            let int = |c: usize| {
                field(c)
                    .parse::<u8>()
                    .map_err(|_| Error::Centroids(format!("row {}: bad integer {:?}", line + 1, field(c))))
            };
            let float = |c: usize| {
                field(c)
                    .parse::<f64>()
                    .map_err(|_| Error::Centroids(format!("row {}: bad number {:?}", line + 1, field(c))))
            };
            entries.push(((int(ck)?, int(cm)?), [float(cx)?, float(cy)?]));
        }
        Self::from_entries(entries, provenance)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# provenance: {}\nquadrant,position,x,y\n", self.provenance);
        for (&(k, m), xy) in &self.entries {
            s.push_str(&format!("{k},{m},{},{}\n", xy[0], xy[1]));
        }
        s
    }

    pub fn get(&self, quadrant: u8, position: u8) -> Option<[f64; 2]> {
        self.entries.get(&(quadrant, position)).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = ((u8, u8), [f64; 2])> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All 4×8 entries present.
    pub fn is_complete(&self) -> bool {
        self.entries.len() == QUADRANTS * POSITIONS
    }

    /// Mean of the four central-incisor centroids.
    pub fn origin(&self) -> Result<[f64; 2]> {
        let mut o = [0.0; 2];
        for k in 1..=4u8 {
            let g = self
                .get(k, 1)
                .ok_or_else(|| Error::Centroids(format!("central incisor of quadrant {k} missing")))?;
            o[0] += g[0];
            o[1] += g[1];
        }
        Ok([o[0] / 4.0, o[1] / 4.0])
    }

    /// Coordinates re-expressed relative to [`Self::origin`].
    pub fn centered(&self) -> Result<Self> {
        let o = self.origin()?;
        Ok(CentroidTable {
            entries: self.entries.iter().map(|(&k, v)| (k, [v[0] - o[0], v[1] - o[1]])).collect(),
            provenance: self.provenance.clone(),
        })
    }

    /// Uniform scaling of all coordinates about the coordinate origin.
    pub fn scaled(&self, s: f64) -> Self {
        CentroidTable {
            entries: self.entries.iter().map(|(&k, v)| (k, [v[0] * s, v[1] * s])).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Applies `p -> R p + t` with `R` a 2×2 matrix.
    pub fn transformed(&self, r: [[f64; 2]; 2], t: [f64; 2]) -> Self {
        CentroidTable {
            entries: self
                .entries
                .iter()
                .map(|(&k, v)| {
                    (k, [r[0][0] * v[0] + r[0][1] * v[1] + t[0], r[1][0] * v[0] + r[1][1] * v[1] + t[1]])
                })
                .collect(),
            provenance: self.provenance.clone(),
        }
    }

    fn check_required_positions(&self) -> Result<()> {
        for k in 1..=4u8 {
            if !(1..=8u8).any(|m| self.entries.contains_key(&(k, m))) {
                return Err(Error::Centroids(format!("quadrant {k} is missing")));
            }
            for m in 1..=7u8 {
                if !self.entries.contains_key(&(k, m)) {
                    return Err(Error::Centroids(format!("quadrant {k} lacks position {m}")));
                }
            }
        }
        Ok(())
    }

    pub fn bundled_male() -> Self {
        load_centroids_from_str(BUNDLED_MALE, "bundled-male").expect("bundled male table is valid")
    }

    pub fn bundled_female() -> Self {
        load_centroids_from_str(BUNDLED_FEMALE, "bundled-female").expect("bundled female table is valid")
    }

    /// Mean of the bundled male and female tables, re-centred.
    pub fn bundled_average() -> Self {
        average_dentitions(&Self::bundled_male(), &Self::bundled_female()).expect("bundled tables share keys")
    }
}

fn load_centroids_from_str(text: &str, default_provenance: &str) -> Result<CentroidTable> {
    let t = CentroidTable::parse_csv(text, default_provenance)?;
    t.check_required_positions()?;
    interpolate_third_molar(&t.centered()?)
}

/// Reads a centroid CSV, centres it on the incisor origin and fills missing
/// third molars.
pub fn load_centroids(path: impl AsRef<Path>) -> Result<CentroidTable> {
    let path = path.as_ref();
    let mut text = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("centroids");
    load_centroids_from_str(&text, stem)
}

/// Fills absent third molars by linear extrapolation along the molar row:
/// `G8 = G7 + (G7 - G6)`. Supplied third molars are kept.
pub fn interpolate_third_molar(t: &CentroidTable) -> Result<CentroidTable> {
    let mut out = t.clone();
    for k in 1..=4u8 {
        if t.get(k, 8).is_some() {
            continue;
        }
        let (g6, g7) = match (t.get(k, 6), t.get(k, 7)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Centroids(format!("quadrant {k} needs positions 6 and 7 to place position 8"))),
        };
        if g6 == g7 {
            return Err(Error::Centroids(format!("quadrant {k}: positions 6 and 7 coincide")));
        }
        out.entries.insert((k, 8), [2.0 * g7[0] - g6[0], 2.0 * g7[1] - g6[1]]);
    }
    Ok(out)
}

/// Pairwise Euclidean distances between the eight teeth of quadrant `k`,
/// indexed by position − 1.
pub fn intra_quadrant_distances(t: &CentroidTable, k: u8) -> Result<[[f64; POSITIONS]; POSITIONS]> {
    let mut pts = [[0.0; 2]; POSITIONS];
    for (m, p) in pts.iter_mut().enumerate() {
        *p = t
            .get(k, m as u8 + 1)
            .ok_or_else(|| Error::Centroids(format!("quadrant {k} incomplete: position {} missing", m + 1)))?;
    }
    let mut d = [[0.0; POSITIONS]; POSITIONS];
    for i in 0..POSITIONS {
        for j in (i + 1)..POSITIONS {
            let v = (pts[i][0] - pts[j][0]).hypot(pts[i][1] - pts[j][1]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok(d)
}

/// Entrywise mean of two complete tables, re-centred on its own origin.
pub fn average_dentitions(a: &CentroidTable, b: &CentroidTable) -> Result<CentroidTable> {
    if a.entries.keys().ne(b.entries.keys()) {
        return Err(Error::Centroids("tables have different (quadrant, position) keys".into()));
    }
    if !a.is_complete() {
        return Err(Error::Centroids("averaging needs complete tables".into()));
    }
    let entries = a
        .entries
        .iter()
        .map(|(&k, va)| {
            let vb = b.entries[&k];
            (k, [(va[0] + vb[0]) / 2.0, (va[1] + vb[1]) / 2.0])
        })
        .collect();
    CentroidTable { entries, provenance: format!("average({}, {})", a.provenance, b.provenance) }.centered()
}

/// Symmetric 4×4 penalty added to every confusion between two quadrants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadrantPenalty {
    pub q: [[f64; QUADRANTS]; QUADRANTS],
}

impl Default for QuadrantPenalty {
    /// Same arch 0.1, opposite arch same side 0.2, diagonal quadrants 0.3.
    fn default() -> Self {
        QuadrantPenalty {
            q: [
                [0.0, 0.1, 0.3, 0.2],
                [0.1, 0.0, 0.2, 0.3],
                [0.3, 0.2, 0.0, 0.1],
                [0.2, 0.3, 0.1, 0.0],
            ],
        }
    }
}

impl QuadrantPenalty {
    pub fn new(q: [[f64; QUADRANTS]; QUADRANTS]) -> Result<Self> {
        let p = QuadrantPenalty { q };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..QUADRANTS {
            if self.q[i][i] != 0.0 {
                return Err(Error::Penalty(format!("quadrant penalty diagonal q[{i}][{i}] is not zero")));
            }
            for j in 0..QUADRANTS {
                let v = self.q[i][j];
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::Penalty(format!("quadrant penalty q[{i}][{j}] = {v} is not a non-negative number")));
                }
                if v != self.q[j][i] {
                    return Err(Error::Penalty(format!("quadrant penalty is not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(())
    }
}

/// Tooth-tooth block before symmetrization, indexed by Universal number − 1:
/// entry `(a, b)` is the row quadrant's positional distance plus the quadrant
/// penalty between the two teeth.
pub fn raw_tooth_block(t: &CentroidTable, q: &QuadrantPenalty) -> Result<Vec<[f64; TOOTH_CLASSES]>> {
    q.validate()?;
    let mut d = Vec::with_capacity(QUADRANTS);
    for k in 1..=4u8 {
        d.push(intra_quadrant_distances(t, k)?);
    }
    let keys: Vec<(usize, usize)> = (1..=TOOTH_CLASSES as u16)
        .map(|n| {
            let (k, m) = universal_to_quadrant(n).expect("1..=32 is valid");
            (k as usize - 1, m as usize - 1)
        })
        .collect();
    let mut block = vec![[0.0; TOOTH_CLASSES]; TOOTH_CLASSES];
    for (a, &(ka, ma)) in keys.iter().enumerate() {
        for (b, &(kb, mb)) in keys.iter().enumerate() {
            block[a][b] = d[ka][ma][mb] + q.q[ka][kb];
        }
    }
    Ok(block)
}

/// Class-dissimilarity matrix over `[background, tooth_1 .. tooth_32]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyMatrix {
    pub class_order: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub background_penalty_raw: f64,
    /// Global maximum divided out in the final normalization.
    pub normalizer: f64,
    /// Maximum of the symmetrized tooth block before it was scaled to one.
    pub tooth_block_max: f64,
}

impl PenaltyMatrix {
    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.matrix[a][b]
    }

    /// Flattened row-major copy.
    pub fn flat(&self) -> Vec<f64> {
        self.matrix.iter().flatten().copied().collect()
    }

    /// Wraps an externally produced matrix after checking its invariants.
    pub fn from_matrix(matrix: Vec<Vec<f64>>, background_penalty_raw: f64, normalizer: f64) -> Result<Self> {
        let pm = PenaltyMatrix {
            class_order: class_names(),
            matrix,
            background_penalty_raw,
            normalizer,
            tooth_block_max: f64::NAN,
        };
        pm.validate()?;
        Ok(pm)
    }

    /// Zero diagonal, symmetry, entries in [0, 1] and background entries
    /// being the strict maxima of their rows.
    pub fn validate(&self) -> Result<()> {
        if self.matrix.len() != NUM_CLASSES || self.matrix.iter().any(|r| r.len() != NUM_CLASSES) {
            return Err(Error::Penalty(format!("matrix must be {NUM_CLASSES}×{NUM_CLASSES}")));
        }
        for i in 0..NUM_CLASSES {
            if self.matrix[i][i] != 0.0 {
                return Err(Error::Penalty(format!("diagonal entry {i} is {}", self.matrix[i][i])));
            }
            for j in 0..NUM_CLASSES {
                let v = self.matrix[i][j];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Penalty(format!("entry ({i},{j}) = {v} outside [0, 1]")));
                }
                if (v - self.matrix[j][i]).abs() > 1e-12 {
                    return Err(Error::Penalty(format!("not symmetric at ({i},{j})")));
                }
            }
        }
        for t in 1..NUM_CLASSES {
            let bg = self.matrix[t][0];
            if let Some(j) = (1..NUM_CLASSES).find(|&j| self.matrix[t][j] >= bg) {
                return Err(Error::Penalty(format!("tooth entry ({t},{j}) is not below the background penalty")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class");
        for name in &self.class_order {
            s.push(',');
            s.push_str(name);
        }
        s.push('\n');
        for (name, row) in self.class_order.iter().zip(&self.matrix) {
            s.push_str(name);
            for v in row {
                s.push(',');
                s.push_str(&format!("{v}"));
            }
            s.push('\n');
        }
        s
    }

    /// Parses the CSV layout written by [`Self::to_csv`]. The background
    /// penalty and normalizer are not part of the CSV and are reported as NaN.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Penalty(format!("bad header: {e}")))?
            .iter()
            .skip(1)
            .map(str::to_string)
            .collect();
        if header != class_names() {
            return Err(Error::Penalty("header does not list background, tooth_1 .. tooth_32".into()));
        }
        let mut matrix = Vec::with_capacity(NUM_CLASSES);
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Penalty(format!("row {i}: {e}")))?;
            if rec.get(0) != Some(header[i.min(NUM_CLASSES - 1)].as_str()) {
                return Err(Error::Penalty(format!("row {i} is not labelled {:?}", header.get(i))));
            }
            let row = rec
                .iter()
                .skip(1)
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Penalty(format!("row {i}: bad number {v:?}"))))
                .collect::<Result<Vec<f64>>>()?;
            matrix.push(row);
        }
        Self::from_matrix(matrix, f64::NAN, f64::NAN)
    }
}

/// Assembles the normalized 33×33 matrix:
/// 1. tooth block from [`raw_tooth_block`];
/// 2. symmetrized as `(M + Mᵀ) / 2`;
/// 3. scaled so its maximum is 1;
/// 4. background row and column set to `background_penalty`;
/// 5. whole matrix divided by its maximum.
///
/// `background_penalty` must exceed 1 so tooth-to-background confusions stay
/// the most expensive ones.
pub fn build_penalty_matrix(t: &CentroidTable, q: &QuadrantPenalty, background_penalty: f64) -> Result<PenaltyMatrix> {
    if !(background_penalty > 0.0 && background_penalty.is_finite()) {
        return Err(Error::Penalty(format!("background penalty must be positive, got {background_penalty}")));
    }
    if background_penalty <= 1.0 {
        return Err(Error::Penalty(format!(
            "background penalty {background_penalty} does not exceed the normalized tooth maximum of 1"
        )));
    }
    if !t.is_complete() {
        return Err(Error::Centroids("penalty matrix needs all 32 centroids".into()));
    }
    let raw = raw_tooth_block(t, q)?;
    let mut sym = vec![[0.0; TOOTH_CLASSES]; TOOTH_CLASSES];
    let mut tooth_max = 0.0f64;
    for a in 0..TOOTH_CLASSES {
        for b in 0..TOOTH_CLASSES {
            sym[a][b] = if a == b { 0.0 } else { (raw[a][b] + raw[b][a]) / 2.0 };
            tooth_max = tooth_max.max(sym[a][b]);
        }
    }
    if tooth_max <= 0.0 {
        return Err(Error::Penalty("all tooth-tooth penalties are zero".into()));
    }
    let mut full = vec![vec![0.0; NUM_CLASSES]; NUM_CLASSES];
    for a in 0..TOOTH_CLASSES {
        for b in 0..TOOTH_CLASSES {
            full[a + 1][b + 1] = sym[a][b] / tooth_max;
        }
        full[a + 1][0] = background_penalty;
        full[0][a + 1] = background_penalty;
    }
    let normalizer = full.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
    for row in &mut full {
        for v in row.iter_mut() {
            *v /= normalizer;
        }
    }
    let pm = PenaltyMatrix {
        class_order: class_names(),
        matrix: full,
        background_penalty_raw: background_penalty,
        normalizer,
        tooth_block_max: tooth_max,
    };
    pm.validate()?;
    Ok(pm)
}

pub fn export_penalty_matrix(pm: &PenaltyMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, pm.to_csv()).map_err(|e| Error::io(path, e))
}

pub fn export_penalty_matrix_json(pm: &PenaltyMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, pm.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn import_penalty_matrix(path: impl AsRef<Path>) -> Result<PenaltyMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PenaltyMatrix::parse_csv(&text)
}

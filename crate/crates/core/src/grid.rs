//! Index arithmetic for dense x-fastest 3D grids.

/// Voxel counts of a grid, x fastest, then y, then z.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

/// Face neighbourhood offsets.
pub const OFFSETS_6: [[isize; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

/// Full 3×3×3 neighbourhood minus the centre, in lexicographic (z, y, x) order.
pub const OFFSETS_26: [[isize; 3]; 26] = {
    let mut out = [[0isize; 3]; 26];
    let mut n = 0;
    let mut dz = -1;
    while dz <= 1 {
        let mut dy = -1;
        while dy <= 1 {
            let mut dx = -1;
            while dx <= 1 {
                if !(dx == 0 && dy == 0 && dz == 0) {
                    out[n] = [dx, dy, dz];
                    n += 1;
                }
                dx += 1;
            }
            dy += 1;
        }
        dz += 1;
    }
    out
};

/// Neighbourhood used when growing connected sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl Connectivity {
    pub fn offsets(self) -> &'static [[isize; 3]] {
        match self {
            Connectivity::Six => &OFFSETS_6,
            Connectivity::TwentySix => &OFFSETS_26,
        }
    }

    pub fn from_count(n: u32) -> Option<Self> {
        match n {
            6 => Some(Connectivity::Six),
            26 => Some(Connectivity::TwentySix),
            _ => None,
        }
    }
}

impl Grid {
    pub fn new(dims: [usize; 3]) -> Self {
        Grid { nx: dims[0], ny: dims[1], nz: dims[2] }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.nx;
        let yz = i / self.nx;
        [x, yz % self.ny, yz / self.ny]
    }

    /// Index of `i` shifted by `off`, or `None` when the shift leaves the grid.
    #[inline]
    pub fn offset(&self, i: usize, off: [isize; 3]) -> Option<usize> {
        let [x, y, z] = self.coords(i);
        let x = x as isize + off[0];
        let y = y as isize + off[1];
        let z = z as isize + off[2];
        if x < 0
            || y < 0
            || z < 0
            || x >= self.nx as isize
            || y >= self.ny as isize
            || z >= self.nz as isize
        {
            return None;
        }
        Some(self.index(x as usize, y as usize, z as usize))
    }

    pub fn neighbors(&self, i: usize, conn: Connectivity) -> impl Iterator<Item = usize> + '_ {
        conn.offsets().iter().filter_map(move |&off| self.offset(i, off))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_and_coords_are_inverse() {
        let g = Grid::new([3, 4, 5]);
        for i in 0..g.len() {
            let [x, y, z] = g.coords(i);
            assert_eq!(g.index(x, y, z), i);
        }
    }

    #[test]
    fn neighbour_counts_at_corner_and_centre() {
        let g = Grid::new([3, 3, 3]);
        assert_eq!(g.neighbors(0, Connectivity::Six).count(), 3);
        assert_eq!(g.neighbors(0, Connectivity::TwentySix).count(), 7);
        let c = g.index(1, 1, 1);
        assert_eq!(g.neighbors(c, Connectivity::Six).count(), 6);
        assert_eq!(g.neighbors(c, Connectivity::TwentySix).count(), 26);
    }
}

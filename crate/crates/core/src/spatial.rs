//! Uniform-grid nearest-neighbour search and voxel hashing.
//!
//! The grid search is exact: it returns the same nearest distance (and, on
//! ties, the same lowest index) as a brute-force scan, which is what the
//! metric and filter contracts require.

use std::collections::HashMap;

use nalgebra::Vector3;

/// Exact nearest-neighbour index over a fixed point set.
pub struct NearestNeighborGrid {
    points: Vec<Vector3<f64>>,
    cell: f64,
    origin: Vector3<f64>,
    dims: [i64; 3],
    buckets: HashMap<[i64; 3], Vec<u32>>,
}

impl NearestNeighborGrid {
    pub fn build(points: Vec<Vector3<f64>>) -> Self {
        assert!(!points.is_empty(), "empty point set");
        let mut lo = points[0];
        let mut hi = points[0];
        for p in &points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = hi - lo;
        // Aim for O(1) points per cell; the max-extent form keeps cells
        // usable for flat or near-degenerate point sets.
        let max_extent = extent.x.max(extent.y).max(extent.z);
        let cell = (max_extent / (points.len() as f64).cbrt()).max(1e-6);
        let mut buckets: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(cell_of(p, &lo, cell)).or_default().push(i as u32);
        }
        let dims = cell_of(&hi, &lo, cell);
        Self {
            points,
            cell,
            origin: lo,
            dims: [dims[0] + 1, dims[1] + 1, dims[2] + 1],
            buckets,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    /// Index and Euclidean distance of the nearest point. Ties resolve to the
    /// lowest index, exactly like a brute-force scan.
    pub fn nearest(&self, q: &Vector3<f64>) -> (usize, f64) {
        self.nearest_within(q, f64::INFINITY)
            .expect("non-empty set always has a nearest point")
    }

    /// Nearest point within `max_dist`, or `None`.
    pub fn nearest_within(&self, q: &Vector3<f64>, max_dist: f64) -> Option<(usize, f64)> {
        let qc = cell_of(q, &self.origin, self.cell);
        // Chebyshev cell distances from qc to the nearest and farthest
        // occupied-grid cells; shells outside [r_start, max_r] are empty.
        let mut r_start = 0i64;
        let mut max_r = 0i64;
        for (qk, dk) in qc.iter().zip(&self.dims) {
            let gap = (-qk).max(qk - (dk - 1)).max(0);
            r_start = r_start.max(gap);
            max_r = max_r.max(qk.abs().max((dk - 1 - qk).abs()));
        }
        let mut best: Option<(f64, u32)> = None;
        // After scanning all shells <= r, any unscanned point is at
        // Euclidean distance >= r * cell from q.
        for r in r_start..=max_r {
            if let Some((d2, _)) = best {
                if d2.sqrt() <= (r - 1) as f64 * self.cell {
                    break;
                }
            }
            if (r - 1) as f64 * self.cell > max_dist {
                break;
            }
            self.scan_shell(&qc, r, q, &mut best);
        }
        best.and_then(|(d2, idx)| {
            let d = d2.sqrt();
            (d <= max_dist).then_some((idx as usize, d))
        })
    }

    fn scan_shell(&self, qc: &[i64; 3], r: i64, q: &Vector3<f64>, best: &mut Option<(f64, u32)>) {
        let mut visit = |key: [i64; 3]| {
            if let Some(bucket) = self.buckets.get(&key) {
                for &idx in bucket {
                    let d2 = (self.points[idx as usize] - q).norm_squared();
                    let better = match *best {
                        None => true,
                        Some((bd2, bidx)) => d2 < bd2 || (d2 == bd2 && idx < bidx),
                    };
                    if better {
                        *best = Some((d2, idx));
                    }
                }
            }
        };
        // Enumerate only the portion of the shell that intersects the
        // occupied grid box.
        let clip = |k: usize| ((-r).max(-qc[k]), r.min(self.dims[k] - 1 - qc[k]));
        let (x0, x1) = clip(0);
        let (y0, y1) = clip(1);
        let (z0, z1) = clip(2);
        for dz in z0..=z1 {
            for dy in y0..=y1 {
                for dx in x0..=x1 {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                        continue;
                    }
                    visit([qc[0] + dx, qc[1] + dy, qc[2] + dz]);
                }
            }
        }
    }
}

fn cell_of(p: &Vector3<f64>, origin: &Vector3<f64>, cell: f64) -> [i64; 3] {
    [
        ((p.x - origin.x) / cell).floor() as i64,
        ((p.y - origin.y) / cell).floor() as i64,
        ((p.z - origin.z) / cell).floor() as i64,
    ]
}

/// Sparse voxel membership over 3-D positions, used for the 6-connected
/// neighbourhood tests during segmentation refinement.
pub struct VoxelSet {
    cell: f64,
    occupied: HashMap<[i64; 3], bool>,
}

impl VoxelSet {
    pub fn new(cell: f64) -> Self {
        Self {
            cell,
            occupied: HashMap::new(),
        }
    }

    pub fn key(&self, p: &Vector3<f64>) -> [i64; 3] {
        [
            (p.x / self.cell).floor() as i64,
            (p.y / self.cell).floor() as i64,
            (p.z / self.cell).floor() as i64,
        ]
    }

    pub fn insert(&mut self, p: &Vector3<f64>) {
        self.occupied.insert(self.key(p), true);
    }

    pub fn contains_key(&self, key: &[i64; 3]) -> bool {
        self.occupied.contains_key(key)
    }

    /// True when the voxel containing `p` or any of its six face neighbours
    /// is occupied.
    pub fn occupied_near(&self, p: &Vector3<f64>) -> bool {
        let k = self.key(p);
        if self.contains_key(&k) {
            return true;
        }
        const OFFSETS: [[i64; 3]; 6] = [
            [1, 0, 0],
            [-1, 0, 0],
            [0, 1, 0],
            [0, -1, 0],
            [0, 0, 1],
            [0, 0, -1],
        ];
        OFFSETS
            .iter()
            .any(|o| self.contains_key(&[k[0] + o[0], k[1] + o[1], k[2] + o[2]]))
    }
}

/// Brute-force nearest distance; the oracle the grid is tested against and
/// the reference used by metric tests.
pub fn brute_force_nearest(points: &[Vector3<f64>], q: &Vector3<f64>) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d2 = (p - q).norm_squared();
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    (best.0, best.1.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_matches_brute_force_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for round in 0..20 {
            let n = 50 + round * 37;
            let pts: Vec<_> = (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-0.2..0.2),
                    )
                })
                .collect();
            let grid = NearestNeighborGrid::build(pts.clone());
            for _ in 0..50 {
                let q = Vector3::new(
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.0..1.0),
                );
                let (gi, gd) = grid.nearest(&q);
                let (bi, bd) = brute_force_nearest(&pts, &q);
                assert_eq!(gi, bi);
                assert_eq!(gd, bd, "distances must be bit-identical");
            }
        }
    }

    #[test]
    fn nearest_within_radius() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)];
        let grid = NearestNeighborGrid::build(pts);
        let q = Vector3::new(0.4, 0.0, 0.0);
        assert_eq!(grid.nearest_within(&q, 0.5).map(|(i, _)| i), Some(0));
        assert!(grid.nearest_within(&q, 0.1).is_none());
    }

    #[test]
    fn degenerate_single_cluster() {
        let pts = vec![Vector3::new(0.5, 0.5, 0.5); 5];
        let grid = NearestNeighborGrid::build(pts);
        let (i, d) = grid.nearest(&Vector3::new(0.5, 0.5, 0.6));
        assert_eq!(i, 0); // tie resolves to lowest index
        assert!((d - 0.1).abs() < 1e-12);
    }

    #[test]
    fn voxel_six_neighbourhood() {
        let mut set = VoxelSet::new(0.01);
        set.insert(&Vector3::new(0.005, 0.005, 0.005)); // voxel (0,0,0)
        assert!(set.occupied_near(&Vector3::new(0.002, 0.002, 0.002))); // same voxel
        assert!(set.occupied_near(&Vector3::new(0.015, 0.005, 0.005))); // face neighbour
        assert!(!set.occupied_near(&Vector3::new(0.015, 0.015, 0.005))); // diagonal
        assert!(!set.occupied_near(&Vector3::new(0.035, 0.005, 0.005))); // two away
    }
}

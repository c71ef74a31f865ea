//! World-frame feature map: a uniform-grid spatial index with exact
//! k-nearest-neighbor queries, plus voxel deduplication on insert.

use std::collections::{HashMap, HashSet};

use nalgebra::Vector3;

/// Uniform 2D grid over (x, y); points carry z but queries are planar
/// distances in 3D (points live at z ~ 0).
#[derive(Debug, Clone)]
pub struct MapIndex {
    cell: f64,
    points: Vec<Vector3<f64>>,
    grid: HashMap<(i64, i64), Vec<u32>>,
    /// Occupied-cell bounding box (min_x, min_y, max_x, max_y).
    bounds: Option<(i64, i64, i64, i64)>,
}

impl MapIndex {
    pub fn new(cell: f64) -> Self {
        assert!(cell > 0.0);
        Self {
            cell,
            points: Vec::new(),
            grid: HashMap::new(),
            bounds: None,
        }
    }

    pub fn from_points(points: &[Vector3<f64>], cell: f64) -> Self {
        let mut index = Self::new(cell);
        for p in points {
            index.insert(*p);
        }
        index
    }

    fn key(&self, p: &Vector3<f64>) -> (i64, i64) {
        (
            (p.x / self.cell).floor() as i64,
            (p.y / self.cell).floor() as i64,
        )
    }

    pub fn insert(&mut self, p: Vector3<f64>) -> usize {
        let id = self.points.len();
        let key = self.key(&p);
        self.points.push(p);
        self.grid.entry(key).or_default().push(id as u32);
        self.bounds = Some(match self.bounds {
            None => (key.0, key.1, key.0, key.1),
            Some((x0, y0, x1, y1)) => (x0.min(key.0), y0.min(key.1), x1.max(key.0), y1.max(key.1)),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, id: usize) -> Vector3<f64> {
        self.points[id]
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    /// Exact k nearest neighbors of `query`, nearest first, as
    /// (point id, distance) pairs. Expands grid rings outward until the
    /// closed ring bound proves no closer point can remain.
    pub fn knn(&self, query: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        if self.points.is_empty() || k == 0 {
            return Vec::new();
        }
        let (qx, qy) = self.key(query);
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);

        let consider = |id: u32, best: &mut Vec<(usize, f64)>| {
            let d = (self.points[id as usize] - query).norm();
            let pos = best.partition_point(|(_, bd)| *bd <= d);
            if pos < k {
                best.insert(pos, (id as usize, d));
                best.truncate(k);
            }
        };

        // Ring r covers cells at Chebyshev distance r; any point in a ring
        // beyond r lies at least r * cell from the query, which bounds the
        // search once k candidates are closer than that.
        let (x0, y0, x1, y1) = self.bounds.expect("non-empty index has bounds");
        let max_ring = (qx - x0)
            .abs()
            .max((x1 - qx).abs())
            .max((qy - y0).abs())
            .max((y1 - qy).abs());

        let mut r = 0i64;
        loop {
            let visit = |cx: i64, cy: i64, best: &mut Vec<(usize, f64)>| {
                if let Some(ids) = self.grid.get(&(cx, cy)) {
                    for &id in ids {
                        consider(id, best);
                    }
                }
            };
            if r == 0 {
                visit(qx, qy, &mut best);
            } else {
                for dx in -r..=r {
                    visit(qx + dx, qy - r, &mut best);
                    visit(qx + dx, qy + r, &mut best);
                }
                for dy in (-r + 1)..r {
                    visit(qx - r, qy + dy, &mut best);
                    visit(qx + r, qy + dy, &mut best);
                }
            }
            if best.len() == k && best[k - 1].1 <= r as f64 * self.cell {
                break;
            }
            if r >= max_ring {
                break;
            }
            r += 1;
        }
        best
    }
}

/// Feature map with voxel deduplication: a new point lands only if its
/// dedup voxel is still free, which bounds map growth.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    index: MapIndex,
    dedup_cell: f64,
    occupied: HashSet<(i64, i64)>,
    /// Scan id that contributed each point.
    source_scan: Vec<u32>,
}

impl FeatureMap {
    pub fn new(search_cell: f64, dedup_cell: f64) -> Self {
        Self {
            index: MapIndex::new(search_cell),
            dedup_cell,
            occupied: HashSet::new(),
            source_scan: Vec::new(),
        }
    }

    pub fn insert_deduped(&mut self, p: Vector3<f64>, scan_id: u32) -> bool {
        let key = (
            (p.x / self.dedup_cell).floor() as i64,
            (p.y / self.dedup_cell).floor() as i64,
        );
        if self.occupied.insert(key) {
            self.index.insert(p);
            self.source_scan.push(scan_id);
            true
        } else {
            false
        }
    }

    pub fn index(&self) -> &MapIndex {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn source_scan(&self, id: usize) -> u32 {
        self.source_scan[id]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_knn(points: &[Vector3<f64>], q: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (p - q).norm()))
            .collect();
        all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        all.truncate(k);
        all
    }

    #[test]
    fn empty_map_returns_empty() {
        let index = MapIndex::new(0.5);
        assert!(index.knn(&Vector3::zeros(), 5).is_empty());
    }

    #[test]
    fn query_point_in_map_is_its_own_nearest() {
        let mut index = MapIndex::new(0.5);
        index.insert(Vector3::new(1.0, 2.0, 0.0));
        index.insert(Vector3::new(3.0, 1.0, 0.0));
        let nn = index.knn(&Vector3::new(1.0, 2.0, 0.0), 1);
        assert_eq!(nn[0].0, 0);
        assert_eq!(nn[0].1, 0.0);
    }

    #[test]
    fn knn_matches_brute_force_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let points: Vec<Vector3<f64>> = (0..1000)
            .map(|_| Vector3::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), 0.0))
            .collect();
        let index = MapIndex::from_points(&points, 0.5);
        for _ in 0..100 {
            let q = Vector3::new(rng.gen_range(-25.0..25.0), rng.gen_range(-25.0..25.0), 0.0);
            let got = index.knn(&q, 5);
            let want = brute_force_knn(&points, &q, 5);
            let got_ids: Vec<usize> = got.iter().map(|(i, _)| *i).collect();
            let want_ids: Vec<usize> = want.iter().map(|(i, _)| *i).collect();
            assert_eq!(got_ids, want_ids, "query {q:?}");
        }
    }

    #[test]
    fn knn_with_k_larger_than_map() {
        let points = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)];
        let index = MapIndex::from_points(&points, 0.5);
        let nn = index.knn(&Vector3::new(0.2, 0.0, 0.0), 5);
        assert_eq!(nn.len(), 2);
    }

    #[test]
    fn dedup_rejects_points_in_occupied_voxel() {
        let mut map = FeatureMap::new(0.5, 0.1);
        assert!(map.insert_deduped(Vector3::new(0.01, 0.02, 0.0), 0));
        assert!(!map.insert_deduped(Vector3::new(0.05, 0.05, 0.0), 1));
        assert!(map.insert_deduped(Vector3::new(0.15, 0.05, 0.0), 1));
        assert_eq!(map.len(), 2);
    }
}

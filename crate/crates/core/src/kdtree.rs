//! Exact k-nearest-neighbor and radius search over fixed-dimension f64
//! vectors.
//!
//! Low dimensions use a median-split KD-tree with exact backtracking.
//! High-dimensional queries (D > 32, descriptor space) fall back to an
//! exhaustive scan, where a KD-tree would visit nearly every node anyway.
//! Both paths honor the same contract: results ascend by distance, ties
//! broken by insertion index.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::geometry::Point3;

/// Dimension above which `build` switches to the exhaustive scan.
pub const TREE_DIM_LIMIT: usize = 32;
const LEAF_SIZE: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KdTreeError {
    #[error("cannot index an empty point set")]
    Empty,
    #[error("dimension must be positive")]
    ZeroDim,
    #[error("data length {len} is not a multiple of dimension {dim}")]
    RaggedData { len: usize, dim: usize },
    #[error("query dimension {query} does not match index dimension {dim}")]
    DimensionMismatch { query: usize, dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchStrategy {
    Tree,
    Exhaustive,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

/// Immutable spatial index; safe for concurrent queries after build.
#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    data: Vec<f64>,
    order: Vec<u32>,
    nodes: Vec<Node>,
    strategy: SearchStrategy,
}

/// A single query hit: insertion index of the entry and Euclidean distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand {
    d2: f64,
    idx: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KdTree {
    /// Indexes `data` as `data.len() / dim` points of dimension `dim`,
    /// choosing the search strategy from the dimension.
    pub fn build(dim: usize, data: Vec<f64>) -> Result<Self, KdTreeError> {
        let strategy = if dim > TREE_DIM_LIMIT {
            SearchStrategy::Exhaustive
        } else {
            SearchStrategy::Tree
        };
        Self::build_with(dim, data, strategy)
    }

    /// Same as `build` with an explicit strategy (used to cross-check the
    /// two paths against each other).
    pub fn build_with(dim: usize, data: Vec<f64>, strategy: SearchStrategy) -> Result<Self, KdTreeError> {
        if dim == 0 {
            return Err(KdTreeError::ZeroDim);
        }
        if data.is_empty() {
            return Err(KdTreeError::Empty);
        }
        if data.len() % dim != 0 {
            return Err(KdTreeError::RaggedData { len: data.len(), dim });
        }
        let n = data.len() / dim;
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut nodes = Vec::new();
        if strategy == SearchStrategy::Tree {
            build_node(dim, &data, &mut order, 0, n, &mut nodes);
        }
        Ok(Self { dim, data, order, nodes, strategy })
    }

    pub fn from_points(points: &[Point3]) -> Result<Self, KdTreeError> {
        let mut data = Vec::with_capacity(points.len() * 3);
        for p in points {
            data.extend_from_slice(&[p.x, p.y, p.z]);
        }
        Self::build(3, data)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn point(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }

    /// The `min(k, len)` nearest entries, ascending by (distance, index).
    pub fn knn(&self, query: &[f64], k: usize) -> Result<Vec<Hit>, KdTreeError> {
        if query.len() != self.dim {
            return Err(KdTreeError::DimensionMismatch { query: query.len(), dim: self.dim });
        }
        let k = k.min(self.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut heap: BinaryHeap<Cand> = BinaryHeap::with_capacity(k + 1);
        match self.strategy {
            SearchStrategy::Tree => self.knn_node(0, query, k, &mut heap),
            SearchStrategy::Exhaustive => {
                for idx in 0..self.len() {
                    offer(&mut heap, k, Cand { d2: dist2(self.point(idx), query), idx: idx as u32 });
                }
            }
        }
        let mut out: Vec<Cand> = heap.into_vec();
        out.sort_unstable();
        Ok(out
            .into_iter()
            .map(|c| Hit { index: c.idx as usize, distance: c.d2.sqrt() })
            .collect())
    }

    fn knn_node(&self, node: usize, query: &[f64], k: usize, heap: &mut BinaryHeap<Cand>) {
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for &idx in &self.order[*start..*end] {
                    offer(heap, k, Cand { d2: dist2(self.point(idx as usize), query), idx });
                }
            }
            Node::Split { dim, value, left, right } => {
                let delta = query[*dim] - value;
                let (near, far) = if delta <= 0.0 { (*left, *right) } else { (*right, *left) };
                self.knn_node(near, query, k, heap);
                // The far side can still hold a closer point (or an equal
                // distance with a lower index), so prune only when the
                // plane is strictly farther than the current worst.
                let visit_far = heap.len() < k || delta * delta <= heap.peek().unwrap().d2;
                if visit_far {
                    self.knn_node(far, query, k, heap);
                }
            }
        }
    }

    /// Insertion indices of all entries with distance ≤ `radius`,
    /// ascending by index.
    pub fn within_radius(&self, query: &[f64], radius: f64) -> Result<Vec<usize>, KdTreeError> {
        if query.len() != self.dim {
            return Err(KdTreeError::DimensionMismatch { query: query.len(), dim: self.dim });
        }
        let r2 = radius * radius;
        let mut out = Vec::new();
        match self.strategy {
            SearchStrategy::Tree => self.radius_node(0, query, r2, &mut out),
            SearchStrategy::Exhaustive => {
                for idx in 0..self.len() {
                    if dist2(self.point(idx), query) <= r2 {
                        out.push(idx);
                    }
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    fn radius_node(&self, node: usize, query: &[f64], r2: f64, out: &mut Vec<usize>) {
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for &idx in &self.order[*start..*end] {
                    if dist2(self.point(idx as usize), query) <= r2 {
                        out.push(idx as usize);
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let delta = query[*dim] - value;
                let (near, far) = if delta <= 0.0 { (*left, *right) } else { (*right, *left) };
                self.radius_node(near, query, r2, out);
                if delta * delta <= r2 {
                    self.radius_node(far, query, r2, out);
                }
            }
        }
    }
}

fn offer(heap: &mut BinaryHeap<Cand>, k: usize, cand: Cand) {
    if heap.len() < k {
        heap.push(cand);
    } else if cand < *heap.peek().unwrap() {
        heap.pop();
        heap.push(cand);
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn build_node(
    dim: usize,
    data: &[f64],
    order: &mut [u32],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let slot = nodes.len();
    nodes.push(Node::Leaf { start, end });
    let slice = &mut order[start..end];
    if slice.len() <= LEAF_SIZE {
        return slot;
    }

    // Split along the widest-spread dimension; a zero spread means all
    // points coincide and the range stays a leaf.
    let mut split_dim = 0;
    let mut best_spread = 0.0;
    for d in 0..dim {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &idx in slice.iter() {
            let v = data[idx as usize * dim + d];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi - lo > best_spread {
            best_spread = hi - lo;
            split_dim = d;
        }
    }
    if best_spread == 0.0 {
        return slot;
    }

    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| {
        data[a as usize * dim + split_dim].total_cmp(&data[b as usize * dim + split_dim])
    });
    let value = data[slice[mid] as usize * dim + split_dim];

    let left = build_node(dim, data, order, start, start + mid, nodes);
    let right = build_node(dim, data, order, start + mid, end, nodes);
    nodes[slot] = Node::Split { dim: split_dim, value, left, right };
    slot
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn brute_knn(dim: usize, data: &[f64], query: &[f64], k: usize) -> Vec<Hit> {
        let mut cands: Vec<Cand> = (0..data.len() / dim)
            .map(|i| Cand { d2: dist2(&data[i * dim..(i + 1) * dim], query), idx: i as u32 })
            .collect();
        cands.sort_unstable();
        cands
            .into_iter()
            .take(k)
            .map(|c| Hit { index: c.idx as usize, distance: c.d2.sqrt() })
            .collect()
    }

    fn random_data(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<f64> {
        (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn single_entry_always_returned() {
        let tree = KdTree::build(3, vec![1.0, 2.0, 3.0]).unwrap();
        let hits = tree.knn(&[0.0, 0.0, 0.0], 5).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].index, 0);
    }

    #[test]
    fn empty_input_rejected() {
        assert_eq!(KdTree::build(3, vec![]).unwrap_err(), KdTreeError::Empty);
    }

    #[test]
    fn duplicate_points_tie_break_by_index() {
        // Three identical points: ties must come back in insertion order.
        let data = vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let tree = KdTree::build(3, data).unwrap();
        let hits = tree.knn(&[1.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(hits[0].index, 0);
        assert_eq!(hits[1].index, 1);
    }

    #[test]
    fn high_dim_build_selects_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = random_data(&mut rng, 50, 64);
        let tree = KdTree::build(64, data).unwrap();
        assert_eq!(tree.strategy, SearchStrategy::Exhaustive);
    }

    #[test]
    fn tree_matches_brute_force_large() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = random_data(&mut rng, 10_000, 3);
        let tree = KdTree::build(3, data.clone()).unwrap();
        for _ in 0..100 {
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-1.2..1.2)).collect();
            assert_eq!(tree.knn(&q, 8).unwrap(), brute_knn(3, &data, &q, 8));
        }
    }

    #[test]
    fn forced_tree_matches_exhaustive_high_dim() {
        // Above TREE_DIM_LIMIT both strategies must agree exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for &d in &[64usize, 128, 256] {
            let data = random_data(&mut rng, 300, d);
            let tree = KdTree::build_with(d, data.clone(), SearchStrategy::Tree).unwrap();
            let flat = KdTree::build_with(d, data, SearchStrategy::Exhaustive).unwrap();
            for _ in 0..20 {
                let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                assert_eq!(tree.knn(&q, 5).unwrap(), flat.knn(&q, 5).unwrap());
            }
        }
    }

    #[test]
    fn radius_query_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let data = random_data(&mut rng, 2_000, 3);
        let tree = KdTree::build(3, data.clone()).unwrap();
        for _ in 0..50 {
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = rng.random_range(0.05..0.5);
            let got = tree.within_radius(&q, r).unwrap();
            let want: Vec<usize> = (0..2_000)
                .filter(|&i| dist2(&data[i * 3..i * 3 + 3], &q) <= r * r)
                .collect();
            assert_eq!(got, want);
        }
    }

    proptest! {
        #[test]
        fn knn_equals_brute_force(
            seed in 0u64..1_000,
            n in 1usize..400,
            dim in 1usize..6,
            k in 1usize..12,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Coarse grid coordinates force plenty of exact distance ties.
            let data: Vec<f64> = (0..n * dim)
                .map(|_| rng.random_range(-3i32..4) as f64)
                .collect();
            let tree = KdTree::build(dim, data.clone()).unwrap();
            let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-3i32..4) as f64).collect();
            prop_assert_eq!(tree.knn(&q, k).unwrap(), brute_knn(dim, &data, &q, k));
        }

        #[test]
        fn knn_distances_non_decreasing(seed in 0u64..1_000, n in 2usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = random_data(&mut rng, n, 3);
            let tree = KdTree::build(3, data).unwrap();
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let hits = tree.knn(&q, n).unwrap();
            for w in hits.windows(2) {
                prop_assert!(w[0].distance <= w[1].distance);
            }
        }
    }
}

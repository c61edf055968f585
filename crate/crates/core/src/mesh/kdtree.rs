//! Exact kd-tree nearest-neighbour search in three dimensions.
//!
//! Distances are squared Euclidean computed as `dx*dx + dy*dy + dz*dz`, the
//! same expression brute-force callers use, so results match exhaustive
//! search bit-for-bit. Ties are ordered by point index.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::Vec3;
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

#[inline]
pub fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    idx: usize,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.idx.cmp(&other.idx))
    }
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            let p = self.points[i];
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        let mid = start + (end - start) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// Nearest point index and its squared distance. `None` on an empty tree.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        self.knn(q, 1, None).into_iter().next()
    }

    /// The `k` nearest points sorted by `(distance, index)`, optionally
    /// skipping one index.
    pub fn knn(&self, q: &Vec3, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, q, k, exclude, &mut heap);
        let mut out: Vec<_> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.idx, c.d2)).collect()
    }

    fn search(
        &self,
        node: usize,
        q: &Vec3,
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let c = Candidate { d2: dist2(q, &self.points[i]), idx: i };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, exclude, heap);
                // Points equal to the split value can sit on either side, so only
                // a strictly larger plane distance may prune.
                if heap.len() < k || diff * diff <= heap.peek().unwrap().d2 {
                    self.search(far, q, k, exclude, heap);
                }
            }
        }
    }
}

/// Exact `k`-nearest-neighbour graph, self excluded, neighbours by ascending
/// distance (ties by index).
pub fn knn_graph(points: &[Vec3], k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if points.len() < k + 1 {
        return Err(Error::InsufficientPoints { needed: k + 1, got: points.len() });
    }
    let tree = KdTree::new(points);
    Ok(points
        .iter()
        .enumerate()
        .map(|(i, p)| tree.knn(p, k, Some(i)).into_iter().map(|(j, _)| j).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_knn(points: &[Vec3], i: usize, k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = (0..points.len())
            .filter(|&j| j != i)
            .map(|j| (dist2(&points[i], &points[j]), j))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, j)| j).collect()
    }

    #[test]
    fn thirteen_points_k12_full_degree() {
        let pts: Vec<Vec3> = (0..13).map(|i| Vec3::new(i as f64, (i * i) as f64 * 0.1, 0.0)).collect();
        let g = knn_graph(&pts, 12).unwrap();
        assert!(g.iter().all(|n| n.len() == 12));
        assert!(g.iter().enumerate().all(|(i, n)| !n.contains(&i)));
    }

    #[test]
    fn collinear_endpoints() {
        let pts: Vec<Vec3> = (0..4).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let g = knn_graph(&pts, 1).unwrap();
        assert_eq!(g[0], vec![1]);
        assert_eq!(g[3], vec![2]);
    }

    #[test]
    fn insufficient_points() {
        let pts = vec![Vec3::zeros(); 5];
        assert!(matches!(knn_graph(&pts, 5), Err(Error::InsufficientPoints { .. })));
    }

    #[test]
    fn random_cloud_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Vec3> = (0..100).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let g = knn_graph(&pts, 5).unwrap();
        for i in 0..pts.len() {
            assert_eq!(g[i], brute_knn(&pts, i, 5));
        }
    }

    #[test]
    fn ties_resolved_by_index() {
        // Integer lattice has many equal distances.
        let mut pts = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    pts.push(Vec3::new(i as f64, j as f64, k as f64));
                }
            }
        }
        let g = knn_graph(&pts, 6).unwrap();
        for i in 0..pts.len() {
            assert_eq!(g[i], brute_knn(&pts, i, 6));
        }
    }

    proptest! {
        #[test]
        fn knn_matches_exhaustive(
            coords in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 2..200),
            k in 1usize..8,
        ) {
            let pts: Vec<Vec3> = coords.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect();
            prop_assume!(pts.len() > k);
            let g = knn_graph(&pts, k).unwrap();
            for i in 0..pts.len() {
                prop_assert_eq!(&g[i], &brute_knn(&pts, i, k));
            }
        }
    }
}

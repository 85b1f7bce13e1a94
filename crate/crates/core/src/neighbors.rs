//! Max-norm neighbor queries over small point sets.
//!
//! Point sets up to [`BRUTE_FORCE_LIMIT`] points are scanned directly; larger
//! sets go through a k-d tree with bounding-box pruning. Both paths return
//! identical answers.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

pub const BRUTE_FORCE_LIMIT: usize = 512;
const LEAF_SIZE: usize = 16;

/// Row-major point storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Points {
    data: Vec<f64>,
    dim: usize,
    len: usize,
}

impl Points {
    pub fn new(data: Vec<f64>, dim: usize) -> Self {
        assert!(dim == 0 || data.len().is_multiple_of(dim), "ragged point data");
        let len = data.len().checked_div(dim).unwrap_or(0);
        Self { data, dim, len }
    }

    /// Stacks equal-length columns into points.
    pub fn from_columns(columns: &[&[f64]]) -> Self {
        let dim = columns.len();
        let len = columns.first().map_or(0, |c| c.len());
        let mut data = Vec::with_capacity(dim * len);
        for i in 0..len {
            data.extend(columns.iter().map(|c| c[i]));
        }
        Self { data, dim, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[inline]
pub fn max_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (p, q)| m.max((p - q).abs()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

#[derive(Debug, Clone)]
struct Node {
    start: usize,
    end: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    children: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct KdTree<'a> {
    points: &'a Points,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a Points) -> Self {
        let mut tree = KdTree {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_node(0, points.len());
        }
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let dim = self.points.dim();
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for &i in &self.order[start..end] {
            for (d, &v) in self.points.row(i).iter().enumerate() {
                lo[d] = lo[d].min(v);
                hi[d] = hi[d].max(v);
            }
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            start,
            end,
            lo: lo.clone(),
            hi: hi.clone(),
            children: None,
        });
        if end - start > LEAF_SIZE && dim > 0 {
            let split_dim = (0..dim)
                .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
                .unwrap_or(0);
            let mid = start + (end - start) / 2;
            let points = self.points;
            self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
                points.row(a)[split_dim].total_cmp(&points.row(b)[split_dim])
            });
            let left = self.build_node(start, mid);
            let right = self.build_node(mid, end);
            self.nodes[id].children = Some((left, right));
        }
        id
    }

    fn box_distance(node: &Node, q: &[f64]) -> f64 {
        q.iter()
            .zip(node.lo.iter().zip(&node.hi))
            .fold(0.0, |m, (&v, (&lo, &hi))| m.max(lo - v).max(v - hi))
    }

    fn box_farthest(node: &Node, q: &[f64]) -> f64 {
        q.iter()
            .zip(node.lo.iter().zip(&node.hi))
            .fold(0.0, |m, (&v, (&lo, &hi))| m.max(v - lo).max(hi - v))
    }

    /// The `k` nearest points to `q` (ties by index), nearest first.
    pub fn k_nearest(&self, q: &[f64], k: usize) -> Vec<(f64, usize)> {
        let mut heap: BinaryHeap<HeapItem> = BinaryHeap::with_capacity(k + 1);
        if k > 0 && !self.nodes.is_empty() {
            self.knn_node(0, q, k, &mut heap);
        }
        let mut out: Vec<(f64, usize)> = heap.into_iter().map(|h| (h.0, h.1)).collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out
    }

    fn knn_node(&self, id: usize, q: &[f64], k: usize, heap: &mut BinaryHeap<HeapItem>) {
        let node = &self.nodes[id];
        if heap.len() == k && Self::box_distance(node, q) > heap.peek().map_or(f64::INFINITY, |h| h.0) {
            return;
        }
        match node.children {
            None => {
                for &i in &self.order[node.start..node.end] {
                    let item = HeapItem(max_norm(q, self.points.row(i)), i);
                    if heap.len() < k {
                        heap.push(item);
                    } else if item < *heap.peek().expect("non-empty heap") {
                        heap.pop();
                        heap.push(item);
                    }
                }
            }
            Some((left, right)) => {
                let dl = Self::box_distance(&self.nodes[left], q);
                let dr = Self::box_distance(&self.nodes[right], q);
                let (first, second) = if dl <= dr { (left, right) } else { (right, left) };
                self.knn_node(first, q, k, heap);
                self.knn_node(second, q, k, heap);
            }
        }
    }

    /// Number of points with distance to `q` strictly below `radius`.
    pub fn count_within(&self, q: &[f64], radius: f64) -> usize {
        if self.nodes.is_empty() {
            return 0;
        }
        self.count_node(0, q, radius)
    }

    fn count_node(&self, id: usize, q: &[f64], radius: f64) -> usize {
        let node = &self.nodes[id];
        if Self::box_distance(node, q) >= radius {
            return 0;
        }
        if Self::box_farthest(node, q) < radius {
            return node.end - node.start;
        }
        match node.children {
            None => self.order[node.start..node.end]
                .iter()
                .filter(|&&i| max_norm(q, self.points.row(i)) < radius)
                .count(),
            Some((left, right)) => self.count_node(left, q, radius) + self.count_node(right, q, radius),
        }
    }
}

/// Neighbor queries that pick brute force or a k-d tree by size.
#[derive(Debug, Clone)]
pub enum NeighborIndex<'a> {
    Brute(&'a Points),
    Tree(KdTree<'a>),
}

impl<'a> NeighborIndex<'a> {
    pub fn new(points: &'a Points) -> Self {
        if points.len() > BRUTE_FORCE_LIMIT {
            NeighborIndex::Tree(KdTree::build(points))
        } else {
            NeighborIndex::Brute(points)
        }
    }

    pub fn brute(points: &'a Points) -> Self {
        NeighborIndex::Brute(points)
    }

    pub fn tree(points: &'a Points) -> Self {
        NeighborIndex::Tree(KdTree::build(points))
    }

    fn points(&self) -> &Points {
        match self {
            NeighborIndex::Brute(p) => p,
            NeighborIndex::Tree(t) => t.points,
        }
    }

    /// Distance from point `i` to its `k`-th nearest other point.
    pub fn kth_distance(&self, i: usize, k: usize) -> f64 {
        let points = self.points();
        let q = points.row(i);
        match self {
            NeighborIndex::Brute(_) => {
                let mut d: Vec<f64> = (0..points.len())
                    .filter(|&j| j != i)
                    .map(|j| max_norm(q, points.row(j)))
                    .collect();
                let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
                *kth
            }
            NeighborIndex::Tree(t) => {
                // Self is among the k + 1 nearest at distance zero.
                let nn = t.k_nearest(q, k + 1);
                let mut seen_self = false;
                let mut rank = 0;
                for (d, j) in nn {
                    if j == i && !seen_self {
                        seen_self = true;
                        continue;
                    }
                    rank += 1;
                    if rank == k {
                        return d;
                    }
                }
                unreachable!("k-nearest query returned fewer than k other points")
            }
        }
    }

    /// Number of other points strictly within `radius` of point `i`.
    pub fn count_others_within(&self, i: usize, radius: f64) -> usize {
        if radius <= 0.0 {
            return 0;
        }
        let points = self.points();
        let q = points.row(i);
        let all = match self {
            NeighborIndex::Brute(_) => (0..points.len())
                .filter(|&j| max_norm(q, points.row(j)) < radius)
                .count(),
            NeighborIndex::Tree(t) => t.count_within(q, radius),
        };
        all - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn random_points(n: usize, dim: usize, s: u64) -> Points {
        let mut rng = seed::rng(s);
        Points::new((0..n * dim).map(|_| rng.random::<f64>()).collect(), dim)
    }

    #[test]
    fn tree_matches_brute_force() {
        for (n, dim) in [(40, 1), (700, 2), (900, 3)] {
            let pts = random_points(n, dim, n as u64);
            let brute = NeighborIndex::brute(&pts);
            let tree = NeighborIndex::tree(&pts);
            for i in (0..n).step_by(7) {
                for k in [1, 5, 17] {
                    let a = brute.kth_distance(i, k);
                    let b = tree.kth_distance(i, k);
                    assert_eq!(a, b, "n={n} i={i} k={k}");
                    assert_eq!(brute.count_others_within(i, a), tree.count_others_within(i, a));
                    assert_eq!(
                        brute.count_others_within(i, a * 1.5),
                        tree.count_others_within(i, a * 1.5)
                    );
                }
            }
        }
    }

    #[test]
    fn k_nearest_includes_self_first() {
        let pts = random_points(100, 2, 3);
        let t = KdTree::build(&pts);
        let nn = t.k_nearest(pts.row(10), 4);
        assert_eq!(nn[0], (0.0, 10));
        assert_eq!(nn.len(), 4);
        assert!(nn.windows(2).all(|w| w[0].0 <= w[1].0));
    }

    #[test]
    fn count_strictness() {
        let pts = Points::new(vec![0.0, 1.0, 2.0, 3.0], 1);
        let idx = NeighborIndex::brute(&pts);
        assert_eq!(idx.count_others_within(0, 1.0), 0);
        assert_eq!(idx.count_others_within(0, 1.0 + 1e-12), 1);
        assert_eq!(idx.kth_distance(1, 2), 1.0);
        assert_eq!(idx.kth_distance(0, 3), 3.0);
    }
}

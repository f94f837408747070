//! Exact Euclidean neighbor queries over a k-d tree.
//!
//! All distances go through [`sq_dist`], so a radius query with the k-th
//! squared distance as radius returns exactly the tied points.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::{ArrayView1, ArrayView2};

const LEAF_SIZE: usize = 16;

#[inline]
pub fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Static k-d tree over the rows of a matrix. Stores row indices only.
#[derive(Debug, Clone)]
pub struct KdTree {
    nodes: Vec<Node>,
    order: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    sq: f64,
    index: usize,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sq
            .total_cmp(&other.sq)
            .then(self.index.cmp(&other.index))
    }
}

impl KdTree {
    pub fn build(data: ArrayView2<f64>) -> Self {
        let mut tree = KdTree {
            nodes: Vec::new(),
            order: (0..data.nrows()).collect(),
        };
        if data.nrows() > 0 {
            tree.build_node(data, 0, data.nrows());
        }
        tree
    }

    fn build_node(&mut self, data: ArrayView2<f64>, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        if end - start <= LEAF_SIZE {
            return id;
        }
        // split on the widest dimension at the median
        let p = data.ncols();
        let mut best = (0usize, 0.0f64);
        for d in 0..p {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in &self.order[start..end] {
                let v = data[[i, d]];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > best.1 {
                best = (d, hi - lo);
            }
        }
        if best.1 <= 0.0 {
            return id;
        }
        let dim = best.0;
        let mid = (start + end) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            data[[a, dim]].total_cmp(&data[[b, dim]])
        });
        let value = data[[self.order[mid], dim]];
        let left = self.build_node(data, start, mid);
        let right = self.build_node(data, mid, end);
        self.nodes[id] = Node::Split {
            dim,
            value,
            left,
            right,
        };
        id
    }

    /// Squared distance to the `k`-th nearest row, skipping row `exclude`.
    pub fn kth_sq_distance(
        &self,
        data: ArrayView2<f64>,
        query: ArrayView1<f64>,
        k: usize,
        exclude: Option<usize>,
    ) -> f64 {
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        if !self.nodes.is_empty() {
            self.knn(0, data, query, k, exclude, &mut heap);
        }
        heap.peek().map_or(f64::INFINITY, |c| c.sq)
    }

    fn knn(
        &self,
        node: usize,
        data: ArrayView2<f64>,
        query: ArrayView1<f64>,
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
                    let sq = sq_dist(query, data.row(i));
                    if heap.len() < k {
                        heap.push(Candidate { sq, index: i });
                    } else if sq < heap.peek().expect("k >= 1").sq {
                        heap.pop();
                        heap.push(Candidate { sq, index: i });
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = query[dim] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.knn(near, data, query, k, exclude, heap);
                let bound = heap.peek().map_or(f64::INFINITY, |c| c.sq);
                if heap.len() < k || diff * diff <= bound {
                    self.knn(far, data, query, k, exclude, heap);
                }
            }
        }
    }

    /// All rows within squared distance `radius_sq` (inclusive), with their
    /// squared distances, sorted by `(distance, index)`.
    pub fn within(
        &self,
        data: ArrayView2<f64>,
        query: ArrayView1<f64>,
        radius_sq: f64,
        exclude: Option<usize>,
    ) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        if !self.nodes.is_empty() {
            self.within_node(0, data, query, radius_sq, exclude, &mut out);
        }
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    fn within_node(
        &self,
        node: usize,
        data: ArrayView2<f64>,
        query: ArrayView1<f64>,
        radius_sq: f64,
        exclude: Option<usize>,
        out: &mut Vec<(usize, f64)>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let sq = sq_dist(query, data.row(i));
                    if sq <= radius_sq {
                        out.push((i, sq));
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = query[dim] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.within_node(near, data, query, radius_sq, exclude, out);
                if diff * diff <= radius_sq {
                    self.within_node(far, data, query, radius_sq, exclude, out);
                }
            }
        }
    }
}

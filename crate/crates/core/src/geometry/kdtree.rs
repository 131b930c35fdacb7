//! Exact nearest-neighbour queries over a fixed point set.
//!
//! Distances are compared lexicographically as `(squared distance, index)`, so
//! every query returns the same answer as an exhaustive scan that breaks ties
//! by the smallest index.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::Vec3;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// A k-d tree over a fixed set of points. Read-only after construction.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl SpatialIndex {
    pub fn new(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("spatial index needs at least one point"));
        }
        let mut index = SpatialIndex {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1),
        };
        index.build(0, points.len());
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
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
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        if hi[axis] - lo[axis] <= 0.0 {
            // all coincident
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }

        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis]
                .total_cmp(&points[b][axis])
                .then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];

        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Index of the nearest indexed point and its Euclidean distance.
    pub fn nearest(&self, query: &Vec3) -> (usize, f64) {
        let mut best = Candidate {
            dist2: f64::INFINITY,
            index: usize::MAX,
        };
        self.nearest_in(0, query, &mut best);
        (best.index, best.dist2.sqrt())
    }

    fn nearest_in(&self, node: usize, q: &Vec3, best: &mut Candidate) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let c = Candidate {
                        dist2: (self.points[i] - q).norm_squared(),
                        index: i,
                    };
                    if c < *best {
                        *best = c;
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.nearest_in(near, q, best);
                // `<=` so that equidistant points on the far side still get a chance
                // to win the index tie-break.
                if diff * diff <= best.dist2 {
                    self.nearest_in(far, q, best);
                }
            }
        }
    }

    /// The `k` nearest points sorted by `(distance, index)`, optionally skipping one index.
    pub fn k_nearest(&self, query: &Vec3, k: usize, skip: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.k_nearest_in(0, query, k, skip, &mut heap);
        heap.into_sorted_vec()
            .into_iter()
            .map(|c| (c.index, c.dist2.sqrt()))
            .collect()
    }

    fn k_nearest_in(
        &self,
        node: usize,
        q: &Vec3,
        k: usize,
        skip: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == skip {
                        continue;
                    }
                    let c = Candidate {
                        dist2: (self.points[i] - q).norm_squared(),
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.k_nearest_in(near, q, k, skip, heap);
                let bound = if heap.len() < k {
                    f64::INFINITY
                } else {
                    heap.peek().unwrap().dist2
                };
                if diff * diff <= bound {
                    self.k_nearest_in(far, q, k, skip, heap);
                }
            }
        }
    }
}

//! Radius-limited geodesic distances over the surface edge graph.
//!
//! A breadth-first search first collects the connected Euclidean ball around
//! the source. Since Euclidean distance never exceeds edge-graph distance,
//! every vertex with geodesic distance below the radius lies in that ball, so
//! Dijkstra only has to run over it.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use super::{Adjacency, Surface};
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapEntry {
    dist: f64,
    vertex: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (dist, vertex)
        other
            .dist
            .total_cmp(&self.dist)
            .then(other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Reusable buffers for repeated limited-geodesic queries on one surface.
pub struct GeodesicSearch<'a> {
    points: &'a [Vec3],
    adjacency: Adjacency,
    dist: Vec<f64>,
    in_ball: Vec<bool>,
    touched: Vec<usize>,
}

impl<'a> GeodesicSearch<'a> {
    pub fn new(surface: &'a Surface) -> Self {
        let n = surface.len();
        GeodesicSearch {
            points: surface.points(),
            adjacency: surface.adjacency(),
            dist: vec![f64::INFINITY; n],
            in_ball: vec![false; n],
            touched: Vec::new(),
        }
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    /// Every vertex with edge-graph distance `< radius` from `source`, as
    /// `(vertex, distance)` sorted by vertex. Always contains `(source, 0)`.
    pub fn run(&mut self, source: usize, radius: f64) -> Vec<(usize, f64)> {
        let center = self.points[source];

        // Euclidean ball reachable through in-ball vertices.
        let mut queue = VecDeque::new();
        self.in_ball[source] = true;
        self.touched.push(source);
        queue.push_back(source);
        while let Some(v) = queue.pop_front() {
            for &(w, _) in self.adjacency.neighbors(v) {
                if !self.in_ball[w] && (self.points[w] - center).norm() < radius {
                    self.in_ball[w] = true;
                    self.touched.push(w);
                    queue.push_back(w);
                }
            }
        }

        let mut heap = BinaryHeap::new();
        self.dist[source] = 0.0;
        heap.push(HeapEntry {
            dist: 0.0,
            vertex: source,
        });
        while let Some(HeapEntry { dist, vertex }) = heap.pop() {
            if dist > self.dist[vertex] {
                continue;
            }
            for &(w, len) in self.adjacency.neighbors(vertex) {
                if !self.in_ball[w] {
                    continue;
                }
                let nd = dist + len;
                if nd < radius && nd < self.dist[w] {
                    self.dist[w] = nd;
                    heap.push(HeapEntry { dist: nd, vertex: w });
                }
            }
        }

        let mut out: Vec<(usize, f64)> = self
            .touched
            .iter()
            .filter(|&&v| self.dist[v] < radius)
            .map(|&v| (v, self.dist[v]))
            .collect();
        out.sort_unstable_by_key(|e| e.0);

        for &v in &self.touched {
            self.dist[v] = f64::INFINITY;
            self.in_ball[v] = false;
        }
        self.touched.clear();
        out
    }
}

/// One-shot version of [`GeodesicSearch::run`].
pub fn limited_geodesic(surface: &Surface, source: usize, radius: f64) -> Vec<(usize, f64)> {
    GeodesicSearch::new(surface).run(source, radius)
}

//! Exact k-nearest-neighbour search over 3D points.
//!
//! Results are ordered by squared Euclidean distance, ties broken by the lower
//! original point index, so they coincide with a brute-force scan exactly.

use crate::error::{Error, Result};
use crate::model::{PointCloud, Vec3};

const LEAF_SIZE: usize = 12;

/// One neighbour: original point index and Euclidean distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: u32, end: u32 },
    // left child is always the next node
    Split { dim: u8, value: f64, right: u32 },
}

/// Immutable kd-tree. Safe to query concurrently.
#[derive(Debug, Clone)]
pub struct KdIndex {
    coords: Vec<[f64; 3]>,
    ids: Vec<u32>,
    nodes: Vec<Node>,
}

#[inline(always)]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Bounded sorted candidate list, ascending by (squared distance, index).
struct Candidates<'a> {
    k: usize,
    items: &'a mut Vec<(f64, u32)>,
}

impl Candidates<'_> {
    #[inline(always)]
    fn worst(&self) -> f64 {
        if self.items.len() < self.k {
            f64::INFINITY
        } else {
            self.items[self.k - 1].0
        }
    }

    #[inline(always)]
    fn offer(&mut self, d2: f64, id: u32) {
        let full = self.items.len() == self.k;
        if full {
            let (wd, wi) = self.items[self.k - 1];
            if d2 > wd || (d2 == wd && id > wi) {
                return;
            }
        }
        let mut pos = self.items.len();
        while pos > 0 {
            let (pd, pi) = self.items[pos - 1];
            if pd < d2 || (pd == d2 && pi < id) {
                break;
            }
            pos -= 1;
        }
        if full {
            self.items.pop();
        }
        self.items.insert(pos, (d2, id));
    }
}

impl KdIndex {
    /// Builds an index over `points`. Fails on an empty cloud.
    pub fn build(points: &PointCloud) -> Result<Self> {
        Self::from_points(&points.points)
    }

    pub fn from_points(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if points.len() > u32::MAX as usize {
            return Err(Error::InvalidParam("too many points for index".into()));
        }
        let mut coords: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut ids: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        build_node(&mut coords, &mut ids, 0, points.len(), &mut nodes);
        Ok(KdIndex { coords, ids, nodes })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// The `min(k, len)` nearest points, ascending by distance then index.
    pub fn knn(&self, query: &Vec3, k: usize) -> Vec<Neighbor> {
        let mut buf = Vec::with_capacity(k.min(self.len()));
        self.knn_into(query, k, &mut buf);
        buf.iter()
            .map(|&(d2, id)| Neighbor {
                index: id as usize,
                distance: d2.sqrt(),
            })
            .collect()
    }

    /// Allocation-free variant of [`knn`](Self::knn): fills `out` with
    /// `(squared distance, index)` pairs.
    pub fn knn_into(&self, query: &Vec3, k: usize, out: &mut Vec<(f64, u32)>) {
        out.clear();
        if k == 0 {
            return;
        }
        let q = [query.x, query.y, query.z];
        let mut cand = Candidates {
            k: k.min(self.len()),
            items: out,
        };
        let mut off = [0.0f64; 3];
        self.search(0, &q, &mut off, &mut cand);
    }

    pub fn nearest(&self, query: &Vec3) -> Neighbor {
        let mut buf = Vec::with_capacity(1);
        self.knn_into(query, 1, &mut buf);
        let (d2, id) = buf[0];
        Neighbor {
            index: id as usize,
            distance: d2.sqrt(),
        }
    }

    /// Nearest point with squared distance at most `max_d2`, as `(squared distance, index)`.
    pub fn nearest_within(&self, query: &Vec3, max_d2: f64) -> Option<(f64, u32)> {
        let q = [query.x, query.y, query.z];
        // u32::MAX as the sentinel id lets a point exactly at max_d2 win the tie
        let mut best = (max_d2, u32::MAX);
        let mut off = [0.0f64; 3];
        self.search1(0, &q, &mut off, &mut best);
        (best.1 != u32::MAX).then_some(best)
    }

    fn search1(&self, node: usize, q: &[f64; 3], off: &mut [f64; 3], best: &mut (f64, u32)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start as usize..end as usize {
                    let d2 = dist2(q, &self.coords[slot]);
                    let id = self.ids[slot];
                    if d2 < best.0 || (d2 == best.0 && id < best.1) {
                        *best = (d2, id);
                    }
                }
            }
            Node::Split { dim, value, right } => {
                let dim = dim as usize;
                let diff = q[dim] - value;
                let (near, far) = if diff <= 0.0 {
                    (node + 1, right as usize)
                } else {
                    (right as usize, node + 1)
                };
                let old = off[dim];
                off[dim] = diff;
                let bound = off[0] * off[0] + off[1] * off[1] + off[2] * off[2];
                off[dim] = old;
                self.search1(near, q, off, best);
                if bound <= best.0 {
                    off[dim] = diff;
                    self.search1(far, q, off, best);
                    off[dim] = old;
                }
            }
        }
    }

    /// Mean Euclidean distance to the `min(h, len)` nearest points.
    pub fn mean_knn_distance(&self, query: &Vec3, h: usize) -> f64 {
        let mut buf = Vec::with_capacity(h.min(self.len()));
        self.mean_knn_distance_with(query, h, &mut buf)
    }

    pub(crate) fn mean_knn_distance_with(
        &self,
        query: &Vec3,
        h: usize,
        buf: &mut Vec<(f64, u32)>,
    ) -> f64 {
        self.knn_into(query, h, buf);
        mean_of_sqrt(buf)
    }

    fn search(&self, node: usize, q: &[f64; 3], off: &mut [f64; 3], cand: &mut Candidates) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start as usize..end as usize {
                    let d2 = dist2(q, &self.coords[slot]);
                    cand.offer(d2, self.ids[slot]);
                }
            }
            Node::Split { dim, value, right } => {
                let dim = dim as usize;
                let diff = q[dim] - value;
                let (near, far) = if diff <= 0.0 {
                    (node + 1, right as usize)
                } else {
                    (right as usize, node + 1)
                };
                self.search(near, q, off, cand);
                let old = off[dim];
                off[dim] = diff;
                // same expression shape as dist2 so the bound never exceeds a true distance
                let bound = off[0] * off[0] + off[1] * off[1] + off[2] * off[2];
                if bound <= cand.worst() {
                    self.search(far, q, off, cand);
                }
                off[dim] = old;
            }
        }
    }
}

/// Ascending-order mean of square roots; shared with tests so the summation order is fixed.
pub(crate) fn mean_of_sqrt(items: &[(f64, u32)]) -> f64 {
    if items.is_empty() {
        return f64::NAN;
    }
    let mut s = 0.0;
    for &(d2, _) in items {
        s += d2.sqrt();
    }
    s / items.len() as f64
}

fn build_node(
    coords: &mut [[f64; 3]],
    ids: &mut [u32],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) {
    let n = end - start;
    if n <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: start as u32,
            end: end as u32,
        });
        return;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in &coords[start..end] {
        for d in 0..3 {
            lo[d] = lo[d].min(c[d]);
            hi[d] = hi[d].max(c[d]);
        }
    }
    let dim = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap();
    if hi[dim] - lo[dim] == 0.0 {
        // all points coincide
        nodes.push(Node::Leaf {
            start: start as u32,
            end: end as u32,
        });
        return;
    }
    let mid = n / 2;
    // sort a permutation so coords and ids move together
    let mut perm: Vec<usize> = (0..n).collect();
    {
        let c = &coords[start..end];
        perm.select_nth_unstable_by(mid, |&a, &b| c[a][dim].total_cmp(&c[b][dim]));
    }
    let c_old: Vec<[f64; 3]> = perm.iter().map(|&p| coords[start + p]).collect();
    let i_old: Vec<u32> = perm.iter().map(|&p| ids[start + p]).collect();
    coords[start..end].copy_from_slice(&c_old);
    ids[start..end].copy_from_slice(&i_old);
    let value = coords[start + mid][dim];

    let me = nodes.len();
    nodes.push(Node::Split {
        dim: dim as u8,
        value,
        right: 0,
    });
    build_node(coords, ids, start, start + mid, nodes);
    let right = nodes.len() as u32;
    if let Node::Split { right: r, .. } = &mut nodes[me] {
        *r = right;
    }
    build_node(coords, ids, start + mid, end, nodes);
}

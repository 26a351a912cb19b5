//! Exact k-nearest-neighbour search over 3-D points with a static k-d tree.
//!
//! Results are identical to a brute-force scan: neighbours are ordered by
//! squared Euclidean distance and then by original index, and the search only
//! prunes subtrees whose lower bound is strictly worse than the current k-th
//! candidate, so equal-distance points with lower indices are never missed.

use crate::error::{ensure, Result};
use crate::pointcloud::{dist2, Point3};

const LEAF_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    /// Index of the point in the slice the tree was built from.
    pub index: usize,
    pub distance: f64,
}

#[derive(Clone, Debug)]
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

/// Immutable k-d tree; safe to query from many threads.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Point3>,
    indices: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn build(points: &[Point3]) -> Result<Self> {
        ensure!(
            !points.is_empty(),
            "cannot build a k-d tree over zero points"
        );
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        build_node(points, &mut order, 0, points.len(), &mut nodes);
        Ok(KdTree {
            points: order.iter().map(|&i| points[i]).collect(),
            indices: order,
            nodes,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The `k` nearest indexed points, ascending by distance then index.
    pub fn knn(&self, query: &Point3, k: usize) -> Result<Vec<Neighbor>> {
        ensure!(k >= 1, "k must be positive");
        ensure!(
            k <= self.len(),
            "k = {k} exceeds the {} indexed points",
            self.len()
        );
        let mut best = Candidates {
            k,
            items: Vec::with_capacity(k + 1),
        };
        self.search(0, query, &mut best);
        Ok(best
            .items
            .into_iter()
            .map(|(d2, index)| Neighbor {
                index,
                distance: d2.sqrt(),
            })
            .collect())
    }

    /// Single nearest point (lowest index among equidistant ones).
    pub fn nearest(&self, query: &Point3) -> Neighbor {
        let mut best = Candidates {
            k: 1,
            items: Vec::with_capacity(2),
        };
        self.search(0, query, &mut best);
        let (d2, index) = best.items[0];
        Neighbor {
            index,
            distance: d2.sqrt(),
        }
    }

    fn search(&self, node: usize, q: &Point3, best: &mut Candidates) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in start..end {
                    best.offer(dist2(q, &self.points[i]), self.indices[i]);
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
                self.search(near, q, best);
                if best.admits(diff * diff) {
                    self.search(far, q, best);
                }
            }
        }
    }
}

fn build_node(
    points: &[Point3],
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let slice = &mut order[start..end];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in slice.iter() {
        for k in 0..3 {
            lo[k] = lo[k].min(points[i][k]);
            hi[k] = hi[k].max(points[i][k]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap();
    if hi[axis] == lo[axis] {
        // All coordinates coincide; nothing left to split.
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    let value = points[slice[mid]][axis];
    nodes.push(Node::Leaf { start, end });
    let left = build_node(points, order, start, start + mid, nodes);
    let right = build_node(points, order, start + mid, end, nodes);
    nodes[id] = Node::Split {
        axis,
        value,
        left,
        right,
    };
    id
}

/// Sorted list of the best `k` `(d², index)` pairs seen so far.
struct Candidates {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl Candidates {
    fn offer(&mut self, d2: f64, index: usize) {
        if self.items.len() == self.k {
            let worst = self.items[self.k - 1];
            if (d2, index) >= worst {
                return;
            }
        }
        let pos = self
            .items
            .partition_point(|&(d, i)| d < d2 || (d == d2 && i < index));
        self.items.insert(pos, (d2, index));
        self.items.truncate(self.k);
    }

    /// Whether a region whose points are at least `bound²` away could still
    /// contribute (ties included).
    fn admits(&self, bound2: f64) -> bool {
        self.items.len() < self.k || bound2 <= self.items[self.k - 1].0
    }
}

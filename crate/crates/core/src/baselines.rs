//! Exact kNN baselines: brute force, KD-tree and ball-tree.
//!
//! Trees split on the axis of widest spread at the median and prune only
//! when a subtree provably holds nothing closer than the current k-th
//! neighbor, so their results are identical to [`brute_knn`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::knn::{self, Neighbor, TopK};
use crate::scalar::Scalar;
use crate::vecdata::Dataset;

pub const DEFAULT_LEAF_SIZE: usize = 16;

/// Exact top-k by `(distance, id)`.
pub fn brute_knn<T: Scalar, Q: Scalar>(ds: &Dataset<T>, q: &[Q], topk: usize) -> Result<Vec<Neighbor>> {
    Error::check_dim(ds.dim(), q.len())?;
    Ok(knn::rank_rows(ds, q, 0..ds.len(), topk))
}

#[derive(Debug, Clone)]
pub struct BruteIndex<T = f32> {
    dataset: Arc<Dataset<T>>,
}

impl<T: Scalar> BruteIndex<T> {
    pub fn new(dataset: Arc<Dataset<T>>) -> Self {
        Self { dataset }
    }

    pub fn query<Q: Scalar>(&self, q: &[Q], topk: usize) -> Result<Vec<Neighbor>> {
        brute_knn(&self.dataset, q, topk)
    }
}

fn check_build<T: Scalar>(ds: &Dataset<T>, leaf_size: usize) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::InvalidDataset("cannot build a tree over no points".into()));
    }
    if leaf_size == 0 {
        return Err(Error::InvalidConfig("leaf size must be positive".into()));
    }
    Ok(())
}

/// Axis of widest spread over `rows`, with that spread.
fn widest_axis<T: Scalar>(ds: &Dataset<T>, rows: &[u32]) -> (usize, f64) {
    let dim = ds.dim();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for &r in rows {
        for (j, &v) in ds.row(r as usize).iter().enumerate() {
            let v = v.as_f64();
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    (0..dim)
        .map(|j| (j, hi[j] - lo[j]))
        .fold((0, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best })
}

/// Median split of `rows` along `axis`: left values <= threshold <= right values.
fn median_split<T: Scalar>(ds: &Dataset<T>, rows: &mut [u32], axis: usize) -> (usize, f64) {
    let mid = rows.len() / 2;
    let key = |r: &u32| ds.row(*r as usize)[axis].as_f64();
    rows.select_nth_unstable_by(mid, |a, b| key(a).total_cmp(&key(b)));
    (mid, key(&rows[mid]))
}

#[derive(Debug, Clone, PartialEq)]
enum KdNode {
    Split {
        axis: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        start: usize,
        end: usize,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree<T = f32> {
    dataset: Arc<Dataset<T>>,
    nodes: Vec<KdNode>,
    rows: Vec<u32>,
    leaf_size: usize,
}

impl<T: Scalar> KdTree<T> {
    pub fn build(dataset: Arc<Dataset<T>>, leaf_size: usize) -> Result<Self> {
        check_build(&dataset, leaf_size)?;
        let mut rows: Vec<u32> = (0..dataset.len() as u32).collect();
        let mut nodes = Vec::new();
        Self::build_node(&dataset, &mut rows, 0, leaf_size, &mut nodes);
        Ok(Self {
            dataset,
            nodes,
            rows,
            leaf_size,
        })
    }

    fn build_node(ds: &Dataset<T>, rows: &mut [u32], offset: usize, leaf_size: usize, nodes: &mut Vec<KdNode>) -> usize {
        let id = nodes.len();
        nodes.push(KdNode::Leaf {
            start: offset,
            end: offset + rows.len(),
        });
        if rows.len() <= leaf_size {
            return id;
        }
        let (axis, spread) = widest_axis(ds, rows);
        if spread <= 0.0 {
            return id;
        }
        let (mid, threshold) = median_split(ds, rows, axis);
        let (l, r) = rows.split_at_mut(mid);
        let left = Self::build_node(ds, l, offset, leaf_size, nodes);
        let right = Self::build_node(ds, r, offset + mid, leaf_size, nodes);
        nodes[id] = KdNode::Split {
            axis,
            threshold,
            left,
            right,
        };
        id
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// 24 bytes per node (axis, threshold, two child links) plus a 4-byte
    /// row id per point.
    pub fn size_bytes(&self) -> u64 {
        24 * self.nodes.len() as u64 + 4 * self.rows.len() as u64
    }

    /// Row lists of every leaf.
    pub fn leaves(&self) -> Vec<&[u32]> {
        self.nodes
            .iter()
            .filter_map(|n| match *n {
                KdNode::Leaf { start, end } => Some(&self.rows[start..end]),
                KdNode::Split { .. } => None,
            })
            .collect()
    }

    pub fn query<Q: Scalar>(&self, q: &[Q], topk: usize) -> Result<Vec<Neighbor>> {
        Error::check_dim(self.dataset.dim(), q.len())?;
        let mut top = TopK::new(topk);
        if topk > 0 {
            self.search(0, q, &mut top);
        }
        Ok(top.into_sorted())
    }

    fn search<Q: Scalar>(&self, node: usize, q: &[Q], top: &mut TopK) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &r in &self.rows[start..end] {
                    let r = r as usize;
                    top.push(self.dataset.id(r), knn::euclidean(self.dataset.row(r), q));
                }
            }
            KdNode::Split {
                axis,
                threshold,
                left,
                right,
            } => {
                let diff = q[axis].as_f64() - threshold;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, top);
                if top.bound().is_none_or(|b| diff.abs() <= b) {
                    self.search(far, q, top);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum BallKind {
    Inner { left: usize, right: usize },
    Leaf { start: usize, end: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct BallNode {
    centroid: Vec<f64>,
    radius: f64,
    kind: BallKind,
}

#[derive(Debug, Clone)]
pub struct BallTree<T = f32> {
    dataset: Arc<Dataset<T>>,
    nodes: Vec<BallNode>,
    rows: Vec<u32>,
    leaf_size: usize,
}

impl<T: Scalar> BallTree<T> {
    pub fn build(dataset: Arc<Dataset<T>>, leaf_size: usize) -> Result<Self> {
        check_build(&dataset, leaf_size)?;
        let mut rows: Vec<u32> = (0..dataset.len() as u32).collect();
        let mut nodes = Vec::new();
        Self::build_node(&dataset, &mut rows, 0, leaf_size, &mut nodes);
        Ok(Self {
            dataset,
            nodes,
            rows,
            leaf_size,
        })
    }

    fn build_node(ds: &Dataset<T>, rows: &mut [u32], offset: usize, leaf_size: usize, nodes: &mut Vec<BallNode>) -> usize {
        let dim = ds.dim();
        let mut centroid = vec![0.0; dim];
        for &r in rows.iter() {
            for (c, &v) in centroid.iter_mut().zip(ds.row(r as usize)) {
                *c += v.as_f64();
            }
        }
        let n = rows.len() as f64;
        centroid.iter_mut().for_each(|c| *c /= n);
        let radius = rows
            .iter()
            .map(|&r| knn::euclidean(ds.row(r as usize), &centroid))
            .fold(0.0, f64::max);
        let id = nodes.len();
        nodes.push(BallNode {
            centroid,
            radius,
            kind: BallKind::Leaf {
                start: offset,
                end: offset + rows.len(),
            },
        });
        if rows.len() <= leaf_size || radius == 0.0 {
            return id;
        }
        let (axis, spread) = widest_axis(ds, rows);
        if spread <= 0.0 {
            return id;
        }
        let (mid, _) = median_split(ds, rows, axis);
        let (l, r) = rows.split_at_mut(mid);
        let left = Self::build_node(ds, l, offset, leaf_size, nodes);
        let right = Self::build_node(ds, r, offset + mid, leaf_size, nodes);
        nodes[id].kind = BallKind::Inner { left, right };
        id
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    pub fn root_radius(&self) -> f64 {
        self.nodes[0].radius
    }

    pub fn root_centroid(&self) -> &[f64] {
        &self.nodes[0].centroid
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Per node an `f64` centroid, radius and two child links, plus a
    /// 4-byte row id per point.
    pub fn size_bytes(&self) -> u64 {
        let node = 8 * self.dataset.dim() as u64 + 8 + 16;
        node * self.nodes.len() as u64 + 4 * self.rows.len() as u64
    }

    /// Checks that every point lies within the radius of each ball containing it.
    pub fn check_containment(&self) -> bool {
        self.nodes.iter().all(|n| {
            let (start, end) = self.span(n);
            self.rows[start..end]
                .iter()
                .all(|&r| knn::euclidean(self.dataset.row(r as usize), &n.centroid) <= n.radius)
        })
    }

    fn span(&self, node: &BallNode) -> (usize, usize) {
        match node.kind {
            BallKind::Leaf { start, end } => (start, end),
            BallKind::Inner { left, right } => {
                (self.span(&self.nodes[left]).0, self.span(&self.nodes[right]).1)
            }
        }
    }

    pub fn query<Q: Scalar>(&self, q: &[Q], topk: usize) -> Result<Vec<Neighbor>> {
        Error::check_dim(self.dataset.dim(), q.len())?;
        let mut top = TopK::new(topk);
        if topk > 0 {
            let q64: Vec<f64> = q.iter().map(|v| v.as_f64()).collect();
            let d = knn::euclidean(&self.nodes[0].centroid, &q64);
            self.search(0, d, q, &q64, &mut top);
        }
        Ok(top.into_sorted())
    }

    /// Lower bound on the distance from `q` to anything in `node`, loosened
    /// by a relative 1e-9 so rounding can never prune a true neighbor.
    fn lower_bound(&self, node: usize, centroid_dist: f64) -> f64 {
        let r = self.nodes[node].radius;
        (centroid_dist - r) - 1e-9 * (centroid_dist + r)
    }

    fn search<Q: Scalar>(&self, node: usize, centroid_dist: f64, q: &[Q], q64: &[f64], top: &mut TopK) {
        if top.bound().is_some_and(|b| self.lower_bound(node, centroid_dist) > b) {
            return;
        }
        match self.nodes[node].kind {
            BallKind::Leaf { start, end } => {
                for &r in &self.rows[start..end] {
                    let r = r as usize;
                    top.push(self.dataset.id(r), knn::euclidean(self.dataset.row(r), q));
                }
            }
            BallKind::Inner { left, right } => {
                let dl = knn::euclidean(&self.nodes[left].centroid, q64);
                let dr = knn::euclidean(&self.nodes[right].centroid, q64);
                let mut children = [(left, dl), (right, dr)];
                if self.lower_bound(right, dr) < self.lower_bound(left, dl) {
                    children.swap(0, 1);
                }
                for (c, d) in children {
                    self.search(c, d, q, q64, top);
                }
            }
        }
    }
}

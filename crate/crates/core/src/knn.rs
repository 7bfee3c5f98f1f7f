//! Shared k-nearest-neighbor plumbing: distances and bounded top-k.
//!
//! Every index in the crate reports distances computed by [`euclidean`] and
//! orders neighbors by `(distance, id)`, so results from different indexes
//! are directly comparable.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::vecdata::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: u32,
    pub distance: f64,
}

impl Neighbor {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.id.cmp(&other.id))
    }
}

#[derive(PartialEq)]
struct HeapEntry(Neighbor);

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.key_cmp(&other.0)
    }
}

/// Euclidean distance accumulated in `f64`.
#[inline]
pub fn euclidean<T: Scalar, U: Scalar>(a: &[T], b: &[U]) -> f64 {
    squared_euclidean(a, b).sqrt()
}

#[inline]
pub fn squared_euclidean<T: Scalar, U: Scalar>(a: &[T], b: &[U]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum()
}

/// Keeps the `k` smallest neighbors by `(distance, id)`.
pub struct TopK {
    k: usize,
    heap: BinaryHeap<HeapEntry>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    pub fn push(&mut self, id: u32, distance: f64) {
        if self.k == 0 {
            return;
        }
        let entry = HeapEntry(Neighbor { id, distance });
        if self.heap.len() < self.k {
            self.heap.push(entry);
        } else if let Some(top) = self.heap.peek() {
            if entry < *top {
                self.heap.pop();
                self.heap.push(entry);
            }
        }
    }

    pub fn is_full(&self) -> bool {
        self.heap.len() >= self.k
    }

    /// Largest retained distance once `k` neighbors are held.
    pub fn bound(&self) -> Option<f64> {
        if self.is_full() {
            self.heap.peek().map(|e| e.0.distance)
        } else {
            None
        }
    }

    pub fn into_sorted(self) -> Vec<Neighbor> {
        self.heap.into_sorted_vec().into_iter().map(|e| e.0).collect()
    }
}

/// Exact ranking of the given dataset rows against `query`.
pub fn rank_rows<T: Scalar, Q: Scalar>(
    ds: &Dataset<T>,
    query: &[Q],
    rows: impl IntoIterator<Item = usize>,
    k: usize,
) -> Vec<Neighbor> {
    let mut top = TopK::new(k);
    for r in rows {
        top.push(ds.id(r), euclidean(ds.row(r), query));
    }
    top.into_sorted()
}

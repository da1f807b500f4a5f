//! Empirical sample stores and mini-batches.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::efcore::Value;

/// Sources of training examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stream {
    /// `x ~ pi(x)`
    X,
    /// `z ~ pi(z)`
    Z,
    /// `(x, z) ~ pi(x, z)`
    XZ,
    /// `(x, z0) ~ pi(x, z0)` (or `(x, c)` when the first layer is class-split)
    Labelled,
    /// `(x, s) ~ pi(x, s)`
    XS,
}

/// Sample stores keyed by stream; every record is a tuple of values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmpiricalData {
    pub streams: BTreeMap<Stream, Vec<Vec<Value>>>,
}

impl EmpiricalData {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, stream: Stream, records: Vec<Vec<Value>>) -> Self {
        self.streams.insert(stream, records);
        self
    }

    pub fn records(&self, stream: Stream) -> &[Vec<Value>] {
        self.streams.get(&stream).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// A batch containing every record, with `model_draws` unconditioned draws.
    pub fn full_batch(&self, model_draws: usize) -> Batch {
        Batch { records: self.streams.clone(), model_draws }
    }
}

/// A mini-batch: records per stream plus the number of draws used by terms
/// that sample everything from the models.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub records: BTreeMap<Stream, Vec<Vec<Value>>>,
    pub model_draws: usize,
}

impl Batch {
    pub fn records(&self, stream: Stream) -> &[Vec<Value>] {
        self.records.get(&stream).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn has(&self, stream: Stream) -> bool {
        !self.records(stream).is_empty()
    }
}

/// Epoch-wise shuffled iteration over every stream of a store.
#[derive(Debug, Clone)]
pub struct BatchCursor {
    orders: BTreeMap<Stream, (Vec<usize>, usize)>,
}

impl BatchCursor {
    pub fn new(data: &EmpiricalData) -> Self {
        let orders = data
            .streams
            .iter()
            .map(|(s, r)| (*s, ((0..r.len()).collect(), r.len())))
            .collect();
        Self { orders }
    }

    /// Draws `size` records from each non-empty stream, reshuffling a stream
    /// with `rng` whenever it is exhausted.
    pub fn next_batch<R: Rng + ?Sized>(&mut self, data: &EmpiricalData, size: usize, rng: &mut R) -> Batch {
        let mut records = BTreeMap::new();
        for (stream, (order, pos)) in self.orders.iter_mut() {
            let store = data.records(*stream);
            if store.is_empty() {
                continue;
            }
            let mut out = Vec::with_capacity(size);
            for _ in 0..size {
                if *pos >= order.len() {
                    order.shuffle(rng);
                    *pos = 0;
                }
                out.push(store[order[*pos]].clone());
                *pos += 1;
            }
            records.insert(*stream, out);
        }
        Batch { records, model_draws: size }
    }
}

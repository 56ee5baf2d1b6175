//! Bounded replay buffer with reservoir insertion and class purging.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::Rng;
use thiserror::Error;

/// One labeled input.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: usize) -> Self {
        Self { x, y }
    }

    /// `y,x1,x2,...` record.
    pub fn to_record(&self) -> String {
        let mut s = self.y.to_string();
        for v in &self.x {
            let _ = write!(s, ",{v:e}");
        }
        s
    }

    pub fn from_record(line: &str) -> Result<Self, BufferError> {
        let mut parts = line.trim().split(',');
        let bad = |msg: String| BufferError::Record { line: line.to_string(), msg };
        let y = parts
            .next()
            .ok_or_else(|| bad("empty record".into()))?
            .trim()
            .parse::<usize>()
            .map_err(|e| bad(e.to_string()))?;
        let x =
            parts.map(|v| v.trim().parse::<f64>().map_err(|e| bad(e.to_string()))).collect::<Result<Vec<_>, _>>()?;
        if x.is_empty() {
            return Err(bad("record has no input values".into()));
        }
        Ok(Self { x, y })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum BufferError {
    #[error("buffer capacity must be positive")]
    ZeroCapacity,
    #[error("bad sample record '{line}': {msg}")]
    Record { line: String, msg: String },
    #[error("bad snapshot header '{0}'")]
    Header(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Sample>,
    n_seen: u64,
    reset_seen_on_purge: bool,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self, BufferError> {
        if capacity == 0 {
            return Err(BufferError::ZeroCapacity);
        }
        Ok(Self { capacity, items: Vec::with_capacity(capacity), n_seen: 0, reset_seen_on_purge: false })
    }

    /// When set, a purge resets the seen-count to the number of survivors
    /// instead of leaving it untouched.
    pub fn with_reset_seen_on_purge(mut self, reset: bool) -> Self {
        self.reset_seen_on_purge = reset;
        self
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_seen(&self) -> u64 {
        self.n_seen
    }

    pub fn items(&self) -> &[Sample] {
        &self.items
    }

    /// Reservoir insertion (Vitter's algorithm R).
    pub fn insert<R: Rng + ?Sized>(&mut self, sample: Sample, rng: &mut R) {
        if self.items.len() < self.capacity {
            self.items.push(sample);
        } else {
            // replace with probability capacity / (n_seen + 1)
            let j = rng.random_range(0..=self.n_seen);
            if (j as usize) < self.capacity {
                self.items[j as usize] = sample;
            }
        }
        self.n_seen += 1;
    }

    /// Up to `k` items uniformly without replacement; all items in random
    /// order when `k >= len`. Empty when the buffer is empty.
    pub fn sample_batch<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<Sample> {
        let k = k.min(self.items.len());
        rand::seq::index::sample(rng, self.items.len(), k).into_iter().map(|i| self.items[i].clone()).collect()
    }

    /// Deletes every item whose class is in `classes`; returns how many went.
    pub fn purge_classes(&mut self, classes: &BTreeSet<usize>) -> usize {
        let before = self.items.len();
        self.items.retain(|s| !classes.contains(&s.y));
        if self.reset_seen_on_purge {
            self.n_seen = self.items.len() as u64;
        }
        before - self.items.len()
    }

    pub fn class_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for s in &self.items {
            *h.entry(s.y).or_insert(0) += 1;
        }
        h
    }

    /// Text snapshot: a `buffer capacity=<c> seen=<n> len=<l>` header, then one
    /// `class,x1,x2,...` record per line.
    pub fn snapshot(&self) -> String {
        let mut s = format!("buffer capacity={} seen={} len={}\n", self.capacity, self.n_seen, self.items.len());
        for item in &self.items {
            s.push_str(&item.to_record());
            s.push('\n');
        }
        s
    }

    pub fn from_snapshot(text: &str) -> Result<Self, BufferError> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let bad = || BufferError::Header(header.to_string());
        let mut fields = header.split_whitespace();
        if fields.next() != Some("buffer") {
            return Err(bad());
        }
        let mut get = |key: &str| -> Result<u64, BufferError> {
            let f = fields.next().ok_or_else(bad)?;
            let (k, v) = f.split_once('=').ok_or_else(bad)?;
            if k != key {
                return Err(bad());
            }
            v.parse().map_err(|_| bad())
        };
        let capacity = get("capacity")? as usize;
        let n_seen = get("seen")?;
        let len = get("len")? as usize;
        let mut buf = Self::new(capacity)?;
        buf.n_seen = n_seen;
        buf.items = lines.filter(|l| !l.trim().is_empty()).map(Sample::from_record).collect::<Result<_, _>>()?;
        if buf.items.len() != len || len > capacity || (n_seen as usize) < len {
            return Err(bad());
        }
        Ok(buf)
    }
}

//! FIFO replay over per-environment streams.
//!
//! Each environment appends to its own stream; eviction is global and strictly
//! by insertion order. Sampled windows are contiguous within one stream and
//! may cross episode boundaries, which are marked by `is_first`.

use std::collections::VecDeque;
use std::sync::RwLock;

use rand::Rng;

use crate::{Error, Result};

/// Maps `[0, 1]` intensities to 8-bit storage.
pub fn quantize(values: &[f32]) -> Vec<u8> {
    values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn dequantize(pixels: &[u8]) -> Vec<f32> {
    pixels.iter().map(|p| *p as f32 / 255.0).collect()
}

/// One stored step. At `is_first` the action and reward are placeholders.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    /// Channel-major `3 × S × S` pixels.
    pub obs: Vec<u8>,
    pub action: Vec<f32>,
    pub reward: f32,
    pub cont: f32,
    pub is_first: bool,
    pub env_id: usize,
}

/// `B` windows of `T` steps, flattened row-major over `(B, T, ...)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub batch_size: usize,
    pub length: usize,
    pub image_size: usize,
    pub action_dim: usize,
    pub obs: Vec<u8>,
    pub actions: Vec<f32>,
    pub rewards: Vec<f32>,
    pub conts: Vec<f32>,
    pub is_first: Vec<bool>,
    /// Stream and global insertion index of each window's first step.
    pub origins: Vec<(usize, u64)>,
}

#[derive(Debug, Clone)]
struct Entry {
    index: u64,
    step: Transition,
}

#[derive(Debug, Default)]
struct Inner {
    streams: Vec<VecDeque<Entry>>,
    next_index: u64,
    len: usize,
}

impl Inner {
    fn evict_oldest(&mut self) {
        let oldest = self
            .streams
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.front().map(|e| (e.index, i)))
            .min();
        if let Some((_, stream)) = oldest {
            self.streams[stream].pop_front();
            self.len -= 1;
        }
    }
}

pub struct ReplayBuffer {
    capacity: usize,
    image_size: usize,
    action_dim: usize,
    inner: RwLock<Inner>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, image_size: usize, action_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("replay capacity must be positive".into()));
        }
        Ok(Self { capacity, image_size, action_dim, inner: RwLock::new(Inner::default()) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.read().len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total insertions so far, evicted ones included.
    pub fn total_appended(&self) -> u64 {
        self.read().next_index
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Inner> {
        self.inner.read().expect("replay lock poisoned")
    }

    pub fn ready(&self, min_steps: usize) -> bool {
        self.len() >= min_steps
    }

    pub fn append(&self, step: Transition) -> Result<()> {
        let pixels = 3 * self.image_size * self.image_size;
        if step.obs.len() != pixels {
            return Err(Error::Shape(format!("observation has {} values, expected {pixels}", step.obs.len())));
        }
        if step.action.len() != self.action_dim {
            return Err(Error::Shape(format!(
                "action has {} components, expected {}",
                step.action.len(),
                self.action_dim
            )));
        }
        if !step.reward.is_finite() || step.action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("transition reward or action".into()));
        }
        let mut inner = self.inner.write().expect("replay lock poisoned");
        if inner.streams.len() <= step.env_id {
            inner.streams.resize_with(step.env_id + 1, VecDeque::new);
        }
        let index = inner.next_index;
        inner.next_index += 1;
        inner.streams[step.env_id].push_back(Entry { index, step });
        inner.len += 1;
        while inner.len > self.capacity {
            inner.evict_oldest();
        }
        Ok(())
    }

    /// Number of distinct length-`length` windows currently available.
    pub fn window_count(&self, length: usize) -> usize {
        let inner = self.read();
        inner.streams.iter().map(|s| windows_in(s.len(), length)).sum()
    }

    /// `batch` windows drawn independently and uniformly over all valid positions.
    pub fn sample(&self, batch: usize, length: usize, rng: &mut impl Rng) -> Result<SequenceBatch> {
        if batch == 0 || length == 0 {
            return Err(Error::InvalidArgument("batch size and length must be positive".into()));
        }
        let inner = self.read();
        let counts: Vec<usize> = inner.streams.iter().map(|s| windows_in(s.len(), length)).collect();
        let total: usize = counts.iter().sum();
        if total == 0 {
            let longest = inner.streams.iter().map(VecDeque::len).max().unwrap_or(0);
            return Err(Error::NotReady { available: longest, needed: length });
        }
        let pixels = 3 * self.image_size * self.image_size;
        let n = batch * length;
        let mut out = SequenceBatch {
            batch_size: batch,
            length,
            image_size: self.image_size,
            action_dim: self.action_dim,
            obs: Vec::with_capacity(n * pixels),
            actions: Vec::with_capacity(n * self.action_dim),
            rewards: Vec::with_capacity(n),
            conts: Vec::with_capacity(n),
            is_first: Vec::with_capacity(n),
            origins: Vec::with_capacity(batch),
        };
        for _ in 0..batch {
            let mut k = rng.random_range(0..total);
            let mut stream = 0;
            while k >= counts[stream] {
                k -= counts[stream];
                stream += 1;
            }
            let entries = &inner.streams[stream];
            out.origins.push((stream, entries[k].index));
            for e in entries.range(k..k + length) {
                out.obs.extend_from_slice(&e.step.obs);
                out.actions.extend_from_slice(&e.step.action);
                out.rewards.push(e.step.reward);
                out.conts.push(e.step.cont);
                out.is_first.push(e.step.is_first);
            }
        }
        Ok(out)
    }
}

fn windows_in(len: usize, length: usize) -> usize {
    (len + 1).saturating_sub(length)
}

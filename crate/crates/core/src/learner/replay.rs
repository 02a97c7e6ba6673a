//! Agent replay ring, permanent demonstration buffer and mixed sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::loss::{BatchItem, NStepTail};
use crate::demos::DemoSource;
use crate::env::Transition;

/// A transition with its precomputed n-step tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayItem {
    pub transition: Transition,
    pub tail: NStepTail,
}

/// Fixed-capacity ring; once full, each push overwrites the oldest item.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    items: Vec<T>,
    capacity: usize,
    cursor: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { items: Vec::with_capacity(capacity.min(1 << 16)), capacity, cursor: 0 }
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.cursor] = item;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Items from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        let split = if self.items.len() < self.capacity { 0 } else { self.cursor };
        self.items[split..].iter().chain(self.items[..split].iter())
    }

    /// Uniform draw with replacement.
    pub fn sample<'a>(&'a self, rng: &mut ChaCha8Rng) -> Option<&'a T> {
        if self.items.is_empty() {
            None
        } else {
            Some(&self.items[rng.gen_range(0..self.items.len())])
        }
    }
}

/// Demonstration transitions, never modified after construction.
#[derive(Debug, Clone)]
pub struct DemoBuffer {
    items: Vec<ReplayItem>,
    by_source: BTreeMap<DemoSource, Vec<usize>>,
    /// Draw a source uniformly first, then an item within it.
    equalize_sources: bool,
}

impl DemoBuffer {
    pub fn new(items: Vec<(ReplayItem, DemoSource)>, equalize_sources: bool) -> Self {
        let mut by_source: BTreeMap<DemoSource, Vec<usize>> = BTreeMap::new();
        let items = items
            .into_iter()
            .enumerate()
            .map(|(i, (item, source))| {
                by_source.entry(source).or_default().push(i);
                item
            })
            .collect();
        Self { items, by_source, equalize_sources }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[ReplayItem] {
        &self.items
    }

    pub fn source_counts(&self) -> BTreeMap<DemoSource, usize> {
        self.by_source.iter().map(|(s, v)| (*s, v.len())).collect()
    }

    pub fn source_of(&self, index: usize) -> Option<DemoSource> {
        self.by_source.iter().find(|(_, v)| v.binary_search(&index).is_ok()).map(|(s, _)| *s)
    }

    /// Index of one sampled item.
    pub fn sample_index(&self, rng: &mut ChaCha8Rng) -> Option<usize> {
        if self.items.is_empty() {
            return None;
        }
        if self.equalize_sources && self.by_source.len() > 1 {
            let group = rng.gen_range(0..self.by_source.len());
            let members = self.by_source.values().nth(group).expect("group index in range");
            Some(members[rng.gen_range(0..members.len())])
        } else {
            Some(rng.gen_range(0..self.items.len()))
        }
    }
}

/// Number of demonstration items in a batch: `batch_size × fraction`
/// rounded to the nearest integer.
pub fn demo_share(batch_size: usize, demo_fraction: f64) -> usize {
    ((batch_size as f64 * demo_fraction).round() as usize).min(batch_size)
}

/// Deterministic split of one mini-batch between demonstrations and agent
/// experience; with no demonstrations every item comes from the replay.
pub fn sample_mixed<'a>(
    demos: Option<&'a DemoBuffer>,
    replay: &'a ReplayBuffer<ReplayItem>,
    batch_size: usize,
    demo_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<BatchItem<'a>> {
    let demos = demos.filter(|d| !d.is_empty());
    let from_demo = if demos.is_some() { demo_share(batch_size, demo_fraction) } else { 0 };
    let mut batch = Vec::with_capacity(batch_size);
    if let Some(d) = demos {
        for _ in 0..from_demo {
            let i = d.sample_index(rng).expect("non-empty");
            batch.push(BatchItem { item: &d.items[i], demo: true });
        }
    }
    for _ in from_demo..batch_size {
        match replay.sample(rng) {
            Some(item) => batch.push(BatchItem { item, demo: false }),
            None => break,
        }
    }
    batch
}

/// Per-agent lag line that turns a stream of transitions into replay items
/// once their n-step window is complete.
#[derive(Debug, Clone)]
pub struct NStepAccumulator {
    n: usize,
    gamma: f64,
    pending: std::collections::VecDeque<Transition>,
}

impl NStepAccumulator {
    pub fn new(n: usize, gamma: f64) -> Self {
        Self { n, gamma, pending: Default::default() }
    }

    /// Adds the next transition and returns items whose window is now full.
    pub fn push(&mut self, t: Transition) -> Vec<ReplayItem> {
        let terminal = t.terminal;
        self.pending.push_back(t);
        if terminal {
            return self.flush();
        }
        let mut ready = Vec::new();
        if self.pending.len() >= self.n {
            ready.push(self.emit_front());
        }
        ready
    }

    /// Emits everything still pending (end of episode).
    pub fn flush(&mut self) -> Vec<ReplayItem> {
        let mut ready = Vec::with_capacity(self.pending.len());
        while !self.pending.is_empty() {
            ready.push(self.emit_front());
        }
        ready
    }

    fn emit_front(&mut self) -> ReplayItem {
        let window = self.pending.make_contiguous();
        let tail = NStepTail::from_window(window, self.n, self.gamma);
        let transition = self.pending.pop_front().expect("non-empty");
        ReplayItem { transition, tail }
    }
}

/// Replay items for one agent's complete transition sequence.
pub fn n_step_items(sequence: &[Transition], n: usize, gamma: f64) -> Vec<ReplayItem> {
    (0..sequence.len())
        .map(|i| ReplayItem { transition: sequence[i].clone(), tail: NStepTail::from_window(&sequence[i..], n, gamma) })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ActionId, Controller, Observation};
    use crate::seed;

    fn item(r: f64) -> ReplayItem {
        let t = Transition {
            observation: Observation { features: [r; 12] },
            action: ActionId::Positive,
            reward: r,
            next_observation: Observation { features: [r + 1.0; 12] },
            terminal: false,
            agent_id: 0,
            controller: Controller::Agent,
        };
        ReplayItem { tail: NStepTail::from_window(std::slice::from_ref(&t), 1, 0.9), transition: t }
    }

    #[test]
    fn ring_keeps_most_recent() {
        let mut rb = ReplayBuffer::new(5);
        for i in 0..13 {
            rb.push(i);
        }
        assert_eq!(rb.len(), 5);
        assert_eq!(rb.iter().copied().collect::<Vec<_>>(), vec![8, 9, 10, 11, 12]);
    }

    #[test]
    fn demo_share_rounding() {
        assert_eq!(demo_share(64, 0.30), 19);
        assert_eq!(demo_share(64, 0.5), 32);
        assert_eq!(demo_share(64, 0.0), 0);
        assert_eq!(demo_share(64, 1.0), 64);
    }

    #[test]
    fn mixed_split_counts() {
        let mut rb = ReplayBuffer::new(100);
        for i in 0..100 {
            rb.push(item(i as f64));
        }
        let demos = DemoBuffer::new((0..10).map(|i| (item(-(i as f64)), DemoSource::AgentDemo)).collect(), false);
        let mut rng = seed::rng(1, 1);
        let b = sample_mixed(Some(&demos), &rb, 64, 0.3, &mut rng);
        assert_eq!(b.len(), 64);
        assert_eq!(b.iter().filter(|x| x.demo).count(), 19);
        let b = sample_mixed(Some(&demos), &rb, 64, 0.0, &mut rng);
        assert!(b.iter().all(|x| !x.demo));
        let b = sample_mixed(Some(&demos), &rb, 64, 1.0, &mut rng);
        assert!(b.iter().all(|x| x.demo));
        let empty = DemoBuffer::new(vec![], false);
        let b = sample_mixed(Some(&empty), &rb, 64, 0.3, &mut rng);
        assert_eq!(b.len(), 64);
        assert!(b.iter().all(|x| !x.demo));
    }

    #[test]
    fn equalized_sources_sample_evenly() {
        let mut items: Vec<_> = (0..50).map(|i| (item(i as f64), DemoSource::HumanDemo)).collect();
        items.extend((0..200).map(|i| (item(i as f64), DemoSource::AgentDemo)));
        let buf = DemoBuffer::new(items, true);
        let mut rng = seed::rng(4, 4);
        let n = 20_000;
        let human = (0..n).filter(|_| buf.sample_index(&mut rng).unwrap() < 50).count();
        let frac = human as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn accumulator_matches_offline_windows() {
        let seq: Vec<Transition> = (0..7).map(|i| item(i as f64).transition).collect();
        let mut acc = NStepAccumulator::new(3, 0.9);
        let mut online = Vec::new();
        for t in &seq {
            online.extend(acc.push(t.clone()));
        }
        online.extend(acc.flush());
        assert_eq!(online, n_step_items(&seq, 3, 0.9));
    }
}

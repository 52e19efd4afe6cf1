//! Prioritized experience replay over a sum tree.
//!
//! Sampling probability is proportional to (priority + epsilon)^alpha;
//! importance weights are (N*p)^-beta, normalized by the maximum weight
//! over the buffer. Eviction is FIFO; fresh records enter at the current
//! maximum priority so they are sampled at least once before their true
//! error is known.
//!
//! The additive epsilon (zero by default) bounds the sampling mass away
//! from zero. Without it, one near-zero-error record drags the max-weight
//! normalizer arbitrarily high and the importance weights of every other
//! record collapse toward zero, silencing exactly the records the
//! prioritization is meant to emphasize.

use rand::Rng;

pub const DEFAULT_CAPACITY: usize = 100_000;

/// Binary sum tree over `capacity` leaf priorities, with a parallel min
/// scan for the importance-weight normalizer.
struct SumTree {
    capacity: usize,
    /// Heap layout: nodes[1] is the root, leaves start at `capacity`.
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(capacity: usize) -> Self {
        SumTree {
            capacity,
            nodes: vec![0.0; 2 * capacity],
        }
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    fn get(&self, i: usize) -> f64 {
        self.nodes[self.capacity + i]
    }

    fn set(&mut self, i: usize, p: f64) {
        let mut n = self.capacity + i;
        let delta = p - self.nodes[n];
        while n >= 1 {
            self.nodes[n] += delta;
            n /= 2;
        }
    }

    /// Index of the leaf whose cumulative-priority interval contains `u`.
    fn find(&self, u: f64) -> usize {
        let mut n = 1;
        let mut u = u;
        while n < self.capacity {
            let left = 2 * n;
            if u < self.nodes[left] {
                n = left;
            } else {
                u -= self.nodes[left];
                n = left + 1;
            }
        }
        n - self.capacity
    }
}

pub struct PrioritizedReplay<T> {
    records: Vec<T>,
    tree: SumTree,
    alpha: f64,
    beta: f64,
    capacity: usize,
    /// Additive sampling-mass floor; stored priorities stay exact.
    epsilon: f64,
    /// Next FIFO write position.
    head: usize,
    max_priority: f64,
}

#[derive(Debug, Clone)]
pub struct SampledBatch {
    pub indices: Vec<usize>,
    /// Max-normalized importance weights, one per sampled index.
    pub weights: Vec<f64>,
}

impl<T> PrioritizedReplay<T> {
    pub fn new(capacity: usize, alpha: f64, beta: f64) -> Self {
        assert!(capacity > 0);
        PrioritizedReplay {
            records: Vec::new(),
            tree: SumTree::new(capacity.next_power_of_two()),
            alpha,
            beta,
            capacity,
            epsilon: 0.0,
            head: 0,
            max_priority: 1.0,
        }
    }

    /// Sets the additive priority epsilon applied to sampling mass.
    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        assert!(epsilon >= 0.0);
        self.epsilon = epsilon;
        self
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &T {
        &self.records[i]
    }

    pub fn priority(&self, i: usize) -> f64 {
        self.tree.get(i).powf(1.0 / self.alpha) - self.epsilon
    }

    /// Appends at the current max priority, evicting FIFO when full.
    pub fn push(&mut self, record: T) {
        let mass = (self.max_priority + self.epsilon).powf(self.alpha);
        if self.records.len() < self.capacity {
            self.records.push(record);
            let i = self.records.len() - 1;
            self.tree.set(i, mass);
        } else {
            self.records[self.head] = record;
            self.tree.set(self.head, mass);
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Overwrites a record's priority with its latest computed error.
    pub fn update_priority(&mut self, i: usize, priority: f64) {
        assert!(i < self.records.len());
        let p = priority.max(1e-12);
        self.max_priority = self.max_priority.max(p);
        self.tree.set(i, (p + self.epsilon).powf(self.alpha));
    }

    /// Samples `n` indices with probability proportional to priority^alpha,
    /// with replacement, plus max-normalized importance weights.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> SampledBatch {
        assert!(!self.records.is_empty(), "sample from empty replay");
        let total = self.tree.total();
        let len = self.records.len() as f64;
        let mut indices = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random::<f64>() * total;
            let mut i = self.tree.find(u);
            // Rounding at interval edges can land on an empty leaf.
            if i >= self.records.len() {
                i = self.records.len() - 1;
            }
            indices.push(i);
        }
        // w_i = (N * p_i)^-beta / max_j w_j; the max is attained at the
        // minimum sampling probability.
        let mut min_mass = f64::INFINITY;
        for i in 0..self.records.len() {
            let m = self.tree.get(i);
            if m > 0.0 && m < min_mass {
                min_mass = m;
            }
        }
        let w_max = (len * min_mass / total).powf(-self.beta);
        let weights = indices
            .iter()
            .map(|&i| {
                let p = self.tree.get(i) / total;
                (len * p).powf(-self.beta) / w_max
            })
            .collect();
        SampledBatch { indices, weights }
    }
}

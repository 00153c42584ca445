use std::collections::BTreeMap;

/// Multiply-add accounting. One fused multiply-add counts as 2 FLOPs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlopCounter {
    total: u64,
    by_label: BTreeMap<String, u64>,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, label: &str, flops: u64) {
        self.total += flops;
        *self.by_label.entry(label.to_string()).or_insert(0) += flops;
    }

    /// Records `m*k*n` multiply-adds under `label`.
    pub fn add_matmul(&mut self, label: &str, m: usize, k: usize, n: usize) {
        self.add(label, 2 * (m as u64) * (k as u64) * (n as u64));
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn get(&self, label: &str) -> u64 {
        self.by_label.get(label).copied().unwrap_or(0)
    }

    pub fn labels(&self) -> impl Iterator<Item = (&str, u64)> {
        self.by_label.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        for (label, v) in other.labels() {
            self.add(label, v);
        }
    }
}

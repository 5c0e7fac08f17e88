use std::sync::atomic::{AtomicU64, Ordering};

/// Multiply-add counter shared by every kernel invoked on behalf of one stage.
#[derive(Debug, Default)]
pub struct Meter {
    madds: AtomicU64,
}

impl Meter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.madds.fetch_add(n, Ordering::Relaxed);
    }

    pub fn madds(&self) -> u64 {
        self.madds.load(Ordering::Relaxed)
    }

    pub fn take(&self) -> u64 {
        self.madds.swap(0, Ordering::Relaxed)
    }
}

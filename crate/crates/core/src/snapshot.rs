//! Copy-on-write publication of immutable snapshots.

use std::sync::{Arc, RwLock};

/// Readers take cheap [`Arc`] snapshots; a writer edits a private copy and
/// publishes it atomically. Snapshots already handed out never change.
#[derive(Debug)]
pub struct Shared<T> {
    current: RwLock<Arc<T>>,
}

impl<T: Clone> Shared<T> {
    pub fn new(value: T) -> Self {
        Self {
            current: RwLock::new(Arc::new(value)),
        }
    }

    pub fn snapshot(&self) -> Arc<T> {
        Arc::clone(&self.current.read().unwrap_or_else(|p| p.into_inner()))
    }

    /// Applies `f` to a private copy and publishes it.
    pub fn update<R>(&self, f: impl FnOnce(&mut T) -> R) -> R {
        let mut guard = self.current.write().unwrap_or_else(|p| p.into_inner());
        let mut next = T::clone(&guard);
        let out = f(&mut next);
        *guard = Arc::new(next);
        out
    }

    pub fn publish(&self, value: T) {
        *self.current.write().unwrap_or_else(|p| p.into_inner()) = Arc::new(value);
    }
}

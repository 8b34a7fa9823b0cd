//! Tracking of sensitive in-memory buffers.
//!
//! Full face images, reconstructed patches and dispatched authentication
//! shares are registered while alive. Tests and audits assert on the
//! registry instead of on process memory.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use zeroize::Zeroizing;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BufferKind {
    FullImage,
    ReconstructedPatch,
    AuthenticationShare,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BufferEntry {
    pub kind: BufferKind,
    pub owner: String,
    pub len: usize,
}

#[derive(Clone, Default)]
pub struct BufferRegistry {
    live: Arc<Mutex<BTreeMap<u64, BufferEntry>>>,
    next_id: Arc<AtomicU64>,
}

impl fmt::Debug for BufferRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BufferRegistry")
            .field("live", &self.live_count())
            .finish()
    }
}

impl BufferRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a buffer; the entry is released when the ticket drops.
    pub fn register(&self, kind: BufferKind, owner: impl Into<String>, len: usize) -> Ticket {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        self.live.lock().expect("registry lock").insert(
            id,
            BufferEntry {
                kind,
                owner: owner.into(),
                len,
            },
        );
        Ticket {
            id,
            registry: self.clone(),
        }
    }

    pub fn live(&self) -> Vec<BufferEntry> {
        self.live
            .lock()
            .expect("registry lock")
            .values()
            .cloned()
            .collect()
    }

    pub fn live_of(&self, kind: BufferKind) -> Vec<BufferEntry> {
        self.live().into_iter().filter(|e| e.kind == kind).collect()
    }

    pub fn live_owned_by(&self, owner: &str) -> Vec<BufferEntry> {
        self.live()
            .into_iter()
            .filter(|e| e.owner == owner)
            .collect()
    }

    pub fn live_count(&self) -> usize {
        self.live.lock().expect("registry lock").len()
    }

    fn release(&self, id: u64) {
        self.live.lock().expect("registry lock").remove(&id);
    }
}

/// Registration handle; dropping it removes the registry entry.
#[derive(Debug)]
pub struct Ticket {
    id: u64,
    registry: BufferRegistry,
}

impl Drop for Ticket {
    fn drop(&mut self) {
        self.registry.release(self.id);
    }
}

/// A registered byte buffer that is zeroized and deregistered on drop.
#[derive(Debug)]
pub struct TrackedBuffer {
    bytes: Zeroizing<Vec<u8>>,
    _ticket: Ticket,
}

impl TrackedBuffer {
    pub fn new(
        registry: &BufferRegistry,
        kind: BufferKind,
        owner: impl Into<String>,
        bytes: Vec<u8>,
    ) -> Self {
        let ticket = registry.register(kind, owner, bytes.len());
        TrackedBuffer {
            bytes: Zeroizing::new(bytes),
            _ticket: ticket,
        }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }
}

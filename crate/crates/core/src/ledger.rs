//! Global allocation ledger.
//!
//! Every tensor payload (and every nonlinearity mask) registers its bytes
//! here on construction and releases them on drop, so `live_bytes` is an
//! exact census of engine memory and `peak_bytes` its high-water mark.
//! Allocations carry a tag so that method-specific footprints (activation
//! caches, per-sample gradients, Gram matrices) can be read back
//! individually. Counters are atomics: concurrent allocations never lose
//! updates, though interleaved readers only see monotonic snapshots.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Category of a tracked allocation. Tags exist so a benchmark can answer
/// "how many bytes were activation caches" without instrumenting call sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AllocTag {
    /// Anything without a more specific category (weights, outputs, scratch).
    General,
    /// Layer inputs cached because a trainable weight will need them.
    ActivationCache,
    /// Instantiated per-sample gradients.
    PerSampleGrad,
    /// ReLU sign masks (1 byte per element).
    NonlinearityMask,
    /// Normalization residue needed to backpropagate through LayerNorm.
    NormStats,
    /// Gram matrices built by the ghost norm trick.
    Gram,
}

pub const ALL_TAGS: [AllocTag; 6] = [
    AllocTag::General,
    AllocTag::ActivationCache,
    AllocTag::PerSampleGrad,
    AllocTag::NonlinearityMask,
    AllocTag::NormStats,
    AllocTag::Gram,
];

impl AllocTag {
    pub fn name(self) -> &'static str {
        match self {
            AllocTag::General => "general",
            AllocTag::ActivationCache => "activation-cache",
            AllocTag::PerSampleGrad => "per-sample-grad",
            AllocTag::NonlinearityMask => "nonlinearity-mask",
            AllocTag::NormStats => "norm-stats",
            AllocTag::Gram => "gram",
        }
    }

    fn idx(self) -> usize {
        match self {
            AllocTag::General => 0,
            AllocTag::ActivationCache => 1,
            AllocTag::PerSampleGrad => 2,
            AllocTag::NonlinearityMask => 3,
            AllocTag::NormStats => 4,
            AllocTag::Gram => 5,
        }
    }
}

const N_TAGS: usize = 6;

struct Ledger {
    live_total: AtomicU64,
    peak_total: AtomicU64,
    live_tag: [AtomicU64; N_TAGS],
    peak_tag: [AtomicU64; N_TAGS],
    // Peak-window watermarks, reset by `begin_peak_window`. Benchmarks use
    // these to attribute a peak to one measured region.
    win_total: AtomicU64,
    win_tag: [AtomicU64; N_TAGS],
}

#[allow(clippy::declare_interior_mutable_const)]
const ZERO: AtomicU64 = AtomicU64::new(0);

static LEDGER: Ledger = Ledger {
    live_total: ZERO,
    peak_total: ZERO,
    live_tag: [ZERO; N_TAGS],
    peak_tag: [ZERO; N_TAGS],
    win_total: ZERO,
    win_tag: [ZERO; N_TAGS],
};

fn max_update(slot: &AtomicU64, candidate: u64) {
    slot.fetch_max(candidate, Ordering::Relaxed);
}

/// Register `bytes` of payload under `tag`.
pub(crate) fn alloc(tag: AllocTag, bytes: u64) {
    if bytes == 0 {
        return;
    }
    let i = tag.idx();
    let tag_now = LEDGER.live_tag[i].fetch_add(bytes, Ordering::Relaxed) + bytes;
    let total_now = LEDGER.live_total.fetch_add(bytes, Ordering::Relaxed) + bytes;
    max_update(&LEDGER.peak_tag[i], tag_now);
    max_update(&LEDGER.peak_total, total_now);
    max_update(&LEDGER.win_tag[i], tag_now);
    max_update(&LEDGER.win_total, total_now);
}

/// Release `bytes` previously registered under `tag`.
pub(crate) fn release(tag: AllocTag, bytes: u64) {
    if bytes == 0 {
        return;
    }
    let i = tag.idx();
    let before = LEDGER.live_tag[i].fetch_sub(bytes, Ordering::Relaxed);
    debug_assert!(before >= bytes, "ledger underflow for tag {}", tag.name());
    let total_before = LEDGER.live_total.fetch_sub(bytes, Ordering::Relaxed);
    debug_assert!(total_before >= bytes, "ledger total underflow");
}

/// Bytes currently live across all tags.
pub fn live_bytes() -> u64 {
    LEDGER.live_total.load(Ordering::Relaxed)
}

/// High-water mark since process start.
pub fn peak_bytes() -> u64 {
    LEDGER.peak_total.load(Ordering::Relaxed)
}

/// Bytes currently live under one tag.
pub fn tag_live(tag: AllocTag) -> u64 {
    LEDGER.live_tag[tag.idx()].load(Ordering::Relaxed)
}

/// High-water mark of one tag since process start.
pub fn tag_peak(tag: AllocTag) -> u64 {
    LEDGER.peak_tag[tag.idx()].load(Ordering::Relaxed)
}

/// Reset the window watermarks to the current live values. Subsequent
/// `window_peak_bytes` / `window_tag_peak` calls report peaks since this
/// point. There is one global window; measured regions must not overlap.
pub fn begin_peak_window() {
    LEDGER
        .win_total
        .store(LEDGER.live_total.load(Ordering::Relaxed), Ordering::Relaxed);
    for (i, slot) in LEDGER.win_tag.iter().enumerate() {
        slot.store(LEDGER.live_tag[i].load(Ordering::Relaxed), Ordering::Relaxed);
    }
}

/// Peak total bytes since the last `begin_peak_window`.
pub fn window_peak_bytes() -> u64 {
    LEDGER.win_total.load(Ordering::Relaxed)
}

/// Peak bytes of one tag since the last `begin_peak_window`.
pub fn window_tag_peak(tag: AllocTag) -> u64 {
    LEDGER.win_tag[tag.idx()].load(Ordering::Relaxed)
}

/// Point-in-time view of the ledger.
#[derive(Debug, Clone)]
pub struct LedgerSnapshot {
    pub live_bytes: u64,
    pub peak_bytes: u64,
    pub tagged_totals: BTreeMap<&'static str, u64>,
}

pub fn snapshot() -> LedgerSnapshot {
    let mut tagged_totals = BTreeMap::new();
    for tag in ALL_TAGS {
        tagged_totals.insert(tag.name(), tag_live(tag));
    }
    LedgerSnapshot {
        live_bytes: live_bytes(),
        peak_bytes: peak_bytes(),
        tagged_totals,
    }
}

/// Verify internal consistency: the per-tag totals must sum to the global
/// live count. All payloads register through this module, so a mismatch
/// means an allocation escaped its tag accounting.
pub fn audit() -> Result<()> {
    let total: u64 = ALL_TAGS.iter().map(|t| tag_live(*t)).sum();
    let live = live_bytes();
    if total != live {
        return Err(Error::Internal(format!(
            "ledger audit failed: tag sum {total} != live {live}"
        )));
    }
    Ok(())
}

/// Byte mask buffer (1 byte per element), ledger-tracked like a tensor.
/// Used for ReLU sign masks.
#[derive(Debug)]
pub struct MaskBuf {
    data: Vec<u8>,
}

impl MaskBuf {
    pub fn new(data: Vec<u8>) -> MaskBuf {
        alloc(AllocTag::NonlinearityMask, data.len() as u64);
        MaskBuf { data }
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

impl Clone for MaskBuf {
    fn clone(&self) -> MaskBuf {
        MaskBuf::new(self.data.clone())
    }
}

impl Drop for MaskBuf {
    fn drop(&mut self) {
        release(AllocTag::NonlinearityMask, self.data.len() as u64);
    }
}

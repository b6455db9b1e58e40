//! Byte-accounting memory meter.
//!
//! Every [`Buffer`](super::Buffer) reports its payload size here on creation
//! and on drop, so the meter tracks live tensor bytes (data, gradients and
//! saved intermediates) without looking at the allocator. The meter is
//! thread-local: a tape and its tensors never cross threads.

use std::cell::RefCell;
use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MeterError {
    #[error("memory scope close without an open scope (closing `{0}`)")]
    NoOpenScope(String),
    #[error("memory scope `{closing}` closed while `{open}` is the innermost open scope")]
    Unbalanced { open: String, closing: String },
}

/// Result of one closed measurement scope.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScopeReport {
    pub name: String,
    /// Highest live byte count observed while the scope was open.
    pub peak_bytes: u64,
    /// Live bytes at close minus live bytes at open.
    pub net_bytes: i64,
}

#[derive(Debug, Clone)]
struct OpenScope {
    name: String,
    start_bytes: u64,
    peak_bytes: u64,
}

#[derive(Debug, Default, Clone)]
pub struct MemoryMeter {
    current_live_bytes: u64,
    peak_bytes: u64,
    scope_stack: Vec<OpenScope>,
    per_scope_peaks: BTreeMap<String, u64>,
}

impl MemoryMeter {
    pub fn current_live_bytes(&self) -> u64 {
        self.current_live_bytes
    }

    pub fn peak_bytes(&self) -> u64 {
        self.peak_bytes
    }

    pub fn open_scopes(&self) -> Vec<String> {
        self.scope_stack.iter().map(|s| s.name.clone()).collect()
    }

    pub fn per_scope_peaks(&self) -> &BTreeMap<String, u64> {
        &self.per_scope_peaks
    }

    fn alloc(&mut self, bytes: u64) {
        self.current_live_bytes += bytes;
        if self.current_live_bytes > self.peak_bytes {
            self.peak_bytes = self.current_live_bytes;
        }
        for scope in &mut self.scope_stack {
            scope.peak_bytes = scope.peak_bytes.max(self.current_live_bytes);
        }
    }

    fn free(&mut self, bytes: u64) {
        debug_assert!(bytes <= self.current_live_bytes, "meter underflow");
        self.current_live_bytes = self.current_live_bytes.saturating_sub(bytes);
    }

    fn enter(&mut self, name: &str) {
        self.scope_stack.push(OpenScope {
            name: name.to_string(),
            start_bytes: self.current_live_bytes,
            peak_bytes: self.current_live_bytes,
        });
    }

    fn exit(&mut self, name: &str) -> Result<ScopeReport, MeterError> {
        let open = self
            .scope_stack
            .last()
            .ok_or_else(|| MeterError::NoOpenScope(name.to_string()))?;
        if open.name != name {
            return Err(MeterError::Unbalanced {
                open: open.name.clone(),
                closing: name.to_string(),
            });
        }
        let scope = self.scope_stack.pop().expect("checked above");
        let entry = self.per_scope_peaks.entry(scope.name.clone()).or_insert(0);
        *entry = (*entry).max(scope.peak_bytes);
        Ok(ScopeReport {
            name: scope.name,
            peak_bytes: scope.peak_bytes,
            net_bytes: self.current_live_bytes as i64 - scope.start_bytes as i64,
        })
    }
}

thread_local! {
    static METER: RefCell<MemoryMeter> = RefCell::new(MemoryMeter::default());
}

pub(crate) fn record_alloc(bytes: u64) {
    METER.with(|m| m.borrow_mut().alloc(bytes));
}

pub(crate) fn record_free(bytes: u64) {
    METER.with(|m| m.borrow_mut().free(bytes));
}

/// Copy of this thread's meter state.
pub fn snapshot() -> MemoryMeter {
    METER.with(|m| m.borrow().clone())
}

pub fn live_bytes() -> u64 {
    METER.with(|m| m.borrow().current_live_bytes)
}

pub fn enter_scope(name: &str) {
    METER.with(|m| m.borrow_mut().enter(name));
}

pub fn exit_scope(name: &str) -> Result<ScopeReport, MeterError> {
    METER.with(|m| m.borrow_mut().exit(name))
}

/// Runs `body` inside a named measurement scope and reports the peak live
/// bytes observed while it ran.
pub fn mem_scope<R>(name: &str, body: impl FnOnce() -> R) -> (R, ScopeReport) {
    enter_scope(name);
    let out = body();
    let report = exit_scope(name).expect("closure scopes are balanced");
    (out, report)
}

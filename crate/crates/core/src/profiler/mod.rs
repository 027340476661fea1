//! Start/stop per-function timing registry.
//!
//! A [`Profiler`] is attached to the current thread with [`Profiler::enter`];
//! instrumented code opens named regions with [`scope`]. Each region records
//! its call count, its inclusive time and its exclusive (self) time, where
//! time spent in nested instrumented regions on the same thread is subtracted
//! from the enclosing region.
//!
//! Accumulation happens in per-thread shards, so the hot path only touches an
//! uncontended lock owned by the recording thread. Shards are merged when a
//! snapshot is taken.

mod clock;
pub mod labels;
mod taxonomy;

pub use clock::ClockKind;
pub use taxonomy::{
    categorize, estimate_pipeline_speedup, Category, CategoryBreakdown, Taxonomy,
};

use std::cell::RefCell;
use std::collections::HashMap;
use std::io;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProfilerError {
    #[error("profiler is not running")]
    NotRunning,
    #[error("profiler is already running")]
    AlreadyRunning,
    #[error("empty stats: category fractions are undefined")]
    EmptyStats,
    #[error("total time is zero: speedup estimate is undefined")]
    UndefinedEstimate,
}

/// Whether [`Profiler::start_with`] clears previously recorded data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StartMode {
    #[default]
    Reset,
    Accumulate,
}

/// Aggregated timings for one instrumentation label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionStats {
    pub label: String,
    pub ncalls: u64,
    pub exclusive_ns: u64,
    pub inclusive_ns: u64,
    pub clock: ClockKind,
}

impl FunctionStats {
    pub fn total_exclusive(&self) -> Duration {
        Duration::from_nanos(self.exclusive_ns)
    }

    pub fn total_inclusive(&self) -> Duration {
        Duration::from_nanos(self.inclusive_ns)
    }

    pub fn exclusive_seconds(&self) -> f64 {
        self.exclusive_ns as f64 * 1e-9
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Acc {
    ncalls: u64,
    exclusive_ns: u64,
    inclusive_ns: u64,
}

#[derive(Default)]
struct Shard {
    data: Mutex<HashMap<&'static str, Acc>>,
}

impl Shard {
    fn record(&self, label: &'static str, exclusive_ns: u64, inclusive_ns: u64) {
        let mut data = self.data.lock().unwrap_or_else(|e| e.into_inner());
        let acc = data.entry(label).or_default();
        acc.ncalls += 1;
        acc.exclusive_ns += exclusive_ns;
        acc.inclusive_ns += inclusive_ns;
    }
}

struct Inner {
    id: u64,
    name: String,
    running: AtomicBool,
    clock: AtomicU8,
    generation: AtomicU64,
    shards: Mutex<Vec<Arc<Shard>>>,
}

impl Inner {
    fn clock(&self) -> ClockKind {
        match self.clock.load(Ordering::Relaxed) {
            0 => ClockKind::Cpu,
            _ => ClockKind::Wall,
        }
    }

    fn shard_for_current_thread(self: &Arc<Self>) -> Arc<Shard> {
        THREAD_SHARDS.with(|shards| {
            let mut shards = shards.borrow_mut();
            if let Some((_, shard)) = shards.iter().find(|(id, _)| *id == self.id) {
                return shard.clone();
            }
            let shard = Arc::new(Shard::default());
            self.shards
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .push(shard.clone());
            shards.push((self.id, shard.clone()));
            shard
        })
    }
}

/// A named timing registry. Cloning yields another handle to the same registry.
#[derive(Clone)]
pub struct Profiler {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Profiler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Profiler")
            .field("name", &self.inner.name)
            .field("running", &self.is_running())
            .field("clock", &self.inner.clock())
            .finish()
    }
}

static NEXT_PROFILER_ID: AtomicU64 = AtomicU64::new(1);

impl Profiler {
    pub fn new(name: impl Into<String>) -> Self {
        Profiler {
            inner: Arc::new(Inner {
                id: NEXT_PROFILER_ID.fetch_add(1, Ordering::Relaxed),
                name: name.into(),
                running: AtomicBool::new(false),
                clock: AtomicU8::new(0),
                generation: AtomicU64::new(0),
                shards: Mutex::new(Vec::new()),
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn is_running(&self) -> bool {
        self.inner.running.load(Ordering::Acquire)
    }

    pub fn clock(&self) -> ClockKind {
        self.inner.clock()
    }

    /// Starts recording, discarding any earlier data.
    pub fn start(&self, clock: ClockKind) -> Result<(), ProfilerError> {
        self.start_with(clock, StartMode::Reset)
    }

    pub fn start_with(&self, clock: ClockKind, mode: StartMode) -> Result<(), ProfilerError> {
        if self.is_running() {
            return Err(ProfilerError::AlreadyRunning);
        }
        if mode == StartMode::Reset {
            for shard in self.inner.shards.lock().unwrap_or_else(|e| e.into_inner()).iter() {
                shard.data.lock().unwrap_or_else(|e| e.into_inner()).clear();
            }
        }
        let tag = match clock {
            ClockKind::Cpu => 0,
            ClockKind::Wall => 1,
        };
        self.inner.clock.store(tag, Ordering::Relaxed);
        self.inner.generation.fetch_add(1, Ordering::AcqRel);
        self.inner.running.store(true, Ordering::Release);
        Ok(())
    }

    /// Stops recording. Regions still open when this is called are dropped.
    pub fn stop(&self) -> Result<(), ProfilerError> {
        if self
            .inner
            .running
            .compare_exchange(true, false, Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            return Err(ProfilerError::NotRunning);
        }
        self.inner.generation.fetch_add(1, Ordering::AcqRel);
        Ok(())
    }

    /// Merged statistics from every thread, sorted by label.
    pub fn snapshot(&self) -> Vec<FunctionStats> {
        let mut merged: HashMap<&'static str, Acc> = HashMap::new();
        for shard in self.inner.shards.lock().unwrap_or_else(|e| e.into_inner()).iter() {
            for (label, acc) in shard.data.lock().unwrap_or_else(|e| e.into_inner()).iter() {
                let m = merged.entry(label).or_default();
                m.ncalls += acc.ncalls;
                m.exclusive_ns += acc.exclusive_ns;
                m.inclusive_ns += acc.inclusive_ns;
            }
        }
        let clock = self.clock();
        let mut out: Vec<FunctionStats> = merged
            .into_iter()
            .map(|(label, acc)| FunctionStats {
                label: label.to_string(),
                ncalls: acc.ncalls,
                exclusive_ns: acc.exclusive_ns,
                inclusive_ns: acc.inclusive_ns,
                clock,
            })
            .collect();
        out.sort_by(|a, b| a.label.cmp(&b.label));
        out
    }

    /// Makes this profiler the recording target for [`scope`] on the calling
    /// thread until the guard is dropped.
    pub fn enter(&self) -> EnterGuard {
        let shard = self.inner.shard_for_current_thread();
        let previous = CURRENT.with(|c| {
            c.borrow_mut().replace(Active {
                inner: self.inner.clone(),
                shard,
            })
        });
        EnterGuard {
            previous,
            _not_send: std::marker::PhantomData,
        }
    }
}

struct Active {
    inner: Arc<Inner>,
    shard: Arc<Shard>,
}

struct Frame {
    label: &'static str,
    clock: ClockKind,
    start_ns: u64,
    child_ns: u64,
    generation: u64,
    inner: Arc<Inner>,
    shard: Arc<Shard>,
}

thread_local! {
    static CURRENT: RefCell<Option<Active>> = const { RefCell::new(None) };
    static STACK: RefCell<Vec<Frame>> = const { RefCell::new(Vec::new()) };
    static THREAD_SHARDS: RefCell<Vec<(u64, Arc<Shard>)>> = const { RefCell::new(Vec::new()) };
}

#[must_use = "dropping the guard detaches the profiler immediately"]
pub struct EnterGuard {
    previous: Option<Active>,
    _not_send: std::marker::PhantomData<*const ()>,
}

impl Drop for EnterGuard {
    fn drop(&mut self) {
        let previous = self.previous.take();
        CURRENT.with(|c| *c.borrow_mut() = previous);
    }
}

/// An open instrumented region; timing stops when it is dropped.
#[must_use = "a scope measures nothing unless it is held until the region ends"]
pub struct Scope {
    active: bool,
    _not_send: std::marker::PhantomData<*const ()>,
}

/// Opens an instrumented region on the thread's current profiler. This is a
/// no-op when no profiler is entered or the entered one is stopped.
#[inline]
pub fn scope(label: &'static str) -> Scope {
    let frame = CURRENT.with(|c| {
        let c = c.borrow();
        let active = c.as_ref()?;
        if !active.inner.running.load(Ordering::Relaxed) {
            return None;
        }
        let clock = active.inner.clock();
        Some(Frame {
            label,
            clock,
            start_ns: 0,
            child_ns: 0,
            generation: active.inner.generation.load(Ordering::Relaxed),
            inner: active.inner.clone(),
            shard: active.shard.clone(),
        })
    });
    match frame {
        Some(mut frame) => {
            frame.start_ns = frame.clock.now_ns();
            STACK.with(|s| s.borrow_mut().push(frame));
            Scope {
                active: true,
                _not_send: std::marker::PhantomData,
            }
        }
        None => Scope {
            active: false,
            _not_send: std::marker::PhantomData,
        },
    }
}

impl Drop for Scope {
    fn drop(&mut self) {
        if !self.active {
            return;
        }
        STACK.with(|s| {
            let mut stack = s.borrow_mut();
            let Some(frame) = stack.pop() else { return };
            let end = frame.clock.now_ns();
            let inclusive = end.saturating_sub(frame.start_ns);
            let exclusive = inclusive.saturating_sub(frame.child_ns);
            if let Some(parent) = stack.last_mut() {
                parent.child_ns += inclusive;
            }
            drop(stack);
            let inner = &frame.inner;
            if inner.running.load(Ordering::Relaxed)
                && inner.generation.load(Ordering::Relaxed) == frame.generation
            {
                frame.shard.record(frame.label, exclusive, inclusive);
            }
        });
    }
}

/// Runs `f` inside a region named `label`.
#[inline]
pub fn timed<T>(label: &'static str, f: impl FnOnce() -> T) -> T {
    let _scope = scope(label);
    f()
}

/// Sums several snapshots label by label, e.g. all relay nodes of one run.
pub fn merge_stats<'a>(snapshots: impl IntoIterator<Item = &'a [FunctionStats]>) -> Vec<FunctionStats> {
    let mut merged: HashMap<String, FunctionStats> = HashMap::new();
    for snapshot in snapshots {
        for s in snapshot {
            merged
                .entry(s.label.clone())
                .and_modify(|m| {
                    m.ncalls += s.ncalls;
                    m.exclusive_ns += s.exclusive_ns;
                    m.inclusive_ns += s.inclusive_ns;
                })
                .or_insert_with(|| s.clone());
        }
    }
    let mut out: Vec<FunctionStats> = merged.into_values().collect();
    out.sort_by(|a, b| a.label.cmp(&b.label));
    out
}

/// Writes `label,ncalls,total_seconds,clock,category` rows.
pub fn write_stats_csv<W: io::Write>(
    out: W,
    stats: &[FunctionStats],
    taxonomy: &Taxonomy,
) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["label", "ncalls", "total_seconds", "clock", "category"])?;
    for s in stats {
        w.write_record([
            s.label.as_str(),
            &s.ncalls.to_string(),
            &format_seconds(s.exclusive_ns),
            s.clock.as_str(),
            taxonomy.category_of(&s.label).as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses rows written by [`write_stats_csv`]. Times are rebuilt to the
/// nanosecond.
pub fn read_stats_csv<R: io::Read>(input: R) -> Result<Vec<FunctionStats>, csv::Error> {
    #[derive(Deserialize)]
    struct Row {
        label: String,
        ncalls: u64,
        total_seconds: String,
        clock: ClockKind,
    }
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: Row = row?;
        let ns = parse_seconds(&row.total_seconds).unwrap_or(0);
        out.push(FunctionStats {
            label: row.label,
            ncalls: row.ncalls,
            exclusive_ns: ns,
            inclusive_ns: ns,
            clock: row.clock,
        });
    }
    Ok(out)
}

fn format_seconds(ns: u64) -> String {
    format!("{}.{:09}", ns / 1_000_000_000, ns % 1_000_000_000)
}

fn parse_seconds(s: &str) -> Option<u64> {
    let (whole, frac) = s.split_once('.').unwrap_or((s, "0"));
    let whole: u64 = whole.parse().ok()?;
    let mut frac = frac.to_string();
    frac.truncate(9);
    while frac.len() < 9 {
        frac.push('0');
    }
    Some(whole * 1_000_000_000 + frac.parse::<u64>().ok()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::hint::black_box;

    fn spin(iters: u64) -> u64 {
        let mut x = 0u64;
        for i in 0..iters {
            x = black_box(x.wrapping_mul(31).wrapping_add(i));
        }
        x
    }

    fn get<'a>(stats: &'a [FunctionStats], label: &str) -> &'a FunctionStats {
        stats.iter().find(|s| s.label == label).unwrap()
    }

    #[test]
    fn counts_are_exact() {
        let p = Profiler::new("t");
        p.start(ClockKind::Cpu).unwrap();
        let _g = p.enter();
        for _ in 0..5 {
            let _s = scope("work");
            spin(10);
        }
        p.stop().unwrap();
        let stats = p.snapshot();
        assert_eq!(get(&stats, "work").ncalls, 5);
    }

    #[test]
    fn nothing_recorded_while_stopped() {
        let p = Profiler::new("t");
        let _g = p.enter();
        {
            let _s = scope("before");
        }
        p.start(ClockKind::Wall).unwrap();
        {
            let _s = scope("during");
        }
        p.stop().unwrap();
        {
            let _s = scope("after");
        }
        let labels: Vec<_> = p.snapshot().into_iter().map(|s| s.label).collect();
        assert_eq!(labels, vec!["during".to_string()]);
    }

    #[test]
    fn scope_open_across_stop_is_discarded() {
        let p = Profiler::new("t");
        let _g = p.enter();
        p.start(ClockKind::Wall).unwrap();
        let s = scope("straddle");
        p.stop().unwrap();
        drop(s);
        assert!(p.snapshot().is_empty());
    }

    #[test]
    fn stop_without_start_is_an_error() {
        let p = Profiler::new("t");
        assert_eq!(p.stop(), Err(ProfilerError::NotRunning));
        p.start(ClockKind::Cpu).unwrap();
        assert_eq!(p.start(ClockKind::Cpu), Err(ProfilerError::AlreadyRunning));
        p.stop().unwrap();
        assert_eq!(p.stop(), Err(ProfilerError::NotRunning));
    }

    #[test]
    fn restart_resets_by_default_and_can_accumulate() {
        let p = Profiler::new("t");
        let _g = p.enter();
        for mode in [StartMode::Reset, StartMode::Accumulate] {
            p.start_with(ClockKind::Cpu, mode).unwrap();
            for _ in 0..3 {
                let _s = scope("x");
            }
            p.stop().unwrap();
        }
        assert_eq!(get(&p.snapshot(), "x").ncalls, 6);
        p.start(ClockKind::Cpu).unwrap();
        p.stop().unwrap();
        assert!(p.snapshot().is_empty());
    }

    #[test]
    fn nested_exclusive_times_partition_the_inclusive_time() {
        let p = Profiler::new("t");
        let _g = p.enter();
        p.start(ClockKind::Wall).unwrap();
        for _ in 0..20 {
            let _a = scope("outer");
            spin(20_000);
            {
                let _b = scope("inner");
                spin(40_000);
            }
            spin(10_000);
        }
        p.stop().unwrap();
        let stats = p.snapshot();
        let outer = get(&stats, "outer");
        let inner = get(&stats, "inner");
        assert_eq!(inner.exclusive_ns, inner.inclusive_ns);
        assert_eq!(outer.exclusive_ns + inner.inclusive_ns, outer.inclusive_ns);
        assert!(inner.exclusive_ns > 0 && outer.exclusive_ns > 0);
    }

    #[test]
    fn inactive_without_enter() {
        let p = Profiler::new("t");
        p.start(ClockKind::Cpu).unwrap();
        {
            let _s = scope("unattached");
        }
        assert!(p.snapshot().is_empty());
    }

    #[test]
    fn threads_merge_on_snapshot() {
        let p = Profiler::new("t");
        p.start(ClockKind::Cpu).unwrap();
        std::thread::scope(|s| {
            for _ in 0..4 {
                let p = p.clone();
                s.spawn(move || {
                    let _g = p.enter();
                    for _ in 0..250 {
                        let _s = scope("hot");
                    }
                });
            }
        });
        p.stop().unwrap();
        assert_eq!(get(&p.snapshot(), "hot").ncalls, 1000);
    }

    #[test]
    fn enter_nests_and_restores() {
        let a = Profiler::new("a");
        let b = Profiler::new("b");
        a.start(ClockKind::Cpu).unwrap();
        b.start(ClockKind::Cpu).unwrap();
        let _ga = a.enter();
        {
            let _gb = b.enter();
            let _s = scope("in_b");
        }
        {
            let _s = scope("in_a");
        }
        assert_eq!(a.snapshot().len(), 1);
        assert_eq!(a.snapshot()[0].label, "in_a");
        assert_eq!(b.snapshot()[0].label, "in_b");
    }

    #[test]
    fn csv_round_trip() {
        let stats = vec![
            FunctionStats {
                label: "encrypt_str".into(),
                ncalls: 7,
                exclusive_ns: 1_234_567_891,
                inclusive_ns: 1_234_567_891,
                clock: ClockKind::Cpu,
            },
            FunctionStats {
                label: "dispatch".into(),
                ncalls: 1,
                exclusive_ns: 5,
                inclusive_ns: 5,
                clock: ClockKind::Cpu,
            },
        ];
        let mut buf = Vec::new();
        write_stats_csv(&mut buf, &stats, &Taxonomy::default()).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("label,ncalls,total_seconds,clock,category\n"));
        assert!(text.contains("encrypt_str,7,1.234567891,cpu,crypto\n"));
        assert!(text.contains("dispatch,1,0.000000005,cpu,other\n"));
        assert_eq!(read_stats_csv(buf.as_slice()).unwrap(), stats);
    }

    #[test]
    fn merge_sums_by_label() {
        let mk = |label: &str, n: u64| FunctionStats {
            label: label.into(),
            ncalls: n,
            exclusive_ns: n * 10,
            inclusive_ns: n * 20,
            clock: ClockKind::Cpu,
        };
        let a = vec![mk("x", 1), mk("y", 2)];
        let b = vec![mk("x", 3)];
        let m = merge_stats([a.as_slice(), b.as_slice()]);
        assert_eq!(m, vec![mk("x", 4), mk("y", 2)]);
    }
}

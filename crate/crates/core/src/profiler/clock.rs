use std::sync::OnceLock;
use std::time::Instant;

use serde::{Deserialize, Serialize};

/// Which clock a profiling session reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClockKind {
    /// CPU time consumed by the calling thread.
    #[default]
    Cpu,
    /// Monotonic wall-clock time.
    Wall,
}

impl ClockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClockKind::Cpu => "cpu",
            ClockKind::Wall => "wall",
        }
    }

    /// Current reading in nanoseconds. Only differences between two readings
    /// taken on the same thread are meaningful.
    #[inline]
    pub fn now_ns(self) -> u64 {
        match self {
            ClockKind::Cpu => thread_cpu_ns(),
            ClockKind::Wall => wall_ns(),
        }
    }
}

impl std::fmt::Display for ClockKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ClockKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cpu" => Ok(ClockKind::Cpu),
            "wall" => Ok(ClockKind::Wall),
            other => Err(format!("unknown clock `{other}` (expected cpu or wall)")),
        }
    }
}

fn wall_ns() -> u64 {
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    EPOCH.get_or_init(Instant::now).elapsed().as_nanos() as u64
}

#[cfg(unix)]
fn thread_cpu_ns() -> u64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: `ts` is a valid, writable timespec.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return wall_ns();
    }
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

#[cfg(not(unix))]
fn thread_cpu_ns() -> u64 {
    wall_ns()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clocks_are_monotonic() {
        for clock in [ClockKind::Cpu, ClockKind::Wall] {
            let a = clock.now_ns();
            let mut x = 0u64;
            for i in 0..100_000u64 {
                x = std::hint::black_box(x.wrapping_add(i));
            }
            let b = clock.now_ns();
            assert!(b >= a, "{clock} went backwards");
        }
    }

    #[test]
    fn cpu_clock_ignores_sleep() {
        let a = ClockKind::Cpu.now_ns();
        std::thread::sleep(std::time::Duration::from_millis(30));
        let b = ClockKind::Cpu.now_ns();
        assert!(b - a < 20_000_000, "cpu clock advanced {} ns while sleeping", b - a);
    }

    #[test]
    fn parses_names() {
        assert_eq!("CPU".parse::<ClockKind>().unwrap(), ClockKind::Cpu);
        assert_eq!("wall".parse::<ClockKind>().unwrap(), ClockKind::Wall);
        assert!("tsc".parse::<ClockKind>().is_err());
    }
}

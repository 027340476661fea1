pub mod nodes;
pub mod onion;
pub mod profiler;
pub mod transport;
pub mod harness;
pub mod report;

//! Library surface of the CLI: converter, bench harness, and report
//! rendering, kept testable apart from argument parsing.

pub mod bench;
pub mod convert;
pub mod raw;
pub mod report;

/// Worker-count default: `SPARAMX_THREADS` overrides, else the machine's
/// available parallelism.
pub fn default_workers() -> usize {
    if let Ok(v) = std::env::var("SPARAMX_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

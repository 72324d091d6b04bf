//! Benchmark-only crate; see `benches/sampler.rs`.

//! Criterion benchmarks for mfhi-core; see `benches/`.

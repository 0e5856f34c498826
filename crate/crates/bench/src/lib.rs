//! Criterion benchmarks for masked sampling; see `benches/`.

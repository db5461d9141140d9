//! Criterion benchmarks for the hot paths of `lfp-core`; see `benches/`.

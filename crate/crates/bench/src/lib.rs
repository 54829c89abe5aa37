//! Criterion benchmarks for the hot paths of `fvlab-core`; see `benches/`.

//! Criterion benchmarks for the hot paths of `uiekit-core`; see `benches/`.

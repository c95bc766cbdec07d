//! Criterion benchmarks for `cavlase-core`; see `benches/`.

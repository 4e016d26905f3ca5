//! Criterion benchmarks for the lvqa harness live under `benches/`.

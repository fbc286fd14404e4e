//! Benchmarks for the merging toolkit live in `benches/`.

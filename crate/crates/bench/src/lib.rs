//! Criterion benchmarks for the loopvox kernels live in `benches/`.

//! Criterion benchmarks for the sparse runtime and the density bridge; run
//! with `cargo bench -p ptsparse-bench`.

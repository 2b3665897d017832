//! Criterion benchmarks for the bisection game and the simulator; see
//! `benches/`. Run with `cargo bench -p sakshi-bench`.

//! Benchmarks live in .

//! Benchmarks live in `benches/`; run `cargo bench -p setemd-bench`.

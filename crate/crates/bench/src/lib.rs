//! Benchmark-only crate; see `benches/hot_paths.rs`. The package exists so
//! `cargo bench` has a home for criterion targets without weighing down the
//! core library's dev-dependencies.

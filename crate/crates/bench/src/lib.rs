//! Benchmarks for the segmentation pipeline; see `benches/pipeline.rs`.

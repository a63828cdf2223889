pub mod dataset;
pub mod embedder;
pub mod metric;
pub mod preprocess;
pub mod retrieval;
pub mod synthdata;
pub mod transfer;

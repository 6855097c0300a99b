//! Bidirectional image-captioning pretraining over paired images and reports,
//! prompted report generation, and the evaluation metrics used to score both.

pub mod numerics;
pub mod textpipe;
pub mod model;
pub mod data;
pub mod evalmetrics;
pub mod training;
pub mod caption;
pub mod pipeline;

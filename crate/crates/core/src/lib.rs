#![no_std]

extern crate alloc;

pub mod domain;
pub mod engine;
pub mod error;
pub mod fmea_block;
pub mod gate;
pub mod llm;
pub mod metrics;
pub mod prompt;
pub mod retrieval;
pub mod routing;

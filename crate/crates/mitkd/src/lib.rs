//! Desk-scale laboratory for task-agnostic distillation of tiny transformer
//! encoders, comparing three ways of preparing the teacher — plain pretrained,
//! single-task finetuned, and multi-task finetuned — under one identical
//! relation-matching distillation recipe, followed by an in-domain /
//! out-domain / low-resource evaluation protocol.

pub mod error;
pub mod rng;
pub mod tensor;
pub mod tape;
pub mod optim;
pub mod model;
pub mod corpus;
pub mod distill;
pub mod eval;
pub mod pipeline;
pub mod mtl;

pub use error::{Error, Result};

//! Desk-scale laboratory for studying how bounded pointwise normalizers
//! (Derf, DyT and variants) interact with AdamW and Muon.

pub mod codec;
pub mod corpus;
pub mod diagnostics;
pub mod harness;
pub mod model;
pub mod norm;
pub mod optim;
pub mod params;
pub mod report;
pub mod tensor;
pub mod tpcost;

// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod clip;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod interchange;
pub mod knockout;
pub mod lens;
pub mod nn;
pub mod par;
pub mod regions;
pub mod seg;
pub mod toy;
pub mod vlm;

// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod analysis;
pub mod corpus;
pub mod dla;
pub mod error;
pub mod experiments;
pub mod interventions;
pub mod kernels;
pub mod model;
pub mod report;
pub mod synthetic;

pub use error::{Error, Result};

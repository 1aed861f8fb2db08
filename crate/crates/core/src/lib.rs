//! Robust small-signal stability certificates for DC microgrids with
//! constant power loads of uncertain size.

pub mod certify;
pub mod equilibrium;
pub mod model;
pub mod report;
pub mod sim;
pub mod sweep;
pub mod uncertainty;

pub mod clearing;
pub mod domain;
pub mod formation;
pub mod objective;
pub mod optimizer;
pub mod pricing;
pub mod returns;
pub mod welfare;

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

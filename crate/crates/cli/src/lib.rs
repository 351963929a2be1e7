//! Support code for the `volseg` binary: structured logging, run manifests
//! and guarded output writing.

pub mod logging;
pub mod manifest;
pub mod output;

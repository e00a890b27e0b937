//! Checks shared by the focused test targets and the acceptance report.
#![allow(dead_code)]

pub mod grad_suite;
pub mod oracles;
pub mod partition;

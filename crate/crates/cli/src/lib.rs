//! Library side of the merge CLI: recipes, fixtures, command runners,
//! and report writers. The `fusekit` binary is a thin argument parser
//! over these.

pub mod error;
pub mod fixture;
pub mod recipe;
pub mod report;
pub mod run;

//! Travel-time distribution learning and route recovery from sparse GPS
//! trajectories.
//!
//! Observed gaps between consecutive GPS fixes are weak labels: only the
//! total time over an unknown route is known. Training alternates between
//! fitting per-segment travel-time distributions to those totals under the
//! currently assigned routes, and reassigning each gap to the candidate
//! route whose expected time best matches it.

pub mod netgraph;
pub mod pathing;
pub mod stmodel;
pub mod simkit;
pub mod emtrain;
pub mod evalkit;

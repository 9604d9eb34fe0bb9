//! Interpolant schedules, synthetic targets and time-pair samplers.

mod dataset;
mod schedule;
mod times;

pub use dataset::{DatasetKind, DatasetSpec};
pub use schedule::{interpolate, Schedule};
pub use times::{intermediate_time, sample_gamma, GammaMode, TimeBatch, TimePairSampler};

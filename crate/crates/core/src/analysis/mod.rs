//! Executable attention decompositions and limitation probes.

mod decompose;
mod probes;

pub use decompose::{
    adept_decompose, dept_decompose, identity_tolerance, pt_decompose, ContentParts,
    DecompositionReport,
};
pub use probes::{
    abs_stats, cyclic_shift, offset_stats, prepend_probe, shift_probe, AbsStats,
    OffsetStatsReport, ShiftEntry, ShiftProbeReport,
};

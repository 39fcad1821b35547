//! Read-only analyses over attention weights, integrators and models.

mod analysis;
mod dump;
mod gradcheck;
mod integrators;
mod report;
mod verify;

pub use analysis::{
    attention_entropy, effective_rank, entropy, layer_mean_effective_rank, layer_mean_entropy, ROW_SUM_TOL,
};
pub use dump::{attention_slice, dump_attention, matrix_csv, matrix_pgm, pgm_dims};
pub use gradcheck::{grad_check_batch, grad_check_model, GradCheckReport, ParamGradCheck, FD_STEP, REL_FLOOR};
pub use integrators::{
    energy_trace, step_determinant, step_jacobian, step_map, symplecticity_check, DeterminantStats, ForceField,
    MAX_PHASE_DIM,
};
pub use report::{analyze, AnalysisProtocol, AnalyzeOptions, DiagnosticsReport, REPORT_FILE};
pub use verify::{
    position_shift_delta, run_verify, Check, VerifyOptions, VerifyReport, GRAD_TOL, NON_SYMPLECTIC_MIN,
    SYMPLECTIC_TOL,
};

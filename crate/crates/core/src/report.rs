use serde::Serialize;

/// One outer iteration of a distributed run. Residuals are the maxima over agents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub method: String,
    pub objective: f64,
    pub central_objective: f64,
    /// `|obj − central| / |central| · 100`.
    pub relative_gap_pct: f64,
    /// Online iterations (subproblem rounds); the offline phase is not counted.
    pub iterations: usize,
    /// Sum over rounds of the slowest agent plus the coordinator.
    pub wall_seconds: f64,
    pub serial_seconds: f64,
    pub offline_seconds: f64,
    pub converged: bool,
    pub areas: usize,
    pub shared_entries: usize,
    /// Worst `|Σ_a zᵃ|` seen after any projection.
    pub max_zero_sum: f64,
    /// Worst line overload on the full network rebuilt from the final iterate (pu).
    pub max_line_violation: f64,
    /// ∞-norm of the consistency residual (PTDF method) or copy mismatch (angle method).
    pub consistency_violation: f64,
    pub angle_disagreement: f64,
    pub reference_is_shared: bool,
    pub trace: Vec<TraceRow>,
}

pub fn relative_gap_pct(objective: f64, central: f64) -> f64 {
    (objective - central).abs() / central.abs() * 100.0
}

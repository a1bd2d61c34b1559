//! Distributed phase-angle DC-OPF with duplicated tie-line variables.
//!
//! Every area keeps its internal angles and generators plus a local copy of
//! each tie-line's flow and of the angle at its far end. The copies are tied
//! together by consensus ADMM: local solve, average per tie-line quantity,
//! dual step. Only the area owning the global reference pins an angle.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::case::{BusId, Network};
use crate::central::solve_central_angle;
use crate::dist::{DistConfig, DistError};
use crate::netmatrix::{build_susceptance, line_violation};
use crate::partition::{AreaId, Partition};
use crate::qp::{QpProblem, QpSettings, QpStatus, QpWorkspace};
use crate::report::{relative_gap_pct, ConvergenceReport, TraceRow};
use crate::runtime::{self, Agent, Blob, Budget, Coordinator, MessageKind, RoundMessage, RuntimeError, StopReason};

/// Quantities duplicated per tie-line, in shared-vector order.
pub const ENTRIES_PER_TIE: usize = 3;

/// One area's local phase-angle problem.
#[derive(Debug, Clone)]
pub struct AngleAreaModel {
    pub area: AreaId,
    /// Internal buses, sorted; angle variable `k` belongs to `buses[k]`.
    pub buses: Vec<BusId>,
    /// Indices into `Network::generators`.
    pub generators: Vec<usize>,
    /// Indices into `Network::branches` of the tie-lines touching this area.
    pub ties: Vec<usize>,
    /// For every shared entry of this area: (global entry, local variable).
    pub shared: Vec<(usize, usize)>,
    pub problem: QpProblem,
}

impl AngleAreaModel {
    pub fn n_vars(&self) -> usize {
        self.problem.q.len()
    }

    fn theta_var(&self, bus: BusId) -> Option<usize> {
        self.buses.binary_search(&bus).ok().map(|k| self.generators.len() + k)
    }

    /// Generation cost of a local solution, without the consensus terms.
    pub fn cost(&self, x: &DVector<f64>) -> f64 {
        let p = &self.problem;
        (0..self.generators.len()).map(|k| 0.5 * p.p[(k, k)] * x[k] * x[k] + p.q[k] * x[k]).sum::<f64>() + p.c0
    }
}

/// Tie-lines (in-service branches across areas), ascending by branch index.
pub fn tie_lines(net: &Network, part: &Partition) -> Vec<usize> {
    (0..net.branches.len())
        .filter(|&k| {
            let br = &net.branches[k];
            br.in_service && part.area_of[&br.from] != part.area_of[&br.to]
        })
        .collect()
}

/// Variables are `[g, θ_internal, (f, θ_far) per tie-line]`.
pub fn build_angle_models(net: &Network, part: &Partition) -> Vec<AngleAreaModel> {
    let ties = tie_lines(net, part);
    part.areas.iter().map(|&area| build_area(net, part, area, &ties)).collect()
}

fn build_area(net: &Network, part: &Partition, area: AreaId, all_ties: &[usize]) -> AngleAreaModel {
    let buses = part.buses_of(area);
    let generators: Vec<usize> = (0..net.generators.len()).filter(|&g| part.area_of[&net.generators[g].bus] == area).collect();
    let ties: Vec<usize> = all_ties
        .iter()
        .copied()
        .filter(|&k| part.area_of[&net.branches[k].from] == area || part.area_of[&net.branches[k].to] == area)
        .collect();
    let (ng, nb) = (generators.len(), buses.len());
    let n = ng + nb + 2 * ties.len();
    let pos = |b: BusId| buses.binary_search(&b).ok();

    let mut p = DMatrix::zeros(n, n);
    for (k, &g) in generators.iter().enumerate() {
        p[(k, k)] = 2.0 * net.generators[g].c2;
    }
    let q = DVector::from_iterator(n, (0..n).map(|k| if k < ng { net.generators[generators[k]].c1 } else { 0.0 }));
    let c0: f64 = generators.iter().map(|&g| net.generators[g].c0).sum();

    // Nodal balance at internal buses, then one flow definition per tie-line.
    let mut a_eq = DMatrix::zeros(nb + ties.len(), n);
    let mut b_eq = DVector::zeros(nb + ties.len());
    for (k, &b) in buses.iter().enumerate() {
        b_eq[k] = net.bus(b).demand;
    }
    for (k, &g) in generators.iter().enumerate() {
        a_eq[(pos(net.generators[g].bus).unwrap(), k)] += 1.0;
    }
    let mut limited = Vec::new();
    for br in net.branches.iter().filter(|br| br.in_service) {
        if let (Some(u), Some(w)) = (pos(br.from), pos(br.to)) {
            let (tu, tw) = (ng + u, ng + w);
            a_eq[(u, tu)] -= br.susceptance;
            a_eq[(u, tw)] += br.susceptance;
            a_eq[(w, tw)] -= br.susceptance;
            a_eq[(w, tu)] += br.susceptance;
            if br.flow_limit.is_finite() {
                limited.push((tu, tw, br.susceptance, br.flow_limit));
            }
        }
    }

    let mut shared = Vec::new();
    let mut lower = DVector::from_element(n, f64::NEG_INFINITY);
    let mut upper = DVector::from_element(n, f64::INFINITY);
    for (t, &k) in ties.iter().enumerate() {
        let br = &net.branches[k];
        let (f, far) = (ng + nb + 2 * t, ng + nb + 2 * t + 1);
        let (th_from, th_to) = match (pos(br.from), pos(br.to)) {
            (Some(u), None) => {
                a_eq[(u, f)] -= 1.0;
                (ng + u, far)
            }
            (None, Some(w)) => {
                a_eq[(w, f)] += 1.0;
                (far, ng + w)
            }
            _ => unreachable!("tie-line has exactly one end in the area"),
        };
        let row = nb + t;
        a_eq[(row, f)] = 1.0;
        a_eq[(row, th_from)] = -br.susceptance;
        a_eq[(row, th_to)] = br.susceptance;
        lower[f] = -br.flow_limit;
        upper[f] = br.flow_limit;
        let g = all_ties.binary_search(&k).unwrap() * ENTRIES_PER_TIE;
        shared.extend([(g, f), (g + 1, th_from), (g + 2, th_to)]);
    }

    let mut a_in = DMatrix::zeros(2 * limited.len(), n);
    let mut b_in = DVector::zeros(2 * limited.len());
    for (r, &(tu, tw, b, lim)) in limited.iter().enumerate() {
        a_in[(2 * r, tu)] = b;
        a_in[(2 * r, tw)] = -b;
        a_in[(2 * r + 1, tu)] = -b;
        a_in[(2 * r + 1, tw)] = b;
        b_in[2 * r] = lim;
        b_in[2 * r + 1] = lim;
    }
    for (k, &g) in generators.iter().enumerate() {
        lower[k] = net.generators[g].pmin;
        upper[k] = net.generators[g].pmax;
    }
    if let Some(r) = pos(net.reference_bus) {
        lower[ng + r] = 0.0;
        upper[ng + r] = 0.0;
    }
    let problem = QpProblem::new(p, q)
        .with_offset(c0)
        .with_equalities(a_eq, b_eq)
        .with_inequalities(a_in, b_in)
        .with_bounds(lower, upper);
    AngleAreaModel { area, buses, generators, ties, shared, problem }
}

struct AngleAgent {
    id: usize,
    model: AngleAreaModel,
    rho: f64,
    /// Local values, duals and consensus targets of this area's entries.
    x: DVector<f64>,
    y: DVector<f64>,
    z: DVector<f64>,
    ws: QpWorkspace,
    last: Option<DVector<f64>>,
    cost: f64,
}

impl AngleAgent {
    fn new(id: usize, model: AngleAreaModel, rho: f64, settings: QpSettings) -> Result<Self, DistError> {
        let m = model.shared.len();
        let mut prob = model.problem.clone();
        for &(_, v) in &model.shared {
            prob.p[(v, v)] += rho;
        }
        let ws = QpWorkspace::new(prob, settings)
            .map_err(|e| DistError::SubproblemInfeasible { area: model.area, reason: e.to_string() })?;
        Ok(Self { id, model, rho, x: DVector::zeros(m), y: DVector::zeros(m), z: DVector::zeros(m), ws, last: None, cost: 0.0 })
    }
}

impl Agent for AngleAgent {
    fn step(&mut self, round: usize, inbox: Option<&RoundMessage>) -> Result<RoundMessage, String> {
        if let Some(m) = inbox {
            for (j, &(g, _)) in self.model.shared.iter().enumerate() {
                self.z[j] = m.payload.data[g];
            }
            self.y += (&self.x - &self.z) * self.rho;
        }
        // yᵀ(x − z) + ρ/2‖x − z‖²
        let mut q = self.model.problem.q.clone();
        let mut offset = self.model.problem.c0;
        for (j, &(_, v)) in self.model.shared.iter().enumerate() {
            q[v] += self.y[j] - self.rho * self.z[j];
            offset += 0.5 * self.rho * self.z[j] * self.z[j] - self.y[j] * self.z[j];
        }
        self.ws.update_linear(q);
        self.ws.update_offset(offset);
        let sol = self.ws.solve();
        match sol.status {
            QpStatus::Optimal => {}
            QpStatus::Infeasible => return Err("QP is infeasible".into()),
            QpStatus::MaxIter => return Err(format!("QP stalled at residual {:e}", sol.kkt_residual)),
        }
        for (j, &(_, v)) in self.model.shared.iter().enumerate() {
            self.x[j] = sol.x[v];
        }
        self.cost = self.model.cost(&sol.x);
        self.last = Some(sol.x);
        Ok(RoundMessage::new(self.id, round, MessageKind::ZetaShare, Blob::vector(self.x.iter().copied().collect()))
            .with_stats(vec![self.cost]))
    }
}

struct AngleCoordinator {
    /// Per agent, the global entry of each local share.
    layout: Vec<Vec<usize>>,
    len: usize,
    rho: f64,
    tol: f64,
    z: DVector<f64>,
    trace: Vec<TraceRow>,
    max_copy_gap: f64,
    converged: bool,
}

impl Coordinator for AngleCoordinator {
    fn should_stop(&mut self, _: usize, _: Option<&RoundMessage>) -> bool {
        self.converged
    }

    fn reduce(&mut self, round: usize, messages: &[RoundMessage]) -> Result<RoundMessage, String> {
        let mut sum = DVector::zeros(self.len);
        let mut count = DVector::<f64>::zeros(self.len);
        for (m, layout) in messages.iter().zip(&self.layout) {
            for (j, &g) in layout.iter().enumerate() {
                sum[g] += m.payload.data[j];
                count[g] += 1.0;
            }
        }
        let z = sum.component_div(&count);
        let mut primal: f64 = 0.0;
        let mut dual: f64 = 0.0;
        let mut gap: f64 = 0.0;
        for (m, layout) in messages.iter().zip(&self.layout) {
            let (mut p2, mut d2) = (0.0, 0.0);
            for (j, &g) in layout.iter().enumerate() {
                let r = m.payload.data[j] - z[g];
                p2 += r * r;
                d2 += (z[g] - self.z[g]).powi(2);
                gap = gap.max(2.0 * r.abs());
            }
            primal = primal.max(p2.sqrt());
            dual = dual.max(self.rho * d2.sqrt());
        }
        let objective = messages.iter().map(|m| m.stats[0]).sum();
        self.trace.push(TraceRow { iteration: round + 1, primal_residual: primal, dual_residual: dual, objective });
        self.max_copy_gap = gap;
        self.converged = primal <= self.tol && dual <= self.tol;
        self.z = z;
        Ok(RoundMessage::new(RoundMessage::COORDINATOR, round, MessageKind::ZetaShare, Blob::vector(self.z.iter().copied().collect())))
    }
}

/// Runs the tie-line duplication baseline with the same stopping rule and
/// report schema as the PTDF method.
pub fn run_distributed_angle(net: &Network, part: &Partition, cfg: &DistConfig) -> Result<ConvergenceReport, DistError> {
    if part.areas.len() < 2 {
        return Err(DistError::SingleArea);
    }
    part.validate(net)?;
    let central = match cfg.central_objective {
        Some(v) => v,
        None => solve_central_angle(net, 1e-8)?.objective,
    };
    let models = build_angle_models(net, part);
    let len = tie_lines(net, part).len() * ENTRIES_PER_TIE;
    let layout: Vec<Vec<usize>> = models.iter().map(|m| m.shared.iter().map(|&(g, _)| g).collect()).collect();
    let agents = models
        .iter()
        .enumerate()
        .map(|(id, m)| AngleAgent::new(id, m.clone(), cfg.rho, cfg.qp))
        .collect::<Result<Vec<_>, _>>()?;
    let mut coord = AngleCoordinator {
        layout,
        len,
        rho: cfg.rho,
        tol: cfg.tol,
        z: DVector::zeros(len),
        trace: Vec::new(),
        max_copy_gap: 0.0,
        converged: false,
    };
    let budget = Budget { max_rounds: cfg.max_iter, wall_time: cfg.time_budget };
    let out = runtime::run_rounds(agents, &mut coord, budget).map_err(|e| match e {
        RuntimeError::AgentFailure { id, reason } if id < models.len() => {
            DistError::SubproblemInfeasible { area: models[id].area, reason }
        }
        other => DistError::Runtime(other),
    })?;

    // Stitch angles from the owning areas and rebuild the full-network flows.
    let mats = build_susceptance(net);
    let mut theta = DVector::zeros(net.buses.len());
    let mut g = vec![0.0; net.generators.len()];
    let mut angle_gap: f64 = 0.0;
    let mut far: BTreeMap<BusId, Vec<f64>> = BTreeMap::new();
    for a in &out.agents {
        let Some(x) = &a.last else { continue };
        for &b in &a.model.buses {
            theta[mats.position(b).unwrap()] = x[a.model.theta_var(b).unwrap()];
        }
        for (k, &gi) in a.model.generators.iter().enumerate() {
            g[gi] = x[k];
        }
        let base = a.model.generators.len() + a.model.buses.len();
        for (t, &k) in a.model.ties.iter().enumerate() {
            let br = &net.branches[k];
            let bus = if a.model.theta_var(br.from).is_some() { br.to } else { br.from };
            far.entry(bus).or_default().push(x[base + 2 * t + 1]);
        }
    }
    for (bus, copies) in &far {
        let own = theta[mats.position(*bus).unwrap()];
        for c in copies {
            angle_gap = angle_gap.max((c - own).abs());
        }
    }
    let flows: Vec<f64> = (&mats.b_line * &theta).iter().copied().collect();
    let objective = net.generation_cost(&g);

    Ok(ConvergenceReport {
        method: "angle".into(),
        objective,
        central_objective: central,
        relative_gap_pct: relative_gap_pct(objective, central),
        iterations: out.rounds,
        wall_seconds: out.parallel_seconds,
        serial_seconds: out.serial_seconds,
        offline_seconds: 0.0,
        converged: out.stop == StopReason::Predicate && coord.converged,
        areas: models.len(),
        shared_entries: len,
        max_zero_sum: 0.0,
        max_line_violation: line_violation(net, &mats, &flows),
        consistency_violation: coord.max_copy_gap,
        angle_disagreement: angle_gap,
        reference_is_shared: tie_lines(net, part).iter().any(|&k| {
            let br = &net.branches[k];
            br.from == net.reference_bus || br.to == net.reference_bus
        }),
        trace: coord.trace,
    })
}

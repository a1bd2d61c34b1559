//! MATPOWER case files and the per-unit DC network built from them.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct BusId(pub u32);

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Raw numeric tables of a case file, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseDocument {
    pub function_name: String,
    pub base_mva: f64,
    pub bus_rows: Vec<Vec<f64>>,
    pub gen_rows: Vec<Vec<f64>>,
    pub branch_rows: Vec<Vec<f64>>,
    pub gencost_rows: Vec<Vec<f64>>,
}

#[derive(Debug, Error, PartialEq)]
pub enum CaseError {
    #[error("case file has no mpc.{0}")]
    MissingTable(String),
    #[error("line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("line {line}, column {col}: not a number")]
    NonNumericEntry { line: usize, col: usize },
    #[error("network is split into {} islands", components.len())]
    Disconnected { components: Vec<Vec<BusId>> },
    #[error("no reference bus (bus type 3)")]
    NoReferenceBus,
    #[error("branch {branch} has zero reactance")]
    ZeroReactance { branch: usize },
    #[error("generator {generator}: {reason}")]
    UnsupportedCostModel { generator: usize, reason: String },
    #[error("generator {generator}: {reason}")]
    InvalidGenerator { generator: usize, reason: String },
    #[error("branch {branch}: {reason}")]
    InvalidBranch { branch: usize, reason: String },
    #[error("bus {0} is defined twice")]
    DuplicateBus(BusId),
    #[error("{table} row {row} refers to unknown bus {bus}")]
    UnknownBus { table: &'static str, row: usize, bus: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bus {
    pub id: BusId,
    pub area_tag: u32,
    /// Demand in pu. Negative values act as fixed injections.
    pub demand: f64,
    pub is_reference: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Branch {
    pub from: BusId,
    pub to: BusId,
    pub susceptance: f64,
    /// pu, `f64::INFINITY` when unrated.
    pub flow_limit: f64,
    pub in_service: bool,
}

/// Generator with cost `c2 g² + c1 g + c0`, g in pu.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Generator {
    pub bus: BusId,
    pub pmin: f64,
    pub pmax: f64,
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

impl Generator {
    pub fn cost(&self, g: f64) -> f64 {
        self.c2 * g * g + self.c1 * g + self.c0
    }
}

/// Validated per-unit DC model. Only in-service elements are kept.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    pub reference_bus: BusId,
    pub warnings: Vec<String>,
    index: HashMap<BusId, usize>,
}

impl Network {
    /// Checks every model invariant. Several type-3 buses resolve to the
    /// lowest id with a warning.
    pub fn from_parts(
        base_mva: f64,
        mut buses: Vec<Bus>,
        branches: Vec<Branch>,
        generators: Vec<Generator>,
    ) -> Result<Self, CaseError> {
        let mut warnings = Vec::new();
        let mut index = HashMap::with_capacity(buses.len());
        for (k, b) in buses.iter().enumerate() {
            if index.insert(b.id, k).is_some() {
                return Err(CaseError::DuplicateBus(b.id));
            }
        }

        let mut refs: Vec<BusId> = buses.iter().filter(|b| b.is_reference).map(|b| b.id).collect();
        refs.sort();
        let reference_bus = *refs.first().ok_or(CaseError::NoReferenceBus)?;
        if refs.len() > 1 {
            warnings.push(format!(
                "{} reference buses, using bus {}",
                refs.len(),
                reference_bus
            ));
            for b in &mut buses {
                b.is_reference = b.id == reference_bus;
            }
        }

        for (k, br) in branches.iter().enumerate() {
            for end in [br.from, br.to] {
                if !index.contains_key(&end) {
                    return Err(CaseError::UnknownBus { table: "branch", row: k, bus: end.0 as f64 });
                }
            }
            if br.from == br.to {
                return Err(CaseError::InvalidBranch { branch: k, reason: "both ends on one bus".into() });
            }
            if br.susceptance == 0.0 || !br.susceptance.is_finite() {
                return Err(CaseError::ZeroReactance { branch: k });
            }
            if !(br.flow_limit > 0.0) {
                return Err(CaseError::InvalidBranch { branch: k, reason: "flow limit must be positive".into() });
            }
        }
        for (k, g) in generators.iter().enumerate() {
            if !index.contains_key(&g.bus) {
                return Err(CaseError::UnknownBus { table: "gen", row: k, bus: g.bus.0 as f64 });
            }
            if g.pmin > g.pmax {
                return Err(CaseError::InvalidGenerator {
                    generator: k,
                    reason: format!("Pmin {} exceeds Pmax {}", g.pmin, g.pmax),
                });
            }
            if g.c2 < 0.0 {
                return Err(CaseError::InvalidGenerator { generator: k, reason: "negative quadratic cost".into() });
            }
        }

        let components = components(&buses, &branches, &index);
        if components.len() > 1 {
            return Err(CaseError::Disconnected { components });
        }

        Ok(Self { base_mva, buses, branches, generators, reference_bus, warnings, index })
    }

    pub fn bus_index(&self, id: BusId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn bus(&self, id: BusId) -> &Bus {
        &self.buses[self.index[&id]]
    }

    pub fn total_demand(&self) -> f64 {
        self.buses.iter().map(|b| b.demand).sum()
    }

    /// Bus injections `Σ g − d` in bus order.
    pub fn injections(&self, g: &[f64]) -> Vec<f64> {
        let mut p: Vec<f64> = self.buses.iter().map(|b| -b.demand).collect();
        for (gen, &v) in self.generators.iter().zip(g) {
            p[self.index[&gen.bus]] += v;
        }
        p
    }

    pub fn generation_cost(&self, g: &[f64]) -> f64 {
        self.generators.iter().zip(g).map(|(gen, &v)| gen.cost(v)).sum()
    }
}

fn components(buses: &[Bus], branches: &[Branch], index: &HashMap<BusId, usize>) -> Vec<Vec<BusId>> {
    let n = buses.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for br in branches.iter().filter(|b| b.in_service) {
        let (a, b) = (find(&mut parent, index[&br.from]), find(&mut parent, index[&br.to]));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut groups: BTreeMap<usize, Vec<BusId>> = BTreeMap::new();
    for k in 0..n {
        let r = find(&mut parent, k);
        groups.entry(r).or_default().push(buses[k].id);
    }
    groups
        .into_values()
        .map(|mut g| {
            g.sort();
            g
        })
        .collect()
}

/// Columns MATPOWER requires; later ones (ramp rates, OPF results) are optional.
const MIN_WIDTH: [(&str, usize); 4] = [("bus", 13), ("gen", 10), ("branch", 11), ("gencost", 4)];

fn min_width(table: &str) -> usize {
    MIN_WIDTH.iter().find(|(t, _)| *t == table).map_or(0, |&(_, w)| w)
}

struct OpenTable {
    name: String,
    keep: bool,
    rows: Vec<Vec<f64>>,
    row_lines: Vec<usize>,
    current: Vec<f64>,
}

impl OpenTable {
    fn finish_row(&mut self, line: usize) -> Result<(), CaseError> {
        if self.current.is_empty() {
            return Ok(());
        }
        let row = std::mem::take(&mut self.current);
        if let Some(first) = self.rows.first() {
            if first.len() != row.len() {
                return Err(CaseError::MalformedRow {
                    line,
                    reason: format!("mpc.{} row has {} columns, expected {}", self.name, row.len(), first.len()),
                });
            }
        }
        self.rows.push(row);
        self.row_lines.push(line);
        Ok(())
    }

    /// Consumes one line of matrix body. Returns true once `]` is seen.
    fn feed(&mut self, content: &str, line: usize) -> Result<bool, CaseError> {
        let (body, closed) = match content.find(']') {
            Some(p) => (&content[..p], true),
            None => (content, false),
        };
        if self.keep {
            let mut col = 0;
            for seg in body.split_inclusive(';') {
                let ends_row = seg.ends_with(';');
                for tok in seg.trim_end_matches(';').split(|c: char| c.is_whitespace() || c == ',') {
                    if tok.is_empty() {
                        continue;
                    }
                    col += 1;
                    let v: f64 = tok.parse().map_err(|_| CaseError::NonNumericEntry { line, col })?;
                    self.current.push(v);
                }
                if ends_row {
                    self.finish_row(line)?;
                    col = 0;
                }
            }
            self.finish_row(line)?;
        }
        Ok(closed)
    }
}

fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (k, c) in line.char_indices() {
        match c {
            '\'' => quoted = !quoted,
            '%' if !quoted => return &line[..k],
            _ => {}
        }
    }
    line
}

/// Parses the MATPOWER `.m` subset: `mpc.<name> = [ ... ];` matrices,
/// `mpc.baseMVA = <number>;`, and `%` comments. Other assignments are skipped.
pub fn parse_case(text: &str) -> Result<CaseDocument, CaseError> {
    let mut function_name = String::new();
    let mut base_mva = None;
    let mut tables: HashMap<String, (Vec<Vec<f64>>, Vec<usize>)> = HashMap::new();
    let mut open: Option<OpenTable> = None;
    let mut in_cell = false;

    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let mut rest = strip_comment(raw).trim();
        if in_cell {
            in_cell = !rest.contains('}');
            continue;
        }
        if let Some(t) = open.as_mut() {
            if t.feed(rest, line)? {
                let t = open.take().unwrap();
                if t.keep {
                    tables.insert(t.name, (t.rows, t.row_lines));
                }
            }
            continue;
        }
        if rest.is_empty() {
            continue;
        }
        if let Some(sig) = rest.strip_prefix("function") {
            let name = sig.rsplit('=').next().unwrap_or(sig);
            function_name = name.trim().trim_end_matches(';').to_string();
            continue;
        }
        let Some(stmt) = rest.strip_prefix("mpc.") else { continue };
        let Some((lhs, rhs)) = stmt.split_once('=') else { continue };
        let name = lhs.trim();
        rest = rhs.trim();
        if let Some(body) = rest.strip_prefix('[') {
            let keep = MIN_WIDTH.iter().any(|(t, _)| *t == name);
            let mut t = OpenTable { name: name.to_string(), keep, rows: Vec::new(), row_lines: Vec::new(), current: Vec::new() };
            if t.feed(body, line)? {
                if keep {
                    tables.insert(t.name, (t.rows, t.row_lines));
                }
            } else {
                open = Some(t);
            }
        } else if rest.starts_with('{') {
            in_cell = !rest.contains('}');
        } else if name == "baseMVA" {
            let v: f64 = rest
                .trim_end_matches(';')
                .trim()
                .parse()
                .map_err(|_| CaseError::NonNumericEntry { line, col: 1 })?;
            if !(v > 0.0) {
                return Err(CaseError::MalformedRow { line, reason: format!("baseMVA must be positive, got {v}") });
            }
            base_mva = Some(v);
        }
    }
    if let Some(t) = open {
        return Err(CaseError::MalformedRow {
            line: text.lines().count(),
            reason: format!("mpc.{} is not closed with ]", t.name),
        });
    }

    let base_mva = base_mva.ok_or_else(|| CaseError::MissingTable("baseMVA".into()))?;
    let mut take = |name: &str, min: usize| -> Result<Vec<Vec<f64>>, CaseError> {
        let (rows, lines) = tables.remove(name).ok_or_else(|| CaseError::MissingTable(name.into()))?;
        if let Some(r) = rows.first() {
            if r.len() < min {
                return Err(CaseError::MalformedRow {
                    line: lines[0],
                    reason: format!("mpc.{name} needs at least {min} columns, found {}", r.len()),
                });
            }
        }
        Ok(rows)
    };
    Ok(CaseDocument {
        function_name,
        base_mva,
        bus_rows: take("bus", min_width("bus"))?,
        gen_rows: take("gen", min_width("gen"))?,
        branch_rows: take("branch", min_width("branch"))?,
        gencost_rows: take("gencost", min_width("gencost"))?,
    })
}

fn bus_id(v: f64, table: &'static str, row: usize) -> Result<BusId, CaseError> {
    if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(BusId(v as u32))
    } else {
        Err(CaseError::UnknownBus { table, row, bus: v })
    }
}

/// Converts a parsed case to per-unit form and validates it.
pub fn build_network(doc: &CaseDocument) -> Result<Network, CaseError> {
    let base = doc.base_mva;
    let mut warnings = Vec::new();

    let mut buses = Vec::with_capacity(doc.bus_rows.len());
    for (k, r) in doc.bus_rows.iter().enumerate() {
        buses.push(Bus {
            id: bus_id(r[0], "bus", k)?,
            area_tag: r[6].max(0.0) as u32,
            demand: r[2] / base,
            is_reference: r[1] == 3.0,
        });
    }

    if doc.gencost_rows.len() < doc.gen_rows.len() {
        return Err(CaseError::MissingTable("gencost rows for every generator".into()));
    }
    let mut generators = Vec::new();
    for (k, (r, c)) in doc.gen_rows.iter().zip(&doc.gencost_rows).enumerate() {
        if r[7] <= 0.0 {
            continue;
        }
        if c[0] != 2.0 {
            return Err(CaseError::UnsupportedCostModel {
                generator: k,
                reason: format!("cost model {} (only polynomial model 2 is supported)", c[0]),
            });
        }
        let n = c[3];
        if n.fract() != 0.0 || !(0.0..=3.0).contains(&n) {
            return Err(CaseError::UnsupportedCostModel {
                generator: k,
                reason: format!("polynomial with {n} coefficients (degree at most 2 is supported)"),
            });
        }
        let n = n as usize;
        if c.len() < 4 + n {
            return Err(CaseError::UnsupportedCostModel { generator: k, reason: "missing cost coefficients".into() });
        }
        // Highest order first; pad to (c2, c1, c0).
        let mut coef = [0.0; 3];
        coef[3 - n..].copy_from_slice(&c[4..4 + n]);
        generators.push(Generator {
            bus: bus_id(r[0], "gen", k)?,
            pmin: r[9] / base,
            pmax: r[8] / base,
            c2: coef[0] * base * base,
            c1: coef[1] * base,
            c0: coef[2],
        });
    }

    let mut branches = Vec::new();
    for (k, r) in doc.branch_rows.iter().enumerate() {
        if r[10] <= 0.0 {
            continue;
        }
        let tap = if r[8] == 0.0 { 1.0 } else { r[8] };
        let x = r[3] * tap;
        if x == 0.0 {
            return Err(CaseError::ZeroReactance { branch: k });
        }
        if r[9] != 0.0 {
            warnings.push(format!("branch {k}: phase shift {} deg ignored", r[9]));
        }
        let flow_limit = match r[5] {
            v if v == 0.0 => f64::INFINITY,
            v if v > 0.0 => v / base,
            v => return Err(CaseError::InvalidBranch { branch: k, reason: format!("negative rating {v}") }),
        };
        branches.push(Branch {
            from: bus_id(r[0], "branch", k)?,
            to: bus_id(r[1], "branch", k)?,
            susceptance: 1.0 / x,
            flow_limit,
            in_service: true,
        });
    }

    let mut net = Network::from_parts(base, buses, branches, generators)?;
    net.warnings.extend(warnings);
    Ok(net)
}

/// Reads, parses and builds in one step.
pub fn load_network(path: impl AsRef<std::path::Path>) -> Result<Network, LoadError> {
    let text = std::fs::read_to_string(path.as_ref())?;
    Ok(build_network(&parse_case(&text)?)?)
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Case(#[from] CaseError),
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = "function mpc = tiny
mpc.baseMVA = 100;
mpc.bus = [
\t1\t3\t0\t0\t0\t0\t1\t1\t0\t230\t1\t1.1\t0.9;
\t2\t1\t50\t0\t0\t0\t1\t1\t0\t230\t1\t1.1\t0.9; % load
];
mpc.gen = [
\t1\t0\t0\t0\t0\t1\t100\t1\t100\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0;
];
mpc.branch = [
\t1\t2\t0\t0.1\t0\t0\t0\t0\t0\t0\t1\t-360\t360;
];
mpc.gencost = [
\t2\t0\t0\t3\t0.01\t20\t5;
];
";

    #[test]
    fn parses_and_converts_units() {
        let doc = parse_case(TINY).unwrap();
        assert_eq!(doc.function_name, "tiny");
        assert_eq!((doc.bus_rows.len(), doc.gen_rows.len(), doc.branch_rows.len()), (2, 1, 1));
        let net = build_network(&doc).unwrap();
        assert_eq!(net.buses[1].demand, 0.5);
        assert_eq!(net.branches[0].susceptance, 10.0);
        assert!(net.branches[0].flow_limit.is_infinite());
        let g = &net.generators[0];
        assert_eq!((g.c2, g.c1, g.c0), (100.0, 2000.0, 5.0));
        assert_eq!(g.pmax, 1.0);
    }

    #[test]
    fn comment_with_percent_inside_quotes_is_kept() {
        assert_eq!(strip_comment("mpc.x = 'a%b'; % c"), "mpc.x = 'a%b'; ");
    }

    #[test]
    fn reports_bad_number_position() {
        let bad = TINY.replace("\t2\t1\t50", "\t2\t1\tfifty");
        assert_eq!(parse_case(&bad), Err(CaseError::NonNumericEntry { line: 5, col: 3 }));
    }

    #[test]
    fn missing_gencost() {
        let cut = TINY.split("mpc.gencost").next().unwrap();
        assert_eq!(parse_case(cut), Err(CaseError::MissingTable("gencost".into())));
    }

    #[test]
    fn piecewise_cost_rejected() {
        let pw = TINY.replace("\t2\t0\t0\t3\t0.01\t20\t5;", "\t1\t0\t0\t2\t0\t0\t100\t2000;");
        let doc = parse_case(&pw).unwrap();
        assert!(matches!(build_network(&doc), Err(CaseError::UnsupportedCostModel { .. })));
    }

    #[test]
    fn island_is_an_error() {
        let off = TINY.replace("0\t1\t-360", "0\t0\t-360");
        let doc = parse_case(&off).unwrap();
        match build_network(&doc) {
            Err(CaseError::Disconnected { components }) => assert_eq!(components.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_reference_picks_lowest() {
        let two = TINY.replace("\t2\t1\t50", "\t2\t3\t50");
        let net = build_network(&parse_case(&two).unwrap()).unwrap();
        assert_eq!(net.reference_bus, BusId(1));
        assert_eq!(net.warnings.len(), 1);
        assert!(!net.buses[1].is_reference);
    }
}

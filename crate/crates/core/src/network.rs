//! Radial distribution network model.
//!
//! Represents the feeder as a tree of buses and branches, ingests and emits
//! the columnar case-file format, validates radiality, and builds the nodal
//! admittance quantities consumed by the power-flow math.
//!
//! Case files are line-oriented text. `#` starts a comment, blank lines are
//! skipped, and every significant line begins with one of three keywords:
//!
//! ```text
//! BASE   <mva> <kv>
//! BUS    <id> <kind> <Pd_kW> <Qd_kvar> <microgrid>
//! BRANCH <from> <to> <r_ohm> <x_ohm>
//! ```
//!
//! Column order is normative. Bus kinds are `slack`, `consumer`, `producer`,
//! or `prosumer`; the unique slack bus must have id 1. Branch impedances are
//! given in ohms and converted to per-unit on the stated base.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

/// Errors raised while ingesting or validating a network.
#[derive(Debug, Error)]
pub enum NetworkError {
    /// The case text is structurally invalid (missing column, bad number,
    /// unknown keyword, inconsistent base data, ...). The message names the
    /// offending line where one exists.
    #[error("malformed case: {0}")]
    MalformedCase(String),
    /// The branch graph is not a tree containing the slack bus. The message
    /// lists the individual findings.
    #[error("network is not radial: {0}")]
    NotRadial(String),
    /// Two bus records share an id.
    #[error("duplicate bus id {0}")]
    DuplicateBusId(usize),
    /// A branch with r = x = 0 cannot be inverted into an admittance.
    #[error("branch {from}-{to} has zero impedance")]
    ZeroImpedanceBranch {
        /// Sending-end bus id.
        from: usize,
        /// Receiving-end bus id.
        to: usize,
    },
}

/// Role of a bus in the market and in the power-flow reference frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusKind {
    /// Utility interconnection; fixes the voltage reference and absorbs the
    /// system imbalance. Exactly one per network, always bus id 1.
    Slack,
    /// Pure load; never owns generation or storage.
    Consumer,
    /// Pure generation (e.g. a PV plant feeding the grid).
    Producer,
    /// Both consumes and produces; the usual kind for microgrid buses.
    Prosumer,
}

impl BusKind {
    fn parse(token: &str) -> Option<Self> {
        match token {
            "slack" => Some(BusKind::Slack),
            "consumer" => Some(BusKind::Consumer),
            "producer" => Some(BusKind::Producer),
            "prosumer" => Some(BusKind::Prosumer),
            _ => None,
        }
    }
}

impl fmt::Display for BusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BusKind::Slack => "slack",
            BusKind::Consumer => "consumer",
            BusKind::Producer => "producer",
            BusKind::Prosumer => "prosumer",
        };
        f.write_str(s)
    }
}

/// One bus of the feeder with its per-step base load.
///
/// Loads are the unscaled base values from the case file; scenario load
/// shapes multiply them per step downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    /// 1-based bus id as written in the case file (bus 1 = slack).
    pub id: usize,
    /// Market role of the bus.
    pub kind: BusKind,
    /// Real base load in kW (≥ 0).
    pub p_load_kw: f64,
    /// Reactive base load in kvar.
    pub q_load_kvar: f64,
    /// Member of the microgrid set. Carried for reporting; drives no logic.
    pub is_microgrid: bool,
}

/// One series branch of the feeder.
///
/// The ohmic values are the source of truth (they round-trip bit-exactly
/// through [`emit_case`]); the per-unit values are derived from the network
/// base at parse time and used by all solver math.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    /// Bus id of one endpoint.
    pub from: usize,
    /// Bus id of the other endpoint.
    pub to: usize,
    /// Series resistance in ohms (≥ 0).
    pub r_ohm: f64,
    /// Series reactance in ohms (≥ 0).
    pub x_ohm: f64,
    /// Series resistance in per-unit on the network base.
    pub r_pu: f64,
    /// Series reactance in per-unit on the network base.
    pub x_pu: f64,
}

/// A validated radial network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    /// Buses in case-file order.
    pub buses: Vec<Bus>,
    /// Branches in case-file order; `|branches| = |buses| - 1` when radial.
    pub branches: Vec<Branch>,
    /// Power base in MVA for the per-unit system.
    pub base_mva: f64,
    /// Voltage base in kV for the per-unit system.
    pub base_kv: f64,
}

impl Network {
    /// Index of the bus with the given id, if present.
    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Index of the slack bus.
    ///
    /// # Panics
    /// Panics if the network has no slack bus; parsed networks always do.
    pub fn slack_index(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated network has a slack bus")
    }

    /// Number of buses.
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Impedance base in ohms (kV² / MVA).
    pub fn z_base_ohm(&self) -> f64 {
        self.base_kv * self.base_kv / self.base_mva
    }

    /// Power base in kW (MVA · 1000).
    pub fn s_base_kw(&self) -> f64 {
        self.base_mva * 1000.0
    }
}

/// One finding from [`validate_radial`].
#[derive(Debug, Clone, PartialEq)]
pub enum RadialFinding {
    /// No bus is marked slack, so connectivity has no root.
    NoSlack,
    /// A branch connects a bus to itself.
    SelfLoop {
        /// Offending bus id.
        bus: usize,
    },
    /// A branch endpoint references no bus record.
    UnknownEndpoint {
        /// The id that failed to resolve.
        bus: usize,
    },
    /// Branch count differs from `|buses| - 1`.
    BranchCountMismatch {
        /// Number of buses.
        buses: usize,
        /// Number of branches.
        branches: usize,
    },
    /// The bus cannot be reached from the slack over the branch graph.
    Unreachable {
        /// Unreachable bus id.
        bus: usize,
    },
    /// The branch graph contains a cycle (parallel branches count).
    Cycle,
}

impl fmt::Display for RadialFinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RadialFinding::NoSlack => write!(f, "no slack bus"),
            RadialFinding::SelfLoop { bus } => write!(f, "self-loop at bus {bus}"),
            RadialFinding::UnknownEndpoint { bus } => {
                write!(f, "branch endpoint references unknown bus {bus}")
            }
            RadialFinding::BranchCountMismatch { buses, branches } => {
                write!(f, "{branches} branches for {buses} buses (tree needs {})", buses - 1)
            }
            RadialFinding::Unreachable { bus } => write!(f, "bus {bus} unreachable"),
            RadialFinding::Cycle => write!(f, "cycle"),
        }
    }
}

/// Result of radiality validation; empty iff the network is a tree containing
/// the slack bus.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RadialReport {
    /// All violations found. Findings are data, not errors.
    pub findings: Vec<RadialFinding>,
}

impl RadialReport {
    /// True when no findings were recorded.
    pub fn is_radial(&self) -> bool {
        self.findings.is_empty()
    }
}

impl fmt::Display for RadialReport {
    /// Joins findings into one comma-separated line ("ok" when empty).
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.findings.is_empty() {
            return f.write_str("ok");
        }
        let mut first = true;
        for finding in &self.findings {
            if !first {
                f.write_str(", ")?;
            }
            write!(f, "{finding}")?;
            first = false;
        }
        Ok(())
    }
}

/// Checks that the branch graph is a tree containing the slack bus.
///
/// Returns every violation found (disconnection, cycle, self-loop, count
/// mismatch, dangling endpoint) rather than stopping at the first.
pub fn validate_radial(net: &Network) -> RadialReport {
    let mut findings = Vec::new();
    let n = net.buses.len();
    let index: BTreeMap<usize, usize> =
        net.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();

    // Resolve endpoints; collect adjacency over the resolvable branches only.
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n]; // (neighbor index, branch idx)
    for (k, br) in net.branches.iter().enumerate() {
        if br.from == br.to {
            findings.push(RadialFinding::SelfLoop { bus: br.from });
            continue;
        }
        match (index.get(&br.from), index.get(&br.to)) {
            (Some(&a), Some(&b)) => {
                adj[a].push((b, k));
                adj[b].push((a, k));
            }
            (a, b) => {
                if a.is_none() {
                    findings.push(RadialFinding::UnknownEndpoint { bus: br.from });
                }
                if b.is_none() {
                    findings.push(RadialFinding::UnknownEndpoint { bus: br.to });
                }
            }
        }
    }

    if n > 0 && net.branches.len() != n - 1 {
        findings.push(RadialFinding::BranchCountMismatch {
            buses: n,
            branches: net.branches.len(),
        });
    }

    let slack = net.buses.iter().position(|b| b.kind == BusKind::Slack);
    let Some(slack) = slack else {
        findings.push(RadialFinding::NoSlack);
        return RadialReport { findings };
    };

    // Breadth-first reachability from the slack, remembering the branch that
    // discovered each bus so a revisit over a *different* branch is a cycle.
    let mut seen = vec![false; n];
    let mut via = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::new();
    seen[slack] = true;
    queue.push_back(slack);
    let mut cycle = false;
    while let Some(u) = queue.pop_front() {
        for &(v, k) in &adj[u] {
            if k == via[u] {
                continue; // the branch we arrived over
            }
            if seen[v] {
                cycle = true;
            } else {
                seen[v] = true;
                via[v] = k;
                queue.push_back(v);
            }
        }
    }
    if cycle {
        findings.push(RadialFinding::Cycle);
    }
    for (i, bus) in net.buses.iter().enumerate() {
        if !seen[i] {
            findings.push(RadialFinding::Unreachable { bus: bus.id });
        }
    }

    RadialReport { findings }
}

/// Parses case text into a validated [`Network`].
///
/// Branch impedances are converted to per-unit on the stated base; loads are
/// kept in kW/kvar. Fails with [`NetworkError::NotRadial`] when the branch
/// graph is not a tree containing the slack.
pub fn parse_case(case_text: &str) -> Result<Network, NetworkError> {
    let mut base: Option<(f64, f64)> = None;
    let mut buses: Vec<Bus> = Vec::new();
    let mut raw_branches: Vec<(usize, usize, f64, f64, usize)> = Vec::new();

    let bad = |line_no: usize, msg: &str| {
        NetworkError::MalformedCase(format!("line {line_no}: {msg}"))
    };

    for (lineno, raw) in case_text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tok = line.split_whitespace();
        let keyword = tok.next().expect("non-empty line has a first token");
        let rest: Vec<&str> = tok.collect();
        match keyword {
            "BASE" => {
                if base.is_some() {
                    return Err(bad(lineno, "duplicate BASE line"));
                }
                if rest.len() != 2 {
                    return Err(bad(lineno, "BASE expects <mva> <kv>"));
                }
                let mva = parse_f64(rest[0], lineno, "mva")?;
                let kv = parse_f64(rest[1], lineno, "kv")?;
                if !(mva > 0.0) || !(kv > 0.0) {
                    return Err(bad(lineno, "base quantities must be positive"));
                }
                base = Some((mva, kv));
            }
            "BUS" => {
                if rest.len() != 5 {
                    return Err(bad(lineno, "BUS expects <id> <kind> <Pd_kW> <Qd_kvar> <microgrid>"));
                }
                let id = parse_usize(rest[0], lineno, "bus id")?;
                if id == 0 {
                    return Err(bad(lineno, "bus ids are 1-based"));
                }
                let kind = BusKind::parse(rest[1])
                    .ok_or_else(|| bad(lineno, "kind must be slack|consumer|producer|prosumer"))?;
                let p = parse_f64(rest[2], lineno, "Pd_kW")?;
                let q = parse_f64(rest[3], lineno, "Qd_kvar")?;
                if p < 0.0 {
                    return Err(bad(lineno, "real load must be nonnegative"));
                }
                let microgrid = match rest[4] {
                    "0" | "false" => false,
                    "1" | "true" => true,
                    _ => return Err(bad(lineno, "microgrid flag must be 0 or 1")),
                };
                buses.push(Bus { id, kind, p_load_kw: p, q_load_kvar: q, is_microgrid: microgrid });
            }
            "BRANCH" => {
                if rest.len() != 4 {
                    return Err(bad(lineno, "BRANCH expects <from> <to> <r_ohm> <x_ohm>"));
                }
                let from = parse_usize(rest[0], lineno, "from")?;
                let to = parse_usize(rest[1], lineno, "to")?;
                let r = parse_f64(rest[2], lineno, "r_ohm")?;
                let x = parse_f64(rest[3], lineno, "x_ohm")?;
                if r < 0.0 || x < 0.0 {
                    return Err(bad(lineno, "impedances must be nonnegative"));
                }
                if r == 0.0 && x == 0.0 {
                    return Err(NetworkError::ZeroImpedanceBranch { from, to });
                }
                if from == to {
                    return Err(bad(lineno, "branch endpoints must differ"));
                }
                raw_branches.push((from, to, r, x, lineno));
            }
            _ => return Err(bad(lineno, "unknown keyword (expected BASE, BUS, or BRANCH)")),
        }
    }

    let (base_mva, base_kv) =
        base.ok_or_else(|| NetworkError::MalformedCase("missing BASE line".into()))?;
    if buses.is_empty() {
        return Err(NetworkError::MalformedCase("no BUS records".into()));
    }

    // Unique ids and slack placement.
    let mut ids = BTreeMap::new();
    for bus in &buses {
        if ids.insert(bus.id, ()).is_some() {
            return Err(NetworkError::DuplicateBusId(bus.id));
        }
    }
    let slack_count = buses.iter().filter(|b| b.kind == BusKind::Slack).count();
    if slack_count != 1 {
        return Err(NetworkError::MalformedCase(format!(
            "expected exactly one slack bus, found {slack_count}"
        )));
    }
    let slack = buses.iter().find(|b| b.kind == BusKind::Slack).expect("count checked");
    if slack.id != 1 {
        return Err(NetworkError::MalformedCase("the slack bus must have id 1".into()));
    }

    let z_base = base_kv * base_kv / base_mva;
    let mut branches = Vec::with_capacity(raw_branches.len());
    for (from, to, r, x, lineno) in raw_branches {
        if !ids.contains_key(&from) || !ids.contains_key(&to) {
            return Err(NetworkError::MalformedCase(format!(
                "line {lineno}: branch {from}-{to} references an unknown bus"
            )));
        }
        branches.push(Branch { from, to, r_ohm: r, x_ohm: x, r_pu: r / z_base, x_pu: x / z_base });
    }

    let net = Network { buses, branches, base_mva, base_kv };
    let report = validate_radial(&net);
    if !report.is_radial() {
        return Err(NetworkError::NotRadial(report.to_string()));
    }
    Ok(net)
}

fn parse_f64(tok: &str, lineno: usize, what: &str) -> Result<f64, NetworkError> {
    let v: f64 = tok
        .parse()
        .map_err(|_| NetworkError::MalformedCase(format!("line {lineno}: bad {what} `{tok}`")))?;
    if !v.is_finite() {
        return Err(NetworkError::MalformedCase(format!("line {lineno}: non-finite {what}")));
    }
    Ok(v)
}

fn parse_usize(tok: &str, lineno: usize, what: &str) -> Result<usize, NetworkError> {
    tok.parse()
        .map_err(|_| NetworkError::MalformedCase(format!("line {lineno}: bad {what} `{tok}`")))
}

/// Serializes a network back into case text.
///
/// Ohmic branch values and loads are written with shortest-round-trip float
/// formatting, so `parse_case(emit_case(net))` reproduces every stored field
/// bit-exactly.
pub fn emit_case(net: &Network) -> String {
    let mut out = String::new();
    out.push_str("# columns: BASE mva kv | BUS id kind Pd_kW Qd_kvar microgrid | BRANCH from to r_ohm x_ohm\n");
    out.push_str(&format!("BASE {} {}\n", net.base_mva, net.base_kv));
    for b in &net.buses {
        out.push_str(&format!(
            "BUS {} {} {} {} {}\n",
            b.id,
            b.kind,
            b.p_load_kw,
            b.q_load_kvar,
            u8::from(b.is_microgrid)
        ));
    }
    for br in &net.branches {
        out.push_str(&format!("BRANCH {} {} {} {}\n", br.from, br.to, br.r_ohm, br.x_ohm));
    }
    out
}

/// Nodal admittance quantities for a network, in per-unit.
///
/// For each branch the table stores that branch's series admittance
/// `g + jb = 1 / (r + jx)` (so `g ≥ 0` and `b ≤ 0` for inductive lines), and
/// on the diagonal the *negated* sum of the incident branch admittances.
/// The physical bus-admittance matrix used by the power-flow equations is the
/// negation of this table: `Y_ii = Σ incident (g + jb)` and
/// `Y_ij = -(g + jb)` for a branch (i, j). Accessors prefixed `ybus_` return
/// bus-matrix entries; the plain accessors return the stored table.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceTable {
    n: usize,
    /// Per bus index: (g, b) diagonal table entries (negated incident sums).
    diag: Vec<(f64, f64)>,
    /// Per branch: endpoint indices and the branch series admittance.
    entries: Vec<AdmEntry>,
    /// Per bus index: (neighbor index, branch g, branch b, branch position).
    neighbors: Vec<Vec<(usize, f64, f64, usize)>>,
}

/// One branch's entry in the admittance table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmEntry {
    /// Bus index (not id) of one endpoint.
    pub i: usize,
    /// Bus index (not id) of the other endpoint.
    pub j: usize,
    /// Branch series conductance in pu (≥ 0).
    pub g: f64,
    /// Branch series susceptance in pu (≤ 0 for inductive branches).
    pub b: f64,
}

impl AdmittanceTable {
    /// Number of buses the table covers.
    pub fn n_buses(&self) -> usize {
        self.n
    }

    /// Stored diagonal entry for bus index `i` (negated incident sum).
    pub fn diag(&self, i: usize) -> (f64, f64) {
        self.diag[i]
    }

    /// Stored off-diagonal entry for the bus-index pair `(i, j)`, if a branch
    /// connects them: the branch series admittance itself.
    pub fn offdiag(&self, i: usize, j: usize) -> Option<(f64, f64)> {
        self.neighbors[i]
            .iter()
            .find(|&&(k, _, _, _)| k == j)
            .map(|&(_, g, b, _)| (g, b))
    }

    /// Branch entries in case order.
    pub fn entries(&self) -> &[AdmEntry] {
        &self.entries
    }

    /// Bus-admittance-matrix diagonal for bus index `i`:
    /// `Y_ii = Σ incident branch admittances`.
    pub fn ybus_diag(&self, i: usize) -> (f64, f64) {
        let (g, b) = self.diag[i];
        (-g, -b)
    }

    /// Bus-admittance-matrix off-diagonals of bus index `i`: yields
    /// `(j, G_ij, B_ij)` with `G_ij = -g_branch`, `B_ij = -b_branch` for each
    /// neighbor `j`.
    pub fn ybus_neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.neighbors[i].iter().map(|&(j, g, b, _)| (j, -g, -b))
    }

    /// Neighbors of bus index `i` as stored-table entries:
    /// `(j, g_branch, b_branch, branch index)`.
    pub fn table_neighbors(&self, i: usize) -> &[(usize, f64, f64, usize)] {
        &self.neighbors[i]
    }
}

/// Builds the admittance table for a validated network.
///
/// Each branch contributes `g = r / (r² + x²)` and `b = -x / (r² + x²)` in
/// per-unit; diagonals are the negated sums of the incident entries (there
/// are no shunts in this model).
pub fn build_admittance(net: &Network) -> Result<AdmittanceTable, NetworkError> {
    let n = net.buses.len();
    let mut diag = vec![(0.0, 0.0); n];
    let mut entries = Vec::with_capacity(net.branches.len());
    let mut neighbors: Vec<Vec<(usize, f64, f64, usize)>> = vec![Vec::new(); n];

    for (k, br) in net.branches.iter().enumerate() {
        let denom = br.r_pu * br.r_pu + br.x_pu * br.x_pu;
        if denom == 0.0 {
            return Err(NetworkError::ZeroImpedanceBranch { from: br.from, to: br.to });
        }
        let g = br.r_pu / denom;
        let b = -br.x_pu / denom;
        let i = net
            .index_of(br.from)
            .ok_or(NetworkError::MalformedCase(format!("branch references unknown bus {}", br.from)))?;
        let j = net
            .index_of(br.to)
            .ok_or(NetworkError::MalformedCase(format!("branch references unknown bus {}", br.to)))?;
        entries.push(AdmEntry { i, j, g, b });
        neighbors[i].push((j, g, b, k));
        neighbors[j].push((i, g, b, k));
        diag[i].0 -= g;
        diag[i].1 -= b;
        diag[j].0 -= g;
        diag[j].1 -= b;
    }

    Ok(AdmittanceTable { n, diag, entries, neighbors })
}

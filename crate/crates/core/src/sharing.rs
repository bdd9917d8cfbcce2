//! Two-stage application-aware sharing between small cells and the macro cell.
//!
//! Every UE first reports its utility parameters to its serving eNodeB. Each small cell
//! allocates its leased capacity over its SUEs and forwards the SUEs that fall short of their
//! minimum utility, together with the rate they already hold. The macro cell then allocates
//! over its own MUEs plus all forwarded SUEs, treating each SUE's small-cell rate as a carrier
//! aggregation offset.

use std::collections::HashSet;
use std::fmt;

use indexmap::IndexMap;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::solver::{
    allocate_with, AllocationProblem, BisectionStep, CellAllocation, Entry, SolverOptions, UserId,
};
use crate::utility::{UtilityFunction, UtilityParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Sue,
    Mue,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Sue => "SUE",
            Tier::Mue => "MUE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(into = "String")]
pub enum CellId {
    Macro,
    Small(String),
}

impl From<CellId> for String {
    fn from(c: CellId) -> String {
        c.to_string()
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellId::Macro => f.write_str("macro"),
            CellId::Small(id) => f.write_str(id),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile<T> {
    pub user_id: UserId,
    pub tier: Tier,
    pub cell: CellId,
    pub utility: UtilityFunction<T>,
    pub u_req: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmallCell<T> {
    pub id: String,
    pub capacity: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario<T> {
    macro_capacity: T,
    small_cells: Vec<SmallCell<T>>,
    users: Vec<UserProfile<T>>,
}

impl<T: Scalar> Scenario<T> {
    pub fn new(
        macro_capacity: T,
        small_cells: Vec<SmallCell<T>>,
        users: Vec<UserProfile<T>>,
    ) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidScenario(msg));
        if !(macro_capacity > T::zero()) || !macro_capacity.is_finite() {
            return bad(format!(
                "macro capacity must be positive, got {macro_capacity}"
            ));
        }
        let mut cell_ids = HashSet::new();
        for c in &small_cells {
            if c.id == "macro" {
                return bad("small cell id `macro` is reserved".into());
            }
            if !cell_ids.insert(c.id.as_str()) {
                return bad(format!("duplicate small cell id {}", c.id));
            }
            if !(c.capacity > T::zero()) || !c.capacity.is_finite() {
                return bad(format!(
                    "small cell {} capacity must be positive, got {}",
                    c.id, c.capacity
                ));
            }
        }
        if users.is_empty() {
            return bad("scenario has no users".into());
        }
        let mut user_ids = HashSet::new();
        for u in &users {
            if !user_ids.insert(&u.user_id) {
                return bad(format!("duplicate user id {}", u.user_id));
            }
            match (u.tier, &u.cell, u.u_req) {
                (Tier::Sue, CellId::Small(id), Some(req)) => {
                    if !cell_ids.contains(id.as_str()) {
                        return bad(format!("user {} references unknown cell {id}", u.user_id));
                    }
                    if !(req > T::zero() && req < T::one()) {
                        return bad(format!(
                            "user {} u_req must lie in (0, 1), got {req}",
                            u.user_id
                        ));
                    }
                }
                (Tier::Sue, CellId::Small(_), None) => {
                    return bad(format!("SUE {} is missing u_req", u.user_id))
                }
                (Tier::Sue, CellId::Macro, _) => {
                    return bad(format!("SUE {} must belong to a small cell", u.user_id))
                }
                (Tier::Mue, CellId::Macro, None) => {}
                (Tier::Mue, CellId::Macro, Some(_)) => {
                    return bad(format!("MUE {} must not carry u_req", u.user_id))
                }
                (Tier::Mue, CellId::Small(_), _) => {
                    return bad(format!(
                        "MUE {} must be served by the macro cell",
                        u.user_id
                    ))
                }
            }
        }
        Ok(Self {
            macro_capacity,
            small_cells,
            users,
        })
    }

    pub fn macro_capacity(&self) -> T {
        self.macro_capacity
    }

    pub fn small_cells(&self) -> &[SmallCell<T>] {
        &self.small_cells
    }

    pub fn users(&self) -> &[UserProfile<T>] {
        &self.users
    }

    pub fn user(&self, id: &UserId) -> Option<&UserProfile<T>> {
        self.users.iter().find(|u| &u.user_id == id)
    }

    /// Copy of the scenario with the macro capacity replaced.
    pub fn with_macro_capacity(&self, capacity: T) -> Result<Self> {
        Self::new(capacity, self.small_cells.clone(), self.users.clone())
    }

    /// Copy of the scenario with one small cell's capacity replaced.
    pub fn with_small_cell_capacity(&self, cell_id: &str, capacity: T) -> Result<Self> {
        if !self.small_cells.iter().any(|c| c.id == cell_id) {
            return Err(Error::InvalidScenario(format!(
                "unknown small cell {cell_id}"
            )));
        }
        let cells = self
            .small_cells
            .iter()
            .map(|c| SmallCell {
                id: c.id.clone(),
                capacity: if c.id == cell_id {
                    capacity
                } else {
                    c.capacity
                },
            })
            .collect();
        Self::new(self.macro_capacity, cells, self.users.clone())
    }
}

/// Utility report a UE sends to its serving eNodeB. SUE messages carry `u_req`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterMessage<T> {
    pub user_id: UserId,
    pub params: UtilityParams<T>,
    pub u_req: Option<T>,
}

impl<T: Scalar> ParameterMessage<T> {
    pub fn utility(&self) -> Result<UtilityFunction<T>> {
        UtilityFunction::from_params(self.params)
    }
}

/// An SUE forwarded by its small cell for additional macro resources.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EscalationRecord<T> {
    pub user_id: UserId,
    pub small_cell: String,
    pub small_cell_rate: T,
    pub params: UtilityParams<T>,
}

/// Per-cell message sets: small cells in scenario order, then the macro cell.
pub fn exchange_parameters<T: Scalar>(
    scenario: &Scenario<T>,
) -> IndexMap<CellId, Vec<ParameterMessage<T>>> {
    let mut out: IndexMap<CellId, Vec<ParameterMessage<T>>> = IndexMap::new();
    let cells = scenario
        .small_cells
        .iter()
        .map(|c| CellId::Small(c.id.clone()))
        .chain(std::iter::once(CellId::Macro));
    for cell in cells {
        let msgs: Vec<_> = scenario
            .users
            .iter()
            .filter(|u| u.cell == cell)
            .map(|u| ParameterMessage {
                user_id: u.user_id.clone(),
                params: u.utility.params(),
                u_req: match u.tier {
                    Tier::Sue => u.u_req,
                    Tier::Mue => None,
                },
            })
            .collect();
        if !msgs.is_empty() {
            out.insert(cell, msgs);
        }
    }
    out
}

type Trace<T> = Vec<BisectionStep<T>>;

/// Per-cell price bisection traces, in the order the cells were solved.
pub type CellTraces<T> = Vec<(CellId, Trace<T>)>;

type SmallCellStage<T> = (CellAllocation<T>, Vec<EscalationRecord<T>>, Trace<T>);

fn small_cell_stage<T: Scalar>(
    cell: &SmallCell<T>,
    msgs: &[ParameterMessage<T>],
    opts: &SolverOptions<T>,
) -> Result<SmallCellStage<T>> {
    if msgs.is_empty() {
        return Ok((CellAllocation::empty(), Vec::new(), Vec::new()));
    }
    let mut utilities = Vec::with_capacity(msgs.len());
    let mut entries = Vec::with_capacity(msgs.len());
    for m in msgs {
        let u = m.utility()?;
        utilities.push(u);
        entries.push(Entry::new(m.user_id.clone(), u, T::zero()));
    }
    let problem = AllocationProblem::new(entries, cell.capacity)?;
    let (alloc, trace) = allocate_with(&problem, opts)?;

    let mut escalations = Vec::new();
    for (m, u) in msgs.iter().zip(&utilities) {
        let rate = alloc.rates[&m.user_id];
        let req = m.u_req.ok_or_else(|| {
            Error::InvalidScenario(format!("SUE {} reported no u_req", m.user_id))
        })?;
        if u.evaluate(rate)? < req {
            escalations.push(EscalationRecord {
                user_id: m.user_id.clone(),
                small_cell: cell.id.clone(),
                small_cell_rate: rate,
                params: m.params,
            });
        }
    }
    Ok((alloc, escalations, trace))
}

fn macro_stage<T: Scalar>(
    capacity: T,
    mue_msgs: &[ParameterMessage<T>],
    escalations: &[EscalationRecord<T>],
    opts: &SolverOptions<T>,
) -> Result<(CellAllocation<T>, Trace<T>)> {
    let mut entries = Vec::with_capacity(mue_msgs.len() + escalations.len());
    for e in escalations {
        entries.push(Entry::new(
            e.user_id.clone(),
            UtilityFunction::from_params(e.params)?,
            e.small_cell_rate,
        ));
    }
    for m in mue_msgs {
        entries.push(Entry::new(m.user_id.clone(), m.utility()?, T::zero()));
    }
    if entries.is_empty() {
        return Ok((CellAllocation::empty(), Vec::new()));
    }
    let problem = AllocationProblem::new(entries, capacity)?;
    allocate_with(&problem, opts)
}

/// Stage one for a single small cell: allocation plus the SUEs it forwards to the macro cell.
pub fn small_cell_round<T: Scalar>(
    scenario: &Scenario<T>,
    cell_id: &str,
) -> Result<(CellAllocation<T>, Vec<EscalationRecord<T>>)> {
    small_cell_round_with(scenario, cell_id, &SolverOptions::default())
}

pub fn small_cell_round_with<T: Scalar>(
    scenario: &Scenario<T>,
    cell_id: &str,
    opts: &SolverOptions<T>,
) -> Result<(CellAllocation<T>, Vec<EscalationRecord<T>>)> {
    let cell = scenario
        .small_cells
        .iter()
        .find(|c| c.id == cell_id)
        .ok_or_else(|| Error::InvalidScenario(format!("unknown small cell {cell_id}")))?;
    let msgs = exchange_parameters(scenario)
        .shift_remove(&CellId::Small(cell_id.to_owned()))
        .unwrap_or_default();
    small_cell_stage(cell, &msgs, opts).map(|(a, e, _)| (a, e))
}

/// Stage two: macro allocation over all MUEs plus the escalated SUEs.
pub fn macro_round<T: Scalar>(
    scenario: &Scenario<T>,
    escalations: &[EscalationRecord<T>],
) -> Result<CellAllocation<T>> {
    macro_round_with(scenario, escalations, &SolverOptions::default())
}

pub fn macro_round_with<T: Scalar>(
    scenario: &Scenario<T>,
    escalations: &[EscalationRecord<T>],
    opts: &SolverOptions<T>,
) -> Result<CellAllocation<T>> {
    for e in escalations {
        match scenario.user(&e.user_id) {
            Some(u) if u.tier == Tier::Sue => {}
            _ => {
                return Err(Error::InvalidScenario(format!(
                    "escalation for {} does not reference an SUE",
                    e.user_id
                )))
            }
        }
    }
    let msgs = exchange_parameters(scenario)
        .shift_remove(&CellId::Macro)
        .unwrap_or_default();
    macro_stage(scenario.macro_capacity, &msgs, escalations, opts).map(|(a, _)| a)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserOutcome<T> {
    pub user_id: UserId,
    pub tier: Tier,
    pub cell: CellId,
    /// Zero for MUEs.
    pub small_cell_rate: T,
    pub escalated: bool,
    /// Zero for users outside the macro group.
    pub macro_rate: T,
    pub total_rate: T,
    pub utility: T,
    pub u_req: Option<T>,
    /// `None` for MUEs.
    pub met_requirement: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellOutcome<T> {
    pub cell: CellId,
    pub capacity: T,
    /// Zero for a cell with no users.
    pub shadow_price: T,
    pub objective: T,
    pub iterations: usize,
    pub users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocationReport<T> {
    /// One row per user, in scenario order.
    pub users: Vec<UserOutcome<T>>,
    /// Small cells in scenario order, then the macro cell.
    pub cells: Vec<CellOutcome<T>>,
    pub escalations: Vec<EscalationRecord<T>>,
}

impl<T: Scalar> AllocationReport<T> {
    pub fn user(&self, id: &UserId) -> Option<&UserOutcome<T>> {
        self.users.iter().find(|u| &u.user_id == id)
    }

    pub fn cell(&self, id: &CellId) -> Option<&CellOutcome<T>> {
        self.cells.iter().find(|c| &c.cell == id)
    }

    pub fn escalated_ids(&self) -> Vec<UserId> {
        self.escalations.iter().map(|e| e.user_id.clone()).collect()
    }
}

pub fn run_scenario<T: Scalar>(scenario: &Scenario<T>) -> Result<AllocationReport<T>> {
    run_scenario_with(scenario, &SolverOptions::default())
}

pub fn run_scenario_with<T: Scalar>(
    scenario: &Scenario<T>,
    opts: &SolverOptions<T>,
) -> Result<AllocationReport<T>> {
    run_scenario_traced(scenario, opts).map(|(r, _)| r)
}

/// Runs both stages and also returns each solved cell's price bisection trace. Only the
/// exchanged parameter messages feed the eNodeB stages.
pub fn run_scenario_traced<T: Scalar>(
    scenario: &Scenario<T>,
    opts: &SolverOptions<T>,
) -> Result<(AllocationReport<T>, CellTraces<T>)> {
    let mut traces = Vec::new();
    let mut messages = exchange_parameters(scenario);

    let mut small_results = Vec::with_capacity(scenario.small_cells.len());
    let mut escalations = Vec::new();
    for cell in &scenario.small_cells {
        let msgs = messages
            .shift_remove(&CellId::Small(cell.id.clone()))
            .unwrap_or_default();
        let (alloc, esc, trace) = small_cell_stage(cell, &msgs, opts)?;
        escalations.extend(esc);
        if !trace.is_empty() {
            traces.push((CellId::Small(cell.id.clone()), trace));
        }
        small_results.push((cell, alloc, msgs.len()));
    }

    let mue_msgs = messages.shift_remove(&CellId::Macro).unwrap_or_default();
    let (macro_alloc, macro_trace) =
        macro_stage(scenario.macro_capacity, &mue_msgs, &escalations, opts)?;
    if !macro_trace.is_empty() {
        traces.push((CellId::Macro, macro_trace));
    }

    let escalated: HashSet<&UserId> = escalations.iter().map(|e| &e.user_id).collect();
    let mut users = Vec::with_capacity(scenario.users.len());
    for u in &scenario.users {
        let small_cell_rate = match &u.cell {
            CellId::Small(id) => small_results
                .iter()
                .find(|(c, _, _)| &c.id == id)
                .and_then(|(_, a, _)| a.rate(&u.user_id))
                .unwrap_or_else(T::zero),
            CellId::Macro => T::zero(),
        };
        let is_escalated = escalated.contains(&u.user_id);
        let macro_rate = macro_alloc.rate(&u.user_id).unwrap_or_else(T::zero);
        let total_rate = match u.tier {
            Tier::Mue => macro_rate,
            Tier::Sue if is_escalated => small_cell_rate + macro_rate,
            Tier::Sue => small_cell_rate,
        };
        let utility = u.utility.evaluate(total_rate)?;
        users.push(UserOutcome {
            user_id: u.user_id.clone(),
            tier: u.tier,
            cell: u.cell.clone(),
            small_cell_rate,
            escalated: is_escalated,
            macro_rate,
            total_rate,
            utility,
            u_req: u.u_req,
            met_requirement: u.u_req.map(|req| utility >= req),
        });
    }

    let mut cells: Vec<CellOutcome<T>> = small_results
        .into_iter()
        .map(|(c, a, n)| CellOutcome {
            cell: CellId::Small(c.id.clone()),
            capacity: c.capacity,
            shadow_price: a.shadow_price,
            objective: a.objective,
            iterations: a.iterations,
            users: n,
        })
        .collect();
    cells.push(CellOutcome {
        cell: CellId::Macro,
        capacity: scenario.macro_capacity,
        shadow_price: macro_alloc.shadow_price,
        objective: macro_alloc.objective,
        iterations: macro_alloc.iterations,
        users: macro_alloc.rates.len(),
    });

    Ok((
        AllocationReport {
            users,
            cells,
            escalations,
        },
        traces,
    ))
}

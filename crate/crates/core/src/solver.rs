//! Single-cell utility proportional fairness allocation.
//!
//! Maximizes `sum_i ln U_i(r_i + C_i)` subject to `sum_i r_i <= R` and `0 <= r_i <= R`, where
//! `C_i` is a rate the user already holds on another carrier (zero for a plain cell). The
//! problem is solved in the dual: each user's demand at price `p` is the rate where the
//! log-utility slope equals `p`, and the shadow price is found by bisection on the excess
//! demand, which is continuous and decreasing in `p`.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Scalar};
use crate::utility::UtilityFunction;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub String);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for UserId {
    fn from(s: &str) -> Self {
        UserId(s.to_owned())
    }
}

impl From<String> for UserId {
    fn from(s: String) -> Self {
        UserId(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry<T> {
    pub user_id: UserId,
    pub utility: UtilityFunction<T>,
    /// Rate already held on another carrier.
    pub offset: T,
}

impl<T: Scalar> Entry<T> {
    pub fn new(user_id: impl Into<UserId>, utility: UtilityFunction<T>, offset: T) -> Self {
        Self {
            user_id: user_id.into(),
            utility,
            offset,
        }
    }
}

/// One cell's allocation instance. Construct through [`AllocationProblem::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationProblem<T> {
    entries: Vec<Entry<T>>,
    capacity: T,
}

impl<T: Scalar> AllocationProblem<T> {
    pub fn new(entries: Vec<Entry<T>>, capacity: T) -> Result<Self> {
        if !(capacity > T::zero()) || !capacity.is_finite() {
            return Err(Error::InvalidProblem(format!(
                "capacity must be positive and finite, got {capacity}"
            )));
        }
        if entries.is_empty() {
            return Err(Error::InvalidProblem(
                "at least one user is required".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !(e.offset >= T::zero()) || !e.offset.is_finite() {
                return Err(Error::InvalidProblem(format!(
                    "offset of user {} must be nonnegative, got {}",
                    e.user_id, e.offset
                )));
            }
            if !seen.insert(&e.user_id) {
                return Err(Error::InvalidProblem(format!(
                    "duplicate user id {}",
                    e.user_id
                )));
            }
        }
        Ok(Self { entries, capacity })
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn capacity(&self) -> T {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `sum_i ln U_i(r_i + C_i)` for rates given in entry order.
    pub fn objective(&self, rates: &[T]) -> T {
        self.entries
            .iter()
            .zip(rates)
            .fold(T::zero(), |acc, (e, &r)| {
                acc + e.utility.log_utility_unchecked(r + e.offset)
            })
    }

    /// Demand of entry `e` at price `p`, clamped below at zero only.
    fn raw_demand(&self, e: &Entry<T>, p: T) -> T {
        (e.utility.rate_at_price_unchecked(p, self.capacity) - e.offset).max(T::zero())
    }

    /// Per-user demand at price `p`, clamped to `[0, capacity]`.
    pub fn demand_at_price(&self, p: T) -> Result<IndexMap<UserId, T>> {
        if !(p > T::zero()) || !p.is_finite() {
            return Err(Error::domain(
                "demand_at_price",
                format!("price must be positive and finite, got p={p}"),
            ));
        }
        Ok(self
            .entries
            .iter()
            .map(|e| (e.user_id.clone(), self.raw_demand(e, p).min(self.capacity)))
            .collect())
    }

    // The upper clamp is left out here: at the root every demand is at most the capacity
    // anyway, and dropping it keeps the function strictly decreasing for a single user.
    fn excess_demand(&self, p: T) -> T {
        self.entries
            .iter()
            .fold(T::zero(), |acc, e| acc + self.raw_demand(e, p))
            - self.capacity
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions<T> {
    /// Capacity tolerance relative to `R`.
    pub tol_cap_rel: T,
    /// Stationarity tolerance relative to the shadow price.
    pub tol_kkt_rel: T,
    pub max_iterations: usize,
}

impl<T: Scalar> Default for SolverOptions<T> {
    fn default() -> Self {
        let floor = T::epsilon() * lit(64.0);
        Self {
            tol_cap_rel: lit::<T>(1e-6).max(floor),
            tol_kkt_rel: lit::<T>(1e-5).max(floor),
            max_iterations: 200,
        }
    }
}

/// One bisection step on the shadow price.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BisectionStep<T> {
    pub iteration: usize,
    pub p_lo: T,
    pub p_hi: T,
    pub p_mid: T,
    pub excess_demand: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellAllocation<T> {
    /// Rates in problem entry order.
    pub rates: IndexMap<UserId, T>,
    /// Zero only for an empty allocation.
    pub shadow_price: T,
    pub objective: T,
    pub iterations: usize,
    /// `|sum r - R|` at termination.
    pub residual: T,
}

impl<T: Scalar> CellAllocation<T> {
    /// Allocation over no users.
    pub fn empty() -> Self {
        Self {
            rates: IndexMap::new(),
            shadow_price: T::zero(),
            objective: T::zero(),
            iterations: 0,
            residual: T::zero(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn rate(&self, id: &UserId) -> Option<T> {
        self.rates.get(id).copied()
    }

    pub fn total(&self) -> T {
        self.rates.values().fold(T::zero(), |a, &r| a + r)
    }
}

pub fn allocate<T: Scalar>(problem: &AllocationProblem<T>) -> Result<CellAllocation<T>> {
    allocate_with(problem, &SolverOptions::default()).map(|(a, _)| a)
}

/// Solves the cell problem and returns the allocation together with the bisection trace.
pub fn allocate_with<T: Scalar>(
    problem: &AllocationProblem<T>,
    opts: &SolverOptions<T>,
) -> Result<(CellAllocation<T>, Vec<BisectionStep<T>>)> {
    let two = lit::<T>(2.0);
    let cap = problem.capacity;
    let tol_cap = opts.tol_cap_rel * cap;
    let eps = cap * lit(1e-9);
    let failure = |reason: &str, p_lo: T, p_hi: T| Error::SolverFailure {
        reason: reason.to_owned(),
        p_lo: to_f64(p_lo),
        p_hi: to_f64(p_hi),
        excess_lo: to_f64(problem.excess_demand(p_lo)),
        excess_hi: to_f64(problem.excess_demand(p_hi)),
    };

    let mut p_hi = problem
        .entries
        .iter()
        .map(|e| e.utility.d_log_utility_unchecked(e.offset.max(eps) + eps))
        .fold(T::zero(), T::max);
    if !(p_hi > T::zero()) || !p_hi.is_finite() {
        p_hi = T::one();
    }
    // Grow the upper bound until demand no longer exceeds capacity, then walk down by halving
    // until demand does. The bracket handed to bisection therefore spans at most a factor of two,
    // however small the clearing price is.
    let mut expansions = 0;
    while problem.excess_demand(p_hi) >= T::zero() {
        p_hi = p_hi * two;
        expansions += 1;
        if expansions > opts.max_iterations || !p_hi.is_finite() {
            return Err(failure(
                "upper price bound does not clear demand",
                p_hi / two,
                p_hi,
            ));
        }
    }
    let mut p_lo = p_hi / two;
    while problem.excess_demand(p_lo) <= T::zero() {
        p_hi = p_lo;
        p_lo = p_lo / two;
        if !(p_lo > T::min_positive_value()) {
            return Err(failure(
                "lower price bound does not exhaust capacity",
                p_lo,
                p_hi,
            ));
        }
    }

    let mut trace = Vec::new();
    let mut price = None;
    for iteration in 1..=opts.max_iterations {
        let mid = p_lo + (p_hi - p_lo) / two;
        let excess = problem.excess_demand(mid);
        trace.push(BisectionStep {
            iteration,
            p_lo,
            p_hi,
            p_mid: mid,
            excess_demand: excess,
        });
        if excess.abs() <= tol_cap {
            price = Some(mid);
            break;
        }
        if mid <= p_lo || mid >= p_hi {
            // Adjacent prices: some demand jumps by more than the tolerance across one ulp.
            let rates = split_at_collapsed_bracket(problem, p_lo, p_hi)
                .ok_or_else(|| failure("price bracket collapsed before convergence", p_lo, p_hi))?;
            let total = rates.iter().fold(T::zero(), |a, &r| a + r);
            trace.push(BisectionStep {
                iteration: iteration + 1,
                p_lo,
                p_hi,
                p_mid: p_hi,
                excess_demand: total - cap,
            });
            let alloc = finish(problem, rates, p_hi, trace.len());
            check_stationarity(problem, &alloc, opts, p_lo)?;
            return Ok((alloc, trace));
        }
        if excess > T::zero() {
            p_lo = mid;
        } else {
            p_hi = mid;
        }
    }
    let Some(price) = price else {
        return Err(failure("iteration limit reached", p_lo, p_hi));
    };

    let rates: Vec<T> = problem
        .entries
        .iter()
        .map(|e| problem.raw_demand(e, price).min(cap))
        .collect();
    let alloc = finish(problem, rates, price, trace.len());
    check_stationarity(problem, &alloc, opts, price)?;
    Ok((alloc, trace))
}

/// Largest relative gap `|slope_i - p| / p` over users strictly inside `(0, capacity)`.
pub fn stationarity_gap<T: Scalar>(problem: &AllocationProblem<T>, alloc: &CellAllocation<T>) -> T {
    let p = alloc.shadow_price;
    problem
        .entries
        .iter()
        .filter_map(|e| {
            let r = alloc.rate(&e.user_id)?;
            (r > T::zero() && r < problem.capacity)
                .then(|| ((e.utility.d_log_utility_unchecked(r + e.offset) - p) / p).abs())
        })
        .fold(T::zero(), T::max)
}

fn check_stationarity<T: Scalar>(
    problem: &AllocationProblem<T>,
    alloc: &CellAllocation<T>,
    opts: &SolverOptions<T>,
    p_lo: T,
) -> Result<()> {
    let gap = stationarity_gap(problem, alloc);
    if gap <= opts.tol_kkt_rel {
        Ok(())
    } else {
        Err(Error::SolverFailure {
            reason: format!("stationarity gap {} exceeds tolerance", to_f64(gap)),
            p_lo: to_f64(p_lo),
            p_hi: to_f64(alloc.shadow_price),
            excess_lo: to_f64(problem.excess_demand(p_lo)),
            excess_hi: to_f64(alloc.total() - problem.capacity),
        })
    }
}

fn finish<T: Scalar>(
    problem: &AllocationProblem<T>,
    rates: Vec<T>,
    price: T,
    iterations: usize,
) -> CellAllocation<T> {
    let total = rates.iter().fold(T::zero(), |a, &r| a + r);
    CellAllocation {
        objective: problem.objective(&rates),
        residual: (total - problem.capacity).abs(),
        rates: problem
            .entries
            .iter()
            .map(|e| e.user_id.clone())
            .zip(rates)
            .collect(),
        shadow_price: price,
        iterations,
    }
}

/// Resolves a bracket of adjacent prices: every user whose demand jumps between `p_lo` and
/// `p_hi` has its log-utility slope equal to the price to machine precision, so the remaining
/// capacity is split among them in proportion to their jumps.
fn split_at_collapsed_bracket<T: Scalar>(
    problem: &AllocationProblem<T>,
    p_lo: T,
    p_hi: T,
) -> Option<Vec<T>> {
    let cap = problem.capacity;
    let at_hi: Vec<T> = problem
        .entries
        .iter()
        .map(|e| problem.raw_demand(e, p_hi))
        .collect();
    let at_lo: Vec<T> = problem
        .entries
        .iter()
        .map(|e| problem.raw_demand(e, p_lo))
        .collect();
    let deficit = cap - at_hi.iter().fold(T::zero(), |a, &r| a + r);
    let jumps: Vec<T> = at_lo
        .iter()
        .zip(&at_hi)
        .map(|(&l, &h)| (l - h).max(T::zero()))
        .collect();
    let total_jump = jumps.iter().fold(T::zero(), |a, &j| a + j);
    if !(deficit >= T::zero()) || !(total_jump >= deficit) || !(total_jump > T::zero()) {
        return None;
    }
    Some(
        at_hi
            .iter()
            .zip(&jumps)
            .map(|(&h, &j)| (h + j * deficit / total_jump).min(cap))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lg(k: f64, r_max: f64) -> UtilityFunction<f64> {
        UtilityFunction::logarithmic(k, r_max).unwrap()
    }

    fn sg(a: f64, b: f64) -> UtilityFunction<f64> {
        UtilityFunction::sigmoidal(a, b).unwrap()
    }

    #[test]
    fn rejects_invalid_problems() {
        assert!(AllocationProblem::<f64>::new(vec![], 10.0).is_err());
        assert!(AllocationProblem::new(vec![Entry::new("1", lg(1.0, 10.0), 0.0)], 0.0).is_err());
        assert!(AllocationProblem::new(vec![Entry::new("1", lg(1.0, 10.0), -1.0)], 5.0).is_err());
        let dup = vec![
            Entry::new("1", lg(1.0, 10.0), 0.0),
            Entry::new("1", sg(1.0, 10.0), 0.0),
        ];
        assert!(matches!(
            AllocationProblem::new(dup, 5.0),
            Err(Error::InvalidProblem(_))
        ));
    }

    #[test]
    fn demand_examples() {
        let u = sg(3.0, 20.0);
        let p = AllocationProblem::new(vec![Entry::new("a", u, 0.0)], 100.0).unwrap();
        let d = p.demand_at_price(u.d_log_utility(7.0).unwrap()).unwrap();
        assert!((d[&UserId::from("a")] - 7.0).abs() < 1e-6);

        let p = AllocationProblem::new(vec![Entry::new("a", u, 12.0)], 100.0).unwrap();
        let d = p.demand_at_price(u.d_log_utility(20.0).unwrap()).unwrap();
        assert!((d[&UserId::from("a")] - 8.0).abs() < 1e-6);

        let p = AllocationProblem::new(vec![Entry::new("a", u, 40.0)], 100.0).unwrap();
        let d = p.demand_at_price(u.d_log_utility(20.0).unwrap()).unwrap();
        assert_eq!(d[&UserId::from("a")], 0.0);

        assert!(p.demand_at_price(0.0).is_err());
    }

    #[test]
    fn single_user_takes_capacity() {
        let p = AllocationProblem::new(vec![Entry::new("1", lg(0.5, 100.0), 0.0)], 10.0).unwrap();
        let a = allocate(&p).unwrap();
        assert!((a.rates[0] - 10.0).abs() < 1e-5);
        assert!(a.shadow_price > 0.0);
        // price sits where the slope meets the capacity
        let slope = lg(0.5, 100.0).d_log_utility(a.rates[0]).unwrap();
        assert!((slope - a.shadow_price).abs() / a.shadow_price < 1e-5);
    }

    #[test]
    fn single_user_with_offset() {
        let p = AllocationProblem::new(vec![Entry::new("1", sg(1.0, 30.0), 28.0)], 80.0).unwrap();
        let a = allocate(&p).unwrap();
        assert!((a.rates[0] - 80.0).abs() < 80.0 * 1e-6);
    }

    #[test]
    fn symmetric_users_split_evenly() {
        let u = sg(3.0, 20.0);
        let p =
            AllocationProblem::new(vec![Entry::new("1", u, 0.0), Entry::new("2", u, 0.0)], 50.0)
                .unwrap();
        let a = allocate(&p).unwrap();
        assert!((a.rates[0] - 25.0).abs() < 50.0 * 1e-6);
        assert!((a.rates[1] - 25.0).abs() < 50.0 * 1e-6);
        assert!(a.residual <= 50.0 * 1e-6);
    }

    #[test]
    fn deterministic_bits() {
        let p = AllocationProblem::new(
            vec![
                Entry::new("1", sg(3.0, 20.0), 0.0),
                Entry::new("2", sg(1.0, 30.0), 0.0),
                Entry::new("3", lg(3.0, 100.0), 0.0),
            ],
            45.0,
        )
        .unwrap();
        let a = allocate(&p).unwrap();
        let b = allocate(&p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trace_bracket_halves() {
        let p = AllocationProblem::new(
            vec![
                Entry::new("1", sg(5.0, 10.0), 0.0),
                Entry::new("2", lg(15.0, 100.0), 0.0),
            ],
            30.0,
        )
        .unwrap();
        let (a, trace) = allocate_with(&p, &SolverOptions::default()).unwrap();
        assert_eq!(a.iterations, trace.len());
        for w in trace.windows(2) {
            let w0 = w[0].p_hi - w[0].p_lo;
            let w1 = w[1].p_hi - w[1].p_lo;
            assert!((w1 - w0 / 2.0).abs() <= 4.0 * f64::EPSILON * w[0].p_hi);
        }
        assert!(trace.last().unwrap().excess_demand.abs() <= 30.0 * 1e-6);
    }

    #[test]
    fn f32_smoke() {
        let u = UtilityFunction::<f32>::logarithmic(0.5, 100.0).unwrap();
        let v = UtilityFunction::<f32>::sigmoidal(3.0, 20.0).unwrap();
        let p =
            AllocationProblem::new(vec![Entry::new("1", u, 0.0), Entry::new("2", v, 0.0)], 40.0)
                .unwrap();
        let a = allocate(&p).unwrap();
        assert!((a.total() - 40.0).abs() < 1e-3);
    }
}

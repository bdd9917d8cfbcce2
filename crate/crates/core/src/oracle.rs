//! Brute-force reference maximizer for small allocation problems.
//!
//! Enumerates the binding simplex `sum r_i = R` on a uniform grid and then zooms in around the
//! best point. It only evaluates log-utilities; no derivatives or price search are involved, so
//! it can be used to check [`crate::solver::allocate`]. Working in the log domain keeps the
//! objective resolvable when every user sits close to full satisfaction.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::solver::AllocationProblem;

pub const MAX_USERS: usize = 4;

/// Rough cap on grid points visited in the coarse pass.
const COARSE_BUDGET: f64 = 2e6;
/// Each refinement pass divides the spacing by this factor.
const ZOOM: i64 = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec<T> {
    pub step: T,
    pub capacity: T,
}

impl<T: Scalar> GridSpec<T> {
    pub fn new(step: T, capacity: T) -> Result<Self> {
        if !(step > T::zero()) || !(capacity > T::zero()) {
            return Err(Error::InvalidProblem(format!(
                "grid step and capacity must be positive, got step={step}, capacity={capacity}"
            )));
        }
        if capacity / step > lit(1e7) {
            return Err(Error::UnsupportedSize(format!(
                "capacity/step = {} exceeds 1e7",
                capacity / step
            )));
        }
        Ok(Self { step, capacity })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult<T> {
    /// Rates in problem entry order.
    pub rates: Vec<T>,
    pub objective: T,
}

#[derive(Clone, Copy)]
struct Best<T> {
    objective: T,
    // lexicographic position of the point, used to break ties deterministically
    key: u64,
}

fn better<T: Scalar>(
    a: Option<(Best<T>, Vec<T>)>,
    b: Option<(Best<T>, Vec<T>)>,
) -> Option<(Best<T>, Vec<T>)> {
    match (a, b) {
        (None, x) | (x, None) => x,
        (Some(a), Some(b)) => {
            if b.0.objective > a.0.objective
                || (b.0.objective == a.0.objective && b.0.key < a.0.key)
            {
                Some(b)
            } else {
                Some(a)
            }
        }
    }
}

struct Search<'a, T> {
    problem: &'a AllocationProblem<T>,
    capacity: T,
}

impl<T: Scalar> Search<'_, T> {
    fn objective(&self, rates: &[T]) -> T {
        self.problem
            .entries()
            .iter()
            .zip(rates)
            .fold(T::zero(), |acc, (e, &r)| {
                acc + e.utility.log_utility_unchecked(r + e.offset)
            })
    }

    /// Lowest admissible rate for entry `i` on a grid of spacing `h`.
    fn floor(&self, i: usize, h: T) -> T {
        if self.problem.entries()[i].offset > T::zero() {
            T::zero()
        } else {
            h
        }
    }

    /// Visit `center + j * h` for every integer `j` in `[-radius, radius]^(n-1)`, with the last
    /// coordinate absorbing the remaining capacity.
    fn scan(&self, center: &[T], h: T, radius: i64) -> Option<(Best<T>, Vec<T>)> {
        let n = center.len();
        let free = n - 1;
        let width = (2 * radius + 1) as u64;
        let first: Vec<i64> = (-radius..=radius).collect();
        first
            .par_iter()
            .map(|&j0| {
                let mut best: Option<(Best<T>, Vec<T>)> = None;
                let mut idx = vec![-radius; free];
                idx[0] = j0;
                let mut rates = vec![T::zero(); n];
                loop {
                    let mut ok = true;
                    let mut used = T::zero();
                    let mut key = 0u64;
                    for i in 0..free {
                        let r = center[i] + lit::<T>(idx[i] as f64) * h;
                        if r < self.floor(i, h) - h * lit(1e-9) {
                            ok = false;
                        }
                        rates[i] = r.max(T::zero());
                        used = used + rates[i];
                        key = key * width + (idx[i] + radius) as u64;
                    }
                    let last = self.capacity - used;
                    if ok && last >= self.floor(free, h) - h * lit(1e-9) {
                        rates[free] = last.max(T::zero());
                        let obj = self.objective(&rates);
                        if obj.is_finite() {
                            best = better(
                                best,
                                Some((
                                    Best {
                                        objective: obj,
                                        key,
                                    },
                                    rates.clone(),
                                )),
                            );
                        }
                    }
                    // odometer over coordinates 1..free
                    let mut k = free;
                    loop {
                        if k <= 1 {
                            return best;
                        }
                        k -= 1;
                        if idx[k] < radius {
                            idx[k] += 1;
                            break;
                        }
                        idx[k] = -radius;
                    }
                }
            })
            .reduce(|| None, better)
    }
}

/// Grid argmax of `sum_i ln U_i(r_i + C_i)` over `sum r_i = R`, refined down to `step / 100`.
pub fn grid_search_allocate<T: Scalar>(
    problem: &AllocationProblem<T>,
    grid: &GridSpec<T>,
) -> Result<OracleResult<T>> {
    let n = problem.len();
    if n > MAX_USERS {
        return Err(Error::UnsupportedSize(format!(
            "{n} users; the oracle enumerates at most {MAX_USERS}"
        )));
    }
    let capacity = grid.capacity;
    let search = Search { problem, capacity };
    if n == 1 {
        let rates = vec![capacity];
        return Ok(OracleResult {
            objective: search.objective(&rates),
            rates,
        });
    }

    // Coarse pass: uniform grid h = R / cells, anchored at the origin.
    let free = n - 1;
    let factorial: f64 = (1..=free).map(|x| x as f64).product();
    let per_dim = (factorial * COARSE_BUDGET)
        .powf(1.0 / free as f64)
        .floor()
        .max(1.0);
    let wanted = (capacity / grid.step).ceil();
    let cells = wanted.min(lit(per_dim)).max(T::one());
    let mut h = capacity / cells;
    let cells_i = cells.to_i64().unwrap_or(1);
    // Scan [0, cells] around a center of (cells/2) * h on each free coordinate.
    let half = (cells_i + 1) / 2;
    let center = vec![lit::<T>(half as f64) * h; n];
    let (_, mut best) = search
        .scan(&center, h, half)
        .ok_or_else(|| Error::UnsupportedSize("grid too coarse for the capacity".into()))?;

    let finest = grid.step / lit(100.0);
    while h > finest * lit(1.000_001) {
        let next = (h / lit(ZOOM as f64)).max(finest);
        let radius = (lit::<T>(2.0) * h / next)
            .ceil()
            .to_i64()
            .unwrap_or(2 * ZOOM);
        if let Some((_, rates)) = search.scan(&best, next, radius) {
            best = rates;
        }
        h = next;
    }

    Ok(OracleResult {
        objective: search.objective(&best),
        rates: best,
    })
}

//! Cache-budget minimization.
//!
//! The query path is treated as a black box. Two closed forms bound the
//! number of tier-3 transactions per query as a function of the budget: a
//! random-fetch upper bound (linear in the budget) and an optimal-fetch lower
//! bound (`ceil(|Q| / n_mem)`). Starting from the full budget `C_0`, the
//! optimizer probes a budget, draws the line from the observed point to the
//! anchor `(1, n_Q)`, and jumps to where that line meets the threshold `θ`.
//! It stops once a probe exceeds `θ` and keeps the last budget that did not.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Expected transactions per query when every miss loads the item plus
/// `n_mem - 1` random others.
pub fn predict_ndb_random(n_mem: usize, n: usize, q_len: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::invalid("dataset size must be at least 2"));
    }
    if q_len < 1.0 {
        return Err(Error::invalid("query path length must be at least 1"));
    }
    if n_mem >= n {
        return Ok(1.0);
    }
    let n = n as f64;
    Ok((1.0 - q_len) / (n - 1.0) * n_mem as f64 + (n * q_len - 1.0) / (n - 1.0))
}

/// Transactions per query when each fetch loads the next `n_mem` items of
/// the query path.
pub fn predict_ndb_optimal(n_mem: usize, q_len: usize) -> Result<u64> {
    if n_mem == 0 || q_len == 0 {
        return Err(Error::invalid("n_mem and q_len must be at least 1"));
    }
    if n_mem >= q_len {
        return Ok(1);
    }
    Ok(q_len.div_ceil(n_mem) as u64)
}

/// Transaction-count threshold: the larger of the percentage budget
/// `p * T_query` and the absolute budget `T_theta`, both in transactions.
pub fn get_theta(p: f64, t_theta_ms: f64, t_query_ms: f64, t_db_ms: f64) -> Result<f64> {
    if !(t_db_ms > 0.0) {
        return Err(Error::invalid(
            "per-transaction time must be positive; measure at least one transaction",
        ));
    }
    Ok((p * t_query_ms / t_db_ms).max(t_theta_ms / t_db_ms))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerParams {
    pub p: f64,
    pub t_theta_ms: f64,
    /// Starting (maximum) budget in items.
    pub c0: usize,
}

impl OptimizerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::invalid(format!("p = {} outside (0, 1]", self.p)));
        }
        if !(self.t_theta_ms >= 0.0) {
            return Err(Error::invalid("T_theta must be >= 0"));
        }
        if self.c0 == 0 {
            return Err(Error::invalid("C_0 must be >= 1"));
        }
        Ok(())
    }
}

/// Aggregated metrics of one probe workload.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryTestReport {
    /// Mean tier-3 transactions per query.
    pub n_db: f64,
    /// Mean query path length.
    pub n_q: f64,
    pub t_query_ms: f64,
    /// Mean time of one transaction.
    pub t_db_ms: f64,
    pub p99_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub c: usize,
    pub theta: f64,
    pub n_db: f64,
    pub n_q: f64,
    pub t_query_ms: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub c0: usize,
    /// Every probe in order, including the one that tripped the threshold.
    pub probes: Vec<Probe>,
    pub c_best: usize,
    /// Position of the applied budget within [`OptimizerState::accepted`].
    pub current: usize,
    pub terminated: bool,
}

impl OptimizerState {
    /// Probes that met their threshold; their budgets strictly decrease.
    pub fn accepted(&self) -> Vec<Probe> {
        self.probes.iter().copied().filter(|p| p.accepted).collect()
    }

    pub fn current_budget(&self) -> usize {
        self.accepted()
            .get(self.current)
            .map(|p| p.c)
            .unwrap_or(self.c0)
    }

    pub fn report(&self) -> OptimizerReport {
        let saved = self.c0 - self.c_best;
        OptimizerReport {
            rows: self.probes.clone(),
            c0: self.c0,
            c_best: self.c_best,
            saved_items: saved,
            saved_pct: 100.0 * saved as f64 / self.c0 as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerReport {
    pub rows: Vec<Probe>,
    pub c0: usize,
    pub c_best: usize,
    pub saved_items: usize,
    pub saved_pct: f64,
}

/// Runs the secant search. `apply_budget` sets the cache budget that the
/// next `query_test` call measures. On return the applied budget is `c_best`.
pub fn optimize_memory_size<Q, A>(
    params: OptimizerParams,
    mut query_test: Q,
    mut apply_budget: A,
) -> Result<OptimizerState>
where
    Q: FnMut() -> Result<QueryTestReport>,
    A: FnMut(usize) -> Result<()>,
{
    params.validate()?;
    let mut state = OptimizerState {
        c0: params.c0,
        probes: Vec::new(),
        c_best: params.c0,
        current: 0,
        terminated: false,
    };
    let mut c_test = params.c0 as i64;

    while c_test > 0 && c_test <= params.c0 as i64 {
        let c = c_test as usize;
        let probe = apply_budget(c).and_then(|_| {
            let r = query_test()?;
            let theta = get_theta(params.p, params.t_theta_ms, r.t_query_ms, r.t_db_ms)?;
            Ok((r, theta))
        });
        let (r, theta) = match probe {
            Ok(v) => v,
            Err(e) => {
                apply_budget(state.c_best)?;
                return Err(e);
            }
        };
        let accepted = r.n_db <= theta;
        state.probes.push(Probe {
            c,
            theta,
            n_db: r.n_db,
            n_q: r.n_q,
            t_query_ms: r.t_query_ms,
            accepted,
        });
        if !accepted {
            break;
        }
        state.c_best = c;
        state.current = state.probes.iter().filter(|p| p.accepted).count() - 1;

        if c == 1 {
            break;
        }
        let slope = (r.n_q - r.n_db) / (1.0 - c as f64);
        let next = ((theta - r.n_q) / slope + 1.0).ceil();
        // a step that fails to shrink the budget would loop forever
        if !next.is_finite() || next >= c as f64 {
            break;
        }
        c_test = next.max(i64::MIN as f64) as i64;
    }
    state.terminated = true;
    apply_budget(state.c_best)?;
    Ok(state)
}

/// After a live query at the current budget: if its transaction count
/// exceeds the threshold recorded for that budget, step back to the previous
/// accepted budget. Returns the new budget when a rollback happened.
pub fn check_rollback<A>(
    state: &mut OptimizerState,
    live: &QueryTestReport,
    mut apply_budget: A,
) -> Result<Option<usize>>
where
    A: FnMut(usize) -> Result<()>,
{
    let accepted = state.accepted();
    let Some(cur) = accepted.get(state.current) else {
        return Ok(None);
    };
    if live.n_db <= cur.theta || state.current == 0 {
        return Ok(None);
    }
    state.current -= 1;
    let budget = accepted[state.current].c;
    apply_budget(budget)?;
    Ok(Some(budget))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::index::sample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_bound_endpoints() {
        assert_eq!(predict_ndb_random(1000, 1000, 50.0).unwrap(), 1.0);
        assert_eq!(predict_ndb_random(5000, 1000, 50.0).unwrap(), 1.0);
        let at_one = predict_ndb_random(1, 1000, 50.0).unwrap();
        assert!((at_one - 50.0).abs() < 1e-9);
        assert!(predict_ndb_random(1, 1, 5.0).is_err());
    }

    /// Direct simulation of random fetching: memory holds the last missed item
    /// plus `n_mem - 1` uniformly chosen others.
    fn simulate_random(n: usize, q_len: usize, n_mem: usize, trials: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0usize;
        let mut resident = vec![false; n];
        for _ in 0..trials {
            // path of distinct consecutive items
            let mut prev = rng.gen_range(0..n);
            let mut loaded: Vec<usize> = Vec::new();
            let mut load = |d: usize, rng: &mut ChaCha8Rng, resident: &mut Vec<bool>| {
                for i in loaded.drain(..) {
                    resident[i] = false;
                }
                resident[d] = true;
                loaded.push(d);
                if n_mem >= n {
                    resident.iter_mut().for_each(|r| *r = true);
                    loaded.extend(0..n);
                    return;
                }
                for other in sample(rng, n - 1, n_mem - 1) {
                    let o = if other >= d { other + 1 } else { other };
                    resident[o] = true;
                    loaded.push(o);
                }
            };
            load(prev, &mut rng, &mut resident);
            let mut n_db = 1;
            for _ in 1..q_len {
                let mut d = rng.gen_range(0..n - 1);
                if d >= prev {
                    d += 1;
                }
                if !resident[d] {
                    n_db += 1;
                    load(d, &mut rng, &mut resident);
                }
                prev = d;
            }
            for r in resident.iter_mut() {
                *r = false;
            }
            total += n_db;
        }
        total as f64 / trials as f64
    }

    #[test]
    fn random_bound_matches_monte_carlo() {
        let (n, q) = (1000, 50);
        for n_mem in [1, 500, 1000] {
            let sim = simulate_random(n, q, n_mem, 2000, n_mem as u64);
            let f = predict_ndb_random(n_mem, n, q as f64).unwrap();
            assert!((sim - f).abs() / f < 0.03, "n_mem={n_mem}: {sim} vs {f}");
        }
    }

    #[test]
    fn optimal_bound() {
        assert_eq!(predict_ndb_optimal(30, 100).unwrap(), 4);
        assert_eq!(predict_ndb_optimal(100, 100).unwrap(), 1);
        assert!(predict_ndb_optimal(0, 10).is_err());
    }

    /// Replays a recorded path through a prefetcher that, on a miss, loads
    /// the next `window` path items.
    fn replay_optimal(path: &[u64], window: usize) -> u64 {
        let mut resident: std::collections::HashSet<u64> = Default::default();
        let mut n_db = 0;
        for (i, item) in path.iter().enumerate() {
            if !resident.contains(item) {
                n_db += 1;
                resident = path[i..(i + window).min(path.len())].iter().copied().collect();
            }
        }
        n_db
    }

    #[test]
    fn optimal_bound_matches_replay() {
        let path: Vec<u64> = (0..200).map(|i| i * 7919 % 10007).collect();
        for n_mem in 1..=200 {
            assert_eq!(
                replay_optimal(&path, n_mem),
                predict_ndb_optimal(n_mem, 200).unwrap(),
                "n_mem={n_mem}"
            );
        }
    }

    #[test]
    fn theta_cases() {
        assert_eq!(get_theta(0.8, 100.0, 100.0, 10.0).unwrap(), 10.0);
        assert_eq!(get_theta(1.0, 0.0, 37.0, 2.0).unwrap(), 18.5);
        assert_eq!(get_theta(1e-9, 50.0, 10.0, 5.0).unwrap(), 10.0);
        assert!(get_theta(0.8, 100.0, 100.0, 0.0).is_err());
    }

    #[test]
    fn theta_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let (p, tt, tq, td) = (
                rng.gen_range(0.01..1.0),
                rng.gen_range(0.0..200.0),
                rng.gen_range(0.0..500.0),
                rng.gen_range(0.1..20.0),
            );
            let base = get_theta(p, tt, tq, td).unwrap();
            assert!(get_theta((p + 0.1).min(1.0), tt, tq, td).unwrap() >= base);
            assert!(get_theta(p, tt + 1.0, tq, td).unwrap() >= base);
            assert!(get_theta(p, tt, tq + 1.0, td).unwrap() >= base);
        }
    }

    /// Black box whose `n_db` follows `curve(budget)`; `θ` pinned through
    /// `T_theta` with `t_db = 1` and a tiny `p`.
    fn synthetic(
        curve: impl Fn(usize) -> f64,
        q_len: f64,
        c0: usize,
        theta: f64,
    ) -> Result<OptimizerState> {
        let budget = std::cell::Cell::new(c0);
        optimize_memory_size(
            OptimizerParams {
                p: 1e-9,
                t_theta_ms: theta,
                c0,
            },
            || {
                let n_db = curve(budget.get());
                Ok(QueryTestReport {
                    n_db,
                    n_q: q_len,
                    t_query_ms: n_db,
                    t_db_ms: 1.0,
                    p99_ms: n_db,
                })
            },
            |c| {
                budget.set(c);
                Ok(())
            },
        )
    }

    #[test]
    fn above_threshold_at_c0_keeps_c0() {
        let s = synthetic(|_| 50.0, 200.0, 1000, 10.0).unwrap();
        assert_eq!(s.c_best, 1000);
        assert_eq!(s.probes.len(), 1);
        assert!(!s.probes[0].accepted);
    }

    #[test]
    fn ceil_curve_lands_under_threshold() {
        let s = synthetic(|c| (200.0 / c as f64).ceil(), 200.0, 1000, 10.0).unwrap();
        let best = s.probes.iter().find(|p| p.c == s.c_best).unwrap();
        assert!(best.n_db <= 10.0);
        assert!(s.probes.windows(2).all(|w| w[1].c < w[0].c));
        assert!(s.terminated);
    }

    #[test]
    fn cliff_curve_stays_on_the_flat() {
        let s = synthetic(|c| if c >= 600 { 1.0 } else { 200.0 }, 200.0, 1000, 10.0).unwrap();
        assert!(s.c_best >= 600);
        assert!(!s.probes.last().unwrap().accepted);
    }

    #[test]
    fn failing_probe_restores_best_budget() {
        let applied = std::cell::RefCell::new(Vec::new());
        let calls = std::cell::Cell::new(0);
        let err = optimize_memory_size(
            OptimizerParams {
                p: 0.5,
                t_theta_ms: 10.0,
                c0: 100,
            },
            || {
                calls.set(calls.get() + 1);
                if calls.get() == 2 {
                    return Err(Error::Storage("probe failed".into()));
                }
                Ok(QueryTestReport {
                    n_db: 1.0,
                    n_q: 50.0,
                    t_query_ms: 5.0,
                    t_db_ms: 1.0,
                    p99_ms: 5.0,
                })
            },
            |c| {
                applied.borrow_mut().push(c);
                Ok(())
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Storage(_)));
        assert_eq!(*applied.borrow().last().unwrap(), 100);
    }

    #[test]
    fn rollback_walks_back_to_c0() {
        let mut s = synthetic(|c| (200.0 / c as f64).ceil(), 200.0, 1000, 10.0).unwrap();
        let accepted = s.accepted();
        assert!(accepted.len() >= 3);
        let calm = QueryTestReport {
            n_db: 1.0,
            ..Default::default()
        };
        assert_eq!(check_rollback(&mut s, &calm, |_| Ok(())).unwrap(), None);
        let storm = QueryTestReport {
            n_db: 1e9,
            ..Default::default()
        };
        let mut walked = Vec::new();
        while let Some(b) = check_rollback(&mut s, &storm, |_| Ok(())).unwrap() {
            walked.push(b);
        }
        let expected: Vec<usize> = accepted.iter().rev().skip(1).map(|p| p.c).collect();
        assert_eq!(walked, expected);
        assert_eq!(s.current_budget(), 1000);
    }

    #[test]
    fn params_validation() {
        let ok = OptimizerParams {
            p: 0.8,
            t_theta_ms: 100.0,
            c0: 10,
        };
        assert!(ok.validate().is_ok());
        assert!(OptimizerParams { p: 0.0, ..ok }.validate().is_err());
        assert!(OptimizerParams { p: 1.5, ..ok }.validate().is_err());
        assert!(OptimizerParams { c0: 0, ..ok }.validate().is_err());
    }
}

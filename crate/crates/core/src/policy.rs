//! Multiple-choice knapsack: pick one option per layer minimizing total
//! quality loss subject to a minimum efficiency, optionally per contiguous
//! layer group.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SnipError};

/// Absolute slack on the efficiency constraint.
pub const FEASIBILITY_TOL: f64 = 1e-9;

pub const DEFAULT_TIME_LIMIT: Duration = Duration::from_secs(30);

const BRUTE_FORCE_LIMIT: f64 = 1e7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlpInstance {
    /// `q[i][j]`: quality loss of option `j` on layer `i`.
    pub q: Vec<Vec<f64>>,
    /// `e[i][j]`: efficiency gain of option `j` on layer `i`.
    pub e: Vec<Vec<f64>>,
    pub e_t: f64,
    /// Sizes of contiguous layer groups, in order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlpSolution {
    pub choice: Vec<usize>,
    pub total_q: f64,
    pub total_e: f64,
    /// False when the time limit stopped the search before optimality was
    /// proven.
    pub optimal: bool,
}

/// Sum in layer order; every solver uses this so totals compare exactly.
fn totals(q: &[Vec<f64>], e: &[Vec<f64>], choice: &[usize]) -> (f64, f64) {
    choice
        .iter()
        .enumerate()
        .fold((0.0, 0.0), |(tq, te), (i, &j)| (tq + q[i][j], te + e[i][j]))
}

fn meets(total_e: f64, target: f64) -> bool {
    total_e >= target - FEASIBILITY_TOL
}

impl IlpInstance {
    pub fn new(q: Vec<Vec<f64>>, e: Vec<Vec<f64>>, e_t: f64) -> Result<Self> {
        let inst = Self { q, e, e_t, groups: None };
        inst.validate()?;
        Ok(inst)
    }

    pub fn with_groups(mut self, sizes: Vec<usize>) -> Result<Self> {
        self.groups = Some(sizes);
        self.validate()?;
        Ok(self)
    }

    pub fn m(&self) -> usize {
        self.q.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.q.is_empty() || self.q.len() != self.e.len() {
            return Err(invalid("q and e must list the same, nonzero number of layers"));
        }
        for (i, (qi, ei)) in self.q.iter().zip(&self.e).enumerate() {
            if qi.is_empty() || qi.len() != ei.len() {
                return Err(invalid(format!("layer {i} needs matching, nonempty q and e rows")));
            }
            if qi.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(invalid(format!("layer {i} has a negative or non-finite q")));
            }
            if ei.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(invalid(format!("layer {i} has an e outside [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.e_t) {
            return Err(invalid(format!("E_t must lie in [0, 1], got {}", self.e_t)));
        }
        if let Some(g) = &self.groups {
            if g.is_empty() || g.contains(&0) || g.iter().sum::<usize>() != self.m() {
                return Err(invalid("groups must be nonempty and partition the layers"));
            }
        }
        Ok(())
    }

    fn max_e(&self) -> f64 {
        self.e.iter().map(|r| r.iter().cloned().fold(0.0, f64::max)).sum()
    }

    fn check_feasible(&self, group: Option<usize>) -> Result<()> {
        let max = self.max_e();
        if meets(max, self.e_t) {
            Ok(())
        } else {
            Err(SnipError::Infeasible {
                target: self.e_t,
                max_achievable: max,
                group,
            })
        }
    }

    fn sub(&self, start: usize, len: usize, e_t: f64) -> IlpInstance {
        IlpInstance {
            q: self.q[start..start + len].to_vec(),
            e: self.e[start..start + len].to_vec(),
            e_t,
            groups: None,
        }
    }

    pub fn solution_for(&self, choice: Vec<usize>, optimal: bool) -> IlpSolution {
        let (total_q, total_e) = totals(&self.q, &self.e, &choice);
        IlpSolution {
            choice,
            total_q,
            total_e,
            optimal,
        }
    }
}

/// Sizes of `k` contiguous groups over `m` layers, as even as possible with
/// larger groups first.
pub fn contiguous_groups(m: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > m {
        return Err(invalid(format!("cannot split {m} layers into {k} groups")));
    }
    Ok((0..k).map(|g| m / k + usize::from(g < m % k)).collect())
}

/// Lower convex hull of a layer's `(e, q)` points starting at its cheapest
/// option, as `(Δe, Δq)` segments of increasing slope.
fn hull_segments(q: &[f64], e: &[f64]) -> (f64, f64, Vec<(f64, f64)>) {
    let mut base = 0;
    for j in 1..q.len() {
        if q[j] < q[base] || (q[j] == q[base] && e[j] > e[base]) {
            base = j;
        }
    }
    let mut pts: Vec<(f64, f64)> = (0..q.len()).filter(|&j| e[j] > e[base]).map(|j| (e[j], q[j])).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut hull: Vec<(f64, f64)> = vec![(e[base], q[base])];
    for p in pts {
        if hull.last().map(|h| h.0 == p.0).unwrap_or(false) {
            continue;
        }
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    let segs = hull.windows(2).map(|w| (w[1].0 - w[0].0, w[1].1 - w[0].1)).collect();
    (e[base], q[base], segs)
}

struct Bounds {
    base_q: Vec<f64>,
    base_e: Vec<f64>,
    max_e: Vec<f64>,
    /// Segments of layers `r..m`, sorted by slope.
    segs: Vec<Vec<(f64, f64)>>,
}

impl Bounds {
    fn new(inst: &IlpInstance) -> Self {
        let m = inst.m();
        let hulls: Vec<_> = (0..m).map(|i| hull_segments(&inst.q[i], &inst.e[i])).collect();
        let mut base_q = vec![0.0; m + 1];
        let mut base_e = vec![0.0; m + 1];
        let mut max_e = vec![0.0; m + 1];
        let mut segs = vec![Vec::new(); m + 1];
        for r in (0..m).rev() {
            base_q[r] = base_q[r + 1] + hulls[r].1;
            base_e[r] = base_e[r + 1] + hulls[r].0;
            max_e[r] = max_e[r + 1] + inst.e[r].iter().cloned().fold(0.0, f64::max);
            let mut s = segs[r + 1].clone();
            s.extend(hulls[r].2.iter().cloned());
            s.sort_by(|a: &(f64, f64), b| (a.1 * b.0).total_cmp(&(b.1 * a.0)));
            segs[r] = s;
        }
        Self {
            base_q,
            base_e,
            max_e,
            segs,
        }
    }

    /// Lower bound on the cost of layers `r..` that add at least `need`
    /// efficiency; `None` when unreachable.
    fn bound(&self, r: usize, need: f64) -> Option<f64> {
        if self.max_e[r] < need - FEASIBILITY_TOL {
            return None;
        }
        let mut rest = need - self.base_e[r];
        let mut cost = self.base_q[r];
        for &(de, dq) in &self.segs[r] {
            if rest <= 0.0 {
                break;
            }
            let take = (rest / de).min(1.0);
            cost += take * dq;
            rest -= take * de;
        }
        Some(cost)
    }
}

struct Search<'a> {
    inst: &'a IlpInstance,
    bounds: Bounds,
    best: Option<(f64, Vec<usize>)>,
    current: Vec<usize>,
    nodes: u64,
    deadline: Instant,
    timed_out: bool,
}

impl Search<'_> {
    fn dfs(&mut self, r: usize, q_acc: f64, e_acc: f64) {
        if self.timed_out {
            return;
        }
        self.nodes += 1;
        if self.nodes % 1024 == 0 && Instant::now() >= self.deadline {
            self.timed_out = true;
            return;
        }
        let m = self.inst.m();
        if r == m {
            if meets(e_acc, self.inst.e_t) {
                let (tq, _) = totals(&self.inst.q, &self.inst.e, &self.current);
                if self.best.as_ref().map(|b| tq < b.0).unwrap_or(true) {
                    self.best = Some((tq, self.current.clone()));
                }
            }
            return;
        }
        for j in 0..self.inst.q[r].len() {
            let q = q_acc + self.inst.q[r][j];
            let e = e_acc + self.inst.e[r][j];
            let Some(rest) = self.bounds.bound(r + 1, self.inst.e_t - e) else {
                continue;
            };
            if let Some((best, _)) = &self.best {
                if q + rest > best + 1e-12 * (1.0 + best.abs()) {
                    continue;
                }
            }
            self.current.push(j);
            self.dfs(r + 1, q, e);
            self.current.pop();
        }
    }
}

/// Exact branch-and-bound with a linear-relaxation bound. Among equal-cost
/// optima the lexicographically smallest choice vector wins.
pub fn solve(inst: &IlpInstance, time_limit: Duration) -> Result<IlpSolution> {
    solve_single(inst, time_limit, None)
}

fn solve_single(inst: &IlpInstance, time_limit: Duration, group: Option<usize>) -> Result<IlpSolution> {
    inst.validate()?;
    inst.check_feasible(group)?;
    let mut s = Search {
        inst,
        bounds: Bounds::new(inst),
        best: None,
        current: Vec::with_capacity(inst.m()),
        nodes: 0,
        deadline: Instant::now() + time_limit,
        timed_out: false,
    };
    s.dfs(0, 0.0, 0.0);
    let optimal = !s.timed_out;
    let choice = match s.best {
        Some((_, c)) => c,
        None => {
            log::warn!("ILP time limit hit before any incumbent; using the maximum-efficiency assignment");
            inst.e
                .iter()
                .map(|row| {
                    (0..row.len())
                        .fold(0, |b, j| if row[j] > row[b] { j } else { b })
                })
                .collect()
        }
    };
    Ok(inst.solution_for(choice, optimal))
}

/// Solves each group independently against `E_t/K`. The global constraint
/// is implied by the per-group ones.
pub fn solve_grouped(inst: &IlpInstance, time_limit: Duration) -> Result<IlpSolution> {
    inst.validate()?;
    let sizes = match &inst.groups {
        None => return solve(inst, time_limit),
        Some(g) => g.clone(),
    };
    let k = sizes.len() as f64;
    let mut starts = Vec::with_capacity(sizes.len());
    let mut acc = 0;
    for s in &sizes {
        starts.push(acc);
        acc += s;
    }
    let subs: Vec<IlpInstance> = starts
        .iter()
        .zip(&sizes)
        .map(|(&s, &len)| inst.sub(s, len, inst.e_t / k))
        .collect();
    let results: Vec<Result<IlpSolution>> = std::thread::scope(|scope| {
        let handles: Vec<_> = subs
            .iter()
            .enumerate()
            .map(|(g, sub)| scope.spawn(move || solve_single(sub, time_limit, Some(g))))
            .collect();
        handles.into_iter().map(|h| h.join().expect("solver thread panicked")).collect()
    });
    let mut choice = Vec::with_capacity(inst.m());
    let mut optimal = true;
    for r in results {
        let r = r?;
        optimal &= r.optimal;
        choice.extend(r.choice);
    }
    Ok(inst.solution_for(choice, optimal))
}

/// Exhaustive enumeration in lexicographic order; refuses instances with
/// more than 10⁷ assignments.
pub fn brute_force(inst: &IlpInstance) -> Result<IlpSolution> {
    inst.validate()?;
    let count: f64 = inst.q.iter().map(|r| r.len() as f64).product();
    if count > BRUTE_FORCE_LIMIT {
        return Err(SnipError::TooLarge(format!("{count} assignments exceed {BRUTE_FORCE_LIMIT}")));
    }
    inst.check_feasible(None)?;
    let m = inst.m();
    let mut choice = vec![0usize; m];
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        let (tq, te) = totals(&inst.q, &inst.e, &choice);
        if meets(te, inst.e_t) && best.as_ref().map(|b| tq < b.0).unwrap_or(true) {
            best = Some((tq, choice.clone()));
        }
        let mut i = m;
        loop {
            if i == 0 {
                let (_, c) = best.expect("feasibility checked");
                return Ok(inst.solution_for(c, true));
            }
            i -= 1;
            choice[i] += 1;
            if choice[i] < inst.q[i].len() {
                break;
            }
            choice[i] = 0;
        }
    }
}

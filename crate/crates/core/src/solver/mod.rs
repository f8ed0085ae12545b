//! Exact input-space margins: for a correctly classified point `x` with
//! predicted class `i`, the distance to the nearest point where `f[i]`
//! ties with some other logit `f[j]`, minimized over `j`.

mod pair;

use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, check_pair, Classifier};
use crate::error::{Error, Result};
use crate::model::kernel;

pub use pair::{PairOutcome, PairSolver};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestartPolicy {
    None,
    BisectionSeed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// A boundary point counts as valid when `|f[i] - f[j]|` is at most this.
    pub validity_threshold: f64,
    pub inner_max_iters: usize,
    pub outer_max_iters: usize,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub multiplier_init: f64,
    /// Step-size tolerance of the inner minimizer; also the relative
    /// distance change below which the outer loop may stop.
    pub convergence_tol: f64,
    /// The outer loop stops once the constraint residual is at most this
    /// and the distance has settled.
    pub feasibility_tol: f64,
    pub restart_policy: RestartPolicy,
    /// Slack allowed above the bisection bound before a restart.
    pub sandwich_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            validity_threshold: 1e-3,
            inner_max_iters: 500,
            outer_max_iters: 50,
            penalty_init: 10.0,
            penalty_growth: 2.0,
            multiplier_init: 0.0,
            convergence_tol: 1e-7,
            feasibility_tol: 1e-6,
            restart_policy: RestartPolicy::BisectionSeed,
            sandwich_tol: 1e-4,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(format!("solver: {what}")));
        if !(self.validity_threshold > 0.0) {
            return bad("validity_threshold must be > 0");
        }
        if !(self.penalty_growth > 1.0) {
            return bad("penalty_growth must be > 1");
        }
        if !(self.penalty_init > 0.0) {
            return bad("penalty_init must be > 0");
        }
        if self.inner_max_iters == 0 || self.outer_max_iters == 0 {
            return bad("iteration budgets must be >= 1");
        }
        if !(self.convergence_tol > 0.0) || !(self.feasibility_tol > 0.0) || !(self.sandwich_tol >= 0.0) {
            return bad("tolerances must be positive");
        }
        if !self.multiplier_init.is_finite() {
            return bad("multiplier_init must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStatus {
    Valid,
    InvalidResidual,
    NonFinite,
    /// Valid residual, but a third class beats both `i` and `j` at the point.
    Dominated,
}

impl PairStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            PairStatus::Valid => "valid",
            PairStatus::InvalidResidual => "invalid_residual",
            PairStatus::NonFinite => "non_finite",
            PairStatus::Dominated => "dominated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginStatus {
    Valid,
    NoPairConverged,
}

impl MarginStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            MarginStatus::Valid => "valid",
            MarginStatus::NoPairConverged => "no_pair_converged",
        }
    }
}

/// One class-pair problem: nearest point to `anchor` where `f[i] = f[j]`.
#[derive(Debug, Clone, Copy)]
pub struct CmpProblem<'a> {
    pub anchor: &'a [f64],
    pub i: usize,
    pub j: usize,
    /// Defaults to the anchor.
    pub start: Option<&'a [f64]>,
}

impl<'a> CmpProblem<'a> {
    /// Builds the problem for `x` against class `j`, with `i` the predicted
    /// class of `x`.
    pub fn new(model: &impl Classifier, x: &'a [f64], j: usize) -> Result<Self> {
        if x.len() != model.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.input_dim(),
                found: x.len(),
            });
        }
        let i = model.predict(x);
        check_pair(model.num_classes(), i, j)?;
        Ok(CmpProblem { anchor: x, i, j, start: None })
    }
}

/// Per-pair record kept in a [`MarginResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDiagnostics {
    pub j: usize,
    pub distance: f64,
    pub residual: f64,
    pub status: PairStatus,
    pub evaluations: usize,
    pub inner_iterations: usize,
    pub outer_iterations: usize,
    /// The class that beat both `i` and `j` at the solution, if any.
    pub dominated_by: Option<usize>,
    /// True when this entry comes from the restart at the bisection crossing.
    pub restarted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginResult {
    pub sample_id: u64,
    pub i: usize,
    pub j_star: Option<usize>,
    pub margin: Option<f64>,
    pub boundary_point: Option<Vec<f64>>,
    pub residual: Option<f64>,
    pub status: MarginStatus,
    pub pairs: Vec<PairDiagnostics>,
    /// Bisection bound toward the reference sample, when one was given.
    pub upper_bound: Option<f64>,
}

impl MarginResult {
    /// Picks the nearest valid pair, the lower `j` on ties. The boundary
    /// point is left empty since diagnostics do not carry it.
    pub fn from_pairs(sample_id: u64, i: usize, pairs: Vec<PairDiagnostics>, upper_bound: Option<f64>) -> Self {
        let best = pairs
            .iter()
            .filter(|p| p.status == PairStatus::Valid)
            .min_by(|a, b| a.distance.total_cmp(&b.distance).then(a.j.cmp(&b.j)));
        let (j_star, margin, residual, status) = match best {
            Some(b) => (Some(b.j), Some(b.distance), Some(b.residual), MarginStatus::Valid),
            None => (None, None, None, MarginStatus::NoPairConverged),
        };
        MarginResult {
            sample_id,
            i,
            j_star,
            margin,
            boundary_point: None,
            residual,
            status,
            pairs,
            upper_bound,
        }
    }

    pub fn evaluations(&self) -> usize {
        self.pairs.iter().map(|p| p.evaluations).sum()
    }
}

/// Number of problems stepped together per batched model evaluation.
pub const SOLVE_WINDOW: usize = 64;

/// Runs every problem to completion. Up to [`SOLVE_WINDOW`] problems are
/// stepped together, one batched model evaluation per step, and finished
/// problems are replaced from the queue. Batching never changes a result.
pub fn solve_pairs<C: Classifier + ?Sized>(model: &C, problems: &[CmpProblem<'_>], cfg: &SolverConfig) -> Vec<PairOutcome> {
    let classes = model.num_classes();
    let start = |p: &CmpProblem| PairSolver::new(p.anchor, p.start.unwrap_or(p.anchor), p.i, p.j, classes, cfg);
    let mut outcomes: Vec<Option<PairOutcome>> = vec![None; problems.len()];
    let mut queue = problems.iter().enumerate();
    let mut active: Vec<(usize, PairSolver)> = queue.by_ref().take(SOLVE_WINDOW).map(|(k, p)| (k, start(p))).collect();
    while !active.is_empty() {
        let mut queries: Vec<_> = active.iter_mut().filter_map(|(_, s)| s.query()).collect();
        model.evaluate_batch(&mut queries);
        drop(queries);
        for (_, s) in active.iter_mut() {
            s.tell(cfg);
        }
        let mut k = 0;
        while k < active.len() {
            if active[k].1.is_done() {
                let (slot, solver) = active.swap_remove(k);
                outcomes[slot] = Some(solver.into_outcome());
                if let Some((next, p)) = queue.next() {
                    active.push((next, start(p)));
                }
            } else {
                k += 1;
            }
        }
    }
    outcomes
        .into_iter()
        .map(|o| o.expect("every problem runs to completion"))
        .collect()
}

/// Solves a single class-pair problem.
pub fn solve_pair<C: Classifier + ?Sized>(model: &C, problem: &CmpProblem<'_>, cfg: &SolverConfig) -> PairOutcome {
    solve_pairs(model, std::slice::from_ref(problem), cfg)
        .pop()
        .expect("one problem in, one outcome out")
}

/// A point where the predicted class changes along a segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Crossing {
    /// Distance from the segment start to `outside`.
    pub distance: f64,
    /// Last point found with the start's predicted class.
    pub inside: Vec<f64>,
    /// First point found with a different predicted class.
    pub outside: Vec<f64>,
    pub outside_class: usize,
}

/// Segment-length precision of [`bisection_upper_bound`].
pub const BISECTION_PRECISION: f64 = 1e-6;
const BISECTION_MAX_ITERS: usize = 60;

/// Bisects the segment from `x` to `other` for a change of predicted class.
/// The returned distance bounds the margin of `x` from above.
pub fn bisection_upper_bound<C: Classifier + ?Sized>(model: &C, x: &[f64], other: &[f64]) -> Result<Crossing> {
    if x.len() != model.input_dim() || other.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            found: if x.len() != model.input_dim() { x.len() } else { other.len() },
        });
    }
    let class = model.predict(x);
    let other_class = model.predict(other);
    if class == other_class {
        return Err(Error::Inconsistent(format!(
            "bisection endpoints share predicted class {class}"
        )));
    }
    let length = kernel::dist_sq(x, other).sqrt();
    let point = |t: f64| -> Vec<f64> { x.iter().zip(other).map(|(a, b)| t.mul_add(b - a, *a)).collect() };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut hi_class = other_class;
    let mut iters = 0;
    while (hi - lo) * length > BISECTION_PRECISION && iters < BISECTION_MAX_ITERS {
        let mid = 0.5 * (lo + hi);
        let c = model.predict(&point(mid));
        if c == class {
            lo = mid;
        } else {
            hi = mid;
            hi_class = c;
        }
        iters += 1;
    }
    let inside = if lo == 0.0 { x.to_vec() } else { point(lo) };
    let outside = if hi == 1.0 { other.to_vec() } else { point(hi) };
    Ok(Crossing {
        distance: kernel::dist_sq(x, &outside).sqrt(),
        inside,
        outside,
        outside_class: hi_class,
    })
}

/// A sample whose margin is wanted.
#[derive(Debug, Clone, Copy)]
pub struct MarginTask<'a> {
    pub sample_id: u64,
    pub x: &'a [f64],
    /// A differently predicted point (the nearest correctly classified
    /// different-label sample) used for the bisection bound and restart.
    pub reference: Option<&'a [f64]>,
}

/// Computes margins for several samples, sharing batched evaluations
/// across all of their class pairs. Results follow task order and do not
/// depend on how tasks are grouped.
pub fn solve_margins<C: Classifier + ?Sized>(model: &C, tasks: &[MarginTask<'_>], cfg: &SolverConfig) -> Result<Vec<MarginResult>> {
    let classes = model.num_classes();
    let mut problems = Vec::with_capacity(tasks.len() * classes.saturating_sub(1));
    let mut predicted = Vec::with_capacity(tasks.len());
    for t in tasks {
        if t.x.len() != model.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.input_dim(),
                found: t.x.len(),
            });
        }
        let i = model.predict(t.x);
        predicted.push(i);
        problems.extend((0..classes).filter(|&j| j != i).map(|j| CmpProblem {
            anchor: t.x,
            i,
            j,
            start: None,
        }));
    }
    let mut outcomes = solve_pairs(model, &problems, cfg).into_iter();
    let mut per_task: Vec<Vec<(PairOutcome, bool)>> = tasks
        .iter()
        .map(|_| outcomes.by_ref().take(classes - 1).map(|o| (o, false)).collect())
        .collect();

    let mut bounds: Vec<Option<Crossing>> = vec![None; tasks.len()];
    if cfg.restart_policy == RestartPolicy::BisectionSeed {
        let mut restarts = Vec::new();
        for (k, t) in tasks.iter().enumerate() {
            let Some(reference) = t.reference else { continue };
            let crossing = bisection_upper_bound(model, t.x, reference)?;
            let current = assemble(t.sample_id, predicted[k], &per_task[k], cfg);
            let violated = match current.margin {
                Some(m) => m > crossing.distance + cfg.sandwich_tol,
                None => true,
            };
            if violated {
                restarts.push(k);
            }
            bounds[k] = Some(crossing);
        }
        let seeds: Vec<Vec<f64>> = restarts
            .iter()
            .map(|&k| {
                let c = bounds[k].as_ref().expect("bound computed for every restart");
                c.inside.iter().zip(&c.outside).map(|(a, b)| 0.5 * (a + b)).collect()
            })
            .collect();
        let problems: Vec<CmpProblem> = restarts
            .iter()
            .zip(&seeds)
            .map(|(&k, seed)| CmpProblem {
                anchor: tasks[k].x,
                i: predicted[k],
                j: bounds[k].as_ref().expect("bound computed").outside_class,
                start: Some(seed),
            })
            .collect();
        let restarted = solve_pairs(model, &problems, cfg);
        for (&k, outcome) in restarts.iter().zip(restarted) {
            let crossing = bounds[k].as_ref().expect("bound computed");
            let outcome = bounded_by_crossing(model, tasks[k].x, predicted[k], outcome, crossing, cfg);
            let slot = per_task[k]
                .iter_mut()
                .find(|(o, _)| o.j == outcome.j)
                .expect("restart class is one of the candidate pairs");
            let keep_old = slot.0.status == PairStatus::Valid
                && dominating_class(&slot.0, cfg).is_none()
                && slot.0.distance <= outcome.distance;
            if !keep_old {
                let evaluations = slot.0.evaluations + outcome.evaluations;
                *slot = (PairOutcome { evaluations, ..outcome }, true);
            }
        }
    }

    Ok(per_task
        .iter()
        .enumerate()
        .map(|(k, outs)| {
            let mut r = assemble(tasks[k].sample_id, predicted[k], outs, cfg);
            r.upper_bound = bounds[k].as_ref().map(|c| c.distance);
            r
        })
        .collect())
}

/// Computes the margin of one sample.
pub fn solve_margin<C: Classifier + ?Sized>(
    model: &C,
    sample_id: u64,
    x: &[f64],
    reference: Option<&[f64]>,
    cfg: &SolverConfig,
) -> Result<MarginResult> {
    let task = MarginTask { sample_id, x, reference };
    Ok(solve_margins(model, &[task], cfg)?.pop().expect("one task in, one result out"))
}

/// A restarted solve that ends farther away than the crossing it started
/// from falls back to the crossing itself, which lies on the boundary to
/// within the bisection precision.
fn bounded_by_crossing<C: Classifier + ?Sized>(
    model: &C,
    x: &[f64],
    i: usize,
    outcome: PairOutcome,
    crossing: &Crossing,
    cfg: &SolverConfig,
) -> PairOutcome {
    let usable = outcome.status == PairStatus::Valid && dominating_class(&outcome, cfg).is_none();
    if usable && outcome.distance <= crossing.distance {
        return outcome;
    }
    let logits = model.logits(&crossing.outside);
    let residual = (logits[i] - logits[outcome.j]).abs();
    let fallback = PairOutcome {
        point: crossing.outside.clone(),
        distance: kernel::dist_sq(x, &crossing.outside).sqrt(),
        residual,
        status: if residual <= cfg.validity_threshold {
            PairStatus::Valid
        } else {
            PairStatus::InvalidResidual
        },
        logits,
        ..outcome.clone()
    };
    if fallback.status == PairStatus::Valid && dominating_class(&fallback, cfg).is_none() {
        fallback
    } else {
        outcome
    }
}

/// The class, other than the pair itself, whose logit exceeds both pair
/// logits by more than the validity threshold at the solution.
fn dominating_class(o: &PairOutcome, cfg: &SolverConfig) -> Option<usize> {
    let top = o.logits[o.i].max(o.logits[o.j]);
    let k = argmax(&o.logits);
    (k != o.i && k != o.j && o.logits[k] > top + cfg.validity_threshold).then_some(k)
}

fn assemble(sample_id: u64, i: usize, outcomes: &[(PairOutcome, bool)], cfg: &SolverConfig) -> MarginResult {
    let pairs: Vec<PairDiagnostics> = outcomes
        .iter()
        .map(|(o, restarted)| {
            let mut status = o.status;
            let mut dominated_by = None;
            if status == PairStatus::Valid {
                dominated_by = dominating_class(o, cfg);
                if dominated_by.is_some() {
                    status = PairStatus::Dominated;
                }
            }
            PairDiagnostics {
                j: o.j,
                distance: o.distance,
                residual: o.residual,
                status,
                evaluations: o.evaluations,
                inner_iterations: o.inner_iterations,
                outer_iterations: o.outer_iterations,
                dominated_by,
                restarted: *restarted,
            }
        })
        .collect();
    let mut r = MarginResult::from_pairs(sample_id, i, pairs, None);
    if let Some(j) = r.j_star {
        let best = outcomes.iter().find(|(o, _)| o.j == j).expect("winning pair exists");
        r.boundary_point = Some(best.0.point.clone());
    }
    r
}

//! One class-pair problem solved by an augmented-Lagrangian outer loop with
//! an L-BFGS inner minimizer. Written as an ask/tell state machine so many
//! problems can share batched model evaluations.

use std::collections::VecDeque;

use super::{PairStatus, SolverConfig};
use crate::classifier::PairQuery;
use crate::model::kernel;

const HISTORY: usize = 8;
const ARMIJO: f64 = 1e-4;
const REPAIR_STEPS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Initial,
    LineSearch,
    Polish,
    Repair,
    Done,
}

/// Raw outcome of one pair solve.
#[derive(Debug, Clone, PartialEq)]
pub struct PairOutcome {
    pub i: usize,
    pub j: usize,
    pub point: Vec<f64>,
    pub logits: Vec<f64>,
    pub distance: f64,
    pub residual: f64,
    pub status: PairStatus,
    pub evaluations: usize,
    pub inner_iterations: usize,
    pub outer_iterations: usize,
}

struct Memory {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

pub struct PairSolver {
    anchor: Vec<f64>,
    i: usize,
    j: usize,
    from_anchor: bool,
    lambda: f64,
    penalty: f64,

    y: Vec<f64>,
    g: f64,
    grad_g: Vec<f64>,
    logits: Vec<f64>,
    value: f64,
    grad: Vec<f64>,

    trial: Vec<f64>,
    trial_logits: Vec<f64>,
    trial_grad_g: Vec<f64>,
    trial_grad: Vec<f64>,
    direction: Vec<f64>,
    step: f64,
    slope: f64,
    direction_norm: f64,

    history: VecDeque<Memory>,
    alpha: Vec<f64>,

    inner: usize,
    inner_total: usize,
    outer: usize,
    evaluations: usize,
    prev_abs_g: f64,
    prev_distance: f64,

    best: Option<(Vec<f64>, Vec<f64>, f64)>,
    stalled: bool,
    repairs: usize,
    damping: f64,
    phase: Phase,
    status: PairStatus,
}

impl PairSolver {
    /// A solver for the `i`-`j` boundary nearest to `anchor`, starting its
    /// search at `start`.
    pub fn new(anchor: &[f64], start: &[f64], i: usize, j: usize, num_classes: usize, cfg: &SolverConfig) -> Self {
        let d = anchor.len();
        PairSolver {
            anchor: anchor.to_vec(),
            i,
            j,
            from_anchor: anchor == start,
            lambda: cfg.multiplier_init,
            penalty: cfg.penalty_init,
            y: start.to_vec(),
            g: 0.0,
            grad_g: vec![0.0; d],
            logits: vec![0.0; num_classes],
            value: 0.0,
            grad: vec![0.0; d],
            trial: start.to_vec(),
            trial_logits: vec![0.0; num_classes],
            trial_grad_g: vec![0.0; d],
            trial_grad: vec![0.0; d],
            direction: vec![0.0; d],
            step: 1.0,
            slope: 0.0,
            direction_norm: 0.0,
            history: VecDeque::with_capacity(HISTORY),
            alpha: vec![0.0; HISTORY],
            inner: 0,
            inner_total: 0,
            outer: 0,
            evaluations: 0,
            prev_abs_g: f64::INFINITY,
            prev_distance: f64::INFINITY,
            best: None,
            stalled: false,
            repairs: 0,
            damping: 1.0,
            phase: Phase::Initial,
            status: PairStatus::InvalidResidual,
        }
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    /// The evaluation this solver is waiting for, if any.
    pub fn query(&mut self) -> Option<PairQuery<'_>> {
        if self.phase == Phase::Done {
            return None;
        }
        Some(PairQuery {
            point: &self.trial,
            i: self.i,
            j: self.j,
            logits: &mut self.trial_logits,
            grad: &mut self.trial_grad_g,
        })
    }

    /// Consumes the evaluation written through the last [`query`](Self::query).
    pub fn tell(&mut self, cfg: &SolverConfig) {
        self.evaluations += 1;
        let g = self.trial_logits[self.i] - self.trial_logits[self.j];
        match self.phase {
            Phase::Initial => {
                if !g.is_finite() || !self.trial_grad_g.iter().all(|v| v.is_finite()) {
                    self.status = PairStatus::NonFinite;
                    self.phase = Phase::Done;
                    return;
                }
                self.accept(g);
                if self.from_anchor && g.abs() <= cfg.feasibility_tol {
                    self.finish(cfg);
                    return;
                }
                self.begin_inner(cfg);
            }
            Phase::LineSearch => {
                let value = self.lagrangian(&self.trial, g);
                if value.is_finite() && value <= self.value + ARMIJO * self.step * self.slope {
                    self.lagrangian_grad_into(g);
                    let mut s = std::mem::take(&mut self.direction);
                    let mut yk = vec![0.0; s.len()];
                    for k in 0..s.len() {
                        s[k] = self.trial[k] - self.y[k];
                        yk[k] = self.trial_grad[k] - self.grad[k];
                    }
                    let sy = kernel::dot(&s, &yk);
                    let step_norm = kernel::norm_sq(&s).sqrt();
                    if sy > 1e-12 * step_norm * kernel::norm_sq(&yk).sqrt() {
                        if self.history.len() == HISTORY {
                            self.history.pop_front();
                        }
                        self.history.push_back(Memory { s, y: yk, rho: 1.0 / sy });
                        self.direction = vec![0.0; self.anchor.len()];
                    } else {
                        self.direction = s;
                    }
                    self.accept(g);
                    self.value = value;
                    std::mem::swap(&mut self.grad, &mut self.trial_grad);
                    self.inner += 1;
                    self.inner_total += 1;
                    if step_norm <= cfg.convergence_tol || self.inner >= cfg.inner_max_iters {
                        self.end_inner(cfg);
                    } else {
                        self.next_direction(cfg);
                    }
                } else {
                    let shrink = if value.is_finite() {
                        let denom = 2.0 * (value - self.value - self.step * self.slope);
                        if denom > 0.0 {
                            (-self.slope * self.step / denom).clamp(0.1, 0.5)
                        } else {
                            0.5
                        }
                    } else {
                        0.1
                    };
                    self.step *= shrink;
                    if self.step * self.direction_norm <= cfg.convergence_tol {
                        self.stalled = self.inner == 0;
                        self.end_inner(cfg);
                    } else {
                        self.set_trial();
                    }
                }
            }
            Phase::Polish => {
                if g.is_finite() && g.abs() < self.g.abs() && self.trial_grad_g.iter().all(|v| v.is_finite()) {
                    self.accept(g);
                }
                self.repair(cfg);
            }
            Phase::Repair => {
                self.repairs += 1;
                if g.is_finite() && g.abs() < self.g.abs() && self.trial_grad_g.iter().all(|v| v.is_finite()) {
                    self.accept(g);
                    self.damping = 1.0;
                } else {
                    self.damping *= 0.5;
                }
                self.repair(cfg);
            }
            Phase::Done => {}
        }
    }

    pub fn into_outcome(self) -> PairOutcome {
        let (point, logits, g) = match (self.status, self.best) {
            (PairStatus::NonFinite, _) | (_, None) => (self.y, self.logits, self.g),
            (_, Some(best)) => best,
        };
        let distance = kernel::dist_sq(&point, &self.anchor).sqrt();
        PairOutcome {
            i: self.i,
            j: self.j,
            point,
            logits,
            distance,
            residual: if self.status == PairStatus::NonFinite { f64::NAN } else { g.abs() },
            status: self.status,
            evaluations: self.evaluations,
            inner_iterations: self.inner_total,
            outer_iterations: self.outer,
        }
    }

    fn lagrangian(&self, y: &[f64], g: f64) -> f64 {
        kernel::dist_sq(y, &self.anchor) + self.lambda * g + 0.5 * self.penalty * g * g
    }

    /// `trial_grad = 2 (trial - anchor) + (lambda + rho g) grad_g(trial)`
    fn lagrangian_grad_into(&mut self, g: f64) {
        let mu = self.lambda + self.penalty * g;
        for k in 0..self.anchor.len() {
            self.trial_grad[k] = mu.mul_add(self.trial_grad_g[k], 2.0 * (self.trial[k] - self.anchor[k]));
        }
    }

    /// Makes the evaluated trial point the current iterate.
    fn accept(&mut self, g: f64) {
        std::mem::swap(&mut self.y, &mut self.trial);
        std::mem::swap(&mut self.logits, &mut self.trial_logits);
        std::mem::swap(&mut self.grad_g, &mut self.trial_grad_g);
        self.g = g;
        let better = match &self.best {
            None => true,
            Some((_, _, best)) => g.abs() < best.abs(),
        };
        if better {
            self.best = Some((self.y.clone(), self.logits.clone(), g));
        }
    }

    fn refresh_objective(&mut self) {
        self.value = self.lagrangian(&self.y, self.g);
        let mu = self.lambda + self.penalty * self.g;
        for k in 0..self.anchor.len() {
            self.grad[k] = mu.mul_add(self.grad_g[k], 2.0 * (self.y[k] - self.anchor[k]));
        }
    }

    fn begin_inner(&mut self, cfg: &SolverConfig) {
        self.refresh_objective();
        self.history.clear();
        self.inner = 0;
        self.next_direction(cfg);
    }

    fn next_direction(&mut self, cfg: &SolverConfig) {
        loop {
            let grad_norm = kernel::norm_sq(&self.grad).sqrt();
            let scale = 1.0 + 2.0 * kernel::dist_sq(&self.y, &self.anchor).sqrt();
            if grad_norm <= cfg.convergence_tol * scale {
                if !self.outer_step(cfg) {
                    return;
                }
                continue;
            }
            self.two_loop();
            self.slope = kernel::dot(&self.direction, &self.grad);
            if !(self.slope < 0.0) {
                self.history.clear();
                self.direction.copy_from_slice(&self.grad);
                apply_h0(&self.grad_g, self.penalty, &mut self.direction);
                for p in self.direction.iter_mut() {
                    *p = -*p;
                }
                self.slope = kernel::dot(&self.direction, &self.grad);
            }
            self.direction_norm = kernel::norm_sq(&self.direction).sqrt();
            self.step = 1.0;
            self.phase = Phase::LineSearch;
            self.set_trial();
            return;
        }
    }

    /// `direction = -H grad` with the limited-memory inverse Hessian.
    fn two_loop(&mut self) {
        let q = &mut self.direction;
        q.copy_from_slice(&self.grad);
        for (k, m) in self.history.iter().enumerate().rev() {
            let a = m.rho * kernel::dot(&m.s, q);
            self.alpha[k] = a;
            kernel::axpy(-a, &m.y, q);
        }
        apply_h0(&self.grad_g, self.penalty, q);
        for (k, m) in self.history.iter().enumerate() {
            let b = m.rho * kernel::dot(&m.y, q);
            kernel::axpy(self.alpha[k] - b, &m.s, q);
        }
        for v in q.iter_mut() {
            *v = -*v;
        }
    }

    fn set_trial(&mut self) {
        for k in 0..self.y.len() {
            self.trial[k] = self.step.mul_add(self.direction[k], self.y[k]);
        }
    }

    fn end_inner(&mut self, cfg: &SolverConfig) {
        if self.outer_step(cfg) {
            self.next_direction(cfg);
        }
    }

    /// Multiplier and penalty update. Returns false when the solve is over.
    fn outer_step(&mut self, cfg: &SolverConfig) -> bool {
        self.outer += 1;
        let distance = kernel::dist_sq(&self.y, &self.anchor).sqrt();
        log::trace!(
            "pair ({}, {}) outer {} inner {} evals {} g {:.3e} dist {:.9} rho {} lambda {:.4}",
            self.i, self.j, self.outer, self.inner, self.evaluations, self.g, distance, self.penalty, self.lambda
        );
        let settled = (distance - self.prev_distance).abs() <= cfg.convergence_tol * (1.0 + distance);
        // A line search that cannot move off a valid point has reached a
        // kink of the piecewise-linear boundary; further multiplier updates
        // only inflate the penalty.
        let stuck = std::mem::take(&mut self.stalled) && self.g.abs() <= cfg.validity_threshold;
        if (self.g.abs() <= cfg.feasibility_tol && settled) || stuck || self.outer >= cfg.outer_max_iters {
            self.polish(cfg);
            return false;
        }
        self.lambda += self.penalty * self.g;
        if self.g.abs() > 0.25 * self.prev_abs_g {
            self.penalty *= cfg.penalty_growth;
        }
        self.prev_abs_g = self.g.abs();
        self.prev_distance = distance;
        self.refresh_objective();
        self.history.clear();
        self.inner = 0;
        true
    }

    /// One Newton step onto the linearized constraint,
    /// `y - g / |grad g|^2 grad g`. Exact within a linear region; kept
    /// only if it lowers the residual.
    fn polish(&mut self, cfg: &SolverConfig) {
        if self.project(1.0) {
            self.phase = Phase::Polish;
        } else {
            self.finish(cfg);
        }
    }

    /// Damped Newton projections for a solve that ended off the boundary,
    /// typically parked on a ReLU kink where the line search cannot move.
    /// Never runs for a solve that is already valid.
    fn repair(&mut self, cfg: &SolverConfig) {
        let best = self.best.as_ref().map_or(self.g, |b| b.2).abs();
        if best <= cfg.validity_threshold || self.repairs >= REPAIR_STEPS || !self.project(self.damping) {
            self.finish(cfg);
        } else {
            self.phase = Phase::Repair;
        }
    }

    /// `trial = y - damping g / |grad g|^2 grad g`; false when undefined.
    fn project(&mut self, damping: f64) -> bool {
        let aa = kernel::norm_sq(&self.grad_g);
        if self.g == 0.0 || !(aa > 0.0) || !aa.is_finite() {
            return false;
        }
        let t = -damping * self.g / aa;
        for k in 0..self.y.len() {
            self.trial[k] = t.mul_add(self.grad_g[k], self.y[k]);
        }
        true
    }

    fn finish(&mut self, cfg: &SolverConfig) {
        if self.g.abs() <= cfg.validity_threshold {
            self.best = Some((self.y.clone(), self.logits.clone(), self.g));
        }
        let residual = self.best.as_ref().map_or(self.g, |b| b.2).abs();
        self.status = if residual <= cfg.validity_threshold {
            PairStatus::Valid
        } else {
            PairStatus::InvalidResidual
        };
        self.phase = Phase::Done;
    }
}

/// Applies `(2 I + rho a a^T)^-1`, the exact inverse Hessian of the
/// Lagrangian wherever the constraint is locally linear with gradient `a`.
fn apply_h0(a: &[f64], rho: f64, v: &mut [f64]) {
    let aa = kernel::norm_sq(a);
    let c = -rho * kernel::dot(a, v) / (2.0 + rho * aa);
    if c.is_finite() {
        kernel::axpy(c, a, v);
    }
    for x in v.iter_mut() {
        *x *= 0.5;
    }
}

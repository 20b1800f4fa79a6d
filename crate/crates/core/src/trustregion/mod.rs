//! Conjugate gradient, Fisher-vector products, the maximal step size and the
//! backtracking line search shared by conductor and agent updates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::policy::{ActionDist, AgentAction, DistributionModel};
use crate::{Error, Result};

/// Quadratic forms at or below this are treated as a degenerate direction.
pub const MIN_CURVATURE: f64 = 1e-12;

/// Samples per parallel work unit; fixed so sums are independent of thread count.
const CHUNK: usize = 128;

/// Settings of one constrained update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrustRegionConfig {
    /// KL threshold.
    pub delta: f64,
    pub cg_iters: usize,
    pub cg_residual_tol: f64,
    pub damping: f64,
    /// Shrink factor per backtracking step.
    pub backtrack_coef: f64,
    pub max_backtracks: usize,
    pub accept_ratio: f64,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        TrustRegionConfig {
            delta: 0.01,
            cg_iters: 10,
            cg_residual_tol: 1e-10,
            damping: 0.1,
            backtrack_coef: 0.8,
            max_backtracks: 15,
            accept_ratio: 0.5,
        }
    }
}

impl TrustRegionConfig {
    /// Defaults with the conductor threshold (0.01).
    pub fn conductor() -> Self {
        TrustRegionConfig::default()
    }

    /// Defaults with the agent threshold (0.005).
    pub fn agent() -> Self {
        TrustRegionConfig {
            delta: 0.005,
            ..TrustRegionConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.delta > 0.0
            && self.backtrack_coef > 0.0
            && self.backtrack_coef < 1.0
            && self.accept_ratio > 0.0
            && self.accept_ratio <= 1.0
            && self.damping >= 0.0
            && self.cg_residual_tol >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid trust-region settings {self:?}")))
        }
    }
}

/// Why no step was attempted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    ZeroGradient,
    DegenerateCurvature,
}

/// Record of one trust-region update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustRegionStep {
    pub grad: Vec<f64>,
    pub direction: Vec<f64>,
    pub beta: f64,
    /// Backtracking exponent of the accepted candidate, or of the last one tried.
    pub backtrack_exponent: usize,
    pub accepted: bool,
    /// Constraint KL of the accepted candidate (or of the last one tried).
    pub achieved_kl: f64,
    pub surrogate_gain: f64,
    /// Linear-model improvement `g . (beta x)` of the full step.
    pub expected_gain: f64,
    pub cg_iterations: usize,
    pub skipped: Option<SkipReason>,
}

impl TrustRegionStep {
    fn skipped(grad: Vec<f64>, direction: Vec<f64>, reason: SkipReason, cg_iterations: usize) -> Self {
        TrustRegionStep {
            grad,
            direction,
            beta: 0.0,
            backtrack_exponent: 0,
            accepted: false,
            achieved_kl: 0.0,
            surrogate_gain: 0.0,
            expected_gain: 0.0,
            cg_iterations,
            skipped: Some(reason),
        }
    }
}

/// Output of [`conjugate_gradient`].
#[derive(Debug, Clone, PartialEq)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `H x = g` for symmetric positive (semi-)definite `H` given as an operator.
///
/// Stops once `||H x - g|| <= tol * ||g||` or after `iters` iterations.
pub fn conjugate_gradient<F>(mut hvp: F, g: &[f64], iters: usize, tol: f64) -> Result<CgSolution>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = g.len();
    let mut x = vec![0.0; n];
    let g_norm = dot(g, g).sqrt();
    if g_norm == 0.0 {
        return Ok(CgSolution {
            x,
            iterations: 0,
            residual_norm: 0.0,
        });
    }
    let mut r = g.to_vec();
    let mut p = g.to_vec();
    let mut rr = g_norm * g_norm;
    let mut iterations = 0;
    for it in 0..iters {
        if rr.sqrt() <= tol * g_norm {
            break;
        }
        let hp = hvp(&p)?;
        if hp.len() != n {
            return Err(Error::Dimension {
                context: "operator output",
                expected: n,
                actual: hp.len(),
            });
        }
        let php = dot(&p, &hp);
        if php <= 0.0 {
            // Numerically exhausted curvature; the current iterate stands.
            break;
        }
        let alpha = rr / php;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * hp[i];
        }
        iterations = it + 1;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCg { iteration: iterations });
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    Ok(CgSolution {
        x,
        iterations,
        residual_norm: rr.sqrt(),
    })
}

/// Sums per-sample contributions in fixed-size chunks and in a fixed order,
/// so the result does not depend on how many threads run the chunks.
pub(crate) fn chunked_sum<F>(n: usize, dim: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize, &mut [f64]) -> Result<()> + Sync,
{
    let partials: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; dim];
            for b in c * CHUNK..((c + 1) * CHUNK).min(n) {
                f(b, &mut acc)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; dim];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    Ok(total)
}

fn chunked_scalar<F>(n: usize, f: F) -> Result<f64>
where
    F: Fn(usize) -> Result<f64> + Sync,
{
    Ok(chunked_sum(n, 1, |b, acc| {
        acc[0] += f(b)?;
        Ok(())
    })?[0])
}

/// `(1 / B) sum_b weight_b F_b v + damping v`, where `F_b` is the Fisher
/// information of the model's output distribution at `inputs[b]`.
pub fn fisher_vector_product<M: DistributionModel>(
    model: &M,
    inputs: &[Vec<f64>],
    weights: &[f64],
    v: &[f64],
    damping: f64,
) -> Result<Vec<f64>> {
    let dim = model.num_params();
    if v.len() != dim {
        return Err(Error::Dimension {
            context: "fisher-vector product",
            expected: dim,
            actual: v.len(),
        });
    }
    if inputs.is_empty() || weights.len() != inputs.len() {
        return Err(Error::Dimension {
            context: "fisher batch weights",
            expected: inputs.len().max(1),
            actual: weights.len(),
        });
    }
    let scale = 1.0 / inputs.len() as f64;
    let mut out = chunked_sum(inputs.len(), dim, |b, acc| model.fvp_into(&inputs[b], v, weights[b] * scale, acc))?;
    for (o, x) in out.iter_mut().zip(v) {
        *o += damping * x;
    }
    Ok(out)
}

/// `sqrt(2 delta / x^T H x)`, or `None` when the quadratic form is degenerate.
pub fn max_step_size(x_hx: f64, delta: f64) -> Option<f64> {
    if !x_hx.is_finite() || x_hx <= MIN_CURVATURE {
        None
    } else {
        Some((2.0 * delta / x_hx).sqrt())
    }
}

/// Outcome of [`backtracking_search`].
#[derive(Debug, Clone, PartialEq)]
pub struct LineSearch<P> {
    /// The accepted candidate, if any.
    pub accepted: Option<P>,
    pub exponent: usize,
    pub kl: f64,
    pub gain: f64,
}

/// Tries step fractions `coef^j`, `j = 0..=max_backtracks`, and returns the
/// first candidate whose KL is within `delta` and whose gain is at least
/// `accept_ratio * coef^j * expected_gain`.
pub fn backtracking_search<P, A, E>(
    mut apply_step: A,
    mut eval: E,
    expected_gain: f64,
    cfg: &TrustRegionConfig,
) -> Result<LineSearch<P>>
where
    A: FnMut(f64) -> Result<P>,
    E: FnMut(&P) -> Result<(f64, f64)>,
{
    let mut last = (0, 0.0, 0.0);
    for j in 0..=cfg.max_backtracks {
        let frac = cfg.backtrack_coef.powi(j as i32);
        let candidate = apply_step(frac)?;
        let (gain, kl) = eval(&candidate)?;
        last = (j, kl, gain);
        if kl.is_finite() && gain.is_finite() && kl <= cfg.delta && gain >= cfg.accept_ratio * frac * expected_gain {
            return Ok(LineSearch {
                accepted: Some(candidate),
                exponent: j,
                kl,
                gain,
            });
        }
    }
    Ok(LineSearch {
        accepted: None,
        exponent: last.0,
        kl: last.1,
        gain: last.2,
    })
}

/// A sampled surrogate `L(theta) = mean_b c_b exp(ln p_theta(a_b | x_b) - ln p_old(a_b | x_b))`
/// maximized subject to `mean_b k_b KL(p_old(.|x_b) || p_theta(.|x_b)) <= delta`.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateProblem<'a> {
    pub inputs: &'a [Vec<f64>],
    pub actions: &'a [AgentAction],
    /// Per-sample coefficient `c_b` (advantage times any weights).
    pub coefficients: &'a [f64],
    /// Per-sample KL weights `k_b`.
    pub kl_weights: &'a [f64],
}

impl SurrogateProblem<'_> {
    fn check(&self) -> Result<()> {
        let n = self.inputs.len();
        for (context, len) in [
            ("surrogate actions", self.actions.len()),
            ("surrogate coefficients", self.coefficients.len()),
            ("surrogate KL weights", self.kl_weights.len()),
        ] {
            if len != n {
                return Err(Error::Dimension {
                    context,
                    expected: n,
                    actual: len,
                });
            }
        }
        if n == 0 {
            return Err(Error::Dimension {
                context: "surrogate batch",
                expected: 1,
                actual: 0,
            });
        }
        Ok(())
    }
}

/// `mean_b c_b grad ln p(a_b | x_b)` at the model's current parameters.
pub fn surrogate_gradient<M: DistributionModel>(model: &M, problem: &SurrogateProblem) -> Result<Vec<f64>> {
    problem.check()?;
    let scale = 1.0 / problem.inputs.len() as f64;
    chunked_sum(problem.inputs.len(), model.num_params(), |b, acc| {
        let c = problem.coefficients[b];
        if c == 0.0 {
            return Ok(());
        }
        model.grad_log_prob_into(&problem.inputs[b], &problem.actions[b], c * scale, acc)
    })
}

/// Weighted mean KL from the reference distributions to `model`.
pub fn mean_kl<M: DistributionModel>(model: &M, inputs: &[Vec<f64>], reference: &[ActionDist], weights: &[f64]) -> Result<f64> {
    let n = inputs.len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum = chunked_scalar(n, |b| Ok(weights[b] * reference[b].kl(&model.dist(&inputs[b])?)?))?;
    Ok(sum / n as f64)
}

/// Surrogate improvement of `model` over the reference (old) model.
fn surrogate_gain<M: DistributionModel>(model: &M, problem: &SurrogateProblem, old_log_probs: &[f64]) -> Result<f64> {
    let n = problem.inputs.len();
    let sum = chunked_scalar(n, |b| {
        let c = problem.coefficients[b];
        if c == 0.0 {
            return Ok(0.0);
        }
        let lp = model.dist(&problem.inputs[b])?.log_prob(&problem.actions[b])?;
        Ok(c * ((lp - old_log_probs[b]).exp() - 1.0))
    })?;
    Ok(sum / n as f64)
}

/// One full constrained update: gradient, CG direction, step size and line search.
///
/// Returns the updated model (a clone of the input when rejected) and the record.
pub fn trust_region_update<M: DistributionModel>(
    model: &M,
    problem: &SurrogateProblem,
    cfg: &TrustRegionConfig,
) -> Result<(M, TrustRegionStep)> {
    problem.check()?;
    let grad = surrogate_gradient(model, problem)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: "surrogate gradient",
            detail: format!("{} of {} entries non-finite", grad.iter().filter(|g| !g.is_finite()).count(), grad.len()),
        });
    }
    let dim = grad.len();
    if grad.iter().all(|&g| g == 0.0) {
        return Ok((model.clone(), TrustRegionStep::skipped(grad, vec![0.0; dim], SkipReason::ZeroGradient, 0)));
    }
    let hvp = |v: &[f64]| fisher_vector_product(model, problem.inputs, problem.kl_weights, v, cfg.damping);
    let cg = conjugate_gradient(hvp, &grad, cfg.cg_iters, cfg.cg_residual_tol)?;
    let hx = hvp(&cg.x)?;
    let x_hx = dot(&cg.x, &hx);
    let Some(beta) = max_step_size(x_hx, cfg.delta) else {
        return Ok((
            model.clone(),
            TrustRegionStep::skipped(grad, cg.x, SkipReason::DegenerateCurvature, cg.iterations),
        ));
    };
    let expected_gain = beta * dot(&grad, &cg.x);

    let old_params = model.flat();
    let reference: Vec<ActionDist> = problem.inputs.iter().map(|x| model.dist(x)).collect::<Result<_>>()?;
    let old_log_probs: Vec<f64> = reference
        .iter()
        .zip(problem.actions)
        .map(|(d, a)| d.log_prob(a))
        .collect::<Result<_>>()?;
    let search = backtracking_search(
        |frac| {
            let params: Vec<f64> = old_params
                .iter()
                .zip(&cg.x)
                .map(|(p, x)| p + frac * beta * x)
                .collect();
            model.with_flat(&params)
        },
        |candidate: &M| {
            let kl = mean_kl(candidate, problem.inputs, &reference, problem.kl_weights)?;
            let gain = surrogate_gain(candidate, problem, &old_log_probs)?;
            Ok((gain, kl))
        },
        expected_gain,
        cfg,
    )?;
    let step = TrustRegionStep {
        grad,
        direction: cg.x,
        beta,
        backtrack_exponent: search.exponent,
        accepted: search.accepted.is_some(),
        achieved_kl: search.kl,
        surrogate_gain: search.gain,
        expected_gain,
        cg_iterations: cg.iterations,
        skipped: None,
    };
    Ok((search.accepted.unwrap_or_else(|| model.clone()), step))
}

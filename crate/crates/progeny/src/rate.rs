//! Large-deviation rate function for the total-progeny direction, its
//! minimizer over the simplex, and the exponential tilting that turns a
//! subcritical model into the critical one used for importance sampling.
//!
//! For a direction `rho` in the simplex the rate is
//! `Gamma(rho) = sup_lambda { lambda . rho - sum_k rho_k log E exp(lambda . X_k) }`,
//! so `P(T = n) ~ exp(-|n| Gamma(rho))` along the ray `n ~ |n| rho`.

use crate::model::{CoordDist, MeanMatrix, OffspringDist, OffspringModel};
use crate::{Error, Result};

const GAMMA_TOL: f64 = 1e-10;
const GAMMA_MAX_ITERS: usize = 200;
const LAMBDA_DIVERGENCE: f64 = 1e3;
const TILT_TOL: f64 = 1e-12;
const RHO_STAR_TOL: f64 = 1e-8;

/// Outcome of the concave maximization defining `Gamma(rho)`.
#[derive(Debug, Clone)]
pub struct RateResult {
    pub lambda: Vec<f64>,
    pub gamma: f64,
    pub iterations: usize,
}

/// Minimizer of `Gamma` over the simplex with its certificate.
#[derive(Debug, Clone)]
pub struct RhoStarResult {
    pub rho: Vec<f64>,
    pub lambda: Vec<f64>,
    pub gamma: f64,
}

/// Per-coordinate tilting parameters: `tau_j` minimizes
/// `log phi_j(t) = sum_k rho_k log E exp(t (X_{kj} - delta_{kj}))`.
#[derive(Debug, Clone)]
pub struct TiltSolution {
    pub tau: Vec<f64>,
    pub log_phi: Vec<f64>,
    /// `-sum_j log phi_j(tau_j)`, which must reproduce `Gamma(rho)`.
    pub gamma: f64,
}

/// First and second moments of the tilted exploration increment after
/// `n` steps, per coordinate.
#[derive(Debug, Clone)]
pub struct TiltDiagnostics {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn check_rho(model: &OffspringModel, rho: &[f64]) -> Result<()> {
    let m = model.m();
    if rho.len() != m {
        return Err(Error::ArityMismatch { expected: m, got: rho.len() });
    }
    if rho.iter().any(|&r| r < 0.0 || !r.is_finite()) {
        return Err(Error::InvalidModel(format!("rho has negative entries: {rho:?}")));
    }
    let s: f64 = rho.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidModel(format!("rho sums to {s}, expected 1")));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, &x| a.max(x.abs()))
}

/// Gaussian elimination with partial pivoting; `None` if singular.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()
        })?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for c in row + 1..n {
            s -= a[row][c] * x[c];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}

/// `lambda . rho - sum_k rho_k log M_k(lambda)`; `-inf` past MGF overflow.
fn objective(model: &OffspringModel, rho: &[f64], lambda: &[f64]) -> Result<f64> {
    let mut v = dot(lambda, rho);
    for (k, &rk) in rho.iter().enumerate() {
        if rk != 0.0 {
            v -= rk * model.log_mgf(k, lambda)?;
        }
    }
    Ok(v)
}

/// `Gamma(rho)` by Newton ascent with Armijo backtracking from
/// `lambda = 0`. Reports divergence when the supremum is not attained.
pub fn gamma(model: &OffspringModel, rho: &[f64]) -> Result<RateResult> {
    check_rho(model, rho)?;
    let m = model.m();
    let mut lambda = vec![0.0; m];
    let mut value = objective(model, rho, &lambda)?;
    for it in 1..=GAMMA_MAX_ITERS {
        let mut grad = rho.to_vec();
        let mut hess = vec![vec![0.0; m]; m];
        for (k, &rk) in rho.iter().enumerate() {
            if rk == 0.0 {
                continue;
            }
            let g = model.grad_log_mgf(k, &lambda)?;
            let h = model.hess_log_mgf(k, &lambda)?;
            for i in 0..m {
                grad[i] -= rk * g[i];
                for j in 0..m {
                    hess[i][j] -= rk * h[i][j];
                }
            }
        }
        if norm_inf(&grad) < GAMMA_TOL {
            return Ok(RateResult { lambda, gamma: value, iterations: it });
        }
        // Newton direction solves (-H) d = grad; fall back to the
        // gradient when the tilted covariance is singular
        let neg_h: Vec<Vec<f64>> =
            hess.iter().map(|r| r.iter().map(|&v| -v).collect()).collect();
        let mut fallback = false;
        let mut dir = solve_linear(neg_h, grad.clone()).unwrap_or_else(|| {
            fallback = true;
            grad.clone()
        });
        if dot(&dir, &grad) <= 0.0 {
            dir = grad.clone();
            fallback = true;
        }
        let slope = dot(&dir, &grad);
        let accept = |step: f64| -> Option<(Vec<f64>, f64)> {
            let cand: Vec<f64> =
                lambda.iter().zip(&dir).map(|(&l, &d)| l + step * d).collect();
            let v = objective(model, rho, &cand).unwrap_or(f64::NEG_INFINITY);
            if !v.is_finite() {
                return None;
            }
            // near the optimum the predicted gain drops below what the
            // objective resolves in double precision; there the sufficient
            // increase test only sees rounding noise, so accept any step
            // that does not measurably decrease the value
            let gain = 1e-4 * step * slope;
            let floor = 4.0 * f64::EPSILON * (1.0 + value.abs());
            let ok = if gain > floor { v >= value + gain } else { v >= value - floor };
            ok.then_some((cand, v))
        };
        match accept(1.0) {
            Some(mut hit) => {
                // gradient fallback means a flat direction; expand the step
                // so linearly divergent rays escape within the iteration cap
                if fallback {
                    let mut step = 2.0;
                    while step <= 1e6 {
                        match accept(step) {
                            Some(h) if h.1 > hit.1 => hit = h,
                            _ => break,
                        }
                        step *= 2.0;
                    }
                }
                (lambda, value) = hit;
            }
            None => {
                let mut step = 0.5;
                loop {
                    if let Some(h) = accept(step) {
                        (lambda, value) = h;
                        break;
                    }
                    step *= 0.5;
                    if step < 1e-14 {
                        return Err(Error::RateNotConverged(it));
                    }
                }
            }
        }
        if lambda.iter().map(|&l| l * l).sum::<f64>().sqrt() > LAMBDA_DIVERGENCE {
            return Err(Error::RateDiverged(LAMBDA_DIVERGENCE));
        }
    }
    Err(Error::RateNotConverged(GAMMA_MAX_ITERS))
}

/// Closed form for all-Poisson models:
/// `Gamma(rho) = sum_j [rho_j log(rho_j / nu_j) + nu_j - rho_j]` with
/// `nu = rho A`, the mean offspring flow into each type.
pub fn gamma_closed_poisson(model: &OffspringModel, rho: &[f64]) -> Result<f64> {
    check_rho(model, rho)?;
    let m = model.m();
    let mu: Vec<&Vec<f64>> = model
        .offspring
        .iter()
        .map(|d| match d {
            OffspringDist::PoissonProduct { mu } => Ok(mu),
            OffspringDist::Table { .. } => Err(Error::PoissonOnly("gamma_closed_poisson")),
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for j in 0..m {
        let nu: f64 = (0..m).map(|k| rho[k] * mu[k][j]).sum();
        if rho[j] == 0.0 {
            total += nu;
        } else if nu == 0.0 {
            return Ok(f64::INFINITY);
        } else {
            total += rho[j] * (rho[j] / nu).ln() + nu - rho[j];
        }
    }
    Ok(total)
}

fn softmax(theta: &[f64]) -> Vec<f64> {
    let mx = theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = theta.iter().map(|&t| (t - mx).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Envelope gradient `dGamma/drho_k = lambda*_k - log M_k(lambda*)`.
fn rho_gradient(model: &OffspringModel, res: &RateResult) -> Result<Vec<f64>> {
    (0..model.m())
        .map(|k| Ok(res.lambda[k] - model.log_mgf(k, &res.lambda)?))
        .collect()
}

/// Minimizes `Gamma` over the open simplex via a softmax
/// reparameterization and BFGS, restarted from the barycenter and from
/// each shrunk vertex. The envelope theorem supplies the gradient, so no
/// inner re-differentiation of `lambda*` is needed.
pub fn rho_star(model: &OffspringModel) -> Result<RhoStarResult> {
    let m = model.m();
    if m == 1 {
        let res = gamma(model, &[1.0])?;
        return Ok(RhoStarResult { rho: vec![1.0], lambda: res.lambda, gamma: res.gamma });
    }
    let mut starts = vec![vec![0.0; m]];
    for k in 0..m {
        let mut rho0 = vec![0.1 / (m as f64 - 1.0); m];
        rho0[k] = 0.9;
        starts.push(rho0.iter().map(|&r: &f64| r.ln()).collect());
    }
    let mut best: Option<RhoStarResult> = None;
    let mut first_err: Option<Error> = None;
    for theta0 in starts {
        match bfgs_rho(model, theta0) {
            Ok(cand) => {
                if best.as_ref().is_none_or(|b| cand.gamma < b.gamma) {
                    best = Some(cand);
                }
            }
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    best.ok_or_else(|| first_err.expect("some start produced an error"))
}

fn bfgs_rho(model: &OffspringModel, mut theta: Vec<f64>) -> Result<RhoStarResult> {
    let m = model.m();
    let eval = |theta: &[f64]| -> Result<(Vec<f64>, RateResult, Vec<f64>)> {
        let rho = softmax(theta);
        let res = gamma(model, &rho)?;
        let g_rho = rho_gradient(model, &res)?;
        let mean: f64 = (0..m).map(|k| rho[k] * g_rho[k]).sum();
        let g_theta: Vec<f64> = (0..m).map(|i| rho[i] * (g_rho[i] - mean)).collect();
        Ok((rho, res, g_theta))
    };
    let (mut rho, mut res, mut grad) = eval(&theta)?;
    let mut hinv: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..m).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _ in 0..500 {
        if norm_inf(&grad) < RHO_STAR_TOL {
            break;
        }
        let mut dir: Vec<f64> = (0..m).map(|i| -dot(&hinv[i], &grad)).collect();
        if dot(&dir, &grad) >= 0.0 {
            dir = grad.iter().map(|&g| -g).collect();
        }
        let slope = dot(&dir, &grad);
        let mut step = 1.0;
        let (new_theta, new_state) = loop {
            let cand: Vec<f64> =
                theta.iter().zip(&dir).map(|(&t, &d)| t + step * d).collect();
            match eval(&cand) {
                Ok(state) if state.1.gamma <= res.gamma + 1e-4 * step * slope => {
                    break (cand, state);
                }
                _ => {
                    step *= 0.5;
                    if step < 1e-16 {
                        // no further progress; accept the current point
                        return Ok(RhoStarResult {
                            rho,
                            lambda: res.lambda.clone(),
                            gamma: res.gamma,
                        });
                    }
                }
            }
        };
        let s: Vec<f64> = new_theta.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = new_state.2.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            // standard inverse update (I - s y^T / sy) H (I - y s^T / sy) + s s^T / sy
            let hy: Vec<f64> = (0..m).map(|i| dot(&hinv[i], &y)).collect();
            let yhy = dot(&y, &hy);
            for i in 0..m {
                for j in 0..m {
                    hinv[i][j] += (sy + yhy) * s[i] * s[j] / (sy * sy)
                        - (hy[i] * s[j] + s[i] * hy[j]) / sy;
                }
            }
        }
        theta = new_theta;
        (rho, res, grad) = new_state;
    }
    Ok(RhoStarResult { rho, lambda: res.lambda.clone(), gamma: res.gamma })
}

/// Left Perron eigenvector certificate for right-stochastic mean
/// matrices, where the minimizing ray has the closed form `rho* A =
/// rho*`. `irreducible` is false when the positivity pattern of `A` is
/// reducible and the eigenvector may not be unique.
#[derive(Debug, Clone)]
pub struct EigenvectorCheck {
    pub rho: Vec<f64>,
    pub irreducible: bool,
}

pub fn principal_eigenvector_check(model: &OffspringModel) -> Result<EigenvectorCheck> {
    let MeanMatrix(a) = model.mean_matrix();
    let m = a.len();
    let sums: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    if sums.iter().any(|&s| (s - 1.0).abs() > 1e-9) {
        return Err(Error::NotRightStochastic(sums));
    }
    // power iteration on (A^T + I) kills periodicity
    let mut v = vec![1.0 / m as f64; m];
    let mut ok = false;
    for _ in 0..100_000 {
        let mut w = vec![0.0; m];
        for j in 0..m {
            w[j] = v[j] + (0..m).map(|k| v[k] * a[k][j]).sum::<f64>();
        }
        let s: f64 = w.iter().sum();
        for wj in &mut w {
            *wj /= s;
        }
        let diff: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = w;
        if diff < 1e-14 {
            ok = true;
            break;
        }
    }
    if !ok {
        return Err(Error::PowerIterationDiverged(100_000));
    }
    Ok(EigenvectorCheck { rho: v, irreducible: is_irreducible(&a) })
}

fn is_irreducible(a: &[Vec<f64>]) -> bool {
    let m = a.len();
    let reach_all = |start: usize, transpose: bool| -> bool {
        let mut seen = vec![false; m];
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            for w in 0..m {
                let edge = if transpose { a[w][u] } else { a[u][w] };
                if edge > 0.0 && !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.iter().all(|&s| s)
    };
    (0..m).all(|s| reach_all(s, false) && reach_all(s, true))
}

/// `log E exp(t X)` for a single offspring coordinate.
fn coord_log_mgf(d: &CoordDist, t: f64) -> f64 {
    match d {
        CoordDist::Table(pts) => {
            let mx = pts.iter().map(|&(x, _)| t * x as f64).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = pts.iter().map(|&(x, p)| p * (t * x as f64 - mx).exp()).sum();
            mx + s.ln()
        }
        CoordDist::Poisson(mu) => mu * (t.exp() - 1.0),
    }
}

/// Mean and variance of the coordinate under the tilt `e^{t X}`.
fn coord_tilted_moments(d: &CoordDist, t: f64) -> (f64, f64) {
    match d {
        CoordDist::Table(pts) => {
            let mx = pts.iter().map(|&(x, _)| t * x as f64).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for &(x, p) in pts {
                let w = p * (t * x as f64 - mx).exp();
                z += w;
                m1 += w * x as f64;
                m2 += w * (x as f64) * (x as f64);
            }
            m1 /= z;
            m2 /= z;
            (m1, m2 - m1 * m1)
        }
        CoordDist::Poisson(mu) => {
            let lam = mu * t.exp();
            (lam, lam)
        }
    }
}

/// Solves the per-coordinate tilt `tau_j = argmin_t log phi_j(t)`.
/// Requires every offspring law to factorize across coordinates, which
/// is what makes the coordinatewise problems equivalent to the joint
/// supremum: then `Gamma(rho) = -sum_j log phi_j(tau_j)`.
pub fn tilt(model: &OffspringModel, rho: &[f64]) -> Result<TiltSolution> {
    check_rho(model, rho)?;
    let m = model.m();
    for k in 0..m {
        if !model.is_product_form(k)? {
            return Err(Error::NotProductForm(k));
        }
    }
    let mut tau = Vec::with_capacity(m);
    let mut log_phi = Vec::with_capacity(m);
    for j in 0..m {
        let marginals: Vec<CoordDist> =
            (0..m).map(|k| model.marginal(k, j)).collect::<Result<_>>()?;
        // psi(t) = sum_k rho_k (log E e^{t X_kj} - t delta_kj), convex
        let psi = |t: f64| -> f64 {
            (0..m)
                .map(|k| {
                    rho[k] * (coord_log_mgf(&marginals[k], t) - if k == j { t } else { 0.0 })
                })
                .sum()
        };
        let dpsi = |t: f64| -> (f64, f64) {
            let mut d1 = 0.0;
            let mut d2 = 0.0;
            for k in 0..m {
                let (mean, var) = coord_tilted_moments(&marginals[k], t);
                d1 += rho[k] * (mean - if k == j { 1.0 } else { 0.0 });
                d2 += rho[k] * var;
            }
            (d1, d2)
        };
        let t = solve_tilt_coordinate(&psi, &dpsi, j)?;
        tau.push(t);
        log_phi.push(psi(t));
    }
    let g = -log_phi.iter().sum::<f64>();
    Ok(TiltSolution { tau, log_phi, gamma: g })
}

/// Safeguarded 1-D Newton on the convex `psi`: bracket a sign change of
/// `psi'` by doubling, then Newton with bisection fallback.
fn solve_tilt_coordinate(
    _psi: &dyn Fn(f64) -> f64,
    dpsi: &dyn Fn(f64) -> (f64, f64),
    j: usize,
) -> Result<f64> {
    let (d0, _) = dpsi(0.0);
    if d0.abs() <= TILT_TOL {
        return Ok(0.0);
    }
    // maintain psi'(lo) < 0 < psi'(hi) by doubling away from 0
    let mut lo;
    let mut hi;
    if d0 < 0.0 {
        lo = 0.0;
        let mut t = 1.0;
        loop {
            let (d, _) = dpsi(t);
            if d >= 0.0 {
                hi = t;
                break;
            }
            lo = t;
            t *= 2.0;
            if t > 700.0 {
                return Err(Error::TiltDegenerate { j });
            }
        }
    } else {
        hi = 0.0;
        let mut t = -1.0;
        loop {
            let (d, _) = dpsi(t);
            if d <= 0.0 {
                lo = t;
                break;
            }
            hi = t;
            t *= 2.0;
            if t < -700.0 {
                return Err(Error::TiltDegenerate { j });
            }
        }
    }
    let mut t = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (d1, d2) = dpsi(t);
        if d1.abs() <= TILT_TOL {
            return Ok(t);
        }
        if d1 > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        let newton = t - d1 / d2;
        t = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-16 * (1.0 + t.abs()) {
            return Ok(t);
        }
    }
    Err(Error::RateNotConverged(200))
}

/// Raw moments `E X^r` for `r = 1, 2, 3`.
fn coord_raw_moments(d: &CoordDist) -> (f64, f64, f64) {
    match d {
        CoordDist::Table(pts) => {
            let mut m = (0.0, 0.0, 0.0);
            for &(x, p) in pts {
                let x = x as f64;
                m.0 += p * x;
                m.1 += p * x * x;
                m.2 += p * x * x * x;
            }
            m
        }
        CoordDist::Poisson(mu) => {
            (*mu, mu + mu * mu, mu * (1.0 + 3.0 * mu + mu * mu))
        }
    }
}

/// Per-coordinate mean and variance of the exploration frontier after
/// visiting the ray point `n`: the `n_k` visited nodes of type `k`
/// contribute tilted centered offspring `X_{kj} - delta_{kj}`, and the
/// `m` spine nodes contribute the untilted ladder variables `Y_k`, whose
/// coordinate `k+1` is the size-biased offspring count minus one.
pub fn tilt_diagnostics(
    model: &OffspringModel,
    tau: &[f64],
    n: &[u32],
) -> Result<TiltDiagnostics> {
    let m = model.m();
    if tau.len() != m || n.len() != m {
        return Err(Error::ArityMismatch { expected: m, got: tau.len().max(n.len()) });
    }
    let mut mean = Vec::with_capacity(m);
    let mut var = Vec::with_capacity(m);
    for j in 0..m {
        let mut mj = 0.0;
        let mut vj = 0.0;
        for k in 0..m {
            let d = model.marginal(k, j)?;
            let (tm, tv) = coord_tilted_moments(&d, tau[j]);
            mj += n[k] as f64 * (tm - if k == j { 1.0 } else { 0.0 });
            vj += n[k] as f64 * tv;
            // ladder contribution: spine node of type k
            let (m1, m2, m3) = coord_raw_moments(&d);
            if j == k + 1 {
                if m1 <= 0.0 {
                    return Err(Error::InvalidModel(format!(
                        "size-biased coordinate ({k}, {j}) has zero mean"
                    )));
                }
                let sb_mean = m2 / m1;
                let sb_var = m3 / m1 - sb_mean * sb_mean;
                mj += sb_mean - 1.0;
                vj += sb_var;
            } else {
                mj += m1;
                vj += m2 - m1 * m1;
            }
        }
        mean.push(mj);
        var.push(vj);
    }
    Ok(TiltDiagnostics { mean, var })
}

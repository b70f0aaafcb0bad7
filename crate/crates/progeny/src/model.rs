//! Offspring models: validation, moment-generating functions, mean
//! structure and ray sequences.
//!
//! A model is `m` types, one offspring distribution per type, and a root
//! type distribution `p`. Everything downstream (exact tables, rate
//! function, simulation) consumes the immutable [`OffspringModel`].

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A single support point of a table distribution: mass `p` at the
/// offspring vector `x`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TableEntry {
    pub x: Vec<u32>,
    pub p: f64,
}

/// Offspring distribution of one type.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OffspringDist {
    /// Finite support, explicit masses.
    Table { entries: Vec<TableEntry> },
    /// Independent Poisson coordinates, `X_j ~ Poisson(mu_j)`.
    PoissonProduct { mu: Vec<f64> },
}

/// Full process specification: `m` types, per-type offspring law, root
/// type distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OffspringModel {
    #[serde(default)]
    pub types: Vec<String>,
    pub root: Vec<f64>,
    pub offspring: Vec<OffspringDist>,
}

/// Mean offspring matrix `A[k][j] = E[X_{k,j}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanMatrix(pub Vec<Vec<f64>>);

/// Criticality class by comparing the Perron root of the mean matrix
/// with 1 at tolerance `1e-9`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criticality {
    Subcritical,
    Critical,
    Supercritical,
}

/// A named invariant violation. Violations are data, not failures.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Marginal law of a single offspring coordinate `X_{k,j}`.
#[derive(Debug, Clone, PartialEq)]
pub enum CoordDist {
    /// Support points and masses, support strictly increasing.
    Table(Vec<(u32, f64)>),
    Poisson(f64),
}

const PROB_SUM_TOL: f64 = 1e-12;

impl OffspringModel {
    /// Number of types.
    pub fn m(&self) -> usize {
        self.root.len()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    /// Checks every structural invariant; empty iff the model is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let m = self.m();
        let push = |out: &mut Vec<Violation>, field: String, rule: String| {
            out.push(Violation { field, rule });
        };

        if m == 0 {
            push(&mut out, "root".into(), "empty root distribution".into());
            return out;
        }
        if self.offspring.len() != m {
            push(
                &mut out,
                "offspring".into(),
                format!("expected {} distributions, got {}", m, self.offspring.len()),
            );
        }
        if !self.types.is_empty() && self.types.len() != m {
            push(
                &mut out,
                "types".into(),
                format!("expected {} names, got {}", m, self.types.len()),
            );
        }
        if self.root.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            push(&mut out, "root".into(), "entries must be nonnegative and finite".into());
        } else {
            let s: f64 = self.root.iter().sum();
            if (s - 1.0).abs() > PROB_SUM_TOL {
                push(&mut out, "root".into(), format!("root sums to {s}"));
            }
        }

        for (k, dist) in self.offspring.iter().enumerate() {
            let field = format!("offspring[{k}]");
            match dist {
                OffspringDist::Table { entries } => {
                    let mut seen = std::collections::HashSet::new();
                    let mut sum = 0.0;
                    let mut mass_at_zero = 0.0;
                    for e in entries {
                        if e.x.len() != m {
                            push(&mut out, field.clone(), format!("exponent vector {:?} has arity {}, expected {}", e.x, e.x.len(), m));
                            continue;
                        }
                        if !(e.p.is_finite()) || e.p < 0.0 {
                            push(&mut out, field.clone(), format!("mass {} at {:?} not a probability", e.p, e.x));
                        }
                        if e.p == 0.0 {
                            push(&mut out, field.clone(), format!("zero-mass entry at {:?} rejected", e.x));
                        }
                        if !seen.insert(e.x.clone()) {
                            push(&mut out, field.clone(), format!("duplicate exponent vector {:?}", e.x));
                        }
                        sum += e.p;
                        if e.x.iter().all(|&v| v == 0) {
                            mass_at_zero = e.p;
                        }
                    }
                    if (sum - 1.0).abs() > PROB_SUM_TOL {
                        push(&mut out, field.clone(), format!("masses sum to {sum}"));
                    }
                    if mass_at_zero <= 0.0 {
                        push(
                            &mut out,
                            field.clone(),
                            format!("type {}: no mass at zero offspring, |T| = infinity a.s.", k + 1),
                        );
                    }
                }
                OffspringDist::PoissonProduct { mu } => {
                    if mu.len() != m {
                        push(&mut out, field.clone(), format!("mu has arity {}, expected {}", mu.len(), m));
                        continue;
                    }
                    if mu.iter().any(|&v| !v.is_finite() || v < 0.0) {
                        push(&mut out, field.clone(), "mu entries must be nonnegative and finite".into());
                    } else if mu.contains(&0.0) {
                        push(&mut out, field.clone(), "support-degenerate: zero Poisson mean".into());
                    }
                }
            }
        }
        out
    }

    fn check_type(&self, k: usize) -> Result<()> {
        if k >= self.m() {
            return Err(Error::TypeIndex(k));
        }
        Ok(())
    }

    fn check_lambda(&self, lambda: &[f64]) -> Result<()> {
        if lambda.len() != self.m() {
            return Err(Error::ArityMismatch { expected: self.m(), got: lambda.len() });
        }
        Ok(())
    }

    /// `E[exp(lambda . X_k)]`, in linear scale. Overflow is an error;
    /// rescale through [`OffspringModel::log_mgf`] instead.
    pub fn mgf(&self, k: usize, lambda: &[f64]) -> Result<f64> {
        let v = self.log_mgf(k, lambda)?.exp();
        if !v.is_finite() {
            return Err(Error::MgfOverflow(lambda.to_vec()));
        }
        Ok(v)
    }

    /// `log E[exp(lambda . X_k)]`, log-sum-exp for tables, closed form
    /// for Poisson products.
    pub fn log_mgf(&self, k: usize, lambda: &[f64]) -> Result<f64> {
        self.check_type(k)?;
        self.check_lambda(lambda)?;
        match &self.offspring[k] {
            OffspringDist::Table { entries } => {
                let dots: Vec<f64> = entries
                    .iter()
                    .map(|e| dot_u32(lambda, &e.x))
                    .collect();
                let mx = dots.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = entries
                    .iter()
                    .zip(&dots)
                    .map(|(e, &d)| e.p * (d - mx).exp())
                    .sum();
                Ok(mx + s.ln())
            }
            OffspringDist::PoissonProduct { mu } => Ok(mu
                .iter()
                .zip(lambda)
                .map(|(&m, &l)| m * (l.exp() - 1.0))
                .sum()),
        }
    }

    /// Gradient of `log_mgf` in `lambda`: the tilted mean
    /// `E[X_k exp(lambda.X_k)] / E[exp(lambda.X_k)]`.
    pub fn grad_log_mgf(&self, k: usize, lambda: &[f64]) -> Result<Vec<f64>> {
        self.check_type(k)?;
        self.check_lambda(lambda)?;
        let m = self.m();
        match &self.offspring[k] {
            OffspringDist::Table { entries } => {
                let dots: Vec<f64> = entries.iter().map(|e| dot_u32(lambda, &e.x)).collect();
                let mx = dots.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                let mut g = vec![0.0; m];
                for (e, &d) in entries.iter().zip(&dots) {
                    let w = e.p * (d - mx).exp();
                    z += w;
                    for j in 0..m {
                        g[j] += w * e.x[j] as f64;
                    }
                }
                for gj in &mut g {
                    *gj /= z;
                }
                Ok(g)
            }
            OffspringDist::PoissonProduct { mu } => {
                Ok(mu.iter().zip(lambda).map(|(&m, &l)| m * l.exp()).collect())
            }
        }
    }

    /// Hessian of `log_mgf` in `lambda`: the tilted covariance of `X_k`.
    pub fn hess_log_mgf(&self, k: usize, lambda: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_type(k)?;
        self.check_lambda(lambda)?;
        let m = self.m();
        match &self.offspring[k] {
            OffspringDist::Table { entries } => {
                let dots: Vec<f64> = entries.iter().map(|e| dot_u32(lambda, &e.x)).collect();
                let mx = dots.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                let mut mean = vec![0.0; m];
                let mut second = vec![vec![0.0; m]; m];
                for (e, &d) in entries.iter().zip(&dots) {
                    let w = e.p * (d - mx).exp();
                    z += w;
                    for i in 0..m {
                        let xi = e.x[i] as f64;
                        mean[i] += w * xi;
                        for j in 0..m {
                            second[i][j] += w * xi * e.x[j] as f64;
                        }
                    }
                }
                for mi in &mut mean {
                    *mi /= z;
                }
                for i in 0..m {
                    for j in 0..m {
                        second[i][j] = second[i][j] / z - mean[i] * mean[j];
                    }
                }
                Ok(second)
            }
            OffspringDist::PoissonProduct { mu } => {
                let mut h = vec![vec![0.0; m]; m];
                for j in 0..m {
                    h[j][j] = mu[j] * lambda[j].exp();
                }
                Ok(h)
            }
        }
    }

    /// `A[k][j] = E[X_{k,j}]`.
    pub fn mean_matrix(&self) -> MeanMatrix {
        let m = self.m();
        let mut a = vec![vec![0.0; m]; m];
        for (k, dist) in self.offspring.iter().enumerate() {
            match dist {
                OffspringDist::Table { entries } => {
                    for e in entries {
                        for j in 0..m {
                            a[k][j] += e.p * e.x[j] as f64;
                        }
                    }
                }
                OffspringDist::PoissonProduct { mu } => a[k].copy_from_slice(mu),
            }
        }
        MeanMatrix(a)
    }

    pub fn classify(&self) -> Result<Criticality> {
        let r = perron_root(&self.mean_matrix())?;
        Ok(if (r - 1.0).abs() <= 1e-9 {
            Criticality::Critical
        } else if r < 1.0 {
            Criticality::Subcritical
        } else {
            Criticality::Supercritical
        })
    }

    /// Marginal law of coordinate `j` of `X_k`.
    pub fn marginal(&self, k: usize, j: usize) -> Result<CoordDist> {
        self.check_type(k)?;
        self.check_type(j)?;
        match &self.offspring[k] {
            OffspringDist::Table { entries } => {
                let mut acc = std::collections::BTreeMap::new();
                for e in entries {
                    *acc.entry(e.x[j]).or_insert(0.0) += e.p;
                }
                Ok(CoordDist::Table(acc.into_iter().collect()))
            }
            OffspringDist::PoissonProduct { mu } => Ok(CoordDist::Poisson(mu[j])),
        }
    }

    /// Whether the coordinates of `X_k` are independent, i.e. the joint
    /// table factorizes as the product of its marginals (tolerance
    /// `1e-12` per support point). Poisson products always qualify.
    pub fn is_product_form(&self, k: usize) -> Result<bool> {
        self.check_type(k)?;
        let m = self.m();
        match &self.offspring[k] {
            OffspringDist::PoissonProduct { .. } => Ok(true),
            OffspringDist::Table { entries } => {
                let mut marginals = Vec::with_capacity(m);
                for j in 0..m {
                    match self.marginal(k, j)? {
                        CoordDist::Table(t) => marginals.push(t),
                        CoordDist::Poisson(_) => unreachable!(),
                    }
                }
                let joint: std::collections::HashMap<&[u32], f64> =
                    entries.iter().map(|e| (e.x.as_slice(), e.p)).collect();
                // Walk the full product support; the joint must match the
                // product of marginals everywhere, including at points the
                // table omits (implicit zero mass).
                let mut idx = vec![0usize; m];
                loop {
                    let x: Vec<u32> = (0..m).map(|j| marginals[j][idx[j]].0).collect();
                    let prod: f64 = (0..m).map(|j| marginals[j][idx[j]].1).product();
                    let joint_p = joint.get(x.as_slice()).copied().unwrap_or(0.0);
                    if (joint_p - prod).abs() > 1e-12 {
                        return Ok(false);
                    }
                    let mut j = 0;
                    loop {
                        idx[j] += 1;
                        if idx[j] < marginals[j].len() {
                            break;
                        }
                        idx[j] = 0;
                        j += 1;
                        if j == m {
                            return Ok(true);
                        }
                    }
                }
            }
        }
    }

    /// Converts a Poisson-product type to a finite table by truncating
    /// each coordinate at tail mass `< tail_tol` without renormalizing.
    /// Returns the table and the total dropped joint mass.
    pub fn poisson_to_table(mu: &[f64], tail_tol: f64) -> (Vec<TableEntry>, f64) {
        let m = mu.len();
        let mut axes: Vec<Vec<f64>> = Vec::with_capacity(m);
        for &mj in mu {
            let mut pmf = Vec::new();
            let mut p = (-mj).exp();
            let mut cum = 0.0;
            let mut k = 0u32;
            loop {
                pmf.push(p);
                cum += p;
                if 1.0 - cum < tail_tol {
                    break;
                }
                k += 1;
                p *= mj / k as f64;
            }
            axes.push(pmf);
        }
        let mut entries = Vec::new();
        let mut idx = vec![0u32; m];
        let mut kept = 0.0;
        'outer: loop {
            let p: f64 = idx.iter().enumerate().map(|(j, &i)| axes[j][i as usize]).product();
            entries.push(TableEntry { x: idx.clone(), p });
            kept += p;
            let mut j = 0;
            loop {
                idx[j] += 1;
                if (idx[j] as usize) < axes[j].len() {
                    break;
                }
                idx[j] = 0;
                j += 1;
                if j == m {
                    break 'outer;
                }
            }
        }
        (entries, 1.0 - kept)
    }

    /// Whole-model Poisson-to-table conversion; non-Poisson types pass
    /// through unchanged. Returns the converted model and the largest
    /// per-type dropped mass (an error bound on downstream tables).
    pub fn truncated_to_table(&self, tail_tol: f64) -> (OffspringModel, f64) {
        let mut dropped: f64 = 0.0;
        let offspring = self
            .offspring
            .iter()
            .map(|d| match d {
                OffspringDist::Table { .. } => d.clone(),
                OffspringDist::PoissonProduct { mu } => {
                    let (entries, d) = Self::poisson_to_table(mu, tail_tol);
                    dropped = dropped.max(d);
                    OffspringDist::Table { entries }
                }
            })
            .collect();
        (
            OffspringModel { types: self.types.clone(), root: self.root.clone(), offspring },
            dropped,
        )
    }

    /// Stable fingerprint of the model content, echoed into simulation
    /// batches so outputs can be matched back to their inputs.
    pub fn fingerprint(&self) -> u64 {
        let text = serde_json::to_string(self).expect("model serializes");
        // FNV-1a, stable across platforms and runs.
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

fn dot_u32(lambda: &[f64], x: &[u32]) -> f64 {
    lambda.iter().zip(x).map(|(&l, &xi)| l * xi as f64).sum()
}

const POWER_ITER_MAX: usize = 100_000;

/// Largest eigenvalue of the nonnegative matrix `A` by shifted power
/// iteration (`A + I` kills periodicity); reducible matrices fall back
/// to taking the maximum over strongly connected diagonal blocks.
pub fn perron_root(a: &MeanMatrix) -> Result<f64> {
    let m = a.0.len();
    if m == 1 {
        return Ok(a.0[0][0]);
    }
    match power_iterate(&a.0, &(0..m).collect::<Vec<_>>()) {
        Ok(r) => Ok(r),
        Err(_) => {
            let comps = strongly_connected(&a.0);
            let mut best = f64::NEG_INFINITY;
            for comp in comps {
                best = best.max(power_iterate(&a.0, &comp)?);
            }
            Ok(best)
        }
    }
}

/// Perron root of the principal submatrix indexed by `idx`, via power
/// iteration on the shifted block, residual `1e-12`.
fn power_iterate(a: &[Vec<f64>], idx: &[usize]) -> Result<f64> {
    let n = idx.len();
    if n == 1 {
        return Ok(a[idx[0]][idx[0]]);
    }
    let mut v = vec![1.0f64; n];
    for _ in 0..POWER_ITER_MAX {
        let mut w = vec![0.0f64; n];
        for (i, &gi) in idx.iter().enumerate() {
            let mut s = v[i]; // shift by identity
            for (j, &gj) in idx.iter().enumerate() {
                s += a[gi][gj] * v[j];
            }
            w[i] = s;
        }
        let norm = w.iter().cloned().fold(0.0f64, f64::max);
        if norm == 0.0 {
            return Ok(0.0); // zero block
        }
        for wi in &mut w {
            *wi /= norm;
        }
        let lam = norm;
        // residual of the shifted problem
        let mut resid = 0.0f64;
        for (i, &gi) in idx.iter().enumerate() {
            let mut s = w[i];
            for (j, &gj) in idx.iter().enumerate() {
                s += a[gi][gj] * w[j];
            }
            resid = resid.max((s - lam * w[i]).abs());
        }
        v = w;
        if resid <= 1e-12 * lam.max(1.0) {
            return Ok(lam - 1.0);
        }
    }
    Err(Error::PowerIterationDiverged(POWER_ITER_MAX))
}

/// Strongly connected components of the positivity pattern of `a`
/// (Kosaraju; the matrices here are tiny).
fn strongly_connected(a: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let m = a.len();
    let edge = |i: usize, j: usize| a[i][j] > 0.0;
    let mut order = Vec::new();
    let mut seen = vec![false; m];
    fn dfs1(
        u: usize,
        m: usize,
        edge: &dyn Fn(usize, usize) -> bool,
        seen: &mut [bool],
        order: &mut Vec<usize>,
    ) {
        seen[u] = true;
        for v in 0..m {
            if edge(u, v) && !seen[v] {
                dfs1(v, m, edge, seen, order);
            }
        }
        order.push(u);
    }
    for u in 0..m {
        if !seen[u] {
            dfs1(u, m, &edge, &mut seen, &mut order);
        }
    }
    let mut comp = vec![usize::MAX; m];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for &u in order.iter().rev() {
        if comp[u] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut stack = vec![u];
        let mut members = Vec::new();
        comp[u] = id;
        while let Some(x) = stack.pop() {
            members.push(x);
            for y in 0..m {
                if edge(y, x) && comp[y] == usize::MAX {
                    comp[y] = id;
                    stack.push(y);
                }
            }
        }
        members.sort_unstable();
        comps.push(members);
    }
    comps
}

/// A ray `n_N ≈ N rho` through the lattice, produced by
/// largest-remainder rounding so that `|n_N| = N` exactly.
#[derive(Debug, Clone)]
pub struct RaySequence {
    pub rho: Vec<f64>,
}

impl RaySequence {
    pub fn new(rho: Vec<f64>) -> Self {
        RaySequence { rho }
    }

    pub fn nth(&self, total: usize) -> Vec<u32> {
        ray(&self.rho, total)
    }
}

/// Componentwise rounding of `N rho` with largest-remainder correction;
/// ties broken toward the lowest index.
pub fn ray(rho: &[f64], total: usize) -> Vec<u32> {
    let m = rho.len();
    let mut n: Vec<u32> = Vec::with_capacity(m);
    let mut rem: Vec<(f64, usize)> = Vec::with_capacity(m);
    let mut assigned = 0usize;
    for (i, &r) in rho.iter().enumerate() {
        let exact = r * total as f64;
        let fl = exact.floor();
        n.push(fl as u32);
        assigned += fl as usize;
        rem.push((exact - fl, i));
    }
    // stable sort: descending remainder, ties keep lowest index first
    rem.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut left = total - assigned;
    for (_, i) in rem {
        if left == 0 {
            break;
        }
        n[i] += 1;
        left -= 1;
    }
    n
}

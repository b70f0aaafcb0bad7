//! Truncated multivariate power series and exact total-progeny tables.
//!
//! All probabilities here are computed in linear scale, double precision.
//! The production path for `P(T = n)` is [`solve_progeny`], the fixed
//! point of the implicit system `G_{T_i}(s) = s_i G_{X_i}(G_{T_1}, ...,
//! G_{T_m})`. Three independent oracles cross-check it:
//! [`recursion_oracle`] (direct subtree decomposition by convolution
//! powers), [`lagrange_good_oracle`] (determinant-form inversion) and
//! [`arborescent_oracle`] (sum over rooted trees on `{0, ..., m}`).

use std::collections::HashMap;
use std::io::Write;

use crate::model::{OffspringDist, OffspringModel};
use crate::{Error, Result};

/// Coefficient storage cap: `(nmax + 1)^m` entries must stay below this.
const MAX_COEFFS: usize = 1 << 27;

/// Multivariate formal power series in `m` variables truncated at total
/// degree `nmax`. Coefficients live in a dense `(nmax+1)^m` box (the
/// desk-scale arities here are small); entries with total degree above
/// `nmax` are identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSeries {
    m: usize,
    nmax: usize,
    dims: usize,
    coeffs: Vec<f64>,
}

impl TruncatedSeries {
    pub fn zero(m: usize, nmax: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::ArityMismatch { expected: 1, got: 0 });
        }
        let dims = nmax + 1;
        let len = dims.checked_pow(m as u32).filter(|&l| l <= MAX_COEFFS);
        match len {
            Some(len) => Ok(TruncatedSeries { m, nmax, dims, coeffs: vec![0.0; len] }),
            None => Err(Error::SeriesTooLarge { m, n: nmax }),
        }
    }

    pub fn constant(m: usize, nmax: usize, c: f64) -> Result<Self> {
        let mut s = Self::zero(m, nmax)?;
        s.coeffs[0] = c;
        Ok(s)
    }

    /// The monomial `c * s^exp` (zero series if `|exp| > nmax`).
    pub fn monomial(m: usize, nmax: usize, exp: &[u32], c: f64) -> Result<Self> {
        let mut s = Self::zero(m, nmax)?;
        if exp.len() != m {
            return Err(Error::ArityMismatch { expected: m, got: exp.len() });
        }
        if exp.iter().map(|&e| e as usize).sum::<usize>() <= nmax {
            let r = s.rank(exp);
            s.coeffs[r] = c;
        }
        Ok(s)
    }

    pub fn arity(&self) -> usize {
        self.m
    }

    pub fn truncation(&self) -> usize {
        self.nmax
    }

    fn stride(&self, coord: usize) -> usize {
        self.dims.pow((self.m - 1 - coord) as u32)
    }

    fn rank(&self, exp: &[u32]) -> usize {
        let mut r = 0;
        for (c, &e) in exp.iter().enumerate() {
            r += e as usize * self.stride(c);
        }
        r
    }

    pub fn get(&self, exp: &[u32]) -> f64 {
        debug_assert_eq!(exp.len(), self.m);
        if exp.iter().map(|&e| e as usize).sum::<usize>() > self.nmax {
            return 0.0;
        }
        self.coeffs[self.rank(exp)]
    }

    pub fn set(&mut self, exp: &[u32], v: f64) {
        let total: usize = exp.iter().map(|&e| e as usize).sum();
        assert!(total <= self.nmax, "exponent {exp:?} beyond truncation {}", self.nmax);
        let r = self.rank(exp);
        self.coeffs[r] = v;
    }

    /// Re-truncates to `nmax2`, dropping or zero-extending degrees.
    pub fn with_truncation(&self, nmax2: usize) -> Result<Self> {
        let mut out = Self::zero(self.m, nmax2)?;
        let keep = self.nmax.min(nmax2);
        self.for_each(|exp, v| {
            if v != 0.0 && exp.iter().map(|&e| e as usize).sum::<usize>() <= keep {
                let r = out.rank(exp);
                out.coeffs[r] = v;
            }
        });
        Ok(out)
    }

    /// Visits every stored exponent (total degree <= nmax) in graded
    /// order within each coordinate block; the order is deterministic.
    pub fn for_each(&self, mut f: impl FnMut(&[u32], f64)) {
        let mut exp = vec![0u32; self.m];
        let mut rank = 0usize;
        loop {
            f(&exp, self.coeffs[rank]);
            if !self.advance(&mut exp, &mut rank) {
                return;
            }
        }
    }

    // Odometer over exponents with total degree <= nmax.
    fn advance(&self, exp: &mut [u32], rank: &mut usize) -> bool {
        let total: usize = exp.iter().map(|&e| e as usize).sum();
        if total < self.nmax {
            exp[self.m - 1] += 1;
            *rank += 1;
            return true;
        }
        // carry: zero out trailing coordinates until one can increment
        for c in (0..self.m).rev() {
            if exp[c] > 0 && c > 0 {
                *rank -= exp[c] as usize * self.stride(c);
                exp[c] = 0;
                exp[c - 1] += 1;
                *rank += self.stride(c - 1);
                let t: usize = exp.iter().map(|&e| e as usize).sum();
                if t <= self.nmax {
                    return true;
                }
            } else if c == 0 {
                return false;
            }
        }
        false
    }

    fn compat(&self, other: &Self) -> Result<()> {
        if self.m != other.m || self.nmax != other.nmax {
            return Err(Error::ArityMismatch { expected: self.m, got: other.m });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.compat(other)?;
        let mut out = self.clone();
        for (o, &b) in out.coeffs.iter_mut().zip(&other.coeffs) {
            *o += b;
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.compat(other)?;
        let mut out = self.clone();
        for (o, &b) in out.coeffs.iter_mut().zip(&other.coeffs) {
            *o -= b;
        }
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = self.clone();
        for o in &mut out.coeffs {
            *o *= c;
        }
        out
    }

    /// Truncated product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.compat(other)?;
        let mut out = Self::zero(self.m, self.nmax)?;
        let mut exp = vec![0u32; self.m];
        let mut rank = 0usize;
        loop {
            let av = self.coeffs[rank];
            if av != 0.0 {
                let deg: usize = exp.iter().map(|&e| e as usize).sum();
                axpy_block(
                    &other.coeffs,
                    &mut out.coeffs,
                    self.m,
                    self.dims,
                    0,
                    self.nmax - deg,
                    0,
                    rank,
                    av,
                );
            }
            if !self.advance(&mut exp, &mut rank) {
                break;
            }
        }
        Ok(out)
    }

    pub fn pow(&self, k: u32) -> Result<Self> {
        let mut out = Self::constant(self.m, self.nmax, 1.0)?;
        for _ in 0..k {
            out = out.mul(self)?;
        }
        Ok(out)
    }

    /// Partial derivative in coordinate `j`. Keeps the truncation order;
    /// the top-degree slice of the result is not populated by design.
    pub fn diff(&self, j: usize) -> Self {
        let mut out = Self::zero(self.m, self.nmax).expect("same size");
        let stride = self.stride(j);
        self.for_each(|exp, v| {
            if v != 0.0 && exp[j] > 0 {
                let r = out.rank(exp) - stride;
                out.coeffs[r] = exp[j] as f64 * v;
            }
        });
        out
    }

    /// Multiplication by the variable `s_j`; degree-`nmax` terms drop out.
    pub fn shift(&self, j: usize) -> Self {
        let mut out = Self::zero(self.m, self.nmax).expect("same size");
        let stride = self.stride(j);
        self.for_each(|exp, v| {
            if v != 0.0 && exp.iter().map(|&e| e as usize).sum::<usize>() < self.nmax {
                let r = out.rank(exp) + stride;
                out.coeffs[r] = v;
            }
        });
        out
    }

    /// Multiplicative inverse; needs a nonzero constant term. Satisfies
    /// `self.mul(&inv) = 1` up to the truncation order.
    pub fn inv(&self) -> Result<Self> {
        let a0 = self.coeffs[0];
        if a0 == 0.0 {
            return Err(Error::ZeroConstantTerm);
        }
        let mut out = Self::zero(self.m, self.nmax)?;
        out.coeffs[0] = 1.0 / a0;
        for d in 1..=self.nmax {
            for_degree(self.m, d, &mut |exp: &[u32]| {
                let re = out.rank(exp);
                // h = 0 contributes a0 * out[e], which is still 0 here
                let s = sub_sum(&self.coeffs, &out.coeffs, self.m, self.dims, exp, false);
                out.coeffs[re] = -s / a0;
            });
        }
        Ok(out)
    }

    /// Formal exponential, degree by degree via the Euler-operator
    /// recurrence `d f_d = sum_e (e v_e) * f_{d-e}`; the constant term
    /// factors out as an ordinary `exp`.
    pub fn exp_series(&self) -> Result<Self> {
        let c = self.coeffs[0];
        let mut v = self.clone();
        v.coeffs[0] = 0.0;
        let mut out = Self::zero(self.m, self.nmax)?;
        out.coeffs[0] = 1.0;
        for d in 1..=self.nmax {
            for_degree(self.m, d, &mut |exp: &[u32]| {
                let re = out.rank(exp);
                let s = sub_sum(&v.coeffs, &out.coeffs, self.m, self.dims, exp, true);
                out.coeffs[re] = s / d as f64;
            });
        }
        Ok(out.scale(c.exp()))
    }

    /// Largest absolute coefficient difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.compat(other)?;
        Ok(self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Returns the exponent of the first coefficient that has underflowed
    /// to a nonzero subnormal, if any. Used as the linear-scale guard.
    fn first_subnormal(&self) -> Option<Vec<u32>> {
        let mut found = None;
        self.for_each(|exp, v| {
            if found.is_none() && v != 0.0 && v.abs() < f64::MIN_POSITIVE {
                found = Some(exp.to_vec());
            }
        });
        found
    }
}

/// `dst[dst_base + r] += scale * src[src_base + r]` over all exponent
/// offsets `r` with total degree <= budget. Innermost coordinate is the
/// contiguous one.
#[allow(clippy::too_many_arguments)]
fn axpy_block(
    src: &[f64],
    dst: &mut [f64],
    m: usize,
    dims: usize,
    level: usize,
    budget: usize,
    src_base: usize,
    dst_base: usize,
    scale: f64,
) {
    if level == m - 1 {
        for k in 0..=budget {
            dst[dst_base + k] += scale * src[src_base + k];
        }
        return;
    }
    let stride = dims.pow((m - 1 - level) as u32);
    for b in 0..=budget {
        axpy_block(
            src,
            dst,
            m,
            dims,
            level + 1,
            budget - b,
            src_base + b * stride,
            dst_base + b * stride,
            scale,
        );
    }
}

/// `sum_{h <= e} w(h) a[h] b[e - h]` with `w(h) = |h|` when `weighted`,
/// else `w = 1`. Box-rank additivity makes `rank(e - h) = rank(e) -
/// rank(h)`.
fn sub_sum(a: &[f64], b: &[f64], m: usize, dims: usize, e: &[u32], weighted: bool) -> f64 {
    fn rec(
        a: &[f64],
        b: &[f64],
        m: usize,
        dims: usize,
        e: &[u32],
        level: usize,
        ra: usize,
        rb: usize,
        deg: usize,
        weighted: bool,
    ) -> f64 {
        if level == m - 1 {
            let mut s = 0.0;
            if weighted {
                for h in 0..=e[level] as usize {
                    let av = a[ra + h];
                    if av != 0.0 {
                        s += (deg + h) as f64 * av * b[rb - h];
                    }
                }
            } else {
                for h in 0..=e[level] as usize {
                    let av = a[ra + h];
                    if av != 0.0 {
                        s += av * b[rb - h];
                    }
                }
            }
            return s;
        }
        let stride = dims.pow((m - 1 - level) as u32);
        let mut s = 0.0;
        for h in 0..=e[level] as usize {
            s += rec(a, b, m, dims, e, level + 1, ra + h * stride, rb - h * stride, deg + h, weighted);
        }
        s
    }
    let rb = {
        let mut r = 0;
        for (c, &v) in e.iter().enumerate() {
            r += v as usize * dims.pow((m - 1 - c) as u32);
        }
        r
    };
    rec(a, b, m, dims, e, 0, 0, rb, 0, weighted)
}

/// Visits every exponent of total degree exactly `d`.
fn for_degree(m: usize, d: usize, f: &mut impl FnMut(&[u32])) {
    fn rec(exp: &mut Vec<u32>, level: usize, m: usize, left: usize, f: &mut impl FnMut(&[u32])) {
        if level == m - 1 {
            exp[level] = left as u32;
            f(exp);
            return;
        }
        for v in 0..=left {
            exp[level] = v as u32;
            rec(exp, level + 1, m, left - v, f);
        }
    }
    let mut exp = vec![0u32; m];
    rec(&mut exp, 0, m, d, f);
}

/// All exponents with `|n| <= nmax` in graded lexicographic order.
pub fn graded_exponents(m: usize, nmax: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for d in 0..=nmax {
        for_degree(m, d, &mut |exp: &[u32]| out.push(exp.to_vec()));
    }
    out
}

/// Truncated composition `G_{X_k}(args_1, ..., args_m)`.
pub fn offspring_pgf(
    model: &OffspringModel,
    k: usize,
    args: &[TruncatedSeries],
) -> Result<TruncatedSeries> {
    let m = model.m();
    if args.len() != m {
        return Err(Error::ArityMismatch { expected: m, got: args.len() });
    }
    let arity = args[0].arity();
    let nmax = args[0].truncation();
    match &model.offspring[k] {
        OffspringDist::Table { entries } => {
            // powers[j][t] = args_j^t, grown on demand
            let mut powers: Vec<Vec<TruncatedSeries>> = (0..m)
                .map(|_| vec![TruncatedSeries::constant(arity, nmax, 1.0).expect("size checked")])
                .collect();
            let mut out = TruncatedSeries::zero(arity, nmax)?;
            for e in entries {
                let mut term = TruncatedSeries::constant(arity, nmax, e.p)?;
                for j in 0..m {
                    let t = e.x[j] as usize;
                    while powers[j].len() <= t {
                        let next = powers[j].last().unwrap().mul(&args[j])?;
                        powers[j].push(next);
                    }
                    if t > 0 {
                        term = term.mul(&powers[j][t])?;
                    }
                }
                out = out.add(&term)?;
            }
            Ok(out)
        }
        OffspringDist::PoissonProduct { mu } => {
            let mut u = TruncatedSeries::constant(arity, nmax, -mu.iter().sum::<f64>())?;
            for j in 0..m {
                u = u.add(&args[j].scale(mu[j]))?;
            }
            u.exp_series()
        }
    }
}

/// Exact values `P(T^{(i)} = n)` for every root type `i` and `|n| <=
/// nmax`, plus the root-mixed law `P(T = n) = sum_i p_i P(T^{(i)} = n)`.
#[derive(Debug, Clone)]
pub struct ProgenyTable {
    pub m: usize,
    pub nmax: usize,
    pub q: Vec<TruncatedSeries>,
    pub mixed: TruncatedSeries,
}

impl ProgenyTable {
    pub fn q(&self, root: usize, n: &[u32]) -> f64 {
        self.q[root].get(n)
    }

    pub fn mixed(&self, n: &[u32]) -> f64 {
        self.mixed.get(n)
    }

    /// Total probability mass captured up to the truncation.
    pub fn total_mass(&self) -> f64 {
        let mut s = 0.0;
        self.mixed.for_each(|_, v| s += v);
        s
    }

    /// CSV export: `n_1,...,n_m,root_type,probability`, graded
    /// lexicographic row order, root types first, then the `mixed`
    /// pseudo-root block.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let cols: Vec<String> = (1..=self.m).map(|j| format!("n_{j}")).collect();
        writeln!(w, "{},root_type,probability", cols.join(","))?;
        let exps = graded_exponents(self.m, self.nmax);
        for (root, table) in self.q.iter().enumerate() {
            for n in &exps {
                if n.iter().all(|&v| v == 0) {
                    continue;
                }
                let row: Vec<String> = n.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{},{},{}", row.join(","), root + 1, table.get(n))?;
            }
        }
        for n in &exps {
            if n.iter().all(|&v| v == 0) {
                continue;
            }
            let row: Vec<String> = n.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},mixed,{}", row.join(","), self.mixed.get(n))?;
        }
        Ok(())
    }
}

fn mixed_from(model: &OffspringModel, q: &[TruncatedSeries]) -> Result<TruncatedSeries> {
    let mut mixed = TruncatedSeries::zero(q[0].arity(), q[0].truncation())?;
    for (i, qi) in q.iter().enumerate() {
        mixed = mixed.add(&qi.scale(model.root[i]))?;
    }
    Ok(mixed)
}

/// One application of the implicit-system map `G_i -> s_i G_{X_i}(G_1,
/// ..., G_m)` at the truncation of `args`.
pub fn progeny_iteration(
    model: &OffspringModel,
    args: &[TruncatedSeries],
) -> Result<Vec<TruncatedSeries>> {
    (0..model.m())
        .map(|i| Ok(offspring_pgf(model, i, args)?.shift(i)))
        .collect()
}

/// Production path for the progeny law: iterate the implicit-system map
/// from the zero series. Iteration `t` fixes every coefficient of total
/// degree `t`, so `nmax` iterations suffice; the working truncation grows
/// with `t`, which changes no retained coefficient.
pub fn solve_progeny(model: &OffspringModel, nmax: usize) -> Result<ProgenyTable> {
    let m = model.m();
    let mut g: Vec<TruncatedSeries> =
        (0..m).map(|_| TruncatedSeries::zero(m, 0)).collect::<Result<_>>()?;
    for t in 1..=nmax {
        let args: Vec<TruncatedSeries> =
            g.iter().map(|s| s.with_truncation(t)).collect::<Result<_>>()?;
        g = progeny_iteration(model, &args)?;
        for gi in &g {
            if let Some(exp) = gi.first_subnormal() {
                return Err(Error::Underflow(exp));
            }
        }
    }
    let mixed = mixed_from(model, &g)?;
    Ok(ProgenyTable { m, nmax, q: g, mixed })
}

type SparseMap = HashMap<Vec<u32>, f64>;

fn sparse_conv(a: &SparseMap, b: &SparseMap, budget: usize) -> SparseMap {
    let mut out = SparseMap::new();
    for (xa, &pa) in a {
        let da: usize = xa.iter().map(|&v| v as usize).sum();
        for (xb, &pb) in b {
            let db: usize = xb.iter().map(|&v| v as usize).sum();
            if da + db > budget {
                continue;
            }
            let key: Vec<u32> = xa.iter().zip(xb).map(|(&u, &v)| u + v).collect();
            *out.entry(key).or_insert(0.0) += pa * pb;
        }
    }
    out
}

/// Independent oracle by direct subtree decomposition: `q_i(n) = sum_x
/// P(X_i = x) P(sum of x_j independent copies of T^{(j)} = n - e_i)`,
/// evaluated stage by stage with explicit convolution powers. Table
/// offspring only; convert Poisson types up front if needed.
pub fn recursion_oracle(model: &OffspringModel, nmax: usize) -> Result<ProgenyTable> {
    let m = model.m();
    let entries: Vec<&Vec<crate::model::TableEntry>> = model
        .offspring
        .iter()
        .map(|d| match d {
            OffspringDist::Table { entries } => Ok(entries),
            OffspringDist::PoissonProduct { .. } => Err(Error::TableOnly("recursion_oracle")),
        })
        .collect::<Result<_>>()?;

    let mut q: Vec<SparseMap> = vec![SparseMap::new(); m];
    for d in 1..=nmax {
        let mut fresh: Vec<SparseMap> = vec![SparseMap::new(); m];
        for i in 0..m {
            for e in entries[i] {
                // convolution of x_j copies of each q_j, total degree d - 1
                let mut conv = SparseMap::new();
                conv.insert(vec![0u32; m], 1.0);
                for j in 0..m {
                    for _ in 0..e.x[j] {
                        conv = sparse_conv(&conv, &q[j], d - 1);
                    }
                }
                for (v, &pv) in &conv {
                    if v.iter().map(|&u| u as usize).sum::<usize>() != d - 1 {
                        continue;
                    }
                    let mut key = v.clone();
                    key[i] += 1;
                    *fresh[i].entry(key).or_insert(0.0) += e.p * pv;
                }
            }
        }
        for i in 0..m {
            for (k, v) in fresh[i].drain() {
                *q[i].entry(k).or_insert(0.0) += v;
            }
        }
    }

    let mut dense: Vec<TruncatedSeries> = Vec::with_capacity(m);
    for qi in &q {
        let mut s = TruncatedSeries::zero(m, nmax)?;
        for (k, &v) in qi {
            s.set(k, v);
        }
        dense.push(s);
    }
    let mixed = mixed_from(model, &dense)?;
    Ok(ProgenyTable { m, nmax, q: dense, mixed })
}

/// Default coefficient budget for the inversion oracles.
pub const ORACLE_BUDGET: usize = 10;

fn check_budget(n: &[u32]) -> Result<usize> {
    let total: usize = n.iter().map(|&v| v as usize).sum();
    if total > ORACLE_BUDGET {
        return Err(Error::OracleBudget { got: total, budget: ORACLE_BUDGET });
    }
    Ok(total)
}

/// Offspring PGFs as series in the inversion variables `r_1, ..., r_m`.
fn pgf_in_r(model: &OffspringModel, nmax: usize) -> Result<Vec<TruncatedSeries>> {
    let m = model.m();
    let vars: Vec<TruncatedSeries> = (0..m)
        .map(|j| {
            let mut e = vec![0u32; m];
            e[j] = 1;
            TruncatedSeries::monomial(m, nmax, &e, 1.0)
        })
        .collect::<Result<_>>()?;
    (0..m).map(|i| offspring_pgf(model, i, &vars)).collect()
}

fn det_series(mat: &[Vec<TruncatedSeries>]) -> Result<TruncatedSeries> {
    let n = mat.len();
    if n == 1 {
        return Ok(mat[0][0].clone());
    }
    let mut out = TruncatedSeries::zero(mat[0][0].arity(), mat[0][0].truncation())?;
    for j in 0..n {
        // minor of (0, j)
        let minor: Vec<Vec<TruncatedSeries>> = (1..n)
            .map(|r| (0..n).filter(|&c| c != j).map(|c| mat[r][c].clone()).collect())
            .collect();
        let term = mat[0][j].mul(&det_series(&minor)?)?;
        out = if j % 2 == 0 { out.add(&term)? } else { out.sub(&term)? };
    }
    Ok(out)
}

/// Determinant-form inversion oracle:
/// `P(T = n) = sum_k p_k [r^n] r_k det(K(r)) prod_i G_{X_i}^{n_i}` with
/// `K_{ij} = delta_{ij} - (r_i / G_{X_i}) dG_{X_i}/dr_j`. Table models,
/// `|n|` within the oracle budget.
pub fn lagrange_good_oracle(model: &OffspringModel, n: &[u32]) -> Result<f64> {
    let m = model.m();
    if n.len() != m {
        return Err(Error::ArityMismatch { expected: m, got: n.len() });
    }
    let nmax = check_budget(n)?;
    for d in &model.offspring {
        if matches!(d, OffspringDist::PoissonProduct { .. }) {
            return Err(Error::TableOnly("lagrange_good_oracle"));
        }
    }
    let g = pgf_in_r(model, nmax)?;
    let one = TruncatedSeries::constant(m, nmax, 1.0)?;

    let mut k_mat: Vec<Vec<TruncatedSeries>> = Vec::with_capacity(m);
    for i in 0..m {
        let inv_gi = g[i].inv()?;
        let mut row = Vec::with_capacity(m);
        for j in 0..m {
            let frac = inv_gi.mul(&g[i].diff(j))?.shift(i);
            let entry = if i == j { one.sub(&frac)? } else { frac.scale(-1.0) };
            row.push(entry);
        }
        k_mat.push(row);
    }
    let det = det_series(&k_mat)?;

    let mut prod = det;
    for i in 0..m {
        prod = prod.mul(&g[i].pow(n[i])?)?;
    }
    let mut total = 0.0;
    for k in 0..m {
        total += model.root[k] * prod.shift(k).get(n);
    }
    Ok(total)
}

/// Decodes a Pruefer sequence over `{0, ..., v-1}` into the parent map
/// of the tree rooted at 0 (edges directed toward 0).
fn prufer_to_parents(seq: &[usize], v: usize) -> Vec<usize> {
    let mut degree_work = vec![1usize; v];
    for &s in seq {
        degree_work[s] += 1;
    }
    let mut edges: Vec<(usize, usize)> = Vec::with_capacity(v - 1);
    let mut leaf_candidates: std::collections::BinaryHeap<std::cmp::Reverse<usize>> = (0..v)
        .filter(|&i| degree_work[i] == 1)
        .map(std::cmp::Reverse)
        .collect();
    for &s in seq {
        let std::cmp::Reverse(leaf) = leaf_candidates.pop().expect("valid sequence");
        edges.push((leaf, s));
        degree_work[s] -= 1;
        if degree_work[s] == 1 {
            leaf_candidates.push(std::cmp::Reverse(s));
        }
    }
    let std::cmp::Reverse(a) = leaf_candidates.pop().expect("two vertices left");
    let std::cmp::Reverse(b) = leaf_candidates.pop().expect("two vertices left");
    edges.push((a, b));

    // orient toward the root 0
    let mut adj = vec![Vec::new(); v];
    for &(a, b) in &edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut parent = vec![usize::MAX; v];
    let mut stack = vec![0usize];
    let mut seen = vec![false; v];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for &w in &adj[u] {
            if !seen[w] {
                seen[w] = true;
                parent[w] = u;
                stack.push(w);
            }
        }
    }
    parent
}

/// Tree-derivative summand for one rooted tree, divided by `prod n_i`:
/// `(1 / prod n_i) [r^{n-1}] prod_j (prod_{children i of j} d/dr_i) f_j`
/// with `f_0 = sum_k p_k r_k` and `f_j = G_{X_j}^{n_j}`.
fn tree_term(
    model: &OffspringModel,
    n: &[u32],
    parent: &[usize],
    g_pow: &[TruncatedSeries],
    nmax: usize,
) -> Result<f64> {
    let m = model.m();
    let mut children = vec![Vec::new(); m + 1];
    for i in 1..=m {
        children[parent[i]].push(i);
    }
    let mut prod = TruncatedSeries::constant(m, nmax, 1.0)?;
    // root factor f_0 = sum_k p_k r_k differentiates to a constant or 0
    let f0 = match children[0].len() {
        0 => {
            let mut lin = TruncatedSeries::zero(m, nmax)?;
            if nmax >= 1 {
                for (k, &pk) in model.root.iter().enumerate() {
                    let mut e = vec![0u32; m];
                    e[k] = 1;
                    lin.set(&e, pk);
                }
            }
            lin
        }
        1 => TruncatedSeries::constant(m, nmax, model.root[children[0][0] - 1])?,
        _ => return Ok(0.0), // second derivative of a linear form
    };
    prod = prod.mul(&f0)?;
    for j in 1..=m {
        let mut f = g_pow[j - 1].clone();
        for &c in &children[j] {
            f = f.diff(c - 1);
        }
        prod = prod.mul(&f)?;
    }
    let n1: Vec<u32> = n.iter().map(|&v| v - 1).collect();
    let denom: f64 = n.iter().map(|&v| v as f64).product();
    Ok(prod.get(&n1) / denom)
}

fn arborescent_setup(
    model: &OffspringModel,
    n: &[u32],
) -> Result<(usize, Vec<TruncatedSeries>)> {
    let m = model.m();
    if n.len() != m {
        return Err(Error::ArityMismatch { expected: m, got: n.len() });
    }
    if n.contains(&0) {
        return Err(Error::ZeroComponent(n.to_vec()));
    }
    // each derivative loses the top-degree slice of a truncated series;
    // m derivatives are applied in total, so work at truncation |n|
    let nmax = check_budget(n)?;
    let g = pgf_in_r(model, nmax)?;
    let g_pow: Vec<TruncatedSeries> =
        (0..m).map(|j| g[j].pow(n[j])).collect::<Result<_>>()?;
    Ok((nmax, g_pow))
}

/// Arborescent inversion oracle: the tree-derivative sum over all
/// `(m+1)^{m-1}` trees on `{0, ..., m}` directed toward 0. Needs `n >= 1`
/// componentwise and small `m` (the enumeration is exhaustive).
pub fn arborescent_oracle(model: &OffspringModel, n: &[u32]) -> Result<f64> {
    let m = model.m();
    if m > 3 {
        return Err(Error::OracleBudget { got: m, budget: 3 });
    }
    let (nmax, g_pow) = arborescent_setup(model, n)?;
    let v = m + 1;
    let mut total = 0.0;
    if m == 1 {
        // single tree: the edge 1 -> 0
        let parent = vec![usize::MAX, 0];
        return tree_term(model, n, &parent, &g_pow, nmax);
    }
    // enumerate Pruefer sequences of length m - 1 over {0, ..., m}
    let seq_len = v - 2;
    let count = (v as u64).pow(seq_len as u32);
    for code in 0..count {
        let mut seq = Vec::with_capacity(seq_len);
        let mut c = code;
        for _ in 0..seq_len {
            seq.push((c % v as u64) as usize);
            c /= v as u64;
        }
        let parent = prufer_to_parents(&seq, v);
        total += tree_term(model, n, &parent, &g_pow, nmax)?;
    }
    Ok(total)
}

/// The single directed-path-tree summand (edges `j -> j-1`), divided by
/// `prod n_i`. A nonnegative lower bound on `P(T = n)`.
pub fn path_tree_term(model: &OffspringModel, n: &[u32]) -> Result<f64> {
    let m = model.m();
    let (nmax, g_pow) = arborescent_setup(model, n)?;
    let mut parent = vec![usize::MAX; m + 1];
    for i in 1..=m {
        parent[i] = i - 1;
    }
    tree_term(model, n, &parent, &g_pow, nmax)
}

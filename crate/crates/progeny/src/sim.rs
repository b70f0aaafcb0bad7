//! Monte Carlo simulation of total progeny with exponential tilting.
//!
//! Each replicate explores one family tree breadth-first, tracking only
//! per-type counts. Offspring are drawn from the `lambda`-tilted law and
//! every draw contributes `log M_k(lambda) - lambda . x` to the
//! replicate's log weight, so the weighted indicator of any event is an
//! unbiased estimate of its untilted probability. With `lambda = 0` this
//! reduces to plain Monte Carlo.

use std::io::Write;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{OffspringDist, OffspringModel};
use crate::{Error, Result};

/// Simulation settings; serialized into output manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub replicates: usize,
    pub seed: u64,
    /// Total-population censoring bound: a replicate whose family tree
    /// exceeds this many nodes is cut off and marked censored.
    pub cap: u64,
    /// Tilting parameter, one entry per type; zeros mean no tilt.
    pub lambda: Vec<f64>,
}

/// One simulated family tree, reduced to counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRecord {
    pub root_type: usize,
    /// Number of nodes of each type, root included. Meaningful only
    /// when `censored` is false.
    pub totals: Vec<u64>,
    pub censored: bool,
    pub log_weight: f64,
}

/// A batch of replicates plus enough metadata to reproduce it.
#[derive(Debug, Clone)]
pub struct SimBatch {
    pub config: SimConfig,
    pub model_fingerprint: u64,
    pub records: Vec<SimRecord>,
}

/// Estimate of one point probability from a batch.
#[derive(Debug, Clone)]
pub struct PmfEstimate {
    pub estimate: f64,
    pub std_error: f64,
    /// Replicates that hit the event.
    pub hits: usize,
    /// Effective sample size of the weights on the event,
    /// `(sum w)^2 / sum w^2`.
    pub ess: f64,
}

/// Walker-Vose alias table for O(1) discrete sampling.
struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<usize>,
}

impl AliasTable {
    fn new(weights: &[f64]) -> Self {
        let n = weights.len();
        let total: f64 = weights.iter().sum();
        let mut scaled: Vec<f64> = weights.iter().map(|&w| w * n as f64 / total).collect();
        let mut small: Vec<usize> = (0..n).filter(|&i| scaled[i] < 1.0).collect();
        let mut large: Vec<usize> = (0..n).filter(|&i| scaled[i] >= 1.0).collect();
        let mut prob = vec![1.0; n];
        let mut alias = vec![0usize; n];
        while let (Some(s), Some(l)) = (small.pop(), large.pop()) {
            prob[s] = scaled[s];
            alias[s] = l;
            scaled[l] = scaled[l] + scaled[s] - 1.0;
            if scaled[l] < 1.0 {
                small.push(l);
            } else {
                large.push(l);
            }
        }
        // leftovers are 1 up to rounding
        AliasTable { prob, alias }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let i = rng.gen_range(0..self.prob.len());
        if rng.gen::<f64>() < self.prob[i] {
            i
        } else {
            self.alias[i]
        }
    }
}

/// Per-type offspring sampler under the tilted law.
enum TypeSampler {
    Table {
        alias: AliasTable,
        xs: Vec<Vec<u32>>,
        /// `log M_k(lambda) - lambda . x` per entry, the weight increment.
        log_w: Vec<f64>,
    },
    Poisson {
        /// Tilted means `mu_j e^{lambda_j}`.
        means: Vec<f64>,
        log_norm: f64,
        lambda: Vec<f64>,
    },
}

fn poisson_draw<R: Rng>(mean: f64, rng: &mut R) -> u64 {
    if mean == 0.0 {
        return 0;
    }
    if mean < 10.0 {
        // inversion by sequential search
        let mut u: f64 = rng.gen();
        let mut p = (-mean).exp();
        let mut k = 0u64;
        loop {
            if u <= p || k > 400 {
                return k;
            }
            u -= p;
            k += 1;
            p *= mean / k as f64;
        }
    }
    rand_distr::Poisson::new(mean).expect("positive mean").sample(rng) as u64
}

impl TypeSampler {
    fn build(model: &OffspringModel, k: usize, lambda: &[f64]) -> Result<Self> {
        let log_norm = model.log_mgf(k, lambda)?;
        if !log_norm.is_finite() {
            return Err(Error::MgfOverflow(lambda.to_vec()));
        }
        match &model.offspring[k] {
            OffspringDist::Table { entries } => {
                let weights: Vec<f64> = entries
                    .iter()
                    .map(|e| {
                        let d: f64 =
                            e.x.iter().zip(lambda).map(|(&x, &l)| x as f64 * l).sum();
                        e.p * (d - log_norm).exp()
                    })
                    .collect();
                let log_w: Vec<f64> = entries
                    .iter()
                    .map(|e| {
                        let d: f64 =
                            e.x.iter().zip(lambda).map(|(&x, &l)| x as f64 * l).sum();
                        log_norm - d
                    })
                    .collect();
                Ok(TypeSampler::Table {
                    alias: AliasTable::new(&weights),
                    xs: entries.iter().map(|e| e.x.clone()).collect(),
                    log_w,
                })
            }
            OffspringDist::PoissonProduct { mu } => Ok(TypeSampler::Poisson {
                means: mu.iter().zip(lambda).map(|(&m, &l)| m * l.exp()).collect(),
                log_norm,
                lambda: lambda.to_vec(),
            }),
        }
    }

    /// Draws one offspring vector into `out`; returns the log-weight
    /// increment.
    fn draw<R: Rng>(&self, rng: &mut R, out: &mut [u64]) -> f64 {
        match self {
            TypeSampler::Table { alias, xs, log_w } => {
                let i = alias.sample(rng);
                for (o, &x) in out.iter_mut().zip(&xs[i]) {
                    *o = x as u64;
                }
                log_w[i]
            }
            TypeSampler::Poisson { means, log_norm, lambda } => {
                let mut lw = *log_norm;
                for j in 0..means.len() {
                    let x = poisson_draw(means[j], rng);
                    out[j] = x;
                    lw -= lambda[j] * x as f64;
                }
                lw
            }
        }
    }
}

/// Runs the batch. Replicate `i` uses ChaCha stream `i + 1` of the
/// seeded generator, so results are independent of thread scheduling
/// and individual replicates can be replayed.
pub fn sample(model: &OffspringModel, config: &SimConfig) -> Result<SimBatch> {
    let m = model.m();
    if config.lambda.len() != m {
        return Err(Error::ArityMismatch { expected: m, got: config.lambda.len() });
    }
    if config.replicates == 0 {
        return Err(Error::EmptyBatch);
    }
    let samplers: Vec<TypeSampler> =
        (0..m).map(|k| TypeSampler::build(model, k, &config.lambda)).collect::<Result<_>>()?;
    let root_cdf: Vec<f64> = model
        .root
        .iter()
        .scan(0.0, |acc, &p| {
            *acc += p;
            Some(*acc)
        })
        .collect();

    let records: Vec<SimRecord> = (0..config.replicates)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64 + 1);
            run_replicate(&samplers, &root_cdf, config.cap, &mut rng)
        })
        .collect();
    Ok(SimBatch { config: config.clone(), model_fingerprint: model.fingerprint(), records })
}

fn run_replicate<R: Rng>(
    samplers: &[TypeSampler],
    root_cdf: &[f64],
    cap: u64,
    rng: &mut R,
) -> SimRecord {
    let m = samplers.len();
    let u: f64 = Uniform::new(0.0, 1.0).sample(rng);
    let root_type = root_cdf.iter().position(|&c| u < c).unwrap_or(m - 1);

    let mut pending = vec![0u64; m];
    let mut totals = vec![0u64; m];
    pending[root_type] = 1;
    totals[root_type] = 1;
    let mut born: u64 = 1;
    let mut log_weight = 0.0;
    let mut offspring = vec![0u64; m];

    while born <= cap {
        // next unexplored node, lowest type index first
        let Some(k) = pending.iter().position(|&c| c > 0) else {
            return SimRecord { root_type, totals, censored: false, log_weight };
        };
        pending[k] -= 1;
        log_weight += samplers[k].draw(rng, &mut offspring);
        for j in 0..m {
            pending[j] += offspring[j];
            totals[j] += offspring[j];
            born += offspring[j];
        }
    }
    SimRecord { root_type, totals, censored: true, log_weight }
}

/// Unbiased estimate of `P(T = n)` from the batch: the weighted mean of
/// the event indicator. Censored replicates count as misses, which is
/// exact whenever `|n|` is below the cap.
pub fn estimate_pmf(batch: &SimBatch, n: &[u32]) -> Result<PmfEstimate> {
    if batch.records.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let r = batch.records.len() as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut hits = 0usize;
    let mut wsum = 0.0;
    let mut wsq = 0.0;
    for rec in &batch.records {
        if rec.censored {
            continue;
        }
        let hit = rec.totals.len() == n.len()
            && rec.totals.iter().zip(n).all(|(&t, &v)| t == v as u64);
        if hit {
            let w = rec.log_weight.exp();
            sum += w;
            sum_sq += w * w;
            hits += 1;
            wsum += w;
            wsq += w * w;
        }
    }
    let mean = sum / r;
    // variance of the weighted indicator around its mean
    let var = (sum_sq / r - mean * mean).max(0.0);
    let ess = if wsq > 0.0 { wsum * wsum / wsq } else { 0.0 };
    Ok(PmfEstimate { estimate: mean, std_error: (var / r).sqrt(), hits, ess })
}

/// Weighted mean composition `T_k / |T|` over uncensored replicates.
pub fn composition_stats(batch: &SimBatch) -> Result<Vec<f64>> {
    let m = batch
        .records
        .first()
        .ok_or(Error::EmptyBatch)?
        .totals
        .len();
    let mut acc = vec![0.0; m];
    let mut wtot = 0.0;
    for rec in &batch.records {
        if rec.censored {
            continue;
        }
        let w = rec.log_weight.exp();
        let total: u64 = rec.totals.iter().sum();
        for k in 0..m {
            acc[k] += w * rec.totals[k] as f64 / total as f64;
        }
        wtot += w;
    }
    if wtot == 0.0 {
        return Err(Error::EmptyBatch);
    }
    Ok(acc.into_iter().map(|a| a / wtot).collect())
}

impl SimBatch {
    /// CSV export with a `#`-prefixed JSON manifest line carrying the
    /// configuration and model fingerprint.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let manifest = serde_json::json!({
            "config": self.config,
            "model_fingerprint": self.model_fingerprint,
        });
        writeln!(w, "# {manifest}")?;
        let m = self.records.first().map_or(0, |r| r.totals.len());
        let cols: Vec<String> = (1..=m).map(|j| format!("total_{j}")).collect();
        writeln!(w, "replicate,root_type,censored,log_weight,{}", cols.join(","))?;
        for (i, rec) in self.records.iter().enumerate() {
            let totals: Vec<String> = rec.totals.iter().map(|t| t.to_string()).collect();
            writeln!(
                w,
                "{},{},{},{},{}",
                i,
                rec.root_type + 1,
                rec.censored,
                rec.log_weight,
                totals.join(",")
            )?;
        }
        Ok(())
    }
}

//! Inhomogeneous random-graph demo: small components of a sparse
//! kernel-based graph are distributed like the total progeny of the
//! multi-type branching process with Poisson offspring means
//! `mu_kj = q_j kappa_kj` and root law `q`.

use std::collections::HashSet;
use std::io::Write;

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{ray, OffspringDist, OffspringModel};
use crate::{Error, Result};

/// Sparse inhomogeneous graph on `n` vertices: a fraction `q_i` of the
/// vertices carries type `i`, and a type-`i`/type-`j` pair is joined
/// independently with probability `kappa[i][j] / n`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelGraphSpec {
    pub n: usize,
    pub q: Vec<f64>,
    pub kappa: Vec<Vec<f64>>,
    pub seed: u64,
}

impl KernelGraphSpec {
    pub fn validate(&self) -> Result<()> {
        let m = self.q.len();
        if m == 0 || self.n == 0 {
            return Err(Error::InvalidGraphSpec("need at least one type and one vertex".into()));
        }
        if (self.q.iter().sum::<f64>() - 1.0).abs() > 1e-9 || self.q.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidGraphSpec(format!(
                "q must be a probability vector, got {:?}",
                self.q
            )));
        }
        if self.kappa.len() != m || self.kappa.iter().any(|r| r.len() != m) {
            return Err(Error::InvalidGraphSpec("kappa must be m x m".into()));
        }
        for i in 0..m {
            for j in 0..m {
                let k = self.kappa[i][j];
                if k < 0.0 || !k.is_finite() {
                    return Err(Error::InvalidGraphSpec(format!("kappa[{i}][{j}] = {k}")));
                }
                if (k - self.kappa[j][i]).abs() > 1e-12 {
                    return Err(Error::InvalidGraphSpec("kappa must be symmetric".into()));
                }
                if k / self.n as f64 > 1.0 {
                    return Err(Error::InvalidGraphSpec(format!(
                        "edge probability kappa[{i}][{j}]/n = {} exceeds 1",
                        k / self.n as f64
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The branching process describing the local limit of component
/// exploration: Poisson offspring with means `mu_kj = q_j kappa_kj`,
/// rooted at a uniformly chosen vertex (type law `q`).
pub fn local_limit_model(spec: &KernelGraphSpec) -> Result<OffspringModel> {
    spec.validate()?;
    let m = spec.q.len();
    let offspring = (0..m)
        .map(|k| OffspringDist::PoissonProduct {
            mu: (0..m).map(|j| spec.q[j] * spec.kappa[k][j]).collect(),
        })
        .collect();
    Ok(OffspringModel { types: vec![], root: spec.q.clone(), offspring })
}

/// One connected component, reduced to its type census.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub size: usize,
    pub counts: Vec<usize>,
}

/// Component decomposition of one sampled graph.
#[derive(Debug, Clone)]
pub struct ComponentSample {
    pub spec: KernelGraphSpec,
    /// Components ordered by their lowest vertex index.
    pub components: Vec<Component>,
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n as u32).collect() }
    }

    fn find(&mut self, x: u32) -> u32 {
        let mut r = x;
        while self.parent[r as usize] != r {
            r = self.parent[r as usize];
        }
        let mut c = x;
        while self.parent[c as usize] != r {
            let next = self.parent[c as usize];
            self.parent[c as usize] = r;
            c = next;
        }
        r
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[rb.max(ra) as usize] = ra.min(rb);
        }
    }
}

/// Samples the graph and returns its components. Vertices are assigned
/// types in contiguous blocks sized by largest-remainder rounding of
/// `q`, and each block pair receives a binomially drawn number of
/// distinct random edges, which is equivalent to independent
/// per-pair coin flips.
pub fn sample_components(spec: &KernelGraphSpec) -> Result<ComponentSample> {
    spec.validate()?;
    let m = spec.q.len();
    let n = spec.n;
    let counts = ray(&spec.q, n);
    let mut block_start = vec![0usize; m + 1];
    for i in 0..m {
        block_start[i + 1] = block_start[i] + counts[i] as usize;
    }
    let type_of = |v: usize| -> usize {
        (0..m).rfind(|&i| v >= block_start[i]).expect("vertex in some block")
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut uf = UnionFind::new(n);
    let mut seen: HashSet<(u32, u32)> = HashSet::new();
    for i in 0..m {
        for j in i..m {
            let ni = counts[i] as u64;
            let nj = counts[j] as u64;
            let pairs = if i == j { ni * (ni - 1) / 2 } else { ni * nj };
            if pairs == 0 {
                continue;
            }
            let p = spec.kappa[i][j] / n as f64;
            let edges = rand_distr::Binomial::new(pairs, p)
                .expect("validated probability")
                .sample(&mut rng);
            seen.clear();
            let mut drawn = 0u64;
            while drawn < edges {
                let a = rng.gen_range(block_start[i]..block_start[i + 1]) as u32;
                let b = rng.gen_range(block_start[j]..block_start[j + 1]) as u32;
                if a == b {
                    continue;
                }
                let key = (a.min(b), a.max(b));
                if seen.insert(key) {
                    uf.union(key.0, key.1);
                    drawn += 1;
                }
            }
        }
    }

    // group by root, ordered by lowest member
    let mut index_of_root = vec![usize::MAX; n];
    let mut components: Vec<Component> = Vec::new();
    for v in 0..n {
        let r = uf.find(v as u32) as usize;
        if index_of_root[r] == usize::MAX {
            index_of_root[r] = components.len();
            components.push(Component { size: 0, counts: vec![0; m] });
        }
        let c = &mut components[index_of_root[r]];
        c.size += 1;
        c.counts[type_of(v)] += 1;
    }
    Ok(ComponentSample { spec: spec.clone(), components })
}

impl ComponentSample {
    pub fn largest(&self) -> usize {
        self.components.iter().map(|c| c.size).max().unwrap_or(0)
    }

    /// Number of components whose type census equals `n`.
    pub fn count_matching(&self, n: &[u32]) -> usize {
        self.components
            .iter()
            .filter(|c| c.counts.len() == n.len() && c.counts.iter().zip(n).all(|(&a, &b)| a == b as usize))
            .count()
    }

    /// CSV export: manifest line, then `component_id,size,count_1,...`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "# {}", serde_json::to_string(&self.spec)?)?;
        let m = self.spec.q.len();
        let cols: Vec<String> = (1..=m).map(|j| format!("count_{j}")).collect();
        writeln!(w, "component_id,size,{}", cols.join(","))?;
        for (i, c) in self.components.iter().enumerate() {
            let counts: Vec<String> = c.counts.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{},{}", i, c.size, counts.join(","))?;
        }
        Ok(())
    }
}

//! Randomized algebraic invariants of the series arithmetic and the
//! rate function.

use progeny::model::{OffspringDist, OffspringModel, TableEntry};
use progeny::rate;
use progeny::series::{graded_exponents, solve_progeny, TruncatedSeries};
use proptest::prelude::*;

const M: usize = 2;
const NMAX: usize = 5;

fn series_strategy() -> impl Strategy<Value = TruncatedSeries> {
    let n_coeffs = graded_exponents(M, NMAX).len();
    proptest::collection::vec(-2.0f64..2.0, n_coeffs).prop_map(|vals| {
        let mut s = TruncatedSeries::zero(M, NMAX).unwrap();
        for (exp, v) in graded_exponents(M, NMAX).iter().zip(vals) {
            s.set(exp, v);
        }
        s
    })
}

/// Two-type table model with full support on {0,1,2}^2 and enough mass at
/// the origin to stay subcritical.
fn table_model_strategy() -> impl Strategy<Value = OffspringModel> {
    let weights = proptest::collection::vec(0.05f64..1.0, 2 * 9);
    (weights, 0.2f64..0.8).prop_map(|(w, r)| {
        let mut offspring = Vec::new();
        for k in 0..2 {
            let mut entries = Vec::new();
            let mut total = 0.0;
            for x1 in 0..3u32 {
                for x2 in 0..3u32 {
                    let base = w[k * 9 + (x1 * 3 + x2) as usize];
                    // push mass toward the origin so the process dies out
                    let p = base / (1.0 + 3.0 * (x1 + x2) as f64);
                    entries.push(TableEntry { x: vec![x1, x2], p });
                    total += p;
                }
            }
            for e in &mut entries {
                e.p /= total;
            }
            offspring.push(OffspringDist::Table { entries });
        }
        OffspringModel { types: vec![], root: vec![r, 1.0 - r], offspring }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mul_commutes(a in series_strategy(), b in series_strategy()) {
        let ab = a.mul(&b).unwrap();
        let ba = b.mul(&a).unwrap();
        prop_assert!(ab.max_abs_diff(&ba).unwrap() <= 1e-12);
    }

    #[test]
    fn mul_distributes_over_add(
        a in series_strategy(),
        b in series_strategy(),
        c in series_strategy(),
    ) {
        let lhs = a.mul(&b.add(&c).unwrap()).unwrap();
        let rhs = a.mul(&b).unwrap().add(&a.mul(&c).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-11);
    }

    #[test]
    fn inv_is_two_sided(mut a in series_strategy()) {
        // keep the constant term away from 0 so the inverse is stable
        let c0 = a.get(&[0, 0]);
        a.set(&[0, 0], if c0 >= 0.0 { c0 + 1.0 } else { c0 - 1.0 });
        let one = TruncatedSeries::constant(M, NMAX, 1.0).unwrap();
        let inv = a.inv().unwrap();
        prop_assert!(a.mul(&inv).unwrap().max_abs_diff(&one).unwrap() <= 1e-9);
        prop_assert!(inv.mul(&a).unwrap().max_abs_diff(&one).unwrap() <= 1e-9);
    }

    #[test]
    fn exp_turns_sums_into_products(
        mut a in series_strategy(),
        mut b in series_strategy(),
    ) {
        a.set(&[0, 0], 0.0);
        b.set(&[0, 0], 0.0);
        let lhs = a.add(&b).unwrap().exp_series().unwrap();
        let rhs = a.exp_series().unwrap().mul(&b.exp_series().unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-9);
    }

    #[test]
    fn progeny_table_is_a_subprobability(model in table_model_strategy()) {
        let table = solve_progeny(&model, 6).unwrap();
        let mut mass = 0.0;
        for n in graded_exponents(M, 6) {
            if n.iter().all(|&x| x == 0) {
                continue;
            }
            let p = table.mixed(&n);
            prop_assert!((0.0..=1.0).contains(&p), "p({n:?}) = {p}");
            mass += p;
        }
        prop_assert!(mass <= 1.0 + 1e-12, "total mass {mass}");
    }

    #[test]
    fn rate_function_is_nonnegative_and_convex(
        model in table_model_strategy(),
        r in 0.1f64..0.9,
        s in 0.1f64..0.9,
    ) {
        let ga = rate::gamma(&model, &[r, 1.0 - r]).unwrap().gamma;
        let gb = rate::gamma(&model, &[s, 1.0 - s]).unwrap().gamma;
        let mid = 0.5 * (r + s);
        let gm = rate::gamma(&model, &[mid, 1.0 - mid]).unwrap().gamma;
        prop_assert!(ga >= -1e-12 && gb >= -1e-12);
        prop_assert!(gm <= 0.5 * (ga + gb) + 1e-10);
    }
}

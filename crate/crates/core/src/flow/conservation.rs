//! Conserved weight functionals of the gradient flow.
//!
//! Merged heads keep `w_2 w_2ᵀ - W_1 W_1ᵀ` fixed (an `H x H` matrix with
//! entries `v_i v_j - <U_i, U_j>`). Separate heads keep, for every rank-one
//! piece, `‖k_{i,r}‖² - ‖q_{i,r}‖²`, and per head `Σ_r ‖k_{i,r}‖² - v_i²`
//! and `Σ_r ‖q_{i,r}‖² - v_i²`.

use serde::{Deserialize, Serialize};

use crate::error::{LsaError, Result};
use crate::models::Params;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConservationLaw {
    /// `w_2 w_2ᵀ - W_1 W_1ᵀ`.
    LayerGram,
    /// `‖k_{i,r}‖² - ‖q_{i,r}‖²`.
    KeyQueryBalance,
    /// `Σ_r ‖k_{i,r}‖² - v_i²`.
    KeyValueBalance,
    /// `Σ_r ‖q_{i,r}‖² - v_i²`.
    QueryValueBalance,
}

/// Current value of every conserved quantity, grouped by law.
pub fn conserved_quantities(p: &Params) -> Vec<(ConservationLaw, Vec<f64>)> {
    match p {
        Params::Merged(m) => {
            let h = m.heads();
            let mut gram = Vec::with_capacity(h * h);
            for i in 0..h {
                for j in 0..h {
                    let uu = m.merged_kq[i].dot(&m.merged_kq[j]);
                    gram.push(m.values[i] * m.values[j] - uu);
                }
            }
            vec![(ConservationLaw::LayerGram, gram)]
        }
        Params::Separate(s) => {
            let pair = s
                .keys
                .iter()
                .zip(&s.queries)
                .map(|(k, q)| k.norm_squared() - q.norm_squared())
                .collect();
            let head_sum = |vs: &[nalgebra::DVector<f64>]| -> Vec<f64> {
                (0..s.heads())
                    .map(|i| {
                        let sq: f64 = vs[i * s.rank..(i + 1) * s.rank].iter().map(|v| v.norm_squared()).sum();
                        sq - s.values[i] * s.values[i]
                    })
                    .collect()
            };
            vec![
                (ConservationLaw::KeyQueryBalance, pair),
                (ConservationLaw::KeyValueBalance, head_sum(&s.keys)),
                (ConservationLaw::QueryValueBalance, head_sum(&s.queries)),
            ]
        }
    }
}

/// Max-norm change of each conserved quantity between two parameter sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConservationDrift {
    pub per_law: Vec<(ConservationLaw, f64)>,
}

impl ConservationDrift {
    pub fn max(&self) -> f64 {
        self.per_law.iter().fold(0.0, |a, (_, d)| a.max(*d))
    }

    pub fn get(&self, law: ConservationLaw) -> Option<f64> {
        self.per_law.iter().find(|(l, _)| *l == law).map(|(_, d)| *d)
    }
}

pub fn drift_between(now: &[(ConservationLaw, Vec<f64>)], start: &[(ConservationLaw, Vec<f64>)]) -> ConservationDrift {
    let per_law = now
        .iter()
        .zip(start)
        .map(|((law, a), (_, b))| {
            let d = a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
            (*law, d)
        })
        .collect();
    ConservationDrift { per_law }
}

pub fn conservation_drift(p_t: &Params, p_0: &Params) -> Result<ConservationDrift> {
    if p_t.layout() != p_0.layout() {
        return Err(LsaError::Dimension("parameter sets have different shapes".into()));
    }
    Ok(drift_between(&conserved_quantities(p_t), &conserved_quantities(p_0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_merged, init_separate, MergedParams, SeparateParams};
    use crate::rng::SeedStream;
    use approx::assert_relative_eq;

    #[test]
    fn zero_weights_have_no_drift() {
        let a = Params::Separate(SeparateParams::zeros(3, 2, 2));
        assert_eq!(conservation_drift(&a, &a.clone()).unwrap().max(), 0.0);
        let m = Params::Merged(MergedParams::zeros(3, 2));
        assert_eq!(conservation_drift(&m, &m.clone()).unwrap().max(), 0.0);
    }

    #[test]
    fn doubling_weights_quadruples_quantities() {
        let mut s = SeedStream::named("cons", 0, "init");
        for p in [
            Params::Merged(init_merged(3, 3, 1.0, &mut s).unwrap()),
            Params::Separate(init_separate(3, 3, 2, 1.0, &mut s).unwrap()),
        ] {
            let q0 = conserved_quantities(&p);
            let drift = conservation_drift(&p.scaled(2.0), &p).unwrap();
            for ((law, d), (_, q)) in drift.per_law.iter().zip(&q0) {
                let want = 3.0 * q.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
                assert_relative_eq!(*d, want, max_relative = 1e-12);
                assert!(want > 0.0, "{law:?}");
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Params::Separate(SeparateParams::zeros(3, 2, 1));
        let b = Params::Separate(SeparateParams::zeros(3, 2, 2));
        assert!(conservation_drift(&a, &b).is_err());
    }
}

//! Closed-form predictions: fixed points, time courses, scalar reductions and
//! duration estimates.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LsaError, Result};
use crate::models::{Params, SeparateParams};
use crate::task::{CovarianceSpec, PopulationStats};

/// Largest dimension for which all `2^D` index sets are enumerated.
pub const MAX_EXHAUSTIVE_DIM: usize = 12;

/// A fixed point of the separate-head flow: the heads fit the eigenvectors
/// in `index_set` (1-based) and nothing else.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoint {
    pub index_set: Vec<usize>,
    pub loss: f64,
    pub target_matrix: DMatrix<f64>,
    pub min_norm_params: SeparateParams,
}

/// `tr Λ - Σ_{d∈S} λ_d³ / a_d`.
pub fn fixed_point_loss(stats: &PopulationStats, index_set: &[usize]) -> Result<f64> {
    check_indices(stats.dim(), index_set)?;
    let lam = &stats.cov.eigenvalues;
    Ok(stats.trace
        - index_set
            .iter()
            .map(|&d| lam[d - 1] * lam[d - 1] * stats.gain(d - 1))
            .sum::<f64>())
}

fn check_indices(dim: usize, index_set: &[usize]) -> Result<()> {
    for (j, &d) in index_set.iter().enumerate() {
        if d == 0 || d > dim {
            return Err(LsaError::IndexOutOfRange { index: d, dim });
        }
        if index_set[..j].contains(&d) {
            return Err(LsaError::InvalidArgument(format!("index {d} repeated")));
        }
    }
    Ok(())
}

/// `Σ_{d∈S} (λ_d / a_d) e_d e_dᵀ`.
pub fn target_matrix(stats: &PopulationStats, index_set: &[usize]) -> Result<DMatrix<f64>> {
    check_indices(stats.dim(), index_set)?;
    let d = stats.dim();
    let mut m = DMatrix::zeros(d, d);
    for &i in index_set {
        let e = stats.cov.eigvec(i - 1);
        m += &e * e.transpose() * stats.gain(i - 1);
    }
    Ok(m)
}

/// Fixed point for `index_set` realized by a separate model with `heads`
/// heads of rank `rank`.
///
/// Direction `e_d` goes to head `d` when `heads >= D`, otherwise to the next
/// free head in increasing `d`. That head carries `k = q = v e_d` in its
/// first rank slot with `v = (λ_d / a_d)^{1/3}`; all other weights are zero.
pub fn fixed_point(stats: &PopulationStats, index_set: &[usize], heads: usize, rank: usize) -> Result<FixedPoint> {
    let dim = stats.dim();
    check_indices(dim, index_set)?;
    if rank == 0 || rank > dim {
        return Err(LsaError::InvalidArgument(format!("rank {rank} outside 1..={dim}")));
    }
    if index_set.len() > heads {
        return Err(LsaError::InvalidArgument(format!(
            "{} directions need at least as many heads, got {heads}",
            index_set.len()
        )));
    }
    let mut sorted = index_set.to_vec();
    sorted.sort_unstable();
    let mut p = SeparateParams::zeros(dim, heads, rank);
    for (slot, &d) in sorted.iter().enumerate() {
        let head = if heads >= dim { d - 1 } else { slot };
        let v = stats.gain(d - 1).cbrt();
        let e = stats.cov.eigvec(d - 1);
        p.values[head] = v;
        p.keys[head * rank] = &e * v;
        p.queries[head * rank] = e * v;
    }
    Ok(FixedPoint {
        loss: fixed_point_loss(stats, &sorted)?,
        target_matrix: target_matrix(stats, &sorted)?,
        index_set: sorted,
        min_norm_params: p,
    })
}

/// `M_m`: the first `m` eigenvectors fitted.
pub fn sequential_fixed_point(stats: &PopulationStats, m: usize, heads: usize, rank: usize) -> Result<FixedPoint> {
    if m > stats.dim() {
        return Err(LsaError::IndexOutOfRange { index: m, dim: stats.dim() });
    }
    fixed_point(stats, &(1..=m).collect::<Vec<_>>(), heads, rank)
}

/// Every index set for `D <= 12` (in bitmask order), otherwise the
/// sequential chain `M_0 .. M_D`. Uses `D` rank-one heads.
pub fn fixed_point_catalog(stats: &PopulationStats) -> Result<Vec<FixedPoint>> {
    let d = stats.dim();
    if d <= MAX_EXHAUSTIVE_DIM {
        (0u32..1 << d)
            .map(|mask| {
                let set: Vec<usize> = (0..d).filter(|&i| mask >> i & 1 == 1).map(|i| i + 1).collect();
                fixed_point(stats, &set, d, 1)
            })
            .collect()
    } else {
        (0..=d).map(|m| sequential_fixed_point(stats, m, d, 1)).collect()
    }
}

/// Plateau losses `L(M_0), .., L(M_D)`.
pub fn loss_ladder(stats: &PopulationStats) -> Vec<f64> {
    (0..=stats.dim())
        .map(|m| fixed_point_loss(stats, &(1..=m).collect::<Vec<_>>()).expect("valid prefix"))
        .collect()
}

/// Row of the catalog JSON export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub indices: Vec<usize>,
    pub loss: f64,
    /// Row-major.
    pub target_matrix: Vec<Vec<f64>>,
}

impl From<&FixedPoint> for CatalogEntry {
    fn from(fp: &FixedPoint) -> Self {
        CatalogEntry {
            indices: fp.index_set.clone(),
            loss: fp.loss,
            target_matrix: fp
                .target_matrix
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
        }
    }
}

pub fn catalog_json(catalog: &[FixedPoint]) -> Result<String> {
    let rows: Vec<CatalogEntry> = catalog.iter().map(CatalogEntry::from).collect();
    Ok(serde_json::to_string_pretty(&rows)?)
}

/// `[Λ + E(1/N)(Λ + tr(Λ) I)]⁻¹`, the converged merged-model predictor.
pub fn global_min_predictor(stats: &PopulationStats) -> DMatrix<f64> {
    let eps = stats.exp_inv_len;
    let tr = stats.trace;
    let m = stats.cov.spectral_map(|l| 1.0 / (l + eps * (l + tr)));
    debug_assert!(m.iter().all(|x| x.is_finite()));
    m
}

/// Predictor after fitting the top `m` principal directions.
pub fn pcr_predictor(stats: &PopulationStats, m: usize) -> Result<DMatrix<f64>> {
    if m > stats.dim() {
        return Err(LsaError::IndexOutOfRange { index: m, dim: stats.dim() });
    }
    target_matrix(stats, &(1..=m).collect::<Vec<_>>())
}

/// Logistic time course of the merged model along its dominant mode:
/// `s(t) = γ e^{2γt/τ} / (α(e^{2γt/τ} - 1) + γ/s_0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidSolution {
    pub alpha: f64,
    pub gamma: f64,
    pub s0: f64,
}

impl SigmoidSolution {
    /// White covariance `Λ = I_D` with fixed context length `N`.
    pub fn white(dim: usize, n: f64, w_init: f64) -> Self {
        Self {
            alpha: 1.0 + (1.0 + dim as f64) / n,
            gamma: (dim as f64).sqrt(),
            s0: w_init * w_init,
        }
    }

    pub fn s(&self, t_over_tau: f64) -> f64 {
        let e = (2.0 * self.gamma * t_over_tau).exp();
        if !e.is_finite() {
            return self.gamma / self.alpha;
        }
        self.gamma * e / (self.alpha * (e - 1.0) + self.gamma / self.s0)
    }

    /// `σ = s/γ`, the coefficient of the identity in the effective matrix.
    pub fn sigma(&self, t_over_tau: f64) -> f64 {
        self.s(t_over_tau) / self.gamma
    }

    /// `L = (1 - 2σ + α σ²) D` with `D = γ²` (white case).
    pub fn loss(&self, t_over_tau: f64) -> f64 {
        let s = self.sigma(t_over_tau);
        (1.0 - 2.0 * s + self.alpha * s * s) * self.gamma * self.gamma
    }

    /// Time (in units of `τ`) at which `σ` reaches half its limit `1/α`.
    pub fn half_time(&self) -> f64 {
        (self.gamma / (self.alpha * self.s0) - 1.0).ln() / (2.0 * self.gamma)
    }
}

pub fn sigma_of_t(dim: usize, n: f64, w_init: f64, tau: f64, t: f64) -> f64 {
    SigmoidSolution::white(dim, n, w_init).sigma(t / tau)
}

pub fn loss_of_t(dim: usize, n: f64, w_init: f64, tau: f64, t: f64) -> f64 {
    SigmoidSolution::white(dim, n, w_init).loss(t / tau)
}

/// Single-head reduction `τ v̇ = λ² v² - λ a v⁵`; returns `dv/dt`.
pub fn scalar_ode_rhs(v: f64, lambda: f64, a: f64, tau: f64) -> f64 {
    let v2 = v * v;
    (lambda * lambda * v2 - lambda * a * v2 * v2 * v) / tau
}

/// Stationary value `(λ/a)^{1/3}`.
pub fn scalar_ode_fixed_point(lambda: f64, a: f64) -> f64 {
    (lambda / a).cbrt()
}

/// RK4 solution of the scalar reduction from `(t0, v0)`, sampled at the
/// requested (non-decreasing, `>= t0`) times with internal step at most `dt`.
pub fn solve_scalar_ode(v0: f64, t0: f64, times: &[f64], lambda: f64, a: f64, tau: f64, dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(LsaError::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let f = |v: f64| scalar_ode_rhs(v, lambda, a, tau);
    let mut out = Vec::with_capacity(times.len());
    let (mut t, mut v) = (t0, v0);
    for &target in times {
        if target < t {
            return Err(LsaError::InvalidArgument("times must be non-decreasing and >= t0".into()));
        }
        let steps = ((target - t) / dt).ceil() as u64;
        if steps > 0 {
            let h = (target - t) / steps as f64;
            for _ in 0..steps {
                let k1 = f(v);
                let k2 = f(v + 0.5 * h * k1);
                let k3 = f(v + 0.5 * h * k2);
                let k4 = f(v + h * k3);
                v += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
        }
        t = target;
        out.push(v);
    }
    Ok(out)
}

/// Antiderivative in the implicit solution `λ² t/τ = F(v) - F(v_0)`,
/// valid for `0 < v < (λ/a)^{1/3}`.
pub fn implicit_time_antiderivative(v: f64, lambda: f64, a: f64) -> f64 {
    let c = (a / lambda).cbrt();
    let u = c * v;
    let s3 = 3f64.sqrt();
    let log_part = ((u * u + u + 1.0) / ((1.0 - u) * (1.0 - u))).ln();
    let atan_part = 2.0 * s3 * ((2.0 * u + 1.0) / s3).atan();
    c / 6.0 * (log_part - atan_part) - 1.0 / v
}

/// Time for the scalar reduction to go from `v0` to `v`.
pub fn implicit_time(v: f64, v0: f64, lambda: f64, a: f64, tau: f64) -> Result<f64> {
    let vstar = scalar_ode_fixed_point(lambda, a);
    for x in [v, v0] {
        if !(x > 0.0 && x < vstar) {
            return Err(LsaError::InvalidArgument(format!("v = {x} outside (0, {vstar})")));
        }
    }
    Ok(tau / (lambda * lambda)
        * (implicit_time_antiderivative(v, lambda, a) - implicit_time_antiderivative(v0, lambda, a)))
}

/// Escape time from the zero fixed point of the merged model,
/// `τ / ‖Λ²‖_F · ln(1/w_init)`.
pub fn plateau_duration_merged(stats: &PopulationStats, w_init: f64, tau: f64) -> Result<f64> {
    if !(w_init > 0.0 && w_init < 1.0) {
        return Err(LsaError::InvalidArgument(format!("w_init must be in (0, 1), got {w_init}")));
    }
    Ok(tau / stats.lambda_sq.norm() * (1.0 / w_init).ln())
}

/// Length of plateau `m + 1` (0-based `m`), `τ / (λ_{m+1}² v_{m+1}(t_m))`,
/// given the value weight of the next head at plateau entry.
pub fn plateau_duration_separate(m: usize, stats: &PopulationStats, v_at_entry: f64, tau: f64) -> Result<f64> {
    if m >= stats.dim() {
        return Err(LsaError::IndexOutOfRange { index: m, dim: stats.dim() });
    }
    if !(v_at_entry > 0.0) {
        return Err(LsaError::InvalidArgument(format!(
            "value weight at plateau entry must be positive, got {v_at_entry}"
        )));
    }
    let l = stats.cov.eigenvalues[m];
    Ok(tau / (l * l * v_at_entry))
}

/// Norms below this count as an empty head.
pub const ALIGNMENT_FLOOR: f64 = 1e-9;

/// Per-head, per-eigenvector key alignment.
///
/// Separate heads: `‖K_iᵀ e_d‖ / ‖K_i‖_F`, where `K_i` stacks the head's key
/// vectors; for rank one this is `|cos ∠(k_i, e_d)|`. Merged heads use the
/// rows of `U_i` the same way: `‖U_iᵀ e_d‖ / ‖U_i‖_F`.
pub fn alignment_profile(p: &Params, cov: &CovarianceSpec) -> Vec<Vec<f64>> {
    let e = &cov.eigenvectors;
    let d = cov.dim;
    match p {
        Params::Separate(s) => (0..s.heads())
            .map(|i| {
                let ks = &s.keys[i * s.rank..(i + 1) * s.rank];
                let norm: f64 = ks.iter().map(|k| k.norm_squared()).sum::<f64>().sqrt();
                if norm < ALIGNMENT_FLOOR {
                    return vec![0.0; d];
                }
                (0..d)
                    .map(|j| {
                        let col = e.column(j);
                        ks.iter().map(|k| col.dot(k).powi(2)).sum::<f64>().sqrt() / norm
                    })
                    .collect()
            })
            .collect(),
        Params::Merged(m) => m
            .merged_kq
            .iter()
            .map(|u| {
                let norm = u.norm();
                if norm < ALIGNMENT_FLOOR {
                    return vec![0.0; d];
                }
                (0..d).map(|j| (u.transpose() * e.column(j)).norm() / norm).collect()
            })
            .collect(),
    }
}

/// Index of the best-aligned eigenvector for each head (`None` for empty
/// heads) together with its alignment.
pub fn dominant_alignment(profile: &[Vec<f64>]) -> Vec<Option<(usize, f64)>> {
    profile
        .iter()
        .map(|row| {
            row.iter()
                .copied()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .filter(|&(_, c)| c > 0.0)
        })
        .collect()
}

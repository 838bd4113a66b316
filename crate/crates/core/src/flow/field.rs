//! Closed-form expected gradients.
//!
//! Both models reduce to the effective matrix `M`. With `Λ` the token
//! covariance and `E = E(Λ̂²)` the population loss is
//!
//! ```text
//! L(M) = tr Λ - 2 tr(Mᵀ Λ²) + tr(M Λ Mᵀ E)
//! ```
//!
//! and `-½ ∂L/∂M = G = Λ² - E M Λ`. Every parameter gradient is a contraction
//! of `G`, so one evaluation costs a few `D x D` products and never forms the
//! `D² x D²` second moment of the cubic feature.

use nalgebra::DMatrix;

use crate::error::{LsaError, Result};
use crate::models::{effective_matrix, Layout, MergedParams, ModelKind, Params, SeparateParams};
use crate::task::PopulationStats;

/// `C = A B` for column-major `d x d` slices.
#[inline]
fn matmul(d: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    c.fill(0.0);
    for j in 0..d {
        let bj = &b[j * d..(j + 1) * d];
        let cj = &mut c[j * d..(j + 1) * d];
        for (k, &bkj) in bj.iter().enumerate() {
            if bkj == 0.0 {
                continue;
            }
            let ak = &a[k * d..(k + 1) * d];
            for i in 0..d {
                cj[i] += ak[i] * bkj;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Right-hand side `τ dθ/dt` of the population gradient flow on the flat
/// parameter vector of a [`Layout`].
#[derive(Debug, Clone)]
pub struct FlowField {
    layout: Layout,
    trace: f64,
    lambda: Vec<f64>,
    lambda_sq: Vec<f64>,
    exp_sq: Vec<f64>,
    m: Vec<f64>,
    tmp: Vec<f64>,
    g: Vec<f64>,
    gv: Vec<f64>,
}

impl FlowField {
    pub fn new(layout: Layout, stats: &PopulationStats) -> Result<Self> {
        let d = layout.dim;
        if stats.dim() != d {
            return Err(LsaError::Dimension(format!(
                "model dim {d} but covariance dim {}",
                stats.dim()
            )));
        }
        if layout.kind == ModelKind::Separate && (layout.rank == 0 || layout.rank > d) {
            return Err(LsaError::InvalidArgument(format!("rank {} outside 1..={d}", layout.rank)));
        }
        let flat = |m: &DMatrix<f64>| m.as_slice().to_vec();
        Ok(Self {
            layout,
            trace: stats.trace,
            lambda: flat(&stats.lambda),
            lambda_sq: flat(&stats.lambda_sq),
            exp_sq: flat(&stats.exp_sq_cov),
            m: vec![0.0; d * d],
            tmp: vec![0.0; d * d],
            g: vec![0.0; d * d],
            gv: vec![0.0; d],
        })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    /// Effective matrix of `x`, column-major.
    pub fn effective(&mut self, x: &[f64]) -> &[f64] {
        let Layout { dim: d, heads: h, rank, .. } = self.layout;
        self.m.fill(0.0);
        match self.layout.kind {
            ModelKind::Merged => {
                for i in 0..h {
                    let v = x[i];
                    let u = &x[h + i * d * d..h + (i + 1) * d * d];
                    for (m, u) in self.m.iter_mut().zip(u) {
                        *m += v * u;
                    }
                }
            }
            ModelKind::Separate => {
                let ko = self.layout.key_offset();
                let qo = self.layout.query_offset();
                for i in 0..h {
                    let v = x[i];
                    for r in 0..rank {
                        let j = i * rank + r;
                        let k = &x[ko + j * d..ko + (j + 1) * d];
                        let q = &x[qo + j * d..qo + (j + 1) * d];
                        for (c, &qc) in q.iter().enumerate() {
                            let s = v * qc;
                            for (row, &kr) in k.iter().enumerate() {
                                self.m[row + c * d] += kr * s;
                            }
                        }
                    }
                }
            }
        }
        &self.m
    }

    /// Fills `G = Λ² - E M Λ` for the current `self.m` and returns the loss.
    fn residual(&mut self) -> f64 {
        let d = self.layout.dim;
        matmul(d, &self.exp_sq, &self.m, &mut self.tmp);
        matmul(d, &self.tmp, &self.lambda, &mut self.g);
        for (g, l2) in self.g.iter_mut().zip(&self.lambda_sq) {
            *g = l2 - *g;
        }
        // L = tr Λ - <M, Λ² + G>
        self.trace - dot(&self.m, &self.lambda_sq) - dot(&self.m, &self.g)
    }

    pub fn loss(&mut self, x: &[f64]) -> f64 {
        self.effective(x);
        self.residual()
    }

    /// Writes `τ dθ/dt` into `out` and returns the loss at `x`.
    pub fn eval(&mut self, x: &[f64], out: &mut [f64]) -> f64 {
        debug_assert_eq!(x.len(), self.layout.len());
        debug_assert_eq!(out.len(), self.layout.len());
        self.effective(x);
        let loss = self.residual();
        let Layout { dim: d, heads: h, rank, .. } = self.layout;
        match self.layout.kind {
            ModelKind::Merged => {
                for i in 0..h {
                    let v = x[i];
                    let range = h + i * d * d..h + (i + 1) * d * d;
                    out[i] = dot(&x[range.clone()], &self.g);
                    for (o, g) in out[range].iter_mut().zip(&self.g) {
                        *o = v * g;
                    }
                }
            }
            ModelKind::Separate => {
                let ko = self.layout.key_offset();
                let qo = self.layout.query_offset();
                for i in 0..h {
                    let v = x[i];
                    let mut dv = 0.0;
                    for r in 0..rank {
                        let j = i * rank + r;
                        let k = &x[ko + j * d..ko + (j + 1) * d];
                        let q = &x[qo + j * d..qo + (j + 1) * d];
                        // G q
                        self.gv.fill(0.0);
                        for (c, &qc) in q.iter().enumerate() {
                            let col = &self.g[c * d..(c + 1) * d];
                            for row in 0..d {
                                self.gv[row] += col[row] * qc;
                            }
                        }
                        dv += dot(k, &self.gv);
                        for (o, gq) in out[ko + j * d..ko + (j + 1) * d].iter_mut().zip(&self.gv) {
                            *o = v * gq;
                        }
                        // Gᵀ k
                        for c in 0..d {
                            out[qo + j * d + c] = v * dot(&self.g[c * d..(c + 1) * d], k);
                        }
                    }
                    out[i] = dv;
                }
            }
        }
        loss
    }

    pub fn grad(&mut self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.eval(x, &mut out);
        out
    }
}

/// `L(M)` for an explicit effective matrix.
pub fn loss_of_matrix(m: &DMatrix<f64>, stats: &PopulationStats) -> f64 {
    let l = &stats.lambda;
    stats.trace - 2.0 * (m.transpose() * &stats.lambda_sq).trace()
        + (m * l * m.transpose() * &stats.exp_sq_cov).trace()
}

/// Exact population loss `E(y_q - ŷ_q)²`.
pub fn population_loss(p: &Params, stats: &PopulationStats) -> f64 {
    loss_of_matrix(&effective_matrix(p).m, stats)
}

/// `G = Λ² - E(Λ̂²) M Λ`.
pub fn residual_matrix(m: &DMatrix<f64>, stats: &PopulationStats) -> DMatrix<f64> {
    &stats.lambda_sq - &stats.exp_sq_cov * m * &stats.lambda
}

/// `τ dθ/dt` for a merged model, in parameter shape.
pub fn grad_merged(p: &MergedParams, stats: &PopulationStats) -> Result<MergedParams> {
    let params = Params::Merged(p.clone());
    match shaped_grad(&params, stats)? {
        Params::Merged(g) => Ok(g),
        Params::Separate(_) => unreachable!(),
    }
}

/// `τ dθ/dt` for a separate rank-`R` model, in parameter shape.
pub fn grad_separate(p: &SeparateParams, stats: &PopulationStats) -> Result<SeparateParams> {
    let params = Params::Separate(p.clone());
    match shaped_grad(&params, stats)? {
        Params::Separate(g) => Ok(g),
        Params::Merged(_) => unreachable!(),
    }
}

pub fn shaped_grad(p: &Params, stats: &PopulationStats) -> Result<Params> {
    let layout = p.layout();
    let mut field = FlowField::new(layout, stats)?;
    let x = p.to_flat();
    Params::from_flat(layout, &field.grad(&x))
}

/// Max-norm of a flat gradient.
pub fn max_abs(g: &[f64]) -> f64 {
    g.iter().fold(0.0, |a, x| a.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_merged, init_separate};
    use crate::rng::SeedStream;
    use crate::task::{build_covariance, population_stats, EigenBasis, LengthLaw};
    use approx::assert_relative_eq;

    fn stats(eigs: &[f64], n: usize, seed: u64) -> PopulationStats {
        let basis = EigenBasis::RandomOrthonormal(SeedStream::named("field", seed, "basis"));
        let cov = build_covariance(eigs, basis).unwrap();
        population_stats(&cov, &LengthLaw::Fixed { n }).unwrap()
    }

    #[test]
    fn zero_weights_have_zero_gradient_and_trace_loss() {
        let st = stats(&[0.4, 0.3, 0.2, 0.1], 31, 0);
        for layout in [Layout::merged(4, 3), Layout::separate(4, 3, 2)] {
            let mut f = FlowField::new(layout, &st).unwrap();
            let x = vec![0.0; layout.len()];
            let mut out = vec![1.0; layout.len()];
            let loss = f.eval(&x, &mut out);
            assert_relative_eq!(loss, 1.0, epsilon = 1e-15);
            assert_eq!(max_abs(&out), 0.0);
        }
    }

    #[test]
    fn flat_loss_matches_matrix_formula() {
        let st = stats(&[1.3, 0.7, 0.2], 5, 1);
        let mut s = SeedStream::named("field", 1, "init");
        for p in [
            Params::Merged(init_merged(3, 2, 1.0, &mut s).unwrap()),
            Params::Separate(init_separate(3, 2, 2, 1.0, &mut s).unwrap()),
        ] {
            let mut f = FlowField::new(p.layout(), &st).unwrap();
            let a = f.loss(&p.to_flat());
            let b = population_loss(&p, &st);
            assert_relative_eq!(a, b, epsilon = 1e-12 * (1.0 + b.abs()));
        }
    }

    /// The flow field is `-½` the gradient of the loss; check against central
    /// differences of the exact loss.
    #[test]
    fn field_is_half_negative_loss_gradient() {
        let st = stats(&[1.3, 0.7, 0.2], 5, 2);
        let mut s = SeedStream::named("field", 2, "init");
        for p in [
            Params::Merged(init_merged(3, 2, 1.0, &mut s).unwrap()),
            Params::Separate(init_separate(3, 3, 2, 1.0, &mut s).unwrap()),
        ] {
            let layout = p.layout();
            let mut f = FlowField::new(layout, &st).unwrap();
            let x = p.to_flat();
            let g = f.grad(&x);
            let h = 1e-5;
            for j in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fd = -(f.loss(&xp) - f.loss(&xm)) / (4.0 * h);
                assert!((fd - g[j]).abs() < 1e-7 * (1.0 + g[j].abs()), "{j}: {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let st = stats(&[1.0, 0.5], 4, 3);
        assert!(FlowField::new(Layout::merged(3, 1), &st).is_err());
        assert!(FlowField::new(Layout::separate(2, 1, 3), &st).is_err());
    }
}

//! In-context linear regression task: token covariance, sequence sampling,
//! per-sequence context statistics and the exact population moments that
//! drive the closed-form gradient flow.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LsaError, Result};
use crate::rng::SeedStream;

/// Largest tolerated deviation of `EᵀE` from the identity for user-supplied
/// eigenvectors.
pub const ORTHONORMAL_TOL: f64 = 1e-8;

/// Eigen-factored token covariance `Λ = Σ_d λ_d e_d e_dᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub dim: usize,
    /// Strictly positive, sorted descending.
    pub eigenvalues: Vec<f64>,
    /// Columns are the eigenvectors, in the same order as `eigenvalues`.
    pub eigenvectors: DMatrix<f64>,
}

/// How the eigenvector basis of a covariance is chosen.
#[derive(Debug, Clone)]
pub enum EigenBasis {
    Identity,
    Matrix(DMatrix<f64>),
    /// Haar-distributed orthonormal matrix drawn from the stream.
    RandomOrthonormal(SeedStream),
}

/// Eigenvalue list as written in an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum EigenSpec {
    Explicit { values: Vec<f64> },
    /// `λ_d ∝ 1/d`, normalized to unit trace.
    HarmonicUnitTrace { dim: usize },
    /// `λ_d = scale` for every `d`.
    White { dim: usize, scale: f64 },
}

impl EigenSpec {
    pub fn values(&self) -> Vec<f64> {
        match self {
            EigenSpec::Explicit { values } => values.clone(),
            EigenSpec::HarmonicUnitTrace { dim } => {
                let h: f64 = (1..=*dim).map(|d| 1.0 / d as f64).sum();
                (1..=*dim).map(|d| 1.0 / (d as f64 * h)).collect()
            }
            EigenSpec::White { dim, scale } => vec![*scale; *dim],
        }
    }
}

/// Builds a covariance from eigenvalues (any order) and a basis. Eigenvalues
/// are sorted descending and the basis columns permuted with them.
pub fn build_covariance(eigenvalues: &[f64], basis: EigenBasis) -> Result<CovarianceSpec> {
    let dim = eigenvalues.len();
    if dim == 0 {
        return Err(LsaError::InvalidArgument("covariance needs at least one eigenvalue".into()));
    }
    for (index, &value) in eigenvalues.iter().enumerate() {
        if !(value > 0.0) || !value.is_finite() {
            return Err(LsaError::NonPositiveEigenvalue { index, value });
        }
    }
    let vectors = match basis {
        EigenBasis::Identity => DMatrix::identity(dim, dim),
        EigenBasis::Matrix(m) => {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(LsaError::Dimension(format!(
                    "eigenvector matrix is {}x{}, expected {dim}x{dim}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            let deviation = gram_deviation(&m);
            if deviation > ORTHONORMAL_TOL {
                return Err(LsaError::NotOrthonormal { deviation });
            }
            m
        }
        EigenBasis::RandomOrthonormal(mut stream) => haar_orthonormal(dim, &mut stream),
    };

    let mut order: Vec<usize> = (0..dim).collect();
    // Stable sort keeps the caller's column order among equal eigenvalues.
    order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]));
    let sorted: Vec<f64> = order.iter().map(|&i| eigenvalues[i]).collect();
    let eigenvectors = DMatrix::from_fn(dim, dim, |r, c| vectors[(r, order[c])]);

    Ok(CovarianceSpec {
        dim,
        eigenvalues: sorted,
        eigenvectors,
    })
}

/// Max-abs entry of `MᵀM - I`.
pub fn gram_deviation(m: &DMatrix<f64>) -> f64 {
    let g = m.transpose() * m;
    let n = g.nrows();
    let mut dev: f64 = 0.0;
    for r in 0..n {
        for c in 0..n {
            let target = if r == c { 1.0 } else { 0.0 };
            dev = dev.max((g[(r, c)] - target).abs());
        }
    }
    dev
}

/// QR of a Gaussian matrix with the sign of `R`'s diagonal folded into `Q`.
fn haar_orthonormal(dim: usize, stream: &mut SeedStream) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| stream.normal());
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for c in 0..dim {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    q
}

impl CovarianceSpec {
    pub fn eigvec(&self, d: usize) -> DVector<f64> {
        self.eigenvectors.column(d).into_owned()
    }

    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    /// `Σ_d f(λ_d) e_d e_dᵀ`.
    pub fn spectral_map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let e = &self.eigenvectors;
        let scaled = DMatrix::from_fn(self.dim, self.dim, |r, c| e[(r, c)] * f(self.eigenvalues[c]));
        &scaled * e.transpose()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        self.spectral_map(|l| l)
    }

    pub fn sqrt_matrix(&self) -> DMatrix<f64> {
        self.spectral_map(f64::sqrt)
    }
}

/// Distribution of the context length `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LengthLaw {
    Fixed { n: usize },
    /// Uniform over `1..=max`, the context-length law of next-token training.
    Uniform { max: usize },
}

impl LengthLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LengthLaw::Fixed { n } if n == 0 => {
                Err(LsaError::InvalidArgument("fixed context length must be >= 1".into()))
            }
            LengthLaw::Uniform { max } if max == 0 => {
                Err(LsaError::InvalidArgument("uniform length law needs max >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn max_len(&self) -> usize {
        match *self {
            LengthLaw::Fixed { n } => n,
            LengthLaw::Uniform { max } => max,
        }
    }

    pub fn sample(&self, stream: &mut SeedStream) -> usize {
        match *self {
            LengthLaw::Fixed { n } => n,
            LengthLaw::Uniform { max } => {
                let k = (stream.uniform() * max as f64) as usize;
                k.min(max - 1) + 1
            }
        }
    }
}

/// `E(1/N)` under the length law, by exact summation.
pub fn expected_inverse_length(law: &LengthLaw) -> f64 {
    match *law {
        LengthLaw::Fixed { n } => 1.0 / n as f64,
        LengthLaw::Uniform { max } => {
            let h: f64 = (1..=max).map(|n| 1.0 / n as f64).sum();
            h / max as f64
        }
    }
}

/// One in-context regression prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    /// `D x N`, column `n` is `x_n`.
    pub context_inputs: DMatrix<f64>,
    pub context_outputs: DVector<f64>,
    pub query_input: DVector<f64>,
    pub query_output: f64,
    pub task_vector: DVector<f64>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.context_inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reusable sampler that writes a sequence into flat buffers. Used directly
/// by the Monte Carlo hot loop; [`sample_sequence`] wraps it.
#[derive(Debug, Clone)]
pub struct SequenceSampler {
    dim: usize,
    /// `Λ^{1/2}`, column-major.
    sqrt: Vec<f64>,
    scratch: Vec<f64>,
}

/// Flat view of one sampled sequence; `xs` is column-major `D x N`.
#[derive(Debug, Clone, Default)]
pub struct SequenceBuf {
    pub n: usize,
    pub w: Vec<f64>,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub xq: Vec<f64>,
    pub yq: f64,
}

impl SequenceSampler {
    pub fn new(cov: &CovarianceSpec) -> Self {
        Self {
            dim: cov.dim,
            sqrt: cov.sqrt_matrix().as_slice().to_vec(),
            scratch: vec![0.0; cov.dim],
        }
    }

    fn correlated(&mut self, stream: &mut SeedStream, out: &mut [f64]) {
        let d = self.dim;
        stream.fill_normal(&mut self.scratch);
        out.iter_mut().for_each(|x| *x = 0.0);
        for c in 0..d {
            let g = self.scratch[c];
            let col = &self.sqrt[c * d..(c + 1) * d];
            for r in 0..d {
                out[r] += col[r] * g;
            }
        }
    }

    /// Draw order: task vector, context tokens `x_1..x_N`, query token.
    pub fn sample_into(&mut self, n: usize, stream: &mut SeedStream, buf: &mut SequenceBuf) {
        let d = self.dim;
        buf.n = n;
        buf.w.resize(d, 0.0);
        buf.xs.resize(d * n, 0.0);
        buf.ys.resize(n, 0.0);
        buf.xq.resize(d, 0.0);
        stream.fill_normal(&mut buf.w);
        for k in 0..n {
            let x = &mut buf.xs[k * d..(k + 1) * d];
            self.correlated(stream, x);
            buf.ys[k] = dot(&buf.w, x);
        }
        let mut xq = std::mem::take(&mut buf.xq);
        self.correlated(stream, &mut xq);
        buf.xq = xq;
        buf.yq = dot(&buf.w, &buf.xq);
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Samples `w ~ N(0, I)`, tokens `x ~ N(0, Λ)` and noiseless outputs.
pub fn sample_sequence(cov: &CovarianceSpec, length: usize, stream: &mut SeedStream) -> Result<Sequence> {
    if length == 0 {
        return Err(LsaError::InvalidArgument("sequence length must be >= 1".into()));
    }
    let mut sampler = SequenceSampler::new(cov);
    let mut buf = SequenceBuf::default();
    sampler.sample_into(length, stream, &mut buf);
    Ok(Sequence::from_buf(cov.dim, &buf))
}

impl Sequence {
    pub fn from_buf(dim: usize, buf: &SequenceBuf) -> Self {
        Sequence {
            context_inputs: DMatrix::from_column_slice(dim, buf.n, &buf.xs),
            context_outputs: DVector::from_column_slice(&buf.ys),
            query_input: DVector::from_column_slice(&buf.xq),
            query_output: buf.yq,
            task_vector: DVector::from_column_slice(&buf.w),
        }
    }
}

/// In-context correlation `β` and covariance `Λ̂` of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextStats {
    pub beta: DVector<f64>,
    pub context_cov: DMatrix<f64>,
}

pub fn context_stats(seq: &Sequence) -> ContextStats {
    let x = &seq.context_inputs;
    let n = x.ncols() as f64;
    let beta = (x * &seq.context_outputs) / n;
    let context_cov = (x * x.transpose()) / n;
    ContextStats { beta, context_cov }
}

/// Closed-form data moments for a covariance and a length law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationStats {
    pub cov: CovarianceSpec,
    pub exp_inv_len: f64,
    /// `E(Λ̂²) = Λ² + E(1/N)(Λ + tr(Λ) I)Λ`.
    pub exp_sq_cov: DMatrix<f64>,
    /// Eigenvalues of `exp_sq_cov` along `e_1..e_D`.
    pub a_vals: Vec<f64>,
    pub trace: f64,
    pub lambda: DMatrix<f64>,
    pub lambda_sq: DMatrix<f64>,
}

pub fn population_stats(cov: &CovarianceSpec, law: &LengthLaw) -> Result<PopulationStats> {
    law.validate()?;
    let eps = expected_inverse_length(law);
    Ok(population_stats_with(cov, eps))
}

/// Same as [`population_stats`] for a given `E(1/N)`.
pub fn population_stats_with(cov: &CovarianceSpec, exp_inv_len: f64) -> PopulationStats {
    let d = cov.dim;
    let trace = cov.trace();
    let lambda = cov.matrix();
    let lambda_sq = &lambda * &lambda;
    let shifted = &lambda + DMatrix::identity(d, d) * trace;
    let exp_sq_cov = &lambda_sq + (shifted * &lambda) * exp_inv_len;
    let a_vals = cov
        .eigenvalues
        .iter()
        .map(|&l| l * l * (1.0 + exp_inv_len * (1.0 + trace / l)))
        .collect();
    PopulationStats {
        cov: cov.clone(),
        exp_inv_len,
        exp_sq_cov,
        a_vals,
        trace,
        lambda,
        lambda_sq,
    }
}

impl PopulationStats {
    pub fn dim(&self) -> usize {
        self.cov.dim
    }

    /// `λ_d / a_d`, the target gain on eigen-direction `d` (0-based).
    pub fn gain(&self, d: usize) -> f64 {
        self.cov.eigenvalues[d] / self.a_vals[d]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn diag_cov(vals: &[f64]) -> CovarianceSpec {
        build_covariance(vals, EigenBasis::Identity).unwrap()
    }

    #[test]
    fn identity_covariance() {
        let c = diag_cov(&[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(c.matrix(), DMatrix::identity(4, 4));
    }

    #[test]
    fn fig3_spectrum_is_diagonal() {
        let c = diag_cov(&[0.4, 0.3, 0.2, 0.1]);
        let m = c.matrix();
        assert_eq!(m, DMatrix::from_diagonal(&DVector::from_vec(vec![0.4, 0.3, 0.2, 0.1])));
    }

    #[test]
    fn unsorted_input_is_reordered() {
        let c = diag_cov(&[0.3, 0.4]);
        assert_eq!(c.eigenvalues, vec![0.4, 0.3]);
        // The 0.4 direction was the second basis vector.
        assert_eq!(c.eigvec(0), DVector::from_vec(vec![0.0, 1.0]));
        assert_eq!(c.matrix(), DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.4]));
    }

    #[test]
    fn rejects_non_positive_eigenvalue() {
        let err = build_covariance(&[1.0, 0.0], EigenBasis::Identity).unwrap_err();
        assert!(matches!(err, LsaError::NonPositiveEigenvalue { index: 1, .. }));
        assert!(build_covariance(&[-1.0], EigenBasis::Identity).is_err());
    }

    #[test]
    fn rejects_non_orthonormal_basis() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let err = build_covariance(&[1.0, 0.5], EigenBasis::Matrix(m)).unwrap_err();
        assert!(matches!(err, LsaError::NotOrthonormal { .. }));
    }

    #[test]
    fn random_basis_is_orthonormal_and_deterministic() {
        let a = build_covariance(
            &[0.4, 0.3, 0.2, 0.1],
            EigenBasis::RandomOrthonormal(SeedStream::named("t", 3, "basis")),
        )
        .unwrap();
        let b = build_covariance(
            &[0.4, 0.3, 0.2, 0.1],
            EigenBasis::RandomOrthonormal(SeedStream::named("t", 3, "basis")),
        )
        .unwrap();
        assert!(gram_deviation(&a.eigenvectors) < 1e-12);
        assert_eq!(a, b);
        let m = a.matrix();
        assert_relative_eq!((&m - m.transpose()).abs().max(), 0.0, epsilon = 1e-15);
        for (d, &l) in a.eigenvalues.iter().enumerate() {
            let e = a.eigvec(d);
            assert_relative_eq!(&m * &e, e * l, epsilon = 1e-12);
        }
    }

    #[test]
    fn harmonic_rule_has_unit_trace() {
        let v = EigenSpec::HarmonicUnitTrace { dim: 8 }.values();
        assert_relative_eq!(v.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
        assert_relative_eq!(v[0] / v[1], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn inverse_length_values() {
        assert_relative_eq!(expected_inverse_length(&LengthLaw::Fixed { n: 31 }), 1.0 / 31.0);
        assert_relative_eq!(expected_inverse_length(&LengthLaw::Uniform { max: 2 }), 0.75);
        // H_31 / 31, summed independently in reverse order.
        let h31: f64 = (1..=31).rev().map(|n| 1.0 / n as f64).sum();
        let e = expected_inverse_length(&LengthLaw::Uniform { max: 31 });
        assert_relative_eq!(e, h31 / 31.0, epsilon = 1e-15);
        assert_relative_eq!(e, 0.129911, epsilon = 5e-7);
    }

    #[test]
    fn inverse_length_decreases_with_max() {
        let vals: Vec<f64> = (1..60)
            .map(|k| expected_inverse_length(&LengthLaw::Uniform { max: k }))
            .collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn invalid_length_laws() {
        assert!(LengthLaw::Fixed { n: 0 }.validate().is_err());
        assert!(LengthLaw::Uniform { max: 0 }.validate().is_err());
        assert!(population_stats(&diag_cov(&[1.0]), &LengthLaw::Fixed { n: 0 }).is_err());
    }

    #[test]
    fn uniform_law_sampling_covers_range() {
        let law = LengthLaw::Uniform { max: 5 };
        let mut s = SeedStream::named("len", 0, "n");
        let mut seen = [0usize; 6];
        for _ in 0..5000 {
            seen[law.sample(&mut s)] += 1;
        }
        assert_eq!(seen[0], 0);
        assert!(seen[1..].iter().all(|&c| c > 800));
    }

    #[test]
    fn white_population_moment() {
        let stats = population_stats(&diag_cov(&[1.0; 4]), &LengthLaw::Fixed { n: 31 }).unwrap();
        assert_relative_eq!(stats.exp_sq_cov, DMatrix::identity(4, 4) * (36.0 / 31.0), epsilon = 1e-14);
    }

    #[test]
    fn long_context_limit() {
        let c = diag_cov(&[0.4, 0.3, 0.2, 0.1]);
        let stats = population_stats(&c, &LengthLaw::Fixed { n: 1_000_000_000 }).unwrap();
        let l2 = c.matrix() * c.matrix();
        for (a, b) in stats.exp_sq_cov.iter().zip(l2.iter()) {
            if *b != 0.0 {
                assert!((a - b).abs() / b < 1e-6);
            }
        }
    }

    #[test]
    fn fig3_first_a_value() {
        let stats = population_stats(&diag_cov(&[0.4, 0.3, 0.2, 0.1]), &LengthLaw::Fixed { n: 31 }).unwrap();
        assert_relative_eq!(stats.a_vals[0], 0.16 * (1.0 + 3.5 / 31.0), epsilon = 1e-15);
        assert_relative_eq!(stats.a_vals[0], 0.178065, epsilon = 1e-6);
        for (d, &l) in stats.cov.eigenvalues.iter().enumerate() {
            assert!(stats.a_vals[d] > l * l);
        }
    }

    #[test]
    fn exp_sq_cov_shares_eigenvectors() {
        let c = build_covariance(
            &[0.5, 0.25, 0.2, 0.05],
            EigenBasis::RandomOrthonormal(SeedStream::named("t", 9, "basis")),
        )
        .unwrap();
        let stats = population_stats(&c, &LengthLaw::Uniform { max: 7 }).unwrap();
        for d in 0..4 {
            let e = c.eigvec(d);
            assert_relative_eq!(&stats.exp_sq_cov * &e, e * stats.a_vals[d], epsilon = 1e-13);
        }
    }

    #[test]
    fn construction_identity_and_determinism() {
        let c = diag_cov(&[0.4, 0.3, 0.2, 0.1]);
        let a = sample_sequence(&c, 5, &mut SeedStream::named("s", 1, "data")).unwrap();
        let b = sample_sequence(&c, 5, &mut SeedStream::named("s", 1, "data")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.query_output - a.task_vector.dot(&a.query_input), 0.0);
        for n in 0..5 {
            let y = a.task_vector.dot(&a.context_inputs.column(n));
            assert_eq!(a.context_outputs[n], y);
        }
        assert!(sample_sequence(&c, 0, &mut SeedStream::named("s", 1, "data")).is_err());
    }

    #[test]
    fn query_covariance_matches_identity() {
        let c = diag_cov(&[1.0; 3]);
        let mut s = SeedStream::named("lln", 0, "data");
        let mut acc = DMatrix::<f64>::zeros(3, 3);
        let draws = 100_000;
        for _ in 0..draws {
            let seq = sample_sequence(&c, 1, &mut s).unwrap();
            acc += &seq.query_input * seq.query_input.transpose();
        }
        acc /= draws as f64;
        assert!((acc - DMatrix::identity(3, 3)).abs().max() < 0.05);
    }

    #[test]
    fn single_token_context() {
        let seq = Sequence {
            context_inputs: DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
            context_outputs: DVector::from_vec(vec![2.0]),
            query_input: DVector::from_vec(vec![0.0, 1.0]),
            query_output: 0.0,
            task_vector: DVector::from_vec(vec![2.0, 0.0]),
        };
        let s = context_stats(&seq);
        assert_eq!(s.beta, DVector::from_vec(vec![2.0, 0.0]));
        assert_eq!(s.context_cov, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn zero_context_inputs() {
        let seq = Sequence {
            context_inputs: DMatrix::zeros(3, 4),
            context_outputs: DVector::zeros(4),
            query_input: DVector::from_vec(vec![1.0, 2.0, 3.0]),
            query_output: 0.0,
            task_vector: DVector::zeros(3),
        };
        let s = context_stats(&seq);
        assert_eq!(s.beta, DVector::zeros(3));
        assert_eq!(s.context_cov, DMatrix::zeros(3, 3));
    }

    #[test]
    fn beta_equals_context_cov_times_task() {
        let c = build_covariance(
            &[0.7, 0.2, 0.1],
            EigenBasis::RandomOrthonormal(SeedStream::named("t", 2, "basis")),
        )
        .unwrap();
        let mut s = SeedStream::named("beta", 0, "data");
        for n in [1, 3, 17] {
            let seq = sample_sequence(&c, n, &mut s).unwrap();
            let st = context_stats(&seq);
            assert_relative_eq!(st.beta, &st.context_cov * &seq.task_vector, epsilon = 1e-12);
            let sym = (&st.context_cov - st.context_cov.transpose()).abs().max();
            assert!(sym < 1e-15);
            assert!(st.context_cov.clone().symmetric_eigenvalues().min() > -1e-12);
        }
    }

    /// Monte Carlo estimate of `E(Λ̂²)` over 10^5 contexts, compared entrywise.
    #[test]
    fn exp_sq_cov_matches_monte_carlo() {
        let c = build_covariance(
            &[0.4, 0.3, 0.2, 0.1],
            EigenBasis::RandomOrthonormal(SeedStream::named("t", 5, "basis")),
        )
        .unwrap();
        for law in [LengthLaw::Fixed { n: 31 }, LengthLaw::Uniform { max: 6 }] {
            let stats = population_stats(&c, &law).unwrap();
            let mut s = SeedStream::named("esq", 0, "data");
            let mut acc = DMatrix::<f64>::zeros(4, 4);
            let m = 100_000;
            for _ in 0..m {
                let n = law.sample(&mut s);
                let seq = sample_sequence(&c, n, &mut s).unwrap();
                let st = context_stats(&seq);
                acc += &st.context_cov * &st.context_cov;
            }
            acc /= m as f64;
            // Off-diagonal entries can be tiny; scale by the matrix norm.
            let scale = stats.exp_sq_cov.abs().max();
            for (a, b) in acc.iter().zip(stats.exp_sq_cov.iter()) {
                assert!((a - b).abs() < 0.03 * scale.max(b.abs()), "{a} vs {b}");
            }
        }
    }
}

//! Monte Carlo oracle for the expected gradient and loss.
//!
//! Samples are drawn in fixed-size chunks; chunk `c` uses sub-stream `c` of
//! the caller's stream and chunk moments are merged in chunk order, so the
//! estimate is bit-identical whether chunks run in parallel or not.

use serde::{Deserialize, Serialize};

use crate::error::{LsaError, Result};
use crate::models::{Layout, ModelKind, Params};
use crate::rng::SeedStream;
use crate::task::{dot, CovarianceSpec, LengthLaw, Sequence, SequenceBuf, SequenceSampler};

/// Samples per chunk.
pub const CHUNK: usize = 1 << 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    Sequential,
    /// Uses rayon when the `parallel` feature is on; sequential otherwise.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Componentwise sample mean and standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    pub samples: usize,
}

/// Running mean and centred second moment (Welford, merged with Chan's rule).
#[derive(Debug, Clone)]
struct Moments {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), &xi) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = xi - *m;
            *m += delta / self.n;
            *s += delta * (xi - *m);
        }
    }

    fn merge(&mut self, other: &Moments) {
        if other.n == 0.0 {
            return;
        }
        let n = self.n + other.n;
        for j in 0..self.mean.len() {
            let delta = other.mean[j] - self.mean[j];
            self.mean[j] += delta * other.n / n;
            self.m2[j] += other.m2[j] + delta * delta * self.n * other.n / n;
        }
        self.n = n;
    }

    fn finish(self) -> McEstimate {
        let n = self.n;
        let std_err = self
            .m2
            .iter()
            .map(|&s| if n > 1.0 { (s / (n - 1.0) / n).sqrt() } else { f64::NAN })
            .collect();
        McEstimate {
            mean: self.mean,
            std_err,
            samples: n as usize,
        }
    }
}

/// One sample reduced to what the model sees: `β`, `x_q` and `y_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub beta: Vec<f64>,
    pub xq: Vec<f64>,
    pub yq: f64,
}

impl Sample {
    pub fn from_sequence(seq: &Sequence) -> Self {
        let st = crate::task::context_stats(seq);
        Self {
            beta: st.beta.as_slice().to_vec(),
            xq: seq.query_input.as_slice().to_vec(),
            yq: seq.query_output,
        }
    }

    fn fill_from(&mut self, buf: &SequenceBuf) {
        let d = buf.xq.len();
        self.beta.clear();
        self.beta.resize(d, 0.0);
        for k in 0..buf.n {
            let y = buf.ys[k];
            for (b, x) in self.beta.iter_mut().zip(&buf.xs[k * d..(k + 1) * d]) {
                *b += y * x;
            }
        }
        let inv = 1.0 / buf.n as f64;
        self.beta.iter_mut().for_each(|b| *b *= inv);
        self.xq.clear();
        self.xq.extend_from_slice(&buf.xq);
        self.yq = buf.yq;
    }
}

/// Prediction and `∂ŷ/∂θ` (into `d_out`) for flat parameters.
pub fn prediction_and_jacobian(layout: Layout, x: &[f64], s: &Sample, d_out: &mut [f64]) -> f64 {
    let d = layout.dim;
    let h = layout.heads;
    let (beta, xq) = (&s.beta[..], &s.xq[..]);
    let mut y = 0.0;
    match layout.kind {
        ModelKind::Merged => {
            for i in 0..h {
                let v = x[i];
                let off = h + i * d * d;
                let u = &x[off..off + d * d];
                // βᵀ U x_q with U column-major
                let mut a = 0.0;
                for c in 0..d {
                    a += xq[c] * dot(beta, &u[c * d..(c + 1) * d]);
                }
                d_out[i] = a;
                y += v * a;
                for c in 0..d {
                    let vx = v * xq[c];
                    for r in 0..d {
                        d_out[off + r + c * d] = vx * beta[r];
                    }
                }
            }
        }
        ModelKind::Separate => {
            let rank = layout.rank;
            let ko = layout.key_offset();
            let qo = layout.query_offset();
            for i in 0..h {
                let v = x[i];
                let mut a = 0.0;
                for r in 0..rank {
                    let j = i * rank + r;
                    let (kr, qr) = (ko + j * d..ko + (j + 1) * d, qo + j * d..qo + (j + 1) * d);
                    let sk = dot(beta, &x[kr.clone()]);
                    let tq = dot(&x[qr.clone()], xq);
                    a += sk * tq;
                    for (o, b) in d_out[kr].iter_mut().zip(beta) {
                        *o = v * tq * b;
                    }
                    for (o, q) in d_out[qr].iter_mut().zip(xq) {
                        *o = v * sk * q;
                    }
                }
                d_out[i] = a;
                y += v * a;
            }
        }
    }
    y
}

pub fn per_sample_loss(layout: Layout, x: &[f64], s: &Sample) -> f64 {
    let mut scratch = vec![0.0; layout.len()];
    let e = s.yq - prediction_and_jacobian(layout, x, s, &mut scratch);
    e * e
}

/// `(y_q - ŷ_q) ∂ŷ_q/∂θ`, i.e. `-½ ∂ℓ/∂θ` for the sample loss `ℓ`.
pub fn per_sample_grad(layout: Layout, x: &[f64], s: &Sample, out: &mut [f64]) -> f64 {
    let y = prediction_and_jacobian(layout, x, s, out);
    let e = s.yq - y;
    out.iter_mut().for_each(|g| *g *= e);
    e * e
}

/// Central finite difference of `-½ ℓ` with step `h`.
pub fn finite_difference_grad(layout: Layout, x: &[f64], s: &Sample, h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|j| {
            let x0 = xp[j];
            xp[j] = x0 + h;
            let lp = per_sample_loss(layout, &xp, s);
            xp[j] = x0 - h;
            let lm = per_sample_loss(layout, &xp, s);
            xp[j] = x0;
            -(lp - lm) / (4.0 * h)
        })
        .collect()
}

/// Which per-sample quantity to average.
#[derive(Clone, Copy)]
enum Target {
    Grad,
    Loss,
}

fn run_chunk(
    layout: Layout,
    x: &[f64],
    cov: &CovarianceSpec,
    law: &LengthLaw,
    stream: &SeedStream,
    chunk: usize,
    count: usize,
    target: Target,
) -> Moments {
    let mut rng = stream.substream(chunk as u64);
    let mut sampler = SequenceSampler::new(cov);
    let mut buf = SequenceBuf::default();
    let mut sample = Sample {
        beta: Vec::new(),
        xq: Vec::new(),
        yq: 0.0,
    };
    let len = match target {
        Target::Grad => layout.len(),
        Target::Loss => 1,
    };
    let mut acc = Moments::new(len);
    let mut g = vec![0.0; layout.len()];
    for _ in 0..count {
        let n = law.sample(&mut rng);
        sampler.sample_into(n, &mut rng, &mut buf);
        sample.fill_from(&buf);
        let loss = per_sample_grad(layout, x, &sample, &mut g);
        match target {
            Target::Grad => acc.push(&g),
            Target::Loss => acc.push(&[loss]),
        }
    }
    acc
}

fn estimate(
    p: &Params,
    cov: &CovarianceSpec,
    law: &LengthLaw,
    batch: usize,
    stream: &SeedStream,
    exec: Execution,
    target: Target,
) -> Result<McEstimate> {
    if batch < 2 {
        return Err(LsaError::InvalidArgument(format!("batch must be >= 2, got {batch}")));
    }
    law.validate()?;
    let layout = p.layout();
    if layout.dim != cov.dim {
        return Err(LsaError::Dimension(format!(
            "model dim {} but covariance dim {}",
            layout.dim, cov.dim
        )));
    }
    let x = p.to_flat();
    let chunks = batch.div_ceil(CHUNK);
    let size = |c: usize| CHUNK.min(batch - c * CHUNK);
    let job = |c: usize| run_chunk(layout, &x, cov, law, stream, c, size(c), target);
    let parts: Vec<Moments> = match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..chunks).into_par_iter().map(job).collect()
        }
        _ => (0..chunks).map(job).collect(),
    };
    let mut total = Moments::new(parts[0].mean.len());
    for part in &parts {
        total.merge(part);
    }
    Ok(total.finish())
}

/// Monte Carlo estimate of `τ dθ/dt` with standard errors.
pub fn mc_gradient(
    p: &Params,
    cov: &CovarianceSpec,
    law: &LengthLaw,
    batch: usize,
    stream: &SeedStream,
) -> Result<McEstimate> {
    estimate(p, cov, law, batch, stream, Execution::default(), Target::Grad)
}

pub fn mc_gradient_with(
    p: &Params,
    cov: &CovarianceSpec,
    law: &LengthLaw,
    batch: usize,
    stream: &SeedStream,
    exec: Execution,
) -> Result<McEstimate> {
    estimate(p, cov, law, batch, stream, exec, Target::Grad)
}

/// Monte Carlo estimate of the loss; `mean` and `std_err` have length 1.
pub fn mc_loss(
    p: &Params,
    cov: &CovarianceSpec,
    law: &LengthLaw,
    batch: usize,
    stream: &SeedStream,
) -> Result<McEstimate> {
    estimate(p, cov, law, batch, stream, Execution::default(), Target::Loss)
}

/// Gradient statistics over an explicit batch of samples.
pub fn batch_gradient(p: &Params, samples: &[Sample]) -> Result<McEstimate> {
    if samples.len() < 2 {
        return Err(LsaError::InvalidArgument("batch must be >= 2".into()));
    }
    let layout = p.layout();
    let x = p.to_flat();
    let mut acc = Moments::new(layout.len());
    let mut g = vec![0.0; layout.len()];
    for s in samples {
        if s.beta.len() != layout.dim || s.xq.len() != layout.dim {
            return Err(LsaError::Dimension("sample dimension differs from model".into()));
        }
        per_sample_grad(layout, &x, s, &mut g);
        acc.push(&g);
    }
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_merged, init_separate};
    use crate::task::{build_covariance, sample_sequence, EigenBasis};

    fn cov3() -> CovarianceSpec {
        build_covariance(&[1.2, 0.6, 0.3], EigenBasis::RandomOrthonormal(SeedStream::named("mc", 0, "basis"))).unwrap()
    }

    fn params(s: &mut SeedStream) -> [Params; 2] {
        [
            Params::Merged(init_merged(3, 2, 1.0, s).unwrap()),
            Params::Separate(init_separate(3, 2, 2, 1.0, s).unwrap()),
        ]
    }

    #[test]
    fn duplicated_batch_has_zero_error() {
        let cov = cov3();
        let mut s = SeedStream::named("mc", 1, "data");
        let seq = sample_sequence(&cov, 5, &mut s).unwrap();
        let sample = Sample::from_sequence(&seq);
        for p in params(&mut s) {
            let est = batch_gradient(&p, &vec![sample.clone(); 8]).unwrap();
            let mut one = vec![0.0; p.layout().len()];
            per_sample_grad(p.layout(), &p.to_flat(), &sample, &mut one);
            for j in 0..one.len() {
                assert!((est.mean[j] - one[j]).abs() <= 1e-15 * (1.0 + one[j].abs()));
                assert!(est.std_err[j] < 1e-12 * (1.0 + one[j].abs()));
            }
        }
    }

    #[test]
    fn per_sample_prediction_matches_forward() {
        let cov = cov3();
        let mut s = SeedStream::named("mc", 2, "data");
        for p in params(&mut s) {
            let seq = sample_sequence(&cov, 7, &mut s).unwrap();
            let st = crate::task::context_stats(&seq);
            let want = p.forward(&st, &seq.query_input).unwrap();
            let mut scratch = vec![0.0; p.layout().len()];
            let got = prediction_and_jacobian(p.layout(), &p.to_flat(), &Sample::from_sequence(&seq), &mut scratch);
            assert!((got - want).abs() < 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn finite_differences_agree() {
        let cov = cov3();
        let mut s = SeedStream::named("mc", 3, "data");
        for p in params(&mut s) {
            let seq = sample_sequence(&cov, 6, &mut s).unwrap();
            let sample = Sample::from_sequence(&seq);
            let mut g = vec![0.0; p.layout().len()];
            per_sample_grad(p.layout(), &p.to_flat(), &sample, &mut g);
            let fd = finite_difference_grad(p.layout(), &p.to_flat(), &sample, 1e-5);
            let scale = g.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-5 * scale, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let cov = cov3();
        let mut s = SeedStream::named("mc", 4, "init");
        let p = &params(&mut s)[1];
        let stream = SeedStream::named("mc", 4, "data");
        let law = LengthLaw::Uniform { max: 6 };
        let a = mc_gradient_with(p, &cov, &law, 3 * CHUNK + 17, &stream, Execution::Sequential).unwrap();
        let b = mc_gradient_with(p, &cov, &law, 3 * CHUNK + 17, &stream, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples, 3 * CHUNK + 17);
    }

    #[test]
    fn rejects_tiny_batch() {
        let cov = cov3();
        let p = Params::Merged(crate::models::MergedParams::zeros(3, 1));
        let s = SeedStream::named("mc", 5, "data");
        assert!(mc_gradient(&p, &cov, &LengthLaw::Fixed { n: 3 }, 1, &s).is_err());
    }
}

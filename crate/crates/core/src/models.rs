//! The two linear-attention parametrizations and their equivalent linear
//! networks.
//!
//! Only the blocks that reach the bottom-right output entry are represented:
//! the value scalar `v_i`, the `D x D` merged key-query block `U_i`, and the
//! `D`-dimensional key/query vectors `k_{i,r}`, `q_{i,r}`. The remaining
//! blocks stay at zero under gradient flow from a zero start and are never
//! stored.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LsaError, Result};
use crate::rng::SeedStream;
use crate::task::ContextStats;

/// Merged key-query parametrization, `ŷ = Σ_i v_i βᵀ U_i x_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedParams {
    pub dim: usize,
    pub values: Vec<f64>,
    pub merged_kq: Vec<DMatrix<f64>>,
}

/// Separate rank-`R` key and query, `ŷ = Σ_i Σ_r v_i (βᵀ k_{i,r})(q_{i,r}ᵀ x_q)`.
///
/// Keys and queries are stored head-major: entry `i * rank + r`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparateParams {
    pub dim: usize,
    pub rank: usize,
    pub values: Vec<f64>,
    pub keys: Vec<DVector<f64>>,
    pub queries: Vec<DVector<f64>>,
}

/// Column-stacked `vec(β x_qᵀ)`, length `D²`.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicFeature {
    pub z: DVector<f64>,
}

/// End-to-end matrix `m` with `ŷ = βᵀ m x_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveMatrix {
    pub m: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Merged,
    Separate,
}

/// Either parametrization.
#[derive(Debug, Clone, PartialEq)]
pub enum Params {
    Merged(MergedParams),
    Separate(SeparateParams),
}

/// Shape of a parameter set; also fixes the flat layout used by the
/// integrator.
///
/// Merged: `[v_1..v_H, vec(U_1), .., vec(U_H)]` with column-major `vec`.
/// Separate: `[v_1..v_H, k_{1,1}, .., k_{H,R}, q_{1,1}, .., q_{H,R}]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub kind: ModelKind,
    pub dim: usize,
    pub heads: usize,
    pub rank: usize,
}

impl Layout {
    pub fn merged(dim: usize, heads: usize) -> Self {
        Self {
            kind: ModelKind::Merged,
            dim,
            heads,
            rank: 1,
        }
    }

    pub fn separate(dim: usize, heads: usize, rank: usize) -> Self {
        Self {
            kind: ModelKind::Separate,
            dim,
            heads,
            rank,
        }
    }

    pub fn len(&self) -> usize {
        match self.kind {
            ModelKind::Merged => self.heads * (1 + self.dim * self.dim),
            ModelKind::Separate => self.heads * (1 + 2 * self.rank * self.dim),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Offset of the first key vector (separate) or `U_1` (merged).
    pub fn key_offset(&self) -> usize {
        self.heads
    }

    pub fn query_offset(&self) -> usize {
        self.heads + self.heads * self.rank * self.dim
    }
}

fn check_scale(w_init: f64) -> Result<()> {
    if !(w_init >= 0.0) || !w_init.is_finite() {
        return Err(LsaError::InvalidArgument(format!("w_init must be >= 0, got {w_init}")));
    }
    Ok(())
}

/// `v_i ~ N(0, w²/H)`, `U_i^{d,d'} ~ N(0, w²/(H D²))`.
pub fn init_merged(dim: usize, heads: usize, w_init: f64, stream: &mut SeedStream) -> Result<MergedParams> {
    check_scale(w_init)?;
    if dim == 0 || heads == 0 {
        return Err(LsaError::InvalidArgument("dim and heads must be >= 1".into()));
    }
    let sv = w_init / (heads as f64).sqrt();
    let su = w_init / ((heads * dim * dim) as f64).sqrt();
    let values = (0..heads).map(|_| sv * stream.normal()).collect();
    let merged_kq = (0..heads)
        .map(|_| DMatrix::from_fn(dim, dim, |_, _| su * stream.normal()))
        .collect();
    Ok(MergedParams {
        dim,
        values,
        merged_kq,
    })
}

/// `v_i ~ N(0, w²/H)`, `k_{i,r}^d, q_{i,r}^d ~ N(0, w²/(H R D))`.
pub fn init_separate(
    dim: usize,
    heads: usize,
    rank: usize,
    w_init: f64,
    stream: &mut SeedStream,
) -> Result<SeparateParams> {
    check_scale(w_init)?;
    if dim == 0 || heads == 0 {
        return Err(LsaError::InvalidArgument("dim and heads must be >= 1".into()));
    }
    if rank == 0 || rank > dim {
        return Err(LsaError::InvalidArgument(format!("rank must be in 1..={dim}, got {rank}")));
    }
    let sv = w_init / (heads as f64).sqrt();
    let sk = w_init / ((heads * rank * dim) as f64).sqrt();
    let values = (0..heads).map(|_| sv * stream.normal()).collect();
    let mut draw = || DVector::from_fn(dim, |_, _| sk * stream.normal());
    let keys = (0..heads * rank).map(|_| draw()).collect();
    let queries = (0..heads * rank).map(|_| draw()).collect();
    Ok(SeparateParams {
        dim,
        rank,
        values,
        keys,
        queries,
    })
}

impl MergedParams {
    pub fn zeros(dim: usize, heads: usize) -> Self {
        Self {
            dim,
            values: vec![0.0; heads],
            merged_kq: vec![DMatrix::zeros(dim, dim); heads],
        }
    }

    pub fn heads(&self) -> usize {
        self.values.len()
    }

    pub fn layout(&self) -> Layout {
        Layout::merged(self.dim, self.heads())
    }

    /// Second-layer weights `w_2` of the equivalent two-layer network.
    pub fn w2(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }

    /// First-layer weights `W_1`; row `i` is `vec(U_i)ᵀ`.
    pub fn w1(&self) -> DMatrix<f64> {
        let d2 = self.dim * self.dim;
        DMatrix::from_fn(self.heads(), d2, |i, k| self.merged_kq[i].as_slice()[k])
    }

    pub fn from_layers(dim: usize, w2: &DVector<f64>, w1: &DMatrix<f64>) -> Self {
        let merged_kq = (0..w2.len())
            .map(|i| DMatrix::from_iterator(dim, dim, w1.row(i).iter().copied()))
            .collect();
        Self {
            dim,
            values: w2.iter().copied().collect(),
            merged_kq,
        }
    }

    fn check(&self) -> Result<()> {
        if self.merged_kq.len() != self.values.len() {
            return Err(LsaError::Dimension("one U_i per value weight".into()));
        }
        if self.merged_kq.iter().any(|u| u.nrows() != self.dim || u.ncols() != self.dim) {
            return Err(LsaError::Dimension(format!("every U_i must be {0}x{0}", self.dim)));
        }
        Ok(())
    }
}

impl SeparateParams {
    pub fn zeros(dim: usize, heads: usize, rank: usize) -> Self {
        Self {
            dim,
            rank,
            values: vec![0.0; heads],
            keys: vec![DVector::zeros(dim); heads * rank],
            queries: vec![DVector::zeros(dim); heads * rank],
        }
    }

    pub fn heads(&self) -> usize {
        self.values.len()
    }

    pub fn layout(&self) -> Layout {
        Layout::separate(self.dim, self.heads(), self.rank)
    }

    pub fn key(&self, head: usize, r: usize) -> &DVector<f64> {
        &self.keys[head * self.rank + r]
    }

    pub fn query(&self, head: usize, r: usize) -> &DVector<f64> {
        &self.queries[head * self.rank + r]
    }

    /// The `(RH, 1)` model that gives each rank-one piece its own head with a
    /// copy of the shared value weight.
    pub fn split_ranks(&self) -> SeparateParams {
        let values = (0..self.heads())
            .flat_map(|i| std::iter::repeat(self.values[i]).take(self.rank))
            .collect();
        SeparateParams {
            dim: self.dim,
            rank: 1,
            values,
            keys: self.keys.clone(),
            queries: self.queries.clone(),
        }
    }

    fn check(&self) -> Result<()> {
        let hr = self.heads() * self.rank;
        if self.rank == 0 || self.rank > self.dim {
            return Err(LsaError::InvalidArgument(format!("rank {} outside 1..={}", self.rank, self.dim)));
        }
        if self.keys.len() != hr || self.queries.len() != hr {
            return Err(LsaError::Dimension(format!("expected {hr} key and query vectors")));
        }
        if self.keys.iter().chain(&self.queries).any(|v| v.len() != self.dim) {
            return Err(LsaError::Dimension(format!("keys and queries must have length {}", self.dim)));
        }
        Ok(())
    }
}

fn check_inputs(dim: usize, stats: &ContextStats, x_q: &DVector<f64>) -> Result<()> {
    if stats.beta.len() != dim || x_q.len() != dim {
        return Err(LsaError::Dimension(format!(
            "model dim {dim}, beta {}, x_q {}",
            stats.beta.len(),
            x_q.len()
        )));
    }
    Ok(())
}

pub fn forward_merged(p: &MergedParams, stats: &ContextStats, x_q: &DVector<f64>) -> Result<f64> {
    p.check()?;
    check_inputs(p.dim, stats, x_q)?;
    let ux: Vec<f64> = p.merged_kq.iter().map(|u| stats.beta.dot(&(u * x_q))).collect();
    Ok(p.values.iter().zip(ux).map(|(v, s)| v * s).sum())
}

pub fn forward_separate(p: &SeparateParams, stats: &ContextStats, x_q: &DVector<f64>) -> Result<f64> {
    p.check()?;
    check_inputs(p.dim, stats, x_q)?;
    let mut out = 0.0;
    for i in 0..p.heads() {
        let mut head = 0.0;
        for r in 0..p.rank {
            head += stats.beta.dot(p.key(i, r)) * p.query(i, r).dot(x_q);
        }
        out += p.values[i] * head;
    }
    Ok(out)
}

pub fn cubic_feature(stats: &ContextStats, x_q: &DVector<f64>) -> Result<CubicFeature> {
    let d = stats.beta.len();
    if x_q.len() != d {
        return Err(LsaError::Dimension(format!("beta has length {d}, x_q {}", x_q.len())));
    }
    let outer = &stats.beta * x_q.transpose();
    Ok(CubicFeature {
        z: DVector::from_column_slice(outer.as_slice()),
    })
}

/// `w_2ᵀ W_1 z`.
pub fn forward_mlp(p: &MergedParams, z: &CubicFeature) -> Result<f64> {
    p.check()?;
    if z.z.len() != p.dim * p.dim {
        return Err(LsaError::Dimension(format!("z has length {}, expected {}", z.z.len(), p.dim * p.dim)));
    }
    let hidden = p.w1() * &z.z;
    Ok(p.w2().dot(&hidden))
}

/// Convolutional matrix `K_i`: `D` copies of `k_iᵀ` on the block diagonal of
/// a `D x D²` matrix (kernel size and stride `D`).
pub fn conv_matrix(k: &DVector<f64>) -> DMatrix<f64> {
    let d = k.len();
    let mut out = DMatrix::zeros(d, d * d);
    for row in 0..d {
        for j in 0..d {
            out[(row, row * d + j)] = k[j];
        }
    }
    out
}

/// `Σ_i v_i q_iᵀ K_i z`; rank-one models only.
pub fn forward_cnn(p: &SeparateParams, z: &CubicFeature) -> Result<f64> {
    p.check()?;
    if p.rank != 1 {
        return Err(LsaError::InvalidArgument(format!(
            "convolutional form needs rank 1, got {}",
            p.rank
        )));
    }
    if z.z.len() != p.dim * p.dim {
        return Err(LsaError::Dimension(format!("z has length {}, expected {}", z.z.len(), p.dim * p.dim)));
    }
    let mut out = 0.0;
    for i in 0..p.heads() {
        let hidden = conv_matrix(p.key(i, 0)) * &z.z;
        out += p.values[i] * p.query(i, 0).dot(&hidden);
    }
    Ok(out)
}

pub fn effective_matrix(p: &Params) -> EffectiveMatrix {
    let m = match p {
        Params::Merged(p) => p
            .values
            .iter()
            .zip(&p.merged_kq)
            .fold(DMatrix::zeros(p.dim, p.dim), |acc, (v, u)| acc + u * *v),
        Params::Separate(p) => {
            let mut m = DMatrix::zeros(p.dim, p.dim);
            for i in 0..p.heads() {
                for r in 0..p.rank {
                    m += p.key(i, r) * p.query(i, r).transpose() * p.values[i];
                }
            }
            m
        }
    };
    EffectiveMatrix { m }
}

impl EffectiveMatrix {
    pub fn predict(&self, stats: &ContextStats, x_q: &DVector<f64>) -> f64 {
        stats.beta.dot(&(&self.m * x_q))
    }
}

impl Params {
    pub fn layout(&self) -> Layout {
        match self {
            Params::Merged(p) => p.layout(),
            Params::Separate(p) => p.layout(),
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.layout().kind
    }

    pub fn dim(&self) -> usize {
        self.layout().dim
    }

    pub fn heads(&self) -> usize {
        self.layout().heads
    }

    pub fn values(&self) -> &[f64] {
        match self {
            Params::Merged(p) => &p.values,
            Params::Separate(p) => &p.values,
        }
    }

    pub fn forward(&self, stats: &ContextStats, x_q: &DVector<f64>) -> Result<f64> {
        match self {
            Params::Merged(p) => forward_merged(p, stats, x_q),
            Params::Separate(p) => forward_separate(p, stats, x_q),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout().len());
        match self {
            Params::Merged(p) => {
                out.extend_from_slice(&p.values);
                for u in &p.merged_kq {
                    out.extend_from_slice(u.as_slice());
                }
            }
            Params::Separate(p) => {
                out.extend_from_slice(&p.values);
                for k in &p.keys {
                    out.extend_from_slice(k.as_slice());
                }
                for q in &p.queries {
                    out.extend_from_slice(q.as_slice());
                }
            }
        }
        out
    }

    pub fn from_flat(layout: Layout, flat: &[f64]) -> Result<Self> {
        if flat.len() != layout.len() {
            return Err(LsaError::Dimension(format!(
                "flat parameter vector has length {}, layout needs {}",
                flat.len(),
                layout.len()
            )));
        }
        let (d, h) = (layout.dim, layout.heads);
        let values = flat[..h].to_vec();
        Ok(match layout.kind {
            ModelKind::Merged => {
                let merged_kq = (0..h)
                    .map(|i| {
                        let off = h + i * d * d;
                        DMatrix::from_column_slice(d, d, &flat[off..off + d * d])
                    })
                    .collect();
                Params::Merged(MergedParams {
                    dim: d,
                    values,
                    merged_kq,
                })
            }
            ModelKind::Separate => {
                let hr = h * layout.rank;
                let vecs = |base: usize| -> Vec<DVector<f64>> {
                    (0..hr)
                        .map(|j| DVector::from_column_slice(&flat[base + j * d..base + (j + 1) * d]))
                        .collect()
                };
                Params::Separate(SeparateParams {
                    dim: d,
                    rank: layout.rank,
                    values,
                    keys: vecs(layout.key_offset()),
                    queries: vecs(layout.query_offset()),
                })
            }
        })
    }

    pub fn scaled(&self, c: f64) -> Self {
        let flat: Vec<f64> = self.to_flat().into_iter().map(|x| x * c).collect();
        Self::from_flat(self.layout(), &flat).expect("same layout")
    }

    pub fn sq_norm(&self) -> f64 {
        self.to_flat().iter().map(|x| x * x).sum()
    }
}

/// Serialized parameter snapshot. Matrices and vector stacks are row-major
/// lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    pub model_kind: ModelKind,
    #[serde(rename = "D")]
    pub dim: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    #[serde(rename = "R")]
    pub rank: usize,
    pub values: Vec<f64>,
    /// Merged: one row-major `D x D` list per head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merged_kq: Option<Vec<Vec<f64>>>,
    /// Separate: one row-major `R x D` list per head, row `r` is `k_{i,r}ᵀ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keys: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries: Option<Vec<Vec<f64>>>,
}

impl From<&Params> for ParamSnapshot {
    fn from(p: &Params) -> Self {
        let layout = p.layout();
        match p {
            Params::Merged(m) => ParamSnapshot {
                model_kind: ModelKind::Merged,
                dim: layout.dim,
                heads: layout.heads,
                rank: layout.rank,
                values: m.values.clone(),
                merged_kq: Some(
                    m.merged_kq
                        .iter()
                        .map(|u| u.transpose().as_slice().to_vec())
                        .collect(),
                ),
                keys: None,
                queries: None,
            },
            Params::Separate(s) => {
                let stack = |vs: &[DVector<f64>]| -> Vec<Vec<f64>> {
                    vs.chunks(s.rank)
                        .map(|head| head.iter().flat_map(|v| v.iter().copied()).collect())
                        .collect()
                };
                ParamSnapshot {
                    model_kind: ModelKind::Separate,
                    dim: layout.dim,
                    heads: layout.heads,
                    rank: layout.rank,
                    values: s.values.clone(),
                    merged_kq: None,
                    keys: Some(stack(&s.keys)),
                    queries: Some(stack(&s.queries)),
                }
            }
        }
    }
}

impl TryFrom<&ParamSnapshot> for Params {
    type Error = LsaError;

    fn try_from(s: &ParamSnapshot) -> Result<Self> {
        let d = s.dim;
        let bad = |what: &str| LsaError::Dimension(format!("snapshot field {what} has the wrong shape"));
        if s.values.len() != s.heads {
            return Err(bad("values"));
        }
        match s.model_kind {
            ModelKind::Merged => {
                let lists = s.merged_kq.as_ref().ok_or_else(|| bad("merged_kq"))?;
                if lists.len() != s.heads || lists.iter().any(|l| l.len() != d * d) {
                    return Err(bad("merged_kq"));
                }
                Ok(Params::Merged(MergedParams {
                    dim: d,
                    values: s.values.clone(),
                    merged_kq: lists.iter().map(|l| DMatrix::from_row_slice(d, d, l)).collect(),
                }))
            }
            ModelKind::Separate => {
                let unstack = |name: &str, lists: &Option<Vec<Vec<f64>>>| -> Result<Vec<DVector<f64>>> {
                    let lists = lists.as_ref().ok_or_else(|| bad(name))?;
                    if lists.len() != s.heads || lists.iter().any(|l| l.len() != s.rank * d) {
                        return Err(bad(name));
                    }
                    Ok(lists
                        .iter()
                        .flat_map(|l| l.chunks(d).map(DVector::from_column_slice))
                        .collect())
                };
                let p = SeparateParams {
                    dim: d,
                    rank: s.rank,
                    values: s.values.clone(),
                    keys: unstack("keys", &s.keys)?,
                    queries: unstack("queries", &s.queries)?,
                };
                p.check()?;
                Ok(Params::Separate(p))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use approx::assert_relative_eq;

    fn stats_from(beta: &[f64]) -> ContextStats {
        let d = beta.len();
        ContextStats {
            beta: DVector::from_column_slice(beta),
            context_cov: DMatrix::zeros(d, d),
        }
    }

    fn random_stats(d: usize, s: &mut SeedStream) -> (ContextStats, DVector<f64>) {
        let beta: Vec<f64> = (0..d).map(|_| s.normal()).collect();
        let xq = DVector::from_fn(d, |_, _| s.normal());
        (stats_from(&beta), xq)
    }

    #[test]
    fn zero_scale_gives_zero_params() {
        let mut s = SeedStream::named("m", 0, "init");
        let m = init_merged(4, 3, 0.0, &mut s).unwrap();
        assert_eq!(m, MergedParams::zeros(4, 3));
        let p = init_separate(4, 3, 2, 0.0, &mut s).unwrap();
        assert_eq!(p, SeparateParams::zeros(4, 3, 2));
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_merged(4, 8, 1e-3, &mut SeedStream::named("m", 5, "init")).unwrap();
        let b = init_merged(4, 8, 1e-3, &mut SeedStream::named("m", 5, "init")).unwrap();
        assert_eq!(a, b);
        let a = init_separate(4, 4, 1, 1e-3, &mut SeedStream::named("m", 5, "init")).unwrap();
        let b = init_separate(4, 4, 1, 1e-3, &mut SeedStream::named("m", 5, "init")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_rejects_bad_arguments() {
        let mut s = SeedStream::named("m", 0, "init");
        assert!(init_separate(4, 2, 5, 1e-3, &mut s).is_err());
        assert!(init_separate(4, 2, 0, 1e-3, &mut s).is_err());
        assert!(init_merged(4, 2, -1.0, &mut s).is_err());
    }

    /// `‖w_2‖` is `w_init/√H` times a chi variable with `H` degrees of
    /// freedom, whose mean is close to `√H`.
    #[test]
    fn merged_value_norm_concentrates() {
        let w = 1e-3;
        for seed in 0..100 {
            let p = init_merged(4, 8, w, &mut SeedStream::named("norm", seed, "init")).unwrap();
            let vn = p.w2().norm();
            let un = p.w1().norm();
            assert!(vn > w / 3.0 && vn < 3.0 * w, "seed {seed}: {vn}");
            assert!(un > w / 3.0 && un < 3.0 * w, "seed {seed}: {un}");
        }
    }

    #[test]
    fn separate_layer_norms_scale_with_init() {
        let w = 1e-2;
        for seed in 0..50 {
            let p = init_separate(4, 4, 1, w, &mut SeedStream::named("norm", seed, "init")).unwrap();
            let vn: f64 = p.values.iter().map(|v| v * v).sum::<f64>().sqrt();
            let kn: f64 = p.keys.iter().map(|k| k.norm_squared()).sum::<f64>().sqrt();
            let qn: f64 = p.queries.iter().map(|k| k.norm_squared()).sum::<f64>().sqrt();
            for n in [vn, kn, qn] {
                assert!(n > w / 5.0 && n < 5.0 * w, "seed {seed}: {n}");
            }
        }
    }

    #[test]
    fn identity_head_reads_beta_dot_query() {
        let p = MergedParams {
            dim: 3,
            values: vec![1.0],
            merged_kq: vec![DMatrix::identity(3, 3)],
        };
        let st = stats_from(&[1.0, -2.0, 0.5]);
        let xq = DVector::from_vec(vec![2.0, 1.0, 4.0]);
        assert_eq!(forward_merged(&p, &st, &xq).unwrap(), st.beta.dot(&xq));
        assert_eq!(forward_merged(&MergedParams::zeros(3, 2), &st, &xq).unwrap(), 0.0);
    }

    #[test]
    fn forward_dimension_mismatch() {
        let p = MergedParams::zeros(3, 2);
        let st = stats_from(&[1.0, 2.0]);
        let xq = DVector::from_vec(vec![1.0, 2.0]);
        assert!(forward_merged(&p, &st, &xq).is_err());
        let z = CubicFeature { z: DVector::zeros(5) };
        assert!(forward_mlp(&p, &z).is_err());
    }

    #[test]
    fn single_rank_one_head() {
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let p = SeparateParams {
            dim: 3,
            rank: 1,
            values: vec![1.0],
            keys: vec![e1.clone()],
            queries: vec![e1.clone()],
        };
        let st = stats_from(&[0.3, 2.0, -1.0]);
        let xq = DVector::from_vec(vec![-4.0, 1.0, 1.0]);
        assert_eq!(forward_separate(&p, &st, &xq).unwrap(), 0.3 * -4.0);

        let mut s = SeedStream::named("zero-v", 0, "init");
        let mut q = init_separate(3, 2, 2, 1.0, &mut s).unwrap();
        q.values = vec![0.0, 0.0];
        assert_eq!(forward_separate(&q, &st, &xq).unwrap(), 0.0);
    }

    #[test]
    fn cubic_feature_column_stacking() {
        let st = stats_from(&[1.0, 2.0]);
        let z = cubic_feature(&st, &DVector::from_vec(vec![3.0, 4.0])).unwrap();
        assert_eq!(z.z.as_slice(), &[3.0, 6.0, 4.0, 8.0]);
        let z0 = cubic_feature(&st, &DVector::zeros(2)).unwrap();
        assert_eq!(z0.z, DVector::zeros(4));
        // vec([[1,3],[2,4]]) = [1,2,3,4]
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(m.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn cubic_feature_norm_identity() {
        let mut s = SeedStream::named("z", 0, "x");
        for d in 1..6 {
            let (st, xq) = random_stats(d, &mut s);
            let z = cubic_feature(&st, &xq).unwrap();
            assert_relative_eq!(z.z.norm(), st.beta.norm() * xq.norm(), epsilon = 1e-12);
        }
    }

    #[test]
    fn mlp_one_hot_probe() {
        let p = init_merged(3, 4, 1.0, &mut SeedStream::named("probe", 0, "init")).unwrap();
        for d in 0..3 {
            for dp in 0..3 {
                let mut z = DVector::zeros(9);
                z[d + 3 * dp] = 1.0;
                let got = forward_mlp(&p, &CubicFeature { z }).unwrap();
                let want: f64 = (0..4).map(|i| p.values[i] * p.merged_kq[i][(d, dp)]).sum();
                assert_relative_eq!(got, want, epsilon = 1e-14);
            }
        }
        let zero = CubicFeature { z: DVector::zeros(9) };
        assert_eq!(forward_mlp(&p, &zero).unwrap(), 0.0);
    }

    #[test]
    fn conv_matrix_shape() {
        let k = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let kmat = conv_matrix(&k);
        assert_eq!((kmat.nrows(), kmat.ncols()), (3, 9));
        assert_eq!(kmat.row(1).iter().copied().collect::<Vec<_>>(), vec![0., 0., 0., 1., 2., 3., 0., 0., 0.]);
    }

    #[test]
    fn cnn_rejects_higher_rank_and_zero_keys_vanish() {
        let mut s = SeedStream::named("cnn", 0, "init");
        let p = init_separate(3, 2, 2, 1.0, &mut s).unwrap();
        let z = CubicFeature { z: DVector::from_element(9, 1.0) };
        assert!(forward_cnn(&p, &z).is_err());
        let mut p1 = init_separate(3, 2, 1, 1.0, &mut s).unwrap();
        p1.keys.iter_mut().for_each(|k| k.fill(0.0));
        assert_eq!(forward_cnn(&p1, &z).unwrap(), 0.0);
    }

    #[test]
    fn effective_matrix_cases() {
        let p = Params::Merged(MergedParams {
            dim: 2,
            values: vec![2.0],
            merged_kq: vec![DMatrix::identity(2, 2)],
        });
        assert_eq!(effective_matrix(&p).m, DMatrix::identity(2, 2) * 2.0);
        let z = Params::Separate(SeparateParams::zeros(3, 2, 1));
        assert_eq!(effective_matrix(&z).m, DMatrix::zeros(3, 3));
    }

    #[test]
    fn effective_matrix_predicts_forward() {
        let mut s = SeedStream::named("eff", 0, "init");
        let params = [
            Params::Merged(init_merged(3, 4, 1.0, &mut s).unwrap()),
            Params::Separate(init_separate(3, 2, 3, 1.0, &mut s).unwrap()),
        ];
        for p in &params {
            let eff = effective_matrix(p);
            for _ in 0..10 {
                let (st, xq) = random_stats(3, &mut s);
                let y = p.forward(&st, &xq).unwrap();
                assert_relative_eq!(eff.predict(&st, &xq), y, epsilon = 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn flat_round_trip() {
        let mut s = SeedStream::named("flat", 0, "init");
        for p in [
            Params::Merged(init_merged(3, 2, 1.0, &mut s).unwrap()),
            Params::Separate(init_separate(4, 3, 2, 1.0, &mut s).unwrap()),
        ] {
            let flat = p.to_flat();
            assert_eq!(flat.len(), p.layout().len());
            assert_eq!(Params::from_flat(p.layout(), &flat).unwrap(), p);
            assert!(Params::from_flat(p.layout(), &flat[1..]).is_err());
        }
    }

    #[test]
    fn snapshot_json_round_trip() {
        let mut s = SeedStream::named("snap", 0, "init");
        for p in [
            Params::Merged(init_merged(3, 2, 1.0, &mut s).unwrap()),
            Params::Separate(init_separate(3, 2, 2, 1.0, &mut s).unwrap()),
        ] {
            let snap = ParamSnapshot::from(&p);
            let text = serde_json::to_string(&snap).unwrap();
            assert!(text.contains("\"model_kind\""));
            assert!(text.contains("\"D\":3"));
            let back: ParamSnapshot = serde_json::from_str(&text).unwrap();
            assert_eq!(Params::try_from(&back).unwrap(), p);
        }
    }

    #[test]
    fn snapshot_is_row_major() {
        let p = Params::Merged(MergedParams {
            dim: 2,
            values: vec![1.0],
            merged_kq: vec![DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])],
        });
        let snap = ParamSnapshot::from(&p);
        assert_eq!(snap.merged_kq.unwrap()[0], vec![1.0, 2.0, 3.0, 4.0]);
    }
}

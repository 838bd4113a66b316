//! Fixed-step integration of the population gradient flow.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LsaError, Result};
use crate::flow::conservation::{conserved_quantities, drift_between, ConservationDrift};
use crate::flow::field::FlowField;
use crate::models::{effective_matrix, Layout, Params};
use crate::task::PopulationStats;
use crate::theory::alignment_profile;

/// Loss above which a run is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Euler,
    Rk4,
}

/// Record times: `log_points` log-spaced between `dt` and `t_end`, plus
/// `linear_points` evenly spaced, plus `t = 0` and `t_end`. All times are
/// rounded to whole steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotSchedule {
    pub log_points: usize,
    #[serde(default)]
    pub linear_points: usize,
}

impl Default for SnapshotSchedule {
    fn default() -> Self {
        Self {
            log_points: 512,
            linear_points: 0,
        }
    }
}

impl SnapshotSchedule {
    pub fn steps(&self, total: u64) -> Vec<u64> {
        let mut out = vec![0, total];
        if total >= 1 && self.log_points >= 2 {
            let span = (total as f64).ln();
            for k in 0..self.log_points {
                let s = (span * k as f64 / (self.log_points - 1) as f64).exp().round() as u64;
                out.push(s.clamp(1, total));
            }
        }
        for j in 1..=self.linear_points {
            out.push(((total as f64) * j as f64 / self.linear_points as f64).round() as u64);
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Integration settings. Times are in the same units as `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub tau: f64,
    pub dt: f64,
    pub t_end: f64,
    pub integrator: Integrator,
    #[serde(default)]
    pub schedule: SnapshotSchedule,
    pub w_init: f64,
    pub seed: u64,
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, x) in [("tau", self.tau), ("dt", self.dt), ("t_end", self.t_end)] {
            if !(x > 0.0 && x.is_finite()) {
                return Err(LsaError::InvalidArgument(format!("{name} must be positive, got {x}")));
            }
        }
        if self.dt > self.t_end {
            return Err(LsaError::InvalidArgument(format!(
                "dt = {} exceeds t_end = {}",
                self.dt, self.t_end
            )));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        (self.t_end / self.dt).round().max(1.0) as u64
    }
}

/// Largest step with `dt · max_d a_d / τ ≤ 10⁻²`.
pub fn default_dt(stats: &PopulationStats, tau: f64) -> f64 {
    let amax = stats.a_vals.iter().fold(0.0_f64, |a, &b| a.max(b));
    1e-2 * tau / amax
}

/// Recorded run. `times` are in units of `τ`. Per-head norms are
/// `(|v_i|, ‖U_i‖_F, 0)` for merged heads and `(|v_i|, ‖K_i‖_F, ‖Q_i‖_F)` for
/// separate heads, where `K_i` stacks the head's `R` key vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub layout: Layout,
    pub times: Vec<f64>,
    pub losses: Vec<f64>,
    pub effective_matrices: Vec<DMatrix<f64>>,
    pub values: Vec<Vec<f64>>,
    pub head_norms: Vec<Vec<[f64; 3]>>,
    pub conservation_drift: Vec<f64>,
    pub alignments: Vec<Vec<Vec<f64>>>,
    /// Flat weights at every record time; kept in memory only.
    pub weights: Vec<Vec<f64>>,
    /// Largest per-step loss increase seen (0 if the loss never rose).
    pub max_loss_increase: f64,
    /// Per-law maxima of the conservation drift over the run.
    pub max_drift: Option<ConservationDrift>,
}

impl Trajectory {
    fn new(layout: Layout) -> Self {
        Self {
            layout,
            times: Vec::new(),
            losses: Vec::new(),
            effective_matrices: Vec::new(),
            values: Vec::new(),
            head_norms: Vec::new(),
            conservation_drift: Vec::new(),
            alignments: Vec::new(),
            weights: Vec::new(),
            max_loss_increase: 0.0,
            max_drift: None,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    pub fn params_at(&self, idx: usize) -> Result<Params> {
        Params::from_flat(self.layout, &self.weights[idx])
    }

    /// Index of the last record with time `<= t`.
    pub fn index_at(&self, t: f64) -> usize {
        self.times.partition_point(|&x| x <= t).saturating_sub(1)
    }
}

/// Result of [`integrate_partial`]: the recorded run and, if the loss blew
/// up, where.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub trajectory: Trajectory,
    pub divergence: Option<(f64, f64)>,
}

fn head_norms(p: &Params) -> (Vec<f64>, Vec<[f64; 3]>) {
    match p {
        Params::Merged(m) => (
            m.values.clone(),
            m.values
                .iter()
                .zip(&m.merged_kq)
                .map(|(v, u)| [v.abs(), u.norm(), 0.0])
                .collect(),
        ),
        Params::Separate(s) => {
            let stack = |vs: &[nalgebra::DVector<f64>], i: usize| -> f64 {
                vs[i * s.rank..(i + 1) * s.rank]
                    .iter()
                    .map(|v| v.norm_squared())
                    .sum::<f64>()
                    .sqrt()
            };
            (
                s.values.clone(),
                (0..s.heads())
                    .map(|i| [s.values[i].abs(), stack(&s.keys, i), stack(&s.queries, i)])
                    .collect(),
            )
        }
    }
}

struct Recorder<'a> {
    stats: &'a PopulationStats,
    start: Vec<(crate::flow::conservation::ConservationLaw, Vec<f64>)>,
    traj: Trajectory,
}

impl Recorder<'_> {
    fn record(&mut self, t_over_tau: f64, loss: f64, x: &[f64]) -> Result<()> {
        let p = Params::from_flat(self.traj.layout, x)?;
        let drift = drift_between(&conserved_quantities(&p), &self.start);
        let (values, norms) = head_norms(&p);
        let t = &mut self.traj;
        t.times.push(t_over_tau);
        t.losses.push(loss);
        t.effective_matrices.push(effective_matrix(&p).m);
        t.values.push(values);
        t.head_norms.push(norms);
        t.conservation_drift.push(drift.max());
        t.alignments.push(alignment_profile(&p, &self.stats.cov));
        t.weights.push(x.to_vec());
        t.max_drift = Some(match t.max_drift.take() {
            None => drift,
            Some(prev) => ConservationDrift {
                per_law: prev
                    .per_law
                    .iter()
                    .zip(&drift.per_law)
                    .map(|((l, a), (_, b))| (*l, a.max(*b)))
                    .collect(),
            },
        });
        Ok(())
    }
}

/// Integrates from `init`; stops early (without error) on divergence.
pub fn integrate_partial(init: &Params, stats: &PopulationStats, cfg: &FlowConfig) -> Result<Outcome> {
    cfg.validate()?;
    let layout = init.layout();
    let mut field = FlowField::new(layout, stats)?;
    let n = layout.len();
    let total = cfg.total_steps();
    let record_steps = cfg.schedule.steps(total);
    let h = cfg.dt / cfg.tau;

    let mut x = init.to_flat();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    let mut rec = Recorder {
        stats,
        start: conserved_quantities(init),
        traj: Trajectory::new(layout),
    };
    let mut next_record = 0usize;
    let mut prev_loss = f64::NAN;
    let mut divergence = None;

    for step in 0..=total {
        let loss = field.eval(&x, &mut k1);
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            divergence = Some((step as f64 * h, loss));
            break;
        }
        if step > 0 {
            rec.traj.max_loss_increase = rec.traj.max_loss_increase.max(loss - prev_loss);
        }
        prev_loss = loss;
        if next_record < record_steps.len() && record_steps[next_record] == step {
            rec.record(step as f64 * h, loss, &x)?;
            next_record += 1;
        }
        if step == total {
            break;
        }
        match cfg.integrator {
            Integrator::Euler => {
                for (xi, ki) in x.iter_mut().zip(&k1) {
                    *xi += h * ki;
                }
            }
            Integrator::Rk4 => {
                for j in 0..n {
                    tmp[j] = x[j] + 0.5 * h * k1[j];
                }
                field.eval(&tmp, &mut k2);
                for j in 0..n {
                    tmp[j] = x[j] + 0.5 * h * k2[j];
                }
                field.eval(&tmp, &mut k3);
                for j in 0..n {
                    tmp[j] = x[j] + h * k3[j];
                }
                field.eval(&tmp, &mut k4);
                for j in 0..n {
                    x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
                }
            }
        }
    }
    Ok(Outcome {
        trajectory: rec.traj,
        divergence,
    })
}

/// Integrates from `init`; divergence is an error.
pub fn integrate(init: &Params, stats: &PopulationStats, cfg: &FlowConfig) -> Result<Trajectory> {
    let out = integrate_partial(init, stats, cfg)?;
    match out.divergence {
        Some((t, loss)) => Err(LsaError::Divergence { t, loss }),
        None => Ok(out.trajectory),
    }
}

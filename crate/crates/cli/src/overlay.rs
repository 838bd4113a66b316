//! Scalar-ODE curves for the value weights of a rank-one separate run.
//!
//! Drop `m + 1` (0-based `m`) takes the loss from `L(M_m)` to `L(M_{m+1})`.
//! Its head is the one whose final key aligns best with `e_{m+1}`.

use lsa_core::flow::Trajectory;
use lsa_core::task::PopulationStats;
use lsa_core::theory::{dominant_alignment, solve_scalar_ode};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Fraction of a ladder gap that counts as having left or reached a level.
pub const LEVEL_MARGIN: f64 = 0.02;

/// ODE step in units of `τ`.
const ODE_DT: f64 = 0.05;

/// Record indices around one drop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropWindow {
    /// 1-based drop number.
    pub drop: usize,
    pub head: usize,
    /// First record on the plateau before the drop.
    pub entry: usize,
    /// First record below `L(M_m)` by the margin.
    pub lo: usize,
    /// First record within the margin of `L(M_{m+1})`.
    pub hi: usize,
}

pub fn drop_window(traj: &Trajectory, ladder: &[f64], m: usize) -> Option<DropWindow> {
    if m + 1 >= ladder.len() {
        return None;
    }
    let dom = dominant_alignment(traj.alignments.last()?);
    let last = traj.values.last()?;
    let head = (0..dom.len())
        .filter(|&i| dom[i].map(|x| x.0) == Some(m))
        .max_by(|&a, &b| last[a].abs().total_cmp(&last[b].abs()))?;
    let find = |f: &dyn Fn(f64) -> bool| traj.losses.iter().position(|&l| f(l));
    let gap = ladder[m] - ladder[m + 1];
    let entry = if m == 0 {
        0
    } else {
        let prev = ladder[m - 1] - ladder[m];
        find(&|l| l <= ladder[m] + LEVEL_MARGIN * prev)?
    };
    let lo = find(&|l| l < ladder[m] - LEVEL_MARGIN * gap)?;
    let hi = find(&|l| l < ladder[m + 1] + LEVEL_MARGIN * gap)?;
    Some(DropWindow {
        drop: m + 1,
        head,
        entry: entry.min(lo),
        lo,
        hi,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeCurve {
    pub drop: usize,
    /// 0-based head index, matching the `v_{head+1}` CSV column.
    pub head: usize,
    pub t: Vec<f64>,
    pub v: Vec<f64>,
}

/// Solves the reduction from `|v_head|` at record `start` through the end of
/// the window, on the record times.
pub fn ode_curve(traj: &Trajectory, stats: &PopulationStats, w: &DropWindow, start: usize) -> Result<OdeCurve, CliError> {
    let m = w.drop - 1;
    let t = traj.times[start..=w.hi].to_vec();
    let v0 = traj.values[start][w.head].abs();
    let v = solve_scalar_ode(v0, t[0], &t, stats.cov.eigenvalues[m], stats.a_vals[m], 1.0, ODE_DT)?;
    Ok(OdeCurve {
        drop: w.drop,
        head: w.head,
        t,
        v,
    })
}

/// `max |(|v_sim| - v_ode)|` over the drop window, relative to the peak
/// simulated `|v|` there.
pub fn ode_error(traj: &Trajectory, w: &DropWindow, curve: &OdeCurve) -> f64 {
    let start = w.hi + 1 - curve.t.len();
    let mut err: f64 = 0.0;
    let mut peak: f64 = 0.0;
    for k in w.lo.max(start)..=w.hi {
        let v = traj.values[k][w.head].abs();
        peak = peak.max(v);
        err = err.max((v - curve.v[k - start]).abs());
    }
    err / peak
}

/// Curves for every drop, started at plateau entry.
pub fn entry_curves(traj: &Trajectory, stats: &PopulationStats, ladder: &[f64]) -> Result<Vec<OdeCurve>, CliError> {
    let mut out = Vec::new();
    for m in 0..ladder.len().saturating_sub(1) {
        if let Some(w) = drop_window(traj, ladder, m) {
            out.push(ode_curve(traj, stats, &w, w.entry)?);
        }
    }
    Ok(out)
}

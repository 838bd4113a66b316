//! Plateau detection on recorded loss curves.

use serde::{Deserialize, Serialize};

use crate::flow::integrate::Trajectory;
use crate::task::PopulationStats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    /// Largest `|Δ ln L| / Δt` (per unit `t/τ`) still counted as flat.
    pub threshold: f64,
    /// Relative tolerance when matching a plateau to a theory loss.
    pub rel_tol: f64,
    /// Minimum plateau length as a fraction of the run length.
    pub min_fraction: f64,
}

impl PlateauConfig {
    /// `threshold = 10⁻² min_d λ_d²`, 2% matching, 5% minimum length.
    /// Drops along the weakest direction are the slowest, so the threshold
    /// scales with the smallest eigenvalue.
    pub fn for_stats(stats: &PopulationStats) -> Self {
        let lmin = stats.cov.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        Self {
            threshold: 1e-2 * lmin * lmin,
            rel_tol: 0.02,
            min_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauSegment {
    pub t_start: f64,
    pub t_end: f64,
    pub mean_loss: f64,
    /// Index into the theory-loss list, if within tolerance.
    pub matched: Option<usize>,
    /// Segment runs to the end of the record.
    pub terminal: bool,
}

impl PlateauSegment {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlateauReport {
    pub segments: Vec<PlateauSegment>,
}

impl PlateauReport {
    pub fn intermediate(&self) -> impl Iterator<Item = &PlateauSegment> {
        self.segments.iter().filter(|s| !s.terminal)
    }

    pub fn terminal(&self) -> Option<&PlateauSegment> {
        self.segments.last().filter(|s| s.terminal)
    }
}

/// Maximal flat stretches of the loss curve longer than
/// `min_fraction · t_final`, each matched to the nearest theory loss.
///
/// A record interval is flat when its finite-difference log-loss slope is
/// below the threshold. A one-record trajectory is a single plateau.
pub fn detect_plateaus(traj: &Trajectory, theory_losses: &[f64], cfg: &PlateauConfig) -> PlateauReport {
    let (t, l) = (&traj.times, &traj.losses);
    let n = t.len();
    if n == 0 {
        return PlateauReport::default();
    }
    if n == 1 {
        return PlateauReport {
            segments: vec![segment(t, l, 0, 0, theory_losses, cfg.rel_tol, true)],
        };
    }
    let span = t[n - 1] - t[0];
    let flat: Vec<bool> = (0..n - 1)
        .map(|k| {
            let slope = (l[k + 1].ln() - l[k].ln()).abs() / (t[k + 1] - t[k]);
            slope < cfg.threshold || l[k + 1] == l[k]
        })
        .collect();

    let mut segments = Vec::new();
    let mut k = 0;
    while k < n - 1 {
        if !flat[k] {
            k += 1;
            continue;
        }
        let start = k;
        while k < n - 1 && flat[k] {
            k += 1;
        }
        // intervals start..k are flat; records start..=k
        if t[k] - t[start] >= cfg.min_fraction * span {
            segments.push(segment(t, l, start, k, theory_losses, cfg.rel_tol, k == n - 1));
        }
    }
    PlateauReport { segments }
}

fn segment(t: &[f64], l: &[f64], a: usize, b: usize, theory: &[f64], rel_tol: f64, terminal: bool) -> PlateauSegment {
    let mean_loss = if b == a {
        l[a]
    } else {
        let area: f64 = (a..b).map(|k| 0.5 * (l[k] + l[k + 1]) * (t[k + 1] - t[k])).sum();
        area / (t[b] - t[a])
    };
    PlateauSegment {
        t_start: t[a],
        t_end: t[b],
        mean_loss,
        matched: match_loss(mean_loss, theory, rel_tol),
        terminal,
    }
}

/// Nearest theory loss within relative tolerance.
pub fn match_loss(loss: f64, theory: &[f64], rel_tol: f64) -> Option<usize> {
    theory
        .iter()
        .enumerate()
        .map(|(i, &th)| (i, ((loss - th) / th).abs()))
        .filter(|&(_, rel)| rel <= rel_tol)
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

/// For each consecutive pair of levels, the first record time at which the
/// loss falls below their midpoint; `None` if it never does.
pub fn drop_times(traj: &Trajectory, levels: &[f64]) -> Vec<Option<f64>> {
    levels
        .windows(2)
        .map(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            traj.losses.iter().position(|&l| l < mid).map(|k| traj.times[k])
        })
        .collect()
}

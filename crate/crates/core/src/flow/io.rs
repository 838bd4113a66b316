//! Trajectory CSV.
//!
//! Column order (heads `i` and eigenvectors `d` are 1-based):
//!
//! 1. `t` — time in units of `τ`
//! 2. `loss`
//! 3. per head: `v_i`, then `u_norm_i` (merged) or `k_norm_i`, `q_norm_i`
//!    (separate)
//! 4. `conservation_drift`
//! 5. `m_r_c` — effective matrix, row-major
//! 6. `align_i_d` — key alignment of head `i` with eigenvector `d`
//!
//! Floats are written in shortest round-trip form, so parsing a file back
//! reproduces every recorded value bit for bit.

use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::error::{LsaError, Result};
use crate::flow::integrate::Trajectory;
use crate::models::{Layout, ModelKind};

pub fn csv_header(layout: Layout) -> Vec<String> {
    let (d, h) = (layout.dim, layout.heads);
    let mut cols = vec!["t".to_string(), "loss".to_string()];
    for i in 1..=h {
        cols.push(format!("v_{i}"));
        match layout.kind {
            ModelKind::Merged => cols.push(format!("u_norm_{i}")),
            ModelKind::Separate => {
                cols.push(format!("k_norm_{i}"));
                cols.push(format!("q_norm_{i}"));
            }
        }
    }
    cols.push("conservation_drift".into());
    for r in 1..=d {
        for c in 1..=d {
            cols.push(format!("m_{r}_{c}"));
        }
    }
    for i in 1..=h {
        for e in 1..=d {
            cols.push(format!("align_{i}_{e}"));
        }
    }
    cols
}

fn csv_err(e: csv::Error) -> LsaError {
    LsaError::InvalidArgument(format!("csv: {e}"))
}

pub fn write_csv<W: Write>(traj: &Trajectory, out: W) -> Result<()> {
    let layout = traj.layout;
    let d = layout.dim;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header(layout)).map_err(csv_err)?;
    let mut row: Vec<String> = Vec::new();
    for k in 0..traj.len() {
        row.clear();
        row.push(traj.times[k].to_string());
        row.push(traj.losses[k].to_string());
        for (v, n) in traj.values[k].iter().zip(&traj.head_norms[k]) {
            row.push(v.to_string());
            row.push(n[1].to_string());
            if layout.kind == ModelKind::Separate {
                row.push(n[2].to_string());
            }
        }
        row.push(traj.conservation_drift[k].to_string());
        let m = &traj.effective_matrices[k];
        for r in 0..d {
            for c in 0..d {
                row.push(m[(r, c)].to_string());
            }
        }
        for head in &traj.alignments[k] {
            row.extend(head.iter().map(|a| a.to_string()));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| LsaError::InvalidArgument(format!("csv: {e}")))?;
    Ok(())
}

/// Parses a CSV written by [`write_csv`]. Weights are not part of the file
/// and come back empty.
pub fn read_csv<R: Read>(layout: Layout, input: R) -> Result<Trajectory> {
    let (d, h) = (layout.dim, layout.heads);
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(String::from).collect();
    if header != csv_header(layout) {
        return Err(LsaError::Dimension("csv header does not match the model layout".into()));
    }
    let mut traj = Trajectory {
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
    };
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let mut it = rec.iter().map(|s| {
            s.parse::<f64>()
                .map_err(|e| LsaError::InvalidArgument(format!("bad number {s:?}: {e}")))
        });
        let mut next = || it.next().unwrap_or_else(|| Err(LsaError::Dimension("short csv row".into())));
        traj.times.push(next()?);
        traj.losses.push(next()?);
        let mut values = Vec::with_capacity(h);
        let mut norms = Vec::with_capacity(h);
        for _ in 0..h {
            let v = next()?;
            let a = next()?;
            let b = if layout.kind == ModelKind::Separate { next()? } else { 0.0 };
            values.push(v);
            norms.push([v.abs(), a, b]);
        }
        traj.values.push(values);
        traj.head_norms.push(norms);
        traj.conservation_drift.push(next()?);
        let mut m = DMatrix::zeros(d, d);
        for r in 0..d {
            for c in 0..d {
                m[(r, c)] = next()?;
            }
        }
        traj.effective_matrices.push(m);
        let mut al = Vec::with_capacity(h);
        for _ in 0..h {
            al.push((0..d).map(|_| next()).collect::<Result<Vec<f64>>>()?);
        }
        traj.alignments.push(al);
    }
    Ok(traj)
}

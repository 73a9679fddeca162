//! Coarse observations: `L^2` projection onto piecewise constants over
//! square cells of width `H`, and time series of such observations.
//!
//! A node belongs to the cell containing its coordinate, so when `H` is not
//! a multiple of the grid spacing neighbouring cells hold different node
//! counts. The projection is taken in the discrete inner product and stays
//! an orthogonal projection either way.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dns::{dns_run_with, DnsConfig, SnapshotSet};
use crate::error::{Error, Result};
use crate::field::{Grid, VelocityField};

/// Partition of a grid into square cells of width `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseMesh {
    grid: Arc<Grid>,
    h: f64,
    cells: (usize, usize),
    cell_x: Vec<usize>,
    cell_y: Vec<usize>,
    nodes: Vec<usize>,
}

/// Per-cell means of both velocity components; cell `c = cx * cells.1 + cy`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellMeans {
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
}

fn axis_cells(n: usize, spacing: f64, h: f64) -> Vec<usize> {
    (0..n).map(|i| ((i as f64 * spacing) / h + 1e-9).floor() as usize).collect()
}

impl CoarseMesh {
    /// The cells must tile the domain in both directions and each must
    /// contain at least one node.
    pub fn new(grid: &Arc<Grid>, h: f64) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::Config(format!("coarse width must be positive, got {h}")));
        }
        let count = |l: f64, spacing: f64, axis: &str| -> Result<usize> {
            let c = (l / h).round();
            if c < 1.0 || (c * h - l).abs() > 1e-9 * l {
                return Err(Error::Config(format!("H = {h} does not tile the {axis} extent {l}")));
            }
            if h < spacing * (1.0 - 1e-9) {
                return Err(Error::Config(format!("H = {h} is finer than the {axis} spacing {spacing}")));
            }
            Ok(c as usize)
        };
        let cx = count(grid.lx(), grid.hx(), "x")?;
        let cy = count(grid.ly(), grid.hy(), "y")?;
        let cell_x = axis_cells(grid.nx(), grid.hx(), h);
        let cell_y = axis_cells(grid.ny(), grid.hy(), h);
        let mut nodes = vec![0; cx * cy];
        for &a in &cell_x {
            for &b in &cell_y {
                nodes[a * cy + b] += 1;
            }
        }
        if nodes.iter().any(|&n| n == 0) {
            return Err(Error::Config(format!("H = {h} leaves cells without grid nodes")));
        }
        Ok(CoarseMesh { grid: grid.clone(), h, cells: (cx, cy), cell_x, cell_y, nodes })
    }

    /// Mesh with `n` cells across the x extent.
    pub fn with_cells(grid: &Arc<Grid>, n: usize) -> Result<Self> {
        Self::new(grid, grid.lx() / n as f64)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn cells(&self) -> (usize, usize) {
        self.cells
    }
    pub fn cell_count(&self) -> usize {
        self.cells.0 * self.cells.1
    }

    /// Whether every cell holds the same number of nodes.
    pub fn is_uniform(&self) -> bool {
        self.nodes.iter().all(|&n| n == self.nodes[0])
    }

    /// Quadrature area of each cell (node count times node weight).
    pub fn cell_weights(&self) -> Vec<f64> {
        let w = self.grid.weight();
        self.nodes.iter().map(|&n| n as f64 * w).collect()
    }

    /// Cell means of `v` (the coefficients of `I_H v`).
    pub fn interpolate(&self, v: &VelocityField) -> Result<CellMeans> {
        self.grid.check_same(v.grid())?;
        let cy = self.cells.1;
        let ny = self.grid.ny();
        let mut m1 = vec![0.0; self.cell_count()];
        let mut m2 = vec![0.0; self.cell_count()];
        for (i, &ci) in self.cell_x.iter().enumerate() {
            for (j, &cj) in self.cell_y.iter().enumerate() {
                let c = ci * cy + cj;
                m1[c] += v.u1[i * ny + j];
                m2[c] += v.u2[i * ny + j];
            }
        }
        for (c, &n) in self.nodes.iter().enumerate() {
            m1[c] /= n as f64;
            m2[c] /= n as f64;
        }
        Ok(CellMeans { m1, m2 })
    }

    /// Piecewise-constant fine-grid field with the given cell values.
    pub fn lift(&self, means: &CellMeans) -> VelocityField {
        let cy = self.cells.1;
        let ny = self.grid.ny();
        let mut out = VelocityField::zeros(&self.grid);
        for (i, &ci) in self.cell_x.iter().enumerate() {
            for (j, &cj) in self.cell_y.iter().enumerate() {
                let c = ci * cy + cj;
                out.u1[i * ny + j] = means.m1[c];
                out.u2[i * ny + j] = means.m2[c];
            }
        }
        out
    }

    /// `(I_H a, I_H b)` from cell values.
    pub fn inner(&self, a: &CellMeans, b: &CellMeans) -> f64 {
        cell_inner(&self.cell_weights(), a, b)
    }
}

/// `sum_c w_c (a_c . b_c)`.
pub fn cell_inner(weights: &[f64], a: &CellMeans, b: &CellMeans) -> f64 {
    let mut s = 0.0;
    for c in 0..weights.len() {
        s += weights[c] * (a.m1[c] * b.m1[c] + a.m2[c] * b.m2[c]);
    }
    s
}

/// Coarse observations and true energies at the assimilation times.
#[derive(Clone, Debug)]
pub struct ObservationStream {
    pub times: Vec<f64>,
    pub coarse_values: Vec<CellMeans>,
    /// `0.5 ||u(t)||^2`
    pub true_energy: Vec<f64>,
    pub mesh: CoarseMesh,
    pub provenance: String,
}

impl ObservationStream {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Copy with seeded additive Gaussian noise of standard deviation `std`
    /// on every cell value.
    pub fn with_noise(&self, std: f64, seed: u64) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("noise level: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for c in &mut out.coarse_values {
            for v in c.m1.iter_mut().chain(c.m2.iter_mut()) {
                *v += normal.sample(&mut rng);
            }
        }
        out.provenance = format!("{}+noise({std:e},{seed})", self.provenance);
        Ok(out)
    }

    /// Entries `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> ObservationStream {
        ObservationStream {
            times: self.times[start..end].to_vec(),
            coarse_values: self.coarse_values[start..end].to_vec(),
            true_energy: self.true_energy[start..end].to_vec(),
            mesh: self.mesh.clone(),
            provenance: self.provenance.clone(),
        }
    }
}

fn time_tolerance(times: &[f64]) -> f64 {
    let span = times.last().copied().unwrap_or(0.0).abs().max(1.0);
    1e-9 * span
}

/// Observations of stored snapshots at `da_times`, each of which must be
/// one of the snapshot times.
pub fn build_observation_stream(
    snapshots: &SnapshotSet,
    mesh: &CoarseMesh,
    da_times: &[f64],
) -> Result<ObservationStream> {
    mesh.grid().check_same(&snapshots.grid)?;
    let tol = time_tolerance(&snapshots.times);
    let (first, last) = match (snapshots.times.first(), snapshots.times.last()) {
        (Some(a), Some(b)) => (*a, *b),
        _ if da_times.is_empty() => (0.0, 0.0),
        _ => return Err(Error::Range("no snapshots to observe".into())),
    };
    let mut stream = ObservationStream {
        times: Vec::with_capacity(da_times.len()),
        coarse_values: Vec::with_capacity(da_times.len()),
        true_energy: Vec::with_capacity(da_times.len()),
        mesh: mesh.clone(),
        provenance: snapshots.provenance.clone(),
    };
    for &t in da_times {
        if t < first - tol || t > last + tol {
            return Err(Error::Range(format!("time {t} outside the truth span [{first}, {last}]")));
        }
        let idx = snapshots
            .times
            .binary_search_by(|s| s.partial_cmp(&t).expect("finite times"))
            .unwrap_or_else(|i| i);
        let hit = [idx.saturating_sub(1), idx, idx + 1]
            .into_iter()
            .filter(|&k| k < snapshots.len())
            .find(|&k| (snapshots.times[k] - t).abs() <= tol)
            .ok_or_else(|| Error::Range(format!("time {t} is not a snapshot time")))?;
        let f = &snapshots.fields[hit];
        stream.times.push(t);
        stream.coarse_values.push(mesh.interpolate(f)?);
        stream.true_energy.push(f.energy());
    }
    Ok(stream)
}

/// Observations taken while running the reference solver. Every entry of
/// `da_times` must coincide with a solver step at or after the start time.
pub fn observation_stream_from_dns(
    config: &DnsConfig,
    mesh: &CoarseMesh,
    da_times: &[f64],
) -> Result<ObservationStream> {
    mesh.grid().check_same(&config.grid)?;
    let tol = 1e-9 * config.dt.max(1e-300) * 1e3;
    for &t in da_times {
        if t < config.t_start - tol || t > config.t_end + tol {
            return Err(Error::Range(format!(
                "time {t} outside the truth span [{}, {}]",
                config.t_start, config.t_end
            )));
        }
        let steps = (t - config.t_start) / config.dt;
        if (steps - steps.round()).abs() * config.dt > tol {
            return Err(Error::Range(format!("time {t} is not a solver step time")));
        }
    }
    let mut run = config.clone();
    run.snapshot_stride = 1;
    run.record_from = f64::NEG_INFINITY;
    run.store_snapshots = false;
    let mut stream = ObservationStream {
        times: Vec::with_capacity(da_times.len()),
        coarse_values: Vec::with_capacity(da_times.len()),
        true_energy: Vec::with_capacity(da_times.len()),
        mesh: mesh.clone(),
        provenance: config.hash(),
    };
    let mut next = 0;
    let mut failure = None;
    dns_run_with(&run, |t, field| {
        while next < da_times.len() && (da_times[next] - t).abs() <= tol {
            match mesh.interpolate(field) {
                Ok(c) => {
                    stream.times.push(da_times[next]);
                    stream.coarse_values.push(c);
                    stream.true_energy.push(field.energy());
                }
                Err(e) => failure = Some(e),
            }
            next += 1;
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    if next != da_times.len() {
        return Err(Error::Range("requested times must be increasing solver step times".into()));
    }
    Ok(stream)
}

//! Fixtures shared by the kernel benchmarks in `benches/`.

use nudgerom_core::{
    assemble, build_pod, CoarseMesh, Forcing, Grid, PodBasis, RomOperators, SnapshotSet, VelocityField,
};

/// Smooth divergence-free field with a few travelling modes; `phase`
/// shifts them so that a sequence of phases looks like a trajectory.
pub fn wave_field(n: usize, phase: f64) -> VelocityField {
    let grid = Grid::square(n).expect("grid");
    VelocityField::from_fn(&grid, |x, y| {
        let mut u = (0.0, 0.0);
        for k in 1..=4 {
            let kf = k as f64;
            let (s, c) = ((kf * (x + y) + phase * kf).sin(), (kf * (x + y) + phase * kf).cos());
            // streamfunction psi = sin(k(x+y)+..) / k^2 gives u = (psi_y, -psi_x)
            u.0 += c / kf;
            u.1 -= c / kf;
            u.0 += 0.3 * s * (kf * y).cos() / kf;
        }
        u
    })
}

pub fn snapshots(n: usize, count: usize) -> SnapshotSet {
    let fields: Vec<VelocityField> = (0..count).map(|k| wave_field(n, 0.3 * k as f64)).collect();
    let grid = fields[0].grid().clone();
    SnapshotSet::new(grid, (0..count).map(|k| k as f64).collect(), fields, "bench".into()).expect("snapshots")
}

pub fn basis(n: usize, count: usize) -> PodBasis {
    build_pod(&snapshots(n, count), 1e-12).expect("basis")
}

pub fn operators(basis: &PodBasis, r: usize, cells: usize) -> (RomOperators, CoarseMesh) {
    let mesh = CoarseMesh::with_cells(&basis.grid, cells).expect("mesh");
    let ops = assemble(basis, r, &mesh, 0.035, &Forcing::Kolmogorov { amplitude: 1.0, wavenumber: 4 }).expect("ops");
    (ops, mesh)
}

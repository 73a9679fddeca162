use std::io::Cursor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nudgerom_core::io;
use nudgerom_core::{
    assemble, build_observation_stream, build_pod, CoarseMesh, Error, Forcing, Grid, SnapshotSet, VelocityField,
};

fn snapshots() -> SnapshotSet {
    let grid = Grid::new(16, 12, 2.0, 2.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fields: Vec<VelocityField> = (0..6).map(|_| VelocityField::random_band_limited(&grid, 3, &mut rng)).collect();
    SnapshotSet::new(grid, (0..6).map(|k| 0.25 * k as f64).collect(), fields, "abc123".into()).unwrap()
}

#[test]
fn snapshots_round_trip_bit_exactly() {
    let s = snapshots();
    let mut buf = Vec::new();
    io::write_snapshots_to(&mut buf, &s).unwrap();
    let back = io::read_snapshots_from(&mut Cursor::new(&buf)).unwrap();
    assert_eq!(back.times, s.times);
    assert_eq!(back.provenance, s.provenance);
    assert_eq!(back.content_hash(), s.content_hash());
    assert_eq!((back.grid.nx(), back.grid.ny(), back.grid.lx(), back.grid.ly()), (16, 12, 2.0, 2.0));
}

#[test]
fn observations_round_trip_on_uneven_mesh() {
    let s = snapshots();
    let mesh = CoarseMesh::with_cells(&s.grid, 5).unwrap();
    assert!(!mesh.is_uniform());
    let obs = build_observation_stream(&s, &mesh, &s.times).unwrap();
    let mut buf = Vec::new();
    io::write_observations_to(&mut buf, &obs).unwrap();
    let back = io::read_observations_from(&mut Cursor::new(&buf)).unwrap();
    assert_eq!(back.times, obs.times);
    assert_eq!(back.true_energy, obs.true_energy);
    assert_eq!(back.coarse_values, obs.coarse_values);
    assert_eq!(back.mesh.cell_weights(), mesh.cell_weights());
    assert_eq!(back.provenance, obs.provenance);
}

#[test]
fn basis_and_operators_round_trip() {
    let s = snapshots();
    let basis = build_pod(&s, 1e-12).unwrap();
    let mut buf = Vec::new();
    io::write_basis_to(&mut buf, &basis).unwrap();
    let b2 = io::read_basis_from(&mut Cursor::new(&buf)).unwrap();
    assert_eq!(b2.eigenvalues, basis.eigenvalues);
    assert_eq!(b2.grad_norms, basis.grad_norms);
    assert_eq!(b2.provenance, basis.provenance);
    for (a, b) in b2.modes.iter().zip(&basis.modes) {
        assert_eq!(a.u1, b.u1);
        assert_eq!(a.u2, b.u2);
    }

    let mesh = CoarseMesh::with_cells(&s.grid, 4).unwrap();
    let forcing = Forcing::Kolmogorov { amplitude: 0.5, wavenumber: 1 };
    let ops = assemble(&basis, 4, &mesh, 0.02, &forcing).unwrap();
    let mut buf = Vec::new();
    io::write_operators_to(&mut buf, &ops).unwrap();
    let o2 = io::read_operators_from(&mut Cursor::new(&buf)).unwrap();
    assert_eq!(o2.r, 4);
    assert_eq!(o2.nu, 0.02);
    assert_eq!(o2.stiffness, ops.stiffness);
    assert_eq!(o2.trilinear, ops.trilinear);
    assert_eq!(o2.nudging, ops.nudging);
    assert_eq!(o2.forcing, ops.forcing);
    assert_eq!(o2.cell_weights, ops.cell_weights);
    assert_eq!(o2.mode_means, ops.mode_means);
    assert_eq!(o2.provenance, ops.provenance);
}

#[test]
fn files_round_trip_through_disk() {
    let d = tempfile::tempdir().unwrap();
    let s = snapshots();
    let p = d.path().join("s.bin");
    io::write_snapshots(&p, &s).unwrap();
    assert_eq!(io::read_snapshots(&p).unwrap().content_hash(), s.content_hash());
}

#[test]
fn wrong_magic_and_truncation_are_rejected() {
    let s = snapshots();
    let mut buf = Vec::new();
    io::write_snapshots_to(&mut buf, &s).unwrap();
    // a snapshot file is not a basis file
    assert!(matches!(io::read_basis_from(&mut Cursor::new(&buf)), Err(Error::Format(_))));
    let cut = &buf[..buf.len() / 2];
    assert!(io::read_snapshots_from(&mut Cursor::new(cut)).is_err());
    let mut bumped = buf.clone();
    bumped[io::SNAPSHOT_MAGIC.len()] = 99;
    match io::read_snapshots_from(&mut Cursor::new(&bumped)) {
        Err(Error::Format(m)) => assert!(m.contains("version"), "{m}"),
        other => panic!("{other:?}"),
    }
}

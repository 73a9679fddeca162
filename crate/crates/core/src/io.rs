//! Little-endian binary artifact formats.
//!
//! Every file starts with a NUL-terminated ASCII magic and a `u16` version
//! and ends with a provenance trailer (`u32` byte length + UTF-8 text,
//! normally a hex SHA-256).
//!
//! | file       | body after magic + version                                               |
//! |------------|--------------------------------------------------------------------------|
//! | snapshots  | nx u32, ny u32, lx f64, ly f64, M u64, times[M], M x (u1, u2) row-major     |
//! | observations | H f64, grid (nx, ny u32, lx, ly f64), cells (cx, cy u32), T u64, times[T], T x (means1[c], means2[c], energy) |
//! | POD basis  | normalization u8, grid, d u64, lambda[d], grad_norm_sq[d], d x (u1, u2)      |
//! | operators  | r u64, nu f64, S[r*r], T[r*r*r], G[r*r], f[r], H f64, cells u64, weights[cells], r x (means1, means2) |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::dns::SnapshotSet;
use crate::error::{Error, Result};
use crate::field::{Grid, VelocityField};
use crate::observation::{CellMeans, CoarseMesh, ObservationStream};
use crate::pod::{Normalization, PodBasis};
use crate::rom::RomOperators;

pub const SNAPSHOT_MAGIC: &[u8; 11] = b"DAROM-SNAP\0";
pub const OBS_MAGIC: &[u8; 10] = b"DAROM-OBS\0";
pub const POD_MAGIC: &[u8; 10] = b"DAROM-POD\0";
pub const OPS_MAGIC: &[u8; 10] = b"DAROM-OPS\0";
pub const VERSION: u16 = 1;

fn header<W: Write>(w: &mut W, magic: &[u8]) -> Result<()> {
    w.write_all(magic)?;
    w.write_u16::<LE>(VERSION)?;
    Ok(())
}

fn check_header<R: Read>(r: &mut R, magic: &[u8]) -> Result<()> {
    let mut buf = vec![0u8; magic.len()];
    r.read_exact(&mut buf)?;
    if buf != magic {
        return Err(Error::Format(format!(
            "bad magic: expected {:?}",
            String::from_utf8_lossy(&magic[..magic.len() - 1])
        )));
    }
    let v = r.read_u16::<LE>()?;
    if v != VERSION {
        return Err(Error::Format(format!("unsupported version {v}")));
    }
    Ok(())
}

fn f64s<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    for x in v {
        w.write_f64::<LE>(*x)?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    if n > 1 << 32 {
        return Err(Error::Format(format!("implausible array length {n}")));
    }
    let mut v = vec![0.0; n];
    r.read_f64_into::<LE>(&mut v)?;
    Ok(v)
}

fn trailer<W: Write>(w: &mut W, text: &str) -> Result<()> {
    w.write_u32::<LE>(text.len() as u32)?;
    w.write_all(text.as_bytes())?;
    Ok(())
}

fn read_trailer<R: Read>(r: &mut R) -> Result<String> {
    let n = r.read_u32::<LE>()? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("provenance trailer is not UTF-8".into()))
}

fn write_grid<W: Write>(w: &mut W, g: &Grid) -> Result<()> {
    w.write_u32::<LE>(g.nx() as u32)?;
    w.write_u32::<LE>(g.ny() as u32)?;
    w.write_f64::<LE>(g.lx())?;
    w.write_f64::<LE>(g.ly())?;
    Ok(())
}

fn read_grid<R: Read>(r: &mut R) -> Result<Arc<Grid>> {
    let nx = r.read_u32::<LE>()? as usize;
    let ny = r.read_u32::<LE>()? as usize;
    let lx = r.read_f64::<LE>()?;
    let ly = r.read_f64::<LE>()?;
    Grid::new(nx, ny, lx, ly).map_err(|e| Error::Format(format!("bad grid header: {e}")))
}

fn write_field<W: Write>(w: &mut W, f: &VelocityField) -> Result<()> {
    f64s(w, &f.u1)?;
    f64s(w, &f.u2)
}

fn read_field<R: Read>(r: &mut R, g: &Arc<Grid>) -> Result<VelocityField> {
    let u1 = read_f64s(r, g.len())?;
    let u2 = read_f64s(r, g.len())?;
    VelocityField::from_components(g, u1, u2)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

pub fn write_snapshots_to<W: Write>(w: &mut W, set: &SnapshotSet) -> Result<()> {
    header(w, SNAPSHOT_MAGIC)?;
    write_grid(w, &set.grid)?;
    w.write_u64::<LE>(set.len() as u64)?;
    f64s(w, &set.times)?;
    for f in &set.fields {
        write_field(w, f)?;
    }
    trailer(w, &set.provenance)
}

pub fn read_snapshots_from<R: Read>(r: &mut R) -> Result<SnapshotSet> {
    check_header(r, SNAPSHOT_MAGIC)?;
    let g = read_grid(r)?;
    let m = r.read_u64::<LE>()? as usize;
    let times = read_f64s(r, m)?;
    let fields = (0..m).map(|_| read_field(r, &g)).collect::<Result<Vec<_>>>()?;
    let provenance = read_trailer(r)?;
    SnapshotSet::new(g, times, fields, provenance)
}

pub fn write_snapshots(path: impl AsRef<Path>, set: &SnapshotSet) -> Result<()> {
    let mut w = create(path.as_ref())?;
    write_snapshots_to(&mut w, set)?;
    w.flush()?;
    Ok(())
}

pub fn read_snapshots(path: impl AsRef<Path>) -> Result<SnapshotSet> {
    read_snapshots_from(&mut open(path.as_ref())?)
}

pub fn write_observations_to<W: Write>(w: &mut W, obs: &ObservationStream) -> Result<()> {
    header(w, OBS_MAGIC)?;
    let m = &obs.mesh;
    w.write_f64::<LE>(m.h())?;
    write_grid(w, m.grid())?;
    w.write_u32::<LE>(m.cells().0 as u32)?;
    w.write_u32::<LE>(m.cells().1 as u32)?;
    w.write_u64::<LE>(obs.times.len() as u64)?;
    f64s(w, &obs.times)?;
    for (c, e) in obs.coarse_values.iter().zip(&obs.true_energy) {
        f64s(w, &c.m1)?;
        f64s(w, &c.m2)?;
        w.write_f64::<LE>(*e)?;
    }
    trailer(w, &obs.provenance)
}

pub fn read_observations_from<R: Read>(r: &mut R) -> Result<ObservationStream> {
    check_header(r, OBS_MAGIC)?;
    let h = r.read_f64::<LE>()?;
    let g = read_grid(r)?;
    let cx = r.read_u32::<LE>()? as usize;
    let cy = r.read_u32::<LE>()? as usize;
    let mesh = CoarseMesh::new(&g, h)?;
    if mesh.cells() != (cx, cy) {
        return Err(Error::Format("cell layout inconsistent with H and grid".into()));
    }
    let n = r.read_u64::<LE>()? as usize;
    let times = read_f64s(r, n)?;
    let mut coarse_values = Vec::with_capacity(n);
    let mut true_energy = Vec::with_capacity(n);
    for _ in 0..n {
        let m1 = read_f64s(r, cx * cy)?;
        let m2 = read_f64s(r, cx * cy)?;
        coarse_values.push(CellMeans { m1, m2 });
        true_energy.push(r.read_f64::<LE>()?);
    }
    let provenance = read_trailer(r)?;
    Ok(ObservationStream { times, coarse_values, true_energy, mesh, provenance })
}

pub fn write_observations(path: impl AsRef<Path>, obs: &ObservationStream) -> Result<()> {
    let mut w = create(path.as_ref())?;
    write_observations_to(&mut w, obs)?;
    w.flush()?;
    Ok(())
}

pub fn read_observations(path: impl AsRef<Path>) -> Result<ObservationStream> {
    read_observations_from(&mut open(path.as_ref())?)
}

pub fn write_basis_to<W: Write>(w: &mut W, b: &PodBasis) -> Result<()> {
    header(w, POD_MAGIC)?;
    w.write_u8(b.normalization as u8)?;
    write_grid(w, &b.grid)?;
    w.write_u64::<LE>(b.dim() as u64)?;
    f64s(w, &b.eigenvalues)?;
    f64s(w, &b.grad_norms)?;
    for m in &b.modes {
        write_field(w, m)?;
    }
    trailer(w, &b.provenance)
}

pub fn read_basis_from<R: Read>(r: &mut R) -> Result<PodBasis> {
    check_header(r, POD_MAGIC)?;
    let normalization = match r.read_u8()? {
        0 => Normalization::Unscaled,
        1 => Normalization::PerSnapshot,
        x => return Err(Error::Format(format!("unknown normalization flag {x}"))),
    };
    let g = read_grid(r)?;
    let d = r.read_u64::<LE>()? as usize;
    let eigenvalues = read_f64s(r, d)?;
    let grad_norms = read_f64s(r, d)?;
    let modes = (0..d).map(|_| read_field(r, &g)).collect::<Result<Vec<_>>>()?;
    let provenance = read_trailer(r)?;
    Ok(PodBasis { grid: g, modes, eigenvalues, grad_norms, normalization, provenance })
}

pub fn write_basis(path: impl AsRef<Path>, b: &PodBasis) -> Result<()> {
    let mut w = create(path.as_ref())?;
    write_basis_to(&mut w, b)?;
    w.flush()?;
    Ok(())
}

pub fn read_basis(path: impl AsRef<Path>) -> Result<PodBasis> {
    read_basis_from(&mut open(path.as_ref())?)
}

pub fn write_operators_to<W: Write>(w: &mut W, ops: &RomOperators) -> Result<()> {
    header(w, OPS_MAGIC)?;
    let r = ops.r;
    w.write_u64::<LE>(r as u64)?;
    w.write_f64::<LE>(ops.nu)?;
    f64s(w, ops.stiffness.as_slice())?;
    f64s(w, &ops.trilinear)?;
    f64s(w, ops.nudging.as_slice())?;
    f64s(w, ops.forcing.as_slice())?;
    w.write_f64::<LE>(ops.coarse_h)?;
    w.write_u64::<LE>(ops.cell_weights.len() as u64)?;
    f64s(w, &ops.cell_weights)?;
    for m in &ops.mode_means {
        f64s(w, &m.m1)?;
        f64s(w, &m.m2)?;
    }
    trailer(w, &ops.provenance)
}

pub fn read_operators_from<R: Read>(r: &mut R) -> Result<RomOperators> {
    check_header(r, OPS_MAGIC)?;
    let n = r.read_u64::<LE>()? as usize;
    let nu = r.read_f64::<LE>()?;
    let stiffness = nalgebra::DMatrix::from_vec(n, n, read_f64s(r, n * n)?);
    let trilinear = read_f64s(r, n * n * n)?;
    let nudging = nalgebra::DMatrix::from_vec(n, n, read_f64s(r, n * n)?);
    let forcing = nalgebra::DVector::from_vec(read_f64s(r, n)?);
    let coarse_h = r.read_f64::<LE>()?;
    let cells = r.read_u64::<LE>()? as usize;
    let cell_weights = read_f64s(r, cells)?;
    let mode_means = (0..n)
        .map(|_| Ok(CellMeans { m1: read_f64s(r, cells)?, m2: read_f64s(r, cells)? }))
        .collect::<Result<Vec<_>>>()?;
    let provenance = read_trailer(r)?;
    Ok(RomOperators { r: n, nu, stiffness, trilinear, nudging, forcing, mode_means, cell_weights, coarse_h, provenance })
}

pub fn write_operators(path: impl AsRef<Path>, ops: &RomOperators) -> Result<()> {
    let mut w = create(path.as_ref())?;
    write_operators_to(&mut w, ops)?;
    w.flush()?;
    Ok(())
}

pub fn read_operators(path: impl AsRef<Path>) -> Result<RomOperators> {
    read_operators_from(&mut open(path.as_ref())?)
}

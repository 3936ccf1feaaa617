//! Transform file serialization.
//!
//! Layout: magic `RPLT`, version u32, hidden size d u32, then one byte
//! each for the constraint, solver and regularization enums, alpha f64,
//! objective f64, and the d·d matrix as little-endian 32-bit floats,
//! row-major. The matrix is stored at fusion precision (32-bit), so a
//! round trip reproduces exactly what fusion would consume.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::solvers::{Constraint, LinearTransform, RegKind, SolverKind};
use crate::wire;

pub const TRANSFORM_MAGIC: &[u8; 4] = b"RPLT";
const TRANSFORM_VERSION: u32 = 1;

fn constraint_byte(c: Constraint) -> u8 {
    match c {
        Constraint::Generic => 0,
        Constraint::Diagonal => 1,
        Constraint::Orthogonal => 2,
    }
}

fn constraint_from(b: u8) -> Result<Constraint> {
    match b {
        0 => Ok(Constraint::Generic),
        1 => Ok(Constraint::Diagonal),
        2 => Ok(Constraint::Orthogonal),
        other => Err(Error::Format(format!("unknown constraint byte {other}"))),
    }
}

fn solver_byte(s: SolverKind) -> u8 {
    match s {
        SolverKind::Ls => 0,
        SolverKind::Ridge => 1,
        SolverKind::Diag => 2,
        SolverKind::Ortho => 3,
        SolverKind::CosineGd => 4,
    }
}

fn solver_from(b: u8) -> Result<SolverKind> {
    match b {
        0 => Ok(SolverKind::Ls),
        1 => Ok(SolverKind::Ridge),
        2 => Ok(SolverKind::Diag),
        3 => Ok(SolverKind::Ortho),
        4 => Ok(SolverKind::CosineGd),
        other => Err(Error::Format(format!("unknown solver byte {other}"))),
    }
}

fn reg_byte(r: RegKind) -> u8 {
    match r {
        RegKind::None => 0,
        RegKind::L1 => 1,
        RegKind::L2 => 2,
    }
}

fn reg_from(b: u8) -> Result<RegKind> {
    match b {
        0 => Ok(RegKind::None),
        1 => Ok(RegKind::L1),
        2 => Ok(RegKind::L2),
        other => Err(Error::Format(format!("unknown reg byte {other}"))),
    }
}

pub fn save_transform(lt: &LinearTransform, path: &Path) -> Result<()> {
    let d = lt.matrix.rows();
    if lt.matrix.cols() != d {
        return Err(Error::Format(format!(
            "transform must be square, got {}x{}",
            d,
            lt.matrix.cols()
        )));
    }
    let mut buf = Vec::new();
    wire::write_magic(&mut buf, TRANSFORM_MAGIC)?;
    wire::write_u32(&mut buf, TRANSFORM_VERSION)?;
    wire::write_u32(&mut buf, d as u32)?;
    buf.write_all(&[
        constraint_byte(lt.constraint),
        solver_byte(lt.solver),
        reg_byte(lt.reg_kind),
    ])?;
    wire::write_f64_slice(&mut buf, &[lt.alpha, lt.objective_value])?;
    wire::write_f32_slice(&mut buf, lt.matrix.to_f32().data())?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_transform(path: &Path) -> Result<LinearTransform> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor::new(bytes);
    wire::expect_magic(&mut cur, TRANSFORM_MAGIC, "transform file")?;
    let version = wire::read_u32(&mut cur)?;
    if version != TRANSFORM_VERSION {
        return Err(Error::Format(format!(
            "unsupported transform version {version} (expected {TRANSFORM_VERSION})"
        )));
    }
    let d = wire::read_u32(&mut cur)? as usize;
    let mut enums = [0u8; 3];
    cur.read_exact(&mut enums)?;
    let scalars = wire::read_f64_vec(&mut cur, 2)?;
    let data = wire::read_f32_vec(&mut cur, d * d)?;
    let mut trailing = Vec::new();
    cur.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(Error::Format(format!(
            "transform file has {} trailing bytes",
            trailing.len()
        )));
    }
    Ok(LinearTransform {
        matrix: Mat::from_vec(d, d, data).to_f64(),
        constraint: constraint_from(enums[0])?,
        solver: solver_from(enums[1])?,
        reg_kind: reg_from(enums[2])?,
        alpha: scalars[0],
        objective_value: scalars[1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample() -> LinearTransform {
        LinearTransform {
            matrix: Mat::from_fn(4, 4, |r, c| (r as f64 - 2.0 * c as f64) / 3.0),
            constraint: Constraint::Generic,
            solver: SolverKind::Ridge,
            alpha: 0.25,
            reg_kind: RegKind::L2,
            objective_value: 1.5e-3,
        }
    }

    #[test]
    fn transform_round_trips_at_storage_precision() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.rplt");
        let lt = sample();
        save_transform(&lt, &path).unwrap();
        let back = load_transform(&path).unwrap();
        assert_eq!(back.matrix, lt.matrix.to_f32().to_f64());
        assert_eq!(back.constraint, lt.constraint);
        assert_eq!(back.solver, lt.solver);
        assert_eq!(back.reg_kind, lt.reg_kind);
        assert_eq!(back.alpha, lt.alpha);
        assert_eq!(back.objective_value, lt.objective_value);
    }

    #[test]
    fn corrupt_enum_byte_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.rplt");
        save_transform(&sample(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[12] = 9; // constraint byte
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_transform(&path), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.rplt");
        std::fs::write(&path, b"XXXX123").unwrap();
        assert!(matches!(load_transform(&path), Err(Error::Format(_))));
    }
}

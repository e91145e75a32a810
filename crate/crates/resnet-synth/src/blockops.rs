//! Weight synthesis for single residual blocks realizing elementary
//! operations on one coordinate of the state: shift by a constant, min/max
//! with a constant or a linear transformation, and adding the positive part
//! of another coordinate.
//!
//! Each operation is one block. Coordinates are 0-based indices into the
//! state vector.

use std::fmt;

use crate::net::ResidualBlock;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Shift,
    MaxConst,
    MinConst,
    MaxLinear,
    MinLinear,
    AddRelu,
}

/// Parameter record for a synthesized block, mostly useful for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    pub src_coord: usize,
    pub dst_coord: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockOpError {
    CoordOutOfRange { coord: usize, dim: usize },
    SrcEqualsDst { coord: usize },
    NonFinite,
}

impl fmt::Display for BlockOpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockOpError::CoordOutOfRange { coord, dim } => {
                write!(f, "coordinate {coord} out of range for dimension {dim}")
            }
            BlockOpError::SrcEqualsDst { coord } => {
                write!(f, "source and destination coordinate both {coord}")
            }
            BlockOpError::NonFinite => write!(f, "non-finite block parameter"),
        }
    }
}

impl std::error::Error for BlockOpError {}

fn check(coord: usize, dim: usize, params: &[f64]) -> Result<(), BlockOpError> {
    if coord >= dim {
        return Err(BlockOpError::CoordOutOfRange { coord, dim });
    }
    if !params.iter().all(|p| p.is_finite()) {
        return Err(BlockOpError::NonFinite);
    }
    Ok(())
}

fn unit(dim: usize, coord: usize, scale: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[coord] = scale;
    v
}

/// `R -> R + c` on `coord`. Realized with U = 0, u = 1, V = c e_coord.
pub fn shift_block(c: f64, coord: usize, dim: usize) -> Result<ResidualBlock, BlockOpError> {
    check(coord, dim, &[c])?;
    Ok(ResidualBlock::new(vec![0.0; dim], 1.0, unit(dim, coord, c)).expect("valid weights"))
}

/// `R -> max{R, alpha R + beta}` on `coord`: R + [(alpha-1)R + beta]_+.
pub fn max_linear_block(
    alpha: f64,
    beta: f64,
    coord: usize,
    dim: usize,
) -> Result<ResidualBlock, BlockOpError> {
    check(coord, dim, &[alpha, beta])?;
    Ok(ResidualBlock::new(unit(dim, coord, alpha - 1.0), beta, unit(dim, coord, 1.0))
        .expect("valid weights"))
}

/// `R -> min{R, alpha R + beta}` on `coord`: R - [(1-alpha)R - beta]_+.
pub fn min_linear_block(
    alpha: f64,
    beta: f64,
    coord: usize,
    dim: usize,
) -> Result<ResidualBlock, BlockOpError> {
    check(coord, dim, &[alpha, beta])?;
    Ok(ResidualBlock::new(unit(dim, coord, 1.0 - alpha), -beta, unit(dim, coord, -1.0))
        .expect("valid weights"))
}

/// `R -> max{R, c}` on `coord`.
pub fn max_const_block(c: f64, coord: usize, dim: usize) -> Result<ResidualBlock, BlockOpError> {
    max_linear_block(0.0, c, coord, dim)
}

/// `R -> min{R, c}` on `coord`.
pub fn min_const_block(c: f64, coord: usize, dim: usize) -> Result<ResidualBlock, BlockOpError> {
    min_linear_block(0.0, c, coord, dim)
}

/// `x_dst -> x_dst + [x_src]_+`, all other coordinates unchanged.
pub fn add_relu_block(
    src: usize,
    dst: usize,
    dim: usize,
) -> Result<ResidualBlock, BlockOpError> {
    check(src, dim, &[])?;
    check(dst, dim, &[])?;
    if src == dst {
        return Err(BlockOpError::SrcEqualsDst { coord: src });
    }
    Ok(ResidualBlock::new(unit(dim, src, 1.0), 0.0, unit(dim, dst, 1.0)).expect("valid weights"))
}

/// `R -> R + gain * [R - threshold]_+` on `coord`.
///
/// This is the hinge used by the level-set adjustment pass; with
/// `gain = (h_k - (k+1)H)/H` and `threshold = kH` it is the per-cell
/// adjustment formula.
pub fn hinge_block(
    gain: f64,
    threshold: f64,
    coord: usize,
    dim: usize,
) -> Result<ResidualBlock, BlockOpError> {
    check(coord, dim, &[gain, threshold])?;
    Ok(ResidualBlock::new(unit(dim, coord, 1.0), -threshold, unit(dim, coord, gain))
        .expect("valid weights"))
}

//! Residual blocks with a single hidden neuron and the networks built from them.
//!
//! A block maps `x` to `x + v * relu(u . x + b)` where `u` is a row vector,
//! `v` a column vector and `b` a scalar bias. A network is an ordered list of
//! blocks followed by a final linear output map. All types are immutable after
//! construction and evaluation is pure, so sharing across threads is safe.

use std::fmt;

/// Running state passed between blocks; length equals the network dimension.
pub type StateVector = Vec<f64>;

#[derive(Debug, Clone, PartialEq)]
pub enum NetError {
    DimMismatch { expected: usize, got: usize },
    NonFinite { what: &'static str },
    CoordOutOfRange { coord: usize, dim: usize },
    OffsetOutOfRange { offset: usize, inner_dim: usize, dim: usize },
    ZeroDim,
}

impl fmt::Display for NetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetError::DimMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            NetError::NonFinite { what } => write!(f, "non-finite value in {what}"),
            NetError::CoordOutOfRange { coord, dim } => {
                write!(f, "coordinate {coord} out of range for dimension {dim}")
            }
            NetError::OffsetOutOfRange { offset, inner_dim, dim } => write!(
                f,
                "offset {offset} does not fit {inner_dim} coordinates into dimension {dim}"
            ),
            NetError::ZeroDim => write!(f, "network dimension must be positive"),
        }
    }
}

impl std::error::Error for NetError {}

/// One residual block: `x -> x + v_col * relu(u_row . x + bias)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    u_row: Vec<f64>,
    bias: f64,
    v_col: Vec<f64>,
}

impl ResidualBlock {
    pub fn new(u_row: Vec<f64>, bias: f64, v_col: Vec<f64>) -> Result<Self, NetError> {
        if u_row.is_empty() {
            return Err(NetError::ZeroDim);
        }
        if u_row.len() != v_col.len() {
            return Err(NetError::DimMismatch { expected: u_row.len(), got: v_col.len() });
        }
        if !u_row.iter().all(|x| x.is_finite()) {
            return Err(NetError::NonFinite { what: "u_row" });
        }
        if !v_col.iter().all(|x| x.is_finite()) {
            return Err(NetError::NonFinite { what: "v_col" });
        }
        if !bias.is_finite() {
            return Err(NetError::NonFinite { what: "bias" });
        }
        Ok(ResidualBlock { u_row, bias, v_col })
    }

    pub fn dim(&self) -> usize {
        self.u_row.len()
    }

    pub fn u_row(&self) -> &[f64] {
        &self.u_row
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn v_col(&self) -> &[f64] {
        &self.v_col
    }

    /// Evaluate the block on a fresh state vector.
    pub fn eval(&self, x: &[f64]) -> Result<StateVector, NetError> {
        if x.len() != self.dim() {
            return Err(NetError::DimMismatch { expected: self.dim(), got: x.len() });
        }
        let mut y = x.to_vec();
        self.apply(&mut y);
        Ok(y)
    }

    /// In-place variant used in the evaluation hot loop. Dimensions must match.
    pub fn apply(&self, x: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim());
        let pre: f64 = self
            .u_row
            .iter()
            .zip(x.iter())
            .map(|(u, xi)| u * xi)
            .sum::<f64>()
            + self.bias;
        if pre > 0.0 {
            for (xi, v) in x.iter_mut().zip(&self.v_col) {
                *xi += v * pre;
            }
        }
    }

    fn padded(&self, dim: usize, offset: usize) -> ResidualBlock {
        let mut u = vec![0.0; dim];
        let mut v = vec![0.0; dim];
        u[offset..offset + self.dim()].copy_from_slice(&self.u_row);
        v[offset..offset + self.dim()].copy_from_slice(&self.v_col);
        ResidualBlock { u_row: u, bias: self.bias, v_col: v }
    }
}

/// A stack of residual blocks followed by a linear output map.
#[derive(Debug, Clone, PartialEq)]
pub struct ResNet {
    dim: usize,
    blocks: Vec<ResidualBlock>,
    out_weights: Vec<f64>,
    out_bias: f64,
}

impl ResNet {
    pub fn new(
        dim: usize,
        blocks: Vec<ResidualBlock>,
        out_weights: Vec<f64>,
        out_bias: f64,
    ) -> Result<Self, NetError> {
        if dim == 0 {
            return Err(NetError::ZeroDim);
        }
        if out_weights.len() != dim {
            return Err(NetError::DimMismatch { expected: dim, got: out_weights.len() });
        }
        for b in &blocks {
            if b.dim() != dim {
                return Err(NetError::DimMismatch { expected: dim, got: b.dim() });
            }
        }
        if !out_weights.iter().all(|x| x.is_finite()) || !out_bias.is_finite() {
            return Err(NetError::NonFinite { what: "output map" });
        }
        Ok(ResNet { dim, blocks, out_weights, out_bias })
    }

    /// Network with no blocks whose output is the projection onto `coord`.
    pub fn projection(dim: usize, coord: usize) -> Result<Self, NetError> {
        if coord >= dim {
            return Err(NetError::CoordOutOfRange { coord, dim });
        }
        let mut w = vec![0.0; dim];
        w[coord] = 1.0;
        ResNet::new(dim, Vec::new(), w, 0.0)
    }

    /// Network with no blocks and an all-zero output map.
    pub fn zero(dim: usize) -> Result<Self, NetError> {
        ResNet::new(dim, Vec::new(), vec![0.0; dim], 0.0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    pub fn out_weights(&self) -> &[f64] {
        &self.out_weights
    }

    pub fn out_bias(&self) -> f64 {
        self.out_bias
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, NetError> {
        if x.len() != self.dim {
            return Err(NetError::DimMismatch { expected: self.dim, got: x.len() });
        }
        Ok(self.eval_unchecked(x))
    }

    /// Evaluation without the dimension check; callers validate once up front.
    pub fn eval_unchecked(&self, x: &[f64]) -> f64 {
        let mut state = x.to_vec();
        for b in &self.blocks {
            b.apply(&mut state);
        }
        self.out_weights
            .iter()
            .zip(&state)
            .map(|(w, s)| w * s)
            .sum::<f64>()
            + self.out_bias
    }

    /// Run the blocks only, returning the final state before the output map.
    pub fn state_after_blocks(&self, x: &[f64]) -> Result<StateVector, NetError> {
        if x.len() != self.dim {
            return Err(NetError::DimMismatch { expected: self.dim, got: x.len() });
        }
        let mut state = x.to_vec();
        for b in &self.blocks {
            b.apply(&mut state);
        }
        Ok(state)
    }

    /// Network made of the first `n` blocks with the same output map.
    pub fn prefix(&self, n: usize) -> ResNet {
        ResNet {
            dim: self.dim,
            blocks: self.blocks[..n.min(self.blocks.len())].to_vec(),
            out_weights: self.out_weights.clone(),
            out_bias: self.out_bias,
        }
    }

    pub fn with_output(mut self, out_weights: Vec<f64>, out_bias: f64) -> Result<Self, NetError> {
        if out_weights.len() != self.dim {
            return Err(NetError::DimMismatch { expected: self.dim, got: out_weights.len() });
        }
        if !out_weights.iter().all(|x| x.is_finite()) || !out_bias.is_finite() {
            return Err(NetError::NonFinite { what: "output map" });
        }
        self.out_weights = out_weights;
        self.out_bias = out_bias;
        Ok(self)
    }

    pub fn perturb_weight(&mut self, index: usize, amount: f64) -> bool {
        let mut i = index;
        for b in &mut self.blocks {
            let d = b.dim();
            if i < d {
                b.u_row[i] += amount;
                return true;
            }
            i -= d;
            if i == 0 {
                b.bias += amount;
                return true;
            }
            i -= 1;
            if i < d {
                b.v_col[i] += amount;
                return true;
            }
            i -= d;
        }
        if i < self.dim {
            self.out_weights[i] += amount;
            return true;
        }
        i -= self.dim;
        if i == 0 {
            self.out_bias += amount;
            return true;
        }
        false
    }

    /// Total number of scalar weights (block parameters plus the output map).
    pub fn weight_count(&self) -> usize {
        self.blocks.len() * (2 * self.dim + 1) + self.dim + 1
    }
}

/// Append `suffix_blocks` to `prefix`, keeping the output map of `prefix`.
pub fn compose(prefix: &ResNet, suffix_blocks: &[ResidualBlock]) -> Result<ResNet, NetError> {
    for b in suffix_blocks {
        if b.dim() != prefix.dim {
            return Err(NetError::DimMismatch { expected: prefix.dim, got: b.dim() });
        }
    }
    let mut blocks = prefix.blocks.clone();
    blocks.extend_from_slice(suffix_blocks);
    Ok(ResNet {
        dim: prefix.dim,
        blocks,
        out_weights: prefix.out_weights.clone(),
        out_bias: prefix.out_bias,
    })
}

/// Embed a network into a larger state by padding its weights with zeros.
///
/// The original coordinates occupy the contiguous range starting at
/// `coord_offset`; all other coordinates pass through untouched by the
/// identity mapping.
pub fn extend_dimension(net: &ResNet, dim: usize, coord_offset: usize) -> Result<ResNet, NetError> {
    if coord_offset + net.dim > dim {
        return Err(NetError::OffsetOutOfRange { offset: coord_offset, inner_dim: net.dim, dim });
    }
    let blocks = net.blocks.iter().map(|b| b.padded(dim, coord_offset)).collect();
    let mut out = vec![0.0; dim];
    out[coord_offset..coord_offset + net.dim].copy_from_slice(&net.out_weights);
    Ok(ResNet { dim, blocks, out_weights: out, out_bias: net.out_bias })
}

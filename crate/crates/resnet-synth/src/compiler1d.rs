//! Compile a 1-D piecewise-constant target into a one-neuron-per-block
//! network.
//!
//! The pipeline builds an increasing trapezoid function (value (k+1)*H on the
//! shrunk k-th interval, H = max |h_k|), clips the negative tail, then walks
//! the level sets from the top down and rescales each to its target value.
//! Every stage boundary is recorded as a checkpoint, and the exact kink
//! positions of the final function are tracked symbolically alongside the
//! weights.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::blockops::{
    hinge_block, max_const_block, max_linear_block, min_const_block, min_linear_block, shift_block,
};
use crate::net::{compose, ResNet, ResidualBlock};
use crate::pwl::Pwl;

/// Target function: value `values[k-1]` on `[knots[k-1], knots[k])`, zero
/// outside `[knots[0], knots[M])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseConstant1D {
    knots: Vec<f64>,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CompileError {
    DeltaTooLarge { interval: usize, width: f64, delta: f64 },
    DeltaTooLargeAxis { axis: usize, interval: usize, width: f64, delta: f64 },
    BadDelta(f64),
    KnotsNotIncreasing { index: usize },
    LengthMismatch { knots: usize, values: usize },
    CellCountMismatch { expected: usize, got: usize },
    LevelValuesNotDistinct,
    IndicatorTooLow { min_level: f64, target_sup: f64 },
    DegenerateBox,
    NonFinite,
    EmptyTarget,
}

impl fmt::Display for CompileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompileError::DeltaTooLarge { interval, width, delta } => write!(
                f,
                "interval {interval} has width {width} but 2*delta = {} must be smaller",
                2.0 * delta
            ),
            CompileError::DeltaTooLargeAxis { axis, interval, width, delta } => write!(
                f,
                "axis {axis}, interval {interval} has width {width} but 2*delta = {} must be smaller",
                2.0 * delta
            ),
            CompileError::CellCountMismatch { expected, got } => {
                write!(f, "expected {expected} cell values, got {got}")
            }
            CompileError::LevelValuesNotDistinct => {
                write!(f, "grid indicator level values must be pairwise distinct")
            }
            CompileError::IndicatorTooLow { min_level, target_sup } => write!(
                f,
                "smallest indicator level {min_level} must exceed the target sup norm {target_sup}"
            ),
            CompileError::DegenerateBox => write!(f, "box must have positive side lengths"),
            CompileError::BadDelta(d) => write!(f, "delta must be positive and finite, got {d}"),
            CompileError::KnotsNotIncreasing { index } => {
                write!(f, "knots must be strictly increasing (violated at index {index})")
            }
            CompileError::LengthMismatch { knots, values } => {
                write!(f, "{knots} knots require {} values, got {values}", knots - 1)
            }
            CompileError::NonFinite => write!(f, "target contains a non-finite number"),
            CompileError::EmptyTarget => write!(f, "target must have at least one interval"),
        }
    }
}

impl std::error::Error for CompileError {}

impl PiecewiseConstant1D {
    pub fn new(knots: Vec<f64>, values: Vec<f64>) -> Result<Self, CompileError> {
        let t = PiecewiseConstant1D { knots, values };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), CompileError> {
        if self.values.is_empty() || self.knots.len() < 2 {
            return Err(CompileError::EmptyTarget);
        }
        if self.knots.len() != self.values.len() + 1 {
            return Err(CompileError::LengthMismatch {
                knots: self.knots.len(),
                values: self.values.len(),
            });
        }
        if !self.knots.iter().chain(&self.values).all(|x| x.is_finite()) {
            return Err(CompileError::NonFinite);
        }
        for i in 1..self.knots.len() {
            if self.knots[i] <= self.knots[i - 1] {
                return Err(CompileError::KnotsNotIncreasing { index: i });
            }
        }
        Ok(())
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of intervals M.
    pub fn pieces(&self) -> usize {
        self.values.len()
    }

    /// max |h_k|.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn min_width(&self) -> f64 {
        self.knots
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn eval(&self, x: f64) -> f64 {
        if x < self.knots[0] || x >= *self.knots.last().unwrap() {
            return 0.0;
        }
        let k = self.knots.partition_point(|&a| a <= x);
        self.values[k - 1]
    }
}

/// Construction stage a checkpoint belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Increasing trapezoid after m induction steps (m = 0 is the initial ramp).
    Ramp(usize),
    /// After clipping the negative tail to zero.
    TailClamp,
    /// After rescaling level k to its target value.
    Adjusted(usize),
    /// Multi-dimensional recursion: grid indicator over the first `d` axes done.
    IndicatorLevel(usize),
    /// Multi-dimensional per-cell pass: flat cell index adjusted.
    CellAdjusted(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Prefix length of the final block list realizing this stage.
    pub blocks_len: usize,
}

/// Stage checkpoints plus the exact kink list of the compiled function.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstructionTrace {
    pub delta: f64,
    pub h_inf: f64,
    pub checkpoints: Vec<Checkpoint>,
    /// Sorted construction abscissae of the compiled 1-D function: kinks of
    /// the clipped trapezoid plus the points where each adjustment threshold
    /// crosses its ramps. Empty for multi-dimensional compilations.
    pub breakpoints: Vec<f64>,
    pub net: ResNet,
}

impl ConstructionTrace {
    /// The network as it stood at checkpoint `i`.
    pub fn stage_net(&self, i: usize) -> ResNet {
        self.net.prefix(self.checkpoints[i].blocks_len)
    }
}

/// Three blocks mapping x to 0 for x <= a0 and to -(h_inf/delta)(x - a0)
/// after: max with a0, shift to zero, then fold the positive part down.
pub fn init_blocks(
    a0: f64,
    h_inf: f64,
    delta: f64,
    dim: usize,
    coord: usize,
) -> Vec<ResidualBlock> {
    vec![
        max_const_block(a0, coord, dim).expect("valid coord"),
        shift_block(-a0, coord, dim).expect("valid coord"),
        hinge_block(-(h_inf + delta) / delta, 0.0, coord, dim).expect("valid coord"),
    ]
}

/// Three blocks lifting the ramp over `[a_m, a_m1]` into the next plateau:
/// flip the descending tail up, fold it at the interval midpoint, then cap at
/// the plateau value (m+2)*h_inf.
pub fn induction_step(
    m: usize,
    a_m: f64,
    a_m1: f64,
    h_inf: f64,
    delta: f64,
    dim: usize,
    coord: usize,
) -> Result<Vec<ResidualBlock>, CompileError> {
    let width = a_m1 - a_m;
    if 2.0 * delta >= width {
        return Err(CompileError::DeltaTooLarge { interval: m + 1, width, delta });
    }
    let mf = (m + 1) as f64;
    let plateau = (m as f64 + 2.0) * h_inf;
    Ok(vec![
        max_linear_block(-(1.0 + 1.0 / mf), 0.0, coord, dim).expect("valid coord"),
        min_linear_block(-1.0, plateau * width / delta, coord, dim).expect("valid coord"),
        min_const_block(plateau, coord, dim).expect("valid coord"),
    ])
}

/// One block clipping the descending tail after the last knot to zero.
pub fn tail_removal(dim: usize, coord: usize) -> ResidualBlock {
    max_const_block(0.0, coord, dim).expect("valid coord")
}

/// One block rescaling level k of the increasing trapezoid, where the value
/// is (k+1)*h_inf, down to the target value h_k; everything at or below
/// k*h_inf is untouched.
pub fn adjustment_step(k: usize, h_k: f64, h_inf: f64, dim: usize, coord: usize) -> ResidualBlock {
    let kf = k as f64;
    retarget_step(h_k, (kf + 1.0) * h_inf, kf * h_inf, dim, coord)
}

/// General level rescaling: maps the plateau at `level` to `target_value`
/// while freezing everything at or below `threshold`. Requires
/// `threshold < level`; the 1-D pass uses `level = (k+1)h`, `threshold = kh`,
/// the d-dimensional cell pass uses the next-lower indicator value as the
/// threshold.
pub fn retarget_step(
    target_value: f64,
    level: f64,
    threshold: f64,
    dim: usize,
    coord: usize,
) -> ResidualBlock {
    debug_assert!(threshold < level);
    let gain = (target_value - level) / (level - threshold);
    hinge_block(gain, threshold, coord, dim).expect("valid coord")
}

/// Full 1-D pipeline emitted as bare blocks acting on `coord` of a `dim`-dim
/// state, with one checkpoint per stage. Used directly by the d-dimensional
/// recursion; `compile_1d` wraps it for the scalar case.
pub fn compile_1d_on(
    target: &PiecewiseConstant1D,
    delta: f64,
    dim: usize,
    coord: usize,
) -> Result<(Vec<ResidualBlock>, Vec<Checkpoint>), CompileError> {
    target.validate()?;
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(CompileError::BadDelta(delta));
    }
    for (i, w) in target.knots.windows(2).enumerate() {
        if 2.0 * delta >= w[1] - w[0] {
            return Err(CompileError::DeltaTooLarge { interval: i + 1, width: w[1] - w[0], delta });
        }
    }
    let h_inf = target.sup_norm();
    let m_total = target.pieces();
    let mut blocks = Vec::with_capacity(4 * m_total + 4);
    let mut checkpoints = Vec::with_capacity(2 * m_total + 2);
    let mark = |blocks: &Vec<ResidualBlock>, cps: &mut Vec<Checkpoint>, stage| {
        cps.push(Checkpoint { stage, blocks_len: blocks.len() });
    };

    blocks.extend(init_blocks(target.knots[0], h_inf, delta, dim, coord));
    mark(&blocks, &mut checkpoints, Stage::Ramp(0));
    for m in 0..m_total {
        blocks.extend(induction_step(
            m,
            target.knots[m],
            target.knots[m + 1],
            h_inf,
            delta,
            dim,
            coord,
        )?);
        mark(&blocks, &mut checkpoints, Stage::Ramp(m + 1));
    }
    blocks.push(tail_removal(dim, coord));
    mark(&blocks, &mut checkpoints, Stage::TailClamp);
    for k in (1..=m_total).rev() {
        blocks.push(adjustment_step(k, target.values[k - 1], h_inf, dim, coord));
        mark(&blocks, &mut checkpoints, Stage::Adjusted(k));
    }
    Ok((blocks, checkpoints))
}

/// Construction abscissae of a compiled 1-D network whose first `pre_blocks`
/// blocks build the clipped trapezoid and whose remaining blocks are the
/// level adjustments: the trapezoid's own kinks plus every point where an
/// adjustment threshold crosses one of its affine pieces. The adjustments
/// keep re-folding the transition strips, so the full kink set of the final
/// function grows exponentially; these first-generation abscissae are the
/// ones with closed forms on the original ramps and the ones downstream
/// probing and integration key off.
pub fn structural_breakpoints(net: &ResNet, pre_blocks: usize) -> Vec<f64> {
    let mut f = Pwl::identity();
    for b in &net.blocks()[..pre_blocks.min(net.blocks().len())] {
        f = f.apply_scalar_block(b.u_row()[0], b.bias(), b.v_col()[0]);
    }
    let mut out = f.kinks();
    for b in &net.blocks()[pre_blocks.min(net.blocks().len())..] {
        let u = b.u_row()[0];
        if u == 0.0 {
            continue;
        }
        let theta = -b.bias() / u;
        for i in 0..f.xs.len().saturating_sub(1) {
            let (yl, yr) = (f.ys[i], f.ys[i + 1]);
            if (yl < theta && theta < yr) || (yr < theta && theta < yl) {
                let t = (theta - yl) / (yr - yl);
                out.push(f.xs[i] + t * (f.xs[i + 1] - f.xs[i]));
            }
        }
    }
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// Compile a 1-D target; the result reads its value off coordinate 0 and
/// uses 4M + 4 blocks. A target that is identically zero compiles to the
/// zero network with an empty trace.
pub fn compile_1d(
    target: &PiecewiseConstant1D,
    delta: f64,
) -> Result<(ResNet, ConstructionTrace), CompileError> {
    target.validate()?;
    if target.values.iter().all(|&v| v == 0.0) {
        let net = ResNet::zero(1).expect("dim 1");
        let trace = ConstructionTrace {
            delta,
            h_inf: 0.0,
            checkpoints: Vec::new(),
            breakpoints: Vec::new(),
            net: net.clone(),
        };
        return Ok((net, trace));
    }
    let (blocks, checkpoints) = compile_1d_on(target, delta, 1, 0)?;
    let net = compose(&ResNet::projection(1, 0).expect("dim 1"), &blocks).expect("dims match");
    let pre = checkpoints
        .iter()
        .find(|c| c.stage == Stage::TailClamp)
        .map(|c| c.blocks_len)
        .expect("pipeline always clips the tail");
    let trace = ConstructionTrace {
        delta,
        h_inf: target.sup_norm(),
        checkpoints,
        breakpoints: structural_breakpoints(&net, pre),
        net: net.clone(),
    };
    Ok((net, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval1(net: &ResNet, x: f64) -> f64 {
        net.eval(&[x]).unwrap()
    }

    #[test]
    fn init_ramp_values() {
        let net = compose(&ResNet::projection(1, 0).unwrap(), &init_blocks(0.0, 1.0, 0.25, 1, 0))
            .unwrap();
        assert!(eval1(&net, -5.0).abs() < 1e-12);
        assert!((eval1(&net, 0.5) + 2.0).abs() < 1e-12);
        assert_eq!(net.blocks().len(), 3);
    }

    #[test]
    fn induction_plateau_ramp_tail() {
        let mut blocks = init_blocks(0.0, 1.0, 0.25, 1, 0);
        blocks.extend(induction_step(0, 0.0, 1.0, 1.0, 0.25, 1, 0).unwrap());
        let net = compose(&ResNet::projection(1, 0).unwrap(), &blocks).unwrap();
        assert!((eval1(&net, 0.5) - 2.0).abs() < 1e-12); // plateau 2H
        assert!((eval1(&net, 0.125) - 1.0).abs() < 1e-12); // ascending, slope 8
        assert!((eval1(&net, 1.25) + 2.0).abs() < 1e-12); // tail, slope -8
    }

    #[test]
    fn induction_rejects_wide_delta() {
        let e = induction_step(2, 0.0, 0.1, 1.0, 0.25, 1, 0).unwrap_err();
        assert!(matches!(e, CompileError::DeltaTooLarge { interval: 3, .. }));
    }

    #[test]
    fn adjustment_on_ramp_point() {
        // R_1^* = 1.5 on the ascending ramp; adjusting level 1 to h_1 = 1
        // gives 1.5 - [1.5 - 1]_+ = 1.
        let b = adjustment_step(1, 1.0, 1.0, 1, 0);
        assert!((b.eval(&[1.5]).unwrap()[0] - 1.0).abs() < 1e-12);
        assert_eq!(b.eval(&[0.0]).unwrap()[0], 0.0);
    }

    #[test]
    fn micro_example() {
        let target = PiecewiseConstant1D::new(vec![0.0, 1.0], vec![1.0]).unwrap();
        let (net, trace) = compile_1d(&target, 0.25).unwrap();
        assert_eq!(net.blocks().len(), 8);
        for (x, want) in [(0.5, 1.0), (-1.0, 0.0), (2.0, 0.0), (0.0625, 0.5)] {
            assert!((eval1(&net, x) - want).abs() < 1e-9, "x={x}");
        }
        let (a0, am) = (0.0, 1.0);
        for &b in &trace.breakpoints {
            assert!((a0..=am).contains(&b));
        }
        // Plateau starts where the adjusted ramp reaches 1.
        assert!(trace.breakpoints.iter().any(|&b| (b - 0.125).abs() < 1e-12));
        assert!(trace.breakpoints.iter().any(|&b| (b - 0.875).abs() < 1e-12));
    }

    #[test]
    fn stage_checkpoints_cover_all_stages() {
        let target =
            PiecewiseConstant1D::new(vec![0.0, 1.0, 2.5, 3.0], vec![0.5, -1.0, 0.25]).unwrap();
        let (net, trace) = compile_1d(&target, 0.1).unwrap();
        assert_eq!(net.blocks().len(), 4 * 3 + 4);
        assert_eq!(trace.checkpoints.len(), 1 + 3 + 1 + 3);
        assert_eq!(trace.checkpoints[0].stage, Stage::Ramp(0));
        assert_eq!(trace.checkpoints.last().unwrap().stage, Stage::Adjusted(1));
        let full = trace.stage_net(trace.checkpoints.len() - 1);
        assert_eq!(full.blocks().len(), net.blocks().len());
    }

    #[test]
    fn negative_values_supported() {
        let target = PiecewiseConstant1D::new(vec![-1.0, 0.0, 2.0], vec![-0.75, 0.5]).unwrap();
        let (net, _) = compile_1d(&target, 0.05).unwrap();
        assert!((eval1(&net, -0.5) + 0.75).abs() < 1e-9);
        assert!((eval1(&net, 1.0) - 0.5).abs() < 1e-9);
        assert!(eval1(&net, -2.0).abs() < 1e-9);
        assert!(eval1(&net, 3.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_zero_target() {
        let target = PiecewiseConstant1D::new(vec![0.0, 1.0], vec![0.0]).unwrap();
        let (net, trace) = compile_1d(&target, 0.1).unwrap();
        assert_eq!(net.blocks().len(), 0);
        assert_eq!(net.eval(&[0.5]).unwrap(), 0.0);
        assert!(trace.checkpoints.is_empty());
    }

    #[test]
    fn target_validation() {
        assert!(PiecewiseConstant1D::new(vec![0.0, 0.0], vec![1.0]).is_err());
        assert!(PiecewiseConstant1D::new(vec![0.0, 1.0], vec![]).is_err());
        assert!(PiecewiseConstant1D::new(vec![0.0, 1.0, 2.0], vec![1.0]).is_err());
        let t = PiecewiseConstant1D::new(vec![0.0, 1.0], vec![1.0]).unwrap();
        assert!(matches!(compile_1d(&t, 0.5), Err(CompileError::DeltaTooLarge { .. })));
    }

    #[test]
    fn target_eval_matches_definition() {
        let t = PiecewiseConstant1D::new(vec![0.0, 1.0, 2.0], vec![3.0, -1.0]).unwrap();
        assert_eq!(t.eval(-0.1), 0.0);
        assert_eq!(t.eval(0.0), 3.0);
        assert_eq!(t.eval(0.99), 3.0);
        assert_eq!(t.eval(1.0), -1.0);
        assert_eq!(t.eval(2.0), 0.0);
        assert_eq!(t.sup_norm(), 3.0);
        assert_eq!(t.min_width(), 1.0);
    }
}

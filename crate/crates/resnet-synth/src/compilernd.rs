//! Compile d-dimensional piecewise-constant targets.
//!
//! The construction is recursive over axes. A grid indicator over axes
//! `j..d` is obtained by combining a grid indicator over axes `j+1..d`
//! (retargeted to integer multiples of the working amplitude), a 1-D
//! staircase on axis `j` with fractionally offset plateau values, a coupling
//! block that adds the two running values, and a cut-and-shift that zeroes
//! everything below the separation level. The indicator takes a distinct
//! positive value on each cell interior and vanishes off the grid, after
//! which one hinge block per cell rewrites the cell values top-down to the
//! target.
//!
//! State layout: the running value of the indicator over axes `j..d` lives in
//! coordinate `j`; inputs consumed by deeper levels are overwritten.

use crate::compiler1d::{
    compile_1d, compile_1d_on, init_blocks, induction_step, retarget_step, tail_removal,
    Checkpoint, CompileError, ConstructionTrace, PiecewiseConstant1D, Stage,
};
use crate::blockops::{add_relu_block, max_const_block, shift_block};
use crate::net::{compose, ResNet, ResidualBlock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Target function on R^d: per-axis knots and one value per grid cell.
/// `cell_values` is flat in row-major order (last axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseConstantND {
    axis_knots: Vec<Vec<f64>>,
    cell_values: Vec<f64>,
}

impl PiecewiseConstantND {
    pub fn new(axis_knots: Vec<Vec<f64>>, cell_values: Vec<f64>) -> Result<Self, CompileError> {
        let t = PiecewiseConstantND { axis_knots, cell_values };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), CompileError> {
        if self.axis_knots.is_empty() {
            return Err(CompileError::EmptyTarget);
        }
        for knots in &self.axis_knots {
            if knots.len() < 2 {
                return Err(CompileError::EmptyTarget);
            }
            if !knots.iter().all(|x| x.is_finite()) {
                return Err(CompileError::NonFinite);
            }
            for i in 1..knots.len() {
                if knots[i] <= knots[i - 1] {
                    return Err(CompileError::KnotsNotIncreasing { index: i });
                }
            }
        }
        let expected: usize = self.cells_per_axis().iter().product();
        if self.cell_values.len() != expected {
            return Err(CompileError::CellCountMismatch {
                expected,
                got: self.cell_values.len(),
            });
        }
        if !self.cell_values.iter().all(|x| x.is_finite()) {
            return Err(CompileError::NonFinite);
        }
        Ok(())
    }

    pub fn dims(&self) -> usize {
        self.axis_knots.len()
    }

    pub fn axis_knots(&self) -> &[Vec<f64>] {
        &self.axis_knots
    }

    pub fn cells_per_axis(&self) -> Vec<usize> {
        self.axis_knots.iter().map(|k| k.len() - 1).collect()
    }

    pub fn cell_count(&self) -> usize {
        self.cell_values.len()
    }

    pub fn cell_values(&self) -> &[f64] {
        &self.cell_values
    }

    pub fn cell_value(&self, idx: &[usize]) -> f64 {
        self.cell_values[flat_index(idx, &self.cells_per_axis())]
    }

    pub fn sup_norm(&self) -> f64 {
        self.cell_values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Smallest cell width over all axes.
    pub fn min_width(&self) -> f64 {
        self.axis_knots
            .iter()
            .flat_map(|k| k.windows(2).map(|w| w[1] - w[0]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn cell_center(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter()
            .zip(&self.axis_knots)
            .map(|(&i, knots)| 0.5 * (knots[i] + knots[i + 1]))
            .collect()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dims());
        let mut idx = Vec::with_capacity(x.len());
        for (xi, knots) in x.iter().zip(&self.axis_knots) {
            if *xi < knots[0] || *xi >= *knots.last().unwrap() {
                return 0.0;
            }
            idx.push(knots.partition_point(|a| a <= xi) - 1);
        }
        self.cell_value(&idx)
    }

    /// Parse `{ "axis_knots": [[...],...], "cell_values": <nested arrays> }`.
    pub fn from_json(text: &str) -> Result<Self, String> {
        let doc: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let knots_val = doc.get("axis_knots").ok_or("missing field axis_knots")?;
        let axis_knots: Vec<Vec<f64>> =
            serde_json::from_value(knots_val.clone()).map_err(|e| e.to_string())?;
        let cells_val = doc.get("cell_values").ok_or("missing field cell_values")?;
        let mut flat = Vec::new();
        flatten_cells(cells_val, axis_knots.len(), &mut flat)?;
        PiecewiseConstantND::new(axis_knots, flat).map_err(|e| e.to_string())
    }

    pub fn to_json(&self) -> String {
        let cells = nest_cells(&self.cell_values, &self.cells_per_axis());
        serde_json::json!({ "axis_knots": self.axis_knots, "cell_values": cells }).to_string()
    }
}

fn flatten_cells(v: &serde_json::Value, depth: usize, out: &mut Vec<f64>) -> Result<(), String> {
    if depth == 0 {
        let x = v.as_f64().ok_or("cell_values nesting does not match axis count")?;
        out.push(x);
        return Ok(());
    }
    let arr = v.as_array().ok_or("cell_values nesting does not match axis count")?;
    for item in arr {
        flatten_cells(item, depth - 1, out)?;
    }
    Ok(())
}

fn nest_cells(flat: &[f64], cells: &[usize]) -> serde_json::Value {
    if cells.len() == 1 {
        return serde_json::json!(flat);
    }
    let stride = flat.len() / cells[0];
    let rows: Vec<serde_json::Value> = flat
        .chunks(stride)
        .map(|chunk| nest_cells(chunk, &cells[1..]))
        .collect();
    serde_json::Value::Array(rows)
}

/// Row-major flat index (last axis fastest).
pub fn flat_index(idx: &[usize], cells: &[usize]) -> usize {
    idx.iter().zip(cells).fold(0, |acc, (&i, &c)| {
        debug_assert!(i < c);
        acc * c + i
    })
}

/// The value the grid indicator takes on the interior of cell `idx`: the
/// increasing staircase `(k+1)*amp` for a single axis, and
/// `(l + i/(M_1+1))*amp` for deeper grids where `l` counts the sub-grid cell
/// (1-based) and `i` the first-axis interval (1-based).
pub fn indicator_level_value(idx: &[usize], cells: &[usize], amp: f64) -> f64 {
    if idx.len() == 1 {
        (idx[0] as f64 + 2.0) * amp
    } else {
        let l = (flat_index(&idx[1..], &cells[1..]) + 1) as f64;
        let m1 = cells[0] as f64;
        (l + (idx[0] as f64 + 1.0) / (m1 + 1.0)) * amp
    }
}

/// Pairwise distinct positive values on the cell interiors of a grid, zero
/// outside it.
#[derive(Debug, Clone, PartialEq)]
pub struct GridIndicatorSpec {
    pub delta: f64,
    /// Number of cells on each axis.
    pub cells: Vec<usize>,
    /// Indicator value per cell, flat row-major (last axis fastest).
    pub level_values: Vec<f64>,
    /// Separation level cut away by the final cut-and-shift; 0 for one axis.
    pub threshold: f64,
}

fn check_delta(axis_knots: &[Vec<f64>], delta: f64) -> Result<(), CompileError> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(CompileError::BadDelta(delta));
    }
    for (axis, knots) in axis_knots.iter().enumerate() {
        for (i, w) in knots.windows(2).enumerate() {
            if 2.0 * delta >= w[1] - w[0] {
                return Err(CompileError::DeltaTooLargeAxis {
                    axis: axis + 1,
                    interval: i + 1,
                    width: w[1] - w[0],
                    delta,
                });
            }
        }
    }
    Ok(())
}

/// One hinge block per cell rewriting indicator levels to `targets`, ordered
/// by descending level. The threshold for each hinge is the next-lower level
/// (the target sup norm for the lowest cell), so already-written plateaus,
/// which are bounded by the sup norm, are never touched again. Requires every
/// level to exceed the target sup norm.
fn retarget_blocks(
    levels: &[f64],
    targets: &[f64],
    dim: usize,
    coord: usize,
) -> Result<Vec<(usize, ResidualBlock)>, CompileError> {
    if levels.len() != targets.len() {
        return Err(CompileError::CellCountMismatch {
            expected: levels.len(),
            got: targets.len(),
        });
    }
    let mut order: Vec<usize> = (0..levels.len()).collect();
    order.sort_by(|&a, &b| levels[a].total_cmp(&levels[b]));
    for w in order.windows(2) {
        if levels[w[0]] >= levels[w[1]] {
            return Err(CompileError::LevelValuesNotDistinct);
        }
    }
    let t_sup = targets.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if levels[order[0]] <= t_sup {
        return Err(CompileError::IndicatorTooLow { min_level: levels[order[0]], target_sup: t_sup });
    }
    let mut out = Vec::with_capacity(levels.len());
    for rank in (0..order.len()).rev() {
        let cell = order[rank];
        let base = if rank == 0 { t_sup } else { levels[order[rank - 1]] };
        // Keep the threshold a sliver above the base level: plateaus at the
        // base (finished targets or lower indicator levels) carry roundoff,
        // and a threshold exactly at their value would let every later fold
        // amplify that roundoff by its gain.
        let threshold = base + (levels[cell] - base) / 16.0;
        out.push((cell, retarget_step(targets[cell], levels[cell], threshold, dim, coord)));
    }
    Ok(out)
}

/// Emit the grid indicator over `axis_knots` with working amplitude `amp`
/// onto coordinates `coord..` of a `dim`-dimensional state. Returns the cell
/// level values; pushes one checkpoint per completed recursion level.
fn build_indicator(
    axis_knots: &[Vec<f64>],
    amp: f64,
    delta: f64,
    dim: usize,
    coord: usize,
    blocks: &mut Vec<ResidualBlock>,
    cps: &mut Vec<Checkpoint>,
) -> Result<Vec<f64>, CompileError> {
    let cells: Vec<usize> = axis_knots.iter().map(|k| k.len() - 1).collect();
    if axis_knots.len() == 1 {
        // Increasing staircase: plateau (k+1)*amp on the k-th shrunk interval.
        let knots = &axis_knots[0];
        blocks.extend(init_blocks(knots[0], amp, delta, dim, coord));
        for m in 0..cells[0] {
            blocks.extend(induction_step(m, knots[m], knots[m + 1], amp, delta, dim, coord)?);
        }
        blocks.push(tail_removal(dim, coord));
    } else {
        let m1 = cells[0];
        let sub_count: usize = cells[1..].iter().product();
        // Indicator over the remaining axes, rewritten to the integer levels
        // (l+1)*amp required by the coupling argument.
        let sub_targets: Vec<f64> = (0..sub_count).map(|l| (l as f64 + 2.0) * amp).collect();
        if axis_knots[1..].len() == 1 {
            // The staircase already has exactly these values.
            build_indicator(&axis_knots[1..], amp, delta, dim, coord + 1, blocks, cps)?;
        } else {
            let t_sub = (sub_count as f64 + 1.0) * amp;
            let raw =
                build_indicator(&axis_knots[1..], t_sub, delta, dim, coord + 1, blocks, cps)?;
            for (_, b) in retarget_blocks(&raw, &sub_targets, dim, coord + 1)? {
                blocks.push(b);
            }
        }
        // Clamp the sub-value, build the staircase on this axis, couple, then
        // cut everything below the separation level and shift it to zero.
        blocks.push(max_const_block(0.0, coord + 1, dim).expect("valid coord"));
        let r1_values: Vec<f64> = (1..=m1)
            .map(|i| (sub_count as f64 + 1.0 + i as f64 / (m1 as f64 + 1.0)) * amp)
            .collect();
        let r1_target = PiecewiseConstant1D::new(axis_knots[0].clone(), r1_values)?;
        let (r1_blocks, _) = compile_1d_on(&r1_target, delta, dim, coord)?;
        blocks.extend(r1_blocks);
        blocks.push(add_relu_block(coord + 1, coord, dim).expect("distinct coords"));
        let cut = (sub_count as f64 + 2.0) * amp;
        blocks.push(max_const_block(cut, coord, dim).expect("valid coord"));
        blocks.push(shift_block(-cut, coord, dim).expect("valid coord"));
    }
    cps.push(Checkpoint { stage: Stage::IndicatorLevel(axis_knots.len()), blocks_len: blocks.len() });
    let mut levels = vec![0.0; cells.iter().product()];
    let mut idx = vec![0usize; cells.len()];
    loop {
        levels[flat_index(&idx, &cells)] = indicator_level_value(&idx, &cells, amp);
        if !next_index(&mut idx, &cells) {
            break;
        }
    }
    Ok(levels)
}

/// Advance a multi-index in row-major order; false when exhausted.
pub fn next_index(idx: &mut [usize], cells: &[usize]) -> bool {
    for ax in (0..idx.len()).rev() {
        idx[ax] += 1;
        if idx[ax] < cells[ax] {
            return true;
        }
        idx[ax] = 0;
    }
    false
}

/// Build the grid indicator over the given axes with amplitude `h_inf`. The
/// result reads its value off coordinate 0.
pub fn compile_grid_indicator(
    axis_knots: &[Vec<f64>],
    h_inf: f64,
    delta: f64,
) -> Result<(ResNet, GridIndicatorSpec), CompileError> {
    if axis_knots.is_empty() {
        return Err(CompileError::EmptyTarget);
    }
    check_delta(axis_knots, delta)?;
    let dim = axis_knots.len();
    let mut blocks = Vec::new();
    let mut cps = Vec::new();
    let levels = build_indicator(axis_knots, h_inf, delta, dim, 0, &mut blocks, &mut cps)?;
    let net = compose(&ResNet::projection(dim, 0).expect("valid dim"), &blocks).expect("dims match");
    let cells: Vec<usize> = axis_knots.iter().map(|k| k.len() - 1).collect();
    let sub_count: usize = cells[1..].iter().product();
    let spec = GridIndicatorSpec {
        delta,
        cells,
        level_values: levels,
        threshold: if dim == 1 { 0.0 } else { (sub_count as f64 + 2.0) * h_inf },
    };
    Ok((net, spec))
}

/// Append one hinge block per cell rewriting the indicator to the target
/// values, highest level first.
pub fn adjust_cells(
    indicator: &ResNet,
    spec: &GridIndicatorSpec,
    target: &PiecewiseConstantND,
) -> Result<ResNet, CompileError> {
    target.validate()?;
    if target.cells_per_axis() != spec.cells {
        return Err(CompileError::CellCountMismatch {
            expected: spec.level_values.len(),
            got: target.cell_count(),
        });
    }
    let extra: Vec<ResidualBlock> =
        retarget_blocks(&spec.level_values, target.cell_values(), indicator.dim(), 0)?
            .into_iter()
            .map(|(_, b)| b)
            .collect();
    Ok(compose(indicator, &extra).expect("dims match"))
}

/// Compile a d-dimensional piecewise-constant target. The single-axis case
/// is handed to the 1-D pipeline unchanged.
pub fn compile_nd(
    target: &PiecewiseConstantND,
    delta: f64,
) -> Result<(ResNet, ConstructionTrace), CompileError> {
    target.validate()?;
    if target.dims() == 1 {
        let t1 = PiecewiseConstant1D::new(target.axis_knots[0].clone(), target.cell_values.clone())?;
        return compile_1d(&t1, delta);
    }
    check_delta(&target.axis_knots, delta)?;
    let dim = target.dims();
    let h_inf = target.sup_norm();
    if h_inf == 0.0 {
        let net = ResNet::zero(dim).expect("valid dim");
        let trace = ConstructionTrace {
            delta,
            h_inf,
            checkpoints: Vec::new(),
            breakpoints: Vec::new(),
            net: net.clone(),
        };
        return Ok((net, trace));
    }
    let mut blocks = Vec::new();
    let mut cps = Vec::new();
    let levels = build_indicator(&target.axis_knots, h_inf, delta, dim, 0, &mut blocks, &mut cps)?;
    for (cell, b) in retarget_blocks(&levels, target.cell_values(), dim, 0)? {
        blocks.push(b);
        cps.push(Checkpoint { stage: Stage::CellAdjusted(cell), blocks_len: blocks.len() });
    }
    let net = compose(&ResNet::projection(dim, 0).expect("valid dim"), &blocks).expect("dims match");
    let trace = ConstructionTrace {
        delta,
        h_inf,
        checkpoints: cps,
        breakpoints: Vec::new(),
        net: net.clone(),
    };
    Ok((net, trace))
}

/// Sample `f` on a uniform grid over the box `[lo, hi]` with cell side at
/// most `resolution` and return the piecewise-constant interpolant taking
/// the center value on each cell. A resolution wider than a box side falls
/// back to a single cell on that axis.
pub fn discretize<F: Fn(&[f64]) -> f64>(
    f: F,
    lo: &[f64],
    hi: &[f64],
    resolution: f64,
) -> Result<PiecewiseConstantND, CompileError> {
    if lo.is_empty() || lo.len() != hi.len() {
        return Err(CompileError::DegenerateBox);
    }
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(CompileError::BadDelta(resolution));
    }
    let mut axis_knots = Vec::with_capacity(lo.len());
    for (&a, &b) in lo.iter().zip(hi) {
        if !(b > a) || !a.is_finite() || !b.is_finite() {
            return Err(CompileError::DegenerateBox);
        }
        let n = ((b - a) / resolution).ceil().max(1.0) as usize;
        let knots: Vec<f64> = (0..=n).map(|j| a + (b - a) * j as f64 / n as f64).collect();
        axis_knots.push(knots);
    }
    let cells: Vec<usize> = axis_knots.iter().map(|k| k.len() - 1).collect();
    let total: usize = cells.iter().product();
    let mut values = Vec::with_capacity(total);
    let mut idx = vec![0usize; cells.len()];
    loop {
        let center: Vec<f64> = idx
            .iter()
            .zip(&axis_knots)
            .map(|(&i, knots)| 0.5 * (knots[i] + knots[i + 1]))
            .collect();
        values.push(f(&center));
        if !next_index(&mut idx, &cells) {
            break;
        }
    }
    PiecewiseConstantND::new(axis_knots, values)
}

/// Named functions available to the command line `discretize` subcommand.
pub fn builtin_function(name: &str) -> Option<fn(&[f64]) -> f64> {
    match name {
        "unit-ball" => Some(|x| {
            if x.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                1.0
            } else {
                0.0
            }
        }),
        "gaussian" => Some(|x| (-x.iter().map(|v| v * v).sum::<f64>()).exp()),
        _ => None,
    }
}

/// Largest observed |f(x) - f(y)| over random pairs at distance at most `r`
/// inside the box; a sampled lower bound on the true modulus of continuity.
pub fn modulus_of_continuity<F: Fn(&[f64]) -> f64>(
    f: F,
    lo: &[f64],
    hi: &[f64],
    r: f64,
    pairs: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = lo.len();
    let mut worst = 0.0_f64;
    for _ in 0..pairs {
        let x: Vec<f64> = (0..d).map(|j| rng.gen_range(lo[j]..hi[j])).collect();
        // Uniform offset in the r-ball via rejection, clamped into the box.
        let off: Vec<f64> = loop {
            let o: Vec<f64> = (0..d).map(|_| rng.gen_range(-r..r)).collect();
            if o.iter().map(|v| v * v).sum::<f64>() <= r * r {
                break o;
            }
        };
        let y: Vec<f64> = x
            .iter()
            .zip(&off)
            .enumerate()
            .map(|(j, (xi, oi))| (xi + oi).clamp(lo[j], hi[j]))
            .collect();
        worst = worst.max((f(&x) - f(&y)).abs());
    }
    worst
}

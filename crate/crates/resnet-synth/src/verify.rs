//! Quantitative verification of compiled networks: exact L1 integration in
//! one dimension, Monte-Carlo L1 in higher dimensions, stage-by-stage
//! condition checks against the closed forms of the construction, and a
//! Lipschitz upper bound.

use std::collections::HashMap;
use std::fmt;

use serde::Serialize;

use crate::compiler1d::{ConstructionTrace, PiecewiseConstant1D, Stage};
use crate::compilernd::PiecewiseConstantND;
use crate::net::ResNet;
use crate::pwl::Pwl;

#[derive(Debug, Clone, PartialEq)]
pub enum VerifyError {
    /// The network disagrees with its construction trace between these
    /// abscissae, so the integration model does not describe it.
    NotPiecewiseLinear { left: f64, right: f64 },
    TooFewSamples { n: usize },
    DimMismatch { expected: usize, got: usize },
}

impl fmt::Display for VerifyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VerifyError::NotPiecewiseLinear { left, right } => {
                write!(f, "network deviates from its construction trace on [{left}, {right}]")
            }
            VerifyError::TooFewSamples { n } => {
                write!(f, "need at least 100 Monte-Carlo samples, got {n}")
            }
            VerifyError::DimMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
        }
    }
}

impl std::error::Error for VerifyError {}

#[derive(Debug, Clone, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub pass: bool,
    /// Worst violation found (0 when the check holds everywhere).
    pub measured: f64,
    pub threshold: f64,
    /// Probe where the worst violation occurred.
    pub location: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct VerificationReport {
    pub checks: Vec<CheckRecord>,
    pub l1_error: Option<f64>,
    pub l1_bound: Option<f64>,
    pub mc_stderr: Option<f64>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {} measured={:e} threshold={:e}",
                if c.pass { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.threshold
            )?;
        }
        if let (Some(e), Some(b)) = (self.l1_error, self.l1_bound) {
            writeln!(f, "l1_error={e:e} l1_bound={b:e}")?;
        }
        Ok(())
    }
}

struct Checker {
    checks: Vec<CheckRecord>,
    threshold: f64,
}

impl Checker {
    fn new(threshold: f64) -> Self {
        Checker { checks: Vec::new(), threshold }
    }

    /// Record a check from (violation, location) pairs; violation 0 means ok.
    fn record(&mut self, name: String, worst: f64, location: f64) {
        self.checks.push(CheckRecord {
            name,
            pass: worst <= self.threshold,
            measured: worst,
            threshold: self.threshold,
            location: vec![location],
        });
    }
}

/// Scaled deviation |got - want| / (1 + |want|), so steep-slope regions are
/// judged relative to their magnitude.
fn dev(got: f64, want: f64) -> f64 {
    (got - want).abs() / (1.0 + want.abs())
}

/// Closed form of `∫_lo^hi |z - c| dz`.
fn abs_affine_integral(lo: f64, hi: f64, c: f64) -> f64 {
    let tri = |d: f64| 0.5 * d * d;
    if c <= lo {
        tri(hi - c) - tri(lo - c)
    } else if c >= hi {
        tri(c - lo) - tri(c - hi)
    } else {
        tri(c - lo) + tri(hi - c)
    }
}

/// The compiled 1-D function viewed through its construction: a clipped
/// trapezoid in x (affine between O(M) kinks) composed with a chain of
/// scalar level folds. The adjustments keep re-folding the transition
/// strips, so the final function has exponentially many kinks there and
/// enumerating them is hopeless; integrating in fold space instead stays
/// exact and polynomial, because every fold maps an interval of values
/// affinely onto a lower one.
struct FoldModel {
    rstar: Pwl,
    /// (u, bias, v) of each adjustment block, in application order.
    folds: Vec<(f64, f64, f64)>,
    out_w: f64,
    out_b: f64,
}

impl FoldModel {
    fn from_trace(trace: &ConstructionTrace) -> Option<FoldModel> {
        let net = &trace.net;
        if net.dim() != 1 {
            return None;
        }
        // Without the tail-clip marker (zero target) the whole net is the
        // trapezoid part and the fold chain is empty.
        let pre = trace
            .checkpoints
            .iter()
            .find(|c| c.stage == Stage::TailClamp)
            .map(|c| c.blocks_len)
            .unwrap_or(net.blocks().len())
            .min(net.blocks().len());
        let mut f = Pwl::identity();
        for b in &net.blocks()[..pre] {
            f = f.apply_scalar_block(b.u_row()[0], b.bias(), b.v_col()[0]);
        }
        let folds =
            net.blocks()[pre..].iter().map(|b| (b.u_row()[0], b.bias(), b.v_col()[0])).collect();
        Some(FoldModel { rstar: f, folds, out_w: net.out_weights()[0], out_b: net.out_bias() })
    }

    /// Fold chain from index `i` on, applied to a single value.
    fn phi(&self, i: usize, mut y: f64) -> f64 {
        for &(u, b, v) in &self.folds[i..] {
            let p = u * y + b;
            if p > 0.0 {
                y += v * p;
            }
        }
        y
    }

    /// Like `phi(0, y)` but also the product of |1 + u v| over the active
    /// folds: the local derivative magnitude of the chain, which is how much
    /// roundoff in `y` inflates on the way through.
    fn phi_amp(&self, mut y: f64) -> (f64, f64) {
        let mut amp = 1.0;
        for &(u, b, v) in &self.folds {
            let p = u * y + b;
            if p > 0.0 {
                y += v * p;
                amp *= (1.0 + u * v).abs();
            }
        }
        (y, amp)
    }

    fn predict(&self, x: f64) -> f64 {
        self.out_w * self.phi(0, self.rstar.eval(x)) + self.out_b
    }

    /// `∫_lo^hi |Φ_i(z) - c| dz` where Φ_i applies folds i.. . Each fold is
    /// the identity on its inactive side and an affine map on the active
    /// side, so the integral splits at the threshold and the active part
    /// reduces to the next fold after an affine change of variables. The
    /// folded image of a threshold is computed identically on every path,
    /// so memoizing on the exact interval bits collapses the recursion to
    /// polynomially many distinct subproblems.
    fn seg(
        &self,
        i: usize,
        lo: f64,
        hi: f64,
        c: f64,
        memo: &mut HashMap<(usize, u64, u64, u64), f64>,
    ) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        if i == self.folds.len() {
            return abs_affine_integral(lo, hi, c);
        }
        let key = (i, lo.to_bits(), hi.to_bits(), c.to_bits());
        if let Some(&v) = memo.get(&key) {
            return v;
        }
        let (u, b, v) = self.folds[i];
        let result = if u == 0.0 {
            if b > 0.0 {
                self.seg(i + 1, lo + v * b, hi + v * b, c, memo)
            } else {
                self.seg(i + 1, lo, hi, c, memo)
            }
        } else {
            let theta = -b / u;
            let inactive_below = u > 0.0;
            let fully_inactive = if inactive_below { hi <= theta } else { lo >= theta };
            let fully_active = if inactive_below { lo >= theta } else { hi <= theta };
            if fully_inactive {
                self.seg(i + 1, lo, hi, c, memo)
            } else if fully_active {
                let gain = 1.0 + u * v;
                let (a, z) = (lo + v * (u * lo + b), hi + v * (u * hi + b));
                if gain == 0.0 {
                    // The fold collapses the whole interval to one value.
                    (hi - lo) * (self.phi(i + 1, a) - c).abs()
                } else {
                    self.seg(i + 1, a.min(z), a.max(z), c, memo) / gain.abs()
                }
            } else {
                self.seg(i, lo, theta, c, memo) + self.seg(i, theta, hi, c, memo)
            }
        };
        memo.insert(key, result);
        result
    }
}

/// Exact integral of |R - h| over the support of the target. The domain is
/// partitioned at the recorded construction abscissae and the target knots;
/// on each piece the trapezoid stage is affine, so the integral reduces to
/// a fold-space integral with closed-form pieces. A midpoint self-check on
/// every piece verifies that `net` matches the traced construction.
pub fn exact_l1_error_1d(
    net: &ResNet,
    trace: &ConstructionTrace,
    target: &PiecewiseConstant1D,
) -> Result<f64, VerifyError> {
    if net.dim() != 1 {
        return Err(VerifyError::DimMismatch { expected: 1, got: net.dim() });
    }
    let model = FoldModel::from_trace(trace)
        .ok_or(VerifyError::DimMismatch { expected: 1, got: trace.net.dim() })?;
    let (a0, am) = (target.knots()[0], *target.knots().last().unwrap());
    let mut points: Vec<f64> = trace
        .breakpoints
        .iter()
        .chain(target.knots())
        .chain(model.rstar.xs.iter())
        .copied()
        .filter(|x| (a0..=am).contains(x))
        .collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    let mut memo = HashMap::new();
    let mut total = 0.0;
    for i in 0..points.len().saturating_sub(1) {
        let (l, r) = (points[i], points[i + 1]);
        let w = r - l;
        if w <= 0.0 {
            continue;
        }
        let mid = 0.5 * (l + r);
        let c = target.eval(mid);
        let (yl, yr) = (model.rstar.eval(l), model.rstar.eval(r));
        total += if model.out_w == 0.0 {
            w * (model.out_b - c).abs()
        } else if (yr - yl).abs() <= 1e-12 * (1.0 + yl.abs()) {
            // Plateau (or sliver) piece: the trapezoid stage is constant.
            let (vl, vr) = (model.predict(l), model.predict(r));
            0.5 * w * ((vl - c).abs() + (vr - c).abs())
        } else {
            let c2 = (c - model.out_b) / model.out_w;
            w / (yr - yl).abs()
                * model.out_w.abs()
                * model.seg(0, yl.min(yr), yl.max(yr), c2, &mut memo)
        };
        // Cheap integrity check: the network must agree with the traced
        // construction at the piece midpoint. Skipped on slivers, where the
        // interpolated trapezoid value is pure roundoff. Deep in the fold
        // cascade the local slope (ramp slope times the chained fold gains)
        // can exceed 1/ulp, so the comparison is only meaningful up to that
        // conditioning and the tolerance scales with it.
        if w > 1e-7 * (1.0 + l.abs()) {
            let (py, amp) = model.phi_amp(model.rstar.eval(mid));
            let pred = model.out_w * py + model.out_b;
            let got = net.eval_unchecked(&[mid]);
            let swing = (model.predict(l) - model.predict(r)).abs();
            let slope = model.out_w.abs() * amp * (yr - yl).abs() / w;
            let tol = 1e-9 * (1.0 + pred.abs()) + 1e-6 * swing + slope * 1e-13 * (1.0 + mid.abs());
            if (got - pred).abs() > tol {
                return Err(VerifyError::NotPiecewiseLinear { left: l, right: r });
            }
        }
    }
    Ok(total)
}

/// SplitMix-style mix of (seed, counter): uniform in [0, 1), the same value
/// for a given counter no matter how sampling is sharded.
fn u01(seed: u64, ctr: u64) -> f64 {
    let mut z = seed.wrapping_add(ctr.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Worker cap from RESNET_SYNTH_THREADS (0 or unset = all available cores).
pub fn thread_count() -> usize {
    let avail = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("RESNET_SYNTH_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        Some(0) | None => avail,
        Some(n) => n.min(avail).max(1),
    }
}

const MC_SHARD: u64 = 65_536;

/// Monte-Carlo estimate of the L1 distance between the network and the
/// target over the box `[lo, hi]`, with its standard error. Deterministic in
/// (seed, n) regardless of the worker count: each sample is derived from its
/// global index and shard sums are merged in index order.
pub fn mc_l1_error(
    net: &ResNet,
    target: &PiecewiseConstantND,
    lo: &[f64],
    hi: &[f64],
    n: usize,
    seed: u64,
) -> Result<(f64, f64), VerifyError> {
    if n < 100 {
        return Err(VerifyError::TooFewSamples { n });
    }
    let d = net.dim();
    if lo.len() != d || hi.len() != d || target.dims() != d {
        return Err(VerifyError::DimMismatch { expected: d, got: lo.len() });
    }
    let vol: f64 = lo.iter().zip(hi).map(|(a, b)| b - a).product();
    let n_shards = (n as u64).div_ceil(MC_SHARD);
    let shard_sums: Vec<(f64, f64)> = {
        let workers = thread_count();
        let next = std::sync::atomic::AtomicU64::new(0);
        let mut sums = vec![(0.0, 0.0); n_shards as usize];
        let slots = std::sync::Mutex::new(&mut sums);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let s = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if s >= n_shards {
                        break;
                    }
                    let start = s * MC_SHARD;
                    let end = (start + MC_SHARD).min(n as u64);
                    let mut x = vec![0.0; d];
                    let (mut sum, mut sum_sq) = (0.0, 0.0);
                    for i in start..end {
                        for (j, xj) in x.iter_mut().enumerate() {
                            let u = u01(seed, i * d as u64 + j as u64);
                            *xj = lo[j] + (hi[j] - lo[j]) * u;
                        }
                        let diff = (net.eval_unchecked(&x) - target.eval(&x)).abs();
                        sum += diff;
                        sum_sq += diff * diff;
                    }
                    slots.lock().unwrap()[s as usize] = (sum, sum_sq);
                });
            }
        });
        sums
    };
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for (a, b) in shard_sums {
        sum += a;
        sum_sq += b;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0);
    Ok((vol * mean, vol * (var / nf).sqrt()))
}

/// Upper bound on the Lipschitz constant: product over blocks of
/// (1 + |v|_2 |u|_2) times |out_weights|_2.
pub fn lipschitz_bound(net: &ResNet) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    net.blocks()
        .iter()
        .map(|b| 1.0 + norm(b.v_col()) * norm(b.u_row()))
        .product::<f64>()
        * norm(net.out_weights())
}

/// Probe abscissae for the 1-D condition checks: a dense grid per interval
/// plus margins on both sides, every breakpoint straddled at 1e-7, and the
/// tolerant-band edges around each knot.
fn probe_points(target: &PiecewiseConstant1D, trace: &ConstructionTrace, per_interval: usize) -> Vec<f64> {
    let knots = target.knots();
    let (a0, am) = (knots[0], *knots.last().unwrap());
    let margin = 1.0 + 4.0 * trace.delta;
    let mut probes = Vec::new();
    let mut fill = |l: f64, r: f64| {
        for i in 0..=per_interval {
            probes.push(l + (r - l) * i as f64 / per_interval as f64);
        }
    };
    fill(a0 - margin, a0);
    for w in knots.windows(2) {
        fill(w[0], w[1]);
    }
    fill(am, am + margin);
    for &b in &trace.breakpoints {
        probes.push(b - 1e-7);
        probes.push(b + 1e-7);
    }
    for &k in knots {
        for off in [-trace.delta, trace.delta] {
            probes.push(k + off - 1e-7);
            probes.push(k + off);
            probes.push(k + off + 1e-7);
        }
    }
    probes.sort_by(f64::total_cmp);
    probes
}

/// Evaluate every construction stage on dense probes and compare against the
/// closed forms it must satisfy: the ramp conditions per induction step, the
/// level-set containment after the tail clamp, and locality plus final
/// values and bounds for each adjustment. Failures become report entries.
pub fn check_conditions_1d(
    trace: &ConstructionTrace,
    target: &PiecewiseConstant1D,
    probes_per_interval: usize,
) -> VerificationReport {
    let mut report = VerificationReport::default();
    if trace.checkpoints.is_empty() {
        return report;
    }
    let h = trace.h_inf;
    let delta = trace.delta;
    let knots = target.knots();
    let big_m = target.pieces();
    let probes = probe_points(target, trace, probes_per_interval);
    let mut checker = Checker::new(1e-9);

    // Interior of interval k (1-based) shrunk by delta.
    let interior = |k: usize, x: f64| x >= knots[k - 1] + delta && x <= knots[k] - delta;
    let worst = |it: &mut dyn Iterator<Item = (f64, f64)>| {
        it.fold((0.0_f64, f64::NAN), |acc, (v, x)| if v > acc.0 { (v, x) } else { acc })
    };

    let mut prev_vals: Option<Vec<f64>> = None;
    for cp in &trace.checkpoints {
        let stage_net = trace.net.prefix(cp.blocks_len);
        let vals: Vec<f64> = probes.iter().map(|&x| stage_net.eval_unchecked(&[x])).collect();
        match cp.stage {
            Stage::Ramp(m) => {
                let name = format!("R_{m}");
                // C1: zero left of the first knot.
                let (v, x) = worst(
                    &mut probes.iter().zip(&vals).filter(|(&x, _)| x <= knots[0]).map(|(&x, &r)| (r.abs(), x)),
                );
                checker.record(format!("{name}: C1 zero on left tail"), v, x);
                // C3: plateau (k+1)h on each finished interior.
                for k in 1..=m {
                    let want = (k as f64 + 1.0) * h;
                    let (v, x) = worst(
                        &mut probes
                            .iter()
                            .zip(&vals)
                            .filter(|(&x, _)| interior(k, x))
                            .map(|(&x, &r)| (dev(r, want), x)),
                    );
                    checker.record(format!("{name}: C3 plateau on interval {k}"), v, x);
                }
                // C4: bounded in [0, (m+1)h] up to the m-th knot.
                let cap = (m as f64 + 1.0) * h;
                let (v, x) = worst(
                    &mut probes
                        .iter()
                        .zip(&vals)
                        .filter(|(&x, _)| x <= knots[m])
                        .map(|(&x, &r)| (((-r).max(r - cap)).max(0.0) / (1.0 + cap), x)),
                );
                checker.record(format!("{name}: C4 bounds up to knot {m}"), v, x);
                // C5: linear tail of slope -(m+1)h/delta after the m-th knot.
                let slope = -(m as f64 + 1.0) * h / delta;
                let (v, x) = worst(
                    &mut probes
                        .iter()
                        .zip(&vals)
                        .filter(|(&x, _)| x >= knots[m])
                        .map(|(&x, &r)| (dev(r, slope * (x - knots[m])), x)),
                );
                checker.record(format!("{name}: C5 descending tail"), v, x);
            }
            Stage::TailClamp => {
                let (v, x) = worst(
                    &mut probes
                        .iter()
                        .zip(&vals)
                        .filter(|(&x, _)| x >= *knots.last().unwrap())
                        .map(|(&x, &r)| (r.abs(), x)),
                );
                checker.record("R_M*: zero on right tail".into(), v, x);
                let (v, x) = worst(&mut probes.iter().zip(&vals).map(|(&x, &r)| ((-r).max(0.0), x)));
                checker.record("R_M*: nonnegative".into(), v, x);
                // Level-set containment: interval k sits in (kh, (k+1)h].
                for k in 1..=big_m {
                    let (v, x) = worst(
                        &mut probes
                            .iter()
                            .zip(&vals)
                            .filter(|(&x, _)| interior(k, x))
                            .map(|(&x, &r)| {
                                let low = k as f64 * h - r;
                                let high = r - (k as f64 + 1.0) * h;
                                (low.max(high).max(0.0) / (1.0 + h), x)
                            }),
                    );
                    checker.record(format!("R_M*: interval {k} inside level set {k}"), v, x);
                }
            }
            Stage::Adjusted(k) => {
                let name = format!("R_{}*", k - 1);
                // Adjusted intervals carry target values, lower ones still
                // carry the staircase values.
                for j in 1..=big_m {
                    let want = if j >= k {
                        target.values()[j - 1]
                    } else {
                        (j as f64 + 1.0) * h
                    };
                    let (v, x) = worst(
                        &mut probes
                            .iter()
                            .zip(&vals)
                            .filter(|(&x, _)| interior(j, x))
                            .map(|(&x, &r)| (dev(r, want), x)),
                    );
                    checker.record(format!("{name}: value on interval {j}"), v, x);
                }
                // Locality: unchanged wherever the previous stage was at or
                // below the threshold k*h.
                if let Some(prev) = &prev_vals {
                    let thr = k as f64 * h;
                    let (v, x) = worst(
                        &mut probes
                            .iter()
                            .zip(prev.iter().zip(&vals))
                            .filter(|(_, (&p, _))| p <= thr - 1e-9)
                            .map(|(&x, (&p, &r))| (dev(r, p), x)),
                    );
                    checker.record(format!("{name}: untouched below {k}h"), v, x);
                }
                if k == 1 {
                    let (v, x) = worst(
                        &mut probes
                            .iter()
                            .zip(&vals)
                            .map(|(&x, &r)| ((r.abs() - h).max(0.0) / (1.0 + h), x)),
                    );
                    checker.record("final: bounded by sup norm".into(), v, x);
                    let (v, x) = worst(
                        &mut probes
                            .iter()
                            .zip(&vals)
                            .filter(|(&x, _)| x <= knots[0] || x >= *knots.last().unwrap())
                            .map(|(&x, &r)| (r.abs(), x)),
                    );
                    checker.record("final: zero outside support".into(), v, x);
                }
            }
            Stage::IndicatorLevel(_) | Stage::CellAdjusted(_) => {}
        }
        prev_vals = Some(vals);
    }
    report.checks = checker.checks;
    report
}

//! Exact tracking of scalar piecewise-linear functions through residual
//! blocks.
//!
//! The 1-D compiler only ever applies maps of the form
//! `y -> y + v * relu(u*y + b)` to the running value. Starting from the
//! identity, the running value stays piecewise linear in the input, and every
//! new kink appears where `u*f(x) + b` crosses zero on an affine segment.
//! Solving those crossings keeps the breakpoint list exact, which is what the
//! closed-form L1 integration downstream relies on.

/// Piecewise-linear function given by breakpoints `(xs[i], ys[i])`, affine
/// with slope `slope_left` on `(-inf, xs[0]]` and `slope_right` on
/// `[xs.last(), inf)`. `xs` is strictly increasing and never empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Pwl {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub slope_left: f64,
    pub slope_right: f64,
}

impl Pwl {
    /// The identity map x -> x.
    pub fn identity() -> Pwl {
        Pwl { xs: vec![0.0], ys: vec![0.0], slope_left: 1.0, slope_right: 1.0 }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0] + self.slope_left * (x - self.xs[0]);
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1] + self.slope_right * (x - self.xs[n - 1]);
        }
        // First breakpoint strictly right of x.
        let j = self.xs.partition_point(|&bx| bx < x);
        let (x0, x1) = (self.xs[j - 1], self.xs[j]);
        let (y0, y1) = (self.ys[j - 1], self.ys[j]);
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }

    /// Push the function through `y -> y + v * relu(u*y + b)`.
    pub fn apply_scalar_block(&self, u: f64, b: f64, v: f64) -> Pwl {
        let pre = |y: f64| u * y + b;
        let mut xs = Vec::with_capacity(self.xs.len() + 4);
        let mut ys = Vec::with_capacity(self.xs.len() + 4);

        // Crossing on the unbounded left segment.
        let p0 = pre(self.ys[0]);
        let dl = u * self.slope_left;
        if dl != 0.0 {
            let cx = self.xs[0] - p0 / dl;
            if cx < self.xs[0] {
                xs.push(cx);
                ys.push(self.ys[0] + self.slope_left * (cx - self.xs[0]));
            }
        }

        for i in 0..self.xs.len() {
            xs.push(self.xs[i]);
            ys.push(self.ys[i]);
            if i + 1 < self.xs.len() {
                let (pa, pb) = (pre(self.ys[i]), pre(self.ys[i + 1]));
                if (pa > 0.0 && pb < 0.0) || (pa < 0.0 && pb > 0.0) {
                    let t = pa / (pa - pb);
                    let cx = self.xs[i] + t * (self.xs[i + 1] - self.xs[i]);
                    if cx > self.xs[i] && cx < self.xs[i + 1] {
                        xs.push(cx);
                        ys.push(self.ys[i] + t * (self.ys[i + 1] - self.ys[i]));
                    }
                }
            }
        }

        // Crossing on the unbounded right segment.
        let pn = pre(*self.ys.last().unwrap());
        let dr = u * self.slope_right;
        if dr != 0.0 {
            let xn = *self.xs.last().unwrap();
            let cx = xn - pn / dr;
            if cx > xn {
                xs.push(cx);
                ys.push(self.ys.last().unwrap() + self.slope_right * (cx - xn));
            }
        }

        // Map values through the block; pre == 0 points stay fixed either way.
        let new_ys: Vec<f64> = ys
            .iter()
            .map(|&y| {
                let p = pre(y);
                if p > 0.0 { y + v * p } else { y }
            })
            .collect();

        // End slopes depend on whether the neuron is active at infinity.
        let active_left = if dl != 0.0 { dl < 0.0 } else { p0 > 0.0 };
        let active_right = if dr != 0.0 { dr > 0.0 } else { pn > 0.0 };
        let gain = 1.0 + v * u;
        let mut out = Pwl {
            xs,
            ys: new_ys,
            slope_left: if active_left { self.slope_left * gain } else { self.slope_left },
            slope_right: if active_right { self.slope_right * gain } else { self.slope_right },
        };
        out.prune();
        out
    }

    /// Drop breakpoints where the slope does not change. Inactive regions of
    /// every block keep their old points verbatim, so without this the list
    /// grows with the block count instead of the actual kink count.
    fn prune(&mut self) {
        let n = self.xs.len();
        if n < 2 {
            return;
        }
        let mut keep = vec![true; n];
        let mut sl = self.slope_left;
        for i in 0..n {
            let sr = if i == n - 1 {
                self.slope_right
            } else {
                (self.ys[i + 1] - self.ys[i]) / (self.xs[i + 1] - self.xs[i])
            };
            // Ulp-level only: inactive regions of a block keep their points
            // with identical values, so their recomputed slopes match to the
            // last bit and anything looser would let interpolation drift.
            if (sl - sr).abs() <= 1e-15 * (1.0 + sl.abs().max(sr.abs())) {
                keep[i] = false;
            } else {
                sl = sr;
            }
        }
        if keep.iter().all(|&k| k) {
            return;
        }
        if keep.iter().all(|&k| !k) {
            keep[0] = true;
        }
        let mut j = 0;
        self.xs.retain(|_| {
            j += 1;
            keep[j - 1]
        });
        j = 0;
        self.ys.retain(|_| {
            j += 1;
            keep[j - 1]
        });
    }

    /// Abscissae where the slope actually changes, in increasing order.
    pub fn kinks(&self) -> Vec<f64> {
        let n = self.xs.len();
        let mut out = Vec::new();
        for i in 0..n {
            let sl = if i == 0 {
                self.slope_left
            } else {
                (self.ys[i] - self.ys[i - 1]) / (self.xs[i] - self.xs[i - 1])
            };
            let sr = if i == n - 1 {
                self.slope_right
            } else {
                (self.ys[i + 1] - self.ys[i]) / (self.xs[i + 1] - self.xs[i])
            };
            let scale = 1.0 + sl.abs().max(sr.abs());
            if (sl - sr).abs() > 1e-9 * scale {
                out.push(self.xs[i]);
            }
        }
        out
    }
}

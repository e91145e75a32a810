//! Desk-scale unit-ball classification study: points in the unit disk are
//! positive, points in the annulus 2 <= |z| <= 3 negative, and two tiny
//! architectures compete on logistic loss: a fully-connected net whose
//! hidden layers are only as wide as the input, and a residual net with one
//! hidden neuron per block. Backpropagation is written out by hand for both.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::net::{ResNet, ResidualBlock};
use crate::serial::{format_hex, parse_hex, ParseError};

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    /// Loss became non-finite during this epoch.
    Diverged { epoch: usize },
    LengthMismatch { preds: usize, labels: usize },
    BadConfig(String),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Diverged { epoch } => write!(f, "training diverged at epoch {epoch}"),
            TrainError::LengthMismatch { preds, labels } => {
                write!(f, "{preds} predictions vs {labels} labels")
            }
            TrainError::BadConfig(msg) => write!(f, "bad config: {msg}"),
        }
    }
}

impl std::error::Error for TrainError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub points: Vec<[f64; 2]>,
    /// +1 or -1 per point.
    pub labels: Vec<f64>,
    pub seed: u64,
}

/// n_pos points uniform in the unit disk, n_neg uniform (by area) in the
/// annulus 2 <= |z| <= 3.
pub fn gen_dataset(n_pos: usize, n_neg: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n_pos + n_neg);
    let mut labels = Vec::with_capacity(n_pos + n_neg);
    for _ in 0..n_pos {
        let r = rng.gen::<f64>().sqrt();
        let th = std::f64::consts::TAU * rng.gen::<f64>();
        points.push([r * th.cos(), r * th.sin()]);
        labels.push(1.0);
    }
    for _ in 0..n_neg {
        // Area-uniform: r^2 uniform on [4, 9].
        let r = (4.0 + 5.0 * rng.gen::<f64>()).sqrt();
        let th = std::f64::consts::TAU * rng.gen::<f64>();
        points.push([r * th.cos(), r * th.sin()]);
        labels.push(-1.0);
    }
    Dataset { points, labels, seed }
}

/// Mean of log(1 + exp(-y * pred)), evaluated without overflow.
pub fn logistic_loss(preds: &[f64], labels: &[f64]) -> Result<f64, TrainError> {
    if preds.len() != labels.len() {
        return Err(TrainError::LengthMismatch { preds: preds.len(), labels: labels.len() });
    }
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let m = -y * p;
            if m > 0.0 { m + (-m).exp().ln_1p() } else { m.exp().ln_1p() }
        })
        .sum();
    Ok(total / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    /// Input 2 -> depth hidden ReLU layers of width 2 -> scalar linear output.
    FullyConnectedWidthD,
    /// 2-dim state through depth one-neuron residual blocks -> scalar linear output.
    OneNeuronResNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Arch,
    pub depth: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(arch: Arch, depth: usize) -> TrainConfig {
        TrainConfig { arch, depth, lr: 0.05, momentum: 0.9, epochs: 10, batch_size: 16, seed: 0 }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.depth == 0 {
            return Err(TrainError::BadConfig("depth must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::BadConfig("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::BadConfig("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    /// Row-major 2x2 weight matrix.
    pub w: [f64; 4],
    pub b: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcNet {
    pub layers: Vec<FcLayer>,
    pub out_w: [f64; 2],
    pub out_b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlockParams {
    pub u: [f64; 2],
    pub b: f64,
    pub v: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResTrainNet {
    pub blocks: Vec<ResBlockParams>,
    pub out_w: [f64; 2],
    pub out_b: f64,
}

impl ResTrainNet {
    pub fn to_resnet(&self) -> ResNet {
        let blocks = self
            .blocks
            .iter()
            .map(|p| ResidualBlock::new(p.u.to_vec(), p.b, p.v.to_vec()).expect("finite params"))
            .collect();
        ResNet::new(2, blocks, self.out_w.to_vec(), self.out_b).expect("dims match")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Fc(FcNet),
    Res(ResTrainNet),
}

impl Model {
    pub fn forward(&self, z: [f64; 2]) -> f64 {
        match self {
            Model::Fc(net) => {
                let mut a = z;
                for l in &net.layers {
                    a = [
                        (l.w[0] * a[0] + l.w[1] * a[1] + l.b[0]).max(0.0),
                        (l.w[2] * a[0] + l.w[3] * a[1] + l.b[1]).max(0.0),
                    ];
                }
                net.out_w[0] * a[0] + net.out_w[1] * a[1] + net.out_b
            }
            Model::Res(net) => {
                let mut s = z;
                for blk in &net.blocks {
                    let r = (blk.u[0] * s[0] + blk.u[1] * s[1] + blk.b).max(0.0);
                    s[0] += blk.v[0] * r;
                    s[1] += blk.v[1] * r;
                }
                net.out_w[0] * s[0] + net.out_w[1] * s[1] + net.out_b
            }
        }
    }

    /// Flat parameter vector: per layer/block weights then biases, output
    /// weights and bias last.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::new();
        match self {
            Model::Fc(net) => {
                for l in &net.layers {
                    p.extend_from_slice(&l.w);
                    p.extend_from_slice(&l.b);
                }
                p.extend_from_slice(&net.out_w);
                p.push(net.out_b);
            }
            Model::Res(net) => {
                for blk in &net.blocks {
                    p.extend_from_slice(&blk.u);
                    p.push(blk.b);
                    p.extend_from_slice(&blk.v);
                }
                p.extend_from_slice(&net.out_w);
                p.push(net.out_b);
            }
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut it = p.iter().copied();
        let mut take = || it.next().expect("parameter vector too short");
        match self {
            Model::Fc(net) => {
                for l in &mut net.layers {
                    for w in &mut l.w {
                        *w = take();
                    }
                    for b in &mut l.b {
                        *b = take();
                    }
                }
                for w in &mut net.out_w {
                    *w = take();
                }
                net.out_b = take();
            }
            Model::Res(net) => {
                for blk in &mut net.blocks {
                    for u in &mut blk.u {
                        *u = take();
                    }
                    blk.b = take();
                    for v in &mut blk.v {
                        *v = take();
                    }
                }
                for w in &mut net.out_w {
                    *w = take();
                }
                net.out_b = take();
            }
        }
    }

    /// Output and its gradient with respect to all parameters, by reverse
    /// accumulation through the closed-form layer Jacobians.
    pub fn output_grad(&self, z: [f64; 2]) -> (f64, Vec<f64>) {
        match self {
            Model::Fc(net) => {
                let mut acts = Vec::with_capacity(net.layers.len() + 1);
                acts.push(z);
                for l in &net.layers {
                    let a = *acts.last().unwrap();
                    acts.push([
                        (l.w[0] * a[0] + l.w[1] * a[1] + l.b[0]).max(0.0),
                        (l.w[2] * a[0] + l.w[3] * a[1] + l.b[1]).max(0.0),
                    ]);
                }
                let last = *acts.last().unwrap();
                let out = net.out_w[0] * last[0] + net.out_w[1] * last[1] + net.out_b;
                let mut grad = vec![0.0; self.params().len()];
                let n_layers = net.layers.len();
                // Output layer slots sit at the tail of the flat vector.
                let tail = n_layers * 6;
                grad[tail] = last[0];
                grad[tail + 1] = last[1];
                grad[tail + 2] = 1.0;
                let mut delta = net.out_w;
                for (i, l) in net.layers.iter().enumerate().rev() {
                    let a = acts[i];
                    let h = acts[i + 1];
                    // ReLU gate: the stored activation is zero iff inactive.
                    let d = [
                        if h[0] > 0.0 { delta[0] } else { 0.0 },
                        if h[1] > 0.0 { delta[1] } else { 0.0 },
                    ];
                    let base = i * 6;
                    grad[base] = d[0] * a[0];
                    grad[base + 1] = d[0] * a[1];
                    grad[base + 2] = d[1] * a[0];
                    grad[base + 3] = d[1] * a[1];
                    grad[base + 4] = d[0];
                    grad[base + 5] = d[1];
                    delta = [l.w[0] * d[0] + l.w[2] * d[1], l.w[1] * d[0] + l.w[3] * d[1]];
                }
                (out, grad)
            }
            Model::Res(net) => {
                let mut states = Vec::with_capacity(net.blocks.len() + 1);
                let mut pres = Vec::with_capacity(net.blocks.len());
                let mut s = z;
                states.push(s);
                for blk in &net.blocks {
                    let pre = blk.u[0] * s[0] + blk.u[1] * s[1] + blk.b;
                    pres.push(pre);
                    let r = pre.max(0.0);
                    s[0] += blk.v[0] * r;
                    s[1] += blk.v[1] * r;
                    states.push(s);
                }
                let out = net.out_w[0] * s[0] + net.out_w[1] * s[1] + net.out_b;
                let mut grad = vec![0.0; self.params().len()];
                let tail = net.blocks.len() * 5;
                grad[tail] = s[0];
                grad[tail + 1] = s[1];
                grad[tail + 2] = 1.0;
                let mut delta = net.out_w;
                for (i, blk) in net.blocks.iter().enumerate().rev() {
                    let s_in = states[i];
                    let pre = pres[i];
                    let base = i * 5;
                    if pre > 0.0 {
                        let dv = delta[0] * blk.v[0] + delta[1] * blk.v[1];
                        grad[base] = dv * s_in[0];
                        grad[base + 1] = dv * s_in[1];
                        grad[base + 2] = dv;
                        grad[base + 3] = delta[0] * pre;
                        grad[base + 4] = delta[1] * pre;
                        delta = [delta[0] + blk.u[0] * dv, delta[1] + blk.u[1] * dv];
                    }
                }
                (out, grad)
            }
        }
    }

    /// Per-sample logistic loss and its parameter gradient.
    pub fn loss_grad(&self, z: [f64; 2], y: f64) -> (f64, Vec<f64>) {
        let (out, mut grad) = self.output_grad(z);
        let m = -y * out;
        let loss = if m > 0.0 { m + (-m).exp().ln_1p() } else { m.exp().ln_1p() };
        // d loss / d out = -y * sigmoid(-y * out).
        let dout = -y / (1.0 + (y * out).exp());
        for g in &mut grad {
            *g *= dout;
        }
        (loss, grad)
    }

    pub fn mean_loss(&self, data: &Dataset) -> f64 {
        let preds: Vec<f64> = data.points.iter().map(|&z| self.forward(z)).collect();
        logistic_loss(&preds, &data.labels).expect("dataset lengths agree")
    }
}

/// Fresh model with every parameter drawn uniform(-0.7, 0.7) / sqrt(fan_in),
/// in flat-vector order.
pub fn init_model(cfg: &TrainConfig) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = |fan_in: f64| (rng.gen::<f64>() * 1.4 - 0.7) / fan_in.sqrt();
    match cfg.arch {
        Arch::FullyConnectedWidthD => {
            let layers = (0..cfg.depth)
                .map(|_| FcLayer {
                    w: [draw(2.0), draw(2.0), draw(2.0), draw(2.0)],
                    b: [draw(2.0), draw(2.0)],
                })
                .collect();
            Model::Fc(FcNet { layers, out_w: [draw(2.0), draw(2.0)], out_b: draw(2.0) })
        }
        Arch::OneNeuronResNet => {
            let blocks = (0..cfg.depth)
                .map(|_| ResBlockParams {
                    u: [draw(2.0), draw(2.0)],
                    b: draw(2.0),
                    v: [draw(1.0), draw(1.0)],
                })
                .collect();
            Model::Res(ResTrainNet { blocks, out_w: [draw(2.0), draw(2.0)], out_b: draw(2.0) })
        }
    }
}

/// Minibatch SGD with momentum. The returned history holds the full-dataset
/// loss before training and after each epoch (epochs + 1 entries).
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<(Model, Vec<f64>), TrainError> {
    cfg.validate()?;
    let mut model = init_model(cfg);
    let mut params = model.params();
    let mut velocity = vec![0.0; params.len()];
    let mut history = vec![model.mean_loss(data)];
    // Separate stream from the init so changing depth does not reshuffle.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5351_4731);
    let mut order: Vec<usize> = (0..data.points.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; params.len()];
            for &i in batch {
                let (_, g) = model.loss_grad(data.points[i], data.labels[i]);
                for (acc, gi) in grad.iter_mut().zip(g) {
                    *acc += gi;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v + g * scale;
                *p -= cfg.lr * *v;
            }
            model.set_params(&params);
        }
        let loss = model.mean_loss(data);
        if !loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        history.push(loss);
    }
    Ok((model, history))
}

/// Append the clamp relu(f) - relu(f - 1), so the output becomes
/// min(max(f, 0), 1) exactly. For the fully-connected net this is one extra
/// width-2 layer whose both units read the old output; for the residual net,
/// two blocks that fold the output functional back through the state.
pub fn clamp_network(model: &Model) -> Model {
    match model {
        Model::Fc(net) => {
            let mut out = net.clone();
            let w = net.out_w;
            out.layers.push(FcLayer {
                w: [w[0], w[1], w[0], w[1]],
                b: [net.out_b, net.out_b - 1.0],
            });
            out.out_w = [1.0, -1.0];
            out.out_b = 0.0;
            Model::Fc(out)
        }
        Model::Res(net) => {
            let mut out = net.clone();
            let w = net.out_w;
            let ww = w[0] * w[0] + w[1] * w[1];
            if ww == 0.0 {
                // Output is the constant out_b: clamp it directly.
                out.out_b = net.out_b.clamp(0.0, 1.0);
                return Model::Res(out);
            }
            // s += (w/|w|^2) relu(-w.s - b) turns f into max(f, 0);
            // s -= (w/|w|^2) relu(w.s + b - 1) then caps it at 1.
            out.blocks.push(ResBlockParams {
                u: [-w[0], -w[1]],
                b: -net.out_b,
                v: [w[0] / ww, w[1] / ww],
            });
            out.blocks.push(ResBlockParams {
                u: [w[0], w[1]],
                b: net.out_b - 1.0,
                v: [-w[0] / ww, -w[1] / ww],
            });
            Model::Res(out)
        }
    }
}

/// n uniform samples in the disk of the given radius, each tagged with
/// whether f is strictly positive there.
pub fn sample_decision_boundary(
    f: impl Fn(f64, f64) -> f64,
    n: usize,
    radius: f64,
    seed: u64,
) -> Vec<(f64, f64, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let r = radius * rng.gen::<f64>().sqrt();
            let th = std::f64::consts::TAU * rng.gen::<f64>();
            let (x, y) = (r * th.cos(), r * th.sin());
            (x, y, f(x, y) > 0.0)
        })
        .collect()
}

/// CSV with header `x,y,pred`, prediction written as 1 or -1.
pub fn boundary_csv(points: &[(f64, f64, bool)]) -> String {
    let mut out = String::from("x,y,pred\n");
    for &(x, y, pos) in points {
        out.push_str(&format!("{},{},{}\n", x, y, if pos { 1 } else { -1 }));
    }
    out
}

pub const PPM_SIDE: usize = 256;

/// Binary P6 raster of the sign of f on a uniform grid over
/// [-radius, radius]^2: red where positive, blue elsewhere. Row 0 is the top
/// of the picture (largest y).
pub fn boundary_ppm(f: impl Fn(f64, f64) -> f64, radius: f64) -> Vec<u8> {
    let mut out = format!("P6\n{PPM_SIDE} {PPM_SIDE}\n255\n").into_bytes();
    for row in 0..PPM_SIDE {
        let y = radius - 2.0 * radius * (row as f64 + 0.5) / PPM_SIDE as f64;
        for col in 0..PPM_SIDE {
            let x = -radius + 2.0 * radius * (col as f64 + 0.5) / PPM_SIDE as f64;
            if f(x, y) > 0.0 {
                out.extend_from_slice(&[255, 0, 0]);
            } else {
                out.extend_from_slice(&[0, 0, 255]);
            }
        }
    }
    out
}

/// Fraction of uniform samples on each circle of the given radii where f is
/// strictly positive.
pub fn positivity_probe(
    f: impl Fn(f64, f64) -> f64,
    radii: &[f64],
    samples_per_shell: usize,
    seed: u64,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    radii
        .iter()
        .map(|&r| {
            let hits = (0..samples_per_shell)
                .filter(|_| {
                    let th = std::f64::consts::TAU * rng.gen::<f64>();
                    f(r * th.cos(), r * th.sin()) > 0.0
                })
                .count();
            hits as f64 / samples_per_shell as f64
        })
        .collect()
}

/// Text form of a fully-connected model, hexfloats for bit-exact round trips.
pub fn serialize_fc(net: &FcNet) -> String {
    let row = |vals: &[f64]| vals.iter().map(|&v| format_hex(v)).collect::<Vec<_>>().join(",");
    let mut out = format!("fcnet v1 depth={}\n", net.layers.len());
    for l in &net.layers {
        out.push_str(&format!("layer w=[{}] b=[{}]\n", row(&l.w), row(&l.b)));
    }
    out.push_str(&format!("out w=[{}] b={}\n", row(&net.out_w), format_hex(net.out_b)));
    out
}

pub fn deserialize_fc(text: &str) -> Result<FcNet, ParseError> {
    let err = |line: usize, msg: &str| ParseError { line, msg: msg.to_string() };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (ln, header) = lines.next().ok_or_else(|| err(1, "empty document"))?;
    let depth: usize = header
        .strip_prefix("fcnet v1 depth=")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| err(ln + 1, "bad fcnet header"))?;
    let vec_field = |ln: usize, part: &str, key: &str, n: usize| -> Result<Vec<f64>, ParseError> {
        let body = part
            .strip_prefix(&format!("{key}=["))
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(|| err(ln + 1, &format!("missing field {key}")))?;
        let vals: Option<Vec<f64>> = body.split(',').map(|t| parse_hex(t.trim())).collect();
        match vals {
            Some(v) if v.len() == n => Ok(v),
            _ => Err(err(ln + 1, &format!("field {key} needs {n} values"))),
        }
    };
    let mut layers = Vec::with_capacity(depth);
    for _ in 0..depth {
        let (ln, line) = lines.next().ok_or_else(|| err(0, "missing layer line"))?;
        let rest = line.strip_prefix("layer ").ok_or_else(|| err(ln + 1, "expected layer"))?;
        let (wpart, bpart) =
            rest.split_once("] ").ok_or_else(|| err(ln + 1, "malformed layer"))?;
        let w = vec_field(ln, &format!("{wpart}]"), "w", 4)?;
        let b = vec_field(ln, bpart, "b", 2)?;
        layers.push(FcLayer {
            w: [w[0], w[1], w[2], w[3]],
            b: [b[0], b[1]],
        });
    }
    let (ln, line) = lines.next().ok_or_else(|| err(0, "missing out line"))?;
    let rest = line.strip_prefix("out ").ok_or_else(|| err(ln + 1, "expected out"))?;
    let (wpart, bpart) = rest.split_once("] ").ok_or_else(|| err(ln + 1, "malformed out"))?;
    let w = vec_field(ln, &format!("{wpart}]"), "w", 2)?;
    let b = bpart
        .strip_prefix("b=")
        .and_then(|s| parse_hex(s.trim()))
        .ok_or_else(|| err(ln + 1, "missing field b"))?;
    Ok(FcNet { layers, out_w: [w[0], w[1]], out_b: b })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_radii_and_repeatability() {
        let d = gen_dataset(100, 200, 9);
        assert_eq!(d.points.len(), 300);
        for (z, &y) in d.points.iter().zip(&d.labels) {
            let r = (z[0] * z[0] + z[1] * z[1]).sqrt();
            if y > 0.0 {
                assert!(r <= 1.0);
            } else {
                assert!((2.0..=3.0).contains(&r));
            }
        }
        assert_eq!(d, gen_dataset(100, 200, 9));
        assert_ne!(d, gen_dataset(100, 200, 10));
    }

    #[test]
    fn annulus_radius_density_chi_squared() {
        // Density proportional to r on [2, 3]: bin mass ((b^2 - a^2) / 5.
        let d = gen_dataset(1, 100_000, 3);
        let mut counts = [0usize; 10];
        for (z, &y) in d.points.iter().zip(&d.labels) {
            if y < 0.0 {
                let r = (z[0] * z[0] + z[1] * z[1]).sqrt();
                counts[(((r - 2.0) * 10.0) as usize).min(9)] += 1;
            }
        }
        let n = 100_000.0;
        let chi2: f64 = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let (a, b) = (2.0 + 0.1 * i as f64, 2.1 + 0.1 * i as f64);
                let expect = n * (b * b - a * a) / 5.0;
                (c as f64 - expect).powi(2) / expect
            })
            .sum();
        // 9 degrees of freedom, 1% critical value.
        assert!(chi2 < 21.67, "chi2 = {chi2}");
    }

    #[test]
    fn logistic_loss_values() {
        assert!((logistic_loss(&[0.0], &[1.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(logistic_loss(&[50.0], &[1.0]).unwrap() < 1e-20);
        let big = logistic_loss(&[-50.0], &[1.0]).unwrap();
        assert!((big - 50.0).abs() < 1e-12);
        assert!(logistic_loss(&[0.0], &[1.0, -1.0]).is_err());
    }

    fn fd_check(arch: Arch) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..100 {
            let cfg = TrainConfig { seed: trial, ..TrainConfig::new(arch, 3) };
            let mut model = init_model(&cfg);
            let z = [rng.gen::<f64>() * 6.0 - 3.0, rng.gen::<f64>() * 6.0 - 3.0];
            let y = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let (_, grad) = model.loss_grad(z, y);
            let mut params = model.params();
            let idx = rng.gen_range(0..params.len());
            let h = 1e-5;
            let orig = params[idx];
            params[idx] = orig + h;
            model.set_params(&params);
            let (up, _) = model.loss_grad(z, y);
            params[idx] = orig - h;
            model.set_params(&params);
            let (down, _) = model.loss_grad(z, y);
            let fd = (up - down) / (2.0 * h);
            let rel = (grad[idx] - fd).abs() / grad[idx].abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "trial {trial} param {idx}: analytic {} fd {fd}", grad[idx]);
        }
    }

    #[test]
    fn gradients_match_finite_differences_fc() {
        fd_check(Arch::FullyConnectedWidthD);
    }

    #[test]
    fn gradients_match_finite_differences_resnet() {
        fd_check(Arch::OneNeuronResNet);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let data = gen_dataset(20, 40, 1);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::new(Arch::OneNeuronResNet, 2) };
        let (model, history) = train(&cfg, &data).unwrap();
        assert_eq!(model.params(), init_model(&cfg).params());
        assert_eq!(history.len(), 1);
    }

    #[test]
    fn default_resnet_run_improves() {
        let data = gen_dataset(100, 200, 0);
        let cfg = TrainConfig::new(Arch::OneNeuronResNet, 5);
        let (_, history) = train(&cfg, &data).unwrap();
        assert!(history.last().unwrap() < history.first().unwrap(), "{history:?}");
    }

    #[test]
    fn clamp_equals_min_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for arch in [Arch::FullyConnectedWidthD, Arch::OneNeuronResNet] {
            let model = init_model(&TrainConfig { seed: 8, ..TrainConfig::new(arch, 3) });
            let clamped = clamp_network(&model);
            for _ in 0..10_000 {
                let z = [rng.gen::<f64>() * 8.0 - 4.0, rng.gen::<f64>() * 8.0 - 4.0];
                let f = model.forward(z);
                let want = f.max(0.0).min(1.0);
                assert!((clamped.forward(z) - want).abs() <= 1e-12 * (1.0 + f.abs()));
            }
        }
    }

    #[test]
    fn clamp_case_table() {
        // Fixed output functional so we can steer f directly: f = x.
        let model = Model::Res(ResTrainNet { blocks: vec![], out_w: [1.0, 0.0], out_b: 0.0 });
        let clamped = clamp_network(&model);
        assert_eq!(clamped.forward([2.0, 0.0]), 1.0);
        assert_eq!(clamped.forward([0.5, 0.0]), 0.5);
        assert_eq!(clamped.forward([-3.0, 0.0]), 0.0);
    }

    #[test]
    fn trained_resnet_matches_exported_form() {
        let data = gen_dataset(30, 60, 2);
        let cfg = TrainConfig { epochs: 2, ..TrainConfig::new(Arch::OneNeuronResNet, 3) };
        let (model, _) = train(&cfg, &data).unwrap();
        if let Model::Res(net) = &model {
            let exported = net.to_resnet();
            for &z in &data.points {
                assert_eq!(model.forward(z), exported.eval_unchecked(&z));
            }
        } else {
            panic!("wrong arch");
        }
    }

    #[test]
    fn boundary_sampling_constant_positive() {
        let pts = sample_decision_boundary(|_, _| 1.0, 500, 5.0, 3);
        assert!(pts.iter().all(|p| p.2));
        assert_eq!(pts, sample_decision_boundary(|_, _| 1.0, 500, 5.0, 3));
        let csv = boundary_csv(&pts[..2]);
        assert!(csv.starts_with("x,y,pred\n"));
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().ends_with(",1"));
    }

    #[test]
    fn ppm_shape() {
        let img = boundary_ppm(|x, _| x, 1.0);
        assert!(img.starts_with(b"P6\n256 256\n255\n"));
        assert_eq!(img.len(), 15 + 3 * 256 * 256);
        // Left half blue, right half red on f = x.
        let body = &img[15..];
        assert_eq!(&body[..3], &[0, 0, 255]);
        assert_eq!(&body[3 * 255..3 * 256], &[255, 0, 0]);
    }

    #[test]
    fn positivity_probe_cases() {
        let zeros = positivity_probe(|_, _| -1.0, &[0.5, 1.0, 4.0], 200, 7);
        assert_eq!(zeros, vec![0.0, 0.0, 0.0]);
        // Linear functional: half of every circle is positive.
        let fracs = positivity_probe(|x, y| x + 2.0 * y, &[1.0, 3.0], 10_000, 7);
        for f in fracs {
            // 3 sigma for a fair coin over 10^4 draws.
            assert!((f - 0.5).abs() < 0.015, "{f}");
        }
    }

    #[test]
    fn fc_round_trip() {
        let cfg = TrainConfig { seed: 21, ..TrainConfig::new(Arch::FullyConnectedWidthD, 4) };
        if let Model::Fc(net) = init_model(&cfg) {
            let text = serialize_fc(&net);
            assert_eq!(deserialize_fc(&text).unwrap(), net);
        } else {
            panic!("wrong arch");
        }
        assert!(deserialize_fc("fcnet v1 depth=2\n").is_err());
    }
}

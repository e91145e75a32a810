use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use resnet_synth::compiler1d::{
    compile_1d, structural_breakpoints, Checkpoint, ConstructionTrace, PiecewiseConstant1D, Stage,
};
use resnet_synth::compilernd::{builtin_function, compile_nd, discretize, PiecewiseConstantND};
use resnet_synth::experiment::{
    boundary_csv, boundary_ppm, deserialize_fc, gen_dataset, positivity_probe,
    sample_decision_boundary, serialize_fc, Arch, FcNet, Model, TrainConfig,
};
use resnet_synth::net::ResNet;
use resnet_synth::serial;
use resnet_synth::verify::{
    exact_l1_error_1d, mc_l1_error, CheckRecord, VerificationReport,
};

#[derive(Parser)]
#[command(
    name = "resnet-synth",
    about = "Compile piecewise-constant targets into one-neuron-per-block residual networks",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compile a piecewise-constant target file into a network.
    Compile {
        /// Target JSON: {"knots": [...], "values": [...]} or
        /// {"axis_knots": [[...], ...], "cell_values": [...]}.
        #[arg(long)]
        target: PathBuf,
        /// Transition width; must satisfy 2*delta < smallest cell width.
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-stage snapshot networks and breakpoints.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate a network at one point.
    Eval {
        #[arg(long)]
        net: PathBuf,
        /// Comma-separated coordinates, e.g. "0.5" or "0.1,-0.2".
        #[arg(long, allow_hyphen_values = true)]
        point: String,
    },
    /// Check a compiled network against its target.
    Verify {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Exact piecewise-linear L1 integration (1-D targets; default).
        #[arg(long, conflicts_with = "mc")]
        exact: bool,
        /// Monte-Carlo L1 with this many samples over the target's box.
        #[arg(long)]
        mc: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Transition width used at compile time; inferred from the network
        /// when omitted.
        #[arg(long)]
        delta: Option<f64>,
        /// Write the machine-readable report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Sample a built-in function onto a piecewise-constant grid target.
    Discretize {
        /// Built-in name: unit-ball or gaussian.
        #[arg(long = "fn")]
        func: String,
        /// Per-axis ranges, e.g. "-1.5..1.5,-1.5..1.5".
        #[arg(long = "box", allow_hyphen_values = true)]
        bbox: String,
        /// Cell side length.
        #[arg(long)]
        res: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a small classifier on the disk-vs-annulus dataset.
    Train {
        #[arg(long, value_enum)]
        arch: ArchFlag,
        /// Hidden layers (fc) or residual blocks (resnet).
        #[arg(long)]
        depth: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample predictions in a disk and export them as CSV (and PPM).
    Boundary {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        radius: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        ppm: Option<PathBuf>,
    },
    /// Fraction of positive predictions on circles of given radii.
    Probe {
        #[arg(long)]
        net: PathBuf,
        /// Comma-separated radii, e.g. "1,2,4".
        #[arg(long, allow_hyphen_values = true)]
        radii: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchFlag {
    Fc,
    Resnet,
}

struct Failure {
    code: u8,
    msg: String,
}

fn usage<E: Display>(e: E) -> Failure {
    Failure { code: 2, msg: e.to_string() }
}

/// Numbers are printed rounded to 12 significant digits, shortest form.
fn sig(v: f64) -> String {
    if v == 0.0 {
        return "0.0".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let rounded: f64 = format!("{v:.11e}").parse().unwrap();
    format!("{rounded:?}")
}

fn read_file(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| usage(format!("{}: {e}", path.display())))
}

enum Target {
    OneD(PiecewiseConstant1D),
    Nd(PiecewiseConstantND),
}

fn load_target(path: &Path) -> Result<Target, Failure> {
    let text = read_file(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if value.get("axis_knots").is_some() {
        return PiecewiseConstantND::from_json(&text).map(Target::Nd).map_err(usage);
    }
    let knots: Vec<f64> = serde_json::from_value(
        value.get("knots").cloned().ok_or_else(|| usage("target needs knots or axis_knots"))?,
    )
    .map_err(usage)?;
    let values: Vec<f64> = serde_json::from_value(
        value.get("values").cloned().ok_or_else(|| usage("target needs values"))?,
    )
    .map_err(usage)?;
    PiecewiseConstant1D::new(knots, values).map(Target::OneD).map_err(usage)
}

enum AnyNet {
    Res(ResNet),
    Fc(FcNet),
}

impl AnyNet {
    fn scalar2(&self) -> Result<impl Fn(f64, f64) -> f64 + '_, Failure> {
        match self {
            AnyNet::Res(net) => {
                if net.dim() != 2 {
                    return Err(usage(format!("need a 2-input network, got {}", net.dim())));
                }
            }
            AnyNet::Fc(_) => {}
        }
        Ok(move |x: f64, y: f64| match self {
            AnyNet::Res(net) => net.eval_unchecked(&[x, y]),
            AnyNet::Fc(fc) => Model::Fc(fc.clone()).forward([x, y]),
        })
    }
}

fn load_net(path: &Path) -> Result<AnyNet, Failure> {
    let text = read_file(path)?;
    if text.trim_start().starts_with("fcnet") {
        deserialize_fc(&text).map(AnyNet::Fc).map_err(usage)
    } else {
        serial::deserialize(&text).map(AnyNet::Res).map_err(usage)
    }
}

fn parse_reals(s: &str) -> Result<Vec<f64>, Failure> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| usage(format!("bad number list '{s}': {e}")))
}

fn write_trace(dir: &Path, trace: &ConstructionTrace) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    for i in 0..trace.checkpoints.len() {
        let snap = serial::serialize(&trace.stage_net(i));
        write_file(&dir.join(format!("checkpoint-{i:03}.net")), snap.as_bytes())?;
    }
    let bps = serde_json::to_string(&trace.breakpoints).expect("plain array");
    write_file(&dir.join("breakpoints.json"), bps.as_bytes())
}

/// Recover the construction abscissae of a 1-D compiled network from its
/// fixed block layout (4M+4 blocks, adjustments last), and the transition
/// width from the shape of the third block (the initial descending hinge).
fn recover_1d(net: &ResNet, sup: f64, pieces: usize) -> Result<(Vec<f64>, f64), Failure> {
    let breakpoints = if net.out_weights()[0] == 0.0 {
        vec![]
    } else {
        structural_breakpoints(net, 3 * pieces + 4)
    };
    if sup == 0.0 {
        return Ok((breakpoints, 0.0));
    }
    let gain = net
        .blocks()
        .get(2)
        .map(|b| b.v_col()[0])
        .ok_or_else(|| usage("network too small to infer delta; pass --delta"))?;
    let delta = sup / (-1.0 - gain);
    if !(delta.is_finite() && delta > 0.0) {
        return Err(usage("cannot infer delta from this network; pass --delta"));
    }
    Ok((breakpoints, delta))
}

fn run(cmd: Cmd) -> Result<u8, Failure> {
    match cmd {
        Cmd::Compile { target, delta, out, trace } => {
            let (net, tr) = match load_target(&target)? {
                Target::OneD(t) => compile_1d(&t, delta).map_err(usage)?,
                Target::Nd(t) => compile_nd(&t, delta).map_err(usage)?,
            };
            write_file(&out, serial::serialize(&net).as_bytes())?;
            if let Some(dir) = trace {
                write_trace(&dir, &tr)?;
            }
            println!("compiled {} blocks", net.blocks().len());
            Ok(0)
        }
        Cmd::Eval { net, point } => {
            let pt = parse_reals(&point)?;
            let value = match load_net(&net)? {
                AnyNet::Res(n) => n.eval(&pt).map_err(usage)?,
                AnyNet::Fc(fc) => {
                    if pt.len() != 2 {
                        return Err(usage(format!("fc network needs 2 coordinates, got {}", pt.len())));
                    }
                    Model::Fc(fc).forward([pt[0], pt[1]])
                }
            };
            println!("{}", sig(value));
            Ok(0)
        }
        Cmd::Verify { net, target, exact: _, mc, seed, delta, report } => {
            let net = match load_net(&net)? {
                AnyNet::Res(n) => n,
                AnyNet::Fc(_) => return Err(usage("verify works on compiled networks")),
            };
            let target = load_target(&target)?;
            if let Some(n) = mc {
                let t = match target {
                    Target::Nd(t) => t,
                    Target::OneD(t) => PiecewiseConstantND::new(
                        vec![t.knots().to_vec()],
                        t.values().to_vec(),
                    )
                    .map_err(usage)?,
                };
                let lo: Vec<f64> = t.axis_knots().iter().map(|k| k[0]).collect();
                let hi: Vec<f64> = t.axis_knots().iter().map(|k| *k.last().unwrap()).collect();
                let (est, stderr) = mc_l1_error(&net, &t, &lo, &hi, n, seed).map_err(usage)?;
                println!("l1={} stderr={}", sig(est), sig(stderr));
                if let Some(path) = report {
                    let rep = VerificationReport {
                        checks: vec![],
                        l1_error: Some(est),
                        l1_bound: None,
                        mc_stderr: Some(stderr),
                    };
                    write_file(&path, rep.to_json().as_bytes())?;
                }
                return Ok(0);
            }
            let t = match target {
                Target::OneD(t) => t,
                Target::Nd(_) => {
                    return Err(usage("exact verification needs a 1-D target; use --mc N"))
                }
            };
            if net.dim() != 1 {
                return Err(usage("exact verification needs a 1-D network"));
            }
            let sup = t.sup_norm();
            let (breakpoints, inferred) = recover_1d(&net, sup, t.pieces())?;
            let delta = delta.unwrap_or(inferred);
            let checkpoints = if net.blocks().len() == 4 * t.pieces() + 4 {
                vec![Checkpoint { stage: Stage::TailClamp, blocks_len: 3 * t.pieces() + 4 }]
            } else {
                vec![]
            };
            let tr = ConstructionTrace {
                delta,
                h_inf: sup,
                checkpoints,
                breakpoints,
                net: net.clone(),
            };
            let l1 = exact_l1_error_1d(&net, &tr, &t).map_err(usage)?;
            let bound = 4.0 * t.pieces() as f64 * delta * sup;
            let pass = l1 <= bound + 1e-12 * (1.0 + bound);
            println!("l1={} bound={} {}", sig(l1), sig(bound), if pass { "PASS" } else { "FAIL" });
            if let Some(path) = report {
                let rep = VerificationReport {
                    checks: vec![CheckRecord {
                        name: "l1 within construction bound".into(),
                        pass,
                        measured: l1,
                        threshold: bound,
                        location: vec![],
                    }],
                    l1_error: Some(l1),
                    l1_bound: Some(bound),
                    mc_stderr: None,
                };
                write_file(&path, rep.to_json().as_bytes())?;
            }
            Ok(if pass { 0 } else { 1 })
        }
        Cmd::Discretize { func, bbox, res, out } => {
            let f = builtin_function(&func)
                .ok_or_else(|| usage(format!("unknown function '{func}'; try unit-ball or gaussian")))?;
            let mut lo = Vec::new();
            let mut hi = Vec::new();
            for part in bbox.split(',') {
                let (a, b) = part
                    .split_once("..")
                    .ok_or_else(|| usage(format!("bad range '{part}', expected lo..hi")))?;
                lo.push(a.trim().parse::<f64>().map_err(usage)?);
                hi.push(b.trim().parse::<f64>().map_err(usage)?);
            }
            for (a, b) in lo.iter().zip(&hi) {
                if res > b - a {
                    eprintln!("note: resolution {res} exceeds a side of the box; using one cell there");
                }
            }
            let t = discretize(&f, &lo, &hi, res).map_err(usage)?;
            write_file(&out, t.to_json().as_bytes())?;
            println!("discretized into {} cells", t.cell_count());
            Ok(0)
        }
        Cmd::Train { arch, depth, lr, momentum, epochs, batch_size, seed, out } => {
            let arch = match arch {
                ArchFlag::Fc => Arch::FullyConnectedWidthD,
                ArchFlag::Resnet => Arch::OneNeuronResNet,
            };
            let cfg = TrainConfig { arch, depth, lr, momentum, epochs, batch_size, seed };
            let data = gen_dataset(100, 200, seed);
            let (model, history) = resnet_synth::experiment::train(&cfg, &data)
                .map_err(|e| Failure { code: 1, msg: e.to_string() })?;
            println!("initial loss={}", sig(history[0]));
            for (i, loss) in history.iter().enumerate().skip(1) {
                println!("epoch {i} loss={}", sig(*loss));
            }
            let text = match &model {
                Model::Fc(fc) => serialize_fc(fc),
                Model::Res(r) => serial::serialize(&r.to_resnet()),
            };
            write_file(&out, text.as_bytes())?;
            Ok(0)
        }
        Cmd::Boundary { net, n, radius, seed, csv, ppm } => {
            let net = load_net(&net)?;
            let f = net.scalar2()?;
            let pts = sample_decision_boundary(&f, n, radius, seed);
            write_file(&csv, boundary_csv(&pts).as_bytes())?;
            if let Some(path) = ppm {
                write_file(&path, &boundary_ppm(&f, radius))?;
            }
            let pos = pts.iter().filter(|p| p.2).count();
            println!("sampled {n} points, {pos} positive");
            Ok(0)
        }
        Cmd::Probe { net, radii, n, seed } => {
            let net = load_net(&net)?;
            let f = net.scalar2()?;
            let radii = parse_reals(&radii)?;
            let fracs = positivity_probe(&f, &radii, n, seed);
            for (r, frac) in radii.iter().zip(fracs) {
                println!("r={} positive_fraction={}", sig(*r), sig(frac));
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse().cmd) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

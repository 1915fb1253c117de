#![allow(dead_code)]

use hrl_core::embed::{EncoderDims, EncoderParams};
use hrl_core::numcore::{Gradients, ParamSet, Tape, Tensor, Var};
use hrl_core::policy::{dqn_loss, drrn_loss, DqnParams, DrrnParams, MasterAction, QTransition, Transition};
use hrl_core::rng::{self, Rng};
use hrl_core::worldgen::{generate_world, WorldConfig};
use hrl_core::Result;
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely; central differences
/// cannot resolve them relative to rounding noise.
pub const FD_FLOOR: f64 = 1e-6;

pub type LossFn = Box<dyn Fn(&ParamSet) -> Result<(f64, Gradients)>>;

#[derive(Debug)]
pub struct FdReport {
    pub trials: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

/// Compares analytic gradients with central differences at `trials`
/// uniformly drawn scalar coordinates.
pub fn fd_check(params: &ParamSet, f: &LossFn, trials: usize, rng: &mut Rng) -> FdReport {
    let (_, grads) = f(params).expect("loss evaluates");
    let coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(n, t)| (0..t.len()).map(move |i| (n.to_string(), i)))
        .collect();
    let mut report = FdReport {
        trials,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for _ in 0..trials {
        let (name, i) = &coords[rng.gen_range(0..coords.len())];
        let analytic = grads.get(name).map_or(0.0, |g| g.data()[*i]);
        let mut p = params.snapshot();
        let x = p.value(name).data()[*i];
        p.get_mut(name).unwrap().data_mut()[*i] = x + FD_STEP;
        let up = f(&p).unwrap().0;
        p.get_mut(name).unwrap().data_mut()[*i] = x - FD_STEP;
        let down = f(&p).unwrap().0;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = format!("{name}[{i}]: analytic {analytic:.9e}, numeric {numeric:.9e}");
        }
    }
    report
}

fn random_tensor(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
fn off_zero_tensor(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let t = random_tensor(rows, cols, rng);
    t.map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

/// Reduces a tensor-valued node to a scalar through fixed random weights.
fn project(tape: &mut Tape, y: Var, rng_seed: u64) -> Result<Var> {
    let (r, c) = tape.value(y).shape();
    let w = random_tensor(r, c, &mut rng::substream(rng_seed, "projection"));
    let w = tape.constant(w);
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

fn run_tape(ps: &ParamSet, build: &dyn Fn(&mut Tape, &ParamSet) -> Result<Var>) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let loss = build(&mut tape, ps)?;
    Ok((tape.value(loss).item(), tape.backward(loss)?))
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

/// One case per differentiable tape op: parameters and a scalar loss.
pub fn op_cases(seed: u64) -> Vec<(&'static str, ParamSet, LossFn)> {
    let mut r = rng::substream(seed, "op cases");
    let shapes: Vec<(&'static str, Vec<(usize, usize)>, bool, Build)> = vec![
        ("matmul", vec![(3, 4), (4, 2)], false, |t, v| t.matmul(v[0], v[1])),
        ("add", vec![(3, 4), (3, 4)], false, |t, v| t.add(v[0], v[1])),
        ("sub", vec![(3, 4), (3, 4)], false, |t, v| t.sub(v[0], v[1])),
        ("mul", vec![(3, 4), (3, 4)], false, |t, v| t.mul(v[0], v[1])),
        ("add_row", vec![(3, 4), (1, 4)], false, |t, v| t.add_row(v[0], v[1])),
        ("scale", vec![(3, 4)], false, |t, v| Ok(t.scale(v[0], -1.7))),
        ("add_scalar", vec![(3, 4)], false, |t, v| Ok(t.add_scalar(v[0], 0.3))),
        ("concat", vec![(3, 4), (3, 2)], false, |t, v| t.concat(v[0], v[1])),
        ("tanh", vec![(3, 4)], false, |t, v| Ok(t.tanh(v[0]))),
        ("sigmoid", vec![(3, 4)], false, |t, v| Ok(t.sigmoid(v[0]))),
        ("softmax", vec![(3, 4)], false, |t, v| Ok(t.softmax(v[0]))),
        ("l2_normalize", vec![(3, 4)], false, |t, v| t.l2_normalize(v[0], "x")),
        ("dot", vec![(1, 5), (1, 5)], false, |t, v| t.dot(v[0], v[1])),
        ("row_dot", vec![(3, 4), (3, 4)], false, |t, v| t.row_dot(v[0], v[1])),
        ("cosine_similarity", vec![(1, 5), (1, 5)], false, |t, v| t.cosine_similarity(v[0], v[1])),
        ("transpose", vec![(3, 4)], false, |t, v| Ok(t.transpose(v[0]))),
        ("sum", vec![(3, 4)], false, |t, v| Ok(t.sum(v[0]))),
        ("mean", vec![(3, 4)], false, |t, v| Ok(t.mean(v[0]))),
        ("square", vec![(3, 4)], false, |t, v| Ok(t.square(v[0]))),
        ("relu", vec![(3, 4)], true, |t, v| Ok(t.relu(v[0]))),
        ("pick_cols", vec![(3, 4)], false, |t, v| t.pick_cols(v[0], &[2, 0, 3])),
    ];
    shapes
        .into_iter()
        .enumerate()
        .map(|(case, (name, shapes, kinked, build))| {
            let mut ps = ParamSet::new();
            let names: Vec<String> = (0..shapes.len()).map(|i| format!("x{i}")).collect();
            for (n, &(rows, cols)) in names.iter().zip(&shapes) {
                let t = if kinked {
                    off_zero_tensor(rows, cols, &mut r)
                } else {
                    random_tensor(rows, cols, &mut r)
                };
                ps.insert(n.clone(), t).unwrap();
            }
            let f: LossFn = Box::new(move |ps: &ParamSet| {
                run_tape(ps, &|tape, ps| {
                    let vars: Vec<Var> = names.iter().map(|n| ps.bind(tape, n)).collect();
                    let y = build(tape, &vars)?;
                    project(tape, y, case as u64)
                })
            });
            (name, ps, f)
        })
        .collect()
}

pub fn small_world_cfg() -> WorldConfig {
    WorldConfig {
        embed_dim: 8,
        n_images: 6,
        pool_size: 4,
        ..Default::default()
    }
}

/// The attentive encoder's ranking loss on one small world.
pub fn encoder_case(seed: u64) -> (ParamSet, LossFn) {
    let cfg = small_world_cfg();
    let world = generate_world(&cfg, seed).unwrap();
    let dims = EncoderDims {
        attention_dim: 5,
        text_hidden: vec![6],
        ..EncoderDims::for_embedding(cfg.embed_dim)
    };
    let enc = EncoderParams::init(dims.clone(), &mut rng::substream(seed, "encoder")).unwrap();
    let ps = enc.params.snapshot();
    // a wide margin keeps every hinge active, away from its kink
    let f: LossFn = Box::new(move |ps: &ParamSet| {
        let enc = EncoderParams::from_params(dims.clone(), ps.snapshot())?;
        let mut tape = Tape::new();
        let loss = enc.world_loss_on_tape(&mut tape, &world, &[0, 1, 2, 4], 5.0)?;
        Ok((tape.value(loss).item(), tape.backward(loss)?))
    });
    (ps, f)
}

fn random_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Weighted TD loss of a small master network against fixed targets.
pub fn dqn_case(seed: u64) -> (ParamSet, LossFn) {
    let mut r = rng::substream(seed, "dqn case");
    let dim = 9;
    let dqn = DqnParams::init(dim, &[7, 5], &mut r).unwrap();
    let batch: Vec<Transition> = (0..6)
        .map(|i| Transition {
            s: random_vec(dim, &mut r),
            action: if i % 2 == 0 { MasterAction::Ask } else { MasterAction::Guess },
            next_s: random_vec(dim, &mut r),
            reward: r.gen_range(-3.0..3.0),
            terminal: i == 5,
            next_ask_allowed: true,
        })
        .collect();
    let y: Vec<f64> = (0..6).map(|_| r.gen_range(-2.0..2.0)).collect();
    let w: Vec<f64> = (0..6).map(|_| r.gen_range(0.2..1.0)).collect();
    let ps = dqn.online.snapshot();
    let f: LossFn = Box::new(move |ps: &ParamSet| {
        let d = DqnParams::from_parts(dqn.net.clone(), ps.snapshot(), dqn.target.snapshot())?;
        let refs: Vec<&Transition> = batch.iter().collect();
        let lg = dqn_loss(&d, &refs, &y, &w)?;
        Ok((lg.loss, lg.grads))
    });
    (ps, f)
}

/// Weighted TD loss of small DRRN towers against fixed targets.
pub fn drrn_case(seed: u64) -> (ParamSet, LossFn) {
    let mut r = rng::substream(seed, "drrn case");
    let (k, qd) = (6, 5);
    let drrn = DrrnParams::init(k, qd, &[7, 4], &mut r).unwrap();
    let bank_rows: Vec<Vec<f64>> = (0..8).map(|_| random_vec(qd, &mut r)).collect();
    let bank = Tensor::from_rows(&bank_rows).unwrap();
    let batch: Vec<QTransition> = (0..5)
        .map(|i| QTransition {
            vc: random_vec(k, &mut r),
            question: i + 1,
            next_vc: random_vec(k, &mut r),
            reward: r.gen_range(-1.0..1.0),
            next_pool: vec![0, 7],
            terminal: false,
        })
        .collect();
    let y: Vec<f64> = (0..5).map(|_| r.gen_range(-2.0..2.0)).collect();
    let w: Vec<f64> = (0..5).map(|_| r.gen_range(0.2..1.0)).collect();
    let ps = drrn.params.snapshot();
    let f: LossFn = Box::new(move |ps: &ParamSet| {
        let d = DrrnParams::from_parts(drrn.state_net.clone(), drrn.action_net.clone(), ps.snapshot())?;
        let refs: Vec<&QTransition> = batch.iter().collect();
        let lg = drrn_loss(&d, &refs, &y, &w, &bank)?;
        Ok((lg.loss, lg.grads))
    });
    (ps, f)
}

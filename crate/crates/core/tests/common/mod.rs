//! Helpers shared by integration tests: seeded random tensors, a central
//! finite-difference gradient checker and a direct nested-loop convolution.
#![allow(dead_code, clippy::type_complexity, clippy::large_enum_variant)]

pub mod cases;

use mmbseg::engine::{ConvSpec, Mode, Tape, Var};
use mmbseg::exec::Recorder;
use mmbseg::params::{ParamKind, ParamStore};
use mmbseg::{Float, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Rounds through f32 so both precisions see the same point.
pub fn f32_exact(t: &Tensor<f64>) -> Tensor<f64> {
    t.cast::<f32>().cast::<f64>()
}

/// A differentiable computation over named inputs, runnable at any precision.
pub trait GradCase {
    fn inputs(&self) -> Vec<(String, Tensor<f64>)>;

    /// Builds the output on `tape` and returns it with one handle per input,
    /// in `inputs` order.
    fn run<T: Float>(&self, tape: &mut Tape<T>, values: &[Tensor<T>]) -> Result<(Var, Vec<Var>)>;
}

/// Largest relative error over inputs. Per input the error is
/// `|g_a - g_n|_2 / max(|g_a|_2, |g_n|_2, floor)` over sampled coordinates,
/// with the analytic gradient at precision `A` and the central difference
/// in f64.
/// Coordinates whose one-sided slopes disagree sit on a ReLU kink and are
/// redrawn. `floor` is `FD_SCALE_FLOOR` times the case's RMS gradient (scaled to the
/// sample count), so inputs whose true gradient vanishes, such as a shift
/// that a later batch norm removes, are judged against the case's gradient
/// scale instead of against f32 rounding noise.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub worst: f64,
    pub worst_input: String,
    /// Coordinates skipped because a ReLU kink lies within the step.
    pub kinks: usize,
}

pub const FD_STEP: f64 = 1e-6;
pub const FD_FLOOR: f64 = 1e-6;
pub const FD_SCALE_FLOOR: f64 = 1e-2;
/// One-sided slopes differing by more than this (relative) mark a kink.
pub const KINK_TOL: f64 = 1e-4;
pub const KINK_RETRIES: usize = 4;

pub fn check_gradients<A: Float, C: GradCase>(case: &C, seed: u64, coords: usize) -> Result<GradReport> {
    let mut r = rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    let inputs: Vec<(String, Tensor<f64>)> =
        case.inputs().into_iter().map(|(n, t)| (n, f32_exact(&t))).collect();
    let va: Vec<Tensor<A>> = inputs.iter().map(|(_, t)| t.cast()).collect();

    let mut tape = Tape::<A>::new();
    let (y, vars) = case.run(&mut tape, &va)?;
    let proj = f32_exact(&uniform(&mut r, tape.value(y).shape(), -1.0, 1.0));
    let pc = tape.constant(proj.cast());
    let prod = tape.mul(y, pc)?;
    let loss = tape.sum(prod);
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(&va)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| Tensor::zeros(t.shape().to_vec()), |g| g.cast()))
        .collect();

    let loss64 = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let (y, _) = case.run(&mut tape, vals)?;
        let y = tape.value(y);
        Ok(y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    };

    let mut vals: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let l0 = loss64(&vals)?;
    let mut pairs: Vec<Vec<(f64, f64)>> = Vec::new();
    let mut kinks = 0;
    for i in 0..vals.len() {
        let n = vals[i].numel();
        let order = rand::seq::index::sample(&mut r, n, n).into_vec();
        let mut got = Vec::new();
        for &j in order.iter().take(KINK_RETRIES * coords) {
            if got.len() == coords {
                break;
            }
            let x0 = vals[i].data()[j];
            vals[i].data_mut()[j] = x0 + FD_STEP;
            let lp = loss64(&vals)?;
            vals[i].data_mut()[j] = x0 - FD_STEP;
            let lm = loss64(&vals)?;
            vals[i].data_mut()[j] = x0;
            let (right, left) = ((lp - l0) / FD_STEP, (l0 - lm) / FD_STEP);
            if (right - left).abs() > KINK_TOL * right.abs().max(left.abs()).max(1.0) {
                kinks += 1;
                continue;
            }
            got.push((analytic[i].data()[j], (lp - lm) / (2.0 * FD_STEP)));
        }
        pairs.push(got);
    }
    let all: Vec<f64> = pairs.iter().flatten().map(|p| p.1).collect();
    let rms = (all.iter().map(|v| v * v).sum::<f64>() / all.len().max(1) as f64).sqrt();
    let mut report = GradReport { worst: 0.0, worst_input: String::new(), kinks };
    for (i, got) in pairs.iter().enumerate() {
        let diff: f64 = got.iter().map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = got.iter().map(|(a, _)| a * a).sum::<f64>().sqrt();
        let nn: f64 = got.iter().map(|(_, n)| n * n).sum::<f64>().sqrt();
        let floor = (FD_SCALE_FLOOR * rms * (got.len() as f64).sqrt()).max(FD_FLOOR);
        let err = diff / na.max(nn).max(floor);
        if err > report.worst || report.worst_input.is_empty() {
            report.worst = err;
            report.worst_input = inputs[i].0.clone();
        }
    }
    Ok(report)
}

/// Random parameters for every tensor in `shapes`, with BN gammas kept away
/// from zero so no branch is switched off.
pub fn random_store(
    shapes: &[(String, Vec<usize>, ParamKind)],
    rng: &mut impl Rng,
) -> Vec<(String, Tensor<f64>)> {
    shapes
        .iter()
        .map(|(name, shape, kind)| {
            let t = match kind {
                ParamKind::BnGamma => uniform(rng, shape, 0.5, 1.5),
                ParamKind::BnBeta | ParamKind::ConvBias => uniform(rng, shape, -0.2, 0.2),
                ParamKind::ConvWeight => {
                    let fan_in: usize = shape[1..].iter().product();
                    let a = (3.0 / fan_in as f64).sqrt();
                    uniform(rng, shape, -a, a)
                }
            };
            (name.clone(), t)
        })
        .collect()
}

/// Runs a model forward under a [`Recorder`] in training mode with the first
/// value as the (differentiable) input and the rest as named parameters.
pub fn run_model<T: Float>(
    tape: &mut Tape<T>,
    names: &[String],
    values: &[Tensor<T>],
    norms: &[(String, usize)],
    forward: impl FnOnce(&mut Recorder<'_, T>, &Var) -> Result<Var>,
) -> Result<(Var, Vec<Var>)> {
    let mut store = ParamStore::new();
    for (n, v) in names.iter().zip(values).skip(1) {
        let kind = if n.ends_with("/gamma") {
            ParamKind::BnGamma
        } else if n.ends_with("/beta") {
            ParamKind::BnBeta
        } else if n.ends_with("/bias") {
            ParamKind::ConvBias
        } else {
            ParamKind::ConvWeight
        };
        store.insert(n.clone(), v.clone(), kind);
    }
    for (p, c) in norms {
        store.insert_bn_stats(p.clone(), mmbseg::engine::RunningStats::new(*c));
    }
    let mut rec = Recorder::new(tape, &mut store, Mode::Train);
    let x = rec.tape.leaf(values[0].clone());
    let y = forward(&mut rec, &x)?;
    let bound: std::collections::HashMap<String, Var> = rec.bindings().into_iter().collect();
    let mut vars = vec![x];
    for n in &names[1..] {
        match bound.get(n) {
            Some(&v) => vars.push(v),
            None => panic!("parameter {n} not used by the forward pass"),
        }
    }
    Ok((y, vars))
}

/// Direct nested-loop convolution in f64 with zero padding.
pub fn conv_direct(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: &ConvSpec) -> Tensor<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (k, s, p, g) = (spec.kernel, spec.stride, spec.padding as isize, spec.groups);
    let cout = spec.out_channels;
    let oh = (h + 2 * spec.padding - k) / s + 1;
    let ow = (wd + 2 * spec.padding - k) / s + 1;
    let (cin_g, cout_g) = (cin / g, cout / g);
    let mut out = vec![0.0; n * cout * oh * ow];
    for b_ in 0..n {
        for co in 0..cout {
            let grp = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin_g {
                        let c = grp * cin_g + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p;
                                let ix = (ox * s + kx) as isize - p;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b_ * cin + c) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((co * cin_g + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b_ * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out).unwrap()
}

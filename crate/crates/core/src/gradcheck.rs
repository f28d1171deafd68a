//! Central-difference verification of the reverse pass, in 64-bit.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{attention_block, forward, is_running_stat, residual_block, Ctx, ModelConfig, NamedWeights, QTransform};
use crate::tensor::{Mode, RunningStats, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-4;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
pub const OP_COORDS: usize = 20;
pub const MODEL_COORDS: usize = 10;
/// Round-off floor of a central difference, relative to the checked value.
pub const FD_NOISE: f64 = 1e-6;
/// Redraws allowed per coordinate when a perturbation crosses a ReLU6 kink.
const MAX_REDRAWS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    /// Max over sampled coordinates of
    /// `|analytic − numeric| / max(|analytic|, |numeric|, FD_NOISE·max(1, |f|))`.
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub coords: usize,
    /// Coordinates redrawn because `x ± h` straddled a ReLU6 kink.
    pub redrawn: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl std::fmt::Display for GradCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<24} max rel err {:.3e} (tol {:.0e}, {} coords, {} redrawn)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tolerance,
            self.coords,
            self.redrawn
        )
    }
}

fn rel_err(analytic: f64, numeric: f64, value: f64) -> f64 {
    let floor = FD_NOISE * value.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Draws coordinates until one whose central difference stays on a
/// single linear piece of every ReLU6, then returns its error.
fn checked_coordinate(
    rng: &mut ChaCha8Rng,
    redrawn: &mut usize,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Result<(f64, f64, f64, u64, u64, u64)>,
) -> Result<f64> {
    for _ in 0..MAX_REDRAWS {
        let (analytic, up, down, s0, s_up, s_down) = draw(rng)?;
        if s0 == s_up && s0 == s_down {
            let numeric = (up - down) / (2.0 * FD_STEP);
            return Ok(rel_err(analytic, numeric, up.abs().max(down.abs())));
        }
        *redrawn += 1;
    }
    Ok(f64::INFINITY)
}

/// Reduces an output to a scalar through a fixed random projection so
/// every output element contributes to the checked gradient.
fn project(tape: &mut Tape<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(r.clone());
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

/// Checks `f` with respect to each of its tensor `inputs`.
pub fn check_inputs<F>(name: &str, inputs: &[Tensor<f64>], coords: usize, rng: &mut ChaCha8Rng, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let r = Tensor::randn(tape.shape(out), 1.0, rng);
    let loss = project(&mut tape, out, &r)?;
    tape.backward(loss)?;
    let grads: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let base = tape.kink_signature();

    let value = |xs: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let loss = project(&mut tape, out, &r)?;
        Ok((tape.value(loss).item(), tape.kink_signature()))
    };
    let mut worst: f64 = 0.0;
    let mut redrawn = 0;
    for _ in 0..coords {
        let err = checked_coordinate(rng, &mut redrawn, |rng| {
            let i = rng.random_range(0..inputs.len());
            let j = rng.random_range(0..inputs[i].len());
            let mut xs = inputs.to_vec();
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + FD_STEP;
            let (up, s_up) = value(&xs)?;
            xs[i].data_mut()[j] = x0 - FD_STEP;
            let (down, s_down) = value(&xs)?;
            Ok((grads[i].data()[j], up, down, base, s_up, s_down))
        })?;
        worst = worst.max(err);
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_err: worst,
        tolerance: OP_TOLERANCE,
        coords,
        redrawn,
    })
}

/// Checks `f` with respect to the trainable entries of `weights`; `f` runs
/// on a scratch copy and must bind parameters through the given context.
pub fn check_weights<F>(
    name: &str,
    weights: &NamedWeights<f64>,
    coords: usize,
    tolerance: f64,
    rng: &mut ChaCha8Rng,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Ctx<'_, f64, ChaCha8Rng>) -> Result<Var>,
{
    type Eval = (f64, Tensor<f64>, IndexMap<String, Tensor<f64>>, u64);
    let eval = |w: &NamedWeights<f64>, r: Option<&Tensor<f64>>, trainable: bool| -> Result<Eval> {
        let mut scratch = w.clone();
        let mut tape = Tape::new();
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = if trainable {
            Ctx::train(&mut tape, &mut scratch, Mode::Train, 0.0, &mut drng)
        } else {
            Ctx::frozen(&mut tape, &mut scratch, Mode::Train, 0.0, &mut drng)
        };
        let out = f(&mut ctx)?;
        let bound = ctx.into_bound();
        let shape = tape.shape(out).to_vec();
        let Some(r) = r else {
            return Ok((0.0, Tensor::zeros(&shape), IndexMap::new(), 0));
        };
        let loss = project(&mut tape, out, r)?;
        if trainable {
            tape.backward(loss)?;
        }
        let grads = bound
            .into_iter()
            .filter_map(|(n, v)| tape.grad(v).map(|g| (n, g.clone())))
            .collect();
        Ok((tape.value(loss).item(), Tensor::zeros(&shape), grads, tape.kink_signature()))
    };
    let (_, out_shape, _, _) = eval(weights, None, false)?;
    let r = Tensor::randn(out_shape.shape(), 1.0, rng);
    let (_, _, grads, base) = eval(weights, Some(&r), true)?;
    let names: Vec<&str> = weights.names().filter(|n| !is_running_stat(n)).collect();
    let mut worst: f64 = 0.0;
    let mut redrawn = 0;
    for _ in 0..coords {
        let err = checked_coordinate(rng, &mut redrawn, |rng| {
            let n = names[rng.random_range(0..names.len())];
            let j = rng.random_range(0..weights.get(n)?.len());
            let analytic = grads.get(n).map(|g| g.data()[j]).unwrap_or(0.0);
            let mut w = weights.clone();
            let x0 = w.get(n)?.data()[j];
            w.get_mut(n)?.data_mut()[j] = x0 + FD_STEP;
            let (up, _, _, s_up) = eval(&w, Some(&r), false)?;
            w.get_mut(n)?.data_mut()[j] = x0 - FD_STEP;
            let (down, _, _, s_down) = eval(&w, Some(&r), false)?;
            Ok((analytic, up, down, base, s_up, s_down))
        })?;
        worst = worst.max(err);
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_err: worst,
        tolerance,
        coords,
        redrawn,
    })
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Values in `[lo, hi)` kept at least `gap` away from every kink.
fn away_from(shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

fn insert(w: &mut NamedWeights<f64>, name: String, t: Tensor<f64>) -> Result<()> {
    w.insert(name, t)
}

fn conv_params(w: &mut NamedWeights<f64>, prefix: &str, shape: [usize; 5], bias: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let fan_in: usize = shape[..4].iter().product();
    insert(w, format!("{prefix}.weight"), Tensor::randn(&shape, (1.0 / fan_in as f64).sqrt(), rng))?;
    insert(w, format!("{prefix}.bias"), randn(&[bias], rng))
}

fn residual_params(prefix: &str, c: usize, rng: &mut ChaCha8Rng) -> Result<NamedWeights<f64>> {
    let mut w = NamedWeights::new();
    for unit in 1..=3 {
        let bn = format!("{prefix}.bn{unit}");
        insert(&mut w, format!("{bn}.gamma"), Tensor::rand_uniform(&[c], 0.5, 1.5, rng))?;
        insert(&mut w, format!("{bn}.beta"), Tensor::rand_uniform(&[c], -0.2, 0.2, rng))?;
        insert(&mut w, format!("{bn}.running_mean"), Tensor::zeros(&[c]))?;
        insert(&mut w, format!("{bn}.running_var"), Tensor::ones(&[c]))?;
        conv_params(&mut w, &format!("{prefix}.conv{unit}"), [3, 3, 3, c, c], c, rng)?;
    }
    Ok(w)
}

fn attention_params(prefix: &str, q: QTransform, c: usize, co: usize, rng: &mut ChaCha8Rng) -> Result<NamedWeights<f64>> {
    let mut w = NamedWeights::new();
    match q {
        QTransform::Pointwise => conv_params(&mut w, &format!("{prefix}.q"), [1, 1, 1, c, c], c, rng)?,
        QTransform::Upsample => conv_params(&mut w, &format!("{prefix}.q"), [3, 3, 3, c, c], c, rng)?,
    }
    conv_params(&mut w, &format!("{prefix}.k"), [1, 1, 1, c, c], c, rng)?;
    conv_params(&mut w, &format!("{prefix}.v"), [1, 1, 1, c, c], c, rng)?;
    conv_params(&mut w, &format!("{prefix}.o"), [1, 1, 1, c, co], co, rng)?;
    Ok(w)
}

/// Every differentiable tape operation plus the composite blocks.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let k = OP_COORDS;
    let mut out = Vec::new();

    let a = randn(&[3, 4], rng);
    let b = randn(&[3, 4], rng);
    out.push(check_inputs("add", &[a.clone(), b.clone()], k, rng, |t, v| t.add(v[0], v[1]))?);
    out.push(check_inputs("mul", &[a.clone(), b], k, rng, |t, v| t.mul(v[0], v[1]))?);
    out.push(check_inputs("scale", std::slice::from_ref(&a), k, rng, |t, v| Ok(t.scale(v[0], -1.7)))?);
    out.push(check_inputs("sum", std::slice::from_ref(&a), k, rng, |t, v| Ok(t.sum(v[0])))?);
    out.push(check_inputs("reshape", &[a], k, rng, |t, v| t.reshape(v[0], &[2, 6]))?);

    let x = away_from(&[2, 3, 4], -2.0, 8.0, &[0.0, 6.0], 1e-2, rng);
    out.push(check_inputs("relu6", &[x], k, rng, |t, v| Ok(t.relu6(v[0])))?);
    let x = randn(&[4, 5], rng);
    out.push(check_inputs("dropout", &[x], k, rng, |t, v| {
        t.dropout(v[0], 0.3, Mode::Train, &mut ChaCha8Rng::seed_from_u64(11))
    })?);

    let x = randn(&[1, 2, 3, 4, 5], rng);
    out.push(check_inputs("unfold", &[x], k, rng, |t, v| t.unfold(v[0]))?);
    let x = randn(&[1, 24, 5], rng);
    out.push(check_inputs("fold", &[x], k, rng, |t, v| t.fold(v[0], (2, 3, 4)))?);

    for (name, xs, ks, stride, pad) in [
        ("conv3d k3 s1 p1", [2, 4, 4, 4, 2], [3, 3, 3, 2, 3], 1, 1),
        ("conv3d k3 s2 p1", [1, 4, 4, 4, 2], [3, 3, 3, 2, 3], 2, 1),
        ("conv3d k3 s1 p0", [1, 4, 3, 4, 2], [3, 3, 3, 2, 2], 1, 0),
        ("conv3d k1", [1, 2, 3, 2, 3], [1, 1, 1, 3, 2], 1, 0),
    ] {
        let inputs = [randn(&xs, rng), randn(&ks, rng), randn(&[ks[4]], rng)];
        out.push(check_inputs(name, &inputs, k, rng, |t, v| t.conv3d(v[0], v[1], Some(v[2]), stride, pad))?);
    }
    let inputs = [randn(&[1, 2, 2, 2, 3], rng), randn(&[3, 3, 3, 2, 3], rng), randn(&[2], rng)];
    out.push(check_inputs("deconv3d", &inputs, k, rng, |t, v| t.deconv3d(v[0], v[1], Some(v[2]), 2))?);

    let inputs = [
        randn(&[2, 2, 3, 2, 4], rng),
        Tensor::rand_uniform(&[4], 0.5, 1.5, rng),
        randn(&[4], rng),
    ];
    for mode in [Mode::Train, Mode::Eval] {
        let name = if mode == Mode::Train { "batchnorm train" } else { "batchnorm eval" };
        let running = RunningStats {
            mean: randn(&[4], rng),
            var: Tensor::rand_uniform(&[4], 0.5, 2.0, rng),
        };
        out.push(check_inputs(name, &inputs, k, rng, |t, v| {
            let mut stats = running.clone();
            t.batchnorm(v[0], v[1], v[2], &mut stats, mode)
        })?);
    }

    let inputs = [randn(&[5, 7], rng), randn(&[7, 3], rng)];
    out.push(check_inputs("matmul", &inputs, k, rng, |t, v| t.matmul(v[0], v[1]))?);
    let inputs = [randn(&[2, 4, 3], rng), randn(&[2, 3, 5], rng)];
    out.push(check_inputs("bmm", &inputs, k, rng, |t, v| t.bmm(v[0], v[1], false))?);
    let inputs = [randn(&[2, 4, 3], rng), randn(&[2, 5, 3], rng)];
    out.push(check_inputs("bmm transposed", &inputs, k, rng, |t, v| t.bmm(v[0], v[1], true))?);
    let x = randn(&[3, 4, 5], rng);
    out.push(check_inputs("softmax", &[x], k, rng, |t, v| t.softmax(v[0], 1))?);
    let x = randn(&[2, 6, 4], rng);
    out.push(check_inputs("split_heads", &[x], k, rng, |t, v| t.split_heads(v[0], 2))?);
    let x = randn(&[4, 6, 2], rng);
    out.push(check_inputs("merge_heads", &[x], k, rng, |t, v| t.merge_heads(v[0], 2))?);
    let x = randn(&[2, 2, 2, 2, 3], rng);
    let labels: Vec<usize> = (0..16).map(|_| rng.random_range(0..3)).collect();
    out.push(check_inputs("cross_entropy", &[x], k, rng, |t, v| t.cross_entropy(v[0], &labels))?);

    let x = randn(&[2, 2, 2, 2, 3], rng);
    let w = residual_params("t.res", 3, rng)?;
    out.push(check_weights("residual_block", &w, k, OP_TOLERANCE, rng, |ctx| {
        let xv = ctx.tape.constant(x.clone());
        residual_block(ctx, xv, "t.res")
    })?);
    for (name, q, co) in [
        ("attention pointwise", QTransform::Pointwise, 4),
        ("attention upsample", QTransform::Upsample, 2),
    ] {
        let x = randn(&[1, 2, 2, 2, 4], rng);
        let w = attention_params("t.attn", q, 4, co, rng)?;
        out.push(check_weights(name, &w, k, OP_TOLERANCE, rng, |ctx| {
            let xv = ctx.tape.constant(x.clone());
            Ok(attention_block(ctx, xv, "t.attn", q, 2)?.y)
        })?);
    }
    Ok(out)
}

/// The full network on an 8³ single-channel input with a 2-class head.
pub fn model_check(seed: u64) -> Result<GradCheck> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        num_classes: 2,
        dropout_p: 0.0,
        attention_levels: 3,
        ..ModelConfig::toy()
    };
    let weights = crate::nn::build_model::<f64, _>(&config, rng)?;
    let x = Tensor::rand_uniform(&[2, 8, 8, 8, 1], 0.0, 1.0, rng);
    check_weights("model 8^3", &weights, MODEL_COORDS, MODEL_TOLERANCE, rng, |ctx| {
        let xv = ctx.tape.constant(x.clone());
        forward(ctx, &config, xv)
    })
}

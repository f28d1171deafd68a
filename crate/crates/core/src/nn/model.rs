use rand::Rng;

use super::config::ModelConfig;
use super::layers::{attention_block, downsample, residual_block, Ctx, QTransform};
use super::weights::NamedWeights;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Mode, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Gaussian with variance `2 / fan_in`, for kernels fed by ReLU6.
    He { fan_in: usize },
    /// Gaussian with variance `1 / fan_in`, for kernels fed by unrectified signals.
    Lecun { fan_in: usize },
    Zeros,
    Ones,
}

/// One entry of a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Leading `<stage>` component of the name.
    pub fn stage(&self) -> &str {
        self.name.split('.').next().unwrap_or("")
    }
}

struct Layout(Vec<ParamSpec>);

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, shape, init });
    }

    fn conv(&mut self, prefix: &str, k: usize, cin: usize, cout: usize) {
        let fan_in = k * k * k * cin;
        self.push(format!("{prefix}.weight"), vec![k, k, k, cin, cout], Init::Lecun { fan_in });
        self.push(format!("{prefix}.bias"), vec![cout], Init::Zeros);
    }

    fn rectified_conv(&mut self, prefix: &str, k: usize, cin: usize, cout: usize) {
        let fan_in = k * k * k * cin;
        self.push(format!("{prefix}.weight"), vec![k, k, k, cin, cout], Init::He { fan_in });
        self.push(format!("{prefix}.bias"), vec![cout], Init::Zeros);
    }

    fn deconv(&mut self, prefix: &str, cin: usize, cout: usize) {
        // kernel [3,3,3,Cout,Cin]; each output voxel sees the deconv input
        let fan_in = 27 * cin;
        self.push(format!("{prefix}.weight"), vec![3, 3, 3, cout, cin], Init::Lecun { fan_in });
        self.push(format!("{prefix}.bias"), vec![cout], Init::Zeros);
    }

    fn bn(&mut self, prefix: &str, c: usize) {
        self.push(format!("{prefix}.gamma"), vec![c], Init::Ones);
        self.push(format!("{prefix}.beta"), vec![c], Init::Zeros);
        self.push(format!("{prefix}.running_mean"), vec![c], Init::Zeros);
        self.push(format!("{prefix}.running_var"), vec![c], Init::Ones);
    }

    fn residual(&mut self, prefix: &str, cin: usize, cout: usize) {
        let mut c = cin;
        for unit in 1..=3 {
            self.bn(&format!("{prefix}.bn{unit}"), c);
            self.rectified_conv(&format!("{prefix}.conv{unit}"), 3, c, cout);
            c = cout;
        }
        if cin != cout {
            self.conv(&format!("{prefix}.proj"), 1, cin, cout);
        }
    }

    fn attention(&mut self, prefix: &str, q: QTransform, cin: usize, ck: usize, cv: usize, co: usize) {
        match q {
            QTransform::Pointwise => self.conv(&format!("{prefix}.q"), 1, cin, ck),
            QTransform::Upsample => self.deconv(&format!("{prefix}.q"), cin, ck),
        }
        self.conv(&format!("{prefix}.k"), 1, cin, ck);
        self.conv(&format!("{prefix}.v"), 1, cin, cv);
        self.conv(&format!("{prefix}.o"), 1, cv, co);
    }
}

/// Full parameter layout of the network, in build order.
pub fn layout(config: &ModelConfig) -> Result<Vec<ParamSpec>> {
    config.validate()?;
    let mut l = Layout(Vec::new());
    let enc = config.enc_blocks;
    l.conv("stem.in.conv", 3, config.in_channels, config.channels(0));
    for level in 0..enc {
        let c = config.channels(level);
        l.residual(&format!("enc{level}.res"), c, c);
        l.conv(&format!("enc{level}.down.conv"), 3, c, config.channels(level + 1));
    }
    let cb = config.channels(enc);
    l.attention(
        "end.attn",
        QTransform::Pointwise,
        cb,
        config.key_width(cb),
        config.value_width(cb),
        cb,
    );
    for j in 0..config.dec_blocks {
        let (cin, cout) = (config.channels(enc - j), config.channels(enc - j - 1));
        if config.decoder_attends(j) {
            l.attention(
                &format!("dec{j}.attn"),
                QTransform::Upsample,
                cin,
                config.key_width(cin),
                config.value_width(cin),
                cout,
            );
        } else {
            l.deconv(&format!("dec{j}.up.deconv"), cin, cout);
        }
        l.residual(&format!("dec{j}.res"), cout, cout);
    }
    l.conv("head.out.conv", 1, config.channels(0), config.num_classes);
    Ok(l.0)
}

/// Initializes every parameter: fan-in-scaled Gaussian kernels, zero
/// biases, unit BN scale, zero BN shift.
pub fn build_model<T: Scalar, R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<NamedWeights<T>> {
    let mut w = NamedWeights::new();
    for spec in layout(config)? {
        let t = match spec.init {
            Init::He { fan_in } => Tensor::randn(&spec.shape, (2.0 / fan_in as f64).sqrt(), rng),
            Init::Lecun { fan_in } => Tensor::randn(&spec.shape, (1.0 / fan_in as f64).sqrt(), rng),
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::ones(&spec.shape),
        };
        w.insert(spec.name, t)?;
    }
    Ok(w)
}

/// Per-stage trainable parameter counts, in build order, plus the total.
pub fn param_counts(config: &ModelConfig) -> Result<(Vec<(String, usize)>, usize)> {
    let mut stages: Vec<(String, usize)> = Vec::new();
    for spec in layout(config)? {
        if super::weights::is_running_stat(&spec.name) {
            continue;
        }
        match stages.last_mut() {
            Some((s, n)) if s == spec.stage() => *n += spec.numel(),
            _ => stages.push((spec.stage().to_string(), spec.numel())),
        }
    }
    let total = stages.iter().map(|(_, n)| n).sum();
    Ok((stages, total))
}

/// Runs the network on `input` (`[N,D,H,W,in_channels]`), returning class logits
/// `[N,D,H,W,num_classes]`.
pub fn forward<T: Scalar, R: Rng + ?Sized>(
    ctx: &mut Ctx<'_, T, R>,
    config: &ModelConfig,
    input: Var,
) -> Result<Var> {
    let [_, d, h, w, c] = ctx.tape.value(input).dims5()?;
    let div = config.spatial_divisor();
    if d % div != 0 || h % div != 0 || w % div != 0 {
        return Err(Error::invalid(
            "forward",
            format!("spatial extents {d}×{h}×{w} not divisible by {div}"),
        ));
    }
    if c != config.in_channels {
        return Err(Error::invalid(
            "forward",
            format!("input has {c} channels, model expects {}", config.in_channels),
        ));
    }
    let enc = config.enc_blocks;
    let mut x = ctx.conv(input, "stem.in.conv", 1, 1)?;
    let mut skips = Vec::with_capacity(enc);
    for level in 0..enc {
        x = residual_block(ctx, x, &format!("enc{level}.res"))?;
        skips.push(x);
        x = downsample(ctx, x, &format!("enc{level}.down"))?;
    }
    x = attention_block(ctx, x, "end.attn", QTransform::Pointwise, config.heads)?.y;
    for j in 0..config.dec_blocks {
        let up = if config.decoder_attends(j) {
            attention_block(ctx, x, &format!("dec{j}.attn"), QTransform::Upsample, config.heads)?.y
        } else {
            ctx.deconv(x, &format!("dec{j}.up.deconv"))?
        };
        let skip = skips[enc - 1 - j];
        if ctx.tape.shape(up) != ctx.tape.shape(skip) {
            return Err(Error::shape("skip sum", ctx.tape.shape(up), ctx.tape.shape(skip)));
        }
        x = ctx.tape.add(up, skip)?;
        x = residual_block(ctx, x, &format!("dec{j}.res"))?;
    }
    ctx.conv(x, "head.out.conv", 1, 0)
}

/// Inference-only logits; batch-norm statistics are left untouched.
pub fn infer_logits<T: Scalar, R: Rng + ?Sized>(
    weights: &NamedWeights<T>,
    config: &ModelConfig,
    input: &Tensor<T>,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut w = weights.clone();
    let mut ctx = Ctx::frozen(&mut tape, &mut w, Mode::Eval, config.dropout_p, rng);
    let x = ctx.tape.constant(input.clone());
    let y = forward(&mut ctx, config, x)?;
    Ok(tape.value(y).clone())
}

/// Per-voxel argmax over the trailing class axis; ties go to the lowest class.
pub fn argmax_classes<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}

/// Class ids for every voxel of `patch`, shaped `[N, D, H, W]` in row-major order.
pub fn predict<T: Scalar, R: Rng + ?Sized>(
    weights: &NamedWeights<T>,
    config: &ModelConfig,
    patch: &Tensor<T>,
    rng: &mut R,
) -> Result<Vec<u8>> {
    Ok(argmax_classes(&infer_logits(weights, config, patch, rng)?))
}

use indexmap::IndexMap;
use rand::Rng;

use super::weights::NamedWeights;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Mode, RunningStats, Tape, Var};

/// Binds a weight set to a tape for one forward pass.
///
/// Parameters are placed on the tape lazily, the first time a layer asks
/// for them, and remembered by name so gradients can be read back after
/// `backward`. Batch-norm running statistics are read from, and in train
/// mode written back to, the weight set.
pub struct Ctx<'a, T, R: ?Sized> {
    pub tape: &'a mut Tape<T>,
    weights: &'a mut NamedWeights<T>,
    params: IndexMap<String, Var>,
    pub mode: Mode,
    pub rng: &'a mut R,
    pub dropout_p: f64,
    trainable: bool,
}

impl<'a, T: Scalar, R: Rng + ?Sized> Ctx<'a, T, R> {
    /// Context whose parameters require gradients.
    pub fn train(
        tape: &'a mut Tape<T>,
        weights: &'a mut NamedWeights<T>,
        mode: Mode,
        dropout_p: f64,
        rng: &'a mut R,
    ) -> Self {
        Self {
            tape,
            weights,
            params: IndexMap::new(),
            mode,
            rng,
            dropout_p,
            trainable: true,
        }
    }

    /// Context for inference: nothing is recorded for the reverse pass.
    pub fn frozen(
        tape: &'a mut Tape<T>,
        weights: &'a mut NamedWeights<T>,
        mode: Mode,
        dropout_p: f64,
        rng: &'a mut R,
    ) -> Self {
        Self {
            trainable: false,
            ..Self::train(tape, weights, mode, dropout_p, rng)
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = self.weights.get(name)?.clone();
        let v = self.tape.leaf(value, self.trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound so far, in binding order.
    pub fn bound(&self) -> &IndexMap<String, Var> {
        &self.params
    }

    pub fn into_bound(self) -> IndexMap<String, Var> {
        self.params
    }

    pub fn conv(&mut self, x: Var, prefix: &str, stride: usize, padding: usize) -> Result<Var> {
        let k = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.tape.conv3d(x, k, Some(b), stride, padding)
    }

    pub fn deconv(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let k = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.tape.deconv3d(x, k, Some(b), 2)
    }

    pub fn batchnorm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let (mk, vk) = (format!("{prefix}.running_mean"), format!("{prefix}.running_var"));
        let mut stats = RunningStats {
            mean: self.weights.get(&mk)?.clone(),
            var: self.weights.get(&vk)?.clone(),
        };
        let y = self.tape.batchnorm(x, gamma, beta, &mut stats, self.mode)?;
        if self.mode == Mode::Train {
            *self.weights.get_mut(&mk)? = stats.mean;
            *self.weights.get_mut(&vk)? = stats.var;
        }
        Ok(y)
    }
}

/// Three pre-activated units (BN → ReLU6 → 3³ conv) summed with the
/// identity path, which gets a 1×1×1 projection when widths differ.
pub fn residual_block<T: Scalar, R: Rng + ?Sized>(
    ctx: &mut Ctx<'_, T, R>,
    x: Var,
    prefix: &str,
) -> Result<Var> {
    let mut h = x;
    for unit in 1..=3 {
        h = ctx.batchnorm(h, &format!("{prefix}.bn{unit}"))?;
        h = ctx.tape.relu6(h);
        h = ctx.conv(h, &format!("{prefix}.conv{unit}"), 1, 1)?;
    }
    let proj = format!("{prefix}.proj");
    let identity = if ctx.weights.contains(&format!("{proj}.weight")) {
        ctx.conv(x, &proj, 1, 0)?
    } else {
        x
    };
    ctx.tape.add(h, identity)
}

/// Stride-2 3³ convolution: halves every spatial extent.
pub fn downsample<T: Scalar, R: Rng + ?Sized>(
    ctx: &mut Ctx<'_, T, R>,
    x: Var,
    prefix: &str,
) -> Result<Var> {
    let [_, d, h, w, _] = ctx.tape.value(x).dims5()?;
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(
            "downsample",
            format!("spatial extents {d}×{h}×{w} must be even"),
        ));
    }
    ctx.conv(x, &format!("{prefix}.conv"), 2, 1)
}

/// How an attention block produces its queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QTransform {
    /// 1×1×1 conv, stride 1: queries on the input grid.
    Pointwise,
    /// 3×3×3 deconv, stride 2: queries on the doubled grid.
    Upsample,
}

/// Intermediate values of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    /// `[N, Lq, c_k]`
    pub q: Var,
    /// `[N, L, c_k]`
    pub k: Var,
    /// `[N, L, c_v]`
    pub v: Var,
    /// `[N·heads, Lq, L]`, after softmax and before dropout.
    pub a: Var,
    /// `[N, Lq, c_v]`
    pub o: Var,
    /// `[N, Dq, Hq, Wq, C_O]`
    pub y: Var,
}

/// Multi-head scaled dot-product attention over unfolded voxel sequences.
///
/// `Q = qT(x)`, `K = conv1(x)`, `V = conv1(x)`; per head
/// `A = softmax(Q Kᵀ / √(c_k/heads))`, `O = A V`; heads are concatenated
/// and `Y = conv1(fold(O))`. Dropout applies to `A` in train mode.
pub fn attention_block<T: Scalar, R: Rng + ?Sized>(
    ctx: &mut Ctx<'_, T, R>,
    x: Var,
    prefix: &str,
    q_transform: QTransform,
    heads: usize,
) -> Result<Attention> {
    let q_sp = match q_transform {
        QTransform::Pointwise => ctx.conv(x, &format!("{prefix}.q"), 1, 0)?,
        QTransform::Upsample => ctx.deconv(x, &format!("{prefix}.q"))?,
    };
    let k_sp = ctx.conv(x, &format!("{prefix}.k"), 1, 0)?;
    let v_sp = ctx.conv(x, &format!("{prefix}.v"), 1, 0)?;
    let [_, dq, hq, wq, ck] = ctx.tape.value(q_sp).dims5()?;
    let cv = ctx.tape.value(v_sp).dims5()?[4];
    if heads == 0 || ck % heads != 0 || cv % heads != 0 {
        return Err(Error::Config(format!(
            "c_k={ck}, c_v={cv} not divisible by {heads} heads"
        )));
    }
    let q = ctx.tape.unfold(q_sp)?;
    let k = ctx.tape.unfold(k_sp)?;
    let v = ctx.tape.unfold(v_sp)?;
    let qh = ctx.tape.split_heads(q, heads)?;
    let kh = ctx.tape.split_heads(k, heads)?;
    let vh = ctx.tape.split_heads(v, heads)?;
    let scores = ctx.tape.bmm(qh, kh, true)?;
    let scale = T::one() / T::from_usize_lossy(ck / heads).sqrt();
    let scores = ctx.tape.scale(scores, scale);
    let a = ctx.tape.softmax(scores, 2)?;
    let (p, mode) = (ctx.dropout_p, ctx.mode);
    let a_drop = ctx.tape.dropout(a, p, mode, ctx.rng)?;
    let oh = ctx.tape.bmm(a_drop, vh, false)?;
    let o = ctx.tape.merge_heads(oh, heads)?;
    let folded = ctx.tape.fold(o, (dq, hq, wq))?;
    let y = ctx.conv(folded, &format!("{prefix}.o"), 1, 0)?;
    Ok(Attention { q, k, v, a, o, y })
}

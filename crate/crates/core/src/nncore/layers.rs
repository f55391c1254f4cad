use super::{BoundParams, Init, NnError, ParamId, ParamStore, Real, Result, Tape, Var};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply<T: Real>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Self::Relu => tape.relu(x),
            Self::Identity => x,
        }
    }
}

/// `x W^T + b` with `W (out, in)`.
#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl LinearParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.init(format!("{name}.w"), &[dout, din], init, true, rng);
        let b = bias.then(|| store.init(format!("{name}.b"), &[dout], Init::Zeros, false, rng));
        Self { w, b, din, dout }
    }

    pub fn he<T: Real>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        Self::new(store, name, din, dout, Init::He { fan_in: din, gain: 1.0 }, true, rng)
    }
}

pub fn linear_layer<T: Real>(tape: &mut Tape<T>, bp: &BoundParams, p: &LinearParams, x: Var) -> Result<Var> {
    tape.linear(x, bp.var(p.w), p.b.map(|b| bp.var(b)))
}

/// 2-D convolution with square kernel.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let init = Init::He {
            fan_in: cin * k * k,
            gain,
        };
        let w = store.init(format!("{name}.w"), &[cout, cin, k, k], init, true, rng);
        let b = bias.then(|| store.init(format!("{name}.b"), &[cout], Init::Zeros, false, rng));
        Self { w, b, stride, pad: k / 2 }
    }
}

pub fn conv_layer<T: Real>(tape: &mut Tape<T>, bp: &BoundParams, p: &ConvParams, x: Var) -> Result<Var> {
    tape.conv2d(x, bp.var(p.w), p.b.map(|b| bp.var(b)), p.stride, p.pad)
}

/// Two-layer residual branch with an optional projection shortcut.
#[derive(Debug, Clone, Copy)]
pub enum ResBlockParams {
    Conv {
        a: ConvParams,
        b: ConvParams,
        proj: Option<ConvParams>,
    },
    Fc {
        a: LinearParams,
        b: LinearParams,
        proj: Option<LinearParams>,
    },
}

/// Gain applied to the last layer of a residual branch at init.
const RESIDUAL_TAIL_GAIN: f64 = 0.1;

impl ResBlockParams {
    /// 3x3 convolutional block at stride 1.
    pub fn conv<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let a = ConvParams::new(store, &format!("{name}.a"), cin, cout, 3, 1, true, 1.0, rng);
        let b = ConvParams::new(store, &format!("{name}.b"), cout, cout, 3, 1, true, RESIDUAL_TAIL_GAIN, rng);
        let proj = (cin != cout).then(|| ConvParams::new(store, &format!("{name}.proj"), cin, cout, 1, 1, false, 1.0, rng));
        Self::Conv { a, b, proj }
    }

    pub fn fc<T: Real>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let a = LinearParams::he(store, &format!("{name}.a"), din, dout, rng);
        let b = LinearParams::new(
            store,
            &format!("{name}.b"),
            dout,
            dout,
            Init::He {
                fan_in: dout,
                gain: RESIDUAL_TAIL_GAIN,
            },
            true,
            rng,
        );
        let proj = (din != dout).then(|| {
            let init = Init::He { fan_in: din, gain: 1.0 };
            LinearParams::new(store, &format!("{name}.proj"), din, dout, init, false, rng)
        });
        Self::Fc { a, b, proj }
    }
}

/// `act(shortcut(x) + b(relu(a(x))))`.
pub fn resnet_block<T: Real>(tape: &mut Tape<T>, bp: &BoundParams, p: &ResBlockParams, x: Var, act: Activation) -> Result<Var> {
    let (branch, skip) = match p {
        ResBlockParams::Conv { a, b, proj } => {
            let h = conv_layer(tape, bp, a, x)?;
            let h = tape.relu(h);
            let h = conv_layer(tape, bp, b, h)?;
            let s = match proj {
                Some(pr) => conv_layer(tape, bp, pr, x)?,
                None => x,
            };
            (h, s)
        }
        ResBlockParams::Fc { a, b, proj } => {
            let h = linear_layer(tape, bp, a, x)?;
            let h = tape.relu(h);
            let h = linear_layer(tape, bp, b, h)?;
            let s = match proj {
                Some(pr) => linear_layer(tape, bp, pr, x)?,
                None => x,
            };
            (h, s)
        }
    };
    let sum = tape.add(skip, branch)?;
    Ok(act.apply(tape, sum))
}

/// Two-level feature pyramid merge producing the fine resolution.
#[derive(Debug, Clone, Copy)]
pub struct FpnParams {
    pub lateral_coarse: ConvParams,
    pub lateral_fine: ConvParams,
    pub smooth: ConvParams,
}

impl FpnParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c_coarse: usize, c_fine: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            lateral_coarse: ConvParams::new(store, &format!("{name}.lat_coarse"), c_coarse, c_out, 1, 1, false, 1.0, rng),
            lateral_fine: ConvParams::new(store, &format!("{name}.lat_fine"), c_fine, c_out, 1, 1, true, 1.0, rng),
            smooth: ConvParams::new(store, &format!("{name}.smooth"), c_out, c_out, 3, 1, true, 1.0, rng),
        }
    }
}

/// `smooth(project(up2(coarse)) + project(fine))`. The coarse projection
/// has no bias and commutes with nearest upsampling, so it runs first.
pub fn fpn_merge<T: Real>(tape: &mut Tape<T>, bp: &BoundParams, p: &FpnParams, coarse: Var, fine: Var) -> Result<Var> {
    let (cs, fs) = (tape.shape(coarse).to_vec(), tape.shape(fine).to_vec());
    if cs.len() != 3 || fs.len() != 3 || cs[1] * 2 != fs[1] || cs[2] * 2 != fs[2] {
        return Err(NnError::Shape {
            op: "fpn_merge",
            detail: format!("coarse {cs:?}, fine {fs:?}"),
        });
    }
    let c = conv_layer(tape, bp, &p.lateral_coarse, coarse)?;
    let c = tape.upsample2x(c)?;
    let f = conv_layer(tape, bp, &p.lateral_fine, fine)?;
    let s = tape.add(c, f)?;
    conv_layer(tape, bp, &p.smooth, s)
}

/// Bias-free single-head projections.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttentionParams {
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
}

impl CrossAttentionParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize, d: usize, rng: &mut impl Rng) -> Self {
        let init = Init::He { fan_in: c, gain: 0.5_f64.sqrt() };
        Self {
            wq: LinearParams::new(store, &format!("{name}.q"), c, d, init, false, rng),
            wk: LinearParams::new(store, &format!("{name}.k"), c, d, init, false, rng),
            wv: LinearParams::new(store, &format!("{name}.v"), c, d, init, false, rng),
        }
    }
}

pub struct AttentionOutput {
    /// `(N, d)`.
    pub out: Var,
    /// `(N, K)`, rows sum to one.
    pub weights: Var,
}

/// Attention of each query row `(N, C)` over its own `K` references, given
/// as consecutive rows of `refs (N*K, C)`.
pub fn cross_attention<T: Real>(
    tape: &mut Tape<T>,
    bp: &BoundParams,
    p: &CrossAttentionParams,
    query: Var,
    refs: Var,
) -> Result<AttentionOutput> {
    let n = tape.shape(query)[0];
    if tape.shape(refs)[0] == 0 || n == 0 || !tape.shape(refs)[0].is_multiple_of(n) {
        return Err(NnError::EmptyRefs("cross_attention"));
    }
    let q = linear_layer(tape, bp, &p.wq, query)?;
    let k = linear_layer(tape, bp, &p.wk, refs)?;
    let v = linear_layer(tape, bp, &p.wv, refs)?;
    let scale = T::from_f64(1.0 / (p.wq.dout as f64).sqrt());
    let s = tape.group_dot(q, k, scale)?;
    let weights = tape.softmax_rows(s)?;
    let out = tape.group_weighted_sum(weights, v)?;
    Ok(AttentionOutput { out, weights })
}

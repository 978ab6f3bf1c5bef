//! Convolutions, conditional instance normalization and residual cells.

use crate::autodiff::{Graph, Var};
use crate::tensor::{lit, Real};

use super::params::{Init, ParamId};

/// Bound parameter variables plus what every layer needs at run time.
pub(crate) struct Ctx<'a, T: Real> {
    pub g: &'a mut Graph<T>,
    pub vars: &'a [Var],
    pub eps: T,
}

impl<T: Real> Ctx<'_, T> {
    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// `gain` scales the fan-in initialization; the bias starts at zero.
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        gain: f64,
    ) -> Conv {
        let std = gain / ((ci * k * k) as f64).sqrt();
        Conv {
            w: init.normal(format!("{name}.weight"), &[co, ci, k, k], std),
            b: init.constant(format!("{name}.bias"), &[co], 0.0),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let (w, b) = (cx.p(self.w), cx.p(self.b));
        cx.g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Depthwise {
    pub w: ParamId,
    pub b: ParamId,
}

impl Depthwise {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, c: usize, k: usize) -> Depthwise {
        Depthwise {
            w: init.normal(format!("{name}.weight"), &[c, 1, k, k], 1.0 / k as f64),
            b: init.constant(format!("{name}.bias"), &[c], 0.0),
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let (w, b) = (cx.p(self.w), cx.p(self.b));
        cx.g.depthwise(x, w, Some(b))
    }
}

/// One normalization site. Conditional sites read scale and location from a
/// per-site linear map of the speaker embedding; unconditional ones learn a
/// plain per-channel affine.
#[derive(Debug, Clone)]
pub(crate) enum CinSite {
    Conditional { w: ParamId, b: ParamId, channels: usize },
    Unconditional { gamma: ParamId, beta: ParamId, channels: usize },
}

impl CinSite {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        channels: usize,
        embed_dim: usize,
        conditional: bool,
    ) -> CinSite {
        if conditional {
            CinSite::Conditional {
                w: init.normal(format!("{name}.cin.weight"), &[embed_dim, 2 * channels], 0.02),
                b: init.constant(format!("{name}.cin.bias"), &[2 * channels], 0.0),
                channels,
            }
        } else {
            CinSite::Unconditional {
                gamma: init.constant(format!("{name}.norm.gamma"), &[1, channels], 1.0),
                beta: init.constant(format!("{name}.norm.beta"), &[1, channels], 0.0),
                channels,
            }
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            CinSite::Conditional { channels, .. } | CinSite::Unconditional { channels, .. } => *channels,
        }
    }

    pub fn is_conditional(&self) -> bool {
        matches!(self, CinSite::Conditional { .. })
    }

    /// `(gamma, delta)` of shape `(b, c)`.
    pub fn affine<T: Real>(&self, cx: &mut Ctx<'_, T>, emb: Var, batch: usize) -> (Var, Var) {
        match *self {
            CinSite::Conditional { w, b, channels } => {
                let (w, b) = (cx.p(w), cx.p(b));
                let out = cx.g.linear(emb, w, Some(b));
                let raw_gamma = cx.g.narrow1(out, 0, channels);
                let gamma = cx.g.add_scalar(raw_gamma, T::one());
                let delta = cx.g.narrow1(out, channels, channels);
                (gamma, delta)
            }
            CinSite::Unconditional { gamma, beta, .. } => {
                let (g0, b0) = (cx.p(gamma), cx.p(beta));
                (cx.g.repeat_batch(g0, batch), cx.g.repeat_batch(b0, batch))
            }
        }
    }

    /// Unconditional sites ignore `emb`; it is never touched on their path.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var, emb: Var) -> Var {
        let batch = cx.g.shape(x)[0];
        let n = cx.g.instance_norm(x, cx.eps);
        let (gamma, delta) = self.affine(cx, emb, batch);
        cx.g.channel_affine(n, gamma, delta)
    }
}

/// Bottom-up cell: `x + 0.1 * conv(swish(cin(conv(swish(cin(x))))))`.
#[derive(Debug, Clone)]
pub(crate) struct EncoderCell {
    n1: CinSite,
    c1: Conv,
    n2: CinSite,
    c2: Conv,
}

impl EncoderCell {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, c: usize, embed_dim: usize) -> EncoderCell {
        EncoderCell {
            n1: CinSite::new(init, &format!("{name}.n1"), c, embed_dim, true),
            c1: Conv::new(init, &format!("{name}.c1"), c, c, 3, 1, 1.0),
            n2: CinSite::new(init, &format!("{name}.n2"), c, embed_dim, true),
            c2: Conv::new(init, &format!("{name}.c2"), c, c, 3, 1, 1.0),
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var, emb: Var) -> Var {
        let mut h = self.n1.forward(cx, x, emb);
        h = cx.g.swish(h);
        h = self.c1.forward(cx, h);
        h = self.n2.forward(cx, h, emb);
        h = cx.g.swish(h);
        h = self.c2.forward(cx, h);
        let r = cx.g.scale(h, lit(0.1));
        cx.g.add(x, r)
    }

    pub fn sites(&self) -> [&CinSite; 2] {
        [&self.n1, &self.n2]
    }
}

/// Top-down cell with an inverted bottleneck and a depthwise 5x5 kernel.
#[derive(Debug, Clone)]
pub(crate) struct DecoderCell {
    n0: CinSite,
    expand: Conv,
    n1: CinSite,
    dw: Depthwise,
    n2: CinSite,
    project: Conv,
    n3: CinSite,
}

impl DecoderCell {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        c: usize,
        expand: usize,
        embed_dim: usize,
        conditional: bool,
    ) -> DecoderCell {
        let e = c * expand;
        DecoderCell {
            n0: CinSite::new(init, &format!("{name}.n0"), c, embed_dim, conditional),
            expand: Conv::new(init, &format!("{name}.expand"), c, e, 1, 1, 1.0),
            n1: CinSite::new(init, &format!("{name}.n1"), e, embed_dim, conditional),
            dw: Depthwise::new(init, &format!("{name}.dw"), e, 5),
            n2: CinSite::new(init, &format!("{name}.n2"), e, embed_dim, conditional),
            project: Conv::new(init, &format!("{name}.project"), e, c, 1, 1, 1.0),
            n3: CinSite::new(init, &format!("{name}.n3"), c, embed_dim, conditional),
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var, emb: Var) -> Var {
        let mut h = self.n0.forward(cx, x, emb);
        h = self.expand.forward(cx, h);
        h = self.n1.forward(cx, h, emb);
        h = cx.g.swish(h);
        h = self.dw.forward(cx, h);
        h = self.n2.forward(cx, h, emb);
        h = cx.g.swish(h);
        h = self.project.forward(cx, h);
        h = self.n3.forward(cx, h, emb);
        let r = cx.g.scale(h, lit(0.1));
        cx.g.add(x, r)
    }

    pub fn sites(&self) -> [&CinSite; 4] {
        [&self.n0, &self.n1, &self.n2, &self.n3]
    }
}

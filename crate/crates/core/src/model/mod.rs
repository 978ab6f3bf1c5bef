//! The hierarchical encoder, split prior and decoder.
//!
//! Latent groups are numbered `1..=L` in top-down (generative) order. The
//! top-down trunk that produces the prior of level `l` passes through
//! speaker-conditioned normalization only after level `K`, so priors of
//! levels `1..=K` are computed without ever reading the speaker label.

mod config;
mod layers;
mod params;

pub use config::{ModelConfig, ScaleSpec};
pub use params::{ParamId, ParamStore};

use layers::{CinSite, Conv, Ctx, DecoderCell, EncoderCell};
use params::Init;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::features::{MelSegment, SpeakerId, MEL_BINS};
use crate::seed::Noise;
use crate::tensor::{lit, Real, Tensor};

/// Mean and log-variance of a diagonal Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian<T: Real> {
    pub mean: Tensor<T>,
    pub log_variance: Tensor<T>,
}

impl<T: Real> DiagonalGaussian<T> {
    pub fn new(mean: Tensor<T>, log_variance: Tensor<T>) -> Result<Self> {
        if mean.shape() != log_variance.shape() {
            return Err(Error::invalid(format!(
                "mean shape {:?} differs from log-variance shape {:?}",
                mean.shape(),
                log_variance.shape()
            )));
        }
        Ok(DiagonalGaussian { mean, log_variance })
    }

    pub fn standard(shape: &[usize]) -> Self {
        DiagonalGaussian {
            mean: Tensor::zeros(shape),
            log_variance: Tensor::zeros(shape),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.mean.shape()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.mean.bit_eq(&other.mean) && self.log_variance.bit_eq(&other.log_variance)
    }
}

/// Reparameterized draw `mean + exp(log_variance / 2) * eps`, `eps ~ N(0, I)`.
pub fn sample_latents<T: Real>(g: &DiagonalGaussian<T>, seed: u64) -> Tensor<T> {
    let eps: Tensor<T> = Noise::new(seed).standard_normal(g.shape());
    let half: T = lit(0.5);
    let data = g
        .mean
        .data()
        .iter()
        .zip(g.log_variance.data())
        .zip(eps.data())
        .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
        .collect();
    Tensor::from_vec(g.shape(), data).expect("shape")
}

/// Latent groups `z_1..z_L` (each batched) plus the split index.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentHierarchy<T: Real> {
    pub groups: Vec<Tensor<T>>,
    pub split: usize,
}

impl<T: Real> LatentHierarchy<T> {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Groups `1..=K`.
    pub fn invariant(&self) -> &[Tensor<T>] {
        &self.groups[..self.split.min(self.groups.len())]
    }

    /// Groups `K+1..=L`.
    pub fn dependent(&self) -> &[Tensor<T>] {
        &self.groups[self.split.min(self.groups.len())..]
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.split == other.split
            && self.groups.len() == other.groups.len()
            && self.groups.iter().zip(&other.groups).all(|(a, b)| a.bit_eq(b))
    }
}

/// Per-level priors and posteriors with the chosen latents.
#[derive(Debug, Clone)]
pub struct Encoding<T: Real> {
    pub priors: Vec<DiagonalGaussian<T>>,
    pub posteriors: Vec<DiagonalGaussian<T>>,
    pub z: LatentHierarchy<T>,
}

/// Mean of the Gaussian reconstruction likelihood over the `80 x T` grid.
#[derive(Debug, Clone)]
pub struct DecoderOutput<T: Real> {
    /// Shape `(b, 1, 80, T)`.
    pub mean: Tensor<T>,
    pub log_std: T,
}

/// How the top-down pass picks each latent group.
pub(crate) enum Pick<'a> {
    /// Use these values; stop (after computing the next prior) when they run out.
    Given(&'a [Var]),
    /// Posterior for levels `<= posterior_upto`, prior above; draws from
    /// `noise` or takes means when it is `None`.
    Infer {
        feats: &'a [Var],
        posterior_upto: usize,
        noise: Option<&'a mut Noise>,
    },
}

pub(crate) struct GaussVars {
    pub mean: Var,
    pub log_var: Var,
}

pub(crate) struct TopDown {
    pub priors: Vec<GaussVars>,
    pub posteriors: Vec<Option<GaussVars>>,
    pub z: Vec<Var>,
    /// Decoder mean, present once all `L` groups are available.
    pub output: Option<Var>,
}

/// Graph nodes of the per-sample objective terms, each of shape `(b,)`.
pub(crate) struct ElboVars {
    pub kl: Vec<Var>,
    pub distortion: Var,
}

#[derive(Debug, Clone)]
struct Arch {
    embed: ParamId,
    stem: Conv,
    stem_down: Vec<Conv>,
    enc_cells: Vec<EncoderCell>,
    /// `enc_down[s]` takes bottom-up features from scale `s + 1` to `s`.
    enc_down: Vec<Vec<Conv>>,
    h0: ParamId,
    prior_heads: Vec<Option<Conv>>,
    post_heads: Vec<Conv>,
    combiners: Vec<Conv>,
    /// `trunk[i]` runs after level `i + 1`.
    trunk: Vec<DecoderCell>,
    post_cell: DecoderCell,
    post_reduce: Conv,
    post_norm: CinSite,
    out_conv: Conv,
    sites: Vec<(String, CinSite)>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    config: ModelConfig,
    vocab_size: usize,
    params: ParamStore<T>,
    arch: Arch,
}

fn log2(v: usize) -> usize {
    v.trailing_zeros() as usize
}

impl<T: Real> Model<T> {
    /// Builds a model with seeded initial parameters.
    pub fn init(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::config("vocabulary must contain at least one speaker"));
        }
        let mut params = ParamStore::default();
        let arch = build_arch(&config, vocab_size, &mut Init { store: &mut params, seed });
        Ok(Model {
            config,
            vocab_size,
            params,
            arch,
        })
    }

    /// Rebuilds a model from named tensors, e.g. out of a checkpoint.
    pub fn from_named(config: ModelConfig, vocab_size: usize, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut m = Model::init(config, vocab_size, 0)?;
        if named.len() != m.params.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, found {}",
                m.params.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            m.params.set(&name, t)?;
        }
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut params = ParamStore::default();
        for (n, t) in self.params.names().iter().zip(self.params.tensors()) {
            params.add(n.clone(), t.cast());
        }
        Model {
            config: self.config.clone(),
            vocab_size: self.vocab_size,
            params,
            arch: self.arch.clone(),
        }
    }

    /// Names of the normalization sites, indexable by [`Model::apply_cin`].
    pub fn cin_sites(&self) -> Vec<(&str, usize, bool)> {
        self.arch
            .sites
            .iter()
            .map(|(n, s)| (n.as_str(), s.channels(), s.is_conditional()))
            .collect()
    }

    /// Zeros the final layer of every posterior head so that `q = p`.
    pub fn zero_posterior_residuals(&mut self) {
        for head in &self.arch.post_heads {
            self.params.tensor_mut(head.w).data_mut().fill(T::zero());
            self.params.tensor_mut(head.b).data_mut().fill(T::zero());
        }
    }

    pub fn check_speakers(&self, ys: &[SpeakerId]) -> Result<()> {
        if let Some(y) = ys.iter().find(|y| y.index() >= self.vocab_size) {
            return Err(Error::invalid(format!(
                "unknown speaker id {y} (model knows {} speakers)",
                self.vocab_size
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor<T>, ys: &[SpeakerId]) -> Result<()> {
        let want = [ys.len(), 1, MEL_BINS, self.config.segment_frames];
        if x.shape() != want || ys.is_empty() {
            return Err(Error::invalid(format!(
                "input has shape {:?}, expected {:?}",
                x.shape(),
                want
            )));
        }
        self.check_speakers(ys)
    }

    fn check_latents(&self, z: &[Tensor<T>], batch: usize) -> Result<()> {
        for (i, t) in z.iter().enumerate() {
            let s = self.config.latent_shape(i + 1);
            let want = [batch, s[0], s[1], s[2]];
            if t.shape() != want {
                return Err(Error::invalid(format!(
                    "latent group {} has shape {:?}, expected {:?}",
                    i + 1,
                    t.shape(),
                    want
                )));
            }
        }
        Ok(())
    }

    fn with_graph<R>(&self, f: impl FnOnce(&mut Ctx<'_, T>) -> R) -> R {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let mut cx = Ctx {
            g: &mut g,
            vars: &vars,
            eps: lit(self.config.cin_epsilon),
        };
        f(&mut cx)
    }

    pub(crate) fn ctx<'a>(&self, g: &'a mut Graph<T>, vars: &'a [Var]) -> Ctx<'a, T> {
        Ctx {
            g,
            vars,
            eps: lit(self.config.cin_epsilon),
        }
    }

    /// Speaker embedding `onehot(y) @ W`, shape `(b, e)`.
    pub(crate) fn embed(&self, cx: &mut Ctx<'_, T>, ys: &[SpeakerId]) -> Var {
        let mut onehot = Tensor::zeros(&[ys.len(), self.vocab_size]);
        for (i, y) in ys.iter().enumerate() {
            onehot.data_mut()[i * self.vocab_size + y.index()] = T::one();
        }
        let oh = cx.g.constant(onehot);
        let w = cx.p(self.arch.embed);
        cx.g.linear(oh, w, None)
    }

    /// Bottom-up pass; returns one feature map per level (index `l - 1`).
    pub(crate) fn bottom_up(&self, cx: &mut Ctx<'_, T>, x: Var, emb: Var) -> Vec<Var> {
        let a = &self.arch;
        let mut h = a.stem.forward(cx, x);
        for conv in &a.stem_down {
            h = cx.g.swish(h);
            h = conv.forward(cx, h);
        }
        let scales = self.config.level_scales();
        let l_total = self.config.latent_groups;
        let mut feats = vec![h; l_total];
        for l in (1..=l_total).rev() {
            if l < l_total && scales[l - 1] != scales[l] {
                for conv in &a.enc_down[scales[l - 1]] {
                    h = cx.g.swish(h);
                    h = conv.forward(cx, h);
                }
            }
            h = a.enc_cells[l - 1].forward(cx, h, emb);
            feats[l - 1] = h;
        }
        feats
    }

    /// Top-down pass shared by training, inference, prior queries and decoding.
    pub(crate) fn top_down(&self, cx: &mut Ctx<'_, T>, batch: usize, emb: Var, pick: Pick<'_>) -> TopDown {
        let h0 = cx.p(self.arch.h0);
        let h = cx.g.repeat_batch(h0, batch);
        self.top_down_from(cx, h, emb, pick)
    }

    /// Top-down pass starting from an explicit top state `h: (b, c, h1, w)`.
    fn top_down_from(&self, cx: &mut Ctx<'_, T>, mut h: Var, emb: Var, mut pick: Pick<'_>) -> TopDown {
        let a = &self.arch;
        let cfg = &self.config;
        let scales = cfg.level_scales();
        let zc = cfg.latent_channels;
        let (lo, hi): (T, T) = (lit(cfg.log_var_min), lit(cfg.log_var_max));
        let mut out = TopDown {
            priors: Vec::new(),
            posteriors: Vec::new(),
            z: Vec::new(),
            output: None,
        };
        for l in 1..=cfg.latent_groups {
            if l > 1 {
                let (prev, cur) = (cfg.scales[scales[l - 2]].factor, cfg.scales[scales[l - 1]].factor);
                for _ in 0..log2(prev / cur) {
                    h = cx.g.upsample2x(h);
                }
                h = a.trunk[l - 2].forward(cx, h, emb);
            }
            let prior = match &a.prior_heads[l - 1] {
                None => {
                    let hs = cx.g.shape(h);
                    let shape = [hs[0], zc, hs[2], hs[3]];
                    GaussVars {
                        mean: cx.g.constant(Tensor::zeros(&shape)),
                        log_var: cx.g.constant(Tensor::zeros(&shape)),
                    }
                }
                Some(head) => {
                    let act = cx.g.swish(h);
                    let pr = head.forward(cx, act);
                    let mean = cx.g.narrow1(pr, 0, zc);
                    let raw = cx.g.narrow1(pr, zc, zc);
                    GaussVars {
                        mean,
                        log_var: cx.g.clamp(raw, lo, hi),
                    }
                }
            };
            let (z, posterior) = match &mut pick {
                Pick::Given(zs) => match zs.get(l - 1) {
                    Some(&z) => (z, None),
                    None => {
                        out.priors.push(prior);
                        return out;
                    }
                },
                Pick::Infer {
                    feats,
                    posterior_upto,
                    noise,
                } => {
                    let chosen = if l <= *posterior_upto {
                        let cat = cx.g.concat1(&[h, feats[l - 1]]);
                        let act = cx.g.swish(cat);
                        let d = a.post_heads[l - 1].forward(cx, act);
                        let dm = cx.g.narrow1(d, 0, zc);
                        let dlv = cx.g.narrow1(d, zc, zc);
                        let mean = cx.g.add(prior.mean, dm);
                        let sum = cx.g.add(prior.log_var, dlv);
                        let log_var = cx.g.clamp(sum, lo, hi);
                        GaussVars { mean, log_var }
                    } else {
                        GaussVars {
                            mean: prior.mean,
                            log_var: prior.log_var,
                        }
                    };
                    let z = match noise {
                        Some(n) => {
                            let eps = n.standard_normal(cx.g.shape(chosen.mean));
                            cx.g.reparam(chosen.mean, chosen.log_var, eps)
                        }
                        None => chosen.mean,
                    };
                    let post = (l <= *posterior_upto).then_some(chosen);
                    (z, post)
                }
            };
            out.priors.push(prior);
            out.posteriors.push(posterior);
            out.z.push(z);
            let c = a.combiners[l - 1].forward(cx, z);
            h = cx.g.add(h, c);
        }
        let mut h = a.post_cell.forward(cx, h, emb);
        h = a.post_reduce.forward(cx, h);
        let finest = cfg.scales.last().expect("validated").factor;
        for _ in 0..log2(finest) {
            h = cx.g.upsample2x(h);
        }
        h = a.post_norm.forward(cx, h, emb);
        h = cx.g.swish(h);
        out.output = Some(a.out_conv.forward(cx, h));
        out
    }

    /// Builds the per-sample KL terms and distortion for a batch, drawing
    /// posterior samples level by level from `noise`.
    pub(crate) fn elbo_graph(&self, cx: &mut Ctx<'_, T>, x: &Tensor<T>, ys: &[SpeakerId], noise: &mut Noise) -> Result<ElboVars> {
        self.check_input(x, ys)?;
        let batch = ys.len();
        let emb = self.embed(cx, ys);
        let xv = cx.g.constant(x.clone());
        let feats = self.bottom_up(cx, xv, emb);
        let td = self.top_down(
            cx,
            batch,
            emb,
            Pick::Infer {
                feats: &feats,
                posterior_upto: self.config.latent_groups,
                noise: Some(noise),
            },
        );
        let kl = td
            .priors
            .iter()
            .zip(&td.posteriors)
            .map(|(p, q)| {
                let q = q.as_ref().expect("posterior at every level");
                cx.g.kl_gaussian(q.mean, q.log_var, p.mean, p.log_var)
            })
            .collect();
        let distortion = cx.g.gaussian_nll(
            td.output.expect("complete pass"),
            x.clone(),
            lit(self.config.decoder_log_std),
        );
        Ok(ElboVars { kl, distortion })
    }

    fn collect(cx: &Ctx<'_, T>, g: &GaussVars) -> DiagonalGaussian<T> {
        DiagonalGaussian {
            mean: cx.g.value(g.mean).clone(),
            log_variance: cx.g.value(g.log_var).clone(),
        }
    }

    fn encode_with(&self, x: &Tensor<T>, ys: &[SpeakerId], noise: Option<&mut Noise>) -> Result<Encoding<T>> {
        self.check_input(x, ys)?;
        Ok(self.with_graph(|cx| {
            let emb = self.embed(cx, ys);
            let xv = cx.g.constant(x.clone());
            let feats = self.bottom_up(cx, xv, emb);
            let td = self.top_down(
                cx,
                ys.len(),
                emb,
                Pick::Infer {
                    feats: &feats,
                    posterior_upto: self.config.latent_groups,
                    noise,
                },
            );
            Encoding {
                priors: td.priors.iter().map(|p| Self::collect(cx, p)).collect(),
                posteriors: td
                    .posteriors
                    .iter()
                    .map(|q| Self::collect(cx, q.as_ref().expect("posterior")))
                    .collect(),
                z: LatentHierarchy {
                    groups: td.z.iter().map(|&z| cx.g.value(z).clone()).collect(),
                    split: self.config.split,
                },
            }
        }))
    }

    /// Posterior inference with reparameterized sampling seeded by `seed`.
    /// `x` has shape `(b, 1, 80, T)` and `ys` one speaker per sample.
    pub fn encode(&self, x: &Tensor<T>, ys: &[SpeakerId], seed: u64) -> Result<Encoding<T>> {
        let mut noise = Noise::new(seed);
        self.encode_with(x, ys, Some(&mut noise))
    }

    /// Posterior inference threading means through the chain.
    pub fn encode_mean(&self, x: &Tensor<T>, ys: &[SpeakerId]) -> Result<Encoding<T>> {
        self.encode_with(x, ys, None)
    }

    /// Prior of level `level` (1-based) given `z_prefix = z_1..z_{level-1}`.
    pub fn prior_params(&self, z_prefix: &[Tensor<T>], ys: &[SpeakerId], level: usize) -> Result<DiagonalGaussian<T>> {
        if level == 0 || level > self.config.latent_groups {
            return Err(Error::invalid(format!(
                "level {level} outside 1..={}",
                self.config.latent_groups
            )));
        }
        if z_prefix.len() != level - 1 {
            return Err(Error::invalid(format!(
                "prior of level {level} needs {} preceding groups, got {}",
                level - 1,
                z_prefix.len()
            )));
        }
        if ys.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        self.check_speakers(ys)?;
        self.check_latents(z_prefix, ys.len())?;
        if level == 1 {
            let s = self.config.latent_shape(1);
            return Ok(DiagonalGaussian::standard(&[ys.len(), s[0], s[1], s[2]]));
        }
        Ok(self.with_graph(|cx| {
            let emb = self.embed(cx, ys);
            let zs: Vec<Var> = z_prefix.iter().map(|z| cx.g.constant(z.clone())).collect();
            let td = self.top_down(cx, ys.len(), emb, Pick::Given(&zs));
            Self::collect(cx, td.priors.last().expect("prior computed"))
        }))
    }

    /// Likelihood mean for a complete hierarchy.
    pub fn decode(&self, z: &LatentHierarchy<T>, ys: &[SpeakerId]) -> Result<DecoderOutput<T>> {
        if z.len() != self.config.latent_groups {
            return Err(Error::invalid(format!(
                "hierarchy has {} groups, model needs {}",
                z.len(),
                self.config.latent_groups
            )));
        }
        if ys.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        self.check_speakers(ys)?;
        self.check_latents(&z.groups, ys.len())?;
        let mean = self.with_graph(|cx| {
            let emb = self.embed(cx, ys);
            let zs: Vec<Var> = z.groups.iter().map(|t| cx.g.constant(t.clone())).collect();
            let td = self.top_down(cx, ys.len(), emb, Pick::Given(&zs));
            cx.g.value(td.output.expect("complete hierarchy")).clone()
        });
        Ok(DecoderOutput {
            mean,
            log_std: lit(self.config.decoder_log_std),
        })
    }

    /// `decode(encode_mean(x, y), y)`.
    pub fn reconstruct_mean(&self, x: &Tensor<T>, ys: &[SpeakerId]) -> Result<Tensor<T>> {
        let enc = self.encode_mean(x, ys)?;
        Ok(self.decode(&enc.z, ys)?.mean)
    }

    /// Conversion pass: posterior (with `source` speakers) for levels
    /// `1..=K`, target-conditioned prior above, decoder under `target`.
    /// Means throughout unless `seed` is given.
    pub fn convert_latents(
        &self,
        x: &Tensor<T>,
        source: &[SpeakerId],
        target: &[SpeakerId],
        seed: Option<u64>,
    ) -> Result<(LatentHierarchy<T>, Tensor<T>)> {
        self.check_input(x, source)?;
        self.convert_impl(x, source, target, seed, false)
    }

    /// Like [`Model::convert_latents`] for inputs of any width that is a
    /// multiple of the coarsest scale factor. The learned top state is tiled
    /// along time to cover the input.
    pub fn convert_latents_wide(
        &self,
        x: &Tensor<T>,
        source: &[SpeakerId],
        target: &[SpeakerId],
        seed: Option<u64>,
    ) -> Result<(LatentHierarchy<T>, Tensor<T>)> {
        let coarse = self.config.scales[0].factor;
        if x.shape().len() != 4
            || x.dim(0) != source.len()
            || x.dim(1) != 1
            || x.dim(2) != MEL_BINS
            || x.dim(3) == 0
            || x.dim(3) % coarse != 0
        {
            return Err(Error::invalid(format!(
                "input has shape {:?}; width must be a positive multiple of {coarse}",
                x.shape()
            )));
        }
        if source.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        self.check_speakers(source)?;
        self.convert_impl(x, source, target, seed, true)
    }

    fn convert_impl(
        &self,
        x: &Tensor<T>,
        source: &[SpeakerId],
        target: &[SpeakerId],
        seed: Option<u64>,
        wide: bool,
    ) -> Result<(LatentHierarchy<T>, Tensor<T>)> {
        if target.len() != source.len() {
            return Err(Error::invalid("source and target speaker lists differ in length"));
        }
        self.check_speakers(target)?;
        let mut noise = seed.map(Noise::new);
        let top = wide.then(|| self.tiled_h0(x.dim(3) / self.config.scales[0].factor));
        Ok(self.with_graph(|cx| {
            let emb_s = self.embed(cx, source);
            let emb_t = self.embed(cx, target);
            let xv = cx.g.constant(x.clone());
            let feats = self.bottom_up(cx, xv, emb_s);
            let h = match top {
                Some(t) => {
                    let t = cx.g.constant(t);
                    cx.g.repeat_batch(t, source.len())
                }
                None => {
                    let h0 = cx.p(self.arch.h0);
                    cx.g.repeat_batch(h0, source.len())
                }
            };
            let td = self.top_down_from(
                cx,
                h,
                emb_t,
                Pick::Infer {
                    feats: &feats,
                    posterior_upto: self.config.split,
                    noise: noise.as_mut(),
                },
            );
            let z = LatentHierarchy {
                groups: td.z.iter().map(|&v| cx.g.value(v).clone()).collect(),
                split: self.config.split,
            };
            (z, cx.g.value(td.output.expect("complete pass")).clone())
        }))
    }

    /// `dec.h0` repeated cyclically along time to `cols` columns.
    fn tiled_h0(&self, cols: usize) -> Tensor<T> {
        let h0 = self.params.tensor(self.arch.h0);
        let (_, c, rows, w) = h0.dims4();
        let mut data = Vec::with_capacity(c * rows * cols);
        for plane in h0.data().chunks(w) {
            data.extend((0..cols).map(|j| plane[j % w]));
        }
        Tensor::from_vec(&[1, c, rows, cols], data).expect("consistent shape")
    }

    /// Applies normalization site `site` (see [`Model::cin_sites`]) to
    /// `features: (b, c, h, w)`, one speaker per sample.
    pub fn apply_cin(&self, features: &Tensor<T>, ys: &[SpeakerId], site: usize) -> Result<Tensor<T>> {
        let (_, s) = self
            .arch
            .sites
            .get(site)
            .ok_or_else(|| Error::invalid(format!("no normalization site {site}")))?;
        if features.shape().len() != 4 || features.dim(1) != s.channels() {
            return Err(Error::config(format!(
                "site expects {} channels, features have shape {:?}",
                s.channels(),
                features.shape()
            )));
        }
        if features.dim(0) != ys.len() {
            return Err(Error::invalid("one speaker per sample is required"));
        }
        self.check_speakers(ys)?;
        Ok(self.with_graph(|cx| {
            let emb = self.embed(cx, ys);
            let x = cx.g.constant(features.clone());
            let y = s.forward(cx, x, emb);
            cx.g.value(y).clone()
        }))
    }
}

fn build_arch<T: Real>(cfg: &ModelConfig, vocab_size: usize, init: &mut Init<'_, T>) -> Arch {
    let c = cfg.base_channels;
    let zc = cfg.latent_channels;
    let e = cfg.speaker_embedding_dim;
    let l_total = cfg.latent_groups;
    let mut sites = Vec::new();

    let embed = init.normal("speaker_embedding".into(), &[vocab_size, e], 1.0);
    let stem = Conv::new(init, "enc.stem", 1, c / 2, 3, 1, 1.0);
    let finest = cfg.scales.last().expect("validated").factor;
    let stem_down = (0..log2(finest))
        .map(|i| Conv::new(init, &format!("enc.stem_down{i}"), if i == 0 { c / 2 } else { c }, c, 3, 2, 1.0))
        .collect();
    let enc_cells: Vec<EncoderCell> = (1..=l_total)
        .map(|l| EncoderCell::new(init, &format!("enc.cell{l}"), c, e))
        .collect();
    for (l, cell) in enc_cells.iter().enumerate() {
        for (i, s) in cell.sites().into_iter().enumerate() {
            sites.push((format!("enc.cell{}.n{}", l + 1, i + 1), s.clone()));
        }
    }
    let enc_down = (0..cfg.scales.len())
        .map(|s| {
            if s + 1 == cfg.scales.len() {
                return Vec::new();
            }
            let ratio = cfg.scales[s].factor / cfg.scales[s + 1].factor;
            (0..log2(ratio))
                .map(|i| Conv::new(init, &format!("enc.down{s}_{i}"), c, c, 3, 2, 1.0))
                .collect()
        })
        .collect();

    let (h1, w1) = cfg.scale_dims(0);
    let h0 = init.normal("dec.h0".into(), &[1, c, h1, w1], 1.0);
    let prior_heads = (1..=l_total)
        .map(|l| (l > 1).then(|| Conv::new(init, &format!("dec.prior{l}"), c, 2 * zc, 3, 1, 0.1)))
        .collect();
    let post_heads = (1..=l_total)
        .map(|l| Conv::new(init, &format!("enc.posterior{l}"), 2 * c, 2 * zc, 3, 1, 0.1))
        .collect();
    let combiners = (1..=l_total)
        .map(|l| Conv::new(init, &format!("dec.combine{l}"), zc, c, 1, 1, 1.0))
        .collect();
    let trunk: Vec<DecoderCell> = (1..l_total)
        .map(|l| DecoderCell::new(init, &format!("dec.cell{l}"), c, cfg.expand, e, l >= cfg.split))
        .collect();
    for (i, cell) in trunk.iter().enumerate() {
        for (j, s) in cell.sites().into_iter().enumerate() {
            sites.push((format!("dec.cell{}.n{j}", i + 1), s.clone()));
        }
    }
    let post_cell = DecoderCell::new(init, "dec.post", c, cfg.expand, e, true);
    for (j, s) in post_cell.sites().into_iter().enumerate() {
        sites.push((format!("dec.post.n{j}"), s.clone()));
    }
    let post_reduce = Conv::new(init, "dec.post_reduce", c, c / 2, 1, 1, 1.0);
    let post_norm = CinSite::new(init, "dec.out", c / 2, e, true);
    sites.push(("dec.out".into(), post_norm.clone()));
    let out_conv = Conv::new(init, "dec.out_conv", c / 2, 1, 3, 1, 1.0);
    Arch {
        embed,
        stem,
        stem_down,
        enc_cells,
        enc_down,
        h0,
        prior_heads,
        post_heads,
        combiners,
        trunk,
        post_cell,
        post_reduce,
        post_norm,
        out_conv,
        sites,
    }
}

/// Stacks segments into a `(b, 1, 80, T)` tensor.
pub fn batch_tensor<T: Real>(segments: &[&MelSegment]) -> Result<Tensor<T>> {
    let first = segments.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let t = first.frames();
    let mut data = Vec::with_capacity(segments.len() * MEL_BINS * t);
    for s in segments {
        if s.frames() != t {
            return Err(Error::invalid("segments in a batch must share a length"));
        }
        data.extend(s.mel.data().iter().map(|&v| lit::<T>(f64::from(v))));
    }
    Tensor::from_vec(&[segments.len(), 1, MEL_BINS, t], data)
}

#[cfg(test)]
mod tests;

//! Small strided CNN encoders for the two branches.
//!
//! Each scale is `relu(conv3x3 stride s)` followed by `relu(conv3x3)`. The
//! complementary branch can add a residual single-head self-attention layer
//! at its deepest scale.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::params::{join, Parameterized};
use crate::pipeline::attention::{
    self_attention_backward, self_attention_forward, AttentionCache, SelfAttentionParams,
};
use crate::tensor::{
    conv2d_backward, conv2d_forward, flatten_spatial, relu_backward_inplace, relu_inplace, Branch,
    ConvCache, FeatureMap, KernelSet,
};

pub const DEFAULT_WIDTHS: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    /// Residual self-attention at the deepest scale (complementary branch only).
    pub use_self_attention: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::with_scales(3)
    }
}

impl EncoderConfig {
    /// The first `scales` default widths, stride 2 everywhere.
    pub fn with_scales(scales: usize) -> Self {
        let scales = scales.clamp(1, DEFAULT_WIDTHS.len());
        Self {
            widths: DEFAULT_WIDTHS[..scales].to_vec(),
            strides: vec![2; scales],
            use_self_attention: true,
        }
    }

    pub fn scales(&self) -> usize {
        self.widths.len()
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    /// Cumulative stride of scale `l`.
    pub fn stride_at(&self, l: usize) -> usize {
        self.strides[..=l].iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.scales()) || self.strides.len() != self.widths.len() {
            return Err(Error::config(format!(
                "encoder needs 1-3 scales with one stride each, got widths {:?} strides {:?}",
                self.widths, self.strides
            )));
        }
        if self.widths.contains(&0) || self.strides.contains(&0) {
            return Err(Error::config("encoder widths and strides must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStage {
    pub down: KernelSet,
    pub refine: KernelSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub stages: Vec<EncoderStage>,
    pub attention: Option<SelfAttentionParams>,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, with_attention: bool, rng: &mut R) -> Self {
        let mut c_in = 1;
        let stages = cfg
            .widths
            .iter()
            .map(|&w| {
                let s = EncoderStage {
                    down: KernelSet::he_uniform(w, c_in, 3, rng),
                    refine: KernelSet::he_uniform(w, w, 3, rng),
                };
                c_in = w;
                s
            })
            .collect();
        let attention = (with_attention && cfg.use_self_attention)
            .then(|| SelfAttentionParams::init(*cfg.widths.last().expect("scales"), rng));
        Self { stages, attention }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            stages: self
                .stages
                .iter()
                .map(|s| EncoderStage {
                    down: s.down.zeros_like(),
                    refine: s.refine.zeros_like(),
                })
                .collect(),
            attention: self.attention.as_ref().map(|a| SelfAttentionParams::zeros(a.channels())),
        }
    }
}

impl Parameterized for EncoderParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &'a [f64])) {
        for (i, s) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("stage{i}"));
            s.down.visit(&join(&p, "down"), f);
            s.refine.visit(&join(&p, "refine"), f);
        }
        if let Some(a) = &self.attention {
            a.visit(&join(prefix, "attention"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            let p = join(prefix, &format!("stage{i}"));
            s.down.visit_mut(&join(&p, "down"), f);
            s.refine.visit_mut(&join(&p, "refine"), f);
        }
        if let Some(a) = &mut self.attention {
            a.visit_mut(&join(prefix, "attention"), f);
        }
    }
}

struct StageCache {
    down: ConvCache,
    down_act: FeatureMap,
    refine: ConvCache,
    refine_act: FeatureMap,
    attention: Option<AttentionCache>,
}

pub(crate) struct EncoderCache {
    stages: Vec<StageCache>,
}

fn check_dims(img: &GrayImage, cfg: &EncoderConfig) -> Result<()> {
    let s = cfg.total_stride();
    if img.width % s != 0 || img.height % s != 0 {
        let (pw, ph) = (img.width.div_ceil(s) * s, img.height.div_ceil(s) * s);
        return Err(Error::shape(format!(
            "image {}x{} is not divisible by the total stride {s}; pad to {pw}x{ph}",
            img.width, img.height
        )));
    }
    Ok(())
}

pub(crate) fn encode_cached(
    img: &GrayImage,
    cfg: &EncoderConfig,
    params: &EncoderParams,
    branch: Branch,
) -> Result<(Vec<FeatureMap>, EncoderCache)> {
    cfg.validate()?;
    check_dims(img, cfg)?;
    if params.stages.len() != cfg.scales() {
        return Err(Error::shape(format!(
            "encoder has {} stages for {} scales",
            params.stages.len(),
            cfg.scales()
        )));
    }
    let mut x = img.to_feature_map(branch);
    let mut feats = Vec::with_capacity(cfg.scales());
    let mut caches = Vec::with_capacity(cfg.scales());
    let deepest = cfg.scales() - 1;
    for (l, stage) in params.stages.iter().enumerate() {
        let (mut a, down) = conv2d_forward(&x, &stage.down, cfg.strides[l])?;
        relu_inplace(&mut a);
        let (mut b, refine) = conv2d_forward(&a, &stage.refine, 1)?;
        relu_inplace(&mut b);
        let mut out = b.clone();
        let mut attention = None;
        if l == deepest {
            if let Some(ap) = &params.attention {
                let (att, cache) = self_attention_forward(&flatten_spatial(&b), ap)?;
                out.data_mut()
                    .iter_mut()
                    .zip(att.data())
                    .for_each(|(o, a)| *o += a);
                attention = Some(cache);
            }
        }
        let out = out.with_tags(branch, l);
        feats.push(out.clone());
        caches.push(StageCache {
            down,
            down_act: a,
            refine,
            refine_act: b,
            attention,
        });
        x = out;
    }
    Ok((feats, EncoderCache { stages: caches }))
}

/// Multi-scale features of `img`, tagged with `branch` and their scale index.
pub fn encode(img: &GrayImage, cfg: &EncoderConfig, params: &EncoderParams, branch: Branch) -> Result<Vec<FeatureMap>> {
    Ok(encode_cached(img, cfg, params, branch)?.0)
}

/// Parameter gradients given the loss gradient at every scale's output.
pub(crate) fn encode_backward(params: &EncoderParams, cache: &EncoderCache, grads: Vec<FeatureMap>) -> EncoderParams {
    let mut out = params.zeros_like();
    let mut carry: Option<FeatureMap> = None;
    for (l, mut g) in grads.into_iter().enumerate().rev() {
        if let Some(c) = carry.take() {
            g.add_assign(&c);
        }
        let sc = &cache.stages[l];
        let stage = &params.stages[l];
        if let (Some(ap), Some(ac)) = (&params.attention, &sc.attention) {
            let (dx, dp) = self_attention_backward(ap, ac, g.data());
            g.data_mut().iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
            out.attention = Some(dp);
        }
        relu_backward_inplace(&mut g, &sc.refine_act);
        let (da, gr) = conv2d_backward(&stage.refine, &sc.refine, &g, true);
        let (c, h, w) = sc.down_act.dims();
        let mut da = FeatureMap::from_parts(c, h, w, da.expect("input grad"), Branch::Fused, l);
        relu_backward_inplace(&mut da, &sc.down_act);
        let (dx, gd) = conv2d_backward(&stage.down, &sc.down, &da, l > 0);
        out.stages[l].down = gd;
        out.stages[l].refine = gr;
        if l > 0 {
            let (c, h, w) = cache.stages[l - 1].refine_act.dims();
            carry = Some(FeatureMap::from_parts(c, h, w, dx.expect("input grad"), Branch::Fused, l - 1));
        }
    }
    out
}

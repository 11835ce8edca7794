//! Wavelet-domain fusion of a fiducial map with its remodeled complement.
//!
//! Both inputs are decomposed channelwise, stacked as `[LL | LH | HL | HH]`
//! blocks and concatenated (fiducial first, `8C` channels). Three parallel
//! convolutions (3x3, 5x5, 7x7) each produce `C_mid` channels; their
//! concatenation is integrated by a 1x1 convolution back to `4C` channels,
//! split into sub-bands and inverse transformed. The whole operator is linear
//! in its inputs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{join, Parameterized};
use crate::tensor::{conv2d_backward, conv2d_forward, Branch, ConvCache, FeatureMap, KernelSet};
use crate::wavelet::{
    dwt2_channelwise, dwt2_channelwise_adjoint, idwt2_channelwise, idwt2_channelwise_adjoint,
    SubbandQuad, WaveletFeature,
};

pub const MULTISCALE_KERNELS: [usize; 3] = [3, 5, 7];
pub const DEFAULT_C_MID_FACTOR: usize = 2;

/// Sub-band maps stacked along channels, `4C x ceil(H/2) x ceil(W/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedWavelet {
    pub map: FeatureMap,
    /// Spatial size of the map the sub-bands were computed from.
    pub orig_height: usize,
    pub orig_width: usize,
}

impl StackedWavelet {
    pub fn new(map: FeatureMap, orig_height: usize, orig_width: usize) -> Result<Self> {
        if map.channels() % 4 != 0 {
            return Err(Error::shape(format!(
                "stacked wavelet needs a multiple of 4 channels, got {}",
                map.channels()
            )));
        }
        if (map.height(), map.width()) != (orig_height.div_ceil(2), orig_width.div_ceil(2)) {
            return Err(Error::shape(format!(
                "sub-bands {}x{} do not match original {orig_height}x{orig_width}",
                map.height(),
                map.width()
            )));
        }
        Ok(Self {
            map,
            orig_height,
            orig_width,
        })
    }
}

pub fn stack_subbands(wf: &WaveletFeature) -> StackedWavelet {
    let (bh, bw) = wf.band_dims();
    let c = wf.channels;
    let mut data = Vec::with_capacity(4 * c * bh * bw);
    for band in 0..4 {
        for q in &wf.quads {
            data.extend_from_slice(q.bands()[band]);
        }
    }
    StackedWavelet {
        map: FeatureMap::from_parts(4 * c, bh, bw, data, wf.branch, wf.scale),
        orig_height: wf.height,
        orig_width: wf.width,
    }
}

pub fn split_subbands(s: &StackedWavelet) -> Result<WaveletFeature> {
    let m = &s.map;
    if m.channels() % 4 != 0 {
        return Err(Error::shape(format!(
            "cannot split {} channels into 4 sub-bands",
            m.channels()
        )));
    }
    let c = m.channels() / 4;
    let quads = (0..c)
        .map(|ch| SubbandQuad {
            rows: m.height(),
            cols: m.width(),
            ll: m.channel(ch).to_vec(),
            lh: m.channel(c + ch).to_vec(),
            hl: m.channel(2 * c + ch).to_vec(),
            hh: m.channel(3 * c + ch).to_vec(),
        })
        .collect();
    Ok(WaveletFeature {
        quads,
        channels: c,
        height: s.orig_height,
        width: s.orig_width,
        branch: m.branch,
        scale: m.scale,
    })
}

/// Convolutions of one fusion module.
#[derive(Clone, Debug, PartialEq)]
pub struct WdafParams {
    /// One kernel set per size in [`MULTISCALE_KERNELS`], each `8C -> C_mid`.
    pub multiscale: Vec<KernelSet>,
    /// 1x1, `3 C_mid -> 4C`.
    pub integrate: KernelSet,
}

impl WdafParams {
    pub fn zeros(channels: usize, c_mid: usize) -> Self {
        Self {
            multiscale: MULTISCALE_KERNELS
                .iter()
                .map(|&k| KernelSet::zeros(c_mid, 8 * channels, k))
                .collect(),
            integrate: KernelSet::zeros(4 * channels, 3 * c_mid, 1),
        }
    }

    /// Weights for which the output equals the fiducial input.
    ///
    /// Stacked fiducial channel `t` is carried by branch `t / C_mid`, output
    /// `t % C_mid`, through a centered tap, and selected by the 1x1
    /// integration. Exact when `3 C_mid >= 4C`; otherwise the highest
    /// sub-band channels are dropped.
    pub fn identity_embedding(channels: usize, c_mid: usize) -> Self {
        let mut p = Self::zeros(channels, c_mid);
        for t in 0..(4 * channels).min(3 * c_mid) {
            let (b, o) = (t / c_mid, t % c_mid);
            let ks = &mut p.multiscale[b];
            let center = ks.k() / 2;
            *ks.weight_mut(o, t, center, center) = 1.0;
            *p.integrate.weight_mut(t, t, 0, 0) = 1.0;
        }
        p
    }

    /// Identity embedding plus uniform noise in `[-noise, noise)` on every
    /// weight; biases zero.
    pub fn init<R: Rng + ?Sized>(channels: usize, c_mid: usize, noise: f64, rng: &mut R) -> Self {
        let mut p = Self::identity_embedding(channels, c_mid);
        if noise > 0.0 {
            for ks in p.multiscale.iter_mut().chain(std::iter::once(&mut p.integrate)) {
                ks.weights
                    .iter_mut()
                    .for_each(|w| *w += rng.random_range(-noise..noise));
            }
        }
        p
    }

    pub fn channels(&self) -> usize {
        self.integrate.c_out() / 4
    }

    pub fn c_mid(&self) -> usize {
        self.multiscale[0].c_out()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.channels(), self.c_mid())
    }

    fn validate(&self, channels: usize) -> Result<()> {
        let sizes: Vec<usize> = self.multiscale.iter().map(KernelSet::k).collect();
        if sizes != MULTISCALE_KERNELS {
            return Err(Error::config(format!(
                "multi-scale kernel sizes must be {MULTISCALE_KERNELS:?}, got {sizes:?}"
            )));
        }
        let c_mid = self.c_mid();
        let ok = self
            .multiscale
            .iter()
            .all(|k| k.c_in() == 8 * channels && k.c_out() == c_mid)
            && self.integrate.k() == 1
            && self.integrate.c_in() == 3 * c_mid
            && self.integrate.c_out() == 4 * channels;
        if !ok {
            return Err(Error::shape(format!(
                "fusion parameters do not fit {channels} input channels"
            )));
        }
        Ok(())
    }
}

impl Parameterized for WdafParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &'a [f64])) {
        for ks in &self.multiscale {
            ks.visit(&join(prefix, &format!("ms{}", ks.k())), f);
        }
        self.integrate.visit(&join(prefix, "integrate"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        for ks in &mut self.multiscale {
            let name = join(prefix, &format!("ms{}", ks.k()));
            ks.visit_mut(&name, f);
        }
        self.integrate.visit_mut(&join(prefix, "integrate"), f);
    }
}

pub(crate) struct WdafCache {
    branch_caches: Vec<ConvCache>,
    integrate_cache: ConvCache,
    band_dims: (usize, usize),
    dims: (usize, usize, usize),
}

pub fn wdaf_forward(fx: &FeatureMap, f_tilde: &FeatureMap, params: &WdafParams) -> Result<FeatureMap> {
    Ok(wdaf_forward_cached(fx, f_tilde, params)?.0)
}

pub(crate) fn wdaf_forward_cached(
    fx: &FeatureMap,
    f_tilde: &FeatureMap,
    params: &WdafParams,
) -> Result<(FeatureMap, WdafCache)> {
    fx.check_same_dims(f_tilde, "fusion inputs")?;
    params.validate(fx.channels())?;
    let sx = stack_subbands(&dwt2_channelwise(fx));
    let st = stack_subbands(&dwt2_channelwise(f_tilde));
    let joined = FeatureMap::concat_channels(&[&sx.map, &st.map])?;

    let mut outs = Vec::with_capacity(3);
    let mut branch_caches = Vec::with_capacity(3);
    for ks in &params.multiscale {
        let (o, c) = conv2d_forward(&joined, ks, 1)?;
        outs.push(o);
        branch_caches.push(c);
    }
    let refs: Vec<&FeatureMap> = outs.iter().collect();
    let wide = FeatureMap::concat_channels(&refs)?;
    let (integrated, integrate_cache) = conv2d_forward(&wide, &params.integrate, 1)?;
    let wf = split_subbands(&StackedWavelet {
        map: integrated,
        orig_height: fx.height(),
        orig_width: fx.width(),
    })?;
    let fused = idwt2_channelwise(&wf).with_tags(Branch::Fused, fx.scale);
    Ok((
        fused,
        WdafCache {
            branch_caches,
            integrate_cache,
            band_dims: (sx.map.height(), sx.map.width()),
            dims: fx.dims(),
        },
    ))
}

pub(crate) struct WdafGrads {
    pub params: WdafParams,
    pub d_fx: FeatureMap,
    pub d_f_tilde: FeatureMap,
}

pub(crate) fn wdaf_backward(params: &WdafParams, cache: &WdafCache, upstream: &FeatureMap) -> WdafGrads {
    let (c, h, w) = cache.dims;
    let (bh, bw) = cache.band_dims;
    let c_mid = params.c_mid();
    // adjoint of split + idwt
    let g_int = stack_subbands(&idwt2_channelwise_adjoint(upstream)).map;
    let (g_wide, g_integrate) = conv2d_backward(&params.integrate, &cache.integrate_cache, &g_int, true);
    let g_wide = FeatureMap::from_parts(3 * c_mid, bh, bw, g_wide.expect("input grad"), Branch::Fused, 0);
    let blocks = g_wide.split_channels(&[c_mid; 3]);

    let mut g_joined = FeatureMap::zeros(8 * c, bh, bw, Branch::Fused, 0);
    let mut multiscale = Vec::with_capacity(3);
    for ((ks, bc), g) in params.multiscale.iter().zip(&cache.branch_caches).zip(&blocks) {
        let (gi, gk) = conv2d_backward(ks, bc, g, true);
        g_joined
            .data_mut()
            .iter_mut()
            .zip(gi.expect("input grad"))
            .for_each(|(a, b)| *a += b);
        multiscale.push(gk);
    }
    let halves = g_joined.split_channels(&[4 * c, 4 * c]);
    let unstack = |m: &FeatureMap| {
        split_subbands(&StackedWavelet {
            map: m.clone(),
            orig_height: h,
            orig_width: w,
        })
        .expect("4C channels")
    };
    let d_fx = dwt2_channelwise_adjoint(&unstack(&halves[0])).with_tags(Branch::FiducialX, 0);
    let d_f_tilde = dwt2_channelwise_adjoint(&unstack(&halves[1])).with_tags(Branch::ComplementaryY, 0);
    WdafGrads {
        params: WdafParams {
            multiscale,
            integrate: g_integrate,
        },
        d_fx,
        d_f_tilde,
    }
}

/// Gradient of `<upstream, wdaf_forward(fx, f_tilde)>` with respect to every
/// convolution weight and bias.
pub fn wdaf_grad(
    params: &WdafParams,
    fx: &FeatureMap,
    f_tilde: &FeatureMap,
    upstream: &FeatureMap,
) -> Result<WdafParams> {
    let (out, cache) = wdaf_forward_cached(fx, f_tilde, params)?;
    out.check_same_dims(upstream, "upstream gradient")?;
    Ok(wdaf_backward(params, &cache, upstream).params)
}

//! Dual-branch detector: encoders, coupled AKM + WDAF stack, dense head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::akm::{akm_backward, akm_forward_cached, distribution_gap, AkmCache, AkmConfig, AttentionP};
use crate::boxes::Detection;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::params::{join, Parameterized};
use crate::pipeline::encoder::{encode_backward, encode_cached, EncoderCache, EncoderConfig, EncoderParams};
use crate::pipeline::head::{
    decode_from_raw, detection_loss_grad, head_backward, head_forward_cached, DetectionLoss, HeadCache, HeadOptions,
    HeadParams,
};
use crate::pipeline::synth::SynthSample;
use crate::tensor::{Branch, FeatureMap};
use crate::wdaf::{wdaf_backward, wdaf_forward_cached, WdafCache, WdafParams, DEFAULT_C_MID_FACTOR};

pub const DEFAULT_LAMBDA_M: f64 = 0.1;
pub const DEFAULT_ATTENTION_KERNEL: usize = 3;
/// Half-width of the uniform noise added to the identity-embedded fusion weights.
pub const WDAF_INIT_NOISE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub akm: AkmConfig,
    pub attention_kernel: usize,
    pub c_mid_factor: usize,
    pub head_hidden: usize,
    pub lambda_m: f64,
    pub image_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            akm: AkmConfig::default(),
            attention_kernel: DEFAULT_ATTENTION_KERNEL,
            c_mid_factor: DEFAULT_C_MID_FACTOR,
            head_hidden: 64,
            lambda_m: DEFAULT_LAMBDA_M,
            image_size: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.akm.k_top == 0 {
            return Err(Error::config("k_top must be at least 1"));
        }
        if self.attention_kernel % 2 == 0 {
            return Err(Error::config(format!(
                "attention_kernel must be odd, got {}",
                self.attention_kernel
            )));
        }
        if self.c_mid_factor == 0 || self.head_hidden == 0 {
            return Err(Error::config("c_mid_factor and head width must be positive"));
        }
        if !(self.lambda_m >= 0.0 && self.lambda_m.is_finite()) {
            return Err(Error::config(format!("lambda_m must be finite and >= 0, got {}", self.lambda_m)));
        }
        if self.image_size == 0 || self.image_size % self.encoder.total_stride() != 0 {
            return Err(Error::config(format!(
                "image_size {} must be a positive multiple of {}",
                self.image_size,
                self.encoder.total_stride()
            )));
        }
        Ok(())
    }

    pub fn deepest(&self) -> usize {
        self.encoder.scales() - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder_x: EncoderParams,
    pub encoder_y: EncoderParams,
    pub attention: Vec<AttentionP>,
    pub wdaf: Vec<WdafParams>,
    pub head: HeadParams,
    pub lambda_m: f64,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder_x = EncoderParams::init(&cfg.encoder, false, &mut rng);
        let encoder_y = EncoderParams::init(&cfg.encoder, true, &mut rng);
        let attention = (0..cfg.encoder.scales())
            .map(|_| AttentionP::centered(cfg.attention_kernel))
            .collect::<Result<_>>()?;
        let wdaf = cfg
            .encoder
            .widths
            .iter()
            .map(|&c| WdafParams::init(c, cfg.c_mid_factor * c, WDAF_INIT_NOISE, &mut rng))
            .collect();
        let deep = *cfg.encoder.widths.last().expect("scales");
        let head = HeadParams::init(deep, cfg.head_hidden, &mut rng);
        Ok(Self {
            encoder_x,
            encoder_y,
            attention,
            wdaf,
            head,
            lambda_m: cfg.lambda_m,
        })
    }

    pub fn scales(&self) -> usize {
        self.attention.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder_x: self.encoder_x.zeros_like(),
            encoder_y: self.encoder_y.zeros_like(),
            attention: self.attention.iter().map(AttentionP::zeros_like).collect(),
            wdaf: self.wdaf.iter().map(WdafParams::zeros_like).collect(),
            head: self.head.zeros_like(),
            lambda_m: self.lambda_m,
        }
    }

    /// Tensors that receive gradient from the training loss. The shallower
    /// fusion modules feed no loss term and stay at their initial values.
    pub fn is_trainable(&self, name: &str) -> bool {
        let deepest = self.wdaf.len().saturating_sub(1);
        (0..deepest).all(|l| !name.starts_with(&format!("wdaf{l}.")))
    }
}

impl Parameterized for ModelParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &'a [f64])) {
        self.encoder_x.visit(&join(prefix, "encoder_x"), f);
        self.encoder_y.visit(&join(prefix, "encoder_y"), f);
        for (l, p) in self.attention.iter().enumerate() {
            p.visit(&join(prefix, &format!("akm{l}")), f);
        }
        for (l, w) in self.wdaf.iter().enumerate() {
            w.visit(&join(prefix, &format!("wdaf{l}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        self.encoder_x.visit_mut(&join(prefix, "encoder_x"), f);
        self.encoder_y.visit_mut(&join(prefix, "encoder_y"), f);
        for (l, p) in self.attention.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &format!("akm{l}")), f);
        }
        for (l, w) in self.wdaf.iter_mut().enumerate() {
            w.visit_mut(&join(prefix, &format!("wdaf{l}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput {
    /// `F#` per scale.
    pub fused: Vec<FeatureMap>,
    /// AKM-remodeled complementary features per scale.
    pub remodeled: Vec<FeatureMap>,
    pub measurement_losses: Vec<f64>,
}

fn at_scale<T>(l: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Shape(m) => Error::Shape(format!("scale {l}: {m}")),
        other => other,
    })
}

/// AKM then WDAF at every scale.
pub fn fusion_stack(
    feats_x: &[FeatureMap],
    feats_y: &[FeatureMap],
    attention: &[AttentionP],
    wdaf: &[WdafParams],
    akm: &AkmConfig,
) -> Result<FusionOutput> {
    let n = feats_x.len();
    if feats_y.len() != n || attention.len() != n || wdaf.len() != n {
        return Err(Error::shape(format!(
            "fusion stack got {n} fiducial scales, {} complementary, {} attention, {} fusion modules",
            feats_y.len(),
            attention.len(),
            wdaf.len()
        )));
    }
    let mut out = FusionOutput {
        fused: Vec::with_capacity(n),
        remodeled: Vec::with_capacity(n),
        measurement_losses: Vec::with_capacity(n),
    };
    for l in 0..n {
        let (fx, fy) = (&feats_x[l], &feats_y[l]);
        if fx.dims() != fy.dims() {
            return Err(Error::shape(format!(
                "scale {l}: fiducial {:?} vs complementary {:?}",
                fx.dims(),
                fy.dims()
            )));
        }
        let (ft, lm, _) = at_scale(l, akm_forward_cached(fx, fy, &attention[l], akm))?;
        let (fused, _) = at_scale(l, wdaf_forward_cached(fx, &ft, &wdaf[l]))?;
        out.fused.push(fused);
        out.remodeled.push(ft);
        out.measurement_losses.push(lm);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub detection: f64,
    pub detection_parts: DetectionLoss,
    pub lm_per_scale: Vec<f64>,
    /// Channel-norm gap between the branches before AKM, averaged over scales.
    pub gap_before: f64,
    /// The same gap after AKM remodeling.
    pub gap_after: f64,
}

impl LossBreakdown {
    pub fn mean_lm(&self) -> f64 {
        mean(&self.lm_per_scale)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// `detection + lambda_m * mean(L_m)`.
pub fn combine_losses(detection: f64, lm_per_scale: &[f64], lambda_m: f64) -> f64 {
    if lambda_m == 0.0 {
        return detection;
    }
    detection + lambda_m * mean(lm_per_scale)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

struct Forward {
    feats_x: Vec<FeatureMap>,
    feats_y: Vec<FeatureMap>,
    enc_x: EncoderCache,
    enc_y: EncoderCache,
    remodeled: Vec<FeatureMap>,
    akm: Vec<AkmCache>,
    lm: Vec<f64>,
    wdaf: WdafCache,
    head: HeadCache,
    raw: FeatureMap,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let fresh = ModelParams::init(&config, 0)?;
        let mut expected = Vec::new();
        fresh.visit("", &mut |n, d, _| expected.push((n, d)));
        let mut got = Vec::new();
        params.visit("", &mut |n, d, _| got.push((n, d)));
        if expected != got {
            return Err(Error::shape("parameters do not match the model configuration"));
        }
        Ok(Self { config, params })
    }

    pub fn stride(&self) -> usize {
        self.config.encoder.total_stride()
    }

    pub fn encode_pair(&self, visible: &GrayImage, infrared: &GrayImage) -> Result<(Vec<FeatureMap>, Vec<FeatureMap>)> {
        if (visible.width, visible.height) != (infrared.width, infrared.height) {
            return Err(Error::shape(format!(
                "visible {}x{} and infrared {}x{} differ in size",
                visible.width, visible.height, infrared.width, infrared.height
            )));
        }
        let (fx, _) = encode_cached(visible, &self.config.encoder, &self.params.encoder_x, Branch::FiducialX)?;
        let (fy, _) = encode_cached(infrared, &self.config.encoder, &self.params.encoder_y, Branch::ComplementaryY)?;
        Ok((fx, fy))
    }

    pub fn fuse(&self, visible: &GrayImage, infrared: &GrayImage) -> Result<(Vec<FeatureMap>, Vec<FeatureMap>, FusionOutput)> {
        let (fx, fy) = self.encode_pair(visible, infrared)?;
        let out = fusion_stack(&fx, &fy, &self.params.attention, &self.params.wdaf, &self.config.akm)?;
        Ok((fx, fy, out))
    }

    pub fn detect(&self, visible: &GrayImage, infrared: &GrayImage) -> Result<Vec<Detection>> {
        let (_, _, out) = self.fuse(visible, infrared)?;
        let deepest = out.fused.last().expect("scales");
        let raw = head_forward_cached(deepest, &self.params.head)?.0;
        decode_from_raw(&raw, &HeadOptions::new(self.stride(), visible.width, visible.height))
    }

    fn forward(&self, sample: &SynthSample) -> Result<Forward> {
        let cfg = &self.config;
        let p = &self.params;
        let (feats_x, enc_x) = encode_cached(&sample.visible, &cfg.encoder, &p.encoder_x, Branch::FiducialX)?;
        let (feats_y, enc_y) = encode_cached(&sample.infrared, &cfg.encoder, &p.encoder_y, Branch::ComplementaryY)?;
        let mut remodeled = Vec::new();
        let mut akm = Vec::new();
        let mut lm = Vec::new();
        for l in 0..feats_x.len() {
            let (ft, m, c) = at_scale(l, akm_forward_cached(&feats_x[l], &feats_y[l], &p.attention[l], &cfg.akm))?;
            remodeled.push(ft);
            lm.push(m);
            akm.push(c);
        }
        let d = cfg.deepest();
        let (fused, wdaf) = at_scale(d, wdaf_forward_cached(&feats_x[d], &remodeled[d], &p.wdaf[d]))?;
        let (raw, head) = head_forward_cached(&fused, &p.head)?;
        Ok(Forward {
            feats_x,
            feats_y,
            enc_x,
            enc_y,
            remodeled,
            akm,
            lm,
            wdaf,
            head,
            raw,
        })
    }

    fn breakdown(&self, fw: &Forward, sample: &SynthSample) -> Result<(LossBreakdown, FeatureMap)> {
        let (parts, g_raw) = detection_loss_grad(&fw.raw, &sample.boxes, self.stride())?;
        let detection = parts.total();
        let n = fw.feats_x.len() as f64;
        let mut gap_before = 0.0;
        let mut gap_after = 0.0;
        for l in 0..fw.feats_x.len() {
            gap_before += distribution_gap(&fw.feats_x[l], &fw.feats_y[l])?;
            gap_after += distribution_gap(&fw.feats_x[l], &fw.remodeled[l])?;
        }
        let total = combine_losses(detection, &fw.lm, self.params.lambda_m);
        Ok((
            LossBreakdown {
                total,
                detection,
                detection_parts: parts,
                lm_per_scale: fw.lm.clone(),
                gap_before: gap_before / n,
                gap_after: gap_after / n,
            },
            g_raw,
        ))
    }

    pub fn total_loss(&self, sample: &SynthSample) -> Result<LossBreakdown> {
        let fw = self.forward(sample)?;
        Ok(self.breakdown(&fw, sample)?.0)
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, sample: &SynthSample) -> Result<(LossBreakdown, ModelParams)> {
        let fw = self.forward(sample)?;
        let (loss, g_raw) = self.breakdown(&fw, sample)?;
        let p = &self.params;
        let d = self.config.deepest();
        let mut grads = p.zeros_like();

        let (d_fused, g_head) = head_backward(&p.head, &fw.head, &g_raw);
        grads.head = g_head;
        let (c, h, w) = fw.feats_x[d].dims();
        let d_fused = FeatureMap::from_parts(c, h, w, d_fused, Branch::Fused, d);
        let wg = wdaf_backward(&p.wdaf[d], &fw.wdaf, &d_fused);
        grads.wdaf[d] = wg.params;

        let lm_weight = p.lambda_m / fw.lm.len() as f64;
        let mut d_x = Vec::with_capacity(fw.akm.len());
        let mut d_y = Vec::with_capacity(fw.akm.len());
        for (l, cache) in fw.akm.iter().enumerate() {
            let upstream = (l == d).then_some(&wg.d_f_tilde);
            let ag = akm_backward(&p.attention[l], cache, upstream, lm_weight);
            let mut gx = ag.d_fx;
            if l == d {
                gx.add_assign(&wg.d_fx);
            }
            d_x.push(gx);
            d_y.push(ag.d_fy);
            grads.attention[l] = ag.d_p;
        }
        grads.encoder_x = encode_backward(&p.encoder_x, &fw.enc_x, d_x);
        grads.encoder_y = encode_backward(&p.encoder_y, &fw.enc_y, d_y);
        Ok((loss, grads))
    }
}

/// Displayable fusion: the channel mean of `fused`, bilinearly resized to
/// `full`, cropped to `out` and min-max normalized.
pub fn render_fusion(fused: &FeatureMap, full: (usize, usize), out: (usize, usize)) -> GrayImage {
    let (c, h, w) = fused.dims();
    let mut img = GrayImage::filled(w, h, 0.0);
    for ch in 0..c {
        for (d, v) in img.data.iter_mut().zip(fused.channel(ch)) {
            *d += v / c as f64;
        }
    }
    img.resize_bilinear(full.0, full.1).crop(out.0, out.1).min_max_normalized()
}

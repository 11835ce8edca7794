//! Adaptive top-K matching of complementary channels onto fiducial channels.
//!
//! The complementary feature is weighted per channel by a learnable 1-D
//! attention `alpha = sigmoid(conv1d(||f_y||_inf))`. For every fiducial
//! channel `i` the `K` weighted complementary channels whose infinity norms
//! are nearest to `||f_x_i||_inf` are averaged into remodeled row `i`.
//!
//! The measurement loss
//!
//! ```text
//! L_m = 1 / (M N) * sum_i sum_j | ||f_x_i||_inf - alpha_j ||f_y_j||_inf |
//! ```
//!
//! supervises the attention.

use crate::error::{Error, Result};
use crate::tensor::{
    channel_inf_norm, channel_inf_norm_argmax, conv1d, conv1d_backward, flatten_spatial,
    unflatten, Branch, FeatureMap, FlatFeature, NormVector,
};

pub const DEFAULT_K_TOP: usize = 3;

/// Learnable 1-D attention over the complementary channel-norm sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionP {
    pub kernel: Vec<f64>,
    pub bias: f64,
}

impl AttentionP {
    pub fn new(kernel: Vec<f64>, bias: f64) -> Result<Self> {
        if kernel.len() % 2 == 0 {
            return Err(Error::config(format!(
                "attention kernel length must be odd, got {}",
                kernel.len()
            )));
        }
        if kernel.iter().any(|v| !v.is_finite()) || !bias.is_finite() {
            return Err(Error::Validation("attention parameters must be finite".into()));
        }
        Ok(Self { kernel, bias })
    }

    /// Centered delta kernel of length `k`, zero bias: `alpha = sigmoid(norm)`.
    pub fn centered(k: usize) -> Result<Self> {
        let mut kernel = vec![0.0; k];
        if k % 2 == 1 {
            kernel[k / 2] = 1.0;
        }
        Self::new(kernel, 0.0)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            kernel: vec![0.0; self.kernel.len()],
            bias: 0.0,
        }
    }

    /// Parameters as one vector: kernel taps followed by the bias.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.kernel.clone();
        v.push(self.bias);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let (bias, kernel) = v
            .split_last()
            .ok_or_else(|| Error::shape("attention parameter vector is empty"))?;
        Self::new(kernel.to_vec(), *bias)
    }
}

/// Per-channel attention weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaWeights {
    pub alpha: Vec<f64>,
}

impl AlphaWeights {
    /// Fixed weights. Sigmoid outputs lie in `(0, 1)`; tests also use
    /// `alpha = 1` to bypass the attention. Weights must be positive.
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return Err(Error::Validation("attention weights must be finite and positive".into()));
        }
        Ok(Self { alpha })
    }

    pub fn ones(n: usize) -> Self {
        Self { alpha: vec![1.0; n] }
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn alpha_from_norms(ny: &[f64], p: &AttentionP) -> (Vec<f64>, Vec<f64>) {
    // kernel length was validated at construction
    let z = conv1d(ny, &p.kernel, p.bias).expect("odd attention kernel");
    let alpha = z.iter().map(|&v| sigmoid(v)).collect();
    (z, alpha)
}

pub fn attention_weights(fy: &FlatFeature, p: &AttentionP) -> AlphaWeights {
    let ny = channel_inf_norm(fy);
    AlphaWeights {
        alpha: alpha_from_norms(&ny.values, p).1,
    }
}

pub fn apply_attention(fy: &FlatFeature, a: &AlphaWeights) -> Result<FlatFeature> {
    if a.len() != fy.rows() {
        return Err(Error::shape(format!(
            "{} attention weights for {} channels",
            a.len(),
            fy.rows()
        )));
    }
    let mut out = fy.clone();
    for (j, &w) in a.alpha.iter().enumerate() {
        out.row_mut(j).iter_mut().for_each(|v| *v *= w);
    }
    Ok(out)
}

/// `M x N` matrix of non-negative distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.cols..(i + 1) * self.cols]
    }
}

/// `d[i][j] = | nx[i] - ny[j] |`.
pub fn pairwise_distance(nx: &NormVector, ny: &NormVector) -> DistanceMatrix {
    let d = nx
        .values
        .iter()
        .flat_map(|a| ny.values.iter().map(move |b| (a - b).abs()))
        .collect();
    DistanceMatrix {
        rows: nx.len(),
        cols: ny.len(),
        d,
    }
}

/// How AKM measures fiducial/complementary channel distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DistanceMode {
    /// `| ||f_x||_inf - ||f_y||_inf |`.
    #[default]
    NormDifference,
    /// Experimental: true Chebyshev distance `||f_x - f_y||_inf`.
    Elementwise,
}

/// `d[i][j] = max_l | fx[i][l] - fy[j][l] |` (experimental matching mode).
pub fn elementwise_distance(fx: &FlatFeature, fy: &FlatFeature) -> Result<DistanceMatrix> {
    if fx.len() != fy.len() {
        return Err(Error::shape(format!(
            "elementwise distance needs equal row lengths, got {} and {}",
            fx.len(),
            fy.len()
        )));
    }
    let mut d = Vec::with_capacity(fx.rows() * fy.rows());
    for i in 0..fx.rows() {
        for j in 0..fy.rows() {
            d.push(
                fx.row(i)
                    .iter()
                    .zip(fy.row(j))
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())),
            );
        }
    }
    Ok(DistanceMatrix {
        rows: fx.rows(),
        cols: fy.rows(),
        d,
    })
}

/// Indices of the `min(k, N)` smallest values, ascending by value then index.
pub fn topk_select(row: &[f64], k: usize) -> Result<Vec<usize>> {
    if k < 1 {
        return Err(Error::config("top-K requires k >= 1"));
    }
    let mut idx: Vec<usize> = (0..row.len()).collect();
    // stable sort keeps ascending index order among equal values
    idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
    idx.truncate(k.min(row.len()));
    Ok(idx)
}

/// For every fiducial channel, the ordered complementary channels it matched.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchSet {
    pub rows: Vec<Vec<usize>>,
}

impl MatchSet {
    pub fn k(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

pub fn match_topk(d: &DistanceMatrix, k: usize) -> Result<MatchSet> {
    Ok(MatchSet {
        rows: (0..d.rows)
            .map(|i| topk_select(d.row(i), k))
            .collect::<Result<_>>()?,
    })
}

/// Row `i` of the output is the mean of the weighted complementary rows
/// matched to fiducial channel `i`.
pub fn remodel(fy_weighted: &FlatFeature, matches: &MatchSet) -> Result<FlatFeature> {
    let l = fy_weighted.len();
    let mut data = vec![0.0; matches.rows.len() * l];
    for (i, sel) in matches.rows.iter().enumerate() {
        if sel.is_empty() {
            return Err(Error::Invariant(format!("fiducial channel {i} has no match")));
        }
        let dst = &mut data[i * l..(i + 1) * l];
        for &j in sel {
            if j >= fy_weighted.rows() {
                return Err(Error::Invariant(format!(
                    "match index {j} out of range for {} channels",
                    fy_weighted.rows()
                )));
            }
            dst.iter_mut().zip(fy_weighted.row(j)).for_each(|(d, v)| *d += v);
        }
        let inv = 1.0 / sel.len() as f64;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    Ok(FlatFeature::from_parts(
        matches.rows.len(),
        fy_weighted.width(),
        fy_weighted.height(),
        data,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AkmConfig {
    pub k_top: usize,
    pub distance: DistanceMode,
}

impl Default for AkmConfig {
    fn default() -> Self {
        Self {
            k_top: DEFAULT_K_TOP,
            distance: DistanceMode::NormDifference,
        }
    }
}

fn check_spatial(fx: &FeatureMap, fy: &FeatureMap) -> Result<()> {
    if (fx.height(), fx.width()) != (fy.height(), fy.width()) {
        return Err(Error::shape(format!(
            "AKM needs matching spatial sizes, fiducial {}x{} vs complementary {}x{}",
            fx.height(),
            fx.width(),
            fy.height(),
            fy.width()
        )));
    }
    Ok(())
}

/// Remodels `fy` against `fx` with learnable attention `p`.
pub fn akm_forward(fx: &FeatureMap, fy: &FeatureMap, p: &AttentionP, k: usize) -> Result<FeatureMap> {
    let cfg = AkmConfig {
        k_top: k,
        ..AkmConfig::default()
    };
    Ok(akm_forward_cached(fx, fy, p, &cfg)?.0)
}

/// [`akm_forward`] with fixed attention weights instead of `P`.
pub fn akm_forward_with_alpha(
    fx: &FeatureMap,
    fy: &FeatureMap,
    alpha: &AlphaWeights,
    cfg: &AkmConfig,
) -> Result<FeatureMap> {
    check_spatial(fx, fy)?;
    let fxf = flatten_spatial(fx);
    let weighted = apply_attention(&flatten_spatial(fy), alpha)?;
    let matches = match_with_mode(&fxf, &weighted, cfg)?;
    finish_remodel(fx, &weighted, &matches)
}

fn match_with_mode(fx: &FlatFeature, weighted: &FlatFeature, cfg: &AkmConfig) -> Result<MatchSet> {
    let d = match cfg.distance {
        DistanceMode::NormDifference => {
            pairwise_distance(&channel_inf_norm(fx), &channel_inf_norm(weighted))
        }
        DistanceMode::Elementwise => elementwise_distance(fx, weighted)?,
    };
    match_topk(&d, cfg.k_top)
}

fn finish_remodel(fx: &FeatureMap, weighted: &FlatFeature, matches: &MatchSet) -> Result<FeatureMap> {
    let flat = remodel(weighted, matches)?;
    Ok(unflatten(&flat, fx.width(), fx.height())?.with_tags(Branch::ComplementaryY, fx.scale))
}

/// Everything the backward pass needs from one AKM forward.
#[derive(Clone, Debug)]
pub(crate) struct AkmCache {
    fy: FlatFeature,
    nx: Vec<f64>,
    argmax_x: Vec<usize>,
    sign_x: Vec<f64>,
    ny: Vec<f64>,
    argmax_y: Vec<usize>,
    alpha: Vec<f64>,
    matches: MatchSet,
    fx_dims: (usize, usize, usize),
    fy_branch: Branch,
}

/// Forward pass returning `(remodeled, L_m, cache)`.
pub(crate) fn akm_forward_cached(
    fx: &FeatureMap,
    fy: &FeatureMap,
    p: &AttentionP,
    cfg: &AkmConfig,
) -> Result<(FeatureMap, f64, AkmCache)> {
    check_spatial(fx, fy)?;
    let fxf = flatten_spatial(fx);
    let fyf = flatten_spatial(fy);
    let (nx, argmax_x) = channel_inf_norm_argmax(&fxf);
    let (ny, argmax_y) = channel_inf_norm_argmax(&fyf);
    let (_, alpha) = alpha_from_norms(&ny.values, p);
    let weighted = apply_attention(&fyf, &AlphaWeights { alpha: alpha.clone() })?;
    let matches = match cfg.distance {
        DistanceMode::NormDifference => {
            let nw = NormVector {
                values: alpha.iter().zip(&ny.values).map(|(a, n)| a * n).collect(),
            };
            match_topk(&pairwise_distance(&nx, &nw), cfg.k_top)?
        }
        DistanceMode::Elementwise => match_topk(&elementwise_distance(&fxf, &weighted)?, cfg.k_top)?,
    };
    let out = finish_remodel(fx, &weighted, &matches)?;
    let sign_x = argmax_x
        .iter()
        .enumerate()
        .map(|(i, &at)| sign(fxf.row(i)[at]))
        .collect();
    let lm = lm_from_norms(&nx.values, &ny.values, &alpha);
    Ok((
        out,
        lm,
        AkmCache {
            fy: fyf,
            nx: nx.values,
            argmax_x,
            sign_x,
            ny: ny.values,
            argmax_y,
            alpha,
            matches,
            fx_dims: fx.dims(),
            fy_branch: fy.branch,
        },
    ))
}

pub(crate) struct AkmGrads {
    pub d_fx: FeatureMap,
    pub d_fy: FeatureMap,
    pub d_p: AttentionP,
}

/// Backward through the remodeled output (`grad_out`, may be absent) and the
/// measurement loss (scaled by `lm_weight`). Match selection is treated as
/// locally constant.
pub(crate) fn akm_backward(
    p: &AttentionP,
    cache: &AkmCache,
    grad_out: Option<&FeatureMap>,
    lm_weight: f64,
) -> AkmGrads {
    let (m, n, l) = (cache.nx.len(), cache.ny.len(), cache.fy.len());
    let mut d_fy = vec![0.0; n * l];
    let mut d_alpha = vec![0.0; n];
    let mut d_ny = vec![0.0; n];
    let mut d_nx = vec![0.0; m];

    if let Some(g) = grad_out {
        // d weighted_j = sum over rows that selected j of g_i / K
        let mut d_w = vec![0.0; n * l];
        for (i, sel) in cache.matches.rows.iter().enumerate() {
            let inv = 1.0 / sel.len() as f64;
            let gi = g.channel(i);
            for &j in sel {
                d_w[j * l..(j + 1) * l]
                    .iter_mut()
                    .zip(gi)
                    .for_each(|(d, v)| *d += v * inv);
            }
        }
        for j in 0..n {
            let row = &d_w[j * l..(j + 1) * l];
            d_alpha[j] += row.iter().zip(cache.fy.row(j)).map(|(a, b)| a * b).sum::<f64>();
            d_fy[j * l..(j + 1) * l]
                .iter_mut()
                .zip(row)
                .for_each(|(d, v)| *d += cache.alpha[j] * v);
        }
    }

    if lm_weight != 0.0 {
        let (gx, ga, gy) = lm_grad_from_norms(&cache.nx, &cache.ny, &cache.alpha);
        for i in 0..m {
            d_nx[i] += lm_weight * gx[i];
        }
        for j in 0..n {
            d_alpha[j] += lm_weight * ga[j];
            d_ny[j] += lm_weight * gy[j];
        }
    }

    // alpha = sigmoid(z), z = conv1d(ny)
    let d_z: Vec<f64> = d_alpha
        .iter()
        .zip(&cache.alpha)
        .map(|(g, a)| g * a * (1.0 - a))
        .collect();
    let (d_ny_conv, d_kernel, d_bias) = conv1d_backward(&cache.ny, &p.kernel, &d_z);
    for j in 0..n {
        d_ny[j] += d_ny_conv[j];
    }

    // infinity norm routes its gradient to the argmax entry
    for j in 0..n {
        let at = cache.argmax_y[j];
        let v = cache.fy.row(j)[at];
        d_fy[j * l + at] += d_ny[j] * sign(v);
    }
    let (c, h, w) = cache.fx_dims;
    let mut d_fx = FeatureMap::zeros(c, h, w, Branch::FiducialX, 0);
    for i in 0..m {
        d_fx.data_mut()[i * l + cache.argmax_x[i]] = d_nx[i] * cache.sign_x[i];
    }
    AkmGrads {
        d_fx,
        d_fy: FeatureMap::from_parts(n, h, w, d_fy, cache.fy_branch, 0),
        d_p: AttentionP {
            kernel: d_kernel,
            bias: d_bias,
        },
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn lm_from_norms(nx: &[f64], ny: &[f64], alpha: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &a in nx {
        for (w, n) in alpha.iter().zip(ny) {
            acc += (a - w * n).abs();
        }
    }
    acc / (nx.len() * ny.len()) as f64
}

/// `(dL/dnx, dL/dalpha, dL/dny)` with subgradient 0 at kinks.
fn lm_grad_from_norms(nx: &[f64], ny: &[f64], alpha: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (nx.len() * ny.len()) as f64;
    let mut gx = vec![0.0; nx.len()];
    let mut ga = vec![0.0; ny.len()];
    let mut gy = vec![0.0; ny.len()];
    for (i, &a) in nx.iter().enumerate() {
        for j in 0..ny.len() {
            // s = sign(alpha_j ny_j - nx_i)
            let s = sign(alpha[j] * ny[j] - a) * scale;
            gx[i] -= s;
            ga[j] += s * ny[j];
            gy[j] += s * alpha[j];
        }
    }
    (gx, ga, gy)
}

pub fn measurement_loss(fx: &FlatFeature, fy: &FlatFeature, a: &AlphaWeights) -> Result<f64> {
    if a.len() != fy.rows() {
        return Err(Error::shape(format!(
            "{} attention weights for {} complementary channels",
            a.len(),
            fy.rows()
        )));
    }
    let nx = channel_inf_norm(fx);
    let ny = channel_inf_norm(fy);
    Ok(lm_from_norms(&nx.values, &ny.values, &a.alpha))
}

/// Gradient of the measurement loss with respect to the attention parameters.
pub fn measurement_loss_grad(fx: &FlatFeature, fy: &FlatFeature, p: &AttentionP) -> Result<AttentionP> {
    let nx = channel_inf_norm(fx);
    let ny = channel_inf_norm(fy);
    let (_, alpha) = alpha_from_norms(&ny.values, p);
    let (_, ga, _) = lm_grad_from_norms(&nx.values, &ny.values, &alpha);
    let d_z: Vec<f64> = ga.iter().zip(&alpha).map(|(g, a)| g * a * (1.0 - a)).collect();
    let (_, kernel, bias) = conv1d_backward(&ny.values, &p.kernel, &d_z);
    Ok(AttentionP { kernel, bias })
}

/// Measurement loss of a complementary map under learnable attention.
pub fn measurement_loss_with(fx: &FlatFeature, fy: &FlatFeature, p: &AttentionP) -> Result<f64> {
    measurement_loss(fx, fy, &attention_weights(fy, p))
}

/// Unweighted channel-norm gap between two maps.
pub fn distribution_gap(fx: &FeatureMap, fy: &FeatureMap) -> Result<f64> {
    measurement_loss(
        &flatten_spatial(fx),
        &flatten_spatial(fy),
        &AlphaWeights::ones(fy.channels()),
    )
}

//! Single-level orthonormal 2-D Haar transform, per matrix and per channel.
//!
//! For each 2x2 block `[a b; c d]` the analysis step produces
//!
//! ```text
//! ll = (a + b + c + d) / 2    lh = (a + b - c - d) / 2
//! hl = (a - b + c - d) / 2    hh = (a - b - c + d) / 2
//! ```
//!
//! Odd dimensions are made even by replicating the last row and/or column;
//! the channelwise transform remembers the original size and crops on the way
//! back.

use crate::tensor::{Branch, FeatureMap};

/// Dense row-major real matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// The four sub-bands of one single-level decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandQuad {
    pub rows: usize,
    pub cols: usize,
    pub ll: Vec<f64>,
    pub lh: Vec<f64>,
    pub hl: Vec<f64>,
    pub hh: Vec<f64>,
}

impl SubbandQuad {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let z = vec![0.0; rows * cols];
        Self {
            rows,
            cols,
            ll: z.clone(),
            lh: z.clone(),
            hl: z.clone(),
            hh: z,
        }
    }

    pub fn bands(&self) -> [&[f64]; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }

    pub fn energy(&self) -> f64 {
        self.bands()
            .iter()
            .flat_map(|b| b.iter())
            .map(|v| v * v)
            .sum()
    }
}

/// Analysis on a `rows x cols` buffer, replicating the last row/column when
/// a dimension is odd.
fn analyze(src: &[f64], rows: usize, cols: usize) -> SubbandQuad {
    let (hr, hc) = (rows.div_ceil(2), cols.div_ceil(2));
    let at = |r: usize, c: usize| src[r.min(rows - 1) * cols + c.min(cols - 1)];
    let mut q = SubbandQuad::zeros(hr, hc);
    for i in 0..hr {
        for j in 0..hc {
            let (a, b) = (at(2 * i, 2 * j), at(2 * i, 2 * j + 1));
            let (c, d) = (at(2 * i + 1, 2 * j), at(2 * i + 1, 2 * j + 1));
            let o = i * hc + j;
            q.ll[o] = (a + b + c + d) * 0.5;
            q.lh[o] = (a + b - c - d) * 0.5;
            q.hl[o] = (a - b + c - d) * 0.5;
            q.hh[o] = (a - b - c + d) * 0.5;
        }
    }
    q
}

/// Synthesis into a `2 rows x 2 cols` buffer.
fn synthesize(q: &SubbandQuad) -> Vec<f64> {
    let w = 2 * q.cols;
    let mut out = vec![0.0; 4 * q.rows * q.cols];
    for i in 0..q.rows {
        for j in 0..q.cols {
            let o = i * q.cols + j;
            let (ll, lh, hl, hh) = (q.ll[o], q.lh[o], q.hl[o], q.hh[o]);
            out[2 * i * w + 2 * j] = (ll + lh + hl + hh) * 0.5;
            out[2 * i * w + 2 * j + 1] = (ll + lh - hl - hh) * 0.5;
            out[(2 * i + 1) * w + 2 * j] = (ll - lh + hl - hh) * 0.5;
            out[(2 * i + 1) * w + 2 * j + 1] = (ll - lh - hl + hh) * 0.5;
        }
    }
    out
}

pub fn dwt2_haar(m: &Matrix) -> SubbandQuad {
    analyze(&m.data, m.rows, m.cols)
}

/// Returns the even-sized matrix `(2 * rows, 2 * cols)`.
pub fn idwt2_haar(q: &SubbandQuad) -> Matrix {
    Matrix::new(2 * q.rows, 2 * q.cols, synthesize(q))
}

/// Channelwise decomposition of a feature map, with the original spatial
/// size kept for cropping on reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletFeature {
    pub quads: Vec<SubbandQuad>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub branch: Branch,
    pub scale: usize,
}

impl WaveletFeature {
    /// Sub-band spatial size `(ceil(H / 2), ceil(W / 2))`.
    pub fn band_dims(&self) -> (usize, usize) {
        (self.height.div_ceil(2), self.width.div_ceil(2))
    }
}

pub fn dwt2_channelwise(f: &FeatureMap) -> WaveletFeature {
    let (c, h, w) = f.dims();
    WaveletFeature {
        quads: (0..c).map(|ch| analyze(f.channel(ch), h, w)).collect(),
        channels: c,
        height: h,
        width: w,
        branch: f.branch,
        scale: f.scale,
    }
}

pub fn idwt2_channelwise(wf: &WaveletFeature) -> FeatureMap {
    let (h, w) = (wf.height, wf.width);
    let mut data = Vec::with_capacity(wf.channels * h * w);
    for q in &wf.quads {
        let full = synthesize(q);
        let fw = 2 * q.cols;
        for r in 0..h {
            data.extend_from_slice(&full[r * fw..r * fw + w]);
        }
    }
    FeatureMap::from_parts(wf.channels, h, w, data, wf.branch, wf.scale)
}

/// Adjoint of [`dwt2_channelwise`]: synthesis followed by folding the
/// replicated padding row/column back onto the last row/column.
pub(crate) fn dwt2_channelwise_adjoint(wf: &WaveletFeature) -> FeatureMap {
    let (h, w) = (wf.height, wf.width);
    let mut data = vec![0.0; wf.channels * h * w];
    for (c, q) in wf.quads.iter().enumerate() {
        let full = synthesize(q);
        let fw = 2 * q.cols;
        let dst = &mut data[c * h * w..(c + 1) * h * w];
        for r in 0..2 * q.rows {
            for col in 0..fw {
                dst[r.min(h - 1) * w + col.min(w - 1)] += full[r * fw + col];
            }
        }
    }
    FeatureMap::from_parts(wf.channels, h, w, data, wf.branch, wf.scale)
}

/// Adjoint of [`idwt2_channelwise`]: zero-extend the cropped area, then
/// analyze.
pub(crate) fn idwt2_channelwise_adjoint(f: &FeatureMap) -> WaveletFeature {
    let (c, h, w) = f.dims();
    let (eh, ew) = (2 * h.div_ceil(2), 2 * w.div_ceil(2));
    let quads = (0..c)
        .map(|ch| {
            let src = f.channel(ch);
            let mut ext = vec![0.0; eh * ew];
            for r in 0..h {
                ext[r * ew..r * ew + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            analyze(&ext, eh, ew)
        })
        .collect();
    WaveletFeature {
        quads,
        channels: c,
        height: h,
        width: w,
        branch: f.branch,
        scale: f.scale,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    #[test]
    fn constant_block() {
        let q = dwt2_haar(&Matrix::new(2, 2, vec![1.0; 4]));
        assert_eq!((q.ll[0], q.lh[0], q.hl[0], q.hh[0]), (2.0, 0.0, 0.0, 0.0));
        assert_eq!(idwt2_haar(&q).data, vec![1.0; 4]);
    }

    #[test]
    fn zeros_map_to_zeros() {
        let q = dwt2_haar(&Matrix::zeros(4, 6));
        assert!(q.bands().iter().all(|b| b.iter().all(|v| *v == 0.0)));
        assert!(idwt2_haar(&SubbandQuad::zeros(2, 3)).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn energy_preserved_on_6x6() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = rand_matrix(&mut rng, 6, 6);
        let direct: f64 = m.data.iter().map(|v| v * v).sum();
        let q = dwt2_haar(&m);
        assert!((direct - q.energy()).abs() <= 1e-5 * direct);
    }

    #[test]
    fn single_ll_coefficient_inverts_to_constant_block() {
        let mut q = SubbandQuad::zeros(2, 2);
        q.ll[3] = 4.0;
        let m = idwt2_haar(&q);
        for r in 0..4 {
            for c in 0..4 {
                let want = if r >= 2 && c >= 2 { 2.0 } else { 0.0 };
                assert_eq!(m.get(r, c), want);
            }
        }
    }

    #[test]
    fn one_by_one_map_is_replicated() {
        let v = 0.7;
        let f = FeatureMap::new(1, 1, 1, vec![v], Branch::FiducialX, 0).unwrap();
        let wf = dwt2_channelwise(&f);
        // padded block is [v v; v v]
        assert_eq!(wf.quads[0].ll, vec![2.0 * v]);
        assert_eq!(wf.quads[0].lh, vec![0.0]);
        assert_eq!(idwt2_channelwise(&wf).data(), &[v]);
    }

    #[test]
    fn constant_channels_only_populate_ll() {
        let f = FeatureMap::from_fn(2, 4, 4, Branch::FiducialX, 0, |c, _, _| c as f64 + 1.0);
        let wf = dwt2_channelwise(&f);
        for (c, q) in wf.quads.iter().enumerate() {
            assert!(q.ll.iter().all(|v| *v == 2.0 * (c as f64 + 1.0)));
            assert!(q.lh.iter().chain(&q.hl).chain(&q.hh).all(|v| *v == 0.0));
        }
    }

    #[test]
    fn channelwise_equals_independent_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = FeatureMap::random(4, 6, 6, &mut rng);
        let wf = dwt2_channelwise(&f);
        for c in 0..4 {
            let m = Matrix::new(6, 6, f.channel(c).to_vec());
            assert_eq!(wf.quads[c], dwt2_haar(&m));
        }
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (h, w) in [(4, 4), (5, 3), (1, 7)] {
            let x = FeatureMap::random(2, h, w, &mut rng);
            let wx = dwt2_channelwise(&x);
            let mut y = wx.clone();
            for q in &mut y.quads {
                for band in [&mut q.ll, &mut q.lh, &mut q.hl, &mut q.hh] {
                    band.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
                }
            }
            let dot_w = |a: &WaveletFeature, b: &WaveletFeature| -> f64 {
                a.quads
                    .iter()
                    .zip(&b.quads)
                    .map(|(p, q)| {
                        p.bands()
                            .iter()
                            .zip(q.bands())
                            .map(|(u, v)| u.iter().zip(v).map(|(s, t)| s * t).sum::<f64>())
                            .sum::<f64>()
                    })
                    .sum()
            };
            let dot_f = |a: &FeatureMap, b: &FeatureMap| -> f64 {
                a.data().iter().zip(b.data()).map(|(s, t)| s * t).sum()
            };
            // <D x, y> == <x, D* y>
            let lhs = dot_w(&wx, &y);
            let rhs = dot_f(&x, &dwt2_channelwise_adjoint(&y));
            assert!((lhs - rhs).abs() < 1e-10, "dwt adjoint {h}x{w}");
            // <R y, z> == <y, R* z>
            let z = FeatureMap::random(2, h, w, &mut rng);
            let lhs = dot_f(&idwt2_channelwise(&y), &z);
            let rhs = dot_w(&y, &idwt2_channelwise_adjoint(&z));
            assert!((lhs - rhs).abs() < 1e-10, "idwt adjoint {h}x{w}");
        }
    }

    proptest! {
        #[test]
        fn perfect_reconstruction(c in 1usize..5, h in 1usize..17, w in 1usize..17, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = FeatureMap::random(c, h, w, &mut rng);
            let back = idwt2_channelwise(&dwt2_channelwise(&f));
            prop_assert_eq!(back.dims(), f.dims());
            for (a, b) in back.data().iter().zip(f.data()) {
                prop_assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-12) + 1e-12);
            }
        }

        #[test]
        fn linearity(a in -4.0f64..4.0, b in -4.0f64..4.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_matrix(&mut rng, 6, 8);
            let y = rand_matrix(&mut rng, 6, 8);
            let comb = Matrix::new(6, 8, x.data.iter().zip(&y.data).map(|(p, q)| a * p + b * q).collect());
            let (qc, qx, qy) = (dwt2_haar(&comb), dwt2_haar(&x), dwt2_haar(&y));
            for (bc, (bx, by)) in qc.bands().iter().zip(qx.bands().iter().zip(qy.bands())) {
                for (v, (s, t)) in bc.iter().zip(bx.iter().zip(by)) {
                    let want = a * s + b * t;
                    prop_assert!((v - want).abs() <= 1e-6 * want.abs().max(1.0));
                }
            }
        }

        #[test]
        fn channel_permutation_permutes_quads(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = FeatureMap::random(3, 5, 4, &mut rng);
            let perm = [2usize, 0, 1];
            let g = FeatureMap::from_fn(3, 5, 4, f.branch, f.scale, |c, y, x| f.get(perm[c], y, x));
            let (wf, wg) = (dwt2_channelwise(&f), dwt2_channelwise(&g));
            for c in 0..3 {
                prop_assert_eq!(&wg.quads[c], &wf.quads[perm[c]]);
            }
        }
    }
}

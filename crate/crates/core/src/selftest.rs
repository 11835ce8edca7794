//! Built-in property checks with their own reference computations.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::akm::{
    akm_forward_with_alpha, match_topk, measurement_loss, measurement_loss_grad, measurement_loss_with,
    pairwise_distance, AkmConfig, AlphaWeights, AttentionP,
};
use crate::boxes::{BBox, Detection, GroundTruthBox};
use crate::error::Result;
use crate::metrics::{average_precision, iou};
use crate::params::Parameterized;
use crate::pipeline::model::Model;
use crate::pipeline::train::{evaluate_model, train, EpochRecord};
use crate::tensor::{channel_inf_norm, fd_grad_check, flatten_spatial, Branch, FeatureMap, FlatFeature};
use crate::wavelet::{dwt2_channelwise, idwt2_channelwise};
use crate::wdaf::{wdaf_forward, wdaf_grad, WdafParams};
use crate::io::config::RunConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

fn outcome(name: &'static str, r: Result<(bool, String)>) -> CheckResult {
    match r {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn padded_energy(f: &FeatureMap) -> f64 {
    let (c, h, w) = f.dims();
    let (eh, ew) = (2 * h.div_ceil(2), 2 * w.div_ceil(2));
    let mut e = 0.0;
    for ch in 0..c {
        for y in 0..eh {
            for x in 0..ew {
                let v = f.get(ch, y.min(h - 1), x.min(w - 1));
                e += v * v;
            }
        }
    }
    e
}

/// Perfect reconstruction and energy conservation on 1,000 random maps.
pub fn wavelet_correctness() -> CheckResult {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5741_5645);
    let (mut rec, mut energy) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (c, h, w) = (rng.random_range(1..=4), rng.random_range(1..=16), rng.random_range(1..=16));
        let f = FeatureMap::random(c, h, w, &mut rng);
        let wf = dwt2_channelwise(&f);
        let back = idwt2_channelwise(&wf);
        let scale = f.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        rec = rec.max(max_abs_diff(back.data(), f.data()) / scale);
        let coef: f64 = wf.quads.iter().map(|q| q.energy()).sum();
        let direct = padded_energy(&f);
        energy = energy.max((coef - direct).abs() / direct.max(f64::MIN_POSITIVE));
    }
    let secs = start.elapsed().as_secs_f64();
    CheckResult {
        name: "wavelet correctness",
        passed: rec <= 1e-5 && energy <= 1e-5 && secs < 5.0,
        detail: format!("1000 maps, reconstruction {rec:.1e}, energy {energy:.1e}, {secs:.2}s"),
    }
}

/// K = 1 matching with unit attention undoes a channel permutation exactly.
pub fn akm_permutation_recovery() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x504552_4d);
    let cfg = AkmConfig {
        k_top: 1,
        ..AkmConfig::default()
    };
    let (mut exact, mut agree, mut total) = (0, 0, 0);
    let r = (|| -> Result<(bool, String)> {
        for _ in 0..200 {
            let c = rng.random_range(1..=16);
            let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let fx = loop {
                let f = FeatureMap::random(c, h, w, &mut rng);
                let mut n = channel_inf_norm(&flatten_spatial(&f)).values;
                n.sort_by(f64::total_cmp);
                if n.windows(2).all(|p| p[1] - p[0] > 1e-9) {
                    break f;
                }
            };
            let mut perm: Vec<usize> = (0..c).collect();
            perm.shuffle(&mut rng);
            let fy = FeatureMap::from_fn(c, h, w, Branch::ComplementaryY, 0, |ch, y, x| fx.get(perm[ch], y, x));
            let out = akm_forward_with_alpha(&fx, &fy, &AlphaWeights::ones(c), &cfg)?;
            exact += (out.data() == fx.data()) as usize;
            // brute-force nearest norm
            let norm = |m: &FeatureMap, ch: usize| m.channel(ch).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let lib = match_topk(
                &pairwise_distance(
                    &channel_inf_norm(&flatten_spatial(&fx)),
                    &channel_inf_norm(&flatten_spatial(&fy)),
                ),
                1,
            )?;
            for i in 0..c {
                let mut best = 0;
                for j in 1..c {
                    if (norm(&fx, i) - norm(&fy, j)).abs() < (norm(&fx, i) - norm(&fy, best)).abs() {
                        best = j;
                    }
                }
                total += 1;
                agree += (lib.rows[i] == [best] && perm[best] == i) as usize;
            }
        }
        Ok((
            exact == 200 && agree == total,
            format!("{exact}/200 bit-exact, oracle agreement {agree}/{total}"),
        ))
    })();
    outcome("AKM permutation recovery", r)
}

fn random_flat(rng: &mut ChaCha8Rng, rows: usize, len: usize) -> FlatFeature {
    FlatFeature::new(rows, len, 1, (0..rows * len).map(|_| rng.random_range(-2.0..2.0)).collect()).expect("dims")
}

/// Measurement loss against a direct double loop.
pub fn measurement_loss_oracle() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4c4d);
    let r = (|| -> Result<(bool, String)> {
        let mut worst = 0.0f64;
        for _ in 0..500 {
            let (m, n, l) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=12));
            let fx = random_flat(&mut rng, m, l);
            let fy = random_flat(&mut rng, n, l);
            let alpha: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let got = measurement_loss(&fx, &fy, &AlphaWeights::new(alpha.clone())?)?;
            let mut sum = 0.0;
            for i in 0..m {
                let nx = fx.row(i).iter().fold(0.0f64, |a, v| a.max(v.abs()));
                for (j, a) in alpha.iter().enumerate() {
                    let ny = fy.row(j).iter().fold(0.0f64, |a, v| a.max(v.abs()));
                    sum += (nx - a * ny).abs();
                }
            }
            let want = sum / (m * n) as f64;
            worst = worst.max((got - want).abs() / want.abs().max(f64::MIN_POSITIVE));
        }
        Ok((worst <= 1e-6, format!("500 instances, max relative error {worst:.1e}")))
    })();
    outcome("measurement loss oracle", r)
}

/// Smallest gap to a kink of the measurement loss for attention `p`.
fn lm_kink_margin(fx: &FlatFeature, fy: &FlatFeature, p: &AttentionP) -> f64 {
    let nx = channel_inf_norm(fx).values;
    let ny = channel_inf_norm(fy).values;
    let alpha = crate::akm::attention_weights(fy, p).alpha;
    let mut m = f64::INFINITY;
    for x in &nx {
        for (a, y) in alpha.iter().zip(&ny) {
            m = m.min((x - a * y).abs());
        }
    }
    m
}

/// L_m and WDAF gradients against central differences.
pub fn gradient_fidelity() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4752_4144);
    let r = (|| -> Result<(bool, String)> {
        let (mut lm_worst, mut wdaf_worst) = (0.0f64, 0.0f64);
        let mut done = 0;
        while done < 100 {
            let (m, n, l) = (rng.random_range(1..=8), rng.random_range(2..=8), rng.random_range(1..=10));
            let fx = random_flat(&mut rng, m, l);
            let fy = random_flat(&mut rng, n, l);
            let k = [1, 3, 5][rng.random_range(0..3)];
            let p = AttentionP::new((0..k).map(|_| rng.random_range(-1.0..1.0)).collect(), rng.random_range(-1.0..1.0))?;
            if lm_kink_margin(&fx, &fy, &p) < 1e-4 {
                continue;
            }
            let g = measurement_loss_grad(&fx, &fy, &p)?;
            let err = fd_grad_check(
                |v| measurement_loss_with(&fx, &fy, &AttentionP::from_slice(v).expect("odd")).expect("dims"),
                &p.to_vec(),
                &g.to_vec(),
                1e-6,
            )?;
            lm_worst = lm_worst.max(err);
            done += 1;
        }
        for _ in 0..100 {
            let c = rng.random_range(1..=3);
            let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
            let mut params = WdafParams::init(c, 2 * c, 0.3, &mut rng);
            params.visit_mut("", &mut |_, d| d.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1)));
            let fx = FeatureMap::random(c, h, w, &mut rng);
            let ft = FeatureMap::random(c, h, w, &mut rng);
            let up = FeatureMap::random(c, h, w, &mut rng);
            let readout = |q: &WdafParams| -> f64 {
                let out = wdaf_forward(&fx, &ft, q).expect("dims");
                out.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            };
            let g = wdaf_grad(&params, &fx, &ft, &up)?.flat();
            let base = params.flat();
            let picks = rand::seq::index::sample(&mut rng, base.len(), 24.min(base.len())).into_vec();
            let mut probe = params.clone();
            let err = fd_grad_check(
                |v| {
                    let mut full = base.clone();
                    picks.iter().zip(v).for_each(|(&i, x)| full[i] = *x);
                    probe.set_flat(&full).expect("len");
                    readout(&probe)
                },
                &picks.iter().map(|&i| base[i]).collect::<Vec<_>>(),
                &picks.iter().map(|&i| g[i]).collect::<Vec<_>>(),
                1e-5,
            )?;
            wdaf_worst = wdaf_worst.max(err);
        }
        Ok((
            lm_worst <= 1e-4 && wdaf_worst <= 1e-4,
            format!("L_m {lm_worst:.1e}, WDAF readout {wdaf_worst:.1e} over 100 instances each"),
        ))
    })();
    outcome("gradient fidelity", r)
}

/// Superposition with zero biases and the identity-embedding fixture.
pub fn wdaf_structure() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5744_4146);
    let r = (|| -> Result<(bool, String)> {
        let (mut lin, mut ident) = (0.0f64, 0.0f64);
        for _ in 0..100 {
            let c = rng.random_range(1..=4);
            let (h, w) = (rng.random_range(1..=9), rng.random_range(1..=9));
            let params = WdafParams::init(c, 2 * c, 0.5, &mut rng);
            let maps: Vec<FeatureMap> = (0..4).map(|_| FeatureMap::random(c, h, w, &mut rng)).collect();
            let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let mix = |u: &FeatureMap, v: &FeatureMap| u.scaled(a).add(&v.scaled(b)).expect("dims");
            let whole = wdaf_forward(&mix(&maps[0], &maps[1]), &mix(&maps[2], &maps[3]), &params)?;
            let parts = mix(
                &wdaf_forward(&maps[0], &maps[2], &params)?,
                &wdaf_forward(&maps[1], &maps[3], &params)?,
            );
            let scale = whole.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            lin = lin.max(max_abs_diff(whole.data(), parts.data()) / scale);
            let id = wdaf_forward(&maps[0], &maps[1], &WdafParams::identity_embedding(c, 2 * c))?;
            ident = ident.max(max_abs_diff(id.data(), maps[0].data()));
        }
        Ok((
            lin <= 1e-5 && ident <= 1e-5,
            format!("superposition {lin:.1e}, identity fixture {ident:.1e}"),
        ))
    })();
    outcome("WDAF structure", r)
}

fn oracle_ap(dets: &[Detection], gts: &[GroundTruthBox], thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let area = |b: &BBox| (b.x2 - b.x1) * (b.y2 - b.y1);
    let overlap = |a: &BBox, b: &BBox| {
        let w = a.x2.min(b.x2) - a.x1.max(b.x1);
        let h = a.y2.min(b.y2) - a.y1.max(b.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h / (area(a) + area(b) - w * h)
        }
    };
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let mut flags = Vec::new();
    for &d in &order {
        let mut best = 0;
        for g in 1..gts.len() {
            if overlap(&dets[d].bbox, &gts[g].bbox) > overlap(&dets[d].bbox, &gts[best].bbox) {
                best = g;
            }
        }
        let tp = overlap(&dets[d].bbox, &gts[best].bbox) >= thr && !used[best];
        used[best] |= tp;
        flags.push(tp);
    }
    // every PR point, then the envelope at each recall step
    let mut points = Vec::new();
    let mut tp = 0;
    for (k, &f) in flags.iter().enumerate() {
        tp += f as usize;
        points.push((tp as f64 / gts.len() as f64, tp as f64 / (k + 1) as f64, f));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for k in 0..points.len() {
        if points[k].2 {
            let env = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
            ap += (points[k].0 - prev) * env;
            prev = points[k].0;
        }
    }
    Some(ap)
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let (x, y) = (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0));
    BBox::new(x, y, x + rng.random_range(1.0..6.0), y + rng.random_range(1.0..6.0)).expect("positive size")
}

/// AP against PR enumeration plus the hand-computable cases.
pub fn metric_suite() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4d41_50);
    let r = (|| -> Result<(bool, String)> {
        let mut agree = 0;
        for _ in 0..100 {
            let gts: Vec<GroundTruthBox> = (0..rng.random_range(1..=4))
                .map(|_| GroundTruthBox {
                    class_id: 0,
                    bbox: random_box(&mut rng),
                })
                .collect();
            let dets: Vec<Detection> = (0..rng.random_range(0..=6))
                .map(|_| {
                    let bbox = if rng.random_bool(0.6) {
                        let g = &gts[rng.random_range(0..gts.len())].bbox;
                        let j = rng.random_range(-0.8..0.8);
                        BBox::new(g.x1 + j, g.y1, g.x2 + j, g.y2).expect("shifted")
                    } else {
                        random_box(&mut rng)
                    };
                    Detection {
                        class_id: 0,
                        bbox,
                        confidence: (rng.random_range(0..5) as f64) / 4.0,
                    }
                })
                .collect();
            let got = average_precision(&dets, &gts, 0.5);
            agree += (got.map(f64::to_bits) == oracle_ap(&dets, &gts, 0.5).map(f64::to_bits)) as usize;
        }
        let unit = BBox::new(0.0, 0.0, 2.0, 2.0)?;
        let gt = [GroundTruthBox {
            class_id: 0,
            bbox: unit,
        }];
        let hit = [Detection {
            class_id: 0,
            bbox: unit,
            confidence: 0.9,
        }];
        let one = average_precision(&hit, &gt, 0.5) == Some(1.0);
        let zero = average_precision(&[], &gt, 0.5) == Some(0.0);
        let seventh = iou(&unit, &BBox::new(1.0, 1.0, 3.0, 3.0)?)? == 1.0 / 7.0;
        Ok((
            agree == 100 && one && zero && seventh,
            format!("oracle agreement {agree}/100, AP 1.0 {one}, AP 0.0 {zero}, IoU 1/7 {seventh}"),
        ))
    })();
    outcome("metric suite", r)
}

#[derive(Clone, Debug)]
pub struct SmokeReport {
    pub log: Vec<EpochRecord>,
    pub reproducible: bool,
    pub lm_ratio: f64,
    pub map50: f64,
    pub seconds: f64,
}

pub const SMOKE_TRAIN_SAMPLES: usize = 200;
pub const SMOKE_TEST_SAMPLES: usize = 50;

/// Two default training runs, then evaluation on a held-out set.
pub fn training_smoke_report() -> Result<SmokeReport> {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let tcfg = cfg.train_config(SMOKE_TRAIN_SAMPLES);
    let run = || -> Result<(Model, Vec<EpochRecord>)> {
        let mut model = Model::new(cfg.model_config(), cfg.seed)?;
        let out = train(&mut model, &tcfg)?;
        Ok((model, out.log))
    };
    let (model, log) = run()?;
    let (_, again) = run()?;
    let text = |l: &[EpochRecord]| serde_json::to_string(l).expect("plain data");
    let reproducible = text(&log) == text(&again);
    let lm_ratio = log.last().expect("epochs").mean_lm / log[0].mean_lm;
    let map50 = evaluate_model(&model, cfg.seed, SMOKE_TEST_SAMPLES, &cfg.synth_config())?.map50;
    Ok(SmokeReport {
        log,
        reproducible,
        lm_ratio,
        map50,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn training_smoke() -> CheckResult {
    let r = training_smoke_report().map(|s| {
        (
            s.reproducible && s.lm_ratio <= 0.5 && s.map50 >= 0.6,
            format!(
                "L_m final/initial {:.3}, mAP@.50 {:.4}, reproducible {}, {:.0}s for two runs",
                s.lm_ratio, s.map50, s.reproducible, s.seconds
            ),
        )
    });
    outcome("end-to-end training", r)
}

/// Every check in order, reporting each as it finishes.
pub fn run_all(mut report: impl FnMut(&CheckResult)) -> Vec<CheckResult> {
    let checks: [fn() -> CheckResult; 7] = [
        wavelet_correctness,
        akm_permutation_recovery,
        measurement_loss_oracle,
        gradient_fidelity,
        wdaf_structure,
        metric_suite,
        training_smoke,
    ];
    checks
        .iter()
        .map(|c| {
            let r = c();
            report(&r);
            r
        })
        .collect()
}

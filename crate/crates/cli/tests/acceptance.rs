//! One line per acceptance criterion; exits non-zero if any fails.

use std::fs;
use std::process::Command;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use iavf_core::akm::{akm_forward_with_alpha, attention_weights, measurement_loss_grad, measurement_loss_with};
use iavf_core::wdaf::wdaf_grad;
use iavf_core::{
    average_precision, dwt2_channelwise, idwt2_channelwise, iou, measurement_loss, wdaf_forward, AkmConfig,
    AlphaWeights, AttentionP, BBox, Branch, Detection, FeatureMap, FlatFeature, GroundTruthBox, Parameterized,
    WdafParams,
};

const BIN: &str = env!("CARGO_BIN_EXE_iavf");

struct Line {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn rand_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureMap::new(c, h, w, data, Branch::FiducialX, 0).unwrap()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

fn wavelet() -> Line {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let (mut rec, mut energy, mut coef) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (c, h, w) = (rng.random_range(1..=4), rng.random_range(1..=16), rng.random_range(1..=16));
        let f = rand_map(&mut rng, c, h, w);
        let wf = dwt2_channelwise(&f);
        let back = idwt2_channelwise(&wf);
        let norm = inf_norm(f.data());
        rec = rec.max(f.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / norm);
        // naive Haar over the edge-replicated map
        let mut e_in = 0.0;
        let mut e_out = 0.0;
        for (ch, q) in wf.quads.iter().enumerate() {
            let px = |y: usize, x: usize| f.get(ch, y.min(h - 1), x.min(w - 1));
            for i in 0..h.div_ceil(2) {
                for j in 0..w.div_ceil(2) {
                    let (a, b, c2, d) = (px(2 * i, 2 * j), px(2 * i, 2 * j + 1), px(2 * i + 1, 2 * j), px(2 * i + 1, 2 * j + 1));
                    e_in += a * a + b * b + c2 * c2 + d * d;
                    let o = i * q.cols + j;
                    let want = [(a + b + c2 + d) / 2.0, (a + b - c2 - d) / 2.0, (a - b + c2 - d) / 2.0, (a - b - c2 + d) / 2.0];
                    for (band, wv) in q.bands().iter().zip(want) {
                        coef = coef.max((band[o] - wv).abs());
                        e_out += band[o] * band[o];
                    }
                }
            }
        }
        energy = energy.max((e_in - e_out).abs() / e_in);
    }
    let secs = t.elapsed().as_secs_f64();
    Line {
        name: "wavelet correctness",
        pass: rec <= 1e-5 && energy <= 1e-5 && coef <= 1e-12 && secs < 5.0,
        detail: format!("reconstruction {rec:.1e}, energy {energy:.1e}, coefficients vs naive {coef:.1e}, {secs:.2}s"),
    }
}

fn permutation() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let cfg = AkmConfig {
        k_top: 1,
        ..AkmConfig::default()
    };
    let (mut exact, mut oracle) = (0, 0);
    for _ in 0..200 {
        let c = rng.random_range(1..=16);
        let (h, w) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let mut mags: Vec<f64> = (0..c).map(|i| 1.0 + i as f64 * 0.25 + rng.random_range(0.0..0.1)).collect();
        mags.shuffle(&mut rng);
        let peaks: Vec<usize> = (0..c).map(|_| rng.random_range(0..h * w)).collect();
        let fx = FeatureMap::from_fn(c, h, w, Branch::FiducialX, 0, |ch, y, x| {
            if y * w + x == peaks[ch] {
                if rng.random_bool(0.5) { mags[ch] } else { -mags[ch] }
            } else {
                rng.random_range(-0.9..0.9)
            }
        });
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut rng);
        let fy = FeatureMap::from_fn(c, h, w, Branch::ComplementaryY, 0, |ch, y, x| fx.get(perm[ch], y, x));
        let out = akm_forward_with_alpha(&fx, &fy, &AlphaWeights::ones(c), &cfg).unwrap();
        exact += (out.data() == fx.data()) as usize;
        let ok = (0..c).all(|i| {
            let ni = inf_norm(fx.channel(i));
            let j = (0..c)
                .min_by(|&a, &b| (ni - inf_norm(fy.channel(a))).abs().total_cmp(&(ni - inf_norm(fy.channel(b))).abs()))
                .unwrap();
            out.channel(i) == fy.channel(j)
        });
        oracle += ok as usize;
    }
    Line {
        name: "AKM permutation recovery",
        pass: exact == 200 && oracle == 200,
        detail: format!("bit-exact {exact}/200, nearest-norm oracle {oracle}/200"),
    }
}

fn flat(rng: &mut ChaCha8Rng, rows: usize, len: usize) -> FlatFeature {
    FlatFeature::new(rows, len, 1, (0..rows * len).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}

fn eq3() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let (m, n, l) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=16));
        let (fx, fy) = (flat(&mut rng, m, l), flat(&mut rng, n, l));
        let alpha: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let got = measurement_loss(&fx, &fy, &AlphaWeights::new(alpha.clone()).unwrap()).unwrap();
        let mut acc = 0.0;
        for i in 0..m {
            for j in 0..n {
                acc += (inf_norm(fx.row(i)) - alpha[j] * inf_norm(fy.row(j))).abs();
            }
        }
        let want = acc / (m * n) as f64;
        worst = worst.max((got - want).abs() / want);
    }
    Line {
        name: "measurement loss oracle",
        pass: worst <= 1e-6,
        detail: format!("500 instances, max relative error {worst:.1e}"),
    }
}

fn rel(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / fd.abs().max(a.abs()).max(1e-3)
}

fn central(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] = x[i] + h;
    let up = f(&p);
    p[i] = x[i] - h;
    (up - f(&p)) / (2.0 * h)
}

fn gradients() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let mut lm_worst = 0.0f64;
    let mut n = 0;
    while n < 100 {
        let (m, c, l) = (rng.random_range(1..=6), rng.random_range(2..=8), rng.random_range(2..=10));
        let (fx, fy) = (flat(&mut rng, m, l), flat(&mut rng, c, l));
        let p = AttentionP::new(vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)], rng.random_range(-0.5..0.5)).unwrap();
        let alpha = attention_weights(&fy, &p).alpha;
        let kink = (0..m)
            .flat_map(|i| (0..c).map(move |j| (i, j)))
            .map(|(i, j)| (inf_norm(fx.row(i)) - alpha[j] * inf_norm(fy.row(j))).abs())
            .fold(f64::INFINITY, f64::min);
        if kink < 1e-3 {
            continue;
        }
        n += 1;
        let g = measurement_loss_grad(&fx, &fy, &p).unwrap().to_vec();
        let x = p.to_vec();
        let mut f = |v: &[f64]| measurement_loss_with(&fx, &fy, &AttentionP::from_slice(v).unwrap()).unwrap();
        for i in 0..x.len() {
            lm_worst = lm_worst.max(rel(g[i], central(&mut f, &x, i, 1e-6)));
        }
    }
    let mut wdaf_worst = 0.0f64;
    for _ in 0..100 {
        let c = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(2..=6), rng.random_range(2..=6));
        let params = WdafParams::init(c, 2 * c, 0.5, &mut rng);
        let (fx, ft, up) = (rand_map(&mut rng, c, h, w), rand_map(&mut rng, c, h, w), rand_map(&mut rng, c, h, w));
        let g = wdaf_grad(&params, &fx, &ft, &up).unwrap().flat();
        let x = params.flat();
        let mut probe = params.clone();
        let mut f = |v: &[f64]| {
            probe.set_flat(v).unwrap();
            let out = wdaf_forward(&fx, &ft, &probe).unwrap();
            out.data().iter().zip(up.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        for _ in 0..16 {
            let i = rng.random_range(0..x.len());
            wdaf_worst = wdaf_worst.max(rel(g[i], central(&mut f, &x, i, 1e-5)));
        }
    }
    Line {
        name: "gradient fidelity",
        pass: lm_worst <= 1e-4 && wdaf_worst <= 1e-4,
        detail: format!("L_m max relative error {lm_worst:.1e}, WDAF readout {wdaf_worst:.1e}, 100 instances each"),
    }
}

fn wdaf_structure() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    let (mut sup, mut ident) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let c = rng.random_range(1..=4);
        let (h, w) = (rng.random_range(1..=10), rng.random_range(1..=10));
        let p = WdafParams::init(c, 2 * c, 1.0, &mut rng);
        let m: Vec<FeatureMap> = (0..4).map(|_| rand_map(&mut rng, c, h, w)).collect();
        let add = |a: &FeatureMap, b: &FeatureMap| a.add(b).unwrap();
        let lhs = wdaf_forward(&add(&m[0], &m[1]), &add(&m[2], &m[3]), &p).unwrap();
        let rhs = add(&wdaf_forward(&m[0], &m[2], &p).unwrap(), &wdaf_forward(&m[1], &m[3], &p).unwrap());
        sup = sup.max(lhs.data().iter().zip(rhs.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let id = wdaf_forward(&m[0], &m[1], &WdafParams::identity_embedding(c, 2 * c)).unwrap();
        ident = ident.max(id.data().iter().zip(m[0].data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    Line {
        name: "WDAF structural checks",
        pass: sup <= 1e-5 && ident <= 1e-5,
        detail: format!("superposition {sup:.1e}, identity embedding {ident:.1e}"),
    }
}

/// VOC devkit style: greedy matching, then the monotone precision envelope.
fn voc_ap(dets: &[Detection], gts: &[GroundTruthBox]) -> f64 {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap().then(a.cmp(&b)));
    let mut seen = vec![false; gts.len()];
    let (mut tp, mut fp) = (Vec::new(), Vec::new());
    for &d in &idx {
        let ious: Vec<f64> = gts.iter().map(|g| iou(&dets[d].bbox, &g.bbox).unwrap()).collect();
        let mut jmax = 0;
        for (j, v) in ious.iter().enumerate() {
            if *v > ious[jmax] {
                jmax = j;
            }
        }
        let hit = ious[jmax] >= 0.5 && !seen[jmax];
        if hit {
            seen[jmax] = true;
        }
        tp.push(hit as usize);
        fp.push(!hit as usize);
    }
    let (mut ctp, mut cfp) = (0, 0);
    let mut mrec = vec![0.0];
    let mut mpre = vec![0.0];
    for k in 0..tp.len() {
        ctp += tp[k];
        cfp += fp[k];
        mrec.push(ctp as f64 / gts.len() as f64);
        mpre.push(ctp as f64 / (ctp + cfp) as f64);
    }
    mrec.push(1.0);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..mrec.len() {
        if mrec[i] != mrec[i - 1] {
            ap += (mrec[i] - mrec[i - 1]) * mpre[i];
        }
    }
    ap
}

fn metrics() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(1006);
    let mut same = 0;
    let rbox = |rng: &mut ChaCha8Rng| {
        let (x, y) = (rng.random_range(0.0..8.0), rng.random_range(0.0..8.0));
        BBox::new(x, y, x + rng.random_range(1.0..5.0), y + rng.random_range(1.0..5.0)).unwrap()
    };
    for _ in 0..100 {
        let gts: Vec<GroundTruthBox> = (0..rng.random_range(1..=4)).map(|_| GroundTruthBox { class_id: 0, bbox: rbox(&mut rng) }).collect();
        let dets: Vec<Detection> = (0..rng.random_range(0..=6))
            .map(|_| {
                let bbox = if rng.random_bool(0.5) {
                    let g = gts.choose(&mut rng).unwrap().bbox;
                    let d = rng.random_range(-0.6..0.6);
                    BBox::new(g.x1 + d, g.y1 + d, g.x2 + d, g.y2 + d).unwrap()
                } else {
                    rbox(&mut rng)
                };
                Detection { class_id: 0, bbox, confidence: rng.random_range(0..4) as f64 * 0.25 }
            })
            .collect();
        same += (average_precision(&dets, &gts, 0.5).unwrap().to_bits() == voc_ap(&dets, &gts).to_bits()) as usize;
    }
    let b = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
    let gt = [GroundTruthBox { class_id: 0, bbox: b }];
    let one = average_precision(&[Detection { class_id: 0, bbox: b, confidence: 0.7 }], &gt, 0.5) == Some(1.0);
    let zero = average_precision(&[], &gt, 0.5) == Some(0.0);
    let seventh = iou(&b, &BBox::new(1.0, 1.0, 3.0, 3.0).unwrap()).unwrap() == 1.0 / 7.0;
    Line {
        name: "metric suite",
        pass: same == 100 && one && zero && seventh,
        detail: format!("PR oracle {same}/100 bit-exact, AP=1 {one}, AP=0 {zero}, IoU=1/7 {seventh}"),
    }
}

fn run(args: &[&str]) -> (bool, String) {
    let out = Command::new(BIN).args(args).output().expect("spawn iavf");
    (out.status.success(), String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr))
}

fn training() -> Line {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
    fs::write(p("cfg.json"), r#"{"seed": 42, "image_size": 64, "parallax": "large", "epochs": 10}"#).unwrap();
    let mut secs = Vec::new();
    for tag in ["a", "b"] {
        let t = Instant::now();
        let (ok, log) = run(&["train", "--config", &p("cfg.json"), "--out-weights", &p(&format!("w{tag}.bin")), "--log", &p(&format!("{tag}.jsonl")), "--train-samples", "200"]);
        if !ok {
            return Line { name: "end-to-end training", pass: false, detail: format!("train failed: {log}") };
        }
        secs.push(t.elapsed().as_secs_f64());
    }
    let (a, b) = (fs::read(p("a.jsonl")).unwrap(), fs::read(p("b.jsonl")).unwrap());
    let identical = a == b && fs::read(p("wa.bin")).unwrap() == fs::read(p("wb.bin")).unwrap();
    let recs: Vec<serde_json::Value> = String::from_utf8(a).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let lm = |r: &serde_json::Value| {
        let v = r["lm_per_scale"].as_array().unwrap();
        v.iter().map(|x| x.as_f64().unwrap()).sum::<f64>() / v.len() as f64
    };
    let ratio = lm(recs.last().unwrap()) / lm(&recs[0]);
    let (ok, log) = run(&["eval", "--weights", &p("wa.bin"), "--config", &p("cfg.json"), "--report", &p("r.json"), "--test-samples", "50"]);
    if !ok {
        return Line { name: "end-to-end training", pass: false, detail: format!("eval failed: {log}") };
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("r.json")).unwrap()).unwrap();
    let map = report["mAP@.50"].as_f64().unwrap();
    let slowest = secs.iter().copied().fold(0.0, f64::max);
    Line {
        name: "end-to-end training",
        pass: ratio <= 0.5 && map >= 0.6 && identical && slowest < 600.0,
        detail: format!(
            "(a) L_m final/initial {ratio:.3} (b) mAP@.50 {map:.4} (c) identical logs {identical}; {slowest:.0}s per run"
        ),
    }
}

fn selftest() -> Line {
    let (ok, out) = run(&["selftest"]);
    let summary = out.lines().last().unwrap_or("").to_string();
    Line { name: "selftest command", pass: ok, detail: summary }
}

fn main() {
    let checks: [fn() -> Line; 8] = [wavelet, permutation, eq3, gradients, wdaf_structure, metrics, training, selftest];
    let mut failed = 0;
    for c in checks {
        let l = c();
        failed += !l.pass as usize;
        println!("{} {}: {}", if l.pass { "PASS" } else { "FAIL" }, l.name, l.detail);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

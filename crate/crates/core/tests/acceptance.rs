//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use common::*;
use rand::Rng;
use ssm_ptq::archive::Archive;
use ssm_ptq::harness::{
    ablation_experiment, build_hooks, calibrate, check_policy, evaluate_against, make_outlier_model,
    pick_outlier_channels, AblationScope, Baseline, Corpus, QuantConfig, Scope, WeightGranularity,
};
use ssm_ptq::mamba::{block_forward, model_forward, HookSet, MambaModel, ModelConfig, NoObserver, TapId, TapPoint};
use ssm_ptq::outlier::{detect_all, detect_outliers, ChannelStats, StatBasis};
use ssm_ptq::quant::{dequantize, fake_quant, int_matmul, quantize, quantize_per_tensor, Bits, QuantScheme};
use ssm_ptq::smoothing::{apply_smoothing, smooth_model, SmoothSite};
use ssm_ptq::tensor::{matmul, DType, TensorData};
use ssm_ptq::{Execution, Tensor};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn quant_error_bound() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let n = r.random_range(1..=512);
        let scale = 10f32.powf(r.random_range(-3.0..3.0));
        let mut x = normal_vec(&mut r, n, scale);
        if i % 10 == 0 {
            // heavy-tailed: a few large entries
            for _ in 0..3 {
                let j = r.random_range(0..n);
                x[j] *= 100.0;
            }
        }
        let t = Tensor::new([n], x.clone()).unwrap();
        for bits in [Bits::Int4, Bits::Int8] {
            let fq = fake_quant(&t, QuantScheme::per_tensor(bits)).unwrap();
            let absmax = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            let ulp = absmax as f64 * f32::EPSILON as f64;
            let bound = absmax as f64 / bits.qmax() as f64 * 0.5 + 4.0 * ulp;
            for (a, b) in x.iter().zip(fq.f32()) {
                let err = (*a as f64 - *b as f64).abs();
                if err > bound {
                    return Err(format!("tensor {i}, {bits:?}: error {err:e} > bound {bound:e}"));
                }
                if bound > 0.0 {
                    worst = worst.max(err / bound);
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 5.0, format!("2000 cases, worst error/bound {worst:.4}, {secs:.2}s"))
}

fn absmax_example() -> Outcome {
    let q = quantize_per_tensor(&Tensor::new([3], vec![1.0, -2.0, 4.0]).unwrap(), Bits::Int8).unwrap();
    let values = q.values.ints().unwrap().to_vec();
    check(
        values == [32, -64, 127] && q.scales == [31.75],
        format!("values {values:?}, scale {:?}", q.scales),
    )
}

fn int_matmul_equivalence() -> Outcome {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let (m, k, n) = (r.random_range(1..=16), r.random_range(1..=64), r.random_range(1..=16));
        let (xs, ws) = (r.random_range(0.1..10.0), r.random_range(0.01..1.0));
        let x = normal_tensor(&mut r, &[m, k], xs);
        let w = normal_tensor(&mut r, &[k, n], ws);
        let bits = if i % 2 == 0 { Bits::Int8 } else { Bits::Int4 };
        let xq = quantize(&x, QuantScheme::per_tensor(Bits::Int8)).unwrap();
        let wscheme = if i % 3 == 0 {
            QuantScheme::per_tensor(bits)
        } else {
            QuantScheme::per_channel(bits, 1)
        };
        let wq = quantize(&w, wscheme).unwrap();
        let got = int_matmul(&xq, &wq).unwrap();
        let want = naive_matmul(
            &to_f64(dequantize(&xq).f32()),
            &to_f64(dequantize(&wq).f32()),
            m,
            k,
            n,
        );
        let rel = rel_frobenius(got.f32(), &want);
        worst = worst.max(rel);
        if rel > 1e-4 {
            return Err(format!("pair {i} ({m}x{k} by {k}x{n}): relative error {rel:e}"));
        }
    }
    Ok(format!("100 pairs, worst relative Frobenius error {worst:.2e}"))
}

fn block_oracle_and_causality() -> Outcome {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let c = random_config(&mut r);
        let m = random_model(c, 100 + i);
        let t_len = r.random_range(1..=12);
        let u = normal_tensor(&mut r, &[t_len, c.d_model], 1.0);
        for (layer, w) in m.layers.iter().enumerate() {
            let got = block_forward(w, &u, layer, &HookSet::new(), &mut NoObserver).unwrap();
            let want = block_oracle(w, u.f32(), t_len);
            let dev = got
                .f32()
                .iter()
                .zip(&want)
                .map(|(&g, w)| (g as f64 - w).abs())
                .fold(0.0, f64::max);
            worst = worst.max(dev);
            if dev > 1e-5 {
                return Err(format!("config {i} {c:?} layer {layer}: max abs deviation {dev:e}"));
            }
        }
        let ids: Vec<u32> = (0..t_len).map(|_| r.random_range(0..c.vocab_size as u32)).collect();
        let base = model_forward(&m, &ids, &HookSet::new()).unwrap();
        let v = c.vocab_size;
        for t in 0..t_len {
            let mut ids2 = ids.clone();
            ids2[t] = (ids2[t] + 1) % v as u32;
            let out = model_forward(&m, &ids2, &HookSet::new()).unwrap();
            if out.f32()[..t * v] != base.f32()[..t * v] {
                return Err(format!("config {i}: perturbing token {t} changed earlier logits"));
            }
        }
    }
    Ok(format!("20 configs, worst max abs deviation {worst:.2e}, causality bitwise"))
}

fn outlier_model_setup(seed: u64) -> (MambaModel, Vec<usize>, Corpus, Corpus) {
    let c = ModelConfig::new(2, 64, 256);
    let channels = pick_outlier_channels(c.d_inner, 0.01, seed).unwrap();
    let m = make_outlier_model(c, &channels, 50.0, seed).unwrap();
    let (calib, eval) = Corpus::synthetic(c.vocab_size, 16, 64, seed + 1000).split(0.5).unwrap();
    (m, channels, calib, eval)
}

fn detector() -> Outcome {
    let mut v = vec![1.0f32; 100];
    v.push(50.0);
    let mut s = ChannelStats::empty(TapId::new(0, TapPoint::InProjOut), 101);
    s.record(&Tensor::new([1, 101], v).unwrap()).unwrap();
    let rep = detect_outliers(&s, 6.0, StatBasis::ChannelAbsmax).unwrap();
    if (rep.threshold - 30.594).abs() > 1e-3 || rep.outlier_channels != [100] {
        return Err(format!(
            "worked example: threshold {:.4}, outliers {:?}",
            rep.threshold, rep.outlier_channels
        ));
    }
    // recovery on synthetic models: 1% of a 400-wide inner dimension
    let c = ModelConfig::new(2, 200, 256);
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for seed in 0..10 {
        let injected = pick_outlier_channels(c.d_inner, 0.01, seed).unwrap();
        let m = make_outlier_model(c, &injected, 50.0, seed).unwrap();
        let corpus = Corpus::synthetic(c.vocab_size, 4, 64, seed);
        let stats = calibrate(&m, &corpus, Execution::default()).unwrap();
        for layer in 0..c.n_layers {
            let tap = TapId::new(layer, TapPoint::InProjOut);
            let found = detect_outliers(stats.get(tap).unwrap(), 6.0, StatBasis::ChannelAbsmax)
                .unwrap()
                .outlier_channels;
            tp += found.iter().filter(|f| injected.contains(f)).count();
            fp += found.iter().filter(|f| !injected.contains(f)).count();
            fneg += injected.iter().filter(|i| !found.contains(i)).count();
        }
    }
    let precision = tp as f64 / (tp + fp).max(1) as f64;
    let recall = tp as f64 / (tp + fneg).max(1) as f64;
    check(
        precision == 1.0 && recall == 1.0 && tp > 0,
        format!(
            "threshold {:.4}, one outlier; synth recovery precision {precision} recall {recall} ({tp} channels)",
            rep.threshold
        ),
    )
}

fn smoothing_identity() -> Outcome {
    let mut r = rng(5);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let (m, k, n) = (r.random_range(1..=16), r.random_range(1..=32), r.random_range(1..=16));
        let x = normal_tensor(&mut r, &[m, k], 3.0);
        let w = normal_tensor(&mut r, &[k, n], 0.3);
        let s: Vec<f32> = (0..k).map(|_| 10f32.powf(r.random_range(-1.0..1.0))).collect();
        let xs = Tensor::new([m, k], x.f32().iter().enumerate().map(|(j, v)| v / s[j % k]).collect()).unwrap();
        let ws = Tensor::new([k, n], w.f32().iter().enumerate().map(|(j, v)| v * s[j / n]).collect()).unwrap();
        let got = matmul(&xs, &ws).unwrap();
        let want = naive_matmul(&to_f64(x.f32()), &to_f64(w.f32()), m, k, n);
        let rel = rel_frobenius(got.f32(), &want);
        worst = worst.max(rel);
        if rel > 1e-4 {
            return Err(format!("triple {i}: relative error {rel:e}"));
        }
    }
    let mut worst_model = 0.0f64;
    for seed in 0..10 {
        let c = ModelConfig::new(2, 16 + 8 * (seed as usize % 3), 48);
        let m = random_model(c, seed);
        let corpus = Corpus::synthetic(c.vocab_size, 4, 16, seed);
        let stats = calibrate(&m, &corpus, Execution::default()).unwrap();
        let (sm, _) = smooth_model(&m, &stats, 0.5, &SmoothSite::ALL).unwrap();
        let mut rr = rng(seed);
        let extra: Vec<_> = (0..c.n_layers)
            .map(|layer| ssm_ptq::smoothing::SmoothingFactors {
                tap: TapId::new(layer, TapPoint::InProjOut),
                site: SmoothSite::ConvIn,
                alpha: 0.5,
                s: (0..c.d_inner).map(|_| rr.random_range(0.2f32..5.0)).collect(),
            })
            .collect();
        let sm = apply_smoothing(&sm, &extra).unwrap();
        for seq in &corpus.sequences {
            let a = model_forward(&m, seq, &HookSet::new()).unwrap();
            let b = model_forward(&sm, seq, &HookSet::new()).unwrap();
            let scale = a.abs_max() as f64;
            let dev = a
                .f32()
                .iter()
                .zip(b.f32())
                .map(|(x, y)| (*x as f64 - *y as f64).abs())
                .fold(0.0, f64::max)
                / scale;
            worst_model = worst_model.max(dev);
        }
    }
    check(
        worst_model <= 1e-4,
        format!("100 triples worst {worst:.2e}; 10 smoothed models worst relative logit deviation {worst_model:.2e}"),
    )
}

fn smoothing_benefit() -> Outcome {
    let start = Instant::now();
    let naive_cfg = QuantConfig::parse("W8A8", Scope::Mlp).unwrap();
    let smooth_cfg = naive_cfg.with_alpha(0.5);
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..10 {
        let (m, _, calib, eval) = outlier_model_setup(seed);
        let stats = calibrate(&m, &calib, Execution::default()).unwrap();
        let baseline = Baseline::compute(&m, &eval, Execution::default()).unwrap();
        let mse = |cfg: &QuantConfig| {
            let q = build_hooks(cfg, &m, Some(&stats)).unwrap();
            evaluate_against(&baseline, &q.model, &q.hooks, Execution::default())
                .unwrap()
                .metrics
                .mse
        };
        let (naive, smooth) = (mse(&naive_cfg), mse(&smooth_cfg));
        if smooth < naive {
            wins += 1;
        }
        rows.push(format!("{:.2}x", naive / smooth));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        wins >= 9 && secs < 120.0,
        format!("{wins}/10 seeds improved, naive/smoothed MSE [{}], {secs:.1}s", rows.join(" ")),
    )
}

fn fidelity_ordering() -> Outcome {
    let mut models = Vec::new();
    for seed in 0..6 {
        let c = ModelConfig::new(2, 32, 64);
        models.push((format!("random {seed}"), random_model(c, seed)));
    }
    for seed in 0..4 {
        models.push((format!("outlier {seed}"), outlier_model_setup(seed).0));
    }
    let mut ratios = Vec::new();
    for (name, m) in &models {
        let corpus = Corpus::synthetic(m.config.vocab_size, 6, 32, 7);
        let baseline = Baseline::compute(m, &corpus, Execution::default()).unwrap();
        for scope in [Scope::Mlp, Scope::All] {
            for weights in [WeightGranularity::PerChannel, WeightGranularity::PerTensor] {
                let mse = |n: &str| {
                    let mut cfg = QuantConfig::parse(n, scope).unwrap();
                    cfg.weights = weights;
                    let q = build_hooks(&cfg, m, None).unwrap();
                    evaluate_against(&baseline, &q.model, &q.hooks, Execution::default())
                        .unwrap()
                        .metrics
                        .mse
                };
                let (w8, w4) = (mse("W8"), mse("W4"));
                if w4.partial_cmp(&w8) != Some(std::cmp::Ordering::Greater) {
                    return Err(format!("{name} {scope} {weights:?}: MSE(W4) {w4:e} <= MSE(W8) {w8:e}"));
                }
                ratios.push(w4 / w8);
            }
        }
    }
    let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(format!("{} model/scope cells, min MSE(W4)/MSE(W8) {min:.1}", ratios.len()))
}

fn ablation_analogue() -> Outcome {
    let (mut drop_outlier, mut drop_random) = (0.0, 0.0);
    for seed in 0..10 {
        let (m, _, calib, eval) = outlier_model_setup(seed);
        let stats = calibrate(&m, &calib, Execution::default()).unwrap();
        let reports = detect_all(&stats, 6.0, StatBasis::ChannelAbsmax).unwrap();
        let baseline = Baseline::compute(&m, &eval, Execution::default()).unwrap();
        let r = ablation_experiment(&m, &baseline, &reports, AblationScope::All, seed, Execution::default()).unwrap();
        if r.n_zeroed == 0 {
            return Err(format!("seed {seed}: no outliers detected"));
        }
        drop_outlier += 1.0 - r.outlier.top1_agreement;
        drop_random += 1.0 - r.random.top1_agreement;
    }
    let (o, r) = (drop_outlier / 10.0, drop_random / 10.0);
    check(o > r, format!("mean top-1 drop: outliers zeroed {o:.3}, random zeroed {r:.3}"))
}

fn archive_format() -> Outcome {
    let mut r = rng(9);
    let mut tensors = BTreeMap::new();
    for i in 0..1000 {
        let rank = r.random_range(1..=3);
        let shape: Vec<usize> = (0..rank).map(|_| r.random_range(1..=6)).collect();
        let n: usize = shape.iter().product();
        let t = match i % 3 {
            0 => Tensor::new(shape, (0..n).map(|_| f32::from_bits(r.random::<u32>() & 0x7f7f_ffff)).collect()).unwrap(),
            1 => Tensor::from_data(shape, TensorData::I8((0..n).map(|_| r.random_range(-127..=127)).collect())).unwrap(),
            _ => Tensor::from_data(shape, TensorData::I4((0..n).map(|_| r.random_range(-7..=7)).collect())).unwrap(),
        };
        tensors.insert(format!("t{i:04}.{}", t.dtype().name()), t);
    }
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.sptq"), dir.path().join("b.sptq"));
    Archive::new(tensors.clone()).save(&p1).unwrap();
    let back = Archive::load(&p1).unwrap();
    let bitwise = back.tensors.len() == 1000
        && tensors.iter().all(|(k, t)| {
            let b = &back.tensors[k];
            b.shape() == t.shape()
                && b.dtype() == t.dtype()
                && match (t.data(), b.data()) {
                    (TensorData::F32(x), TensorData::F32(y)) => {
                        x.iter().map(|v| v.to_bits()).eq(y.iter().map(|v| v.to_bits()))
                    }
                    (x, y) => x == y,
                }
        });
    back.save(&p2).unwrap();
    let same = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();
    let dtypes = [DType::F32, DType::I8, DType::I4]
        .iter()
        .all(|d| back.tensors.values().any(|t| t.dtype() == *d));
    check(
        bitwise && same && dtypes,
        format!("1000 tensors bitwise {bitwise}, re-save byte-identical {same}"),
    )
}

fn policy_structural() -> Outcome {
    let (m, _, calib, _) = outlier_model_setup(0);
    let stats = calibrate(&m, &calib, Execution::default()).unwrap();
    let mut n = 0;
    for notation in ["FP", "W8", "W4", "W8A8", "W4A8"] {
        for scope in [Scope::Mlp, Scope::All] {
            for alpha in [None, Some(0.0), Some(0.5), Some(1.0)] {
                for ablate in [None, Some(AblationScope::In), Some(AblationScope::All)] {
                    let mut cfg = QuantConfig::parse(notation, scope).unwrap();
                    cfg.smooth_alpha = alpha;
                    if let Some(a) = ablate {
                        cfg = cfg.with_ablation(a);
                    }
                    let q = build_hooks(&cfg, &m, Some(&stats)).map_err(|e| format!("{cfg}: {e}"))?;
                    check_policy(&q.hooks).map_err(|e| format!("{cfg}: {e}"))?;
                    for tap in q.hooks.quantized_taps() {
                        if !tap.point.is_linear_output() {
                            return Err(format!("{cfg}: fake quantization at {tap}"));
                        }
                    }
                    let quantized_points: Vec<TapPoint> =
                        q.hooks.quantized_taps().iter().map(|t| t.point).collect();
                    if quantized_points.contains(&TapPoint::SsmOut) {
                        return Err(format!("{cfg}: scan output quantized"));
                    }
                    if cfg.abits.is_some() && q.hooks.quantized_taps().len() != 4 * m.config.n_layers {
                        return Err(format!("{cfg}: expected four quantized taps per layer"));
                    }
                    n += 1;
                }
            }
        }
    }
    Ok(format!("{n} configurations, fake quantization only at projection outputs"))
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 11] = [
        ("quantization error bound", quant_error_bound),
        ("absmax worked example", absmax_example),
        ("integer matmul equivalence", int_matmul_equivalence),
        ("block oracle and causality", block_oracle_and_causality),
        ("outlier detector", detector),
        ("smoothing identity", smoothing_identity),
        ("smoothing benefit", smoothing_benefit),
        ("fidelity ordering W4 vs W8", fidelity_ordering),
        ("outlier ablation analogue", ablation_analogue),
        ("archive format", archive_format),
        ("policy structural check", policy_structural),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.2}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{secs:.2}s]");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

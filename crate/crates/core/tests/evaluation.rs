// SPDX-License-Identifier: MIT OR Apache-2.0

use latent_bridge::eval::{
    alignment_report, asymmetry, asymmetry_of, cosine, effect_size, random_baseline, shift_score,
    steering_metrics, symmetric_kl, AlignmentReport, Baseline, BaselineKind, EvalReport,
};
use latent_bridge::injection::InjectionPolicy;
use latent_bridge::model::{GenerateOptions, ToyModel, ToyModelConfig};
use latent_bridge::text::encode;
use latent_bridge::translator::{init_translator, TranslatorConfig, TranslatorParams};
use latent_bridge::{BridgeError, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn translator(d_src: usize, d_tgt: usize, seed: u64) -> TranslatorParams {
    init_translator(&TranslatorConfig {
        d_src,
        d_tgt,
        d_hidden: 8,
        n_heads: 2,
        n_slots: 2,
        seed,
    })
    .unwrap()
}

#[test]
fn cosine_examples() {
    let v = [0.3f32, -1.7, 2.2, 0.05];
    let neg: Vec<f32> = v.iter().map(|x| -x).collect();
    assert_eq!(cosine(&v, &v).unwrap(), 1.0);
    assert_eq!(cosine(&v, &neg).unwrap(), -1.0);
    assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
    assert!(matches!(
        cosine(&[0.0, 0.0], &[1.0, 1.0]),
        Err(BridgeError::ZeroNorm { .. })
    ));
}

#[test]
fn report_statistics_match_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [2usize, 5, 12] {
        let sims: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = AlignmentReport::from_similarities("forward", sims.clone()).unwrap();
        let mut total = 0.0;
        for s in &sims {
            total += s;
        }
        let mean = total / n as f64;
        let mut ss = 0.0;
        for s in &sims {
            ss += (s - mean) * (s - mean);
        }
        let std = (ss / n as f64).sqrt();
        assert!((r.mean - mean).abs() < 1e-9);
        assert!((r.std_population - std).abs() < 1e-9);
        assert!((r.std_sample - (ss / (n as f64 - 1.0)).sqrt()).abs() < 1e-9);
        let half = 1.96 * std / (n as f64).sqrt();
        assert!(
            (r.ci95[0] - (mean - half)).abs() < 1e-12 && (r.ci95[1] - (mean + half)).abs() < 1e-12
        );
        let (lo, hi) = sims
            .iter()
            .fold((1.0f64, -1.0f64), |(a, b), &s| (a.min(s), b.max(s)));
        assert!(lo <= r.mean && r.mean <= hi);
        assert!(r.ci95[0] <= r.mean && r.mean <= r.ci95[1]);
    }
    let same = AlignmentReport::from_similarities("forward", vec![1.0; 4]).unwrap();
    assert_eq!((same.mean, same.std_population), (1.0, 0.0));
    assert!(AlignmentReport::from_similarities("forward", vec![0.5]).is_err());
    assert!(AlignmentReport::from_similarities("forward", vec![0.5, 1.5]).is_err());
}

#[test]
fn reported_table_statistics() {
    let r = AlignmentReport::from_similarities("forward", vec![0.629, 0.594, 0.393, 0.535, 0.539])
        .unwrap();
    assert!((r.mean - 0.538).abs() < 1e-3);
    assert!((r.std_population - 0.081).abs() < 1e-3);
    assert_eq!(
        format!("{:.2}", asymmetry_of(0.683, 0.339).unwrap()),
        "2.01"
    );
    assert_eq!(
        format!("{:.2}", asymmetry_of(0.758, 0.375).unwrap()),
        "2.02"
    );
    assert_eq!(format!("{:.2}", effect_size(0.629, 0.1).unwrap()), "6.29");
    assert_eq!(format!("{:.2}", effect_size(0.538, 0.1).unwrap()), "5.38");
}

#[test]
fn ratio_properties() {
    assert_eq!(asymmetry_of(0.4, 0.4), Some(1.0));
    assert_eq!(asymmetry_of(0.4, 0.0), None);
    assert_eq!(asymmetry_of(0.4, -0.2), None);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let a =
            AlignmentReport::from_similarities("f", vec![rng.random_range(0.01..1.0); 2]).unwrap();
        let b =
            AlignmentReport::from_similarities("r", vec![rng.random_range(0.01..1.0); 2]).unwrap();
        let product = asymmetry(&a, &b).unwrap() * asymmetry(&b, &a).unwrap();
        assert!((product - 1.0).abs() < 1e-9);
    }
    assert_eq!(effect_size(0.3, 0.3).unwrap(), 1.0);
    assert!(effect_size(0.3, 0.0).is_err());
    assert!(effect_size(0.3, -1.0).is_err());
}

#[test]
fn alignment_report_over_a_translator() {
    let t = translator(6, 5, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, 4, 6);
    let pred = t.translate_batch(&x).unwrap();
    let r = alignment_report(&t, &x, &pred, "forward").unwrap();
    assert!(r.per_pair.iter().all(|&c| (c - 1.0).abs() < 1e-6));
    let mut zeroed = random(&mut rng, 4, 5);
    zeroed.row_slice_mut(2).fill(0.0);
    let err = alignment_report(&t, &x, &zeroed, "forward").unwrap_err();
    assert!(matches!(err, BridgeError::ZeroNorm { ref context } if context.contains('2')));
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn baseline_matches_brute_force_mispairings() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (n, count) in [(2usize, 1usize), (3, 2), (4, 9), (5, 44), (6, 265)] {
        let t = translator(6, 5, n as u64);
        let x = random(&mut rng, n, 6);
        let y = random(&mut rng, n, 5);
        let pred = t.translate_batch(&x).unwrap();
        let mispairings: Vec<Vec<usize>> = permutations(n)
            .into_iter()
            .filter(|p| p.iter().enumerate().all(|(i, &j)| i != j))
            .collect();
        assert_eq!(mispairings.len(), count);
        let mut total = 0.0;
        for p in &mispairings {
            let score: f64 = p
                .iter()
                .enumerate()
                .map(|(i, &j)| cosine(pred.row_slice(j), y.row_slice(i)).unwrap())
                .sum();
            total += score / n as f64;
        }
        let want = total / count as f64;
        let got = random_baseline(&t, &x, &y, count, 99).unwrap();
        assert!((got - want).abs() < 1e-9, "n={n}: {got} vs {want}");
    }
}

#[test]
fn baseline_is_seeded_and_validated() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = translator(6, 5, 1);
    let (x, y) = (random(&mut rng, 12, 6), random(&mut rng, 12, 5));
    let a = random_baseline(&t, &x, &y, 50, 7).unwrap();
    assert_eq!(a, random_baseline(&t, &x, &y, 50, 7).unwrap());
    assert_ne!(a, random_baseline(&t, &x, &y, 50, 8).unwrap());
    assert!(random_baseline(&t, &x, &y, 0, 7).is_err());
    assert!(random_baseline(&t, &x.clone(), &y, 10, 7).is_ok());
    let one = random(&mut rng, 1, 6);
    assert!(matches!(
        random_baseline(&t, &one, &random(&mut rng, 1, 5), 10, 7),
        Err(BridgeError::Input(_))
    ));
}

/// Maps the standard basis of the source space onto mutually orthogonal
/// outputs: the extractor writes `[x + 8, −x + 8]` (GELU is the identity
/// there), attention is switched off and the generator reads back `x`.
fn basis_preserving(d: usize) -> TranslatorParams {
    let h = 2 * d;
    let mut t = init_translator(&TranslatorConfig {
        d_src: d,
        d_tgt: d,
        d_hidden: h,
        n_heads: 2,
        n_slots: 1,
        seed: 3,
    })
    .unwrap();
    let mut set = |name: &str, f: &dyn Fn(usize, usize) -> f32| {
        let p = t.params_mut().get_mut(name).unwrap();
        let cols = *p.shape().last().unwrap();
        for (ix, v) in p.data_mut().iter_mut().enumerate() {
            *v = f(ix / cols, ix % cols);
        }
    };
    set("extractor.weight", &|i, j| {
        if j == i {
            1.0
        } else if j == i + d {
            -1.0
        } else {
            0.0
        }
    });
    set("extractor.bias", &|_, _| 8.0);
    set("slots.weight", &|i, j| f32::from(i == j));
    set("slots.bias", &|_, _| 0.0);
    set("align.o.weight", &|_, _| 0.0);
    set("align.o.bias", &|_, _| 0.0);
    set("generator.weight", &|i, j| f32::from(i == j));
    set("generator.bias", &|_, _| 0.0);
    t
}

#[test]
fn orthogonal_translations_have_zero_baseline() {
    let d = 4;
    let t = basis_preserving(d);
    let x = Tensor::new(
        vec![d, d],
        (0..d * d).map(|ix| f32::from(ix % (d + 1) == 0)).collect(),
    )
    .unwrap();
    let pred = t.translate_batch(&x).unwrap();
    for n in [3, 4] {
        let rows: Vec<usize> = (0..n).collect();
        let xs = Tensor::from_rows(
            &rows
                .iter()
                .map(|&i| x.row_slice(i).to_vec())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let ys = Tensor::from_rows(
            &rows
                .iter()
                .map(|&i| pred.row_slice(i).to_vec())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let b = random_baseline(&t, &xs, &ys, 1000, 1).unwrap();
        assert!(b.abs() < 1e-6, "{b}");
    }
}

#[test]
fn symmetric_kl_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let p: Vec<f32> = (0..16).map(|_| rng.random_range(-5.0..5.0)).collect();
        let q: Vec<f32> = (0..16).map(|_| rng.random_range(-5.0..5.0)).collect();
        let a = symmetric_kl(&p, &q).unwrap();
        assert!(a >= 0.0);
        assert_eq!(a, symmetric_kl(&q, &p).unwrap());
        assert_eq!(symmetric_kl(&p, &p).unwrap(), 0.0);
    }
    let peaked = [1.0e4f32, 0.0, 0.0];
    let other = [0.0f32, 1.0e4, 0.0];
    let kl = symmetric_kl(&peaked, &other).unwrap();
    assert!(kl.is_finite() && kl > 0.0);
    assert!(symmetric_kl(&peaked, &[0.0; 2]).is_err());
}

#[test]
fn shift_score_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let v = |rng: &mut ChaCha8Rng| {
            (0..6)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<f32>>()
        };
        let (a, b, r) = (v(&mut rng), v(&mut rng), v(&mut rng));
        let s = shift_score(&a, &b, &r).unwrap();
        assert!((-2.0..=2.0).contains(&s));
        assert_eq!(s, -shift_score(&b, &a, &r).unwrap());
        assert_eq!(shift_score(&a, &a, &r).unwrap(), 0.0);
    }
}

fn small_model() -> ToyModel {
    ToyModel::init(ToyModelConfig {
        d_model: 16,
        context_len: 48,
        ..ToyModelConfig::stock(4)
    })
    .unwrap()
}

#[test]
fn steering_identity_and_nonnegativity() {
    let m = small_model();
    let part = encode("solar panels").unwrap();
    let full = encode("solar panels convert sunlight into power").unwrap();
    let v: Vec<f32> = (0..16).map(|i| (i as f32).sin()).collect();
    let opts = GenerateOptions::greedy(6);
    let zero = steering_metrics(
        &m,
        &part,
        &full,
        &v,
        &InjectionPolicy::with_alpha(0.0),
        &opts,
    )
    .unwrap();
    assert!(zero.kl_per_step.iter().all(|&k| k == 0.0));
    assert_eq!(zero.shift_score, 0.0);
    assert_eq!(zero.baseline_text, zero.injected_text);
    let on = steering_metrics(&m, &part, &full, &v, &InjectionPolicy::default(), &opts).unwrap();
    assert_eq!(on.kl_per_step.len(), 6);
    assert!(on.kl_per_step.iter().all(|&k| k >= 0.0));
    assert!(on.mean_kl() > 0.0);
    assert!(steering_metrics(
        &m,
        &part,
        &full,
        &v,
        &InjectionPolicy::default(),
        &GenerateOptions::greedy(0)
    )
    .is_err());
    assert!(steering_metrics(
        &m,
        &part,
        &full,
        &v[..8],
        &InjectionPolicy::default(),
        &opts
    )
    .is_err());
}

#[test]
fn report_json_carries_both_statistics_and_baseline_kind() {
    let fwd = AlignmentReport::from_similarities("forward", vec![0.5, 0.7]).unwrap();
    let rev = AlignmentReport::from_similarities("reverse", vec![0.2, 0.4]).unwrap();
    let base = Baseline {
        kind: BaselineKind::EmpiricalRandom,
        value: 0.2,
    };
    let r = EvalReport::new(fwd.clone(), base, asymmetry(&fwd, &rev), None);
    assert!((r.effect_size.unwrap() - 3.0).abs() < 1e-12);
    assert!((r.asymmetry.unwrap() - 2.0).abs() < 1e-12);
    let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(json["baseline"]["kind"], "empirical_random");
    assert_eq!(json["direction"], "forward");
    assert!(json.get("steering").is_none());
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Alignment statistics, asymmetry, effect size, random baselines and
//! steering metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BridgeError, Result};
use crate::injection::InjectionPolicy;
use crate::model::{GenerateOptions, Injection, ToyModel};
use crate::tensor::Tensor;
use crate::text::decode;
use crate::translator::TranslatorParams;

/// z-value of a two-sided 95% normal interval.
pub const Z95: f64 = 1.96;
/// Probability floor added before computing KL divergences.
pub const KL_SMOOTHING: f64 = 1e-9;
/// Largest pair count for which every mispairing is enumerated.
const EXHAUSTIVE_MAX: usize = 8;

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(BridgeError::Dimension {
            context: "cosine".into(),
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(BridgeError::ZeroNorm {
            context: "in cosine".into(),
        });
    }
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Row-wise cosines of two equally shaped matrices.
pub fn row_cosines(pred: &Tensor, target: &Tensor) -> Result<Vec<f64>> {
    if pred.shape() != target.shape() {
        return Err(BridgeError::shape(
            "row_cosines",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    (0..pred.rows())
        .map(|i| {
            cosine(pred.row_slice(i), target.row_slice(i)).map_err(|e| match e {
                BridgeError::ZeroNorm { .. } => BridgeError::ZeroNorm {
                    context: format!("in pair {i}"),
                },
                other => other,
            })
        })
        .collect()
}

pub fn mean_cosine(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let c = row_cosines(pred, target)?;
    if c.is_empty() {
        return Err(BridgeError::Input("mean cosine of an empty batch".into()));
    }
    Ok(c.iter().sum::<f64>() / c.len() as f64)
}

/// Summary statistics of per-pair cosine similarities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub direction: String,
    pub per_pair: Vec<f64>,
    pub mean: f64,
    pub std_population: f64,
    pub std_sample: f64,
    /// `mean ± 1.96 · std_population / √N`
    pub ci95: [f64; 2],
}

impl AlignmentReport {
    pub fn from_similarities(direction: impl Into<String>, per_pair: Vec<f64>) -> Result<Self> {
        let n = per_pair.len();
        if n < 2 {
            return Err(BridgeError::Input(format!(
                "alignment statistics need at least 2 pairs, got {n}"
            )));
        }
        if let Some(i) = per_pair.iter().position(|c| !(-1.0..=1.0).contains(c)) {
            return Err(BridgeError::Input(format!(
                "similarity {} of pair {i} outside [-1, 1]",
                per_pair[i]
            )));
        }
        let nf = n as f64;
        let mean = per_pair.iter().sum::<f64>() / nf;
        let ss: f64 = per_pair.iter().map(|c| (c - mean) * (c - mean)).sum();
        let std_population = (ss / nf).sqrt();
        let std_sample = (ss / (nf - 1.0)).sqrt();
        let half = Z95 * std_population / nf.sqrt();
        Ok(AlignmentReport {
            direction: direction.into(),
            per_pair,
            mean,
            std_population,
            std_sample,
            ci95: [mean - half, mean + half],
        })
    }
}

/// Cosine of `translate(inputs_i)` against `targets_i` for every pair.
pub fn alignment_report(
    translator: &TranslatorParams,
    inputs: &Tensor,
    targets: &Tensor,
    direction: impl Into<String>,
) -> Result<AlignmentReport> {
    if inputs.rows() < 2 {
        return Err(BridgeError::Input(format!(
            "alignment report needs at least 2 pairs, got {}",
            inputs.rows()
        )));
    }
    let pred = translator.translate_batch(inputs)?;
    AlignmentReport::from_similarities(direction, row_cosines(&pred, targets)?)
}

/// Ratio of mean alignments, undefined (`None`) when the reverse mean is not positive.
pub fn asymmetry_of(forward_mean: f64, reverse_mean: f64) -> Option<f64> {
    (reverse_mean > 0.0).then(|| forward_mean / reverse_mean)
}

pub fn asymmetry(forward: &AlignmentReport, reverse: &AlignmentReport) -> Option<f64> {
    asymmetry_of(forward.mean, reverse.mean)
}

/// `mean / baseline`.
pub fn effect_size(mean: f64, baseline: f64) -> Result<f64> {
    if !(baseline > 0.0 && baseline.is_finite()) {
        return Err(BridgeError::Input(format!(
            "effect size needs a positive baseline, got {baseline}"
        )));
    }
    Ok(mean / baseline)
}

/// Which baseline a ratio was computed against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// A fixed constant such as 0.1.
    Fixed,
    /// [`random_baseline`] on the evaluated pairs.
    EmpiricalRandom,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub kind: BaselineKind,
    pub value: f64,
}

fn subfactorial(n: usize) -> u64 {
    let (mut a, mut b) = (1u64, 0u64);
    for k in 2..=n as u64 {
        let next = (k - 1) * (a + b);
        a = b;
        b = next;
    }
    if n == 0 {
        1
    } else {
        b
    }
}

fn for_each_derangement(n: usize, visit: &mut impl FnMut(&[usize])) {
    fn rec(pos: usize, perm: &mut Vec<usize>, used: &mut [bool], visit: &mut impl FnMut(&[usize])) {
        let n = used.len();
        if pos == n {
            visit(perm);
            return;
        }
        for j in 0..n {
            if j != pos && !used[j] {
                used[j] = true;
                perm.push(j);
                rec(pos + 1, perm, used, visit);
                perm.pop();
                used[j] = false;
            }
        }
    }
    rec(0, &mut Vec::with_capacity(n), &mut vec![false; n], visit);
}

fn random_derangement(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return p;
        }
    }
}

/// Mean cosine between `translate(inputs_{π(i)})` and `targets_i` over
/// mispairings `π` without fixed points.
///
/// When `n_shuffles` is at least the number of such mispairings and the set
/// is small, every one of them is used exactly once; otherwise `n_shuffles`
/// are drawn uniformly with the given seed.
pub fn random_baseline(
    translator: &TranslatorParams,
    inputs: &Tensor,
    targets: &Tensor,
    n_shuffles: usize,
    seed: u64,
) -> Result<f64> {
    let n = inputs.rows();
    if n < 2 || targets.rows() != n {
        return Err(BridgeError::Input(format!(
            "random baseline needs at least 2 aligned pairs, got {n} inputs and {} targets",
            targets.rows()
        )));
    }
    if n_shuffles == 0 {
        return Err(BridgeError::Config("n_shuffles must be at least 1".into()));
    }
    let pred = translator.translate_batch(inputs)?;
    let mut sim = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sim[i * n + j] = cosine(pred.row_slice(j), targets.row_slice(i))?;
            }
        }
    }
    let score = |perm: &[usize]| {
        perm.iter()
            .enumerate()
            .map(|(i, &j)| sim[i * n + j])
            .sum::<f64>()
            / n as f64
    };

    let (mut total, mut count) = (0.0f64, 0usize);
    if n <= EXHAUSTIVE_MAX && n_shuffles as u64 >= subfactorial(n) {
        for_each_derangement(n, &mut |p| {
            total += score(p);
            count += 1;
        });
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..n_shuffles {
            total += score(&random_derangement(n, &mut rng));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn smoothed_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|&x| (x as f64 - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let norm = 1.0 + KL_SMOOTHING * e.len() as f64;
    e.iter().map(|x| (x / z + KL_SMOOTHING) / norm).collect()
}

/// `KL(p‖q) + KL(q‖p)` of the smoothed softmax distributions of two logit vectors.
pub fn symmetric_kl(p_logits: &[f32], q_logits: &[f32]) -> Result<f64> {
    if p_logits.len() != q_logits.len() {
        return Err(BridgeError::Dimension {
            context: "symmetric KL".into(),
            expected: p_logits.len(),
            actual: q_logits.len(),
        });
    }
    let p = smoothed_softmax(p_logits);
    let q = smoothed_softmax(q_logits);
    let kl: f64 = p
        .iter()
        .zip(&q)
        .map(|(&a, &b)| (a - b) * (a.ln() - b.ln()))
        .sum();
    Ok(kl.max(0.0))
}

/// The three generation conditions and the two steering measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringReport {
    pub kl_per_step: Vec<f64>,
    /// `cos(injected, reference) − cos(baseline, reference)` of extracted
    /// vectors of the three continuations.
    pub shift_score: f64,
    pub baseline_text: String,
    pub injected_text: String,
    pub reference_text: String,
}

impl SteeringReport {
    pub fn mean_kl(&self) -> f64 {
        if self.kl_per_step.is_empty() {
            return 0.0;
        }
        self.kl_per_step.iter().sum::<f64>() / self.kl_per_step.len() as f64
    }
}

/// Semantic vector of a continuation: its last `context_len` tokens.
fn continuation_vector(model: &ToyModel, tokens: &[usize]) -> Result<Vec<f32>> {
    let start = tokens.len().saturating_sub(model.config().context_len);
    model.extract_vector(&tokens[start..])
}

/// Shift toward the reference given the three continuations' vectors.
pub fn shift_score(injected: &[f32], baseline: &[f32], reference: &[f32]) -> Result<f64> {
    Ok(cosine(injected, reference)? - cosine(baseline, reference)?)
}

/// Runs baseline (part prompt), injected (part prompt plus `translated`) and
/// reference (full prompt) generations on the target model.
pub fn steering_metrics(
    model_tgt: &ToyModel,
    part_prompt: &[usize],
    full_prompt: &[usize],
    translated: &[f32],
    policy: &InjectionPolicy,
    opts: &GenerateOptions,
) -> Result<SteeringReport> {
    if opts.steps == 0 {
        return Err(BridgeError::Config(
            "steering needs at least 1 generation step".into(),
        ));
    }
    let injection = Injection {
        policy,
        vector: translated,
    };
    let injected = model_tgt.generate(part_prompt, opts, Some(injection))?;
    let baseline = model_tgt.generate(part_prompt, opts, None)?;
    let reference = model_tgt.generate(full_prompt, opts, None)?;
    let kl_per_step = baseline
        .logits
        .iter()
        .zip(&injected.logits)
        .map(|(p, q)| symmetric_kl(p, q))
        .collect::<Result<Vec<_>>>()?;
    let vb = continuation_vector(model_tgt, &baseline.tokens)?;
    let vi = continuation_vector(model_tgt, &injected.tokens)?;
    let vr = continuation_vector(model_tgt, &reference.tokens)?;
    Ok(SteeringReport {
        kl_per_step,
        shift_score: shift_score(&vi, &vb, &vr)?,
        baseline_text: decode(&baseline.tokens),
        injected_text: decode(&injected.tokens),
        reference_text: decode(&reference.tokens),
    })
}

/// Steering measurements averaged over several prompt pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringSummary {
    pub kl_per_step: Vec<f64>,
    pub shift_score: f64,
    pub prompts: usize,
}

impl SteeringSummary {
    pub fn from_reports(reports: &[SteeringReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| BridgeError::Input("no steering reports to summarise".into()))?;
        let n = reports.len() as f64;
        let mut kl = vec![0.0f64; first.kl_per_step.len()];
        for r in reports {
            for (acc, x) in kl.iter_mut().zip(&r.kl_per_step) {
                *acc += x;
            }
        }
        kl.iter_mut().for_each(|x| *x /= n);
        Ok(SteeringSummary {
            kl_per_step: kl,
            shift_score: reports.iter().map(|r| r.shift_score).sum::<f64>() / n,
            prompts: reports.len(),
        })
    }
}

/// Full evaluation of one translation direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub direction: String,
    pub per_pair: Vec<f64>,
    pub mean: f64,
    pub std_population: f64,
    pub std_sample: f64,
    pub ci95: [f64; 2],
    pub baseline: Baseline,
    /// `mean / baseline.value`; `None` when the baseline is not positive.
    pub effect_size: Option<f64>,
    /// This direction's mean over the opposite direction's; `None` when undefined.
    pub asymmetry: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub steering: Option<SteeringSummary>,
}

impl EvalReport {
    pub fn new(
        report: AlignmentReport,
        baseline: Baseline,
        asymmetry: Option<f64>,
        steering: Option<SteeringSummary>,
    ) -> Self {
        EvalReport {
            effect_size: effect_size(report.mean, baseline.value).ok(),
            direction: report.direction,
            per_pair: report.per_pair,
            mean: report.mean,
            std_population: report.std_population,
            std_sample: report.std_sample,
            ci95: report.ci95,
            baseline,
            asymmetry,
            steering,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

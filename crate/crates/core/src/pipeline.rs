// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration and the command implementations behind the CLI.
//!
//! Every command reads its inputs from files, writes its outputs to files and
//! derives all randomness from the configuration seed. Outputs written by a
//! command that later fails are removed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{BridgeError, Result};
use crate::eval::{
    alignment_report, asymmetry, random_baseline, steering_metrics, Baseline, BaselineKind,
    EvalReport, SteeringReport, SteeringSummary,
};
use crate::injection::InjectionPolicy;
use crate::model::{train_lm, GenerateOptions, LmTrainOptions, ToyModel, ToyModelConfig};
use crate::params::derive_seed;
use crate::store::VectorStore;
use crate::tensor::Tensor;
use crate::text::{
    encode, general_corpus, instruct_corpus, parse_prompts, stock_prompt_text, PromptRecord,
    VOCAB_SIZE,
};
use crate::trainer::{train_bidirectional, Bidirectional, Direction, PairDataset, TrainConfig};
use crate::translator::{TranslatorParams, TranslatorShape};

const STREAM_MODEL_A: u64 = 10;
const STREAM_MODEL_B: u64 = 11;
const STREAM_TRAIN: u64 = 12;
const STREAM_SPLIT: u64 = 13;
const STREAM_BASELINE: u64 = 14;
const STREAM_GENERATION: u64 = 15;

/// Where a language model's training text comes from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    /// The bundled mixed-register prose.
    General,
    /// The bundled instruction / response text.
    Instruct,
    /// A UTF-8 text file.
    File(PathBuf),
}

impl CorpusSource {
    fn read(&self) -> Result<String> {
        match self {
            CorpusSource::General => Ok(general_corpus().to_string()),
            CorpusSource::Instruct => Ok(instruct_corpus().to_string()),
            CorpusSource::File(p) => fs::read_to_string(p).map_err(|e| BridgeError::io(p, e)),
        }
    }
}

/// One language model of the experiment. Its seed is derived from the
/// experiment seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub corpus: CorpusSource,
    pub train: LmTrainOptions,
}

impl ModelSpec {
    pub fn stock(corpus: CorpusSource) -> Self {
        let c = ToyModelConfig::stock(0);
        ModelSpec {
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            context_len: c.context_len,
            corpus,
            train: LmTrainOptions::default(),
        }
    }

    pub fn model_config(&self, seed: u64) -> ToyModelConfig {
        ToyModelConfig {
            vocab_size: VOCAB_SIZE,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            context_len: self.context_len,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSpec {
    pub steps: usize,
    /// 0 means greedy decoding.
    pub temperature: f32,
}

impl Default for GenerationSpec {
    fn default() -> Self {
        GenerationSpec {
            steps: 16,
            temperature: 0.0,
        }
    }
}

/// The whole experiment as one JSON document. Missing fields take their
/// values from [`ExperimentConfig::stock`] with seed 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Every seeded component derives its seed from this value.
    pub seed: u64,
    pub model_a: ModelSpec,
    pub model_b: ModelSpec,
    pub translator: TranslatorShape,
    /// The `seed` field is ignored; training uses a seed derived from [`ExperimentConfig::seed`].
    pub train: TrainConfig,
    pub injection: InjectionPolicy,
    /// Prompt corpus; `None` uses the bundled 60 prompts.
    pub prompts: Option<PathBuf>,
    /// Training share of the prompt pairs.
    pub split_fraction: f64,
    pub baseline_shuffles: usize,
    pub generation: GenerationSpec,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::stock(0)
    }
}

impl ExperimentConfig {
    /// Two stock models (general and instruct) and default training settings.
    pub fn stock(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            model_a: ModelSpec::stock(CorpusSource::General),
            model_b: ModelSpec::stock(CorpusSource::Instruct),
            translator: TranslatorShape::default(),
            train: TrainConfig::default(),
            injection: InjectionPolicy::default(),
            prompts: None,
            split_fraction: 0.8,
            baseline_shuffles: 1000,
            generation: GenerationSpec::default(),
            output_dir: PathBuf::from("out"),
        }
    }

    /// Reads a config file. Relative paths inside it are resolved against the
    /// file's directory and must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| BridgeError::io(path, e))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| BridgeError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.prompts.as_mut() {
            resolve(p);
        }
        for spec in [&mut cfg.model_a, &mut cfg.model_b] {
            if let CorpusSource::File(p) = &mut spec.corpus {
                resolve(p);
            }
        }
        resolve(&mut cfg.output_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut paths: Vec<&Path> = Vec::new();
        if let Some(p) = &self.prompts {
            paths.push(p);
        }
        for spec in [&self.model_a, &self.model_b] {
            if let CorpusSource::File(p) = &spec.corpus {
                paths.push(p);
            }
        }
        if let Some(p) = paths.iter().find(|p| !p.exists()) {
            return Err(BridgeError::Config(format!(
                "{} does not exist",
                p.display()
            )));
        }
        self.model_a.model_config(0).validate()?;
        self.model_b.model_config(0).validate()?;
        self.train.validate()?;
        self.injection.validate()?;
        if self.baseline_shuffles == 0 {
            return Err(BridgeError::Config(
                "baseline_shuffles must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn model_seed(&self, role: ModelRole) -> u64 {
        match role {
            ModelRole::A => derive_seed(self.seed, STREAM_MODEL_A),
            ModelRole::B => derive_seed(self.seed, STREAM_MODEL_B),
        }
    }

    pub fn spec(&self, role: ModelRole) -> &ModelSpec {
        match role {
            ModelRole::A => &self.model_a,
            ModelRole::B => &self.model_b,
        }
    }

    /// Training settings with the derived seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, STREAM_TRAIN),
            ..self.train.clone()
        }
    }

    pub fn prompt_records(&self) -> Result<Vec<PromptRecord>> {
        match &self.prompts {
            Some(p) => parse_prompts(&fs::read_to_string(p).map_err(|e| BridgeError::io(p, e))?),
            None => parse_prompts(stock_prompt_text()),
        }
    }

    fn generate_options(&self) -> GenerateOptions {
        GenerateOptions {
            steps: self.generation.steps,
            temperature: self.generation.temperature,
            seed: derive_seed(self.seed, STREAM_GENERATION),
            record_traces: false,
        }
    }
}

/// Source (`A`) or target (`B`) model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelRole {
    A,
    B,
}

impl ModelRole {
    pub fn label(self) -> &'static str {
        match self {
            ModelRole::A => "a",
            ModelRole::B => "b",
        }
    }
}

/// Files written by one command; removed again unless the command commits.
struct Outputs {
    files: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| BridgeError::io(dir, e))?;
        Ok(Outputs {
            files: Vec::new(),
            committed: false,
        })
    }

    fn write(&mut self, path: PathBuf, bytes: &[u8]) -> Result<PathBuf> {
        binio::write_atomic(&path, bytes)?;
        self.files.push(path.clone());
        Ok(path)
    }

    fn write_json<T: Serialize>(&mut self, path: PathBuf, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(path, text.as_bytes())
    }

    fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.files)
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for f in &self.files {
                let _ = fs::remove_file(f);
            }
        }
    }
}

#[derive(Serialize)]
struct LmHistory<'a> {
    model: &'a str,
    epochs: usize,
    loss: &'a [f32],
}

/// Trains one language model of the experiment.
pub fn train_model(cfg: &ExperimentConfig, role: ModelRole) -> Result<(ToyModel, Vec<f32>)> {
    let spec = cfg.spec(role);
    let corpus = encode(&spec.corpus.read()?)?;
    train_lm(
        &corpus,
        &spec.model_config(cfg.model_seed(role)),
        &spec.train,
    )
}

/// Writes `model_<role>.toym` and its loss history into `out`.
pub fn cmd_train_lm(cfg: &ExperimentConfig, role: ModelRole, out: &Path) -> Result<Vec<PathBuf>> {
    let mut outputs = Outputs::new(out)?;
    let (model, loss) = train_model(cfg, role)?;
    let name = format!("model_{}", role.label());
    outputs.write(out.join(format!("{name}.toym")), &model.to_bytes())?;
    outputs.write_json(
        out.join(format!("{name}_loss.json")),
        &LmHistory {
            model: &name,
            epochs: loss.len(),
            loss: &loss,
        },
    )?;
    Ok(outputs.commit())
}

/// One semantic vector per full prompt, with prompt ids `0..N`.
pub fn extract_store(model: &ToyModel, prompts: &[PromptRecord]) -> Result<VectorStore> {
    let mut rows = Vec::with_capacity(prompts.len());
    for (i, p) in prompts.iter().enumerate() {
        let tokens = encode(&p.full).map_err(|e| BridgeError::Input(format!("prompt {i}: {e}")))?;
        if tokens.len() > model.config().context_len {
            return Err(BridgeError::Input(format!(
                "prompt {i} has {} tokens, context length is {}",
                tokens.len(),
                model.config().context_len
            )));
        }
        rows.push(model.extract_vector(&tokens)?);
    }
    VectorStore::new(
        (0..prompts.len() as u32).collect(),
        Tensor::from_rows(&rows)?,
    )
}

/// Extracts vectors of every prompt under the model at `model_path` into `out`.
pub fn cmd_extract(
    cfg: &ExperimentConfig,
    model_path: &Path,
    out: &Path,
    name: &str,
) -> Result<PathBuf> {
    let model = ToyModel::load(model_path)?;
    let prompts = cfg.prompt_records()?;
    let mut outputs = Outputs::new(out)?;
    let path = outputs.write(
        out.join(format!("{name}.lvec")),
        &extract_store(&model, &prompts)?.to_bytes(),
    )?;
    outputs.commit();
    Ok(path)
}

/// Pairs two stores row by row after checking they describe the same prompts.
pub fn dataset_from_stores(
    cfg: &ExperimentConfig,
    src: &VectorStore,
    tgt: &VectorStore,
) -> Result<PairDataset> {
    if src.ids() != tgt.ids() {
        return Err(BridgeError::Input(
            "source and target stores list different prompt ids".into(),
        ));
    }
    let prompts = cfg.prompt_records()?;
    let texts = src
        .ids()
        .iter()
        .map(|&id| {
            prompts
                .get(id as usize)
                .map(|p| p.full.clone())
                .ok_or_else(|| {
                    BridgeError::Input(format!("prompt id {id} not in the prompt corpus"))
                })
        })
        .collect::<Result<Vec<_>>>()?;
    PairDataset::from_vectors(
        texts,
        src.vectors().clone(),
        tgt.vectors().clone(),
        cfg.split_fraction,
        derive_seed(cfg.seed, STREAM_SPLIT),
    )
}

fn write_translators(outputs: &mut Outputs, out: &Path, b: &Bidirectional) -> Result<()> {
    outputs.write(out.join("forward.lbtr"), &b.forward.to_bytes())?;
    outputs.write(out.join("reverse.lbtr"), &b.reverse.to_bytes())?;
    outputs.write_json(out.join("history_forward.json"), &b.forward_history)?;
    outputs.write_json(out.join("history_reverse.json"), &b.reverse_history)?;
    Ok(())
}

/// Trains both directions from two vector stores.
pub fn cmd_train_translator(
    cfg: &ExperimentConfig,
    src_store: &Path,
    tgt_store: &Path,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let src = VectorStore::load(src_store)?;
    let tgt = VectorStore::load(tgt_store)?;
    let dataset = dataset_from_stores(cfg, &src, &tgt)?;
    let mut outputs = Outputs::new(out)?;
    let b = train_bidirectional(&dataset, &cfg.train_config(), &cfg.translator)?;
    write_translators(&mut outputs, out, &b)?;
    Ok(outputs.commit())
}

fn check_dims(context: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(BridgeError::Dimension {
            context: context.into(),
            expected,
            actual,
        });
    }
    Ok(())
}

/// Translates the source model's vector of `full` and steers the target
/// model's continuation of `part` with it.
pub fn inject_generate(
    cfg: &ExperimentConfig,
    source: &ToyModel,
    target: &ToyModel,
    translator: &TranslatorParams,
    full: &str,
    part: &str,
) -> Result<SteeringReport> {
    check_dims(
        "translator input vs source model",
        source.config().d_model,
        translator.config().d_src,
    )?;
    check_dims(
        "translator output vs target model",
        target.config().d_model,
        translator.config().d_tgt,
    )?;
    let full_tokens = encode(full)?;
    let part_tokens = encode(part)?;
    let v = translator.translate(&source.extract_vector(&full_tokens)?)?;
    steering_metrics(
        target,
        &part_tokens,
        &full_tokens,
        &v,
        &cfg.injection,
        &cfg.generate_options(),
    )
}

/// Loads the three checkpoints, runs the steering protocol and writes `steering.json`.
pub fn cmd_inject_generate(
    cfg: &ExperimentConfig,
    source_model: &Path,
    target_model: &Path,
    translator: &Path,
    full: &str,
    part: &str,
    out: &Path,
) -> Result<PathBuf> {
    let source = ToyModel::load(source_model)?;
    let target = ToyModel::load(target_model)?;
    let translator = TranslatorParams::load(translator)?;
    let report = inject_generate(cfg, &source, &target, &translator, full, part)?;
    let mut outputs = Outputs::new(out)?;
    let path = outputs.write_json(out.join("steering.json"), &report)?;
    outputs.commit();
    Ok(path)
}

/// Reports of both directions, as written to `eval_report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeReport {
    pub forward: EvalReport,
    pub reverse: EvalReport,
}

/// Everything produced by [`run_bridge`].
#[derive(Clone, Debug)]
pub struct BridgeRun {
    pub model_a: ToyModel,
    pub model_b: ToyModel,
    pub dataset: PairDataset,
    pub translators: Bidirectional,
    pub steering: Vec<SteeringReport>,
    pub report: BridgeReport,
    pub files: Vec<PathBuf>,
}

fn evaluate_direction(
    cfg: &ExperimentConfig,
    dataset: &PairDataset,
    translator: &TranslatorParams,
    direction: Direction,
) -> Result<(crate::eval::AlignmentReport, Baseline)> {
    let (x, y) = dataset.oriented(direction, &dataset.heldout);
    let report = alignment_report(translator, &x, &y, direction.label())?;
    let value = random_baseline(
        translator,
        &x,
        &y,
        cfg.baseline_shuffles,
        derive_seed(cfg.seed, STREAM_BASELINE),
    )?;
    Ok((
        report,
        Baseline {
            kind: BaselineKind::EmpiricalRandom,
            value,
        },
    ))
}

/// The full protocol: train both models, extract, train the translators,
/// evaluate both directions on the held-out prompts and steer model B on each
/// held-out prompt. Every artefact is written into `out`.
pub fn run_bridge(cfg: &ExperimentConfig, out: &Path) -> Result<BridgeRun> {
    cfg.validate()?;
    let prompts = cfg.prompt_records()?;
    let mut outputs = Outputs::new(out)?;
    let (model_a, _) = train_model(cfg, ModelRole::A)?;
    outputs.write(out.join("model_a.toym"), &model_a.to_bytes())?;
    let (model_b, _) = train_model(cfg, ModelRole::B)?;
    outputs.write(out.join("model_b.toym"), &model_b.to_bytes())?;

    let store_a = extract_store(&model_a, &prompts)?;
    let store_b = extract_store(&model_b, &prompts)?;
    outputs.write(out.join("vectors_a.lvec"), &store_a.to_bytes())?;
    outputs.write(out.join("vectors_b.lvec"), &store_b.to_bytes())?;
    let dataset = dataset_from_stores(cfg, &store_a, &store_b)?;

    let translators = train_bidirectional(&dataset, &cfg.train_config(), &cfg.translator)?;
    write_translators(&mut outputs, out, &translators)?;

    let (fwd, fwd_base) =
        evaluate_direction(cfg, &dataset, &translators.forward, Direction::Forward)?;
    let (rev, rev_base) =
        evaluate_direction(cfg, &dataset, &translators.reverse, Direction::Reverse)?;

    let opts = cfg.generate_options();
    let mut steering = Vec::with_capacity(dataset.heldout.len());
    for &i in &dataset.heldout {
        let p = &prompts[i];
        let full = encode(&p.full)?;
        let v = translators.forward.translate(dataset.src.row_slice(i))?;
        steering.push(steering_metrics(
            &model_b,
            &encode(&p.part)?,
            &full,
            &v,
            &cfg.injection,
            &opts,
        )?);
    }
    let summary = SteeringSummary::from_reports(&steering)?;

    let report = BridgeReport {
        forward: EvalReport::new(fwd.clone(), fwd_base, asymmetry(&fwd, &rev), Some(summary)),
        reverse: EvalReport::new(rev.clone(), rev_base, asymmetry(&rev, &fwd), None),
    };
    outputs.write_json(out.join("eval_report.json"), &report)?;
    Ok(BridgeRun {
        model_a,
        model_b,
        dataset,
        translators,
        steering,
        report,
        files: outputs.commit(),
    })
}

/// [`run_bridge`] into the configured output directory.
pub fn cmd_eval_bridge(cfg: &ExperimentConfig) -> Result<BridgeRun> {
    run_bridge(cfg, &cfg.output_dir)
}

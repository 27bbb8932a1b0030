// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;

use latent_bridge::model::{LmTrainOptions, ToyModel};
use latent_bridge::pipeline::{
    cmd_extract, cmd_inject_generate, cmd_train_lm, cmd_train_translator, CorpusSource,
    ExperimentConfig, GenerationSpec, ModelRole, ModelSpec,
};
use latent_bridge::store::{VectorStore, HEADER_LEN};
use latent_bridge::text::parse_prompts;
use latent_bridge::trainer::TrainConfig;
use latent_bridge::translator::{TranslatorParams, TranslatorShape};
use latent_bridge::{BridgeError, Tensor};

fn spec(d_model: usize, corpus: CorpusSource) -> ModelSpec {
    ModelSpec {
        d_model,
        n_heads: 2,
        train: LmTrainOptions {
            epochs: 1,
            lr: 3e-3,
            batch_windows: 4,
            stride: 64,
        },
        ..ModelSpec::stock(corpus)
    }
}

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        model_a: spec(16, CorpusSource::General),
        model_b: spec(12, CorpusSource::Instruct),
        translator: TranslatorShape {
            d_hidden: Some(8),
            n_heads: 2,
            n_slots: 2,
        },
        train: TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        },
        baseline_shuffles: 10,
        generation: GenerationSpec {
            steps: 4,
            temperature: 0.0,
        },
        ..ExperimentConfig::stock(2)
    }
}

#[test]
fn store_roundtrip_is_bit_exact() {
    let v = Tensor::new(
        vec![3, 2],
        vec![1.5, -0.0, f32::MIN_POSITIVE, 7.25, -3.0, 1e-30],
    )
    .unwrap();
    let store = VectorStore::new(vec![4, 9, 2], v).unwrap();
    let bytes = store.to_bytes();
    assert_eq!(bytes.len(), HEADER_LEN + 3 * (4 + 2 * 4));
    assert_eq!(&bytes[..4], b"LVEC");
    let back = VectorStore::from_bytes(&bytes).unwrap();
    assert_eq!(back.ids(), &[4, 9, 2]);
    let bits = |s: &VectorStore| {
        s.vectors()
            .data()
            .iter()
            .map(|x| x.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&back), bits(&store));

    assert!(matches!(
        VectorStore::from_bytes(&bytes[..bytes.len() - 1]),
        Err(BridgeError::Format { .. })
    ));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(
        VectorStore::from_bytes(&extra),
        Err(BridgeError::Format { .. })
    ));
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(matches!(
        VectorStore::from_bytes(&magic),
        Err(BridgeError::Format { .. })
    ));
    assert!(VectorStore::new(vec![1], Tensor::zeros(&[2, 3])).is_err());
}

#[test]
fn config_loading_resolves_and_checks_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, r#"{"seed": 5, "output_dir": "results"}"#).unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.output_dir, dir.path().join("results"));
    assert_eq!(cfg.model_a, ExperimentConfig::default().model_a);

    fs::write(&path, r#"{"prompts": "missing.txt"}"#).unwrap();
    assert!(matches!(
        ExperimentConfig::load(&path),
        Err(BridgeError::Config(_))
    ));
    fs::write(&path, r#"{"train": {"epochs": 0}}"#).unwrap();
    assert!(ExperimentConfig::load(&path).is_err());
    fs::write(&path, "{ not json").unwrap();
    assert!(ExperimentConfig::load(&path).is_err());
    assert!(matches!(
        ExperimentConfig::load(&dir.path().join("absent.json")),
        Err(BridgeError::Io { .. })
    ));

    let json = small_config().to_json().unwrap();
    fs::write(&path, json).unwrap();
    let mut loaded = ExperimentConfig::load(&path).unwrap();
    loaded.output_dir = small_config().output_dir;
    assert_eq!(loaded, small_config());
}

#[test]
fn commands_chain_through_files() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();

    let a_files = cmd_train_lm(&cfg, ModelRole::A, out).unwrap();
    let b_files = cmd_train_lm(&cfg, ModelRole::B, out).unwrap();
    assert_eq!(a_files[0], out.join("model_a.toym"));
    assert!(out.join("model_b_loss.json").exists() && b_files.len() == 2);
    let model_a = ToyModel::load(&out.join("model_a.toym")).unwrap();
    assert_eq!(model_a.config().d_model, 16);

    let va = cmd_extract(&cfg, &out.join("model_a.toym"), out, "vectors_a").unwrap();
    let vb = cmd_extract(&cfg, &out.join("model_b.toym"), out, "vectors_b").unwrap();
    let prompts = parse_prompts(latent_bridge::text::stock_prompt_text()).unwrap();
    let store = VectorStore::load(&va).unwrap();
    assert_eq!((store.len(), store.dim()), (prompts.len(), 16));
    assert_eq!(VectorStore::load(&vb).unwrap().dim(), 12);

    let files = cmd_train_translator(&cfg, &va, &vb, out).unwrap();
    assert_eq!(files.len(), 4);
    let forward = TranslatorParams::load(&out.join("forward.lbtr")).unwrap();
    assert_eq!((forward.config().d_src, forward.config().d_tgt), (16, 12));

    let steering = cmd_inject_generate(
        &cfg,
        &out.join("model_a.toym"),
        &out.join("model_b.toym"),
        &out.join("forward.lbtr"),
        &prompts[0].full,
        &prompts[0].part,
        out,
    )
    .unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(steering).unwrap()).unwrap();
    assert_eq!(json["kl_per_step"].as_array().unwrap().len(), 4);
}

#[test]
fn dimension_mismatch_writes_nothing() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    cmd_train_lm(&cfg, ModelRole::A, out).unwrap();
    cmd_train_lm(&cfg, ModelRole::B, out).unwrap();
    let va = cmd_extract(&cfg, &out.join("model_a.toym"), out, "vectors_a").unwrap();
    let vb = cmd_extract(&cfg, &out.join("model_b.toym"), out, "vectors_b").unwrap();
    cmd_train_translator(&cfg, &va, &vb, out).unwrap();

    let err = cmd_inject_generate(
        &cfg,
        &out.join("model_a.toym"),
        &out.join("model_b.toym"),
        &out.join("reverse.lbtr"),
        "a full prompt",
        "a full",
        out,
    )
    .unwrap_err();
    assert!(
        matches!(
            err,
            BridgeError::Dimension {
                expected: 16,
                actual: 12,
                ..
            }
        ),
        "{err}"
    );
    assert!(!out.join("steering.json").exists());

    assert!(matches!(
        cmd_train_translator(&cfg, &va, &va.with_extension("missing"), out),
        Err(BridgeError::Io { .. })
    ));
}

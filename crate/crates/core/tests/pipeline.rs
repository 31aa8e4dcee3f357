use std::path::Path;

use babylm_core::config::{Profile, KEYS};
use babylm_core::mlsm::{collect_hidden, dict_learn, l2_normalize, DictLearnOptions};
use babylm_core::model::Model;
use babylm_core::tokenizers::{AugmentedVocab, Tokenizer, TokenizerPreset, MASK_ID, PAD_ID, SEP_ID};
use babylm_core::training::{
    corpus_from_text, pack_sequences, MaskVocab, MlsmContext, Objective, PretrainConfig, Trainer,
};
use proptest::prelude::*;

const TEXT: &str = "umntwana uyahamba ekhaya\ninja iyatya emlanjeni\numfazi uyacula kakuhle\n\
indoda iyabaleka namhlanje\nintombi iyafunda esikolweni\ninkomo iyalala ekhaya\n";

fn small(objective: Objective) -> PretrainConfig {
    PretrainConfig {
        objective,
        lr: 5e-3,
        seq_len: 12,
        batch_size: 2,
        epochs: 30,
        num_layers: 2,
        num_heads: 2,
        hidden_dim: 16,
        ff_hidden: 32,
        init_std: 0.05,
        latent_k: 6,
        lambda: 0.2,
        checkpoint_epochs: Vec::new(),
        ..Profile::for_objective(objective).defaults()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn teacher_dictionary_student_pipeline() {
    let corpus = corpus_from_text(TEXT);
    let tok = Tokenizer::train(TokenizerPreset::Mlsm, &corpus.documents, 60).unwrap();
    let streams: Vec<Vec<u32>> = corpus.documents.iter().map(|d| tok.encode(d)).collect();
    let seqs = pack_sequences(&streams, 12, SEP_ID, PAD_ID).unwrap();

    let tcfg = small(Objective::MlmStandard);
    let teacher = Model::init(tcfg.model_config(tok.vocab_size()), 1, 0.05).unwrap();
    let vocab = MaskVocab { mask_id: MASK_ID, ordinary: tok.ordinary_ids() };
    let mut trainer = Trainer::new(tcfg, teacher, seqs.clone(), vocab.clone(), None).unwrap();
    let losses: Vec<f64> = trainer.run(None, None).unwrap().iter().map(|r| r.loss).collect();
    assert!(mean(&losses[losses.len() - 6..]) < mean(&losses[..6]));
    let teacher = trainer.model;

    let mut hidden = collect_hidden(&teacher, &seqs, 1, 200, 3).unwrap();
    hidden.iter_mut().for_each(|h| l2_normalize(h));
    let report = dict_learn(&hidden, DictLearnOptions { k: 6, lambda: 0.2, iterations: 5, seed: 0, teacher_layer: 1 }).unwrap();
    assert!(report.objective.windows(2).all(|w| w[1] <= w[0] + 1e-9));

    let Tokenizer::WordPiece(wp) = &tok else { panic!("WordPiece expected") };
    let aug = AugmentedVocab::augment(wp, 6).unwrap();
    let student_vocab = Tokenizer::Augmented(aug.clone()).vocab_size();
    let scfg = small(Objective::MlsmStudent);
    let student = Model::init(scfg.model_config(student_vocab), 2, 0.05).unwrap();
    let ctx = MlsmContext::new(teacher, report.dictionary, aug, true).unwrap();
    let mut trainer = Trainer::new(scfg, student, seqs, vocab, Some(ctx)).unwrap();
    let losses: Vec<f64> = trainer.run(None, None).unwrap().iter().map(|r| r.loss).collect();
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(mean(&losses[losses.len() - 6..]) < mean(&losses[..6]));
    assert!(trainer.target_stats.count > 0);
    assert!(trainer.target_stats.max_sum_error <= 1e-6);
}

fn setting() -> impl Strategy<Value = (&'static str, String)> {
    prop_oneof![
        (1e-6f64..1.0).prop_map(|v| ("lr", v.to_string())),
        (2usize..600).prop_map(|v| ("seq_len", v.to_string())),
        (1usize..300).prop_map(|v| ("batch_size", v.to_string())),
        any::<u64>().prop_map(|v| ("seed", v.to_string())),
        (0.0f64..1.0).prop_map(|v| ("mask_rate", v.to_string())),
        (0.0f64..0.9).prop_map(|v| ("warmup_fraction", v.to_string())),
        (0.0f64..2.0).prop_map(|v| ("lambda", v.to_string())),
        prop::option::of(0usize..12)
            .prop_map(|v| ("teacher_layer", v.map_or("auto".to_string(), |l| l.to_string()))),
        prop::collection::vec(1usize..400, 0..4).prop_map(|v| (
            "checkpoint_epochs",
            if v.is_empty() { "none".to_string() } else { v.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(",") }
        )),
        any::<bool>().prop_map(|v| ("normalize_hidden", v.to_string())),
        prop::sample::select(vec!["roberta", "elc", "mlsm"]).prop_map(|v| ("tokenizer", v.to_string())),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn resolved_echo_reparses_identically(settings in prop::collection::vec(setting(), 0..8)) {
        let mut cfg = Profile::Elc.defaults();
        for (k, v) in &settings {
            cfg.set(k, v).unwrap();
        }
        let text = cfg.to_text();
        prop_assert_eq!(text.lines().count(), KEYS.len());
        let back = PretrainConfig::from_text(&text, Path::new("echo"), Profile::Roberta.defaults()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

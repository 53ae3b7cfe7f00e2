use std::sync::Arc;

use headlab::coref::{CorefClusters, FullLinkEdges, LinkMode};
use headlab::corpus::{generate, GeneratorConfig, Split, SplitSizes, Vocab};
use headlab::data::{encode_split, plain_examples, EncodedSample};
use headlab::evaluation::{evaluate, DecodeSettings};
use headlab::head_analysis::{aggregate_runs, select_extremes, ImportanceMap, SelectionMode};
use headlab::injection::{
    ablate_injected_heads, fine_tune_with_injection, importance_before_after, injected_examples,
    overrides_for, plan_by_importance, plan_by_probing, plan_from_report, plan_overlap,
    probe_heads, probe_samples, sample_structure, upper_half, EncoderSlot, HeadSelection,
    InjectionPlan, ProbeSample,
};
use headlab::model::{layer_keys, Bank, LayerKey, ModelConfig, PassOptions, Seq2SeqModel};
use headlab::numerics::Tensor;
use headlab::training::{train, train_with_observer, TrainConfig};
use headlab::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Data {
    vocab: Vocab,
    train: Vec<EncodedSample>,
    valid: Vec<EncodedSample>,
}

fn data() -> Data {
    let corpus = generate(&GeneratorConfig {
        seed: 12,
        sizes: SplitSizes {
            train: 12,
            validation: 6,
            test: 4,
        },
        ..GeneratorConfig::default()
    })
    .unwrap();
    let vocab = corpus.build_vocab();
    Data {
        train: encode_split(&corpus, Split::Train, &vocab).unwrap(),
        valid: encode_split(&corpus, Split::Validation, &vocab).unwrap(),
        vocab,
    }
}

fn config(vocab: usize) -> ModelConfig {
    ModelConfig {
        encoder_layers: 4,
        decoder_layers: 1,
        heads: 4,
        model_dim: 16,
        ffn_dim: 32,
        vocab_size: vocab,
        max_seq_len: 72,
        dropout: 0.1,
        ..ModelConfig::default()
    }
}

fn quick() -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        epochs: 2,
        batch_size: 4,
        patience: None,
        max_decode_len: 20,
        ..TrainConfig::default()
    }
}

fn enc_keys(n: usize) -> Vec<LayerKey> {
    (0..n)
        .map(|layer| LayerKey {
            bank: Bank::EncoderSelf,
            layer,
        })
        .collect()
}

fn ensemble(rows: Vec<Vec<f64>>) -> headlab::head_analysis::RunEnsemble {
    let n = rows.len();
    let mut ens = aggregate_runs(
        vec![ImportanceMap::from_raw(enc_keys(n), rows.clone(), 1).unwrap()],
        0.5,
    )
    .unwrap();
    ens.mean = rows;
    ens
}

#[test]
fn importance_plan_takes_lowest_heads_in_range() {
    let ens = ensemble(vec![vec![0.9, 0.1, 0.5, 0.6]; 4]);
    let plan = plan_by_importance(&ens, LinkMode::Adjacent, (0, 1), 1).unwrap();
    assert_eq!(plan.slots, vec![EncoderSlot { layer: 0, head: 1 }]);

    let rows = vec![
        vec![0.1, 0.2, 0.3, 0.4],
        vec![0.4, 0.3, 0.2, 0.1],
        vec![0.5, 0.2, 0.9, 0.3],
        vec![0.6, 0.7, 0.1, 0.2],
    ];
    let ens = ensemble(rows);
    let range = upper_half(4);
    assert_eq!(range, (2, 4));
    let plan = plan_by_importance(&ens, LinkMode::Full, range, 1).unwrap();
    assert!(plan.slots.iter().all(|s| (2..4).contains(&s.layer)));
    let pruning = select_extremes(&ens, SelectionMode::Lowest, 1, &enc_keys(4)[2..]).unwrap();
    let as_slots: Vec<EncoderSlot> = pruning
        .slots
        .iter()
        .map(|s| EncoderSlot {
            layer: s.layer,
            head: s.head,
        })
        .collect();
    assert_eq!(plan.slots, as_slots);
    assert_eq!(
        plan,
        plan_by_importance(&ens, LinkMode::Full, range, 1).unwrap()
    );
    assert!(matches!(
        plan_by_importance(&ens, LinkMode::Full, range, 5),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        plan_by_importance(&ens, LinkMode::Full, (3, 5), 1),
        Err(Error::Contract(_))
    ));
}

#[test]
fn plan_json_shape() {
    let plan = InjectionPlan {
        selection: HeadSelection::Importance,
        link_mode: LinkMode::Adjacent,
        layer_range: (2, 4),
        slots: vec![EncoderSlot { layer: 2, head: 1 }],
    };
    let json = serde_json::to_string(&plan).unwrap();
    assert_eq!(
        json,
        r#"{"selection":"importance","link_mode":"adjacent","layer_range":[2,4],"slots":[{"layer":2,"head":1}]}"#
    );
    assert_eq!(serde_json::from_str::<InjectionPlan>(&json).unwrap(), plan);
}

#[test]
fn overridden_head_is_maximally_similar() {
    let d = data();
    let model = Seq2SeqModel::new(config(d.vocab.len()), 1).unwrap();
    let probes = probe_samples(&d.valid, LinkMode::Full, FullLinkEdges::AllPairs).unwrap();
    let plan = InjectionPlan {
        selection: HeadSelection::Probing,
        link_mode: LinkMode::Full,
        layer_range: (3, 4),
        slots: vec![EncoderSlot { layer: 3, head: 2 }],
    };
    // One probe at a time so each override matches its own sample.
    for p in &probes {
        let o = overrides_for(&plan, &p.structure).unwrap();
        let report = probe_heads(&model, std::slice::from_ref(p), Some(&o)).unwrap();
        assert!((report.similarity[3][2] - 1.0).abs() < 1e-12);
        let chosen = plan_from_report(&report, LinkMode::Full, (3, 4), 1).unwrap();
        assert_eq!(chosen.slots, plan.slots);
        assert!(report
            .similarity
            .iter()
            .flatten()
            .all(|&s| (0.0..=1.0 + 1e-12).contains(&s)));
    }
}

#[test]
fn uniform_head_against_identity_scores_inverse_sqrt_n() {
    let d = data();
    let mut model = Seq2SeqModel::new(config(d.vocab.len()), 2).unwrap();
    for name in ["wq", "bq"] {
        model
            .param_mut(&format!("enc.0.attn.{name}"))
            .unwrap()
            .data_mut()
            .fill(0.0);
    }
    for s in &d.valid {
        let n = s.source.len();
        let probe = ProbeSample {
            source: s.source.clone(),
            structure: Arc::new(Tensor::eye(n)),
        };
        let report = probe_heads(&model, &[probe], None).unwrap();
        for head in 0..4 {
            let want = 1.0 / (n as f64).sqrt();
            assert!((report.similarity[0][head] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn probing_report_ignores_duplication() {
    let d = data();
    let model = Seq2SeqModel::new(config(d.vocab.len()), 3).unwrap();
    let probes = probe_samples(&d.valid, LinkMode::Adjacent, FullLinkEdges::AllPairs).unwrap();
    let twice: Vec<ProbeSample> = probes.iter().chain(&probes).cloned().collect();
    let (a, ra) = plan_by_probing(&model, &probes, LinkMode::Adjacent, (2, 4), 1).unwrap();
    let (b, rb) = plan_by_probing(&model, &twice, LinkMode::Adjacent, (2, 4), 1).unwrap();
    assert_eq!(ra.similarity, rb.similarity);
    assert_eq!(a, b);
    let csv = ra.to_csv();
    assert_eq!(csv.lines().next(), Some("layer,head,mean_cosine"));
    assert_eq!(csv.lines().count(), 1 + 16);
}

#[test]
fn injected_heads_attend_with_the_structure_matrix() {
    let d = data();
    let model = Seq2SeqModel::new(config(d.vocab.len()), 4).unwrap();
    let before = model.parameter_count();
    let plan = InjectionPlan {
        selection: HeadSelection::Importance,
        link_mode: LinkMode::Adjacent,
        layer_range: (2, 4),
        slots: vec![
            EncoderSlot { layer: 2, head: 0 },
            EncoderSlot { layer: 3, head: 3 },
        ],
    };
    let examples = injected_examples(&d.train, &plan, FullLinkEdges::AllPairs).unwrap();
    let check = |m: &Seq2SeqModel| {
        for (ex, s) in examples.iter().zip(&d.train).take(3) {
            let want = sample_structure(s, LinkMode::Adjacent, FullLinkEdges::AllPairs).unwrap();
            let mut pass = m.pass(PassOptions {
                record_attention: true,
                ..PassOptions::default()
            });
            pass.encode(&ex.source, None, ex.overrides.as_ref())
                .unwrap();
            let mut seen = 0;
            for (slot, attn) in pass.attention_maps() {
                if plan.head_slots().contains(&slot) {
                    assert_eq!(attn, &*want);
                    seen += 1;
                }
            }
            assert_eq!(seen, 2);
        }
    };
    let mut steps = 0;
    let out = train_with_observer(model, &examples, &[], &quick(), 4, None, &mut |m, _| {
        check(m);
        steps += 1;
    })
    .unwrap();
    assert_eq!(steps, 6);
    check(&out.model);
    assert_eq!(out.model.parameter_count(), before);

    // Dropout is active in the training pass and must not touch the override.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ex = &examples[0];
    let mut pass = out.model.pass(PassOptions {
        record_attention: true,
        dropout_rng: Some(&mut rng),
        param_grads: true,
        ..PassOptions::default()
    });
    pass.loss(&ex.source, &ex.target, ex.overrides.as_ref())
        .unwrap();
    let want = sample_structure(&d.train[0], LinkMode::Adjacent, FullLinkEdges::AllPairs).unwrap();
    let hits = pass
        .attention_maps()
        .filter(|(slot, _)| plan.head_slots().contains(slot))
        .inspect(|(_, attn)| assert_eq!(*attn, &*want))
        .count();
    assert_eq!(hits, 2);
}

#[test]
fn empty_plan_is_plain_training() {
    let d = data();
    let cfg = config(d.vocab.len());
    let plan = InjectionPlan {
        selection: HeadSelection::Importance,
        link_mode: LinkMode::Full,
        layer_range: (2, 4),
        slots: Vec::new(),
    };
    let injected = fine_tune_with_injection(
        Seq2SeqModel::new(cfg.clone(), 6).unwrap(),
        &plan,
        &d.train,
        &d.valid,
        &quick(),
        6,
        FullLinkEdges::AllPairs,
    )
    .unwrap();
    let plain = train(
        Seq2SeqModel::new(cfg, 6).unwrap(),
        &plain_examples(&d.train),
        &plain_examples(&d.valid),
        &quick(),
        6,
        None,
    )
    .unwrap();
    assert_eq!(injected.history, plain.history);
    for (a, b) in injected.model.params().iter().zip(plain.model.params()) {
        assert_eq!(a.value, b.value);
    }

    let ablated = ablate_injected_heads(&injected.model, &plan).unwrap();
    let ex = plain_examples(&d.valid);
    let refs: Vec<String> = d.valid.iter().map(|s| s.reference.join(" ")).collect();
    let decode = DecodeSettings {
        beam_size: 2,
        max_len: 20,
    };
    assert_eq!(
        evaluate(&injected.model, &ex, &refs, &d.vocab, decode).unwrap(),
        evaluate(&ablated, &ex, &refs, &d.vocab, decode).unwrap()
    );
}

#[test]
fn ablation_zeroes_exactly_the_planned_gates() {
    let d = data();
    let model = Seq2SeqModel::new(config(d.vocab.len()), 6).unwrap();
    let plan = InjectionPlan {
        selection: HeadSelection::Probing,
        link_mode: LinkMode::Full,
        layer_range: (2, 4),
        slots: vec![
            EncoderSlot { layer: 2, head: 1 },
            EncoderSlot { layer: 3, head: 0 },
        ],
    };
    let ablated = ablate_injected_heads(&model, &plan).unwrap();
    assert_eq!(ablated.gates().pruned(), plan.head_slots());
    let bad = InjectionPlan {
        slots: vec![EncoderSlot { layer: 1, head: 0 }],
        ..plan
    };
    assert!(matches!(
        ablate_injected_heads(&model, &bad),
        Err(Error::Contract(_))
    ));
}

#[test]
fn before_after_against_itself_is_flat() {
    let cfg = config(30);
    let keys = layer_keys(&cfg);
    let rows: Vec<Vec<f64>> = (0..keys.len())
        .map(|i| vec![1.0 + i as f64, 2.0, 0.5, 1.0])
        .collect();
    let ens = aggregate_runs(vec![ImportanceMap::from_raw(keys, rows, 3).unwrap()], 0.5).unwrap();
    let plan = InjectionPlan {
        selection: HeadSelection::Importance,
        link_mode: LinkMode::Adjacent,
        layer_range: (2, 4),
        slots: vec![
            EncoderSlot { layer: 2, head: 2 },
            EncoderSlot { layer: 3, head: 2 },
            EncoderSlot { layer: 3, head: 0 },
        ],
    };
    let cmp = importance_before_after(&ens, &ens, &plan).unwrap();
    assert_eq!(cmp.slots.len(), 3);
    assert_eq!(cmp.layers.len(), 2);
    assert!(cmp.slots.iter().all(|s| s.before == s.after));
    assert_eq!(cmp.layers_increased(), 0);

    let other = InjectionPlan {
        selection: HeadSelection::Probing,
        slots: vec![
            EncoderSlot { layer: 3, head: 0 },
            EncoderSlot { layer: 2, head: 1 },
        ],
        ..plan.clone()
    };
    assert_eq!(
        plan_overlap(&plan, &other),
        vec![EncoderSlot { layer: 3, head: 0 }]
    );
}

#[test]
fn samples_without_clusters_are_rejected() {
    let d = data();
    let mut s = d.train[0].clone();
    s.clusters = CorefClusters::new(Vec::new()).unwrap();
    assert!(matches!(
        sample_structure(&s, LinkMode::Full, FullLinkEdges::AllPairs),
        Err(Error::Contract(_))
    ));
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ralf::data::{CategorySchema, Element, Layout};
use ralf::encoders::{patchify, EncoderConfig};
use ralf::generator::{
    canonicalize, generate_from, refinement_window, teacher_forced, GeneratorConfig, RalfModel, RetrievalMode,
    SamplingConfig, TrainConfig, TrainingSet,
};
use ralf::synth::{generate_synthetic_dataset, SynthConfig};
use ralf::tasks::{
    build_spec, check_satisfaction, ConstraintSpec, PositionRelation, Relationship, SizeRelation, TaskKind,
};
use ralf::tokenizer::{quantize, quantize_box, Vocabulary};
use ralf::Error;
use ralf_numerics::{Graph, Mode, Tensor};

fn small_model(retrieval: RetrievalMode, k: usize) -> RalfModel {
    let schema = CategorySchema::pku();
    let mut cfg = GeneratorConfig::toy(Vocabulary::new(schema.num_categories(), 128));
    cfg.retrieval = retrieval;
    cfg.k = k;
    cfg.feature_dim = 16;
    RalfModel::new(cfg, schema, 3).unwrap()
}

fn blank_patches(cfg: &EncoderConfig) -> Tensor<f32> {
    let ds = generate_synthetic_dataset(
        &SynthConfig {
            train: 1,
            val: 0,
            test: 0,
            height: cfg.input_height,
            width: cfg.input_width,
            ..SynthConfig::default()
        },
        &CategorySchema::pku(),
    )
    .unwrap();
    patchify(&ds.train[0].canvas, &ds.train[0].saliency, cfg).unwrap()
}

fn random_features(k: usize, d: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[k, d], |_| rng.random_range(-1.0..1.0))
}

fn three_elements() -> Layout {
    Layout::new(vec![
        Element::new(1, 0.2, 0.1, 0.2, 0.08),
        Element::new(2, 0.5, 0.3, 0.6, 0.1),
        Element::new(3, 0.5, 0.3, 0.7, 0.14),
    ])
}

#[test]
fn initial_loss_is_close_to_uniform() {
    let model = small_model(RetrievalMode::Saliency, 4);
    let v = model.config().vocab.size() as f64;
    let patches = blank_patches(&model.config().encoder);
    let retrieved = random_features(4, 16, 0);
    let tokens = ralf::tokenizer::tokenize_layout(&three_elements(), &model.config().vocab).unwrap();
    let ex = ralf::generator::Example {
        patches: &patches,
        retrieved: Some(retrieved),
        constraint: Vec::new(),
        tokens: &tokens,
    };
    let (loss, _) = teacher_forced(&model, &ex).unwrap();
    assert!(loss >= 0.0);
    assert!((loss - v.ln()).abs() / v.ln() < 0.1, "loss {loss}, ln V {}", v.ln());
}

#[test]
fn overlong_sequences_are_rejected() {
    let model = small_model(RetrievalMode::Off, 4);
    let patches = blank_patches(&model.config().encoder);
    let too_long = vec![3u32; model.config().max_seq_len() + 1];
    let mut g = Graph::new(&model.store, Mode::Eval, 0);
    let p = g.constant(patches);
    assert!(model.net.loss(&mut g, p, None, &[], &too_long).is_err());
}

#[test]
fn cached_decoding_matches_full_forward() {
    let model = small_model(RetrievalMode::Saliency, 4);
    let patches = blank_patches(&model.config().encoder);
    let retrieved = random_features(4, 16, 1);
    let spec = ConstraintSpec::unconstrained();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layout = generate_from(&model, &patches, Some(&retrieved), &spec, &SamplingConfig::default(), &mut rng).unwrap();
    let tokens = ralf::tokenizer::tokenize_layout(&layout, &model.config().vocab).unwrap();

    // Replay the same prefix through the graph and compare to the cache path.
    let memory = model.memory_tensor(&patches, Some(&retrieved), &[]).unwrap();
    let mut g = Graph::new(&model.store, Mode::Eval, 0);
    let m = g.constant(memory.clone());
    let logits = model.net.decode(&mut g, m, &tokens[..tokens.len() - 1]).unwrap();
    let full = g.value(logits).clone();
    let mut caches = model.net.prepare_caches(&model.store, &memory);
    for (pos, &t) in tokens[..tokens.len() - 1].iter().enumerate() {
        let step = model.net.step_logits(&model.store, t, pos, &mut caches);
        for (a, b) in step.iter().zip(full.row(pos)) {
            assert!((a - b).abs() < 1e-3, "position {pos}: {a} vs {b}");
        }
    }
}

#[test]
fn unconstrained_generations_follow_the_grammar() {
    let model = small_model(RetrievalMode::Off, 4);
    let patches = blank_patches(&model.config().encoder);
    let spec = ConstraintSpec::unconstrained();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let l = generate_from(&model, &patches, None, &spec, &SamplingConfig::default(), &mut rng).unwrap();
        assert!((1..=10).contains(&l.len()));
        assert!(l.elements.iter().all(|e| (1..=3).contains(&e.category)));
    }
}

#[test]
fn generation_is_deterministic_under_a_seed() {
    let model = small_model(RetrievalMode::Saliency, 4);
    let patches = blank_patches(&model.config().encoder);
    let r = canonicalize(&random_features(4, 16, 2)).unwrap();
    let spec = ConstraintSpec::unconstrained();
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        generate_from(&model, &patches, Some(&r), &spec, &SamplingConfig::default(), &mut rng).unwrap()
    };
    assert_eq!(run(11), run(11));
}

#[test]
fn permuted_retrieval_gives_identical_samples() {
    let model = small_model(RetrievalMode::Saliency, 4);
    let patches = blank_patches(&model.config().encoder);
    let feats = random_features(4, 16, 3);
    let perm = [2usize, 3, 0, 1];
    let permuted = Tensor::from_fn(&[4, 16], |i| feats.row(perm[i / 16])[i % 16]);
    let spec = ConstraintSpec::unconstrained();
    for seed in 0..20 {
        let gen = |t: &Tensor<f32>| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = canonicalize(t).unwrap();
            generate_from(&model, &patches, Some(&c), &spec, &SamplingConfig::default(), &mut rng).unwrap()
        };
        assert_eq!(gen(&feats), gen(&permuted));
    }
}

fn spec_for(kind: TaskKind, gt: &Layout, seed: u64) -> ConstraintSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_spec(kind, gt, &mut rng).unwrap()
}

fn generate_n(model: &RalfModel, spec: &ConstraintSpec, n: usize) -> Vec<Layout> {
    let patches = blank_patches(&model.config().encoder);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    (0..n)
        .map(|_| generate_from(model, &patches, None, spec, &SamplingConfig::default(), &mut rng).unwrap())
        .collect()
}

#[test]
fn category_constraints_force_the_sequence() {
    let model = small_model(RetrievalMode::Off, 4);
    let spec = ConstraintSpec {
        categories: Some(vec![2, 1]),
        ..spec_for(TaskKind::CtoSP, &three_elements(), 0)
    };
    for l in generate_n(&model, &spec, 50) {
        assert_eq!(l.categories(), vec![2, 1]);
    }
}

#[test]
fn size_constraints_force_sizes() {
    let model = small_model(RetrievalMode::Off, 4);
    let spec = spec_for(TaskKind::CStoP, &three_elements(), 0);
    let want: Vec<[usize; 2]> =
        spec.sizes.as_ref().unwrap().iter().map(|&(w, h)| [quantize(w, 128).unwrap(), quantize(h, 128).unwrap()]).collect();
    for l in generate_n(&model, &spec, 50) {
        assert_eq!(l.categories(), three_elements().categories());
        for (e, s) in l.elements.iter().zip(&want) {
            let q = quantize_box(&e.bbox, 128).unwrap();
            assert_eq!([q[2], q[3]], *s);
        }
    }
}

#[test]
fn completion_reproduces_the_prefix() {
    let model = small_model(RetrievalMode::Off, 4);
    let gt = three_elements();
    let spec = ConstraintSpec {
        partial: Some(Layout::new(gt.elements[..2].to_vec())),
        ..spec_for(TaskKind::Completion, &gt, 0)
    };
    let prefix: Vec<[usize; 4]> = gt.elements[..2].iter().map(|e| quantize_box(&e.bbox, 128).unwrap()).collect();
    for l in generate_n(&model, &spec, 50) {
        assert!(l.len() >= 2);
        for (e, (g, q)) in l.elements.iter().zip(gt.elements.iter().zip(&prefix)) {
            assert_eq!(e.category, g.category);
            assert_eq!(quantize_box(&e.bbox, 128).unwrap(), *q);
        }
    }
}

#[test]
fn refinement_stays_in_the_window() {
    let model = small_model(RetrievalMode::Off, 4);
    let spec = spec_for(TaskKind::Refinement, &three_elements(), 1);
    let noisy = spec.noisy.clone().unwrap();
    let delta = refinement_window(128) as i64;
    assert_eq!(delta, 7);
    for l in generate_n(&model, &spec, 50) {
        assert_eq!(l.categories(), noisy.categories());
        for (e, n) in l.elements.iter().zip(&noisy.elements) {
            let (a, b) = (quantize_box(&e.bbox, 128).unwrap(), quantize_box(&n.bbox, 128).unwrap());
            assert!(a.iter().zip(&b).all(|(&x, &y)| (x as i64 - y as i64).abs() <= delta));
        }
    }
}

#[test]
fn relationship_above_is_always_satisfied() {
    let model = small_model(RetrievalMode::Off, 4);
    let spec = ConstraintSpec {
        kind: TaskKind::Relationship,
        categories: Some(vec![2, 2, 1]),
        relations: Some(vec![
            Relationship {
                i: 0,
                j: 1,
                size_rel: Some(SizeRelation::Larger),
                pos_rel: Some(PositionRelation::Above),
            },
            Relationship {
                i: 1,
                j: 2,
                size_rel: None,
                pos_rel: Some(PositionRelation::Left),
            },
        ]),
        ..ConstraintSpec::unconstrained()
    };
    let vocab = model.config().vocab;
    for l in generate_n(&model, &spec, 200) {
        let report = check_satisfaction(&l, &spec, &vocab);
        assert!(report.all_passed(), "{report:?}");
        let (a, b) = (l.elements[0].bbox, l.elements[1].bbox);
        assert!(a.bottom() <= b.top());
    }
}

#[test]
fn contradictory_relations_empty_the_decoding_space() {
    let model = small_model(RetrievalMode::Off, 4);
    let rel = |i, j| Relationship {
        i,
        j,
        size_rel: None,
        pos_rel: Some(PositionRelation::Above),
    };
    let spec = ConstraintSpec {
        kind: TaskKind::Relationship,
        categories: Some(vec![2, 2]),
        relations: Some(vec![rel(0, 1), rel(1, 0)]),
        ..ConstraintSpec::unconstrained()
    };
    let patches = blank_patches(&model.config().encoder);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = generate_from(&model, &patches, None, &spec, &SamplingConfig::default(), &mut rng).unwrap_err();
    match err {
        Error::EmptyDecodingSpace { step, constraint } => {
            assert!(step >= 2);
            assert!(constraint.contains("relationship"), "{constraint}");
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn checkpoint_roundtrip_preserves_weights_and_config() {
    let mut model = small_model(RetrievalMode::Random, 4);
    model.encoder_stamp = Some("0123456789abcdef".into());
    let ck = model.checkpoint();
    let back = RalfModel::from_checkpoint(&ralf_numerics::Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.encoder_stamp, model.encoder_stamp);
    assert_eq!(back.store.named_values(), model.store.named_values());
}

#[test]
fn short_training_reduces_loss() {
    let schema = CategorySchema::pku();
    let ds = generate_synthetic_dataset(
        &SynthConfig {
            train: 8,
            val: 0,
            test: 0,
            height: 80,
            width: 56,
            max_elements: 4,
            ..SynthConfig::default()
        },
        &schema,
    )
    .unwrap();
    let mut model = small_model(RetrievalMode::Off, 4);
    let set = TrainingSet::prepare(&model, &ds.train, None).unwrap();
    let cfg = TrainConfig {
        steps: 30,
        batch_size: 4,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let report = ralf::generator::train(&mut model, &set, &cfg).unwrap();
    let head: f64 = report.losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = report.losses[25..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "{head} -> {tail}");
}

use super::*;
use crate::calinet::{attach, AdapterConfig};
use crate::model::ModelConfig;
use crate::numerics::Precision;
use crate::worldgen::{
    build_calibration_sets, build_pretrain_corpus, generate_world, EntityType, RelationSchema, TemplateSplits, World,
    WorldDefinition, WorldSpec,
};

fn tiny_world(facts: usize) -> World {
    let spec = WorldSpec {
        entities_per_type: 6,
        relations: 2,
        facts,
        corruption_rate: 0.0,
        renders_per_fact: 8,
        seed: 1,
    };
    generate_world(&WorldDefinition::builtin(), &spec).unwrap()
}

fn tiny_model<S: Scalar>(vocab: usize, layers: usize) -> Model<S> {
    Model::new(ModelConfig {
        d: 16,
        d_m: 32,
        n_layers: layers,
        n_heads: 2,
        vocab_size: vocab,
        max_seq_len: 16,
        precision: S::PRECISION,
        seed: 2,
    })
    .unwrap()
}

fn corpus(w: &World) -> Vec<EncodedExample> {
    let c = build_pretrain_corpus(&w.definition, &w.corrupted, 8, 0).unwrap();
    w.vocab.encode_all(&c).unwrap()
}

#[test]
fn warmup_schedule() {
    let c = TrainConfig {
        steps: 10,
        warmup_steps: 4,
        learning_rate: 1.0,
        ..TrainConfig::default()
    };
    let lrs: Vec<f64> = (0..6).map(|s| c.lr_at(s)).collect();
    assert_eq!(lrs, [0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    assert!(TrainConfig { warmup_steps: 11, ..c.clone() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..c }.validate().is_err());
}

#[test]
fn adam_minimises_quadratic() {
    let mut x = Tensor::<f64>::from_f64([2], &[0.0, 10.0]).unwrap();
    let mut adam = Adam::default();
    for _ in 0..2000 {
        let grad = x.map(|v| 2.0 * (v - 3.0));
        adam.step(0.05, [("x", &mut x, &grad)]);
    }
    assert!(x.data().iter().all(|v| (v - 3.0).abs() < 1e-3), "{:?}", x.data());
}

#[test]
fn single_fact_overfits() {
    let w = tiny_world(1);
    let data = corpus(&w);
    let mut m = tiny_model::<f32>(w.vocab.len(), 2);
    let cfg = TrainConfig {
        steps: 300,
        batch_size: 8,
        learning_rate: 1e-2,
        warmup_steps: 10,
        eval_every: 50,
        ..TrainConfig::default()
    };
    let out = pretrain(&mut m, &data, &cfg).unwrap();
    let train = out.losses("train");
    assert!(train.last().unwrap().1 < train[0].1);
    let ppl = mean_loss(&m, &data, 64).unwrap().exp();
    assert!(ppl < 1.05, "train perplexity {ppl}");
}

#[test]
fn pretraining_is_deterministic() {
    let w = tiny_world(4);
    let data = corpus(&w);
    let cfg = TrainConfig {
        steps: 20,
        batch_size: 4,
        eval_every: 5,
        warmup_steps: 2,
        ..TrainConfig::default()
    };
    let mut a = tiny_model::<f32>(w.vocab.len(), 2);
    let mut b = a.clone();
    let oa = pretrain(&mut a, &data, &cfg).unwrap();
    let ob = pretrain(&mut b, &data, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(oa, ob);
}

fn calibration_data(w: &World) -> (Vec<EncodedExample>, Vec<EncodedExample>) {
    let sets = build_calibration_sets(&w.definition, &w.gold).unwrap();
    (w.vocab.encode_all(&sets.train).unwrap(), w.vocab.encode_all(&sets.valid).unwrap())
}

#[test]
fn adapter_cache_matches_full_forward() {
    let w = tiny_world(5);
    let (train, _) = calibration_data(&w);
    for layer in [0, 2] {
        let mut m = tiny_model::<f64>(w.vocab.len(), 3);
        attach(&mut m, AdapterConfig::new(4, layer)).unwrap();
        let v = &mut m.state.get_mut(names::ADAPTER_V).unwrap().tensor;
        *v = Tensor::randn(v.shape().to_vec(), 0.3, &mut ChaCha8Rng::seed_from_u64(9));
        let cache = AdapterCache::build(&m, &train, layer == 2).unwrap();
        let idx = [0, 3, 7];
        let (g, loss, _) = cache.loss(&m, &idx, GradMode::Inference).unwrap();
        let refs: Vec<&EncodedExample> = idx.iter().map(|&i| &train[i]).collect();
        let (g2, loss2, _) = full_loss(&m, &refs, GradMode::Inference).unwrap();
        assert!((g.value(loss).item() - g2.value(loss2).item()).abs() < 1e-10);
    }
}

#[test]
fn zero_step_calibration_is_a_no_op() {
    let w = tiny_world(4);
    let (train, valid) = calibration_data(&w);
    let mut m = tiny_model::<f32>(w.vocab.len(), 2);
    let vanilla = m.forward(&train[0].tokens).unwrap();
    attach(&mut m, AdapterConfig::new(4, 1)).unwrap();
    let before = m.clone();
    let cfg = TrainConfig {
        steps: 0,
        warmup_steps: 0,
        ..TrainConfig::default()
    };
    let (state, out) = calibrate(&mut m, &train, &valid, &cfg).unwrap();
    assert_eq!(m, before);
    assert!(state.values.data().iter().all(|&x| x == 0.0));
    assert_eq!(out.best_step, 0);
    assert_eq!(m.forward(&train[0].tokens).unwrap(), vanilla);
}

#[test]
fn calibration_touches_only_the_adapter() {
    let w = tiny_world(6);
    let (train, valid) = calibration_data(&w);
    let mut m = tiny_model::<f32>(w.vocab.len(), 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.ckpt");
    m.save_base(&path, serde_json::Value::Null).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    attach(&mut m, AdapterConfig::new(8, 1)).unwrap();
    let cfg = TrainConfig {
        steps: 60,
        batch_size: 8,
        learning_rate: 1e-2,
        warmup_steps: 5,
        eval_every: 20,
        ..TrainConfig::default()
    };
    let (_, out) = calibrate(&mut m, &train, &valid, &cfg).unwrap();
    assert!(out.best_valid_loss.unwrap() <= out.initial_valid_loss.unwrap());
    assert!(m.state.adapter().any(|(_, p)| p.tensor.data().iter().any(|&x| x != 0.0)));
    crate::calinet::detach(&mut m);
    m.save_base(&path, serde_json::Value::Null).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn calibration_refuses_unfrozen_base() {
    let w = tiny_world(2);
    let (train, valid) = calibration_data(&w);
    let mut m = tiny_model::<f32>(w.vocab.len(), 2);
    attach(&mut m, AdapterConfig::new(4, 1)).unwrap();
    m.state.set_frozen(|n| n == names::EMBED, false);
    let err = calibrate(&mut m, &train, &valid, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Invariant(_)));
}

#[test]
fn frozen_gradient_is_fatal() {
    let mut state = ModelState::<f64>::default();
    state.insert("w", Tensor::full([2], 1.0), true);
    let mut g = Graph::new();
    // a leaf that wrongly requires grad despite the tensor being frozen
    let w = g.leaf(state.get("w").unwrap().tensor.clone(), true);
    let loss = g.weighted_sum(w, &Tensor::full([2], 1.0)).unwrap();
    let grads = g.backward(loss).unwrap();
    let err = check_frozen(&state, &[("w".to_string(), w)], &grads).unwrap_err();
    assert!(err.to_string().contains("frozen tensor w"));
}

#[test]
fn continued_pretraining_leaves_base_alone() {
    let w = tiny_world(4);
    let (train, valid) = calibration_data(&w);
    let mut base = tiny_model::<f32>(w.vocab.len(), 2);
    base.state.set_frozen(|_| true, true);
    let snapshot = base.clone();
    let cfg = TrainConfig {
        steps: 10,
        batch_size: 4,
        warmup_steps: 1,
        eval_every: 5,
        ..TrainConfig::default()
    };
    let (cp, _) = continue_pretrain(&base, &train, &valid, &cfg).unwrap();
    assert_eq!(base, snapshot);
    assert_ne!(cp.state, base.state);
}

#[test]
fn uniform_model_perplexity_is_vocab_size() {
    let words = ["lives", "in", "."];
    let entities: Vec<String> = (0..2000 - 1 - words.len()).map(|i| format!("e{i}")).collect();
    let rel = RelationSchema {
        id: "r".into(),
        subject_type: "t".into(),
        object_type: "t".into(),
        templates: TemplateSplits {
            train: vec!["[X] lives in [Y] .".into(); 1],
            valid: vec![],
            test: vec![],
        },
        negative_templates: vec![],
    };
    let def = WorldDefinition {
        entity_types: vec![EntityType {
            name: "t".into(),
            entities,
        }],
        relations: vec![rel],
    };
    let vocab = crate::worldgen::Vocab::from_definition(&def).unwrap();
    assert_eq!(vocab.len(), 2000);
    let mut m = tiny_model::<f64>(2000, 1);
    m.state.get_mut(names::FINAL_NORM).unwrap().tensor = Tensor::zeros([16]);
    let ex = CalibrationExample {
        source: vec!["e1".into(), "lives".into(), "in".into(), crate::worldgen::MASK.into()],
        target: "e7".into(),
        fact_id: 0,
        template_id: "r/0".into(),
        split: crate::worldgen::Split::Test,
        set_name: crate::worldgen::SetName::Original,
    };
    let (res, scores) = evaluate_perplexity(&m, &vocab, &[ex.clone(), ex], "original").unwrap();
    assert!((res.perplexity - 2000.0).abs() < 1.0);
    let recomputed = (scores.iter().map(|s| s.nll).sum::<f64>() / 2.0).exp();
    assert_eq!(recomputed, res.perplexity);
    assert!(evaluate_perplexity(&m, &vocab, &[], "x").is_err());
    assert_eq!(Precision::F64, m.config.precision);
}

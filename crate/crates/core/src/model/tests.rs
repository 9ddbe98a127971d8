use super::*;

fn config(d: usize, d_m: usize, layers: usize, heads: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        d,
        d_m,
        n_layers: layers,
        n_heads: heads,
        vocab_size: vocab,
        max_seq_len: 8,
        precision: Precision::F64,
        seed: 0,
    }
}

fn small() -> Model<f64> {
    Model::new(config(8, 16, 2, 2, 20)).unwrap()
}

#[test]
fn config_validation() {
    assert!(config(8, 16, 2, 3, 20).validate().is_err());
    assert!(config(8, 4, 2, 2, 20).validate().is_err());
    assert!(config(8, 16, 0, 2, 20).validate().is_err());
    assert!(Model::<f32>::new(config(8, 16, 2, 2, 20)).is_err());
}

#[test]
fn ffn_of_zero_is_zero() {
    let m = small();
    let out = m.ffn_forward(&Tensor::zeros([3, 8]), 1).unwrap();
    assert!(out.data().iter().all(|&x| x == 0.0));
    assert_eq!(out.shape(), &[3, 8]);
    assert!(matches!(
        m.ffn_forward(&Tensor::zeros([3, 8]), 2),
        Err(Error::LayerIndex { .. })
    ));
}

#[test]
fn ffn_scalar_hand_value() {
    let mut m = Model::<f64>::new(config(1, 1, 1, 1, 3)).unwrap();
    m.state.get_mut(&names::ffn_k(0)).unwrap().tensor = Tensor::from_f64([1, 1], &[1.0]).unwrap();
    m.state.get_mut(&names::ffn_v(0)).unwrap().tensor = Tensor::from_f64([1, 1], &[2.0]).unwrap();
    let out = m.ffn_forward(&Tensor::from_f64([1, 1], &[1.0]).unwrap(), 0).unwrap();
    assert!((out.data()[0] - 1.68238).abs() < 2e-5);
}

#[test]
fn forward_shape_and_determinism() {
    let m = small();
    let ids = [1, 5, 7, 2];
    let a = m.forward(&ids).unwrap();
    assert_eq!(a.shape(), &[4, 20]);
    let b = Model::<f64>::new(config(8, 16, 2, 2, 20)).unwrap().forward(&ids).unwrap();
    assert_eq!(a, b);
}

#[test]
fn forward_is_position_aware() {
    let m = small();
    let a = m.forward(&[3, 4, 5]).unwrap();
    let b = m.forward(&[4, 3, 5]).unwrap();
    assert_ne!(a.row(2), b.row(2));
}

#[test]
fn forward_errors() {
    let m = small();
    assert!(matches!(m.forward(&[1; 9]), Err(Error::SequenceTooLong { .. })));
    assert!(matches!(m.forward(&[1, 20]), Err(Error::TokenId { .. })));
}

#[test]
fn predict_masked_distribution() {
    let m = small();
    let p = m.predict_masked(&[3, 0, 5], 0).unwrap();
    let total: f64 = p.probs.iter().sum();
    assert!((total - 1.0).abs() < 1e-6);
    assert_eq!(p.ranked.len(), 20);
    for w in p.ranked.windows(2) {
        assert!(p.probs[w[0]] >= p.probs[w[1]]);
    }
    assert_eq!(p.top1(), small().predict_masked(&[3, 0, 5], 0).unwrap().top1());
    assert!(matches!(m.predict_masked(&[3, 4, 5], 0), Err(Error::MaskCount(0))));
    assert!(matches!(m.predict_masked(&[0, 4, 0], 0), Err(Error::MaskCount(2))));
}

#[test]
fn output_projection_is_the_embedding() {
    let mut m = small();
    assert_eq!(m.state.names().iter().filter(|n| n.contains("embed")).count(), 2);
    assert!(m.state.contains(names::EMBED));
    let before = m.forward(&[1, 2]).unwrap();
    // token 9 is not in the input, so only the output side sees the change
    let e = &mut m.state.get_mut(names::EMBED).unwrap().tensor;
    e.row_mut(9)[0] += 1.0;
    let after = m.forward(&[1, 2]).unwrap();
    assert_ne!(before.row(0)[9], after.row(0)[9]);
    assert_eq!(before.row(0)[8], after.row(0)[8]);
    // a row that is in the input changes the input side too
    let e = &mut m.state.get_mut(names::EMBED).unwrap().tensor;
    e.row_mut(1)[0] += 1.0;
    let moved = m.forward(&[1, 2]).unwrap();
    assert_ne!(after.row(1)[8], moved.row(1)[8]);
}

#[test]
fn transparent_layers_reduce_to_embedding_path() {
    let mut m = small();
    for l in 0..2 {
        for name in [names::ffn_v(l), names::attn_o(l)] {
            let p = m.state.get_mut(&name).unwrap();
            p.tensor = Tensor::zeros(p.tensor.shape().to_vec());
        }
    }
    let ids = [4, 6, 1];
    let logits = m.forward(&ids).unwrap();

    let e = &m.state.get(names::EMBED).unwrap().tensor;
    let pos = &m.state.get(names::POS).unwrap().tensor;
    let gain = &m.state.get(names::FINAL_NORM).unwrap().tensor;
    for (i, &id) in ids.iter().enumerate() {
        let x: Vec<f64> = e.row(id).iter().zip(pos.row(i)).map(|(a, b)| a + b).collect();
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / 8.0 + 1e-6).sqrt();
        for tok in 0..20 {
            let expect: f64 = (0..8).map(|j| x[j] / rms * gain.data()[j] * e.row(tok)[j]).sum();
            assert!((logits.row(i)[tok] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn base_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.ckpt");
    let m = small();
    m.save_base(&path, serde_json::json!({"note": 1})).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let (back, meta) = Model::<f64>::load_base(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(meta["note"], 1);
    back.save_base(&path, meta).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn base_checkpoint_excludes_adapter() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.ckpt");
    let mut m = small();
    let plain = m.clone();
    crate::calinet::attach(&mut m, crate::calinet::AdapterConfig::new(2, 0)).unwrap();
    m.save_base(&path, serde_json::Value::Null).unwrap();
    let (back, _) = Model::<f64>::load_base(&path).unwrap();
    assert!(!back.state.contains(names::ADAPTER_K));
    assert_eq!(back.state.len(), plain.state.len());
}

#[test]
fn rank_desc_breaks_ties_by_id() {
    assert_eq!(rank_desc(&[0.2f64, 0.5, 0.2, 0.1]), vec![1, 0, 2, 3]);
}

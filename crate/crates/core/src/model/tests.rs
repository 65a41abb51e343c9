use super::*;
use nalgebra::DMatrix;

fn cfg(d: usize, raw: usize, outputs: usize) -> ModelConfig {
    ModelConfig {
        raw_dim: raw,
        seq_len: 4,
        d_model: d,
        num_outputs: outputs,
        rank: 2,
        alpha: 1.0,
        lora_init_std: 0.02,
    }
}

fn model_with_adapters(rank: usize, alpha: f64) -> Model {
    let mut rng = Rng::new(11);
    let mut m = Model::new(cfg(6, 5, 3), &mut rng).unwrap();
    m.attach_adapters(rank, alpha, &mut rng).unwrap();
    m
}

fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect())
}

fn set(model: &mut Model, name: &str, t: Tensor) {
    let id = model.params.id(name).unwrap_or_else(|| panic!("no {name}"));
    assert_eq!(model.params.get(id).shape(), t.shape(), "{name}");
    *model.params.get_mut(id) = t;
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn batch(rng: &mut Rng, model: &Model, combo: ModalityCombination, n: usize) -> BatchInput {
    let c = &model.config;
    let mut inputs: [Option<ModalityInput>; 3] = [None, None, None];
    for m in combo.modalities() {
        let seq = random(rng, n * c.seq_len, c.raw_dim);
        let pooled_raw = random(rng, n, c.raw_dim);
        inputs[m.index()] = Some(ModalityInput {
            seq: Some(seq),
            pooled_raw,
            encoded: None,
        });
    }
    BatchInput { combo, inputs }
}

#[test]
fn fresh_adapters_output_zero() {
    let model = model_with_adapters(2, 4.0);
    let x = random(&mut Rng::new(1), 4, 5);
    for combo in ModalityCombination::ALL {
        for m in combo.modalities() {
            let out = model.adapt_private(&x, m, combo).unwrap();
            assert_eq!(out.shape(), &[4, 6]);
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }
    for m in Modality::ALL {
        assert!(model.adapt_common(&x, m).unwrap().data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn rank_one_all_ones() {
    let mut model = model_with_adapters(1, 1.0);
    let pair = model.adapters().unwrap().common(Modality::Text);
    let a = model.params.name(pair.a).to_string();
    let b = model.params.name(pair.b).to_string();
    set(&mut model, &a, Tensor::full(1, 5, 1.0));
    set(&mut model, &b, Tensor::full(6, 1, 1.0));
    let out = model.adapt_common(&Tensor::full(4, 5, 1.0), Modality::Text).unwrap();
    assert!(out.data().iter().all(|&v| v == 5.0));
}

#[test]
fn delta_has_rank_at_most_r() {
    for rank in [1, 2, 3] {
        let mut model = model_with_adapters(rank, 2.0);
        let mut rng = Rng::new(5);
        let pair = model.adapters().unwrap().private(Modality::Audio, ModalityCombination::FULL).unwrap();
        let b = model.params.name(pair.b).to_string();
        set(&mut model, &b, random(&mut rng, 6, rank));
        let delta = pair.delta(&model.params, 2.0);
        assert_eq!(delta.shape(), &[6, 5]);
        let m = DMatrix::from_row_slice(6, 5, delta.data());
        let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
        sv.sort_by(|x, y| y.total_cmp(x));
        assert!(sv[rank - 1] > 1e-8);
        assert!(sv[rank..].iter().all(|&s| s <= 1e-10), "rank {rank}: {sv:?}");
    }
}

#[test]
fn common_adapter_ignores_combination() {
    let mut model = model_with_adapters(2, 3.0);
    let mut rng = Rng::new(9);
    for name in model.params.iter().map(|(_, n, _)| n.to_string()).collect::<Vec<_>>() {
        if name.ends_with(".B") {
            set(&mut model, &name, random(&mut rng, 6, 2));
        }
    }
    let x = random(&mut rng, 3, 5);
    let mut outs = Vec::new();
    for combo in ModalityCombination::ALL.iter().filter(|c| c.contains(Modality::Vision)) {
        let mut b = batch(&mut rng, &model, *combo, 3);
        b.inputs[Modality::Vision.index()].as_mut().unwrap().pooled_raw = x.clone();
        let mut ctx = Ctx::inference(&model.params);
        let out = model.forward(&mut ctx, &b, ForwardOptions::default()).unwrap();
        let rep = out.reps.iter().find(|r| r.modality == Modality::Vision).unwrap();
        outs.push((
            ctx.value(rep.common.unwrap()).clone(),
            ctx.value(rep.private.unwrap()).clone(),
        ));
    }
    for (com, _) in &outs[1..] {
        assert!(com.bit_eq(&outs[0].0));
    }
    assert!(max_abs_diff(&outs[0].1, &outs[1].1) > 1e-6);
}

#[test]
fn private_adapter_outside_combination_is_rejected() {
    let model = model_with_adapters(2, 1.0);
    let x = Tensor::zeros(4, 5);
    let combo = ModalityCombination::from_modalities(&[Modality::Audio]).unwrap();
    let err = model.adapt_private(&x, Modality::Text, combo).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn adapters_required_and_attached_once() {
    let mut rng = Rng::new(2);
    let mut model = Model::new(cfg(4, 3, 2), &mut rng).unwrap();
    let x = Tensor::zeros(4, 3);
    assert!(model.adapt_common(&x, Modality::Audio).is_err());
    model.attach_adapters(2, 1.0, &mut rng).unwrap();
    assert!(matches!(
        model.attach_adapters(2, 1.0, &mut rng),
        Err(Error::Contract(_))
    ));
}

#[test]
fn pool_averages_rows() {
    let r = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]);
    assert_eq!(pool(&r).data(), &[2.0, 4.0]);
    let single = Tensor::row(&[0.5, -1.5, 2.0]);
    assert!(pool(&single).bit_eq(&single));
}

#[test]
fn fusion_singleton_is_value_projection() {
    let model = model_with_adapters(2, 1.0);
    let mut rng = Rng::new(4);
    let r = random(&mut rng, 1, 6);
    let v = model.params.get(model.params.id("fusion.value.t").unwrap());
    let expected = r.matmul(v).unwrap();
    let got = model.fuse(&[(Modality::Text, r)]).unwrap();
    assert!(max_abs_diff(&got, &expected) < 1e-12);
}

#[test]
fn fusion_is_permutation_invariant() {
    let model = model_with_adapters(2, 1.0);
    let mut rng = Rng::new(8);
    let reps: Vec<(Modality, Tensor)> = Modality::ALL
        .iter()
        .map(|&m| (m, random(&mut rng, 2, 6)))
        .collect();
    let base = model.fuse(&reps).unwrap();
    for perm in [[1, 0, 2], [2, 1, 0], [1, 2, 0]] {
        let shuffled: Vec<_> = perm.iter().map(|&i| reps[i].clone()).collect();
        assert!(max_abs_diff(&model.fuse(&shuffled).unwrap(), &base) < 1e-12);
    }
}

#[test]
fn fusion_of_equal_inputs_matches_oracle() {
    let mut rng = Rng::new(12);
    let mut model = Model::new(cfg(2, 3, 2), &mut rng).unwrap();
    let key = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 2.0]]);
    let value = Tensor::from_rows(&[vec![0.0, 1.0], vec![3.0, -1.0]]);
    for m in Modality::ALL {
        set(&mut model, &format!("fusion.key.{}", m.letter()), key.clone());
        set(&mut model, &format!("fusion.value.{}", m.letter()), value.clone());
    }
    set(&mut model, "fusion.query", Tensor::matrix(2, 1, vec![1.0, -1.0]));
    let r = Tensor::row(&[2.0, 1.0]);
    let reps: Vec<_> = Modality::ALL.iter().map(|&m| (m, r.clone())).collect();
    // Equal scores give uniform weights, so the result is r V = (3, 1).
    let got = model.fuse(&reps).unwrap();
    assert!(max_abs_diff(&got, &Tensor::row(&[3.0, 1.0])) < 1e-12);

    // Two different inputs: softmax over scores (r K q)/sqrt(2), by hand.
    let r2 = Tensor::row(&[0.0, 1.0]);
    let s1 = (2.0 * 1.0 + 1.0 * 0.5 - (2.0 * 0.0 + 1.0 * 2.0)) / 2f64.sqrt();
    let s2 = (0.5 - 2.0) / 2f64.sqrt();
    let (e1, e2) = (s1.exp(), s2.exp());
    let (w1, w2) = (e1 / (e1 + e2), e2 / (e1 + e2));
    let v1 = [3.0, 1.0];
    let v2 = [3.0, -1.0];
    let expected = Tensor::row(&[w1 * v1[0] + w2 * v2[0], w1 * v1[1] + w2 * v2[1]]);
    let got = model
        .fuse(&[(Modality::Audio, r), (Modality::Vision, r2)])
        .unwrap();
    assert!(max_abs_diff(&got, &expected) < 1e-12);
    assert!(model.fuse(&[]).is_err());
}

#[test]
fn gate_override_mixes_heads() {
    let mut rng = Rng::new(21);
    let mut model = Model::new(cfg(4, 3, 2), &mut rng).unwrap();
    model.attach_adapters(2, 1.0, &mut rng).unwrap();
    set(&mut model, "head.prt.w", Tensor::zeros(4, 2));
    set(&mut model, "head.prt.b", Tensor::row(&[2.0, 0.0]));
    set(&mut model, "head.com.w", Tensor::zeros(4, 2));
    set(&mut model, "head.com.b", Tensor::row(&[0.0, 2.0]));
    let b = batch(&mut rng, &model, ModalityCombination::FULL, 1);
    let run = |w: Option<f64>| {
        let opts = ForwardOptions {
            gate_override: w,
            ..Default::default()
        };
        model.predict_batch(&b, opts).unwrap()
    };
    assert_eq!(run(Some(0.5)).y_last.data(), &[1.0, 1.0]);
    assert_eq!(run(Some(0.0)).y_last.data(), &[0.0, 2.0]);
    assert_eq!(run(Some(1.0)).y_last.data(), &[2.0, 0.0]);
    // The zero-initialized gate gives weight one half.
    let learned = run(None);
    assert_eq!(learned.weight.unwrap().data(), &[0.5]);
    assert_eq!(learned.y_last.data(), &[1.0, 1.0]);
}

#[test]
fn encode_shapes_and_determinism() {
    let mut model = model_with_adapters(2, 1.0);
    let x = random(&mut Rng::new(3), 4, 5);
    let a = model.encode(&x, Modality::Audio).unwrap();
    assert_eq!(a.shape(), &[4, 6]);
    assert!(a.bit_eq(&model.encode(&x, Modality::Audio).unwrap()));
    assert!(matches!(
        model.encode(&Tensor::zeros(4, 7), Modality::Audio),
        Err(Error::Shape { .. })
    ));
    set(&mut model, "enc.a.out.w", Tensor::zeros(6, 6));
    assert!(model.encode(&x, Modality::Audio).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn fresh_adapters_match_base_model() {
    let mut rng = Rng::new(31);
    let base = Model::new(cfg(6, 5, 3), &mut rng).unwrap();
    let mut adapted = base.clone();
    adapted.attach_adapters(4, 16.0, &mut rng).unwrap();
    for combo in ModalityCombination::ALL {
        let b = batch(&mut rng, &base, combo, 5);
        let p0 = base.predict_batch(&b, ForwardOptions::default()).unwrap();
        let p1 = adapted.predict_batch(&b, ForwardOptions::default()).unwrap();
        assert!(max_abs_diff(&p0.y_last, &p1.y_last) <= 1e-12);
        let p2 = adapted
            .predict_batch(&b, ForwardOptions { base_only: true, ..Default::default() })
            .unwrap();
        assert!(p0.y_last.bit_eq(&p2.y_last));
    }
}

#[test]
fn missing_modality_is_a_contract_error() {
    let model = model_with_adapters(2, 1.0);
    let mut b = batch(&mut Rng::new(1), &model, ModalityCombination::FULL, 2);
    b.inputs[Modality::Text.index()] = None;
    assert!(matches!(
        model.predict_batch(&b, ForwardOptions::default()),
        Err(Error::Contract(_))
    ));
}

#[test]
fn parameter_groups_partition() {
    let model = model_with_adapters(2, 1.0);
    let base = model.base_params();
    let adapters = model.adapter_params();
    // 3 modalities x 4 combinations each, plus 3 shared, two matrices apiece.
    assert_eq!(adapters.len(), 2 * (12 + 3));
    assert!(adapters.iter().all(|id| !base.contains(id)));
    assert_eq!(base.len() + adapters.len() + 4, model.params.len());
}

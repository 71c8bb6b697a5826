//! Forward-pass contracts for the four variants: output shapes, prior
//! usage (or guaranteed non-usage), the fusion unit's arithmetic, and —
//! via independently wired twin tapes — the exact dataflow of the two
//! fusion variants together with gradient accumulation over weights the
//! prior and image branches share.

mod support;

use std::collections::BTreeMap;
use std::sync::Arc;

use pfseg_core::{
    build_model, fusion_forward, DataError, FusionParams, IndexMap, Model, ModelSpec, Tape,
    Tensor, TrainError, ValueId, Variant,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::t4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn rand_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: u8) -> pfseg_core::IntTensor {
    let data: Vec<u8> = (0..h * w)
        .map(|i| {
            if i % 97 == 0 {
                pfseg_core::VOID
            } else {
                rng.random_range(0..classes)
            }
        })
        .collect();
    pfseg_core::IntTensor::new(vec![1, h, w], data).unwrap()
}

#[test]
fn logits_cover_every_pixel_and_class() {
    for &variant in &[
        Variant::Baseline,
        Variant::StackedPrior,
        Variant::EmbeddingPrior,
        Variant::DecoderPrior,
    ] {
        let spec = ModelSpec::compact(variant, 12);
        let model: Model<f32> = build_model(&spec, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let image = Tensor::from_fn(&[2, 3, 32, 48], |_| rng.random_range(-1.0f32..1.0));
        let prior = Tensor::from_fn(&[2, 3, 32, 48], |_| rng.random_range(-1.0f32..1.0));
        let x0 = variant.uses_prior().then_some(&prior);
        let logits = model.forward(x0, &image).unwrap();
        assert_eq!(logits.shape(), &[2, 12, 32, 48], "{}", variant.name());
    }
}

#[test]
fn baseline_ignores_the_prior_entirely() {
    let spec = ModelSpec::compact(Variant::Baseline, 12);
    let model: Model<f64> = build_model(&spec, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let image = rand_tensor(&mut rng, &[1, 3, 32, 32]);
    let prior_a = rand_tensor(&mut rng, &[1, 3, 32, 32]);
    let prior_b = rand_tensor(&mut rng, &[1, 3, 32, 32]);

    let none = model.forward(None, &image).unwrap();
    let with_a = model.forward(Some(&prior_a), &image).unwrap();
    let with_b = model.forward(Some(&prior_b), &image).unwrap();
    assert_eq!(none.data(), with_a.data());
    assert_eq!(none.data(), with_b.data());
}

#[test]
fn prior_variants_refuse_to_run_without_a_prior() {
    for &variant in &[
        Variant::StackedPrior,
        Variant::EmbeddingPrior,
        Variant::DecoderPrior,
    ] {
        let spec = ModelSpec::compact(variant, 12);
        let model: Model<f64> = build_model(&spec, 5).unwrap();
        let image = Tensor::zeros(&[1, 3, 16, 16]);
        match model.forward(None, &image) {
            Err(TrainError::MissingPrior { variant: name }) => {
                assert_eq!(name, variant.name());
            }
            other => panic!("expected MissingPrior, got {other:?}"),
        }
    }
}

#[test]
fn non_divisible_extents_are_rejected() {
    let spec = ModelSpec::compact(Variant::Baseline, 12);
    let model: Model<f64> = build_model(&spec, 6).unwrap();
    let image = Tensor::zeros(&[1, 3, 60, 64]);
    match model.forward(None, &image) {
        Err(TrainError::Data(DataError::IndivisibleExtents { h: 60, w: 64 })) => {}
        other => panic!("expected IndivisibleExtents, got {other:?}"),
    }
}

#[test]
fn prior_variants_respond_to_the_prior() {
    for &variant in &[
        Variant::StackedPrior,
        Variant::EmbeddingPrior,
        Variant::DecoderPrior,
    ] {
        let spec = ModelSpec::compact(variant, 12);
        let model: Model<f64> = build_model(&spec, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let image = rand_tensor(&mut rng, &[1, 3, 32, 32]);
        let prior_a = rand_tensor(&mut rng, &[1, 3, 32, 32]);
        let prior_b = rand_tensor(&mut rng, &[1, 3, 32, 32]);

        let out_a = model.forward(Some(&prior_a), &image).unwrap();
        let out_b = model.forward(Some(&prior_b), &image).unwrap();
        assert_ne!(
            out_a.data(),
            out_b.data(),
            "{} logits ignored the prior",
            variant.name()
        );
    }
}

#[test]
fn forward_is_deterministic() {
    let spec = ModelSpec::compact(Variant::DecoderPrior, 12);
    let model: Model<f64> = build_model(&spec, 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let image = rand_tensor(&mut rng, &[1, 3, 32, 32]);
    let prior = rand_tensor(&mut rng, &[1, 3, 32, 32]);
    let once = model.forward(Some(&prior), &image).unwrap();
    let twice = model.forward(Some(&prior), &image).unwrap();
    assert_eq!(once.data(), twice.data());
}

#[test]
fn fusion_unit_matches_a_hand_computed_scalar() {
    // One channel, 1x1 kernels, unit mixing weights, output weight 2:
    // y = 2 * tanh(0.5 + 0.5).
    let params = FusionParams::without_bias(
        t4::<f64>([1, 1, 1, 1], &[1.0]),
        t4::<f64>([1, 1, 1, 1], &[1.0]),
        t4::<f64>([1, 1, 1, 1], &[2.0]),
    );
    let e = t4::<f64>([1, 1, 1, 1], &[0.5]);
    let out = fusion_forward(&params, &e, &e).unwrap();
    let expected = 2.0 * 1.0f64.tanh();
    assert_eq!(out.data(), &[expected]);
    assert!((out.data()[0] - 1.523_188_3).abs() < 1e-6);
}

#[test]
fn fusion_hidden_activation_saturates_inside_unit_bounds() {
    // Identity output conv exposes the tanh stage directly: however large
    // the summed embeddings get, the activation never leaves [-1, 1]; in
    // floats the extremes round onto the bound itself.
    let params = FusionParams::without_bias(
        t4::<f64>([1, 1, 1, 1], &[1.0]),
        t4::<f64>([1, 1, 1, 1], &[1.0]),
        t4::<f64>([1, 1, 1, 1], &[1.0]),
    );
    let e0 = t4::<f64>([1, 1, 2, 2], &[-50.0, -0.5, 0.0, 30.0]);
    let e1 = t4::<f64>([1, 1, 2, 2], &[-50.0, 0.25, 0.0, 30.0]);
    let out = fusion_forward(&params, &e0, &e1).unwrap();
    for &v in out.data() {
        assert!((-1.0..=1.0).contains(&v), "activation {v} escaped [-1, 1]");
    }
    assert_eq!(out.data()[0], -1.0);
    assert_eq!(out.data()[1], (-0.25f64).tanh());
    assert_eq!(out.data()[2], 0.0);
    assert_eq!(out.data()[3], 1.0);
}

#[test]
fn zeroed_fusion_weights_make_fusion_variants_input_blind() {
    // With every fusion weight zeroed (and freshly built conv biases all
    // zero), the decoder sees an all-zero bottleneck, so the logits
    // collapse to exactly zero no matter what the inputs are.
    for &variant in &[Variant::EmbeddingPrior, Variant::DecoderPrior] {
        let spec = ModelSpec::compact(variant, 12);
        let mut model: Model<f64> = build_model(&spec, 7).unwrap();
        for (name, tensor) in model.params_mut().iter_mut() {
            if name.starts_with("fusion_") {
                *tensor = Tensor::zeros(tensor.shape());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let image_a = rand_tensor(&mut rng, &[1, 3, 32, 32]);
        let prior_a = rand_tensor(&mut rng, &[1, 3, 32, 32]);
        let image_b = rand_tensor(&mut rng, &[1, 3, 32, 32]);
        let prior_b = rand_tensor(&mut rng, &[1, 3, 32, 32]);

        let out_a = model.forward(Some(&prior_a), &image_a).unwrap();
        let out_b = model.forward(Some(&prior_b), &image_b).unwrap();
        assert!(out_a.data().iter().all(|&v| v == 0.0), "{}", variant.name());
        assert_eq!(out_a.data(), out_b.data());
    }
}

// ---------------------------------------------------------------------------
// Twin-tape wiring replications. Each builds the variant's dataflow by hand
// from individual tape ops, binding the prior branch's shared weights as
// *separate* parameter nodes loaded with identical values. Matching losses
// pin the wiring; summing the per-branch gradients and comparing against the
// shared model's single gradient pins accumulation across shared uses.
// ---------------------------------------------------------------------------

struct Sandbox {
    tape: Tape<f64>,
    ids: BTreeMap<String, ValueId>,
}

impl Sandbox {
    fn encode(
        &mut self,
        ids: &BTreeMap<String, ValueId>,
        k: usize,
        x: ValueId,
    ) -> (ValueId, Vec<Arc<IndexMap>>) {
        let pad = (k - 1) / 2;
        let mut h = x;
        let mut maps = Vec::new();
        for l in 1..=4 {
            let w = ids[&format!("enc{l}.weight")];
            let b = ids[&format!("enc{l}.bias")];
            h = self.tape.conv2d(h, w, Some(b), 1, pad).unwrap();
            h = self.tape.relu(h).unwrap();
            let (pooled, map) = self.tape.max_pool2d(h).unwrap();
            h = pooled;
            maps.push(map);
        }
        (h, maps)
    }

    fn dec_conv(&mut self, ids: &BTreeMap<String, ValueId>, k: usize, l: usize, x: ValueId) -> ValueId {
        let pad = (k - 1) / 2;
        let w = ids[&format!("dec{l}.weight")];
        let b = ids[&format!("dec{l}.bias")];
        let h = self.tape.conv2d(x, w, Some(b), 1, pad).unwrap();
        self.tape.relu(h).unwrap()
    }

    fn classify(&mut self, x: ValueId) -> ValueId {
        let w = self.ids["classifier.weight"];
        let b = self.ids["classifier.bias"];
        self.tape.conv2d(x, w, Some(b), 1, 0).unwrap()
    }

    fn fuse(&mut self, fk: usize, prefix: &str, e_x0: ValueId, e_x1: ValueId) -> ValueId {
        let pad = (fk - 1) / 2;
        let w_x0 = self.ids[&format!("{prefix}.w_x0")];
        let w_x1 = self.ids[&format!("{prefix}.w_x1")];
        let w_y1 = self.ids[&format!("{prefix}.w_y1")];
        let a0 = self.tape.conv2d(e_x0, w_x0, None, 1, pad).unwrap();
        let a1 = self.tape.conv2d(e_x1, w_x1, None, 1, pad).unwrap();
        let s = self.tape.add(a0, a1).unwrap();
        let a = self.tape.tanh(s).unwrap();
        self.tape.conv2d(a, w_y1, None, 1, pad).unwrap()
    }
}

/// Binds a second, independent parameter node for each named tensor so the
/// prior branch can be wired without sharing autodiff identity.
fn bind_clones(
    sandbox: &mut Sandbox,
    model: &Model<f64>,
    names: &[String],
) -> BTreeMap<String, ValueId> {
    names
        .iter()
        .map(|name| {
            let value = model.param(name).expect(name).clone();
            (name.clone(), sandbox.tape.parameter(value))
        })
        .collect()
}

fn enc_names() -> Vec<String> {
    (1..=4)
        .flat_map(|l| [format!("enc{l}.weight"), format!("enc{l}.bias")])
        .collect()
}

fn grad_sum(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()
}

/// Shared-model loss and per-parameter gradients for one labelled pair.
fn shared_run(
    model: &Model<f64>,
    prior: &Tensor<f64>,
    image: &Tensor<f64>,
    gt: &pfseg_core::IntTensor,
) -> (f64, BTreeMap<String, Tensor<f64>>) {
    let mut tape = Tape::new();
    let ids = model.bind(&mut tape);
    let x0 = tape.constant(prior.clone());
    let x1 = tape.constant(image.clone());
    let logits = model.forward_on_tape(&mut tape, &ids, Some(x0), x1).unwrap();
    let (loss, _) = tape.softmax_cross_entropy(logits, gt).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    let by_name = ids
        .iter()
        .map(|(name, &id)| (name.clone(), grads.take(id).expect(name)))
        .collect();
    (tape.value(loss).unwrap().data()[0], by_name)
}

#[test]
fn embedding_wiring_and_shared_encoder_gradients_replicate() {
    let spec = ModelSpec::compact(Variant::EmbeddingPrior, 12);
    let model: Model<f64> = build_model(&spec, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let image = rand_tensor(&mut rng, &[1, 3, 32, 32]);
    let prior = rand_tensor(&mut rng, &[1, 3, 32, 32]);
    let gt = rand_labels(&mut rng, 32, 32, 12);

    let (shared_loss, shared_grads) = shared_run(&model, &prior, &image, &gt);

    // Hand-wired twin: encode the image and the prior with separate
    // parameter nodes, fuse the bottlenecks (prior first), decode once
    // with the image's pooling indices.
    let mut sb = {
        let mut tape = Tape::new();
        let ids = model.bind(&mut tape);
        Sandbox { tape, ids }
    };
    let pri_ids = bind_clones(&mut sb, &model, &enc_names());
    let k = spec.backbone_kernel;
    let x1 = sb.tape.constant(image.clone());
    let x0 = sb.tape.constant(prior.clone());
    let img_ids = sb.ids.clone();
    let (b1, idx1) = sb.encode(&img_ids, k, x1);
    let (b0, _idx0) = sb.encode(&pri_ids, k, x0);
    let fused = sb.fuse(spec.fusion_kernel, "fusion_embed", b0, b1);
    let mut h = fused;
    for l in 1..=4 {
        h = sb.tape.max_unpool2d(h, &idx1[4 - l]).unwrap();
        h = sb.dec_conv(&img_ids, k, l, h);
    }
    let logits = sb.classify(h);
    let (loss, _) = sb.tape.softmax_cross_entropy(logits, &gt).unwrap();
    assert_eq!(sb.tape.value(loss).unwrap().data()[0], shared_loss);

    let mut grads = sb.tape.backward(loss).unwrap();
    for name in enc_names() {
        let g_img = grads.take(sb.ids[&name]).expect(&name);
        let g_pri = grads.take(pri_ids[&name]).expect(&name);
        assert_eq!(
            grad_sum(&g_img, &g_pri),
            shared_grads[&name].data(),
            "shared gradient for {name} is not the sum over branches"
        );
    }
    // Single-use parameters must agree outright.
    for (name, &id) in &sb.ids {
        if name.starts_with("enc") {
            continue;
        }
        let g = grads.take(id).expect(name);
        assert_eq!(g.data(), shared_grads[name].data(), "{name}");
    }
}

#[test]
fn decoder_wiring_and_shared_branch_gradients_replicate() {
    let spec = ModelSpec::compact(Variant::DecoderPrior, 12);
    let model: Model<f64> = build_model(&spec, 31).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let image = rand_tensor(&mut rng, &[1, 3, 32, 32]);
    let prior = rand_tensor(&mut rng, &[1, 3, 32, 32]);
    let gt = rand_labels(&mut rng, 32, 32, 12);

    let (shared_loss, shared_grads) = shared_run(&model, &prior, &image, &gt);

    // Hand-wired twin: both streams keep their own pooling indices, each
    // decoder level unpools both, fuses prior-then-image, and pushes the
    // fused map through the level conv; the prior stream advances through
    // the same conv except at the last level, where only the image stream
    // feeds the classifier.
    let mut sb = {
        let mut tape = Tape::new();
        let ids = model.bind(&mut tape);
        Sandbox { tape, ids }
    };
    let split_names: Vec<String> = enc_names()
        .into_iter()
        .chain((1..=3).flat_map(|l| [format!("dec{l}.weight"), format!("dec{l}.bias")]))
        .collect();
    let pri_ids = bind_clones(&mut sb, &model, &split_names);
    let k = spec.backbone_kernel;
    let x1 = sb.tape.constant(image.clone());
    let x0 = sb.tape.constant(prior.clone());
    let img_ids = sb.ids.clone();
    let (b1, idx1) = sb.encode(&img_ids, k, x1);
    let (b0, idx0) = sb.encode(&pri_ids, k, x0);
    let mut h_img = b1;
    let mut h_pri = b0;
    for l in 1..=4 {
        let u_img = sb.tape.max_unpool2d(h_img, &idx1[4 - l]).unwrap();
        let u_pri = sb.tape.max_unpool2d(h_pri, &idx0[4 - l]).unwrap();
        let fused = sb.fuse(spec.fusion_kernel, &format!("fusion_dec{l}"), u_pri, u_img);
        h_img = sb.dec_conv(&img_ids, k, l, fused);
        if l < 4 {
            h_pri = sb.dec_conv(&pri_ids, k, l, u_pri);
        }
    }
    let logits = sb.classify(h_img);
    let (loss, _) = sb.tape.softmax_cross_entropy(logits, &gt).unwrap();
    assert_eq!(sb.tape.value(loss).unwrap().data()[0], shared_loss);

    let mut grads = sb.tape.backward(loss).unwrap();
    for name in &split_names {
        let g_img = grads.take(sb.ids[name]).expect(name);
        let g_pri = grads.take(pri_ids[name]).expect(name);
        assert_eq!(
            grad_sum(&g_img, &g_pri),
            shared_grads[name].data(),
            "shared gradient for {name} is not the sum over branches"
        );
    }
    for (name, &id) in &sb.ids {
        if split_names.contains(name) {
            continue;
        }
        let g = grads.take(id).expect(name);
        assert_eq!(g.data(), shared_grads[name].data(), "{name}");
    }
}

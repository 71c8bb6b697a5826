//! Kernel conformance: hand-computed fixed values, equality against the
//! six-loop convolution reference, and randomized structural properties.

mod support;

use pfseg_core::ops;
use pfseg_core::{Tensor, TensorError, VOID};
use proptest::prelude::*;
use support::{labels, naive_conv2d, t4};

#[test]
fn conv_identity_diagonal_kernel() {
    let input = t4::<f64>([1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
    let weight = t4::<f64>([1, 1, 2, 2], &[1., 0., 0., 1.]);
    let out = ops::conv2d_forward(&input, &weight, None, 1, 0).unwrap();
    assert_eq!(out.shape(), &[1, 1, 2, 2]);
    assert_eq!(out.data(), &[6., 8., 12., 14.]);
}

#[test]
fn conv_zero_kernel_yields_constant_bias() {
    let input = t4::<f32>([1, 2, 4, 5], &[0.37; 40]);
    let weight = Tensor::<f32>::zeros(&[3, 2, 1, 1]);
    let bias = Tensor::new(vec![3], vec![-1.5f32, 0.25, 9.0]).unwrap();
    let out = ops::conv2d_forward(&input, &weight, Some(&bias), 1, 0).unwrap();
    for co in 0..3 {
        for h in 0..4 {
            for w in 0..5 {
                assert_eq!(out.at4(0, co, h, w), bias.data()[co]);
            }
        }
    }
}

#[test]
fn conv_same_padding_shape_rule() {
    let input = Tensor::<f32>::full(&[1, 3, 8, 8], 1.0);
    let weight = Tensor::<f32>::full(&[5, 3, 3, 3], 0.1);
    let out = ops::conv2d_forward(&input, &weight, None, 1, 1).unwrap();
    assert_eq!(out.shape(), &[1, 5, 8, 8]);
}

#[test]
fn conv_rejects_zero_stride_and_oversized_kernel() {
    let input = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
    let weight = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
    assert!(matches!(
        ops::conv2d_forward(&input, &weight, None, 0, 1),
        Err(TensorError::NonPositiveStride)
    ));
    let big = Tensor::<f32>::zeros(&[1, 1, 7, 7]);
    assert!(matches!(
        ops::conv2d_forward(&input, &big, None, 1, 1),
        Err(TensorError::KernelTooLarge { .. })
    ));
}

#[test]
fn pool_picks_max_and_records_flat_offset() {
    let input = t4::<f32>([1, 1, 2, 2], &[1., 2., 3., 4.]);
    let (out, idx) = ops::max_pool2d_forward(&input).unwrap();
    assert_eq!(out.data(), &[4.0]);
    assert_eq!(idx.indices(), &[3]);
    assert_eq!(idx.input_shape(), &[1, 1, 2, 2]);
    assert_eq!(idx.output_shape(), &[1, 1, 1, 1]);
}

#[test]
fn pool_ties_break_toward_lowest_offset() {
    let input = Tensor::<f32>::full(&[1, 1, 4, 4], 2.5);
    let (out, idx) = ops::max_pool2d_forward(&input).unwrap();
    assert!(out.data().iter().all(|&v| v == 2.5));
    // Each 2x2 window's top-left corner, in flat coordinates.
    assert_eq!(idx.indices(), &[0, 2, 8, 10]);
}

#[test]
fn pool_rejects_odd_extents() {
    let input = Tensor::<f32>::zeros(&[1, 1, 3, 4]);
    assert!(matches!(
        ops::max_pool2d_forward(&input),
        Err(TensorError::OddSpatialExtent { h: 3, w: 4 })
    ));
}

#[test]
fn unpool_scatters_back_to_argmax_cell() {
    let input = t4::<f32>([1, 1, 2, 2], &[5., 1., 1., 1.]);
    let (pooled, idx) = ops::max_pool2d_forward(&input).unwrap();
    assert_eq!(pooled.data(), &[5.0]);
    let restored = ops::max_unpool2d_forward(&pooled, &idx).unwrap();
    assert_eq!(restored.data(), &[5., 0., 0., 0.]);

    let input = t4::<f32>([1, 1, 2, 2], &[1., 1., 1., 4.]);
    let (pooled, idx) = ops::max_pool2d_forward(&input).unwrap();
    let restored = ops::max_unpool2d_forward(&pooled, &idx).unwrap();
    assert_eq!(restored.data(), &[0., 0., 0., 4.]);
}

#[test]
fn tanh_zero_and_saturation() {
    let x = t4::<f64>([1, 1, 1, 3], &[0.0, 20.0, -20.0]);
    let y = ops::tanh_op(&x);
    assert_eq!(y.data()[0], 0.0);
    assert!((y.data()[1] - 1.0).abs() < 1e-9);
    assert!((y.data()[2] + 1.0).abs() < 1e-9);
}

#[test]
fn relu_clamps_negatives() {
    let x = t4::<f32>([1, 1, 1, 3], &[-1.0, 0.0, 2.0]);
    assert_eq!(ops::relu(&x).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn concat_keeps_first_operands_channels_first() {
    let a = Tensor::<f32>::full(&[1, 3, 8, 8], 1.0);
    let b = Tensor::<f32>::full(&[1, 3, 8, 8], 2.0);
    let c = ops::concat_channels(&a, &b).unwrap();
    assert_eq!(c.shape(), &[1, 6, 8, 8]);
    for ch in 0..6 {
        let expect = if ch < 3 { 1.0 } else { 2.0 };
        assert_eq!(c.at4(0, ch, 4, 4), expect);
    }
}

#[test]
fn split_undoes_concat() {
    let a = t4::<f32>([1, 2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]);
    let b = t4::<f32>([1, 1, 2, 2], &[9., 10., 11., 12.]);
    let c = ops::concat_channels(&a, &b).unwrap();
    let (ra, rb) = ops::split_channels(&c, 2, 1).unwrap();
    assert_eq!(ra.data(), a.data());
    assert_eq!(rb.data(), b.data());
}

#[test]
fn cross_entropy_of_uniform_logits_is_ln_c() {
    let logits = Tensor::<f64>::full(&[1, 12, 6, 4], 0.73);
    let lab = labels(6, 4, &[5u8; 24]);
    let lab = pfseg_core::IntTensor::new(vec![1, 6, 4], lab.data().to_vec()).unwrap();
    let res = ops::softmax_cross_entropy_forward(&logits, &lab).unwrap();
    assert!((res.loss.data()[0] - (12.0f64).ln()).abs() < 1e-9);
    assert!((res.loss.data()[0] - 2.48491).abs() < 1e-5);
    assert_eq!(res.valid, 24);
}

#[test]
fn cross_entropy_drives_to_zero_with_margin() {
    let mut prev = f64::INFINITY;
    for margin in [2.0, 8.0, 32.0] {
        let mut logits = Tensor::<f64>::zeros(&[1, 3, 1, 1]);
        logits.data_mut()[1] = margin;
        let lab = pfseg_core::IntTensor::new(vec![1, 1, 1], vec![1]).unwrap();
        let res = ops::softmax_cross_entropy_forward(&logits, &lab).unwrap();
        let loss = res.loss.data()[0];
        assert!(loss < prev);
        prev = loss;
    }
    assert!(prev < 1e-10);
}

#[test]
fn cross_entropy_skips_void_and_rejects_bad_labels() {
    let logits = Tensor::<f64>::full(&[1, 3, 1, 2], 1.0);
    let all_void = pfseg_core::IntTensor::new(vec![1, 1, 2], vec![VOID, VOID]).unwrap();
    let res = ops::softmax_cross_entropy_forward(&logits, &all_void).unwrap();
    assert_eq!(res.loss.data()[0], 0.0);
    assert_eq!(res.valid, 0);

    let bad = pfseg_core::IntTensor::new(vec![1, 1, 2], vec![0, 3]).unwrap();
    assert!(matches!(
        ops::softmax_cross_entropy_forward(&logits, &bad),
        Err(TensorError::LabelOutOfRange { label: 3, .. })
    ));
}

#[test]
fn cross_entropy_is_stable_under_huge_logits() {
    let logits = Tensor::<f64>::full(&[1, 4, 1, 1], 1e7);
    let lab = pfseg_core::IntTensor::new(vec![1, 1, 1], vec![2]).unwrap();
    let res = ops::softmax_cross_entropy_forward(&logits, &lab).unwrap();
    assert!((res.loss.data()[0] - (4.0f64).ln()).abs() < 1e-9);
}

/// Random conv instance: shapes plus matching data lengths.
fn conv_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, [usize; 6], usize, usize)> {
    (
        1usize..3,  // n
        1usize..4,  // c_in
        1usize..4,  // c_out
        prop::sample::select(vec![1usize, 2, 3, 5]),
        1usize..3,  // stride
        0usize..3,  // padding
        2usize..8,  // h
        2usize..8,  // w
    )
        .prop_filter("kernel must fit padded input", |(_, _, _, k, _, p, h, w)| {
            *k <= h + 2 * p && *k <= w + 2 * p
        })
        .prop_flat_map(|(n, ci, co, k, s, p, h, w)| {
            let input = prop::collection::vec(-2.0f64..2.0, n * ci * h * w);
            let weight = prop::collection::vec(-1.0f64..1.0, co * ci * k * k);
            let bias = prop::collection::vec(-1.0f64..1.0, co);
            (input, weight, bias, Just([n, ci, co, k, h, w]), Just(s), Just(p))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The vectorized path must agree with the six-loop reference bit for
    /// bit: same dtype, same per-cell summation order.
    #[test]
    fn conv_matches_naive_reference_bitwise(
        (input, weight, bias, dims, stride, padding) in conv_case()
    ) {
        let [n, ci, co, k, h, w] = dims;
        let input = Tensor::<f64>::new(vec![n, ci, h, w], input).unwrap();
        let weight = Tensor::<f64>::new(vec![co, ci, k, k], weight).unwrap();
        let bias = Tensor::<f64>::new(vec![co], bias).unwrap();
        let fast = ops::conv2d_forward(&input, &weight, Some(&bias), stride, padding).unwrap();
        let slow = naive_conv2d(&input, &weight, Some(&bias), stride, padding);
        prop_assert_eq!(fast.shape(), slow.shape());
        prop_assert_eq!(fast.data(), slow.data());
    }

    /// Same agreement in f32, where reassociation would actually show.
    #[test]
    fn conv_matches_naive_reference_bitwise_f32(
        (input, weight, bias, dims, stride, padding) in conv_case()
    ) {
        let [n, ci, co, k, h, w] = dims;
        let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<_>>();
        let input = Tensor::<f32>::new(vec![n, ci, h, w], to32(input)).unwrap();
        let weight = Tensor::<f32>::new(vec![co, ci, k, k], to32(weight)).unwrap();
        let bias = Tensor::<f32>::new(vec![co], to32(bias)).unwrap();
        let fast = ops::conv2d_forward(&input, &weight, Some(&bias), stride, padding).unwrap();
        let slow = naive_conv2d(&input, &weight, Some(&bias), stride, padding);
        prop_assert_eq!(fast.data(), slow.data());
    }

    /// pool→unpool keeps each window's max in place and zeroes the rest.
    #[test]
    fn pool_unpool_preserves_window_maxima(
        data in prop::collection::vec(-5.0f32..5.0, 2 * 3 * 4 * 6)
    ) {
        let input = Tensor::<f32>::new(vec![2, 3, 4, 6], data).unwrap();
        let (pooled, idx) = ops::max_pool2d_forward(&input).unwrap();
        let restored = ops::max_unpool2d_forward(&pooled, &idx).unwrap();
        prop_assert_eq!(restored.shape(), input.shape());
        // Count nonzeros per window and check the max survives.
        for n in 0..2 {
            for c in 0..3 {
                for bh in 0..2 {
                    for bw in 0..3 {
                        let window = [
                            input.at4(n, c, bh * 2, bw * 2),
                            input.at4(n, c, bh * 2, bw * 2 + 1),
                            input.at4(n, c, bh * 2 + 1, bw * 2),
                            input.at4(n, c, bh * 2 + 1, bw * 2 + 1),
                        ];
                        let max = window.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                        prop_assert_eq!(pooled.at4(n, c, bh, bw), max);
                        let restored_window = [
                            restored.at4(n, c, bh * 2, bw * 2),
                            restored.at4(n, c, bh * 2, bw * 2 + 1),
                            restored.at4(n, c, bh * 2 + 1, bw * 2),
                            restored.at4(n, c, bh * 2 + 1, bw * 2 + 1),
                        ];
                        let nonzero = restored_window.iter().filter(|&&v| v != 0.0).count();
                        prop_assert!(nonzero <= 1);
                        prop_assert!(restored_window.contains(&max) || max == 0.0);
                    }
                }
            }
        }
    }

    /// Uniform logits cost exactly ln C, whatever the spatial size.
    #[test]
    fn uniform_cross_entropy_is_ln_c(
        c in 2usize..16,
        h in 1usize..7,
        w in 1usize..7,
        fill in -3.0f64..3.0,
    ) {
        let logits = Tensor::<f64>::full(&[1, c, h, w], fill);
        let lab = pfseg_core::IntTensor::new(
            vec![1, h, w],
            (0..h * w).map(|i| (i % c) as u8).collect(),
        ).unwrap();
        let res = ops::softmax_cross_entropy_forward(&logits, &lab).unwrap();
        prop_assert!((res.loss.data()[0] - (c as f64).ln()).abs() < 1e-9);
    }
}

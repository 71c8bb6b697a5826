//! Shared oracles for the integration tests: independent reference
//! implementations the fast kernels are checked against.

#![allow(dead_code)]

use pfseg_core::{IntTensor, Scalar, Tensor, VOID};

/// Direct six-loop convolution (cross-correlation, zero padding). Summation
/// runs input channels outermost, then kernel rows, then kernel columns —
/// the order the fast path promises — so comparisons may demand bitwise
/// equality.
pub fn naive_conv2d<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    padding: usize,
) -> Tensor<S> {
    let (n_b, c_in, h_in, w_in) = match input.shape() {
        [a, b, c, d] => (*a, *b, *c, *d),
        s => panic!("naive_conv2d: rank-4 input required, got {s:?}"),
    };
    let (c_out, wc_in, k, _) = match weight.shape() {
        [a, b, c, d] => (*a, *b, *c, *d),
        s => panic!("naive_conv2d: rank-4 weight required, got {s:?}"),
    };
    assert_eq!(c_in, wc_in);
    let h_out = (h_in + 2 * padding - k) / stride + 1;
    let w_out = (w_in + 2 * padding - k) / stride + 1;
    let mut out = Tensor::zeros(&[n_b, c_out, h_out, w_out]);
    for n in 0..n_b {
        for co in 0..c_out {
            for ho in 0..h_out {
                for wo in 0..w_out {
                    let mut acc = S::zero();
                    for ci in 0..c_in {
                        for kh in 0..k {
                            for kw in 0..k {
                                let hi = (ho * stride + kh) as isize - padding as isize;
                                let wi = (wo * stride + kw) as isize - padding as isize;
                                if hi < 0 || wi < 0 || hi >= h_in as isize || wi >= w_in as isize {
                                    continue;
                                }
                                let x = input.at4(n, ci, hi as usize, wi as usize);
                                let w = weight.at4(co, ci, kh, kw);
                                acc = acc + w * x;
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc = acc + b.data()[co];
                    }
                    let off = ((n * c_out + co) * h_out + ho) * w_out + wo;
                    out.data_mut()[off] = acc;
                }
            }
        }
    }
    out
}

/// Metric values recomputed from raw (gt, pred) pixel pairs, bypassing the
/// confusion-matrix bookkeeping entirely.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteMetrics {
    pub global: Option<f64>,
    pub class_mean: Option<f64>,
    pub mean_iou: Option<f64>,
    pub per_class_acc: Vec<Option<f64>>,
    pub per_class_iou: Vec<Option<f64>>,
}

/// Recounts every metric by scanning the pixel stream once per class.
pub fn brute_metrics(pairs: &[(u8, u8)], classes: usize) -> BruteMetrics {
    let scored: Vec<(u8, u8)> = pairs.iter().copied().filter(|(g, _)| *g != VOID).collect();
    let total = scored.len() as f64;
    let hits = scored.iter().filter(|(g, p)| g == p).count() as f64;
    let mut per_class_acc = Vec::with_capacity(classes);
    let mut per_class_iou = Vec::with_capacity(classes);
    for c in 0..classes as u8 {
        let gt_c = scored.iter().filter(|(g, _)| *g == c).count() as f64;
        let pred_c = scored.iter().filter(|(_, p)| *p == c).count() as f64;
        let tp = scored.iter().filter(|(g, p)| *g == c && *p == c).count() as f64;
        per_class_acc.push(if gt_c > 0.0 { Some(tp / gt_c) } else { None });
        let union = gt_c + pred_c - tp;
        per_class_iou.push(if union > 0.0 { Some(tp / union) } else { None });
    }
    let mean =
        |v: &[Option<f64>]| -> Option<f64> {
            let present: Vec<f64> = v.iter().flatten().copied().collect();
            if present.is_empty() {
                None
            } else {
                Some(present.iter().sum::<f64>() / present.len() as f64)
            }
        };
    BruteMetrics {
        global: if total > 0.0 { Some(hits / total) } else { None },
        class_mean: mean(&per_class_acc),
        mean_iou: mean(&per_class_iou),
        per_class_acc,
        per_class_iou,
    }
}

/// Pixel-weighted accuracy over the classes selected by `member`.
pub fn brute_group_accuracy(
    pairs: &[(u8, u8)],
    member: impl Fn(u8) -> bool,
) -> Option<f64> {
    let in_group: Vec<&(u8, u8)> = pairs
        .iter()
        .filter(|(g, _)| *g != VOID && member(*g))
        .collect();
    if in_group.is_empty() {
        return None;
    }
    let hits = in_group.iter().filter(|(g, p)| g == p).count();
    Some(hits as f64 / in_group.len() as f64)
}

/// Builds a rank-2 label map from bytes.
pub fn labels(h: usize, w: usize, data: &[u8]) -> IntTensor {
    IntTensor::new(vec![h, w], data.to_vec()).unwrap()
}

/// Builds a rank-4 tensor from f64 literals.
pub fn t4<S: Scalar>(shape: [usize; 4], data: &[f64]) -> Tensor<S> {
    Tensor::new(
        shape.to_vec(),
        data.iter().map(|&v| S::from_f64(v)).collect(),
    )
    .unwrap()
}

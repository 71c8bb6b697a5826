//! The encoder-decoder backbone and its four prior-fusion variants.
//!
//! All variants share one structure: four encoder stages of
//! [conv -> relu -> 2x2 maxpool] and four decoder stages of
//! [unpool -> conv -> relu], closed by a 1x1 classifier conv. Pooling argmax
//! indices recorded on the way down drive the unpooling on the way up.
//!
//! - `Baseline`   segments the current frame alone.
//! - `StackedPrior` concatenates prior and current frame into a 6-channel
//!   input; everything else matches the baseline.
//! - `EmbeddingPrior` encodes prior and current with the *same* encoder
//!   weights, fuses the two bottleneck maps, and decodes once using the
//!   current frame's pooling indices.
//! - `DecoderPrior` additionally decodes the prior (own indices, shared
//!   decoder weights) and fuses the two branches at the input of every
//!   decoder stage, feeding the fused map into the current frame's path.
//!
//! Weight sharing is by storage: both branches reference the same registry
//! entry, so one tape backward accumulates both branches' gradients into a
//! single tensor.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{TensorError, TrainError};
use crate::ops;
use crate::tape::{Tape, ValueId};
use crate::tensor::{IndexMap, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    StackedPrior,
    EmbeddingPrior,
    DecoderPrior,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::StackedPrior,
        Variant::EmbeddingPrior,
        Variant::DecoderPrior,
    ];

    /// Whether forward() requires the prior input.
    pub fn uses_prior(self) -> bool {
        !matches!(self, Variant::Baseline)
    }

    /// Stable command-line token.
    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::StackedPrior => "stacked",
            Variant::EmbeddingPrior => "embed",
            Variant::DecoderPrior => "decoder",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "baseline" => Some(Variant::Baseline),
            "stacked" => Some(Variant::StackedPrior),
            "embed" => Some(Variant::EmbeddingPrior),
            "decoder" => Some(Variant::DecoderPrior),
            _ => None,
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Variant::Baseline => 0,
            Variant::StackedPrior => 1,
            Variant::EmbeddingPrior => 2,
            Variant::DecoderPrior => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Variant> {
        match tag {
            0 => Some(Variant::Baseline),
            1 => Some(Variant::StackedPrior),
            2 => Some(Variant::EmbeddingPrior),
            3 => Some(Variant::DecoderPrior),
            _ => None,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Structural description of a model; two models with equal specs have
/// identical parameter names and shapes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub variant: Variant,
    /// 3, or 6 for StackedPrior (prior + current stacked channel-wise).
    pub input_channels: usize,
    pub num_classes: usize,
    pub encoder_widths: [usize; 4],
    pub decoder_widths: [usize; 4],
    /// Odd kernel extent of the eight backbone convs (padding (k-1)/2).
    pub backbone_kernel: usize,
    /// Odd kernel extent of the three convs inside each fusion module.
    pub fusion_kernel: usize,
    /// Whether fusion convs carry a bias vector each.
    pub fusion_bias: bool,
}

impl ModelSpec {
    /// Full-size configuration: 64-128-256-512 encoder, mirrored decoder,
    /// 7x7 backbone kernels, 3x3 bias-free fusion kernels.
    pub fn new(variant: Variant, num_classes: usize) -> ModelSpec {
        ModelSpec {
            variant,
            input_channels: if variant == Variant::StackedPrior { 6 } else { 3 },
            num_classes,
            encoder_widths: [64, 128, 256, 512],
            decoder_widths: [512, 256, 128, 64],
            backbone_kernel: 7,
            fusion_kernel: 3,
            fusion_bias: false,
        }
    }

    /// Small configuration for fast CPU experiments: same topology, thinner
    /// layers and 3x3 backbone kernels.
    pub fn compact(variant: Variant, num_classes: usize) -> ModelSpec {
        ModelSpec {
            encoder_widths: [16, 32, 64, 128],
            decoder_widths: [128, 64, 32, 16],
            backbone_kernel: 3,
            ..ModelSpec::new(variant, num_classes)
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let want_in = if self.variant == Variant::StackedPrior { 6 } else { 3 };
        if self.input_channels != want_in {
            return Err(TensorError::DimMismatch {
                op: "ModelSpec",
                dim: "input_channels",
                expected: want_in,
                got: self.input_channels,
            });
        }
        if self.num_classes < 2 {
            return Err(TensorError::DimMismatch {
                op: "ModelSpec",
                dim: "num_classes (minimum)",
                expected: 2,
                got: self.num_classes,
            });
        }
        if self.num_classes > crate::tensor::VOID as usize {
            return Err(TensorError::DimMismatch {
                op: "ModelSpec",
                dim: "num_classes (must stay below the void id)",
                expected: crate::tensor::VOID as usize,
                got: self.num_classes,
            });
        }
        for (i, &w) in self
            .encoder_widths
            .iter()
            .chain(self.decoder_widths.iter())
            .enumerate()
        {
            if w == 0 {
                return Err(TensorError::DimMismatch {
                    op: "ModelSpec",
                    dim: "layer width",
                    expected: 1,
                    got: i, // index of the zero width
                });
            }
        }
        // Unpooling restores the mirror encoder stage's shape, so decoder
        // widths must mirror encoder widths exactly.
        for i in 0..4 {
            if self.decoder_widths[i] != self.encoder_widths[3 - i] {
                return Err(TensorError::DimMismatch {
                    op: "ModelSpec",
                    dim: "decoder_widths (must mirror encoder_widths)",
                    expected: self.encoder_widths[3 - i],
                    got: self.decoder_widths[i],
                });
            }
        }
        for k in [self.backbone_kernel, self.fusion_kernel] {
            if k == 0 || k % 2 == 0 {
                return Err(TensorError::DimMismatch {
                    op: "ModelSpec",
                    dim: "kernel (must be odd for same padding)",
                    expected: k.max(1) | 1,
                    got: k,
                });
            }
        }
        Ok(())
    }

    /// Output channel count of decoder conv `l` (1-based).
    fn dec_out(&self, l: usize) -> usize {
        if l < 4 {
            self.decoder_widths[l]
        } else {
            self.decoder_widths[3]
        }
    }

    /// Channel width at each decoder-stage input (post-unpool), i.e. the
    /// fusion-site widths for DecoderPrior.
    pub fn fusion_site_widths(&self) -> [usize; 4] {
        self.decoder_widths
    }

    /// Every parameter the variant owns, in deterministic build order
    /// (encoder, decoder, classifier, fusion modules). Initialization draws
    /// random numbers in exactly this order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.backbone_kernel;
        let mut out = Vec::new();
        let mut c_in = self.input_channels;
        for (i, &c_out) in self.encoder_widths.iter().enumerate() {
            out.push((format!("enc{}.weight", i + 1), vec![c_out, c_in, k, k]));
            out.push((format!("enc{}.bias", i + 1), vec![c_out]));
            c_in = c_out;
        }
        for l in 1..=4 {
            let cin = self.decoder_widths[l - 1];
            let cout = self.dec_out(l);
            out.push((format!("dec{l}.weight"), vec![cout, cin, k, k]));
            out.push((format!("dec{l}.bias"), vec![cout]));
        }
        out.push((
            "classifier.weight".to_string(),
            vec![self.num_classes, self.dec_out(4), 1, 1],
        ));
        out.push(("classifier.bias".to_string(), vec![self.num_classes]));

        let fk = self.fusion_kernel;
        let push_fusion = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, c: usize| {
            for w in ["w_x0", "w_x1", "w_y1"] {
                out.push((format!("{prefix}.{w}"), vec![c, c, fk, fk]));
            }
            if self.fusion_bias {
                for b in ["b_x0", "b_x1", "b_y1"] {
                    out.push((format!("{prefix}.{b}"), vec![c]));
                }
            }
        };
        match self.variant {
            Variant::Baseline | Variant::StackedPrior => {}
            Variant::EmbeddingPrior => {
                push_fusion(&mut out, "fusion_embed", self.encoder_widths[3]);
            }
            Variant::DecoderPrior => {
                for (l, &c) in self.fusion_site_widths().iter().enumerate() {
                    push_fusion(&mut out, &format!("fusion_dec{}", l + 1), c);
                }
            }
        }
        out
    }

    /// Total trainable scalars, from the layer plan alone (no allocation).
    pub fn count_params(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// One row of [`Model::param_report`].
#[derive(Debug, Clone)]
pub struct ParamRow {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

/// A built model: spec plus the parameter registry. Each shared weight has
/// exactly one entry here regardless of how many branches consume it.
#[derive(Clone)]
pub struct Model<S: Scalar> {
    spec: ModelSpec,
    params: BTreeMap<String, Tensor<S>>,
}

/// Builds a model with fan-in-scaled uniform weights (bound sqrt(6/fan_in))
/// and zero biases, fully determined by `seed`.
pub fn build_model<S: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Model<S>, TensorError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for (name, shape) in spec.param_shapes() {
        params.insert(name, init_tensor(&shape, &mut rng));
    }
    Ok(Model {
        spec: spec.clone(),
        params,
    })
}

/// Weight tensors (rank > 1) draw uniform(-b, b) with b = sqrt(6 / fan_in);
/// bias vectors are zero. Draws happen in f64 so f32 and f64 models built
/// from one seed agree up to rounding.
pub(crate) fn init_tensor<S: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<S> {
    if shape.len() == 1 {
        return Tensor::zeros(shape);
    }
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| S::from_f64(rng.random_range(-bound..bound)))
}

impl<S: Scalar> Model<S> {
    /// Reassembles a model from a spec and a full set of tensors (checkpoint
    /// load path). Names and shapes must match the spec's plan exactly.
    pub fn from_parts(
        spec: ModelSpec,
        params: BTreeMap<String, Tensor<S>>,
    ) -> Result<Model<S>, TensorError> {
        spec.validate()?;
        for (name, shape) in spec.param_shapes() {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(TensorError::ShapeMismatch {
                        op: "Model::from_parts",
                        dim: 0,
                        expected: shape,
                        got: t.shape().to_vec(),
                    })
                }
                None => {
                    return Err(TensorError::Optimizer(format!(
                        "missing parameter tensor {name}"
                    )))
                }
            }
        }
        Ok(Model { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<S>> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name)
    }

    /// Total trainable scalars; every registry entry counted exactly once.
    pub fn count_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Per-layer breakdown in name order.
    pub fn param_report(&self) -> Vec<ParamRow> {
        self.params
            .iter()
            .map(|(name, t)| ParamRow {
                name: name.clone(),
                shape: t.shape().to_vec(),
                count: t.numel(),
            })
            .collect()
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), t.cast::<T>()))
                .collect(),
        }
    }

    /// Registers every parameter on the tape as a trainable leaf and returns
    /// name -> id. Shared-weight semantics follow from inserting each tensor
    /// once and reusing its id at every consumption site.
    pub fn bind(&self, tape: &mut Tape<S>) -> BTreeMap<String, ValueId> {
        self.params
            .iter()
            .map(|(n, t)| (n.clone(), tape.parameter(t.clone())))
            .collect()
    }

    fn id(ids: &BTreeMap<String, ValueId>, name: &str) -> ValueId {
        *ids.get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound on tape"))
    }

    /// conv -> relu -> pool, four times. Returns the bottleneck value and
    /// the four pooling index maps (stage order).
    fn encode(
        &self,
        tape: &mut Tape<S>,
        ids: &BTreeMap<String, ValueId>,
        input: ValueId,
    ) -> Result<(ValueId, Vec<Arc<IndexMap>>), TensorError> {
        let pad = (self.spec.backbone_kernel - 1) / 2;
        let mut h = input;
        let mut indices = Vec::with_capacity(4);
        for l in 1..=4 {
            let w = Self::id(ids, &format!("enc{l}.weight"));
            let b = Self::id(ids, &format!("enc{l}.bias"));
            h = tape.conv2d(h, w, Some(b), 1, pad)?;
            h = tape.relu(h)?;
            let (p, idx) = tape.max_pool2d(h)?;
            h = p;
            indices.push(idx);
        }
        Ok((h, indices))
    }

    fn dec_conv(
        &self,
        tape: &mut Tape<S>,
        ids: &BTreeMap<String, ValueId>,
        l: usize,
        input: ValueId,
    ) -> Result<ValueId, TensorError> {
        let pad = (self.spec.backbone_kernel - 1) / 2;
        let w = Self::id(ids, &format!("dec{l}.weight"));
        let b = Self::id(ids, &format!("dec{l}.bias"));
        let c = tape.conv2d(input, w, Some(b), 1, pad)?;
        tape.relu(c)
    }

    fn classify(
        &self,
        tape: &mut Tape<S>,
        ids: &BTreeMap<String, ValueId>,
        input: ValueId,
    ) -> Result<ValueId, TensorError> {
        let w = Self::id(ids, "classifier.weight");
        let b = Self::id(ids, "classifier.bias");
        tape.conv2d(input, w, Some(b), 1, 0)
    }

    /// Plain decode: unpool with the given indices, conv, relu, four times,
    /// then classify.
    fn decode(
        &self,
        tape: &mut Tape<S>,
        ids: &BTreeMap<String, ValueId>,
        bottleneck: ValueId,
        indices: &[Arc<IndexMap>],
    ) -> Result<ValueId, TensorError> {
        let mut h = bottleneck;
        for l in 1..=4 {
            let u = tape.max_unpool2d(h, &indices[4 - l])?;
            h = self.dec_conv(tape, ids, l, u)?;
        }
        self.classify(tape, ids, h)
    }

    fn fusion_site(
        &self,
        tape: &mut Tape<S>,
        ids: &BTreeMap<String, ValueId>,
        prefix: &str,
        e_x0: ValueId,
        e_x1: ValueId,
    ) -> Result<ValueId, TensorError> {
        let pad = (self.spec.fusion_kernel - 1) / 2;
        let bias = |ids: &BTreeMap<String, ValueId>, b: &str| {
            self.spec
                .fusion_bias
                .then(|| Self::id(ids, &format!("{prefix}.{b}")))
        };
        let a0 = tape.conv2d(
            e_x0,
            Self::id(ids, &format!("{prefix}.w_x0")),
            bias(ids, "b_x0"),
            1,
            pad,
        )?;
        let a1 = tape.conv2d(
            e_x1,
            Self::id(ids, &format!("{prefix}.w_x1")),
            bias(ids, "b_x1"),
            1,
            pad,
        )?;
        let pre = tape.add(a0, a1)?;
        let a = tape.tanh(pre)?;
        tape.conv2d(
            a,
            Self::id(ids, &format!("{prefix}.w_y1")),
            bias(ids, "b_y1"),
            1,
            pad,
        )
    }

    /// Runs the variant's forward graph on an existing tape. `prior` is
    /// required for every variant except Baseline (which never reads it).
    /// Spatial extents must be divisible by 16 (four 2x poolings).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<S>,
        ids: &BTreeMap<String, ValueId>,
        prior: Option<ValueId>,
        image: ValueId,
    ) -> Result<ValueId, TrainError> {
        let (_, _, h, w) = tape.value(image)?.dims4("forward input")?;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(TrainError::Data(crate::error::DataError::IndivisibleExtents { h, w }));
        }
        let need_prior = || {
            prior.ok_or_else(|| TrainError::MissingPrior {
                variant: self.spec.variant.name().to_string(),
            })
        };
        let logits = match self.spec.variant {
            Variant::Baseline => {
                let (b, idx) = self.encode(tape, ids, image)?;
                self.decode(tape, ids, b, &idx)?
            }
            Variant::StackedPrior => {
                let x0 = need_prior()?;
                let stacked = tape.concat_channels(x0, image)?;
                let (b, idx) = self.encode(tape, ids, stacked)?;
                self.decode(tape, ids, b, &idx)?
            }
            Variant::EmbeddingPrior => {
                let x0 = need_prior()?;
                let (b1, idx1) = self.encode(tape, ids, image)?;
                let (b0, _idx0) = self.encode(tape, ids, x0)?;
                let fused = self.fusion_site(tape, ids, "fusion_embed", b0, b1)?;
                self.decode(tape, ids, fused, &idx1)?
            }
            Variant::DecoderPrior => {
                let x0 = need_prior()?;
                let (b1, idx1) = self.encode(tape, ids, image)?;
                let (b0, idx0) = self.encode(tape, ids, x0)?;
                let mut h_img = b1;
                let mut h_pri = b0;
                for l in 1..=4 {
                    let u_img = tape.max_unpool2d(h_img, &idx1[4 - l])?;
                    let u_pri = tape.max_unpool2d(h_pri, &idx0[4 - l])?;
                    let fused =
                        self.fusion_site(tape, ids, &format!("fusion_dec{l}"), u_pri, u_img)?;
                    h_img = self.dec_conv(tape, ids, l, fused)?;
                    if l < 4 {
                        // The prior branch's level-4 conv output feeds
                        // nothing; skip it.
                        h_pri = self.dec_conv(tape, ids, l, u_pri)?;
                    }
                }
                self.classify(tape, ids, h_img)?
            }
        };
        Ok(logits)
    }

    /// Inference convenience: builds a throwaway tape, runs forward, and
    /// returns the logits. Training and evaluation therefore share one
    /// wiring path.
    pub fn forward(
        &self,
        prior: Option<&Tensor<S>>,
        image: &Tensor<S>,
    ) -> Result<Tensor<S>, TrainError> {
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape);
        let x1 = tape.constant(image.clone());
        let x0 = prior.map(|p| tape.constant(p.clone()));
        let out = self.forward_on_tape(&mut tape, &ids, x0, x1)?;
        Ok(tape.value(out)?.clone())
    }
}

/// Stand-alone fusion module parameters, for direct use in tests and
/// gradient checks. Shapes: each weight is CxCxkxk; biases length C.
#[derive(Debug, Clone)]
pub struct FusionParams<S: Scalar> {
    pub w_x0: Tensor<S>,
    pub w_x1: Tensor<S>,
    pub w_y1: Tensor<S>,
    pub b_x0: Option<Tensor<S>>,
    pub b_x1: Option<Tensor<S>>,
    pub b_y1: Option<Tensor<S>>,
}

impl<S: Scalar> FusionParams<S> {
    pub fn without_bias(w_x0: Tensor<S>, w_x1: Tensor<S>, w_y1: Tensor<S>) -> Self {
        FusionParams {
            w_x0,
            w_x1,
            w_y1,
            b_x0: None,
            b_x1: None,
            b_y1: None,
        }
    }
}

/// The learned fusion unit: `A = tanh(conv(e_x0, W_x0) + conv(e_x1, W_x1))`,
/// output `conv(A, W_y1)`. Same-padding convs keep spatial extents, so the
/// output shape equals the input shape (with W_y1's output channels).
pub fn fusion_forward<S: Scalar>(
    params: &FusionParams<S>,
    e_x0: &Tensor<S>,
    e_x1: &Tensor<S>,
) -> Result<Tensor<S>, TensorError> {
    let (_, _, k, _) = params.w_x0.dims4("fusion W_x0")?;
    let pad = (k - 1) / 2;
    let a0 = ops::conv2d_forward(e_x0, &params.w_x0, params.b_x0.as_ref(), 1, pad)?;
    let a1 = ops::conv2d_forward(e_x1, &params.w_x1, params.b_x1.as_ref(), 1, pad)?;
    let a = ops::tanh_op(&ops::add(&a0, &a1)?);
    ops::conv2d_forward(&a, &params.w_y1, params.b_y1.as_ref(), 1, pad)
}

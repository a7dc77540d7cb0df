//! The dual-head embedding network.
//!
//! A small residual convnet feeds a global-pooled, dropout-regularized
//! feature into two parallel affine heads: the embedding head (no bias,
//! angle-only by construction) and the 2-way mask-usage head (with bias).
//! The margin-and-scale identity logits head ([`arcface`]) is used only in
//! training. Forward and backward are hand-written in f64; gradient-check
//! tests hold the whole stack to finite differences.

pub mod arcface;
pub mod checkpoint;
pub mod ops;
pub mod params;

use ndarray::{Array2, Array4, ArrayView2, Ix2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::AlignedFace;
use crate::rng::{self, Domain};
use crate::{Error, Result};

pub use arcface::{arcface_backward, arcface_logits, ArcHeadConfig, ArcTrace};
pub use params::{Gradients, Param, ParamId, ParamSet};

/// Residual backbone shape.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    pub input_size: usize,
    /// Channel count per stage; stages after the first downsample by 2.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub embedding_dim: usize,
    pub dropout_rate: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_size: 112,
            widths: vec![16, 32, 64],
            blocks_per_stage: 2,
            embedding_dim: 512,
            dropout_rate: 0.4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("widths must be non-empty".into()));
        }
        if self.embedding_dim < 2 {
            return Err(Error::Config(format!(
                "embedding_dim {} must be >= 2",
                self.embedding_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        let halvings = self.widths.len() - 1;
        let divisor = 1usize << halvings;
        if self.input_size < 8 || !self.input_size.is_multiple_of(divisor) {
            return Err(Error::Config(format!(
                "input_size {} must be >= 8 and divisible by {divisor}",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// Everything needed to build the network.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub arc: ArcHeadConfig,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.arc.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes {} must be >= 2",
                self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    weight: ParamId,
    stride: usize,
    c_in: usize,
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    conv1: ConvLayer,
    conv2: ConvLayer,
}

#[derive(Debug, Clone)]
struct StageLayout {
    /// Stride-2 transition into this stage (absent for the first stage).
    down: Option<ConvLayer>,
    blocks: Vec<ResBlock>,
}

/// The dual-head network: parameters plus layout.
#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    stem: ConvLayer,
    stages: Vec<StageLayout>,
    embed_w: ParamId,
    mask_w: ParamId,
    mask_b: ParamId,
    arc_w: ParamId,
}

/// The two training outputs for one batch.
#[derive(Debug, Clone)]
pub struct DualLogits {
    /// Margin- and scale-adjusted identity logits, (B, C).
    pub logits_arcface: Array2<f64>,
    /// Mask-usage logits, (B, 2); class index equals the mask flag.
    pub logits_mask: Array2<f64>,
}

/// Saved forward state of the backbone and heads.
///
/// Every conv's input is either the network input or an earlier saved
/// activation, so only the post-ReLU outputs are kept.
pub struct ForwardTrace {
    input: Array4<f64>,
    /// Post-ReLU activation after every conv, in execution order; residual
    /// blocks contribute two entries (conv1 output, block output).
    post_relu: Vec<Array4<f64>>,
    pooled_from: (usize, usize),
    dropout_mask: Option<Array2<f64>>,
    features: Array2<f64>,
}

/// Network outputs before loss: raw embeddings and mask logits.
pub struct ForwardOutput {
    /// Raw (unnormalized) embedding rows, (B, D).
    pub embeddings: Array2<f64>,
    /// Mask-usage logits, (B, 2).
    pub logits_mask: Array2<f64>,
}

impl Network {
    /// Build the network with seeded initialization.
    ///
    /// Conv weights use fan-in scaling; each block's closing conv starts at
    /// zero so every block is the identity at step 0; arc columns are drawn
    /// isotropically (normalization happens in the head itself).
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Network> {
        cfg.validate()?;
        let mut params = ParamSet::default();
        let w = &cfg.backbone.widths;

        let stem = ConvLayer {
            weight: params.add("stem.w", &[w[0], 3 * 9], true),
            stride: 1,
            c_in: 3,
        };

        let mut stages = Vec::with_capacity(w.len());
        for (si, &width) in w.iter().enumerate() {
            let down = (si > 0).then(|| ConvLayer {
                weight: params.add(format!("stage{si}.down.w"), &[width, w[si - 1] * 9], true),
                stride: 2,
                c_in: w[si - 1],
            });
            let blocks = (0..cfg.backbone.blocks_per_stage)
                .map(|bi| ResBlock {
                    conv1: ConvLayer {
                        weight: params.add(
                            format!("stage{si}.block{bi}.conv1.w"),
                            &[width, width * 9],
                            true,
                        ),
                        stride: 1,
                        c_in: width,
                    },
                    conv2: ConvLayer {
                        weight: params.add(
                            format!("stage{si}.block{bi}.conv2.w"),
                            &[width, width * 9],
                            true,
                        ),
                        stride: 1,
                        c_in: width,
                    },
                })
                .collect();
            stages.push(StageLayout { down, blocks });
        }

        let feat = *w.last().unwrap();
        let embed_w = params.add("embed.w", &[feat, cfg.backbone.embedding_dim], true);
        let mask_w = params.add("mask.w", &[feat, 2], true);
        let mask_b = params.add("mask.b", &[2], false);
        let arc_w = params.add(
            "arc.w",
            &[cfg.backbone.embedding_dim, cfg.num_classes],
            true,
        );

        let mut net = Network {
            cfg,
            params,
            stem,
            stages,
            embed_w,
            mask_w,
            mask_b,
            arc_w,
        };
        net.randomize(seed);
        Ok(net)
    }

    fn randomize(&mut self, seed: u64) {
        let mut stream = rng::stream(seed, Domain::ParamInit, &[]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        for param in self.params.iter_mut() {
            let name = param.name.as_str();
            if name == "mask.b" || name.ends_with("conv2.w") {
                // zero closing convs: every block starts as the identity
                param.value.fill(0.0);
            } else if name == "arc.w" {
                // isotropic; the head normalizes columns anyway
                for v in param.value.iter_mut() {
                    *v = normal.sample(&mut stream);
                }
            } else {
                // conv weights are (c_out, c_in*9), affine heads (f_in, f_out);
                // fan-in scaling either way
                let shape = param.value.shape();
                let fan_in =
                    if name.contains("conv") || name.contains("stem") || name.contains("down") {
                        shape[1]
                    } else {
                        shape[0]
                    };
                let std = (2.0 / fan_in as f64).sqrt();
                for v in param.value.iter_mut() {
                    *v = normal.sample(&mut stream) * std;
                }
            }
        }
    }

    /// Replace every parameter with N(0, std) draws. Gradient-check tests
    /// use this so zero-initialized tensors still get exercised.
    pub fn randomize_all(&mut self, seed: u64, std: f64) {
        let mut stream = rng::stream(seed, Domain::ParamInit, &[u64::MAX]);
        let normal = Normal::new(0.0, std).unwrap();
        for param in self.params.iter_mut() {
            for v in param.value.iter_mut() {
                *v = normal.sample(&mut stream);
            }
        }
    }

    fn weight2(&self, id: ParamId) -> ArrayView2<'_, f64> {
        self.params
            .get(id)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-d parameter")
    }

    /// Sample an inverted-dropout mask for one training step.
    pub fn dropout_mask(&self, batch: usize, stream: &mut ChaCha8Rng) -> Option<Array2<f64>> {
        let rate = self.cfg.backbone.dropout_rate;
        if rate == 0.0 {
            return None;
        }
        let feat = *self.cfg.backbone.widths.last().unwrap();
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mut mask = Array2::<f64>::zeros((batch, feat));
        for v in mask.iter_mut() {
            *v = if stream.random_bool(keep) { scale } else { 0.0 };
        }
        Some(mask)
    }

    fn run_conv(
        &self,
        layer: &ConvLayer,
        x: &Array4<f64>,
        keep: bool,
        outputs: &mut Vec<Array4<f64>>,
    ) -> Array4<f64> {
        debug_assert_eq!(x.dim().1, layer.c_in);
        let mut y = ops::conv3x3_forward(x, &self.weight2(layer.weight), layer.stride);
        ops::leaky_relu(&mut y);
        if keep {
            outputs.push(y.clone());
        }
        y
    }

    fn run_block(
        &self,
        block: &ResBlock,
        x: &Array4<f64>,
        keep: bool,
        outputs: &mut Vec<Array4<f64>>,
    ) -> Array4<f64> {
        let r1 = self.run_conv(&block.conv1, x, keep, outputs);
        let a2 = ops::conv3x3_forward(&r1, &self.weight2(block.conv2.weight), 1);
        let mut y = a2 + x;
        ops::leaky_relu(&mut y);
        if keep {
            outputs.push(y.clone());
        }
        y
    }

    /// Forward pass.
    ///
    /// `input` is `(B, 3, S, S)` with values in [-1, 1] (see
    /// [`faces_to_batch`]). In training mode pass the step's dropout mask;
    /// with `None` (or a zero dropout rate) the pass is deterministic
    /// inference. Set `keep_trace` to get the state backward needs.
    pub fn forward(
        &self,
        input: &Array4<f64>,
        dropout_mask: Option<&Array2<f64>>,
        keep_trace: bool,
    ) -> (ForwardOutput, Option<ForwardTrace>) {
        let (_, c, h, w) = input.dim();
        assert_eq!(c, 3, "input must have 3 channels");
        assert_eq!(
            (h, w),
            (self.cfg.backbone.input_size, self.cfg.backbone.input_size),
            "input size mismatch with BackboneConfig"
        );

        let mut outputs = Vec::new();

        let mut cur = self.run_conv(&self.stem, input, keep_trace, &mut outputs);
        for stage in &self.stages {
            if let Some(down) = &stage.down {
                cur = self.run_conv(down, &cur, keep_trace, &mut outputs);
            }
            for block in &stage.blocks {
                cur = self.run_block(block, &cur, keep_trace, &mut outputs);
            }
        }

        let (_, _, fh, fw) = cur.dim();
        let pooled = ops::global_avg_pool(&cur);
        let features = match dropout_mask {
            Some(mask) => &pooled * mask,
            None => pooled.clone(),
        };

        let embeddings = ops::affine_forward(&features, &self.weight2(self.embed_w), None);
        let bias = self.params.get(self.mask_b).as_slice().unwrap().to_vec();
        let logits_mask = ops::affine_forward(&features, &self.weight2(self.mask_w), Some(&bias));

        let trace = keep_trace.then(|| ForwardTrace {
            input: input.clone(),
            post_relu: outputs,
            pooled_from: (fh, fw),
            dropout_mask: dropout_mask.cloned(),
            features,
        });

        (
            ForwardOutput {
                embeddings,
                logits_mask,
            },
            trace,
        )
    }

    /// Backward pass from head gradients down to (and excluding) the input.
    /// Returns gradients for every parameter; weight decay is *not* added
    /// here (see [`crate::loss::total_loss`] wiring in the trainer).
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        d_embeddings: &Array2<f64>,
        d_logits_mask: &Array2<f64>,
    ) -> Gradients {
        let mut grads = self.params.zeros_like();

        // Heads share the post-dropout feature.
        let (dx_embed, dw_embed, _) = ops::affine_backward(
            d_embeddings,
            &trace.features,
            &self.weight2(self.embed_w),
            false,
        );
        let (dx_mask, dw_mask, db_mask) = ops::affine_backward(
            d_logits_mask,
            &trace.features,
            &self.weight2(self.mask_w),
            true,
        );
        grads.get_mut(self.embed_w).assign(&dw_embed);
        grads.get_mut(self.mask_w).assign(&dw_mask);
        {
            let db = db_mask.unwrap();
            let g = grads.get_mut(self.mask_b).as_slice_mut().unwrap();
            g.copy_from_slice(&db);
        }

        let mut d_features = dx_embed + dx_mask;
        if let Some(mask) = &trace.dropout_mask {
            d_features *= mask;
        }
        let mut dy = ops::global_avg_pool_backward(&d_features, trace.pooled_from);

        // Walk convs in reverse. `ti` indexes one past the current entry of
        // the saved-activation tape; each conv's input is the activation
        // saved just before its own entries (or the network input for the
        // stem).
        let mut ti = trace.post_relu.len();

        for stage in self.stages.iter().rev() {
            for block in stage.blocks.iter().rev() {
                // y = relu(x_b + conv2(r1)); saved: [.., r1, y]; x_b is the
                // activation preceding the block.
                ti -= 1;
                let y = &trace.post_relu[ti];
                ops::leaky_relu_backward(&mut dy, y);
                let r1 = &trace.post_relu[ti - 1];
                let (dr1, dw2) =
                    ops::conv3x3_backward(&dy, &self.weight2(block.conv2.weight), r1, 1);
                grads.get_mut(block.conv2.weight).assign(&dw2);

                ti -= 1;
                let x_b = &trace.post_relu[ti - 1];
                let mut da1 = dr1;
                ops::leaky_relu_backward(&mut da1, r1);
                let (dx1, dw1) =
                    ops::conv3x3_backward(&da1, &self.weight2(block.conv1.weight), x_b, 1);
                grads.get_mut(block.conv1.weight).assign(&dw1);

                dy += &dx1; // skip path: dy (from relu) + conv path
            }
            if let Some(down) = &stage.down {
                ti -= 1;
                let y = &trace.post_relu[ti];
                let x_in = &trace.post_relu[ti - 1];
                ops::leaky_relu_backward(&mut dy, y);
                let (dx, dw) =
                    ops::conv3x3_backward(&dy, &self.weight2(down.weight), x_in, down.stride);
                grads.get_mut(down.weight).assign(&dw);
                dy = dx;
            }
        }

        // Stem.
        ti -= 1;
        let y = &trace.post_relu[ti];
        ops::leaky_relu_backward(&mut dy, y);
        let (_, dw) = ops::conv3x3_backward(&dy, &self.weight2(self.stem.weight), &trace.input, 1);
        grads.get_mut(self.stem.weight).assign(&dw);
        debug_assert_eq!(ti, 0);

        grads
    }

    /// Raw `(D, C)` identity-head weight view.
    pub fn arc_weights(&self) -> ArrayView2<'_, f64> {
        self.weight2(self.arc_w)
    }

    pub fn arc_weight_id(&self) -> ParamId {
        self.arc_w
    }

    pub fn mask_weight_id(&self) -> ParamId {
        self.mask_w
    }

    pub fn embedding_dim(&self) -> usize {
        self.cfg.backbone.embedding_dim
    }
}

/// Convert faces to network input: `pixel / 127.5 - 1`, `(B, 3, S, S)`.
pub fn faces_to_batch(faces: &[&AlignedFace]) -> Array4<f64> {
    assert!(!faces.is_empty(), "empty batch");
    let side = faces[0].side;
    let mut out = Array4::<f64>::zeros((faces.len(), 3, side, side));
    for (bi, face) in faces.iter().enumerate() {
        assert_eq!(face.side, side, "mixed face sizes in one batch");
        for y in 0..side {
            for x in 0..side {
                let [r, g, b] = face.rgb(x, y);
                out[(bi, 0, y, x)] = r as f64 / 127.5 - 1.0;
                out[(bi, 1, y, x)] = g as f64 / 127.5 - 1.0;
                out[(bi, 2, y, x)] = b as f64 / 127.5 - 1.0;
            }
        }
    }
    out
}

/// L2-normalize each embedding row. Errors on a zero row.
pub fn normalize_embeddings(raw: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = raw.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateEmbedding);
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

/// Backward of [`normalize_embeddings`]:
/// `dv = (de - e * <e, de>) / ||v||` per row.
pub fn normalize_backward(
    d_normalized: &Array2<f64>,
    raw: &Array2<f64>,
    normalized: &Array2<f64>,
) -> Array2<f64> {
    let mut out = d_normalized.clone();
    for ((mut drow, eraw), enorm) in out
        .rows_mut()
        .into_iter()
        .zip(raw.rows())
        .zip(normalized.rows())
    {
        let norm = eraw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = enorm.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
        for (d, &e) in drow.iter_mut().zip(enorm.iter()) {
            *d = (*d - e * dot) / norm;
        }
    }
    out
}

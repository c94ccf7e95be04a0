//! The de-raining network: a Unet-style base with skip connections, per-scale
//! residual heads (RN), confidence heads (CN), and a shared refinement
//! network (RFN) that maps `y - r` to the restored image.
//!
//! One forward pass produces residual, confidence and de-rained maps at full,
//! half and quarter resolution. The confidence-weighted residual from each
//! coarse scale is bilinearly upsampled and concatenated into the next
//! decoder stage, which is where the 67-channel decoder blocks come from.

mod checkpoint;

pub use checkpoint::{read_tensor_archive, write_tensor_archive, Checkpoint, CHECKPOINT_VERSION};

use ndarray::{Array3, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::nn::{
    bias_uniform, kaiming_uniform, Graph, Mode, NodeId, ParamId, ParamKind, ParamStore, Scalar,
};

/// Floor for confidence values; keeps `log(c)` finite.
pub const CONFIDENCE_FLOOR: f64 = 1e-3;

/// Spatial size granularity required by the four pooling stages.
pub const SIZE_MULTIPLE: usize = 16;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input must be 3 x H x W with H, W multiples of {SIZE_MULTIPLE}, got {c} x {h} x {w}")]
    InvalidInputSize { c: usize, h: usize, w: usize },
    #[error("block {name} expects {expected} input channels, got {got}")]
    ChannelMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("architecture audit failed: {0}")]
    AuditFailed(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("unknown variant {0:?} (expected BN, BN+RN or UMRL)")]
    UnknownVariant(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Network variant: the plain base network, base + residual heads with the
/// confidence fixed at one, or the full confidence-guided model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Bn,
    BnRn,
    Umrl,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Bn, Variant::BnRn, Variant::Umrl];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Bn => "BN",
            Variant::BnRn => "BN+RN",
            Variant::Umrl => "UMRL",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "BN" => Ok(Variant::Bn),
            "BN+RN" => Ok(Variant::BnRn),
            "UMRL" => Ok(Variant::Umrl),
            other => Err(ModelError::UnknownVariant(other.to_string())),
        }
    }
}

/// 3x3 stride-1 size-preserving convolution block description.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvBlockSpec {
    pub const fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvParams {
    pub w: ParamId,
    pub b: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

/// Conv -> BatchNorm -> (optional) ReLU. The residual and confidence heads
/// leave the ReLU off their final block so they can emit signed values /
/// feed a sigmoid.
#[derive(Debug, Clone, Copy)]
pub struct ConvBlockHandle {
    pub spec: ConvBlockSpec,
    pub(crate) conv: ConvParams,
    pub(crate) bn: BnParams,
    pub(crate) relu: bool,
}

#[derive(Debug)]
struct Arch {
    enc: [ConvBlockHandle; 5],
    up: [ConvParams; 4],
    dec1: ConvBlockHandle,
    dec2: ConvBlockHandle,
    dec3: ConvBlockHandle,
    dec4: ConvBlockHandle,
    final_conv: ConvParams,
    rn_x4: [ConvBlockHandle; 3],
    rn_x2: [ConvBlockHandle; 3],
    cn_x4: [ConvBlockHandle; 3],
    cn_x2: [ConvBlockHandle; 3],
    cn_x1: [ConvBlockHandle; 3],
    rfn_conv1: ConvParams,
    rfn_conv2: ConvParams,
}

/// All parameter tensors of the network, in canonical registration order.
/// Construction asserts the architecture's channel counts via [`Self::audit`].
#[derive(Debug)]
pub struct UmrlWeights<T> {
    store: ParamStore<T>,
    arch: Arch,
}

/// Which residual head to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RnHead {
    X4,
    X2,
}

/// Which confidence head to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CnHead {
    X4,
    X2,
    X1,
}

struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha20Rng,
    zero_init: bool,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(&mut self, name: &str, in_c: usize, out_c: usize, k: usize) -> ConvParams {
        let (w, b) = if self.zero_init {
            (
                ArrayD::zeros(vec![out_c, in_c, k, k]),
                ArrayD::zeros(vec![out_c]),
            )
        } else {
            (
                kaiming_uniform(&mut self.rng, out_c, in_c, k, k),
                bias_uniform(&mut self.rng, out_c, in_c * k * k),
            )
        };
        let w = self.store.add(format!("{name}.weight"), ParamKind::Trainable, w);
        let b = self.store.add(format!("{name}.bias"), ParamKind::Trainable, b);
        ConvParams { w, b, in_c, out_c, k }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnParams {
        let gamma = self.store.add(
            format!("{name}.gamma"),
            ParamKind::Trainable,
            ArrayD::from_elem(vec![c], T::one()),
        );
        let beta = self.store.add(
            format!("{name}.beta"),
            ParamKind::Trainable,
            ArrayD::zeros(vec![c]),
        );
        let mean = self.store.add(
            format!("{name}.running_mean"),
            ParamKind::Buffer,
            ArrayD::zeros(vec![c]),
        );
        let var = self.store.add(
            format!("{name}.running_var"),
            ParamKind::Buffer,
            ArrayD::from_elem(vec![c], T::one()),
        );
        BnParams {
            gamma,
            beta,
            mean,
            var,
        }
    }

    fn conv_block(&mut self, name: &str, spec: ConvBlockSpec, relu: bool) -> ConvBlockHandle {
        let conv = self.conv(
            &format!("{name}.conv"),
            spec.in_channels,
            spec.out_channels,
            3,
        );
        let bn = self.bn(&format!("{name}.bn"), spec.out_channels);
        ConvBlockHandle {
            spec,
            conv,
            bn,
            relu,
        }
    }
}

impl<T: Scalar> UmrlWeights<T> {
    /// Fresh weights: Kaiming-uniform convolutions, identity BatchNorm,
    /// drawn deterministically from `seed`.
    pub fn new(seed: u64) -> Self {
        Self::build(seed, false)
    }

    /// All-zero convolution weights and biases (BatchNorm still identity).
    /// Useful for exercising zero-propagation contracts.
    pub fn zeros() -> Self {
        Self::build(0, true)
    }

    fn build(seed: u64, zero_init: bool) -> Self {
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha20Rng::seed_from_u64(seed),
            zero_init,
        };

        let enc = [
            b.conv_block("base.enc1", ConvBlockSpec::new(3, 32), true),
            b.conv_block("base.enc2", ConvBlockSpec::new(32, 32), true),
            b.conv_block("base.enc3", ConvBlockSpec::new(32, 32), true),
            b.conv_block("base.enc4", ConvBlockSpec::new(32, 32), true),
            b.conv_block("base.bottleneck", ConvBlockSpec::new(32, 32), true),
        ];
        let up = [
            b.conv("base.up1", 32, 32, 3),
            b.conv("base.up2", 32, 32, 3),
            b.conv("base.up3", 64, 32, 3),
            b.conv("base.up4", 32, 32, 3),
        ];
        let dec1 = b.conv_block("base.dec1", ConvBlockSpec::new(64, 32), true);
        let dec2 = b.conv_block("base.dec2", ConvBlockSpec::new(67, 32), true);
        let dec3 = b.conv_block("base.dec3", ConvBlockSpec::new(67, 16), true);
        let dec4 = b.conv_block("base.dec4", ConvBlockSpec::new(16, 16), true);
        let final_conv = b.conv("base.final", 16, 3, 3);

        let rn = |b: &mut Builder<'_, T>, name: &str| {
            [
                b.conv_block(&format!("{name}.b1"), ConvBlockSpec::new(64, 32), true),
                b.conv_block(&format!("{name}.b2"), ConvBlockSpec::new(32, 32), true),
                // Final block keeps BN but drops ReLU: residuals are signed.
                b.conv_block(&format!("{name}.b3"), ConvBlockSpec::new(32, 3), false),
            ]
        };
        let cn = |b: &mut Builder<'_, T>, name: &str, in_c: usize| {
            [
                b.conv_block(&format!("{name}.b1"), ConvBlockSpec::new(in_c, 16), true),
                b.conv_block(&format!("{name}.b2"), ConvBlockSpec::new(16, 16), true),
                // Final block feeds a sigmoid, so no ReLU here either.
                b.conv_block(&format!("{name}.b3"), ConvBlockSpec::new(16, 3), false),
            ]
        };
        let rn_x4 = rn(&mut b, "rn_x4");
        let rn_x2 = rn(&mut b, "rn_x2");
        let cn_x4 = cn(&mut b, "cn_x4", 67);
        let cn_x2 = cn(&mut b, "cn_x2", 67);
        let cn_x1 = cn(&mut b, "cn_x1", 19);
        let rfn_conv1 = b.conv("rfn.conv1", 3, 3, 7);
        let rfn_conv2 = b.conv("rfn.conv2", 3, 3, 3);

        let weights = Self {
            store,
            arch: Arch {
                enc,
                up,
                dec1,
                dec2,
                dec3,
                dec4,
                final_conv,
                rn_x4,
                rn_x2,
                cn_x4,
                cn_x2,
                cn_x1,
                rfn_conv1,
                rfn_conv2,
            },
        };
        weights.audit().expect("constructed architecture must audit");
        weights
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Named conv blocks, e.g. `base.enc1`, `rn_x4.b3`, `cn_x1.b1`.
    pub fn block(&self, name: &str) -> Option<&ConvBlockHandle> {
        let a = &self.arch;
        let enc_names = [
            "base.enc1",
            "base.enc2",
            "base.enc3",
            "base.enc4",
            "base.bottleneck",
        ];
        if let Some(i) = enc_names.iter().position(|&n| n == name) {
            return Some(&a.enc[i]);
        }
        match name {
            "base.dec1" => Some(&a.dec1),
            "base.dec2" => Some(&a.dec2),
            "base.dec3" => Some(&a.dec3),
            "base.dec4" => Some(&a.dec4),
            _ => {
                let (group, idx) = name.rsplit_once(".b")?;
                let i = idx.parse::<usize>().ok()?.checked_sub(1)?;
                let blocks: &[ConvBlockHandle; 3] = match group {
                    "rn_x4" => &a.rn_x4,
                    "rn_x2" => &a.rn_x2,
                    "cn_x4" => &a.cn_x4,
                    "cn_x2" => &a.cn_x2,
                    "cn_x1" => &a.cn_x1,
                    _ => return None,
                };
                blocks.get(i)
            }
        }
    }

    /// `(name, shape)` for every parameter, in canonical order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.store
            .iter()
            .map(|(_, e)| (e.name.clone(), e.value.shape().to_vec()))
            .collect()
    }

    /// Verify every tensor shape against the canonical architecture listing.
    pub fn audit(&self) -> Result<(), ModelError> {
        let expected = canonical_parameter_shapes();
        let got = self.parameter_shapes();
        if got.len() != expected.len() {
            return Err(ModelError::AuditFailed(format!(
                "parameter count {} != expected {}",
                got.len(),
                expected.len()
            )));
        }
        for ((gn, gs), (en, es)) in got.iter().zip(&expected) {
            if gn != en || gs != es {
                return Err(ModelError::AuditFailed(format!(
                    "parameter {gn} {gs:?} does not match expected {en} {es:?}"
                )));
            }
        }
        Ok(())
    }
}

/// The canonical parameter listing: every tensor name and shape implied by
/// the architecture strings (encoder/decoder, RN, CN, RFN channel counts).
pub fn canonical_parameter_shapes() -> Vec<(String, Vec<usize>)> {
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let mut conv = |name: &str, in_c: usize, out_c: usize, k: usize| {
        out.push((format!("{name}.weight"), vec![out_c, in_c, k, k]));
        out.push((format!("{name}.bias"), vec![out_c]));
    };
    let mut block = |name: &str, in_c: usize, out_c: usize| {
        conv(&format!("{name}.conv"), in_c, out_c, 3);
        for suffix in ["gamma", "beta", "running_mean", "running_var"] {
            out.push((format!("{name}.bn.{suffix}"), vec![out_c]));
        }
    };
    // Ugly juggling to reuse the closures over `out`:
    // re-declare them as fns over a buffer instead.
    out.clear();
    fn push_conv(out: &mut Vec<(String, Vec<usize>)>, name: &str, in_c: usize, out_c: usize, k: usize) {
        out.push((format!("{name}.weight"), vec![out_c, in_c, k, k]));
        out.push((format!("{name}.bias"), vec![out_c]));
    }
    fn push_block(out: &mut Vec<(String, Vec<usize>)>, name: &str, in_c: usize, out_c: usize) {
        push_conv(out, &format!("{name}.conv"), in_c, out_c, 3);
        for suffix in ["gamma", "beta", "running_mean", "running_var"] {
            out.push((format!("{name}.bn.{suffix}"), vec![out_c]));
        }
    }
    let _ = (&mut conv, &mut block);

    let mut v = Vec::new();
    push_block(&mut v, "base.enc1", 3, 32);
    push_block(&mut v, "base.enc2", 32, 32);
    push_block(&mut v, "base.enc3", 32, 32);
    push_block(&mut v, "base.enc4", 32, 32);
    push_block(&mut v, "base.bottleneck", 32, 32);
    push_conv(&mut v, "base.up1", 32, 32, 3);
    push_conv(&mut v, "base.up2", 32, 32, 3);
    push_conv(&mut v, "base.up3", 64, 32, 3);
    push_conv(&mut v, "base.up4", 32, 32, 3);
    push_block(&mut v, "base.dec1", 64, 32);
    push_block(&mut v, "base.dec2", 67, 32);
    push_block(&mut v, "base.dec3", 67, 16);
    push_block(&mut v, "base.dec4", 16, 16);
    push_conv(&mut v, "base.final", 16, 3, 3);
    for name in ["rn_x4", "rn_x2"] {
        push_block(&mut v, &format!("{name}.b1"), 64, 32);
        push_block(&mut v, &format!("{name}.b2"), 32, 32);
        push_block(&mut v, &format!("{name}.b3"), 32, 3);
    }
    for (name, in_c) in [("cn_x4", 67), ("cn_x2", 67), ("cn_x1", 19)] {
        push_block(&mut v, &format!("{name}.b1"), in_c, 16);
        push_block(&mut v, &format!("{name}.b2"), 16, 16);
        push_block(&mut v, &format!("{name}.b3"), 16, 3);
    }
    push_conv(&mut v, "rfn.conv1", 3, 3, 7);
    push_conv(&mut v, "rfn.conv2", 3, 3, 3);
    v
}

/// Encoder skip features, decoder concatenation points and final features
/// from one base-network pass (feedback channels zero-filled).
#[derive(Debug)]
pub struct BaseFeatures<T> {
    pub e1: Array3<T>,
    pub e2: Array3<T>,
    pub e3: Array3<T>,
    pub e4: Array3<T>,
    pub bottleneck: Array3<T>,
    pub d4: Array3<T>,
    pub d2: Array3<T>,
    pub f1: Array3<T>,
}

/// The nine maps produced by one forward pass: residual, confidence and
/// de-rained image at scales x1 (full), x2 (half) and x4 (quarter).
#[derive(Debug, Clone)]
pub struct UmrlOutput<T> {
    pub residual_x1: Array3<T>,
    pub residual_x2: Array3<T>,
    pub residual_x4: Array3<T>,
    pub conf_x1: Array3<T>,
    pub conf_x2: Array3<T>,
    pub conf_x4: Array3<T>,
    pub derained_x1: Array3<T>,
    pub derained_x2: Array3<T>,
    pub derained_x4: Array3<T>,
}

impl<T: Scalar> UmrlOutput<T> {
    /// Mean over every confidence value at all three scales.
    pub fn mean_confidence(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for c in [&self.conf_x1, &self.conf_x2, &self.conf_x4] {
            for &v in c.iter() {
                sum += v.to_f64();
            }
            n += c.len();
        }
        sum / n as f64
    }
}

/// Node handles for a forward pass built on a caller-owned graph; the trainer
/// seeds loss adjoints on these.
#[derive(Debug, Clone, Copy)]
pub struct UmrlGraphNodes {
    /// Rainy input at scales x1, x2, x4.
    pub y: [NodeId; 3],
    pub residual: [NodeId; 3],
    pub conf: [NodeId; 3],
    pub derained: [NodeId; 3],
}

fn validate_input<T: Scalar>(y: &Array3<T>) -> Result<(), ModelError> {
    let (c, h, w) = y.dim();
    if c != 3 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 || h == 0 || w == 0 {
        return Err(ModelError::InvalidInputSize { c, h, w });
    }
    Ok(())
}

fn build_conv_block<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: NodeId,
    block: &ConvBlockHandle,
) -> NodeId {
    let c = g.conv2d(x, block.conv.w, block.conv.b, (block.conv.k - 1) / 2);
    let n = g.batch_norm(c, block.bn.gamma, block.bn.beta, block.bn.mean, block.bn.var);
    if block.relu {
        g.relu(n)
    } else {
        n
    }
}

fn build_upsample<T: Scalar>(g: &mut Graph<'_, T>, x: NodeId, up: &ConvParams) -> NodeId {
    let n = g.up_nearest2(x);
    g.conv2d(n, up.w, up.b, (up.k - 1) / 2)
}

fn build_head<T: Scalar>(g: &mut Graph<'_, T>, x: NodeId, blocks: &[ConvBlockHandle; 3]) -> NodeId {
    let mut cur = x;
    for b in blocks {
        cur = build_conv_block(g, cur, b);
    }
    cur
}

fn build_rfn<T: Scalar>(g: &mut Graph<'_, T>, diff: NodeId, w: &UmrlWeights<T>) -> NodeId {
    let a = &w.arch;
    let c1 = g.conv2d(diff, a.rfn_conv1.w, a.rfn_conv1.b, 3);
    let c2 = g.conv2d(c1, a.rfn_conv2.w, a.rfn_conv2.b, 1);
    let t = g.tanh(c2);
    // tanh lands in [-1, 1]; remap into the image range.
    g.affine_scalar(t, T::from_f64(0.5), T::from_f64(0.5))
}

fn build_cn<T: Scalar>(
    g: &mut Graph<'_, T>,
    feat: NodeId,
    residual: NodeId,
    blocks: &[ConvBlockHandle; 3],
) -> NodeId {
    let cat = g.concat(&[feat, residual]);
    let z = build_head(g, cat, blocks);
    let s = g.sigmoid(z);
    g.clamp(s, T::from_f64(CONFIDENCE_FLOOR), T::one())
}

/// Build the full multi-scale forward pass on `g`. The variant decides what
/// flows through the scale-to-scale feedback channels: the
/// confidence-weighted residual, the plain residual, or zeros.
pub fn build_umrl<T: Scalar>(
    g: &mut Graph<'_, T>,
    y: &Array3<T>,
    w: &UmrlWeights<T>,
    variant: Variant,
) -> Result<UmrlGraphNodes, ModelError> {
    validate_input(y)?;
    let (_, h, wd) = y.dim();
    let a = &w.arch;

    let y1 = g.input(y.clone());
    let y2v = crate::nn::kernels::avg_pool2_forward(y);
    let y4v = crate::nn::kernels::avg_pool2_forward(&y2v);
    let y2 = g.input(y2v);
    let y4 = g.input(y4v);

    // Encoder.
    let e1 = build_conv_block(g, y1, &a.enc[0]);
    let p1 = g.avg_pool2(e1);
    let e2 = build_conv_block(g, p1, &a.enc[1]);
    let p2 = g.avg_pool2(e2);
    let e3 = build_conv_block(g, p2, &a.enc[2]);
    let p3 = g.avg_pool2(e3);
    let e4 = build_conv_block(g, p3, &a.enc[3]);
    let p4 = g.avg_pool2(e4);
    let bottleneck = build_conv_block(g, p4, &a.enc[4]);

    // Decoder trunk to the quarter-scale concatenation point.
    let u1 = build_upsample(g, bottleneck, &a.up[0]);
    let cat1 = g.concat(&[u1, e4]);
    let t1 = build_conv_block(g, cat1, &a.dec1);
    let u2 = build_upsample(g, t1, &a.up[1]);
    let d4 = g.concat(&[u2, e3]);

    // Quarter-scale heads and their feedback into the next stage.
    let r4 = build_head(g, d4, &a.rn_x4);
    let c4 = build_cn(g, d4, r4, &a.cn_x4);
    let f4 = match variant {
        Variant::Umrl => {
            let prod = g.mul(c4, r4);
            g.up_bilinear2(prod)
        }
        Variant::BnRn => g.up_bilinear2(r4),
        Variant::Bn => g.input(Array3::zeros((3, h / 2, wd / 2))),
    };

    // Half-scale concatenation point and heads.
    let u3 = build_upsample(g, d4, &a.up[2]);
    let d2 = g.concat(&[u3, e2]);
    let r2 = build_head(g, d2, &a.rn_x2);
    let c2 = build_cn(g, d2, r2, &a.cn_x2);
    let f2 = match variant {
        Variant::Umrl => {
            let prod = g.mul(c2, r2);
            g.up_bilinear2(prod)
        }
        Variant::BnRn => g.up_bilinear2(r2),
        Variant::Bn => g.input(Array3::zeros((3, h, wd))),
    };

    // Decoder tail to full resolution.
    let cat2 = g.concat(&[d2, f4]);
    let t2 = build_conv_block(g, cat2, &a.dec2);
    let u4 = build_upsample(g, t2, &a.up[3]);
    let cat3 = g.concat(&[u4, e1, f2]);
    let t3 = build_conv_block(g, cat3, &a.dec3);
    let f1 = build_conv_block(g, t3, &a.dec4);
    let r1 = g.conv2d(f1, a.final_conv.w, a.final_conv.b, 1);
    let c1 = build_cn(g, f1, r1, &a.cn_x1);

    // Refinement at every scale with the shared RFN.
    let mut derained = [r1; 3];
    for (i, (yi, ri)) in [(y1, r1), (y2, r2), (y4, r4)].into_iter().enumerate() {
        let diff = g.sub(yi, ri);
        derained[i] = build_rfn(g, diff, w);
    }

    Ok(UmrlGraphNodes {
        y: [y1, y2, y4],
        residual: [r1, r2, r4],
        conf: [c1, c2, c4],
        derained,
    })
}

/// Full forward pass in eval mode: a pure function of `(y, w, variant)`.
pub fn umrl_forward<T: Scalar>(
    y: &Array3<T>,
    w: &UmrlWeights<T>,
    variant: Variant,
) -> Result<UmrlOutput<T>, ModelError> {
    let mut g = Graph::new(w.store(), Mode::Eval);
    let nodes = build_umrl(&mut g, y, w, variant)?;
    Ok(UmrlOutput {
        residual_x1: g.value(nodes.residual[0]).clone(),
        residual_x2: g.value(nodes.residual[1]).clone(),
        residual_x4: g.value(nodes.residual[2]).clone(),
        conf_x1: g.value(nodes.conf[0]).clone(),
        conf_x2: g.value(nodes.conf[1]).clone(),
        conf_x4: g.value(nodes.conf[2]).clone(),
        derained_x1: g.value(nodes.derained[0]).clone(),
        derained_x2: g.value(nodes.derained[1]).clone(),
        derained_x4: g.value(nodes.derained[2]).clone(),
    })
}

/// Base network in eval mode with zero-filled feedback channels, exposing the
/// skip features and decoder concatenation points.
pub fn base_forward<T: Scalar>(
    y: &Array3<T>,
    w: &UmrlWeights<T>,
) -> Result<BaseFeatures<T>, ModelError> {
    validate_input(y)?;
    let (_, h, wd) = y.dim();
    let a = &w.arch;
    let mut g = Graph::new(w.store(), Mode::Eval);
    let y1 = g.input(y.clone());
    let e1 = build_conv_block(&mut g, y1, &a.enc[0]);
    let p1 = g.avg_pool2(e1);
    let e2 = build_conv_block(&mut g, p1, &a.enc[1]);
    let p2 = g.avg_pool2(e2);
    let e3 = build_conv_block(&mut g, p2, &a.enc[2]);
    let p3 = g.avg_pool2(e3);
    let e4 = build_conv_block(&mut g, p3, &a.enc[3]);
    let p4 = g.avg_pool2(e4);
    let bottleneck = build_conv_block(&mut g, p4, &a.enc[4]);
    let u1 = build_upsample(&mut g, bottleneck, &a.up[0]);
    let cat1 = g.concat(&[u1, e4]);
    let t1 = build_conv_block(&mut g, cat1, &a.dec1);
    let u2 = build_upsample(&mut g, t1, &a.up[1]);
    let d4 = g.concat(&[u2, e3]);
    let u3 = build_upsample(&mut g, d4, &a.up[2]);
    let d2 = g.concat(&[u3, e2]);
    let f4 = g.input(Array3::zeros((3, h / 2, wd / 2)));
    let cat2 = g.concat(&[d2, f4]);
    let t2 = build_conv_block(&mut g, cat2, &a.dec2);
    let u4 = build_upsample(&mut g, t2, &a.up[3]);
    let f2 = g.input(Array3::zeros((3, h, wd)));
    let cat3 = g.concat(&[u4, e1, f2]);
    let t3 = build_conv_block(&mut g, cat3, &a.dec3);
    let f1 = build_conv_block(&mut g, t3, &a.dec4);
    Ok(BaseFeatures {
        e1: g.value(e1).clone(),
        e2: g.value(e2).clone(),
        e3: g.value(e3).clone(),
        e4: g.value(e4).clone(),
        bottleneck: g.value(bottleneck).clone(),
        d4: g.value(d4).clone(),
        d2: g.value(d2).clone(),
        f1: g.value(f1).clone(),
    })
}

/// One conv block in isolation (eval mode).
pub fn conv_block_forward<T: Scalar>(
    x: &Array3<T>,
    w: &UmrlWeights<T>,
    block: &ConvBlockHandle,
) -> Result<Array3<T>, ModelError> {
    if x.dim().0 != block.spec.in_channels {
        return Err(ModelError::ChannelMismatch {
            name: format!("ConvBlock({},{})", block.spec.in_channels, block.spec.out_channels),
            expected: block.spec.in_channels,
            got: x.dim().0,
        });
    }
    let mut g = Graph::new(w.store(), Mode::Eval);
    let xin = g.input(x.clone());
    let out = build_conv_block(&mut g, xin, block);
    Ok(g.value(out).clone())
}

/// Residual head in isolation (eval mode): 64-channel features to a signed
/// 3-channel residual estimate.
pub fn rn_forward<T: Scalar>(
    feat: &Array3<T>,
    w: &UmrlWeights<T>,
    head: RnHead,
) -> Result<Array3<T>, ModelError> {
    let blocks = match head {
        RnHead::X4 => &w.arch.rn_x4,
        RnHead::X2 => &w.arch.rn_x2,
    };
    if feat.dim().0 != blocks[0].spec.in_channels {
        return Err(ModelError::ChannelMismatch {
            name: format!("rn_{head:?}"),
            expected: blocks[0].spec.in_channels,
            got: feat.dim().0,
        });
    }
    let mut g = Graph::new(w.store(), Mode::Eval);
    let f = g.input(feat.clone());
    let out = build_head(&mut g, f, blocks);
    Ok(g.value(out).clone())
}

/// Confidence head in isolation (eval mode): features plus residual to a
/// per-pixel confidence map in `[CONFIDENCE_FLOOR, 1]`.
pub fn cn_forward<T: Scalar>(
    feat: &Array3<T>,
    residual: &Array3<T>,
    w: &UmrlWeights<T>,
    head: CnHead,
) -> Result<Array3<T>, ModelError> {
    let blocks = match head {
        CnHead::X4 => &w.arch.cn_x4,
        CnHead::X2 => &w.arch.cn_x2,
        CnHead::X1 => &w.arch.cn_x1,
    };
    let got = feat.dim().0 + residual.dim().0;
    if got != blocks[0].spec.in_channels {
        return Err(ModelError::ChannelMismatch {
            name: format!("cn_{head:?}"),
            expected: blocks[0].spec.in_channels,
            got,
        });
    }
    let mut g = Graph::new(w.store(), Mode::Eval);
    let f = g.input(feat.clone());
    let r = g.input(residual.clone());
    let out = build_cn(&mut g, f, r, blocks);
    Ok(g.value(out).clone())
}

/// Refinement network in isolation (eval mode): `y - r` to a restored image
/// in `[0, 1]`. One weight set is shared across all scales.
pub fn rfn_forward<T: Scalar>(diff: &Array3<T>, w: &UmrlWeights<T>) -> Result<Array3<T>, ModelError> {
    if diff.dim().0 != 3 {
        return Err(ModelError::ChannelMismatch {
            name: "rfn".into(),
            expected: 3,
            got: diff.dim().0,
        });
    }
    let mut g = Graph::new(w.store(), Mode::Eval);
    let d = g.input(diff.clone());
    let out = build_rfn(&mut g, d, w);
    Ok(g.value(out).clone())
}

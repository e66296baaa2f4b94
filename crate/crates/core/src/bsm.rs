//! The boundary-squeeze segmentation model and its training loop.
//!
//! The model reads a single-channel crop, encodes it into an RoI feature
//! grid, and predicts four rasters at input resolution: the segmentation
//! mask, its boundary, and the contraction/expansion bands that close in on
//! the boundary from inside and outside. Each squeeze branch refines the
//! shared feature sum with two convolutions and then warps the result along
//! a learned flow field; the boundary feature is the sum of both squeezed
//! features and the RoI feature, and can exchange information with the mask
//! path in both directions (mask feature added into the boundary feature,
//! boundary feature projected back into the mask path through a 1x1 conv).
//!
//! One graph definition drives two executors: a taped executor used by
//! training (records every op for reverse-mode differentiation) and a pure
//! executor used by inference (plain buffers, no bookkeeping). Both walk the
//! graph in the same order, so their outputs are bitwise identical.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, ValueId};
use crate::dataio::formats::{self, BsqtDtype};
use crate::dataio::Sample;
use crate::error::{Error, Result};
use crate::field::{self, ConvKind, ConvSpec, FeatureField};
use crate::losses::{self, BranchLogits, BranchSet, LossBreakdown, LossConfig, PosWeightMode};
use crate::morphology::{BinaryMask, KernelSize, TargetSet};
use crate::warp::{bilinear_warp, FlowField};

/// Architecture switches and sizes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BSMConfig {
    /// Width of every internal feature field.
    pub feat_channels: usize,
    /// Side of the RoI feature grid; predictions come out at twice this.
    pub feature_grid: usize,
    /// Squeeze-band kernel used when deriving training targets.
    pub kernel_size: usize,
    /// Add a low-level tap (1x1 conv + 2x average pooling) into the feature sum.
    pub low_level_enabled: bool,
    /// Add the mask feature into the boundary feature.
    pub fuse_mask_to_boundary: bool,
    /// Project the boundary feature through a 1x1 conv back into the mask path.
    pub fuse_boundary_to_mask_conv: bool,
    /// Which auxiliary branches are built and supervised.
    pub branches: BranchSet,
}

impl Default for BSMConfig {
    fn default() -> Self {
        BSMConfig {
            feat_channels: 32,
            feature_grid: 14,
            kernel_size: 5,
            low_level_enabled: true,
            fuse_mask_to_boundary: true,
            fuse_boundary_to_mask_conv: true,
            branches: BranchSet::default(),
        }
    }
}

impl BSMConfig {
    /// Side of the prediction/target grid: the heads upsample features x2.
    pub fn target_grid(&self) -> usize {
        self.feature_grid * 2
    }

    pub fn squeeze_kernel(&self) -> Result<KernelSize> {
        KernelSize::new(self.kernel_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feat_channels == 0 {
            return Err(Error::Config("feat_channels must be >= 1".into()));
        }
        if self.feature_grid < 2 {
            return Err(Error::Config(format!("feature_grid must be >= 2, got {}", self.feature_grid)));
        }
        self.squeeze_kernel()?;
        Ok(())
    }
}

macro_rules! define_model_params {
    ($($slot:ident),* $(,)?) => {
        /// Every learnable layer of the model, by name.
        ///
        /// All slots are always allocated — disabled branches simply leave
        /// theirs untouched — so models that differ only in architecture
        /// flags start from identical shared weights for a given seed.
        #[derive(Clone, Debug, PartialEq)]
        pub struct ModelParams {
            $(pub $slot: ConvSpec,)*
        }

        impl ModelParams {
            /// Slots in canonical order.
            pub fn slots(&self) -> Vec<(&'static str, &ConvSpec)> {
                vec![$((stringify!($slot), &self.$slot),)*]
            }

            /// Mutable slots in canonical order.
            pub fn slots_mut(&mut self) -> Vec<(&'static str, &mut ConvSpec)> {
                let ModelParams { $($slot,)* } = self;
                vec![$((stringify!($slot), $slot),)*]
            }

            pub fn get(&self, name: &str) -> Option<&ConvSpec> {
                match name {
                    $(stringify!($slot) => Some(&self.$slot),)*
                    _ => None,
                }
            }

            /// Build a parameter set by asking `f` for each slot in canonical order.
            pub fn from_slot_fn(mut f: impl FnMut(&'static str) -> Result<ConvSpec>) -> Result<Self> {
                Ok(ModelParams { $($slot: f(stringify!($slot))?,)* })
            }
        }
    };
}

define_model_params!(
    enc1, enc2, low, mask1, mask2, mask3, mask4, con1, con2, exp1, exp2, flow_con, flow_exp,
    b2m, head_seg_deconv, head_seg_out, head_bnd_deconv, head_bnd_out, head_con_deconv,
    head_con_out, head_exp_deconv, head_exp_out,
);

/// Expected geometry of every slot for a given configuration, in canonical
/// slot order.
fn expected_slot_shapes(cfg: &BSMConfig) -> Vec<(&'static str, ConvKind, usize, usize)> {
    let c = cfg.feat_channels;
    vec![
        ("enc1", ConvKind::Conv3x3, 1, c),
        ("enc2", ConvKind::Conv3x3, c, c),
        ("low", ConvKind::Conv1x1, c, c),
        ("mask1", ConvKind::Conv3x3, c, c),
        ("mask2", ConvKind::Conv3x3, c, c),
        ("mask3", ConvKind::Conv3x3, c, c),
        ("mask4", ConvKind::Conv3x3, c, c),
        ("con1", ConvKind::Conv3x3, c, c),
        ("con2", ConvKind::Conv3x3, c, c),
        ("exp1", ConvKind::Conv3x3, c, c),
        ("exp2", ConvKind::Conv3x3, c, c),
        ("flow_con", ConvKind::Conv3x3, 2 * c, 2),
        ("flow_exp", ConvKind::Conv3x3, 2 * c, 2),
        ("b2m", ConvKind::Conv1x1, c, c),
        ("head_seg_deconv", ConvKind::Deconv2x2, c, c),
        ("head_seg_out", ConvKind::Conv1x1, c, 1),
        ("head_bnd_deconv", ConvKind::Deconv2x2, c, c),
        ("head_bnd_out", ConvKind::Conv1x1, c, 1),
        ("head_con_deconv", ConvKind::Deconv2x2, c, c),
        ("head_con_out", ConvKind::Conv1x1, c, 1),
        ("head_exp_deconv", ConvKind::Deconv2x2, c, c),
        ("head_exp_out", ConvKind::Conv1x1, c, 1),
    ]
}

impl ModelParams {
    /// Seeded initialization: Kaiming weights everywhere except the two flow
    /// convolutions, which start at zero so every warp begins as the
    /// identity. Draw order is fixed and independent of the config flags.
    pub fn init(cfg: &BSMConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Self::from_slot_fn(|name| {
            let (_, kind, in_c, out_c) = expected_slot_shapes(cfg)
                .into_iter()
                .find(|(n, _, _, _)| *n == name)
                .expect("slot listed");
            Ok(match name {
                "flow_con" | "flow_exp" => ConvSpec::zeros(kind, in_c, out_c),
                _ => ConvSpec::kaiming(kind, in_c, out_c, &mut rng),
            })
        })?;
        Ok(params)
    }

    /// All-zero parameters of the right shapes (useful as a fixed point:
    /// every logit comes out exactly zero).
    pub fn zeros(cfg: &BSMConfig) -> Result<Self> {
        cfg.validate()?;
        Self::from_slot_fn(|name| {
            let (_, kind, in_c, out_c) = expected_slot_shapes(cfg)
                .into_iter()
                .find(|(n, _, _, _)| *n == name)
                .expect("slot listed");
            Ok(ConvSpec::zeros(kind, in_c, out_c))
        })
    }

    /// Check that every slot has the geometry the config demands and only
    /// finite values.
    pub fn validate(&self, cfg: &BSMConfig) -> Result<()> {
        cfg.validate()?;
        for ((name, spec), (ename, kind, in_c, out_c)) in self.slots().iter().zip(expected_slot_shapes(cfg)) {
            debug_assert_eq!(*name, ename);
            spec.validate()?;
            if spec.kind != kind || spec.in_channels != in_c || spec.out_channels != out_c {
                return Err(Error::ShapeMismatch {
                    expected: format!("{name}: {} {}->{}", kind.name(), in_c, out_c),
                    got: format!("{} {}->{}", spec.kind.name(), spec.in_channels, spec.out_channels),
                });
            }
            if spec.weights.iter().chain(&spec.bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter slot {name}")));
            }
        }
        Ok(())
    }
}

/// Minimal op set the model graph is written against. The graph code calls
/// these in a fixed order; executors differ only in what a value handle is.
trait Exec {
    type V: Copy;
    fn input(&mut self, f: &FeatureField) -> Self::V;
    fn conv(&mut self, x: Self::V, slot: &'static str) -> Result<Self::V>;
    fn relu(&mut self, x: Self::V) -> Self::V;
    fn add(&mut self, a: Self::V, b: Self::V) -> Result<Self::V>;
    fn concat(&mut self, a: Self::V, b: Self::V) -> Result<Self::V>;
    fn avg_pool2(&mut self, x: Self::V) -> Result<Self::V>;
    fn warp_by(&mut self, x: Self::V, flow: Self::V) -> Result<Self::V>;
    fn field(&self, x: Self::V) -> FeatureField;
}

/// Executor that records onto a [`Tape`] for backpropagation. Parameter
/// slots become tape leaves on first use and are reused afterwards.
struct TapeExec<'p> {
    tape: Tape,
    params: &'p ModelParams,
    slot_ids: BTreeMap<&'static str, (ValueId, ValueId)>,
}

impl<'p> TapeExec<'p> {
    fn new(params: &'p ModelParams) -> Self {
        TapeExec { tape: Tape::new(), params, slot_ids: BTreeMap::new() }
    }

    /// Weight/bias gradients of a slot, if the slot participated in the graph.
    fn slot_grads(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.slot_ids.get(name).map(|&(w, b)| (self.tape.grad(w), self.tape.grad(b)))
    }
}

impl Exec for TapeExec<'_> {
    type V = ValueId;

    fn input(&mut self, f: &FeatureField) -> ValueId {
        self.tape.leaf(f)
    }

    fn conv(&mut self, x: ValueId, slot: &'static str) -> Result<ValueId> {
        let spec = self.params.get(slot).ok_or_else(|| Error::MissingSlot(slot.into()))?;
        let (w, b) = match self.slot_ids.get(slot) {
            Some(&ids) => ids,
            None => {
                let w = self.tape.leaf_buf(spec.weights.clone());
                let b = self.tape.leaf_buf(spec.bias.clone());
                self.slot_ids.insert(slot, (w, b));
                (w, b)
            }
        };
        self.tape.conv(x, w, b, spec.kind)
    }

    fn relu(&mut self, x: ValueId) -> ValueId {
        self.tape.relu(x)
    }

    fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.tape.add(a, b)
    }

    fn concat(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.tape.concat(a, b)
    }

    fn avg_pool2(&mut self, x: ValueId) -> Result<ValueId> {
        self.tape.avg_pool2(x)
    }

    fn warp_by(&mut self, x: ValueId, flow: ValueId) -> Result<ValueId> {
        self.tape.warp(x, flow)
    }

    fn field(&self, x: ValueId) -> FeatureField {
        self.tape.field(x)
    }
}

/// Executor that evaluates eagerly into an arena of plain fields.
struct PureExec<'p> {
    params: &'p ModelParams,
    arena: Vec<FeatureField>,
}

impl<'p> PureExec<'p> {
    fn new(params: &'p ModelParams) -> Self {
        PureExec { params, arena: Vec::new() }
    }

    fn push(&mut self, f: FeatureField) -> usize {
        self.arena.push(f);
        self.arena.len() - 1
    }
}

impl Exec for PureExec<'_> {
    type V = usize;

    fn input(&mut self, f: &FeatureField) -> usize {
        self.push(f.clone())
    }

    fn conv(&mut self, x: usize, slot: &'static str) -> Result<usize> {
        let spec = self.params.get(slot).ok_or_else(|| Error::MissingSlot(slot.into()))?;
        let out = field::conv_forward(&self.arena[x], spec)?;
        Ok(self.push(out))
    }

    fn relu(&mut self, x: usize) -> usize {
        let out = field::relu_forward(&self.arena[x]);
        self.push(out)
    }

    fn add(&mut self, a: usize, b: usize) -> Result<usize> {
        let out = field::add(&self.arena[a], &self.arena[b])?;
        Ok(self.push(out))
    }

    fn concat(&mut self, a: usize, b: usize) -> Result<usize> {
        let out = field::concat_channels(&self.arena[a], &self.arena[b])?;
        Ok(self.push(out))
    }

    fn avg_pool2(&mut self, x: usize) -> Result<usize> {
        let out = field::avg_pool2(&self.arena[x])?;
        Ok(self.push(out))
    }

    fn warp_by(&mut self, x: usize, flow: usize) -> Result<usize> {
        let f = FlowField::from_feature_field(&self.arena[flow])?;
        let out = bilinear_warp(&self.arena[x], &f)?;
        Ok(self.push(out))
    }

    fn field(&self, x: usize) -> FeatureField {
        self.arena[x].clone()
    }
}

#[derive(Clone, Copy)]
struct BranchNodes<V: Copy> {
    warped: V,
    flow: V,
}

/// Handles to every output of one forward pass, executor-agnostic.
struct GraphOut<V: Copy> {
    seg: V,
    bnd: Option<V>,
    con: Option<V>,
    exp: Option<V>,
    con_flow: Option<V>,
    exp_flow: Option<V>,
    boundary_feat: Option<V>,
}

/// Encoder: a conv stem at input resolution, pooled and refined into the RoI
/// feature, plus an optional low-level tap (1x1 conv then pooling) off the
/// stem.
fn encode_graph<E: Exec>(ex: &mut E, image: E::V, cfg: &BSMConfig) -> Result<(E::V, Option<E::V>)> {
    let stem = ex.conv(image, "enc1")?;
    let stem = ex.relu(stem);
    let pooled = ex.avg_pool2(stem)?;
    let f_roi = ex.conv(pooled, "enc2")?;
    let f_roi = ex.relu(f_roi);
    let low = if cfg.low_level_enabled {
        let tap = ex.conv(stem, "low")?;
        Some(ex.avg_pool2(tap)?)
    } else {
        None
    };
    Ok((f_roi, low))
}

/// One squeeze branch: two refining convolutions, then a flow predicted from
/// the refined feature concatenated with the RoI feature, then a bilinear
/// warp of the refined feature along that flow.
fn branch_graph<E: Exec>(
    ex: &mut E,
    f_sum: E::V,
    f_roi: E::V,
    c1: &'static str,
    c2: &'static str,
    flow_slot: &'static str,
) -> Result<BranchNodes<E::V>> {
    let t = ex.conv(f_sum, c1)?;
    let t = ex.relu(t);
    // The second conv emits a pre-activation feature: the branch output both
    // feeds a residual sum and gets bilinearly interpolated by the warp, and
    // clamping it first would discard sign structure at both sites.
    let t = ex.conv(t, c2)?;
    let cat = ex.concat(t, f_roi)?;
    let flow = ex.conv(cat, flow_slot)?;
    let warped = ex.warp_by(t, flow)?;
    Ok(BranchNodes { warped, flow })
}

/// Prediction head: 2x2 deconvolution to double the grid, then a 1x1
/// projection to single-channel logits. The head is deliberately linear;
/// a nonlinearity here can strand output units at zero gradient and stall
/// the squeeze branches long before their Dice terms are fit.
fn head_graph<E: Exec>(ex: &mut E, x: E::V, deconv: &'static str, out: &'static str) -> Result<E::V> {
    let up = ex.conv(x, deconv)?;
    ex.conv(up, out)
}

/// Everything after the encoder: feature sum, mask path, squeeze branches,
/// boundary feature assembly, cross-path fusion, and the four heads.
///
/// The boundary feature exists only when the boundary branch is enabled; it
/// is the sum, in fixed order, of the warped contraction feature, the warped
/// expansion feature, the RoI feature, and (when fused) the mask feature.
/// Without the boundary branch the mask path sees the squeeze branches only
/// through shared-trunk gradients, never through features.
fn squeeze_graph<E: Exec>(ex: &mut E, f_roi: E::V, f_roi_low: Option<E::V>, cfg: &BSMConfig) -> Result<GraphOut<E::V>> {
    let f_sum = match f_roi_low {
        Some(low) => ex.add(f_roi, low)?,
        None => f_roi,
    };

    let mut m = f_sum;
    for slot in ["mask1", "mask2", "mask3", "mask4"] {
        m = ex.conv(m, slot)?;
        m = ex.relu(m);
    }

    let con = if cfg.branches.con {
        Some(branch_graph(ex, f_sum, f_roi, "con1", "con2", "flow_con")?)
    } else {
        None
    };
    let exp = if cfg.branches.exp {
        Some(branch_graph(ex, f_sum, f_roi, "exp1", "exp2", "flow_exp")?)
    } else {
        None
    };

    let boundary = if cfg.branches.bnd {
        let mut terms = Vec::new();
        if let Some(b) = &con {
            terms.push(b.warped);
        }
        if let Some(b) = &exp {
            terms.push(b.warped);
        }
        terms.push(f_roi);
        if cfg.fuse_mask_to_boundary {
            terms.push(m);
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = ex.add(acc, t)?;
        }
        Some(acc)
    } else {
        None
    };

    let seg_feat = match boundary {
        Some(b) if cfg.fuse_boundary_to_mask_conv => {
            let back = ex.conv(b, "b2m")?;
            ex.add(m, back)?
        }
        _ => m,
    };

    let seg = head_graph(ex, seg_feat, "head_seg_deconv", "head_seg_out")?;
    let bnd = match boundary {
        Some(b) => Some(head_graph(ex, b, "head_bnd_deconv", "head_bnd_out")?),
        None => None,
    };
    let con_logits = match &con {
        Some(b) => Some(head_graph(ex, b.warped, "head_con_deconv", "head_con_out")?),
        None => None,
    };
    let exp_logits = match &exp {
        Some(b) => Some(head_graph(ex, b.warped, "head_exp_deconv", "head_exp_out")?),
        None => None,
    };

    Ok(GraphOut {
        seg,
        bnd,
        con: con_logits,
        exp: exp_logits,
        con_flow: con.map(|b| b.flow),
        exp_flow: exp.map(|b| b.flow),
        boundary_feat: boundary,
    })
}

fn check_image_shape(image: &FeatureField, cfg: &BSMConfig) -> Result<()> {
    let g = cfg.target_grid();
    if image.shape() != (1, g, g) {
        return Err(Error::ShapeMismatch {
            expected: format!("1x{g}x{g} image"),
            got: format!("{:?}", image.shape()),
        });
    }
    Ok(())
}

fn check_feature_shape(f: &FeatureField, cfg: &BSMConfig, what: &str) -> Result<()> {
    let g = cfg.feature_grid;
    if f.shape() != (cfg.feat_channels, g, g) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{g}x{g} {what}", cfg.feat_channels),
            got: format!("{:?}", f.shape()),
        });
    }
    Ok(())
}

/// Encode an image into the RoI feature and (if enabled) the low-level tap.
pub fn toy_encoder(image: &FeatureField, params: &ModelParams, cfg: &BSMConfig) -> Result<(FeatureField, Option<FeatureField>)> {
    cfg.validate()?;
    check_image_shape(image, cfg)?;
    let mut ex = PureExec::new(params);
    let v = ex.input(image);
    let (f_roi, low) = encode_graph(&mut ex, v, cfg)?;
    Ok((ex.field(f_roi), low.map(|l| ex.field(l))))
}

/// Logits and flows of one forward pass. Branches that are disabled in the
/// config are absent.
#[derive(Clone, Debug)]
pub struct BsmOutput {
    pub seg_logits: FeatureField,
    pub bnd_logits: Option<FeatureField>,
    pub con_logits: Option<FeatureField>,
    pub exp_logits: Option<FeatureField>,
    pub con_flow: Option<FlowField>,
    pub exp_flow: Option<FlowField>,
    /// The assembled boundary feature (for inspection/visualization).
    pub boundary_feat: Option<FeatureField>,
}

impl BsmOutput {
    /// View as per-branch logits for loss evaluation.
    pub fn branch_logits(&self) -> BranchLogits {
        BranchLogits {
            seg: self.seg_logits.clone(),
            bnd: self.bnd_logits.clone(),
            con: self.con_logits.clone(),
            exp: self.exp_logits.clone(),
        }
    }
}

fn extract_output<E: Exec>(ex: &E, out: &GraphOut<E::V>) -> Result<BsmOutput> {
    let flow = |v: &Option<E::V>| -> Result<Option<FlowField>> {
        match v {
            Some(id) => Ok(Some(FlowField::from_feature_field(&ex.field(*id))?)),
            None => Ok(None),
        }
    };
    Ok(BsmOutput {
        seg_logits: ex.field(out.seg),
        bnd_logits: out.bnd.map(|v| ex.field(v)),
        con_logits: out.con.map(|v| ex.field(v)),
        exp_logits: out.exp.map(|v| ex.field(v)),
        con_flow: flow(&out.con_flow)?,
        exp_flow: flow(&out.exp_flow)?,
        boundary_feat: out.boundary_feat.map(|v| ex.field(v)),
    })
}

/// Forward pass from pre-encoded features.
pub fn bsm_forward(
    f_roi: &FeatureField,
    f_roi_low: Option<&FeatureField>,
    params: &ModelParams,
    cfg: &BSMConfig,
) -> Result<BsmOutput> {
    cfg.validate()?;
    check_feature_shape(f_roi, cfg, "RoI feature")?;
    if cfg.low_level_enabled && f_roi_low.is_none() {
        return Err(Error::MissingSlot("low-level feature".into()));
    }
    let mut ex = PureExec::new(params);
    let roi = ex.input(f_roi);
    let low = match f_roi_low {
        Some(l) if cfg.low_level_enabled => {
            check_feature_shape(l, cfg, "low-level feature")?;
            Some(ex.input(l))
        }
        _ => None,
    };
    let out = squeeze_graph(&mut ex, roi, low, cfg)?;
    extract_output(&ex, &out)
}

/// Full forward pass from an image (encoder + squeeze graph in one walk).
pub fn forward(image: &FeatureField, params: &ModelParams, cfg: &BSMConfig) -> Result<BsmOutput> {
    cfg.validate()?;
    check_image_shape(image, cfg)?;
    let mut ex = PureExec::new(params);
    let v = ex.input(image);
    let (f_roi, low) = encode_graph(&mut ex, v, cfg)?;
    let out = squeeze_graph(&mut ex, f_roi, low, cfg)?;
    extract_output(&ex, &out)
}

/// Scalar loss nodes of one taped step.
struct TapeLoss {
    seg: ValueId,
    bnd_bce: Option<ValueId>,
    bnd_dice: Option<ValueId>,
    con: Option<ValueId>,
    exp: Option<ValueId>,
    total: ValueId,
}

/// Record the combined loss on the tape. The per-term weighting and the
/// order of accumulation mirror [`losses::mask_loss`] exactly, so the taped
/// total equals the pure one bitwise on identical logits.
fn tape_loss(
    ex: &mut TapeExec<'_>,
    out: &GraphOut<ValueId>,
    targets: &TargetSet,
    cfg: &LossConfig,
    branches: &BranchSet,
) -> Result<TapeLoss> {
    cfg.validate()?;
    let w = cfg.term_weights;
    let seg = ex.tape.bce(out.seg, &targets.gs)?;
    let mut terms = vec![(seg, w.seg)];
    let (bnd_bce, bnd_dice) = if branches.bnd {
        let z = out.bnd.ok_or_else(|| Error::MissingSlot("boundary logits".into()))?;
        let b1 = match cfg.pos_weight_mode {
            PosWeightMode::Fixed => ex.tape.bce(z, &targets.gb)?,
            PosWeightMode::AutoBalance => ex.tape.weighted_bce(z, &targets.gb)?,
        };
        let b2 = ex.tape.dice(z, &targets.gb, cfg.dice_smooth)?;
        let pair = ex.tape.sum_scalars(&[(b1, w.bnd_bce), (b2, w.bnd_dice)])?;
        terms.push((pair, 1.0));
        (Some(b1), Some(b2))
    } else {
        (None, None)
    };
    let con = if branches.con {
        let z = out.con.ok_or_else(|| Error::MissingSlot("contraction logits".into()))?;
        let c = ex.tape.dice(z, &targets.gc, cfg.dice_smooth)?;
        terms.push((c, w.con));
        Some(c)
    } else {
        None
    };
    let exp = if branches.exp {
        let z = out.exp.ok_or_else(|| Error::MissingSlot("expansion logits".into()))?;
        let e = ex.tape.dice(z, &targets.ge, cfg.dice_smooth)?;
        terms.push((e, w.exp));
        Some(e)
    } else {
        None
    };
    let total = ex.tape.sum_scalars(&terms)?;
    Ok(TapeLoss { seg, bnd_bce, bnd_dice, con, exp, total })
}

fn loss_values(ex: &TapeExec<'_>, l: &TapeLoss) -> LossBreakdown {
    let v = |id: Option<ValueId>| id.map(|i| ex.tape.value(i)[0]).unwrap_or(0.0);
    LossBreakdown {
        seg: ex.tape.value(l.seg)[0],
        bnd_bce: v(l.bnd_bce),
        bnd_dice: v(l.bnd_dice),
        con: v(l.con),
        exp: v(l.exp),
        total: ex.tape.value(l.total)[0],
    }
}

/// SGD settings. The default learning rate starts from the reference 0.02
/// and is scaled down for single-sample steps; the exact value was picked by
/// a convergence study on the synthetic corpus (overlap terms train in a
/// narrow window: much lower stalls them, much higher saturates wrong pixels
/// that their vanishing gradients never recover).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 0.0118, momentum: 0.9, weight_decay: 1e-4, total_steps: 800 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay)));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Step decay: x0.1 at 2/3 of the run and again at 8/9.
    pub fn lr_at(&self, step: usize) -> f64 {
        let m1 = self.total_steps * 2 / 3;
        let m2 = self.total_steps * 8 / 9;
        if step >= m2 {
            self.lr * 0.01
        } else if step >= m1 {
            self.lr * 0.1
        } else {
            self.lr
        }
    }
}

/// Trained parameters plus the per-step loss log.
#[derive(Clone, Debug)]
pub struct TrainResult {
    pub params: ModelParams,
    pub log: Vec<LossBreakdown>,
}

/// Differentiate one sample's training loss with respect to every parameter
/// in the configured graph. Slots the config keeps out of the graph are
/// absent from the result. The loss values equal [`losses::mask_loss`] on
/// the [`forward`] outputs bit for bit, so finite differences of that pure
/// path are a valid oracle for these gradients.
pub fn loss_gradients(
    sample: &Sample,
    params: &ModelParams,
    cfg: &BSMConfig,
    loss_cfg: &LossConfig,
) -> Result<(LossBreakdown, BTreeMap<String, (Vec<f64>, Vec<f64>)>)> {
    cfg.validate()?;
    params.validate(cfg)?;
    let mut ex = TapeExec::new(params);
    let image = ex.input(&sample.image);
    let (f_roi, low) = encode_graph(&mut ex, image, cfg)?;
    let out = squeeze_graph(&mut ex, f_roi, low, cfg)?;
    let loss = tape_loss(&mut ex, &out, &sample.targets, loss_cfg, &cfg.branches)?;
    let row = loss_values(&ex, &loss);
    ex.tape.backward(loss.total)?;
    let mut grads = BTreeMap::new();
    for (name, _) in params.slots() {
        if let Some((w, b)) = ex.slot_grads(name) {
            grads.insert(name.to_string(), (w.to_vec(), b.to_vec()));
        }
    }
    Ok((row, grads))
}

/// RNG stream reserved for the training loop's sample picks, distinct from
/// the parameter-init stream of the same seed.
const TRAIN_STREAM: u64 = u64::MAX;

/// Fit the model with momentum SGD: one uniformly drawn sample per step,
/// velocity update `v = momentum*v + grad + weight_decay*theta`, parameter
/// update `theta -= lr*v`. Deterministic for a fixed seed; aborts with
/// [`Error::Diverged`] if the loss ever leaves the finite range. Slots that
/// are not part of the configured graph are left untouched.
pub fn train(dataset: &[Sample], cfg: &BSMConfig, loss_cfg: &LossConfig, optim: &OptimConfig, seed: u64) -> Result<TrainResult> {
    cfg.validate()?;
    loss_cfg.validate()?;
    optim.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let g = cfg.target_grid();
    for (i, s) in dataset.iter().enumerate() {
        if s.image.shape() != (1, g, g) || s.targets.gs.height() != g || s.targets.gs.width() != g {
            return Err(Error::ShapeMismatch {
                expected: format!("1x{g}x{g} samples"),
                got: format!("sample {i}: image {:?}, mask {}x{}", s.image.shape(), s.targets.gs.height(), s.targets.gs.width()),
            });
        }
    }

    let mut params = ModelParams::init(cfg, seed)?;
    let mut velocity: Vec<(Vec<f64>, Vec<f64>)> = params
        .slots()
        .iter()
        .map(|(_, s)| (vec![0.0; s.weights.len()], vec![0.0; s.bias.len()]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TRAIN_STREAM);
    let mut log = Vec::with_capacity(optim.total_steps);

    for step in 0..optim.total_steps {
        let lr = optim.lr_at(step);
        let sample = &dataset[rng.gen_range(0..dataset.len())];

        let (row, grads) = loss_gradients(sample, &params, cfg, loss_cfg)?;
        if !row.total.is_finite() {
            return Err(Error::Diverged { step, loss: row.total });
        }

        for ((name, spec), vel) in params.slots_mut().into_iter().zip(velocity.iter_mut()) {
            let Some((gw, gb)) = grads.get(name) else { continue };
            let (vw, vb) = vel;
            for i in 0..spec.weights.len() {
                vw[i] = optim.momentum * vw[i] + (gw[i] + optim.weight_decay * spec.weights[i]);
                spec.weights[i] -= lr * vw[i];
            }
            for i in 0..spec.bias.len() {
                vb[i] = optim.momentum * vb[i] + (gb[i] + optim.weight_decay * spec.bias[i]);
                spec.bias[i] -= lr * vb[i];
            }
        }
        log.push(row);
    }

    params.validate(cfg)?;
    Ok(TrainResult { params, log })
}

/// Render a training log as CSV with one row per step.
pub fn training_log_csv(log: &[LossBreakdown]) -> String {
    let mut out = String::from("step,L_seg,L_bnd,L_con,L_exp,total\n");
    for (step, row) in log.iter().enumerate() {
        out.push_str(&format!("{},{},{},{},{},{}\n", step, row.seg, row.bnd(), row.con, row.exp, row.total));
    }
    out
}

/// What a persisted checkpoint contains besides the weight files.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub seed: u64,
    pub config: BSMConfig,
    pub slots: BTreeMap<String, SlotEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotEntry {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: String,
    pub bias: String,
}

const CHECKPOINT_MANIFEST: &str = "manifest.json";

/// Write a checkpoint: one pair of tensor files per slot plus a manifest
/// echoing the config and seed.
pub fn write_checkpoint(dir: impl AsRef<Path>, params: &ModelParams, cfg: &BSMConfig, seed: u64) -> Result<CheckpointManifest> {
    params.validate(cfg)?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut slots = BTreeMap::new();
    for (name, spec) in params.slots() {
        let weights = format!("{name}.w.bsqt");
        let bias = format!("{name}.b.bsqt");
        let wdims = [spec.out_channels, spec.in_channels, spec.kind.kernel_len()];
        formats::write_bsqt(dir.join(&weights), &wdims, &spec.weights, BsqtDtype::F64)?;
        formats::write_bsqt(dir.join(&bias), &[spec.out_channels], &spec.bias, BsqtDtype::F64)?;
        slots.insert(
            name.to_string(),
            SlotEntry {
                kind: spec.kind,
                in_channels: spec.in_channels,
                out_channels: spec.out_channels,
                weights,
                bias,
            },
        );
    }
    let manifest = CheckpointManifest { seed, config: cfg.clone(), slots };
    let text = serde_json::to_string_pretty(&manifest)?;
    let path = dir.join(CHECKPOINT_MANIFEST);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Load a checkpoint and verify it against its own config echo.
pub fn read_checkpoint(dir: impl AsRef<Path>) -> Result<(ModelParams, CheckpointManifest)> {
    let dir = dir.as_ref();
    let path = dir.join(CHECKPOINT_MANIFEST);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes)?;
    let params = ModelParams::from_slot_fn(|name| {
        let entry = manifest.slots.get(name).ok_or_else(|| Error::MissingSlot(name.into()))?;
        let (_, weights) = formats::read_bsqt(dir.join(&entry.weights))?;
        let (_, bias) = formats::read_bsqt(dir.join(&entry.bias))?;
        let spec = ConvSpec {
            kind: entry.kind,
            in_channels: entry.in_channels,
            out_channels: entry.out_channels,
            weights,
            bias,
        };
        spec.validate()?;
        Ok(spec)
    })?;
    params.validate(&manifest.config)?;
    Ok((params, manifest))
}

/// Thresholded prediction plus every auxiliary raster the model produces.
#[derive(Clone, Debug)]
pub struct InferOutput {
    pub mask: BinaryMask,
    pub seg_prob: FeatureField,
    pub bnd_prob: Option<FeatureField>,
    pub con_prob: Option<FeatureField>,
    pub exp_prob: Option<FeatureField>,
    pub con_flow: Option<FlowField>,
    pub exp_flow: Option<FlowField>,
    /// The assembled boundary feature, kept for visualization.
    pub boundary_feat: Option<FeatureField>,
}

fn prob_field(logits: &FeatureField) -> FeatureField {
    let (c, h, w) = logits.shape();
    FeatureField::from_fn(c, h, w, |ch, y, x| losses::sigmoid(logits.get(ch, y, x)))
}

/// Predict on one image. A pixel is foreground iff its sigmoid probability
/// strictly exceeds 0.5, so an exactly-zero logit lands in the background.
pub fn infer(image: &FeatureField, params: &ModelParams, cfg: &BSMConfig) -> Result<InferOutput> {
    let out = forward(image, params, cfg)?;
    let seg_prob = prob_field(&out.seg_logits);
    let (_, h, w) = seg_prob.shape();
    let mask = BinaryMask::from_fn(h, w, |y, x| seg_prob.get(0, y, x) > 0.5);
    Ok(InferOutput {
        mask,
        seg_prob,
        bnd_prob: out.bnd_logits.as_ref().map(prob_field),
        con_prob: out.con_logits.as_ref().map(prob_field),
        exp_prob: out.exp_logits.as_ref().map(prob_field),
        con_flow: out.con_flow,
        exp_flow: out.exp_flow,
        boundary_feat: out.boundary_feat,
    })
}

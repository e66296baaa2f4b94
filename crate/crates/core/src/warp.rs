//! Flow fields and differentiable bilinear warping, plus the squeezed-feature
//! generator that couples them: a 3x3 convolution over concatenated features
//! predicts a 2-channel flow, and the flow resamples the first feature.
//!
//! Flow units are pixels of the current grid: output position `p` samples the
//! input at `p + flow(p)`. Samples outside the grid contribute zero and
//! receive zero gradient; an exactly integral sample position copies, so a
//! zero flow is a bitwise identity. At bilinear kinks (integer positions) the
//! right-continuous subgradient is used.

use crate::error::{Error, Result};
use crate::field::{ConvKind, ConvSpec, FeatureField};
use crate::kernels;

/// Per-pixel displacement field, in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField { height, width, dx: vec![0.0; height * width], dy: vec![0.0; height * width] }
    }

    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        FlowField { height, width, dx: vec![dx; height * width], dy: vec![dy; height * width] }
    }

    pub fn from_components(height: usize, width: usize, dx: Vec<f64>, dy: Vec<f64>) -> Result<Self> {
        if dx.len() != height * width || dy.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{} flow components per axis", height * width),
                got: format!("dx {}, dy {}", dx.len(), dy.len()),
            });
        }
        let flow = FlowField { height, width, dx, dy };
        if !flow.dx.iter().chain(&flow.dy).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("flow field".into()));
        }
        Ok(flow)
    }

    /// Reinterpret a 2-channel field as a flow: channel 0 is dx, channel 1 dy.
    pub fn from_feature_field(f: &FeatureField) -> Result<Self> {
        if f.channels() != 2 {
            return Err(Error::ChannelMismatch { expected: 2, got: f.channels() });
        }
        let plane = f.height() * f.width();
        FlowField::from_components(f.height(), f.width(), f.values()[..plane].to_vec(), f.values()[plane..].to_vec())
    }

    pub fn to_feature_field(&self) -> FeatureField {
        let mut values = Vec::with_capacity(2 * self.dx.len());
        values.extend_from_slice(&self.dx);
        values.extend_from_slice(&self.dy);
        FeatureField::from_vec(2, self.height, self.width, values).expect("component lengths are checked")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn dy(&self) -> &[f64] {
        &self.dy
    }
}

/// Resample `input` at `p + flow(p)` with bilinear weights over the four
/// nearest lattice neighbors.
pub fn bilinear_warp(input: &FeatureField, flow: &FlowField) -> Result<FeatureField> {
    if input.height() != flow.height() || input.width() != flow.width() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{} flow", input.height(), input.width()),
            got: format!("{}x{}", flow.height(), flow.width()),
        });
    }
    let (c, h, w) = input.shape();
    let mut out = vec![0.0; c * h * w];
    kernels::warp_fwd(input.values(), c, h, w, &flow.dx, &flow.dy, &mut out);
    FeatureField::from_vec(c, h, w, out)
}

/// Parameters of one squeezed-feature generator: a single 3x3 convolution
/// producing a 2-channel flow.
#[derive(Clone, Debug)]
pub struct SfgSpec {
    pub flow_conv: ConvSpec,
}

impl SfgSpec {
    pub fn new(flow_conv: ConvSpec) -> Result<Self> {
        if flow_conv.kind != ConvKind::Conv3x3 {
            return Err(Error::Config(format!("flow conv must be 3x3, got {}", flow_conv.kind.name())));
        }
        if flow_conv.out_channels != 2 {
            return Err(Error::ChannelMismatch { expected: 2, got: flow_conv.out_channels });
        }
        Ok(SfgSpec { flow_conv })
    }

    /// Zero-initialized generator: starts as the identity warp.
    pub fn identity(feat_channels: usize) -> Self {
        SfgSpec { flow_conv: ConvSpec::zeros(ConvKind::Conv3x3, 2 * feat_channels, 2) }
    }
}

/// Predict a flow from `concat(f_sum_prime, f_roi)` and warp `f_sum_prime` by
/// it. Returns the warped feature together with the flow that produced it.
pub fn sfg(f_sum_prime: &FeatureField, f_roi: &FeatureField, spec: &SfgSpec) -> Result<(FeatureField, FlowField)> {
    let joint = crate::field::concat_channels(f_sum_prime, f_roi)?;
    if spec.flow_conv.in_channels != joint.channels() {
        return Err(Error::ChannelMismatch { expected: joint.channels(), got: spec.flow_conv.in_channels });
    }
    let flow_raw = crate::field::conv_forward(&joint, &spec.flow_conv)?;
    let flow = FlowField::from_feature_field(&flow_raw)?;
    let warped = bilinear_warp(f_sum_prime, &flow)?;
    Ok((warped, flow))
}

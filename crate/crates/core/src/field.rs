//! Dense feature fields and the convolutional layer set.
//!
//! A [`FeatureField`] is a rank-3 real field (channels x height x width) stored
//! row-major: channel-major, then row, then column. All layers in this crate
//! operate on these fields in f64. The pure functions here are the inference
//! path; the recording counterparts live on [`crate::autodiff::Tape`].

use crate::error::{Error, Result};
use crate::kernels;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense rank-3 field of f64 values with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureField {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl FeatureField {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureField {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
            grad: None,
        }
    }

    /// Build from a flat row-major buffer. Length must be `c * h * w`.
    pub fn from_vec(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values ({channels}x{height}x{width})", channels * height * width),
                got: format!("{} values", values.len()),
            });
        }
        Ok(FeatureField { channels, height, width, values, grad: None })
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    values.push(f(c, y, x));
                }
            }
        }
        FeatureField { channels, height, width, values, grad: None }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.values[i] = v;
    }

    /// Accumulated gradient, populated by [`crate::autodiff::Tape::extract_grad`].
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} grad values", self.values.len()),
                got: format!("{}", grad.len()),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &FeatureField) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn shape_err(&self, other: &FeatureField) -> Error {
        Error::ShapeMismatch {
            expected: format!("{:?}", self.shape()),
            got: format!("{:?}", other.shape()),
        }
    }
}

/// Kernel geometry of a convolutional layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ConvKind {
    /// 1x1 convolution, shape preserving.
    Conv1x1,
    /// 3x3 convolution, stride 1, zero padding 1, shape preserving.
    Conv3x3,
    /// Transposed 2x2 convolution with stride 2; doubles H and W.
    Deconv2x2,
}

impl ConvKind {
    /// Number of taps in the kernel window.
    pub fn kernel_len(self) -> usize {
        match self {
            ConvKind::Conv1x1 => 1,
            ConvKind::Conv3x3 => 9,
            ConvKind::Deconv2x2 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ConvKind::Conv1x1 => "conv1x1",
            ConvKind::Conv3x3 => "conv3x3",
            ConvKind::Deconv2x2 => "deconv2x2",
        }
    }
}

/// Weights and bias of one convolutional layer.
///
/// Weight layout is `[out][in][ky][kx]` row-major for every kind; bias is
/// `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvSpec {
    pub fn zeros(kind: ConvKind, in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            kind,
            in_channels,
            out_channels,
            weights: vec![0.0; out_channels * in_channels * kind.kernel_len()],
            bias: vec![0.0; out_channels],
        }
    }

    /// Kaiming-style init: weights ~ N(0, sqrt(2 / fan_in)), zero bias.
    pub fn kaiming(kind: ConvKind, in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (in_channels * kind.kernel_len()) as f64;
        let stddev = (2.0 / fan_in).sqrt();
        let normal = Normal::new(0.0, stddev).expect("finite stddev");
        let mut spec = ConvSpec::zeros(kind, in_channels, out_channels);
        for w in spec.weights.iter_mut() {
            *w = normal.sample(rng);
        }
        spec
    }

    /// 1x1 layer with an identity channel map and zero bias.
    pub fn identity_1x1(channels: usize) -> Self {
        let mut spec = ConvSpec::zeros(ConvKind::Conv1x1, channels, channels);
        for c in 0..channels {
            spec.weights[c * channels + c] = 1.0;
        }
        spec
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kind.kernel_len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.weight_len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} weights for {}", self.weight_len(), self.kind.name()),
                got: format!("{}", self.weights.len()),
            });
        }
        if self.bias.len() != self.out_channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} bias values", self.out_channels),
                got: format!("{}", self.bias.len()),
            });
        }
        if !self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("{} weights", self.kind.name())));
        }
        Ok(())
    }

    /// Output spatial shape for an input of `h x w`.
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        match self.kind {
            ConvKind::Conv1x1 | ConvKind::Conv3x3 => (h, w),
            ConvKind::Deconv2x2 => (2 * h, 2 * w),
        }
    }
}

/// Apply a convolutional layer. 1x1 and 3x3 preserve H x W; deconv doubles them.
pub fn conv_forward(input: &FeatureField, spec: &ConvSpec) -> Result<FeatureField> {
    spec.validate()?;
    if input.channels() != spec.in_channels {
        return Err(Error::ChannelMismatch { expected: spec.in_channels, got: input.channels() });
    }
    let (h, w) = (input.height(), input.width());
    let (oh, ow) = spec.out_hw(h, w);
    let mut out = vec![0.0; spec.out_channels * oh * ow];
    kernels::conv_fwd(spec.kind, input.values(), spec.in_channels, h, w, &spec.weights, &spec.bias, spec.out_channels, &mut out);
    FeatureField::from_vec(spec.out_channels, oh, ow, out)
}

/// Elementwise max(0, x).
pub fn relu_forward(input: &FeatureField) -> FeatureField {
    let mut out = input.values().to_vec();
    kernels::relu_fwd(&mut out);
    FeatureField::from_vec(input.channels(), input.height(), input.width(), out).expect("same shape")
}

/// Elementwise sum of two identically shaped fields.
pub fn add(a: &FeatureField, b: &FeatureField) -> Result<FeatureField> {
    if !a.same_shape(b) {
        return Err(a.shape_err(b));
    }
    let values = a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect();
    FeatureField::from_vec(a.channels(), a.height(), a.width(), values)
}

/// Stack `a`'s channels before `b`'s. Spatial shapes must match.
pub fn concat_channels(a: &FeatureField, b: &FeatureField) -> Result<FeatureField> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::ShapeMismatch {
            expected: format!("spatial {}x{}", a.height(), a.width()),
            got: format!("spatial {}x{}", b.height(), b.width()),
        });
    }
    let mut values = Vec::with_capacity(a.len() + b.len());
    values.extend_from_slice(a.values());
    values.extend_from_slice(b.values());
    FeatureField::from_vec(a.channels() + b.channels(), a.height(), a.width(), values)
}

/// Split a concatenated field back into its first `front` channels and the rest.
pub fn split_channels(x: &FeatureField, front: usize) -> Result<(FeatureField, FeatureField)> {
    if front > x.channels() {
        return Err(Error::ChannelMismatch { expected: front, got: x.channels() });
    }
    let plane = x.height() * x.width();
    let a = x.values()[..front * plane].to_vec();
    let b = x.values()[front * plane..].to_vec();
    Ok((
        FeatureField::from_vec(front, x.height(), x.width(), a)?,
        FeatureField::from_vec(x.channels() - front, x.height(), x.width(), b)?,
    ))
}

/// 2x2 average pooling with stride 2. H and W must be even.
pub fn avg_pool2(input: &FeatureField) -> Result<FeatureField> {
    let (c, h, w) = input.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch {
            expected: "even H and W for 2x2 pooling".into(),
            got: format!("{h}x{w}"),
        });
    }
    let mut out = vec![0.0; c * (h / 2) * (w / 2)];
    kernels::avg_pool2_fwd(input.values(), c, h, w, &mut out);
    FeatureField::from_vec(c, h / 2, w / 2, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(c: usize, h: usize, w: usize) -> FeatureField {
        FeatureField::from_fn(c, h, w, |ci, y, x| (ci * h * w + y * w + x) as f64)
    }

    #[test]
    fn identity_1x1_preserves_input() {
        let x = ramp(3, 4, 5);
        let spec = ConvSpec::identity_1x1(3);
        let y = conv_forward(&x, &spec).unwrap();
        assert_eq!(x.values(), y.values());
    }

    #[test]
    fn zero_weights_yield_constant_bias_field() {
        let x = ramp(2, 5, 5);
        let mut spec = ConvSpec::zeros(ConvKind::Conv3x3, 2, 3);
        spec.bias = vec![1.5, -2.0, 0.25];
        let y = conv_forward(&x, &spec).unwrap();
        for c in 0..3 {
            for y_ in 0..5 {
                for x_ in 0..5 {
                    assert_eq!(y.get(c, y_, x_), spec.bias[c]);
                }
            }
        }
    }

    #[test]
    fn conv3x3_matches_nested_loop_oracle() {
        let x = ramp(1, 5, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = ConvSpec::kaiming(ConvKind::Conv3x3, 1, 1, &mut rng);
        let y = conv_forward(&x, &spec).unwrap();
        // Direct 9-term dot product with zero padding at borders.
        for oy in 0..5usize {
            for ox in 0..5usize {
                let mut acc = spec.bias[0];
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let iy = oy as isize + ky as isize - 1;
                        let ix = ox as isize + kx as isize - 1;
                        if iy < 0 || iy >= 5 || ix < 0 || ix >= 5 {
                            continue;
                        }
                        acc += x.get(0, iy as usize, ix as usize) * spec.weights[ky * 3 + kx];
                    }
                }
                assert!((y.get(0, oy, ox) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_is_linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = ConvSpec::kaiming(ConvKind::Conv3x3, 2, 2, &mut rng);
        let mut zero_bias = spec.clone();
        zero_bias.bias = vec![0.0; 2];
        let x = FeatureField::from_fn(2, 6, 6, |_, _, _| rng.gen_range(-1.0..1.0));
        let y = FeatureField::from_fn(2, 6, 6, |_, _, _| rng.gen_range(-1.0..1.0));
        let (alpha, beta) = (0.7, -1.3);
        let mix = FeatureField::from_fn(2, 6, 6, |c, i, j| alpha * x.get(c, i, j) + beta * y.get(c, i, j));
        let lhs = conv_forward(&mix, &zero_bias).unwrap();
        let fx = conv_forward(&x, &zero_bias).unwrap();
        let fy = conv_forward(&y, &zero_bias).unwrap();
        for i in 0..lhs.len() {
            let rhs = alpha * fx.values()[i] + beta * fy.values()[i];
            assert!((lhs.values()[i] - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn deconv_doubles_spatial_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ConvSpec::kaiming(ConvKind::Deconv2x2, 3, 2, &mut rng);
        let x = ramp(3, 4, 6);
        let y = conv_forward(&x, &spec).unwrap();
        assert_eq!(y.shape(), (2, 8, 12));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = ramp(2, 4, 4);
        let spec = ConvSpec::zeros(ConvKind::Conv1x1, 3, 3);
        assert!(matches!(conv_forward(&x, &spec), Err(Error::ChannelMismatch { expected: 3, got: 2 })));
    }

    #[test]
    fn non_finite_weights_are_an_error() {
        let x = ramp(1, 4, 4);
        let mut spec = ConvSpec::zeros(ConvKind::Conv3x3, 1, 1);
        spec.weights[4] = f64::NAN;
        assert!(matches!(conv_forward(&x, &spec), Err(Error::NonFinite(_))));
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = FeatureField::from_vec(1, 1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.values(), &[0.0, 0.0, 2.0]);
        let all_neg = FeatureField::from_vec(1, 1, 3, vec![-5.0, -0.1, -2.0]).unwrap();
        assert!(relu_forward(&all_neg).values().iter().all(|&v| v == 0.0));
        let all_pos = FeatureField::from_vec(1, 1, 3, vec![5.0, 0.1, 2.0]).unwrap();
        assert_eq!(relu_forward(&all_pos).values(), all_pos.values());
    }

    #[test]
    fn add_and_negate_cancel() {
        let a = ramp(2, 3, 3);
        let zero = FeatureField::zeros(2, 3, 3);
        assert_eq!(add(&a, &zero).unwrap().values(), a.values());
        let neg = FeatureField::from_fn(2, 3, 3, |c, y, x| -a.get(c, y, x));
        assert!(add(&a, &neg).unwrap().values().iter().all(|&v| v == 0.0));
        let b = ramp(2, 4, 3);
        assert!(add(&a, &b).is_err());
    }

    #[test]
    fn concat_then_split_round_trips() {
        let a = ramp(2, 3, 4);
        let b = FeatureField::from_fn(3, 3, 4, |c, y, x| -((c + y + x) as f64));
        let cat = concat_channels(&a, &b).unwrap();
        assert_eq!(cat.channels(), 5);
        let (a2, b2) = split_channels(&cat, 2).unwrap();
        assert_eq!(a2.values(), a.values());
        assert_eq!(b2.values(), b.values());
    }

    #[test]
    fn concat_with_empty_field_is_identity() {
        let a = ramp(2, 3, 3);
        let empty = FeatureField::zeros(0, 3, 3);
        let cat = concat_channels(&a, &empty).unwrap();
        assert_eq!(cat.channels(), 2);
        assert_eq!(cat.values(), a.values());
    }

    #[test]
    fn avg_pool_halves_and_averages() {
        let x = FeatureField::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = avg_pool2(&x).unwrap();
        assert_eq!(y.shape(), (1, 1, 1));
        assert_eq!(y.values()[0], 2.5);
        assert!(avg_pool2(&ramp(1, 3, 4)).is_err());
    }
}

//! Dense numeric kernels for running the feature trunks.
//!
//! Everything here works on [`Tensor3`], a `C x H x W` block of `f32`
//! stored channel-major. The kernel set is deliberately small: convolution
//! with zero padding, ReLU, max pooling, channel concatenation, and the
//! input/feature normalizations used by the metrics.

use rayon::prelude::*;
use thiserror::Error;

use crate::image::Image;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {channels}x{height}x{width}")]
    DataLength {
        len: usize,
        channels: usize,
        height: usize,
        width: usize,
    },
    #[error("channel mismatch: input has {input} channels, kernels expect {kernels}")]
    ChannelMismatch { input: usize, kernels: usize },
    #[error("bias length {bias} does not match {out} output channels")]
    BiasMismatch { bias: usize, out: usize },
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("kernel {kh}x{kw} with padding {padding} does not fit input {height}x{width}")]
    KernelTooLarge {
        kh: usize,
        kw: usize,
        padding: usize,
        height: usize,
        width: usize,
    },
    #[error("spatial mismatch for concat: {left_h}x{left_w} vs {right_h}x{right_w}")]
    SpatialMismatch {
        left_h: usize,
        left_w: usize,
        right_h: usize,
        right_w: usize,
    },
    #[error("nothing to concatenate")]
    EmptyConcat,
}

/// A `channels x height x width` block of single-precision values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self, TensorError> {
        if data.len() != channels * height * width {
            return Err(TensorError::DataLength {
                len: data.len(),
                channels,
                height,
                width,
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for h in 0..height {
                for w in 0..width {
                    data.push(f(c, h, w));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
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

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> f32 {
        self.data[(c * self.height + h) * self.width + w]
    }

    /// The `H x W` plane of one channel, row-major.
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Convolution kernels laid out `out x in x kh x kw`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernels {
    out_channels: usize,
    in_channels: usize,
    kh: usize,
    kw: usize,
    data: Vec<f32>,
}

impl Kernels {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        data: Vec<f32>,
    ) -> Result<Self, TensorError> {
        if data.len() != out_channels * in_channels * kh * kw {
            return Err(TensorError::DataLength {
                len: data.len(),
                channels: out_channels * in_channels,
                height: kh,
                width: kw,
            });
        }
        Ok(Self {
            out_channels,
            in_channels,
            kh,
            kw,
            data,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, o: usize, i: usize, y: usize, x: usize) -> f32 {
        self.data[((o * self.in_channels + i) * self.kh + y) * self.kw + x]
    }
}

/// Output length along one axis for a sliding window, floor convention.
pub fn conv_output_len(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Cross-correlation with zero padding.
///
/// Each output element is accumulated in `f64` in a fixed order (input
/// channel, then kernel row, then kernel column), so results do not depend
/// on how output channels are scheduled across threads.
pub fn conv2d(
    input: &Tensor3,
    kernels: &Kernels,
    bias: &[f32],
    stride: usize,
    padding: usize,
) -> Result<Tensor3, TensorError> {
    if input.channels != kernels.in_channels {
        return Err(TensorError::ChannelMismatch {
            input: input.channels,
            kernels: kernels.in_channels,
        });
    }
    if bias.len() != kernels.out_channels {
        return Err(TensorError::BiasMismatch {
            bias: bias.len(),
            out: kernels.out_channels,
        });
    }
    if stride == 0 {
        return Err(TensorError::ZeroStride);
    }
    let too_large = || TensorError::KernelTooLarge {
        kh: kernels.kh,
        kw: kernels.kw,
        padding,
        height: input.height,
        width: input.width,
    };
    let out_h = conv_output_len(input.height, kernels.kh, stride, padding).ok_or_else(too_large)?;
    let out_w = conv_output_len(input.width, kernels.kw, stride, padding).ok_or_else(too_large)?;

    let cols = im2col(input, kernels.kh, kernels.kw, stride, padding, out_h, out_w);
    let plane = out_h * out_w;
    let taps = kernels.in_channels * kernels.kh * kernels.kw;

    let mut data = vec![0.0f32; kernels.out_channels * plane];
    data.par_chunks_mut(plane).enumerate().for_each_init(
        || vec![0.0f64; plane],
        |acc, (o, out)| {
            acc.iter_mut().for_each(|a| *a = 0.0);
            accumulate(acc, &kernels.data[o * taps..(o + 1) * taps], &cols);
            let b = f64::from(bias[o]);
            for (dst, &a) in out.iter_mut().zip(acc.iter()) {
                *dst = (a + b) as f32;
            }
        },
    );

    Tensor3::new(kernels.out_channels, out_h, out_w, data)
}

/// `acc += Σ_k weights[k] * cols[k]` over the rows of `cols`, in ascending
/// `k`, rounding each product and sum separately.
fn accumulate(acc: &mut [f64], weights: &[f32], cols: &[f32]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the required CPU feature was detected at runtime.
            unsafe { accumulate_avx2(acc, weights, cols) };
            return;
        }
    }
    accumulate_portable(acc, weights, cols);
}

#[inline(always)]
fn accumulate_portable(acc: &mut [f64], weights: &[f32], cols: &[f32]) {
    let plane = acc.len();
    for (k, &wk) in weights.iter().enumerate() {
        if wk == 0.0 {
            continue;
        }
        let wk = f64::from(wk);
        for (a, &v) in acc.iter_mut().zip(&cols[k * plane..(k + 1) * plane]) {
            *a += wk * f64::from(v);
        }
    }
}

// Same arithmetic as the portable loop (no fused multiply-add), just wider
// vectors, so results are bit-identical.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn accumulate_avx2(acc: &mut [f64], weights: &[f32], cols: &[f32]) {
    accumulate_portable(acc, weights, cols);
}

/// Unrolls every receptive field into a `(in*kh*kw) x (out_h*out_w)` matrix,
/// zero where the window reaches into padding.
fn im2col(
    input: &Tensor3,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    let plane = out_h * out_w;
    let mut cols = vec![0.0f32; input.channels * kh * kw * plane];
    let (h, w) = (input.height as isize, input.width as isize);
    let pad = padding as isize;
    for c in 0..input.channels {
        let src = input.channel(c);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * plane;
                let dst = &mut cols[row..row + plane];
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let src_row = &src[iy as usize * input.width..(iy as usize + 1) * input.width];
                    let dst_row = &mut dst[oy * out_w..(oy + 1) * out_w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad;
                        if ix >= 0 && ix < w {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub fn relu(input: &Tensor3) -> Tensor3 {
    input.map(|v| v.max(0.0))
}

/// How the last partial window of a pooling layer is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolRounding {
    /// Drop windows that would extend past the input.
    #[default]
    Floor,
    /// Keep a final partial window as long as it starts inside the input.
    Ceil,
}

pub fn pool_output_len(
    input: usize,
    kernel: usize,
    stride: usize,
    rounding: PoolRounding,
) -> Option<usize> {
    if stride == 0 || kernel == 0 || kernel > input {
        return None;
    }
    let span = input - kernel;
    Some(match rounding {
        PoolRounding::Floor => span / stride + 1,
        PoolRounding::Ceil => {
            let mut n = span.div_ceil(stride) + 1;
            // the last window has to start inside the input
            if (n - 1) * stride >= input {
                n -= 1;
            }
            n
        }
    })
}

/// Channel-wise max pooling with the floor output-size convention.
pub fn maxpool2d(input: &Tensor3, kernel: usize, stride: usize) -> Result<Tensor3, TensorError> {
    maxpool2d_with(input, kernel, stride, PoolRounding::Floor)
}

pub fn maxpool2d_with(
    input: &Tensor3,
    kernel: usize,
    stride: usize,
    rounding: PoolRounding,
) -> Result<Tensor3, TensorError> {
    if stride == 0 {
        return Err(TensorError::ZeroStride);
    }
    let too_large = || TensorError::KernelTooLarge {
        kh: kernel,
        kw: kernel,
        padding: 0,
        height: input.height,
        width: input.width,
    };
    let out_h = pool_output_len(input.height, kernel, stride, rounding).ok_or_else(too_large)?;
    let out_w = pool_output_len(input.width, kernel, stride, rounding).ok_or_else(too_large)?;
    let mut data = Vec::with_capacity(input.channels * out_h * out_w);
    for c in 0..input.channels {
        let src = input.channel(c);
        for oy in 0..out_h {
            let y0 = oy * stride;
            let y1 = (y0 + kernel).min(input.height);
            for ox in 0..out_w {
                let x0 = ox * stride;
                let x1 = (x0 + kernel).min(input.width);
                let mut m = f32::NEG_INFINITY;
                for y in y0..y1 {
                    for &v in &src[y * input.width + x0..y * input.width + x1] {
                        m = m.max(v);
                    }
                }
                data.push(m);
            }
        }
    }
    Tensor3::new(input.channels, out_h, out_w, data)
}

/// Stacks tensors along the channel axis.
pub fn concat_channels(parts: &[Tensor3]) -> Result<Tensor3, TensorError> {
    let first = parts.first().ok_or(TensorError::EmptyConcat)?;
    let mut channels = 0;
    for p in parts {
        if p.height != first.height || p.width != first.width {
            return Err(TensorError::SpatialMismatch {
                left_h: first.height,
                left_w: first.width,
                right_h: p.height,
                right_w: p.width,
            });
        }
        channels += p.channels;
    }
    let mut data = Vec::with_capacity(channels * first.height * first.width);
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    Tensor3::new(channels, first.height, first.width, data)
}

/// Per-channel affine input scaling `v -> (2v - 1 - shift[c]) / scale[c]`.
///
/// The constants come from the weight container.
pub fn normalize_input(image: &Image, shift: [f32; 3], scale: [f32; 3]) -> Tensor3 {
    let (h, w) = (image.height(), image.width());
    Tensor3::from_fn(3, h, w, |c, y, x| {
        (2.0 * image.get(x, y)[c] - 1.0 - shift[c]) / scale[c]
    })
}

pub const DEFAULT_UNIT_EPSILON: f32 = 1e-10;

/// Divides the channel vector at every spatial position by its Euclidean
/// length plus `epsilon`.
pub fn channel_unit_normalize(t: &Tensor3, epsilon: f32) -> Tensor3 {
    let plane = t.height * t.width;
    let mut norms = vec![0.0f64; plane];
    for c in 0..t.channels {
        for (n, &v) in norms.iter_mut().zip(t.channel(c)) {
            *n += f64::from(v) * f64::from(v);
        }
    }
    let denom: Vec<f64> = norms
        .iter()
        .map(|&n| n.sqrt() + f64::from(epsilon))
        .collect();
    let mut data = Vec::with_capacity(t.data.len());
    for c in 0..t.channels {
        data.extend(
            t.channel(c)
                .iter()
                .zip(&denom)
                .map(|(&v, &d)| (f64::from(v) / d) as f32),
        );
    }
    Tensor3 {
        channels: t.channels,
        height: t.height,
        width: t.width,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulate_paths_agree_bitwise() {
        let cols: Vec<f32> = (0..3000)
            .map(|i| ((i * 7919) % 1013) as f32 / 97.0 - 5.0)
            .collect();
        let weights = [0.3, 0.0, -1.7e-3, 12.5, 1.0e-7, -0.25];
        let mut a: Vec<f64> = (0..500).map(|i| f64::from(i as u32).sin()).collect();
        let mut b = a.clone();
        accumulate(&mut a, &weights, &cols);
        accumulate_portable(&mut b, &weights, &cols);
        assert_eq!(a, b);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let input = Tensor3::new(1, 3, 3, (0..9).map(|v| v as f32).collect()).unwrap();
        let k = Kernels::new(1, 1, 1, 1, vec![1.0]).unwrap();
        let out = conv2d(&input, &k, &[0.0], 1, 0).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn zero_input_yields_bias() {
        let input = Tensor3::zeros(2, 4, 5);
        let k = Kernels::new(3, 2, 3, 3, (0..54).map(|v| v as f32 * 0.1).collect()).unwrap();
        let out = conv2d(&input, &k, &[0.5, -1.0, 2.0], 1, 1).unwrap();
        for c in 0..3 {
            assert!(out.channel(c).iter().all(|&v| v == [0.5, -1.0, 2.0][c]));
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor3::zeros(2, 4, 4);
        let k = Kernels::new(1, 3, 1, 1, vec![1.0; 3]).unwrap();
        assert_eq!(
            conv2d(&input, &k, &[0.0], 1, 0),
            Err(TensorError::ChannelMismatch {
                input: 2,
                kernels: 3
            })
        );
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let input = Tensor3::zeros(1, 2, 2);
        let k = Kernels::new(1, 1, 3, 3, vec![1.0; 9]).unwrap();
        assert!(matches!(
            conv2d(&input, &k, &[0.0], 1, 0),
            Err(TensorError::KernelTooLarge { .. })
        ));
        // padding makes it fit
        assert_eq!(conv2d(&input, &k, &[0.0], 1, 1).unwrap().shape(), (1, 2, 2));
    }

    #[test]
    fn relu_sign_cases() {
        let t = Tensor3::new(1, 1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn maxpool_single_window() {
        let t = Tensor3::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2d(&t, 2, 2).unwrap().data(), &[4.0]);
    }

    #[test]
    fn maxpool_constant() {
        let t = Tensor3::filled(2, 7, 6, 0.25);
        let out = maxpool2d(&t, 3, 2).unwrap();
        assert_eq!(out.shape(), (2, 3, 2));
        assert!(out.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn maxpool_kernel_too_large() {
        let t = Tensor3::zeros(1, 2, 5);
        assert!(matches!(
            maxpool2d(&t, 3, 1),
            Err(TensorError::KernelTooLarge { .. })
        ));
    }

    #[test]
    fn ceil_rounding_keeps_partial_window() {
        assert_eq!(pool_output_len(24, 3, 2, PoolRounding::Floor), Some(11));
        assert_eq!(pool_output_len(24, 3, 2, PoolRounding::Ceil), Some(12));
        // identical when the span divides evenly
        assert_eq!(pool_output_len(47, 3, 2, PoolRounding::Ceil), Some(23));
        // a window starting past the end is dropped
        assert_eq!(pool_output_len(5, 1, 3, PoolRounding::Ceil), Some(2));

        let t = Tensor3::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f32);
        let out = maxpool2d_with(&t, 3, 2, PoolRounding::Ceil).unwrap();
        assert_eq!(out.data(), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn concat_stacks_channels() {
        let a = Tensor3::filled(1, 2, 2, 1.0);
        let b = Tensor3::filled(2, 2, 2, 2.0);
        let c = concat_channels(&[a, b]).unwrap();
        assert_eq!(c.shape(), (3, 2, 2));
        assert_eq!(c.channel(0), &[1.0; 4]);
        assert_eq!(c.channel(2), &[2.0; 4]);
        assert!(matches!(
            concat_channels(&[Tensor3::zeros(1, 2, 2), Tensor3::zeros(1, 3, 2)]),
            Err(TensorError::SpatialMismatch { .. })
        ));
    }

    #[test]
    fn normalize_input_midpoint_and_formula() {
        let img = Image::filled(2, 3, [0.5, 0.25, 1.0]);
        let t = normalize_input(&img, [0.0; 3], [1.0; 3]);
        assert_eq!(t.shape(), (3, 3, 2));
        assert_eq!(t.get(0, 1, 1), 0.0);

        let shift = [-0.030, -0.088, -0.188];
        let scale = [0.458, 0.448, 0.450];
        let t = normalize_input(&img, shift, scale);
        for (c, p) in [0.5f32, 0.25, 1.0].into_iter().enumerate() {
            let want = (2.0 * p - 1.0 - shift[c]) / scale[c];
            assert!((t.get(c, 2, 0) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_normalize_three_four_five() {
        let t = Tensor3::new(2, 1, 1, vec![3.0, 4.0]).unwrap();
        let n = channel_unit_normalize(&t, 1e-10);
        assert!((n.data()[0] - 0.6).abs() < 1e-6);
        assert!((n.data()[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn unit_normalize_zero_vector_stays_zero() {
        let t = Tensor3::zeros(4, 3, 3);
        let n = channel_unit_normalize(&t, DEFAULT_UNIT_EPSILON);
        assert!(n.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tensor_new_checks_length() {
        assert!(matches!(
            Tensor3::new(2, 2, 2, vec![0.0; 7]),
            Err(TensorError::DataLength { len: 7, .. })
        ));
    }
}

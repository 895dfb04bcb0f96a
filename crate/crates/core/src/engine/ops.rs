//! Layer kernels with their backward passes.
//!
//! Convolutions use "same" zero padding and stride 1 and are lowered to a
//! matrix product through an im2col buffer. Conv weights are stored as
//! `(out_channels, in_channels, k, k)` row-major; dense weights as
//! `(fan_in, units)`. Batch items are processed in index order and every
//! reduction runs in a fixed order, so results are bitwise reproducible.

use super::tensor::{matmul, Mat, Real, Tensor};
use super::EngineError;
use crate::arch_ir::Activation;

pub const BN_EPS: f64 = 1e-5;
/// Weight kept by the running statistics on each update.
pub const BN_RUNNING_MOMENTUM: f64 = 0.9;
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

fn im2col<T: Real>(x: &[T], channels: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for ci in 0..channels {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).clamp(0, w as isize) as usize;
                let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
                for y in 0..h {
                    let drow = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    drow[..x0].fill(T::zero());
                    drow[x1..].fill(T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    drow[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], channels: usize, h: usize, w: usize, k: usize, x: &mut [T]) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for ci in 0..channels {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).clamp(0, w as isize) as usize;
                let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (d, &s) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

/// `out = input * weight + bias` with same padding. `bias = None` skips
/// the bias add.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    shape: ConvShape,
) -> Result<Tensor<T>, EngineError> {
    if input.channels() != shape.in_channels {
        return Err(EngineError::ChannelMismatch {
            expected: shape.in_channels,
            found: input.channels(),
        });
    }
    if weight.len() != shape.weight_len() || bias.is_some_and(|b| b.len() != shape.out_channels) {
        return Err(EngineError::Shape(format!("conv parameters do not match {shape:?}")));
    }
    let [batch, cin, h, w] = input.shape();
    let hw = h * w;
    let mut out = Tensor::zeros([batch, shape.out_channels, h, w]);
    let mut cols = if shape.kernel == 1 {
        Vec::new()
    } else {
        vec![T::zero(); shape.col_rows() * hw]
    };
    for b in 0..batch {
        let x = input.item(b);
        let cols_ref: &[T] = if shape.kernel == 1 {
            x
        } else {
            im2col(x, cin, h, w, shape.kernel, &mut cols);
            &cols
        };
        let y = out.item_mut(b);
        matmul(
            Mat::new(weight, shape.out_channels, shape.col_rows()),
            Mat::new(cols_ref, shape.col_rows(), hw),
            y,
            T::zero(),
        );
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                for v in &mut y[co * hw..(co + 1) * hw] {
                    *v = *v + bv;
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
    shape: ConvShape,
    want_input_grad: bool,
) -> ConvGrads<T> {
    let [batch, cin, h, w] = input.shape();
    let hw = h * w;
    let rows = shape.col_rows();
    let mut dweight = vec![T::zero(); shape.weight_len()];
    let mut dbias = vec![T::zero(); shape.out_channels];
    let mut dinput = want_input_grad.then(|| Tensor::zeros(input.shape()));
    let mut cols = if shape.kernel == 1 {
        Vec::new()
    } else {
        vec![T::zero(); rows * hw]
    };
    let mut dcols = if shape.kernel == 1 || !want_input_grad {
        Vec::new()
    } else {
        vec![T::zero(); rows * hw]
    };
    for b in 0..batch {
        let x = input.item(b);
        let dy = grad_out.item(b);
        let cols_ref: &[T] = if shape.kernel == 1 {
            x
        } else {
            im2col(x, cin, h, w, shape.kernel, &mut cols);
            &cols
        };
        matmul(
            Mat::new(dy, shape.out_channels, hw),
            Mat::new(cols_ref, rows, hw).t(),
            &mut dweight,
            T::one(),
        );
        for (co, db) in dbias.iter_mut().enumerate() {
            *db = *db + dy[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
        }
        if let Some(dx) = dinput.as_mut() {
            let wmat = Mat::new(weight, shape.out_channels, rows).t();
            if shape.kernel == 1 {
                matmul(wmat, Mat::new(dy, shape.out_channels, hw), dx.item_mut(b), T::zero());
            } else {
                matmul(wmat, Mat::new(dy, shape.out_channels, hw), &mut dcols, T::zero());
                col2im(&dcols, cin, h, w, shape.kernel, dx.item_mut(b));
            }
        }
    }
    ConvGrads {
        input: dinput,
        weight: dweight,
        bias: dbias,
    }
}

/// Non-overlapping max pool. Returns the output and, per output element,
/// the flat in-item index of the winning input (first maximum on ties).
pub fn maxpool_forward<T: Real>(input: &Tensor<T>, window: usize) -> Result<(Tensor<T>, Vec<usize>), EngineError> {
    let [batch, c, h, w] = input.shape();
    if window == 0 || h < window || w < window {
        return Err(EngineError::Shape(format!(
            "{h}x{w} input is smaller than the {window}x{window} pool window"
        )));
    }
    let (oh, ow) = (h / window, w / window);
    let mut out = Tensor::zeros([batch, c, oh, ow]);
    let mut argmax = Vec::with_capacity(batch * c * oh * ow);
    for b in 0..batch {
        let x = input.item(b);
        let y = out.item_mut(b);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_i = ch * h * w + oy * window * w + ox * window;
                    let mut best = x[best_i];
                    for wy in 0..window {
                        for wx in 0..window {
                            let i = ch * h * w + (oy * window + wy) * w + ox * window + wx;
                            if x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    y[(ch * oh + oy) * ow + ox] = best;
                    argmax.push(best_i);
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool_backward<T: Real>(grad_out: &Tensor<T>, argmax: &[usize], input_shape: [usize; 4]) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let per_item = grad_out.item_len();
    for b in 0..grad_out.batch() {
        let dy = grad_out.item(b);
        let winners = &argmax[b * per_item..(b + 1) * per_item];
        let item = dx.item_mut(b);
        for (&g, &i) in dy.iter().zip(winners) {
            item[i] = item[i] + g;
        }
    }
    dx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// What the batch-norm backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
    /// Batch mean and unbiased variance (train mode only), for the running
    /// statistics update.
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Per-channel normalization over `(batch, height, width)` followed by
/// `scale * x + shift`. Train mode uses batch statistics (biased variance);
/// eval mode uses the running statistics.
pub fn batch_norm_forward<T: Real>(
    input: &Tensor<T>,
    scale: &[T],
    shift: &[T],
    running: Option<(&[T], &[T])>,
    mode: Mode,
) -> Result<(Tensor<T>, BnCache<T>), EngineError> {
    let [batch, c, h, w] = input.shape();
    let hw = h * w;
    let count = batch * hw;
    if scale.len() != c || shift.len() != c {
        return Err(EngineError::ChannelMismatch {
            expected: c,
            found: scale.len(),
        });
    }
    let mut mean = vec![0f64; c];
    let mut var = vec![0f64; c];
    let mut batch_var = vec![0f64; c];
    match mode {
        Mode::Train => {
            if count < 2 {
                return Err(EngineError::DegenerateBatch { count });
            }
            for ch in 0..c {
                let mut sum = 0f64;
                for b in 0..batch {
                    sum += input.item(b)[ch * hw..(ch + 1) * hw]
                        .iter()
                        .map(|v| v.as_f64())
                        .sum::<f64>();
                }
                let mu = sum / count as f64;
                let mut sq = 0f64;
                for b in 0..batch {
                    sq += input.item(b)[ch * hw..(ch + 1) * hw]
                        .iter()
                        .map(|v| (v.as_f64() - mu).powi(2))
                        .sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = sq / count as f64;
                batch_var[ch] = sq / (count - 1) as f64;
            }
        }
        Mode::Eval => {
            let (rm, rv) =
                running.ok_or_else(|| EngineError::Shape("eval batch norm needs running statistics".into()))?;
            for ch in 0..c {
                mean[ch] = rm[ch].as_f64();
                var[ch] = rv[ch].as_f64();
            }
        }
    }
    let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + BN_EPS).sqrt())).collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
    let mut normalized = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    for b in 0..batch {
        let x = input.item(b);
        let xn = normalized.item_mut(b);
        for ch in 0..c {
            for i in ch * hw..(ch + 1) * hw {
                xn[i] = (x[i] - mean_t[ch]) * inv_std[ch];
            }
        }
        let xn = normalized.item(b);
        let y = out.item_mut(b);
        for ch in 0..c {
            for i in ch * hw..(ch + 1) * hw {
                y[i] = scale[ch] * xn[i] + shift[ch];
            }
        }
    }
    let cache = BnCache {
        normalized,
        inv_std,
        mode,
        batch_mean: if mode == Mode::Train { mean } else { Vec::new() },
        batch_var: if mode == Mode::Train { batch_var } else { Vec::new() },
    };
    Ok((out, cache))
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub scale: Vec<T>,
    pub shift: Vec<T>,
}

pub fn batch_norm_backward<T: Real>(grad_out: &Tensor<T>, cache: &BnCache<T>, scale: &[T]) -> BnGrads<T> {
    let [batch, c, h, w] = grad_out.shape();
    let hw = h * w;
    let count = (batch * hw) as f64;
    let mut dscale = vec![0f64; c];
    let mut dshift = vec![0f64; c];
    for b in 0..batch {
        let dy = grad_out.item(b);
        let xn = cache.normalized.item(b);
        for ch in 0..c {
            for i in ch * hw..(ch + 1) * hw {
                dscale[ch] += (dy[i] * xn[i]).as_f64();
                dshift[ch] += dy[i].as_f64();
            }
        }
    }
    let mut dx = Tensor::zeros(grad_out.shape());
    for b in 0..batch {
        let dy = grad_out.item(b);
        let xn = cache.normalized.item(b);
        let out = dx.item_mut(b);
        for ch in 0..c {
            let g = scale[ch] * cache.inv_std[ch];
            match cache.mode {
                Mode::Train => {
                    let ms = T::of(dshift[ch] / count);
                    let mx = T::of(dscale[ch] / count);
                    for i in ch * hw..(ch + 1) * hw {
                        out[i] = g * (dy[i] - ms - xn[i] * mx);
                    }
                }
                Mode::Eval => {
                    for i in ch * hw..(ch + 1) * hw {
                        out[i] = g * dy[i];
                    }
                }
            }
        }
    }
    BnGrads {
        input: dx,
        scale: dscale.into_iter().map(T::of).collect(),
        shift: dshift.into_iter().map(T::of).collect(),
    }
}

/// `out = flatten(input) * weight + bias`; output shape `(batch, units, 1, 1)`.
pub fn dense_forward<T: Real>(
    input: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    units: usize,
) -> Result<Tensor<T>, EngineError> {
    let fan_in = input.item_len();
    if weight.len() != fan_in * units || bias.len() != units {
        return Err(EngineError::Shape(format!(
            "dense weights {} / bias {} do not fit fan_in {fan_in} x units {units}",
            weight.len(),
            bias.len()
        )));
    }
    let batch = input.batch();
    let mut out = Tensor::zeros([batch, units, 1, 1]);
    for b in 0..batch {
        let y = out.item_mut(b);
        y.copy_from_slice(bias);
    }
    matmul(
        Mat::new(input.data(), batch, fan_in),
        Mat::new(weight, fan_in, units),
        out.data_mut(),
        T::one(),
    );
    Ok(out)
}

pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn dense_backward<T: Real>(input: &Tensor<T>, weight: &[T], grad_out: &Tensor<T>) -> DenseGrads<T> {
    let batch = input.batch();
    let fan_in = input.item_len();
    let units = grad_out.item_len();
    let mut dweight = vec![T::zero(); fan_in * units];
    matmul(
        Mat::new(input.data(), batch, fan_in).t(),
        Mat::new(grad_out.data(), batch, units),
        &mut dweight,
        T::zero(),
    );
    let mut dbias = vec![T::zero(); units];
    for b in 0..batch {
        for (d, &g) in dbias.iter_mut().zip(grad_out.item(b)) {
            *d = *d + g;
        }
    }
    let mut dx = Tensor::zeros(input.shape());
    matmul(
        Mat::new(grad_out.data(), batch, units),
        Mat::new(weight, fan_in, units).t(),
        dx.data_mut(),
        T::zero(),
    );
    DenseGrads {
        input: dx,
        weight: dweight,
        bias: dbias,
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn activate<T: Real>(x: &mut Tensor<T>, act: Activation) {
    match act {
        Activation::Relu => x.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero())),
        Activation::Sigmoid => x.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v)),
        Activation::None => {}
    }
}

/// Turns `d(out)` into `d(pre-activation)` in place, given the activation's
/// output.
pub fn activation_backward<T: Real>(grad: &mut Tensor<T>, output: &Tensor<T>, act: Activation) {
    match act {
        Activation::Relu => {
            for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
                if y <= T::zero() {
                    *g = T::zero();
                }
            }
        }
        Activation::Sigmoid => {
            for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
                *g = *g * y * (T::one() - y);
            }
        }
        Activation::None => {}
    }
}

fn check_same<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(), EngineError> {
    if a.shape() != b.shape() {
        return Err(EngineError::Shape(format!(
            "prediction {:?} vs target {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy with predictions clamped to `[eps, 1 - eps]`.
pub fn bce_loss<T: Real>(prediction: &Tensor<T>, target: &Tensor<T>) -> Result<f64, EngineError> {
    check_same(prediction, target)?;
    let n = prediction.data().len() as f64;
    let total: f64 = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = p.as_f64().clamp(BCE_EPS, 1.0 - BCE_EPS);
            let t = t.as_f64();
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / n)
}

/// `dL/dp` of [`bce_loss`], evaluated at the clamped prediction.
pub fn bce_grad<T: Real>(prediction: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>, EngineError> {
    check_same(prediction, target)?;
    let n = prediction.data().len() as f64;
    let data = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = p.as_f64().clamp(BCE_EPS, 1.0 - BCE_EPS);
            let t = t.as_f64();
            T::of((p - t) / (p * (1.0 - p)) / n)
        })
        .collect();
    Ok(Tensor::from_vec(prediction.shape(), data))
}

/// Concatenates per-item blocks of each part, in order. Works for channel
/// concatenation of equal-sized maps and for flattened dense inputs alike.
pub fn concat<T: Real>(parts: &[&Tensor<T>], shape: [usize; 4]) -> Tensor<T> {
    if let [only] = parts {
        return (*only).clone().reshaped(shape);
    }
    let batch = shape[0];
    let mut data = Vec::with_capacity(shape.iter().product());
    for b in 0..batch {
        for p in parts {
            data.extend_from_slice(p.item(b));
        }
    }
    Tensor::from_vec(shape, data)
}

/// Inverse of [`concat`] for gradients: slices each item back into parts of
/// the given per-item lengths.
pub fn split<T: Real>(grad: &Tensor<T>, lens: &[usize]) -> Vec<Vec<T>> {
    let batch = grad.batch();
    let mut parts: Vec<Vec<T>> = lens.iter().map(|l| Vec::with_capacity(l * batch)).collect();
    for b in 0..batch {
        let item = grad.item(b);
        let mut offset = 0;
        for (part, &len) in parts.iter_mut().zip(lens) {
            part.extend_from_slice(&item[offset..offset + len]);
            offset += len;
        }
    }
    parts
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random([2, 1, 5, 4], &mut rng);
        let y = conv2d_forward(
            &x,
            &[1.0],
            Some(&[0.0]),
            ConvShape {
                in_channels: 1,
                out_channels: 1,
                kernel: 1,
            },
        )
        .unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_on_one_hot() {
        // Hot pixels at the centre and a corner.
        for (hy, hx) in [(2usize, 2usize), (0, 4)] {
            let mut x = Tensor::<f64>::zeros([1, 1, 5, 5]);
            x.data_mut()[hy * 5 + hx] = 1.0;
            let shape = ConvShape {
                in_channels: 1,
                out_channels: 1,
                kernel: 3,
            };
            let y = conv2d_forward(&x, &[1.0; 9], Some(&[0.0]), shape).unwrap();
            for yy in 0..5usize {
                for xx in 0..5usize {
                    let expect = if yy.abs_diff(hy) <= 1 && xx.abs_diff(hx) <= 1 {
                        1.0
                    } else {
                        0.0
                    };
                    assert_eq!(y.at(0, 0, yy, xx), expect, "({yy},{xx})");
                }
            }
        }
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random([2, 3, 4, 4], &mut rng);
        let shape = ConvShape {
            in_channels: 3,
            out_channels: 2,
            kernel: 3,
        };
        let y = conv2d_forward(&x, &vec![0.0; shape.weight_len()], Some(&[0.25, 0.25]), shape).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::<f32>::zeros([1, 2, 3, 3]);
        let shape = ConvShape {
            in_channels: 1,
            out_channels: 1,
            kernel: 1,
        };
        assert!(matches!(
            conv2d_forward(&x, &[1.0], None, shape),
            Err(EngineError::ChannelMismatch { expected: 1, found: 2 })
        ));
    }

    #[test]
    fn kernel_larger_than_image() {
        let mut x = Tensor::<f64>::zeros([1, 1, 1, 1]);
        x.data_mut()[0] = 2.0;
        let shape = ConvShape {
            in_channels: 1,
            out_channels: 1,
            kernel: 5,
        };
        let mut w = vec![0.0; 25];
        w[12] = 3.0;
        let y = conv2d_forward(&x, &w, None, shape).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn pooling_basics() {
        let x = Tensor::<f32>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let (y, arg) = maxpool_forward(&x, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let (same, _) = maxpool_forward(&x, 1).unwrap();
        assert_eq!(same, x);
        assert!(maxpool_forward(&x, 3).is_err());
    }

    #[test]
    fn pool_ties_route_to_first() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]);
        let (_, arg) = maxpool_forward(&x, 2).unwrap();
        let dx = maxpool_backward(&Tensor::from_vec([1, 1, 1, 1], vec![1.0]), &arg, x.shape());
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn batch_norm_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random([4, 3, 5, 5], &mut rng).map(|v| 3.0 * v + 1.5);
        let (y, _) = batch_norm_forward(&x, &[1.0; 3], &[0.0; 3], None, Mode::Train).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| y.item(b)[ch * 25..(ch + 1) * 25].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random([3, 2, 4, 4], &mut rng);
        let (xn, _) = batch_norm_forward(&x, &[1.0; 2], &[0.0; 2], None, Mode::Train).unwrap();
        let (y, _) = batch_norm_forward(&xn, &[2.0; 2], &[3.0; 2], None, Mode::Train).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| y.item(b)[ch * 16..(ch + 1) * 16].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!((mean - 3.0).abs() < 1e-9);
            assert!((std - 2.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batch_norm_degenerate_batch() {
        let x = Tensor::<f64>::zeros([1, 1, 1, 1]);
        assert!(matches!(
            batch_norm_forward(&x, &[1.0], &[0.0], None, Mode::Train),
            Err(EngineError::DegenerateBatch { count: 1 })
        ));
    }

    #[test]
    fn dense_basics() {
        let x = Tensor::<f64>::from_vec([1, 2, 1, 1], vec![3.0, 4.0]);
        let y = dense_forward(&x, &[1.0, 1.0], &[0.0], 1).unwrap();
        assert_eq!(y.data(), &[7.0]);
        let eye = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(dense_forward(&x, &eye, &[0.0, 0.0], 2).unwrap().data(), &[3.0, 4.0]);
        assert!(dense_forward(&x, &[1.0], &[0.0], 1).is_err());
    }

    #[test]
    fn bce_values() {
        let half = Tensor::<f64>::filled([1, 1, 3, 3], 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Tensor::from_vec([1, 1, 3, 3], (0..9).map(|_| rng.random_range(0..2) as f64).collect());
        assert!((bce_loss(&half, &t).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(&t, &t).unwrap() < 1e-6);
        assert!(bce_loss(&half, &Tensor::zeros([1, 1, 3, 2])).is_err());
    }

    #[test]
    fn concat_split_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random([2, 1, 3, 3], &mut rng);
        let b = random([2, 2, 3, 3], &mut rng);
        let c = concat(&[&a, &b], [2, 3, 3, 3]);
        assert_eq!(c.at(1, 0, 2, 1), a.at(1, 0, 2, 1));
        assert_eq!(c.at(1, 2, 0, 0), b.at(1, 1, 0, 0));
        let parts = split(&c, &[9, 18]);
        assert_eq!(parts[0], a.data());
        assert_eq!(parts[1], b.data());
    }
}

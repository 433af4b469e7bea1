//! Forward and backward passes for the fixed layer set of the embedding network.
//! Spatial tensors are `[N, C, H, W]`; dense tensors are `[N, D]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Rows with an L2 norm at or below this are rejected by [`l2_normalize`].
pub const L2_EPS: f64 = 1e-12;

pub struct ConvGrads<T: Scalar> {
    pub grad_x: Option<Tensor<T>>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Tensor<T>,
}

fn check_conv<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    let (f, wc, kh, kw) = weight.dims4()?;
    if wc != c || kh != 3 || kw != 3 {
        return Err(Error::Shape(format!(
            "conv weight {:?} does not fit input with {c} channels (expected [F, {c}, 3, 3])",
            weight.shape()
        )));
    }
    if bias.shape() != [f] {
        return Err(Error::Shape(format!("conv bias {:?} should be [{f}]", bias.shape())));
    }
    Ok((n, c, h, w, f))
}

/// Unrolls 3x3 patches (padding 1) of one `[C, H, W]` image into `[C*9, H*W]`.
fn im2col<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &img[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ch * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `[C*9, H*W]` patch gradients back onto a `[C, H, W]` image.
fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, img: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut img[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ch * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, &s)| *d = *d + s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, &s)| *d = *d + s),
                    }
                }
            }
        }
    }
}

/// 3x3 cross-correlation, stride 1, zero padding 1, plus bias.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w, f) = check_conv(x, weight, bias)?;
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, f, h, w]);
    out.data_mut()
        .par_chunks_mut(f * hw)
        .zip(x.data().par_chunks(c * hw))
        .for_each_init(
            || vec![T::zero(); c * 9 * hw],
            |col, (dst, img)| {
                im2col(img, c, h, w, col);
                T::gemm(f, c * 9, hw, weight.data(), false, col, false, dst, false);
                for (fi, plane) in dst.chunks_exact_mut(hw).enumerate() {
                    let b = bias.data()[fi];
                    plane.iter_mut().for_each(|v| *v = *v + b);
                }
            },
        );
    out.debug_check_finite("conv2d");
    Ok(out)
}

/// Exact gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
    conv2d_backward_with(x, weight, grad_out, true)
}

/// As [`conv2d_backward`]; the input gradient is skipped when `input_grad` is false.
pub fn conv2d_backward_with<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    input_grad: bool,
) -> Result<ConvGrads<T>> {
    let (n, c, h, w) = x.dims4()?;
    let f = weight.shape()[0];
    let bias_shape = Tensor::<T>::zeros(&[f]);
    check_conv(x, weight, &bias_shape)?;
    if grad_out.shape() != [n, f, h, w] {
        return Err(Error::Shape(format!(
            "conv grad_out {:?} should be [{n}, {f}, {h}, {w}]",
            grad_out.shape()
        )));
    }
    let hw = h * w;
    let mut grad_x = input_grad.then(|| Tensor::zeros(x.shape()));
    let per_sample = |i: usize, gx: Option<&mut [T]>| {
        let go = &grad_out.data()[i * f * hw..(i + 1) * f * hw];
        let mut col = vec![T::zero(); c * 9 * hw];
        im2col(&x.data()[i * c * hw..(i + 1) * c * hw], c, h, w, &mut col);
        let mut gw = vec![T::zero(); weight.len()];
        T::gemm(f, hw, c * 9, go, false, &col, true, &mut gw, false);
        let gb: Vec<T> = go.chunks_exact(hw).map(|plane| plane.iter().copied().sum::<T>()).collect();
        if let Some(gx) = gx {
            // reuse the patch buffer for the input-gradient columns
            T::gemm(c * 9, f, hw, weight.data(), true, go, false, &mut col, false);
            col2im(&col, c, h, w, gx);
        }
        (gw, gb)
    };
    // Per-sample partial sums are reduced in index order so results do not
    // depend on the thread count.
    let partials: Vec<(Vec<T>, Vec<T>)> = match grad_x.as_mut() {
        Some(gx) => gx
            .data_mut()
            .par_chunks_mut(c * hw)
            .enumerate()
            .map(|(i, chunk)| per_sample(i, Some(chunk)))
            .collect(),
        None => (0..n).into_par_iter().map(|i| per_sample(i, None)).collect(),
    };
    let mut grad_weight = Tensor::zeros(weight.shape());
    let mut grad_bias = Tensor::zeros(&[f]);
    for (gw, gb) in partials {
        grad_weight.data_mut().iter_mut().zip(&gw).for_each(|(a, &v)| *a = *a + v);
        grad_bias.data_mut().iter_mut().zip(&gb).for_each(|(a, &v)| *a = *a + v);
    }
    Ok(ConvGrads {
        grad_x,
        grad_weight,
        grad_bias,
    })
}

/// Result of a 2x2/stride-2 max pool: output plus the flat input index chosen for
/// every output element.
pub struct PoolOutput<T: Scalar> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2. Ties go to the first position in row-major
/// window order.
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<PoolOutput<T>> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max pool needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut output = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let xd = x.data();
    let od = output.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for idx in [best + 1, best + w, best + w + 1] {
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                od[o] = xd[best];
                argmax[o] = best;
            }
        }
    }
    Ok(PoolOutput { output, argmax })
}

pub fn maxpool2_backward<T: Scalar>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::Shape("max pool grad_out does not match the forward output".into()));
    }
    let mut grad = Tensor::zeros(input_shape);
    let gd = grad.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gd[idx] = gd[idx] + g;
    }
    Ok(grad)
}

/// Spatial mean per channel: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let scale = T::from_f64_lossy(1.0 / hw as f64);
    let data = x.data().chunks_exact(hw).map(|p| p.iter().copied().sum::<T>() * scale).collect();
    Tensor::new(&[n, c], data)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = match input_shape {
        &[n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::Shape(format!("expected a 4-d input shape, got {input_shape:?}"))),
    };
    if grad_out.shape() != [n, c] {
        return Err(Error::Shape(format!("GAP grad_out {:?} should be [{n}, {c}]", grad_out.shape())));
    }
    let hw = h * w;
    let scale = T::from_f64_lossy(1.0 / hw as f64);
    let data = grad_out.data().iter().flat_map(|&g| std::iter::repeat_n(g * scale, hw)).collect();
    Tensor::new(input_shape, data)
}

/// Affine map `y = x W^T + b` with `W: [O, I]`.
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, i) = x.dims2()?;
    let (o, wi) = weight.dims2()?;
    if wi != i || bias.shape() != [o] {
        return Err(Error::Shape(format!(
            "dense weight {:?}/bias {:?} do not fit input [{n}, {i}]",
            weight.shape(),
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, o]);
    T::gemm(n, i, o, x.data(), false, weight.data(), true, out.data_mut(), false);
    for row in out.data_mut().chunks_exact_mut(o) {
        row.iter_mut().zip(bias.data()).for_each(|(v, &b)| *v = *v + b);
    }
    Ok(out)
}

pub struct DenseGrads<T: Scalar> {
    pub grad_x: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Tensor<T>,
}

pub fn dense_backward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, grad_out: &Tensor<T>) -> Result<DenseGrads<T>> {
    let (n, i) = x.dims2()?;
    let (o, wi) = weight.dims2()?;
    if wi != i || grad_out.shape() != [n, o] {
        return Err(Error::Shape("dense backward shapes do not conform".into()));
    }
    let mut grad_x = Tensor::zeros(&[n, i]);
    T::gemm(n, o, i, grad_out.data(), false, weight.data(), false, grad_x.data_mut(), false);
    let mut grad_weight = Tensor::zeros(&[o, i]);
    T::gemm(o, n, i, grad_out.data(), true, x.data(), false, grad_weight.data_mut(), false);
    let mut grad_bias = Tensor::zeros(&[o]);
    for row in grad_out.data().chunks_exact(o) {
        grad_bias.data_mut().iter_mut().zip(row).for_each(|(b, &g)| *b = *b + g);
    }
    Ok(DenseGrads {
        grad_x,
        grad_weight,
        grad_bias,
    })
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    out
}

/// Gradient of ReLU given its output (`y > 0` marks the active units).
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape() != grad_out.shape() {
        return Err(Error::Shape("relu backward shapes differ".into()));
    }
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(output.shape(), data)
}

/// Inverted dropout. In training mode each unit is zeroed with probability `p`
/// and survivors are scaled by `1 / (1 - p)`; the returned mask holds those
/// per-unit factors. Evaluation mode is the identity and returns no mask.
pub fn dropout<T: Scalar>(x: &Tensor<T>, p: f64, train: bool, seed: u64) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability must be in [0, 1), got {p}")));
    }
    if !train || p == 0.0 {
        return Ok((x.clone(), None));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    let mut out = x.clone();
    out.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v = *v * m);
    Ok((out, Some(mask)))
}

pub fn dropout_backward<T: Scalar>(mask: Option<&[T]>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    if let Some(mask) = mask {
        g.data_mut().iter_mut().zip(mask).for_each(|(v, &m)| *v = *v * m);
    }
    g
}

/// Divides each row by its Euclidean norm. Returns the normalized rows and the norms.
pub fn l2_normalize<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let (_, d) = x.dims2()?;
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.shape()[0]);
    for (row, chunk) in out.data_mut().chunks_exact_mut(d).enumerate() {
        let norm = chunk.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if !(norm > L2_EPS) {
            return Err(Error::DegenerateEmbedding { row, norm });
        }
        let inv = T::from_f64_lossy(1.0 / norm);
        chunk.iter_mut().for_each(|v| *v = *v * inv);
        norms.push(T::from_f64_lossy(norm));
    }
    Ok((out, norms))
}

/// Backward of [`l2_normalize`]: `(I - u u^T) g / |x|` per row, where `u` is the output.
pub fn l2_normalize_backward<T: Scalar>(output: &Tensor<T>, norms: &[T], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = output.dims2()?;
    if grad_out.shape() != [n, d] || norms.len() != n {
        return Err(Error::Shape("l2 normalize backward shapes differ".into()));
    }
    let mut grad = Tensor::zeros(&[n, d]);
    for r in 0..n {
        let u = output.row(r);
        let g = grad_out.row(r);
        let dot: T = u.iter().zip(g).map(|(&a, &b)| a * b).sum();
        let inv = T::one() / norms[r];
        for (k, dst) in grad.data_mut()[r * d..(r + 1) * d].iter_mut().enumerate() {
            *dst = (g[k] - u[k] * dot) * inv;
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = t(&[1, 1, 3, 4], &(0..12).map(|v| v as f64 * 0.5 - 2.0).collect::<Vec<_>>());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let y = conv2d_forward(&x, &t(&[1, 1, 3, 3], &k), &t(&[1], &[0.0])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn delta_kernel_sums_channels() {
        let x = t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]);
        let mut k = vec![0.0; 18];
        k[4] = 1.0;
        k[13] = 1.0;
        let y = conv2d_forward(&x, &t(&[1, 2, 3, 3], &k), &t(&[1], &[0.0])).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 33.0, 44.0]);
    }

    #[test]
    fn ones_kernel_on_constant_field() {
        let x = t(&[1, 1, 5, 5], &[2.5; 25]);
        let y = conv2d_forward(&x, &t(&[1, 1, 3, 3], &[1.0; 9]), &t(&[1], &[0.0])).unwrap();
        assert_eq!(y.data()[2 * 5 + 2], 9.0 * 2.5);
        // corner sees 4 of the 9 taps
        assert_eq!(y.data()[0], 4.0 * 2.5);
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        assert!(conv2d_forward(&x, &Tensor::zeros(&[3, 1, 3, 3]), &Tensor::zeros(&[3])).is_err());
        assert!(conv2d_forward(&x, &Tensor::zeros(&[3, 2, 3, 3]), &Tensor::zeros(&[2])).is_err());
        assert!(conv2d_forward(&x, &Tensor::zeros(&[3, 2, 5, 5]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn conv_backward_small_cases() {
        let x = t(&[2, 1, 3, 3], &(0..18).map(|v| v as f64).collect::<Vec<_>>());
        let w = t(&[2, 1, 3, 3], &(0..18).map(|v| (v as f64).sin()).collect::<Vec<_>>());
        let go = t(&[2, 2, 3, 3], &(0..36).map(|v| (v as f64 * 0.3).cos()).collect::<Vec<_>>());
        let g = conv2d_backward(&x, &w, &go).unwrap();
        for f in 0..2 {
            let want: f64 = (0..2).map(|n| go.data()[(n * 2 + f) * 9..(n * 2 + f + 1) * 9].iter().sum::<f64>()).sum();
            assert!((g.grad_bias.data()[f] - want).abs() < 1e-12);
        }
        let zero = conv2d_backward(&x, &w, &Tensor::zeros(&[2, 2, 3, 3])).unwrap();
        assert!(zero.grad_x.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(zero.grad_weight.data().iter().all(|&v| v == 0.0));
        assert!(zero.grad_bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_basics() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let p = maxpool2_forward(&x).unwrap();
        assert_eq!(p.output.data(), &[4.0]);

        let c = t(&[1, 1, 2, 2], &[7.0; 4]);
        let p = maxpool2_forward(&c).unwrap();
        assert_eq!(p.output.data(), &[7.0]);
        let g = maxpool2_backward(c.shape(), &p.argmax, &t(&[1, 1, 1, 1], &[1.0])).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);

        assert!(maxpool2_forward(&Tensor::<f64>::zeros(&[1, 1, 3, 4])).is_err());
    }

    #[test]
    fn gap_basics() {
        let x = t(&[1, 2, 3, 5], &[[4.0; 15], [-1.0; 15]].concat());
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[4.0, -1.0]);
        let one = t(&[2, 3, 1, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(global_avg_pool(&one).unwrap().data(), one.data());
    }

    #[test]
    fn relu_dropout_dense_identities() {
        let x = t(&[1, 2], &[-1.0, 2.0]);
        assert_eq!(relu_forward(&x).data(), &[0.0, 2.0]);

        let (y, mask) = dropout(&x, 0.3, false, 1).unwrap();
        assert_eq!(y, x);
        assert!(mask.is_none());

        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(dense_forward(&x, &eye, &t(&[2], &[0.0, 0.0])).unwrap().data(), x.data());
    }

    #[test]
    fn dropout_training_mask() {
        let x = t(&[1, 1000], &[1.0; 1000]);
        let (y, mask) = dropout(&x, 0.3, true, 42).unwrap();
        let mask = mask.unwrap();
        let kept = mask.iter().filter(|&&m| m > 0.0).count();
        assert!((600..800).contains(&kept), "{kept}");
        for (&v, &m) in y.data().iter().zip(&mask) {
            assert!(v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12);
            assert_eq!(v, m);
        }
        assert_eq!(dropout(&x, 0.3, true, 42).unwrap().0, y);
        assert!(dropout(&x, 1.0, true, 0).is_err());
    }

    #[test]
    fn l2_basics() {
        let (y, norms) = l2_normalize(&t(&[1, 2], &[3.0, 4.0])).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
        assert_eq!(norms, vec![5.0]);
        let (u, _) = l2_normalize(&t(&[1, 2], &[0.6, 0.8])).unwrap();
        assert!((u.data()[0] - 0.6).abs() < 1e-15);
        assert!(matches!(
            l2_normalize(&t(&[2, 2], &[1.0, 0.0, 0.0, 0.0])),
            Err(Error::DegenerateEmbedding { row: 1, .. })
        ));
    }
}

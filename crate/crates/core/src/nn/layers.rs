//! Forward and backward kernels for the fixed layer set.
//!
//! Every backward function accumulates parameter gradients into the
//! `grad` buffers of [`LayerParams`] and returns the input gradient.
//! Batch reductions run over fixed-size sample chunks summed in order, so
//! results do not depend on the worker count.

use rayon::prelude::*;

use super::params::LayerParams;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Samples per partial-gradient chunk in batched backward passes.
const REDUCE_CHUNK: usize = 8;

/// Geometry of one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(x: &Tensor<T>, p: &LayerParams<T>, stride: usize, pad: usize) -> Result<Self> {
        let (_, c, h, w) = x.dims4()?;
        let (k, wc, kh, kw) = p.weights.dims4()?;
        if stride < 1 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        if wc != c {
            return Err(Error::Shape(format!("input has {c} channels, kernel expects {wc}")));
        }
        if p.bias.len() != k {
            return Err(Error::Shape(format!("bias has {} entries for {k} filters", p.bias.len())));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(ConvGeom {
            c,
            h,
            w,
            k,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfold one `C×H×W` sample into a `(C·kh·kw) × (Ho·Wo)` matrix.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let n_out = self.out_len();
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ch * self.kh + ky) * self.kw + kx) * n_out;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &x[(ch * self.h + iy as usize) * self.w..];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatter-add columns back into `dx`.
    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let n_out = self.out_len();
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ch * self.kh + ky) * self.kw + kx) * n_out;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (ch * self.h + iy as usize) * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dx[base + ix as usize] += cols[row + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip) plus bias.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    params: &LayerParams<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, params, stride, pad)?;
    let n = x.shape()[0];
    let in_len = g.c * g.h * g.w;
    let out_per = g.k * g.out_len();
    let mut out = Tensor::zeros(&[n, g.k, g.ho, g.wo]);
    let w = params.weights.data();
    let b = params.bias.data();
    out.data_mut()
        .par_chunks_mut(out_per.max(1))
        .zip(x.data().par_chunks(in_len.max(1)))
        .for_each_init(
            || vec![T::zero(); if g.pointwise() { 0 } else { g.patch_len() * g.out_len() }],
            |cols, (y, xs)| {
                let cols: &[T] = if g.pointwise() {
                    xs
                } else {
                    g.im2col(xs, cols);
                    cols
                };
                let m = g.out_len();
                T::gemm(
                    g.k,
                    g.patch_len(),
                    m,
                    T::one(),
                    w,
                    (g.patch_len() as isize, 1),
                    cols,
                    (m as isize, 1),
                    T::zero(),
                    y,
                    (m as isize, 1),
                );
                for (row, &bk) in y.chunks_exact_mut(m).zip(b) {
                    row.iter_mut().for_each(|v| *v += bk);
                }
            },
        );
    Ok(out)
}

/// Gradient of [`conv2d`]; accumulates weight and bias gradients.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    params: &mut LayerParams<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, params, stride, pad)?;
    let n = x.shape()[0];
    if grad_out.shape() != [n, g.k, g.ho, g.wo] {
        return Err(Error::Shape(format!(
            "conv grad {:?} does not match output {:?}",
            grad_out.shape(),
            [n, g.k, g.ho, g.wo]
        )));
    }
    let in_len = g.c * g.h * g.w;
    let m = g.out_len();
    let out_per = g.k * m;
    let pl = g.patch_len();
    let w = params.weights.data();
    let mut dx = Tensor::zeros(x.shape());

    // Each chunk of samples yields its own (dW, db) partial.
    let partials: Vec<(Vec<T>, Vec<T>)> = dx
        .data_mut()
        .par_chunks_mut((in_len * REDUCE_CHUNK).max(1))
        .zip(x.data().par_chunks((in_len * REDUCE_CHUNK).max(1)))
        .zip(grad_out.data().par_chunks((out_per * REDUCE_CHUNK).max(1)))
        .map(|((dxs, xs), gs)| {
            let mut dw = vec![T::zero(); g.k * pl];
            let mut db = vec![T::zero(); g.k];
            let mut cols = vec![T::zero(); if g.pointwise() { 0 } else { pl * m }];
            let mut dcols = vec![T::zero(); pl * m];
            for ((dx_n, x_n), g_n) in dxs
                .chunks_mut(in_len.max(1))
                .zip(xs.chunks(in_len.max(1)))
                .zip(gs.chunks(out_per.max(1)))
            {
                let cols_ref: &[T] = if g.pointwise() {
                    x_n
                } else {
                    g.im2col(x_n, &mut cols);
                    &cols
                };
                // dW += G · colsᵀ
                T::gemm(
                    g.k,
                    m,
                    pl,
                    T::one(),
                    g_n,
                    (m as isize, 1),
                    cols_ref,
                    (1, m as isize),
                    T::one(),
                    &mut dw,
                    (pl as isize, 1),
                );
                for (acc, row) in db.iter_mut().zip(g_n.chunks_exact(m)) {
                    *acc += row.iter().copied().sum::<T>();
                }
                // dcols = Wᵀ · G
                T::gemm(
                    pl,
                    g.k,
                    m,
                    T::one(),
                    w,
                    (1, pl as isize),
                    g_n,
                    (m as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (m as isize, 1),
                );
                if g.pointwise() {
                    dx_n.iter_mut().zip(&dcols).for_each(|(d, &v)| *d += v);
                } else {
                    g.col2im(&dcols, dx_n);
                }
            }
            (dw, db)
        })
        .collect();

    let gw = params.weights.grad_mut();
    for (dw, _) in &partials {
        gw.iter_mut().zip(dw).for_each(|(a, &b)| *a += b);
    }
    let gb = params.bias.grad_mut();
    for (_, db) in &partials {
        gb.iter_mut().zip(db).for_each(|(a, &b)| *a += b);
    }
    Ok(dx)
}

/// Channelwise max over `k×k` windows; also returns, per output element,
/// the flat input index of the winning element (first maximum in
/// row-major order).
pub fn maxpool<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 || stride == 0 || k > h || k > w {
        return Err(Error::Shape(format!("pool window {k} (stride {stride}) does not fit {h}x{w}")));
    }
    let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0u32; n * c * ho * wo];
    let xd = x.data();
    out.data_mut()
        .par_chunks_mut(ho * wo)
        .zip(arg.par_chunks_mut(ho * wo))
        .enumerate()
        .for_each(|(plane, (o, a))| {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    o[oy * wo + ox] = xd[best];
                    a[oy * wo + ox] = best as u32;
                }
            }
        });
    Ok((out, arg))
}

/// Route each output gradient to its window's argmax.
pub fn maxpool_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[u32],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::Shape("pool gradient does not match argmax map".into()));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i as usize] += g;
    }
    Ok(dx)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    y
}

/// Pass the gradient where the input was strictly positive.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad_out.shape() {
        return Err(Error::Shape("relu gradient shape mismatch".into()));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape(), data)
}

/// Stack `a` and `b` along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (na, ca, ha, wa) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::Shape(format!(
            "cannot concat {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (pa, pb) = (ca * ha * wa, cb * hb * wb);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..na {
        data.extend_from_slice(&a.data()[i * pa..(i + 1) * pa]);
        data.extend_from_slice(&b.data()[i * pb..(i + 1) * pb]);
    }
    Tensor::new(&[na, ca + cb, ha, wa], data)
}

/// Split a concatenated gradient back into its `[0, ca)` and `[ca, C)` parts.
pub fn concat_backward<T: Scalar>(grad: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = grad.dims4()?;
    if ca > c {
        return Err(Error::Shape(format!("split point {ca} beyond {c} channels")));
    }
    let (pa, pb) = (ca * h * w, (c - ca) * h * w);
    let mut da = Vec::with_capacity(n * pa);
    let mut db = Vec::with_capacity(n * pb);
    for s in grad.data().chunks(pa + pb).take(n) {
        da.extend_from_slice(&s[..pa]);
        db.extend_from_slice(&s[pa..]);
    }
    Ok((Tensor::new(&[n, ca, h, w], da)?, Tensor::new(&[n, c - ca, h, w], db)?))
}

/// `N×C×H×W → N×C` spatial means.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw).unwrap();
    let data = x
        .data()
        .chunks(hw.max(1))
        .take(n * c)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(&[n, c], data)
}

pub fn global_avg_pool_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape[..] else {
        return Err(Error::Shape("global pool expects a rank-4 input".into()));
    };
    if grad_out.shape() != [n, c] {
        return Err(Error::Shape("global pool gradient shape mismatch".into()));
    }
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw).unwrap();
    let mut dx = Vec::with_capacity(n * c * hw);
    for &g in grad_out.data() {
        dx.extend(std::iter::repeat_n(g * inv, hw));
    }
    Tensor::new(input_shape, dx)
}

/// `x · W + b` with `x: N×F`, `W: F×O`, `b: O`.
pub fn fully_connected<T: Scalar>(x: &Tensor<T>, params: &LayerParams<T>) -> Result<Tensor<T>> {
    let (n, f) = x.dims2()?;
    let (wf, o) = params.weights.dims2()?;
    if wf != f || params.bias.len() != o {
        return Err(Error::Shape(format!(
            "fully connected: input width {f}, weights {wf}x{o}, bias {}",
            params.bias.len()
        )));
    }
    let mut out = Tensor::zeros(&[n, o]);
    T::gemm(
        n,
        f,
        o,
        T::one(),
        x.data(),
        (f as isize, 1),
        params.weights.data(),
        (o as isize, 1),
        T::zero(),
        out.data_mut(),
        (o as isize, 1),
    );
    let b = params.bias.data();
    for row in out.data_mut().chunks_exact_mut(o.max(1)) {
        row.iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
    }
    Ok(out)
}

pub fn fully_connected_backward<T: Scalar>(
    x: &Tensor<T>,
    params: &mut LayerParams<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, f) = x.dims2()?;
    let (_, o) = params.weights.dims2()?;
    if grad_out.shape() != [n, o] {
        return Err(Error::Shape("fully connected gradient shape mismatch".into()));
    }
    // dW += xᵀ · G
    T::gemm(
        f,
        n,
        o,
        T::one(),
        x.data(),
        (1, f as isize),
        grad_out.data(),
        (o as isize, 1),
        T::one(),
        params.weights.grad_mut(),
        (o as isize, 1),
    );
    let gb = params.bias.grad_mut();
    for row in grad_out.data().chunks_exact(o.max(1)) {
        gb.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
    }
    // dx = G · Wᵀ
    let mut dx = Tensor::zeros(&[n, f]);
    T::gemm(
        n,
        o,
        f,
        T::one(),
        grad_out.data(),
        (o as isize, 1),
        params.weights.data(),
        (1, o as isize),
        T::zero(),
        dx.data_mut(),
        (f as isize, 1),
    );
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let p = LayerParams::new(t(&[1, 1, 1, 1], &[1.0]), t(&[1], &[0.0]));
        assert_eq!(conv2d(&x, &p, 1, 0).unwrap().data(), x.data());
    }

    #[test]
    fn conv_hand_cross_correlation() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let p = LayerParams::new(t(&[1, 1, 2, 2], &[1., 0., 0., 1.]), t(&[1], &[0.0]));
        let y = conv2d(&x, &p, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[6., 8., 12., 14.]);
    }

    #[test]
    fn conv_output_shape_formula() {
        let x = Tensor::<f32>::zeros(&[1, 2, 64, 64]);
        let p = LayerParams::new(Tensor::zeros(&[4, 2, 3, 3]), Tensor::zeros(&[4]));
        assert_eq!(conv2d(&x, &p, 2, 1).unwrap().shape(), &[1, 4, 32, 32]);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let p = LayerParams::new(Tensor::zeros(&[1, 3, 3, 3]), Tensor::zeros(&[1]));
        assert!(conv2d(&x, &p, 1, 0).is_err());
        let p = LayerParams::new(Tensor::zeros(&[1, 2, 3, 3]), Tensor::zeros(&[1]));
        assert!(conv2d(&x, &p, 0, 0).is_err());
        let p = LayerParams::new(Tensor::zeros(&[1, 2, 7, 7]), Tensor::zeros(&[1]));
        assert!(conv2d(&x, &p, 1, 1).is_err());
    }

    #[test]
    fn maxpool_basic_and_ties() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let (y, a) = maxpool(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(a, vec![3]);

        let c = t(&[1, 1, 4, 4], &[5.0; 16]);
        let (y, a) = maxpool(&c, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
        let g = maxpool_backward(c.shape(), &a, &t(&[1, 1, 2, 2], &[1.0; 4])).unwrap();
        let mut expect = [0.0; 16];
        for i in [0, 2, 8, 10] {
            expect[i] = 1.0;
        }
        assert_eq!(g.data(), &expect);
        assert!(maxpool(&c, 5, 1).is_err());
    }

    #[test]
    fn maxpool_ramp_against_window_scan() {
        let vals: Vec<f64> = (0..16).map(|v| ((v * 7) % 16) as f64).collect();
        let x = t(&[1, 1, 4, 4], &vals);
        let (y, _) = maxpool(&x, 2, 2).unwrap();
        let mut expect = vec![];
        for wy in 0..2 {
            for wx in 0..2 {
                let mut m = f64::MIN;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(vals[(wy * 2 + dy) * 4 + wx * 2 + dx]);
                    }
                }
                expect.push(m);
            }
        }
        assert_eq!(y.data(), &expect[..]);
    }

    #[test]
    fn relu_values_and_mask() {
        let x = t(&[1, 3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &t(&[1, 3], &[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
        let pos = t(&[1, 2], &[0.5, 3.0]);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn concat_shapes_and_slices() {
        let a = Tensor::<f64>::from_fn(&[2, 2, 2, 2], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |i| 100.0 + i as f64);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 5, 2, 2]);
        let (da, db) = concat_backward(&c, 2).unwrap();
        assert_eq!(da, a);
        assert_eq!(db, b);
        let empty = Tensor::<f64>::zeros(&[2, 0, 2, 2]);
        assert_eq!(concat_channels(&a, &empty).unwrap(), a);
        assert!(concat_channels(&a, &Tensor::zeros(&[1, 1, 2, 2])).is_err());
    }

    #[test]
    fn global_pool_values_and_gradient() {
        assert_eq!(global_avg_pool(&t(&[1, 1, 2, 2], &[7.0; 4])).unwrap().data(), &[7.0]);
        assert_eq!(global_avg_pool(&t(&[1, 1, 2, 2], &[1., 2., 3., 4.])).unwrap().data(), &[2.5]);
        let g = global_avg_pool_backward(&[1, 1, 2, 2], &t(&[1, 1], &[2.0])).unwrap();
        assert_eq!(g.data(), &[0.5; 4]);
    }

    #[test]
    fn fully_connected_hand_values() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let p = LayerParams::new(t(&[2, 1], &[1.0, 1.0]), t(&[1], &[0.5]));
        assert_eq!(fully_connected(&x, &p).unwrap().data(), &[3.5]);
        let id = LayerParams::new(t(&[2, 2], &[1., 0., 0., 1.]), t(&[2], &[0., 0.]));
        assert_eq!(fully_connected(&x, &id).unwrap().data(), x.data());
        let bad = LayerParams::new(t(&[3, 1], &[1.0; 3]), t(&[1], &[0.0]));
        assert!(fully_connected(&x, &bad).is_err());
    }
}

use super::{Element, Result, Tensor, TensorError};

/// Output extent of a strided, zero-padded window sweep.
pub fn conv2d_output_extent(
    extent: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let padded = extent + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn geometry(op: &'static str, detail: String) -> TensorError {
    TensorError::InvalidGeometry { op, detail }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn new(
        op: &'static str,
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let &[c_in, h, w] = input_shape else {
            return Err(mismatch(
                op,
                format!("input must be [C,H,W], got {input_shape:?}"),
            ));
        };
        let &[c_out, kc, kh, kw] = kernel_shape else {
            return Err(mismatch(
                op,
                format!("kernel must be [C_out,C_in,kH,kW], got {kernel_shape:?}"),
            ));
        };
        if kc != c_in {
            return Err(mismatch(
                op,
                format!("kernel expects {kc} input channels, input has {c_in}"),
            ));
        }
        if stride == 0 {
            return Err(geometry(op, "stride must be positive".into()));
        }
        let oh = conv2d_output_extent(h, kh, stride, padding);
        let ow = conv2d_output_extent(w, kw, stride, padding);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(geometry(
                op,
                format!("kernel {kh}x{kw} exceeds padded input {h}x{w} (padding {padding})"),
            ));
        };
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            oh,
            ow,
            stride,
            padding,
        })
    }

    /// Output positions `o` along one axis whose input coordinate
    /// `o * stride + k - padding` lies inside `[0, extent)`.
    fn valid_range(&self, k: usize, extent: usize, out_extent: usize) -> std::ops::Range<usize> {
        let s = self.stride;
        let p = self.padding;
        // smallest o with o*s + k >= p
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        // largest o with o*s + k - p < extent
        let hi = if extent + p > k {
            ((extent + p - k - 1) / s + 1).min(out_extent)
        } else {
            0
        };
        lo..hi.max(lo)
    }
}

/// 2-D cross-correlation of a `[C_in,H,W]` input with a `[C_out,C_in,kH,kW]`
/// kernel.
///
/// Each output element accumulates its products in `(c_in, ky, kx)` order
/// starting from zero, then adds the bias.
pub fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d_forward";
    let g = ConvGeometry::new(OP, input.shape(), kernel.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(mismatch(
                OP,
                format!("bias must be [{}], got {:?}", g.c_out, b.shape()),
            ));
        }
    }
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![T::zero(); g.c_out * g.oh * g.ow];
    for co in 0..g.c_out {
        let plane = &mut out[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        for ci in 0..g.c_in {
            for ky in 0..g.kh {
                let ys = g.valid_range(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let wv = k[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    let xs = g.valid_range(kx, g.w, g.ow);
                    for oy in ys.clone() {
                        let iy = oy * g.stride + ky - g.padding;
                        let row = &x[(ci * g.h + iy) * g.w..(ci * g.h + iy + 1) * g.w];
                        let orow = &mut plane[oy * g.ow..(oy + 1) * g.ow];
                        for ox in xs.clone() {
                            let ix = ox * g.stride + kx - g.padding;
                            orow[ox] += row[ix] * wv;
                        }
                    }
                }
            }
        }
        if let Some(b) = bias {
            let bv = b.data()[co];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::new(vec![g.c_out, g.oh, g.ow], out)
}

/// Vector-Jacobian product of [`conv2d_forward`] with respect to its input
/// (the transposed convolution).
pub fn conv2d_input_vjp<T: Element>(
    grad_out: &Tensor<T>,
    kernel: &Tensor<T>,
    input_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d_input_vjp";
    let g = ConvGeometry::new(OP, input_shape, kernel.shape(), stride, padding)?;
    if grad_out.shape() != [g.c_out, g.oh, g.ow] {
        return Err(mismatch(
            OP,
            format!(
                "gradient must be [{}, {}, {}], got {:?}",
                g.c_out,
                g.oh,
                g.ow,
                grad_out.shape()
            ),
        ));
    }
    let go = grad_out.data();
    let k = kernel.data();
    let mut gin = vec![T::zero(); g.c_in * g.h * g.w];
    for co in 0..g.c_out {
        let plane = &go[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        for ci in 0..g.c_in {
            for ky in 0..g.kh {
                let ys = g.valid_range(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let wv = k[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    let xs = g.valid_range(kx, g.w, g.ow);
                    for oy in ys.clone() {
                        let iy = oy * g.stride + ky - g.padding;
                        let grow = &plane[oy * g.ow..(oy + 1) * g.ow];
                        let irow = &mut gin[(ci * g.h + iy) * g.w..(ci * g.h + iy + 1) * g.w];
                        for ox in xs.clone() {
                            let ix = ox * g.stride + kx - g.padding;
                            irow[ix] += grow[ox] * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gin)
}

/// Gradient of a scalar loss with respect to the convolution kernel.
pub fn conv2d_weight_vjp<T: Element>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    kernel_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d_weight_vjp";
    let g = ConvGeometry::new(OP, input.shape(), kernel_shape, stride, padding)?;
    if grad_out.shape() != [g.c_out, g.oh, g.ow] {
        return Err(mismatch(
            OP,
            format!(
                "gradient shape {:?} does not match output",
                grad_out.shape()
            ),
        ));
    }
    let x = input.data();
    let go = grad_out.data();
    let mut gw = vec![T::zero(); kernel_shape.iter().product()];
    for co in 0..g.c_out {
        let plane = &go[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        for ci in 0..g.c_in {
            for ky in 0..g.kh {
                let ys = g.valid_range(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let xs = g.valid_range(kx, g.w, g.ow);
                    let mut acc = T::zero();
                    for oy in ys.clone() {
                        let iy = oy * g.stride + ky - g.padding;
                        let row = &x[(ci * g.h + iy) * g.w..(ci * g.h + iy + 1) * g.w];
                        let grow = &plane[oy * g.ow..(oy + 1) * g.ow];
                        for ox in xs.clone() {
                            acc += grow[ox] * row[ox * g.stride + kx - g.padding];
                        }
                    }
                    gw[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    }
    Tensor::new(kernel_shape.to_vec(), gw)
}

/// Gradient with respect to the per-channel bias: spatial sum per channel.
pub fn conv2d_bias_vjp<T: Element>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = grad_out.chw()?;
    let go = grad_out.data();
    let sums = (0..c)
        .map(|ch| {
            let mut acc = T::zero();
            for &v in &go[ch * h * w..(ch + 1) * h * w] {
                acc += v;
            }
            acc
        })
        .collect();
    Tensor::new(vec![c], sums)
}

/// `weight · flatten(input) + bias` for a `[m, n]` weight.
pub fn dense_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    const OP: &str = "dense_forward";
    let &[m, n] = weight.shape() else {
        return Err(mismatch(
            OP,
            format!("weight must be [m,n], got {:?}", weight.shape()),
        ));
    };
    if input.len() != n {
        return Err(mismatch(
            OP,
            format!(
                "weight expects {n} inputs, input {:?} has {}",
                input.shape(),
                input.len()
            ),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [m] {
            return Err(mismatch(
                OP,
                format!("bias must be [{m}], got {:?}", b.shape()),
            ));
        }
    }
    let x = input.data();
    let w = weight.data();
    let out = (0..m)
        .map(|i| {
            let mut acc = T::zero();
            for (wv, xv) in w[i * n..(i + 1) * n].iter().zip(x) {
                acc += *wv * *xv;
            }
            match bias {
                Some(b) => acc + b.data()[i],
                None => acc,
            }
        })
        .collect();
    Tensor::new(vec![m], out)
}

/// `weightᵀ · grad_out`, reshaped to `input_shape`.
pub fn dense_input_vjp<T: Element>(
    grad_out: &Tensor<T>,
    weight: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    const OP: &str = "dense_input_vjp";
    let &[m, n] = weight.shape() else {
        return Err(mismatch(
            OP,
            format!("weight must be [m,n], got {:?}", weight.shape()),
        ));
    };
    if grad_out.len() != m || input_shape.iter().product::<usize>() != n {
        return Err(mismatch(
            OP,
            format!(
                "weight [{m},{n}] incompatible with gradient {:?} and input {input_shape:?}",
                grad_out.shape()
            ),
        ));
    }
    let g = grad_out.data();
    let w = weight.data();
    let mut gin = vec![T::zero(); n];
    for (i, &gv) in g.iter().enumerate() {
        for (acc, &wv) in gin.iter_mut().zip(&w[i * n..(i + 1) * n]) {
            *acc += wv * gv;
        }
    }
    Tensor::new(input_shape.to_vec(), gin)
}

/// Outer product `grad_out ⊗ flatten(input)`.
pub fn dense_weight_vjp<T: Element>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let n = input.len();
    let m = grad_out.len();
    let x = input.data();
    let mut gw = Vec::with_capacity(m * n);
    for &gv in grad_out.data() {
        gw.extend(x.iter().map(|&xv| gv * xv));
    }
    Tensor::new(vec![m, n], gw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Average,
}

/// Result of a pooling sweep. For max pooling `argmax[o]` is the flat input
/// index selected for output element `o`.
#[derive(Debug, Clone)]
pub struct PoolOutput<T: Element> {
    pub output: Tensor<T>,
    pub argmax: Option<Vec<usize>>,
}

fn pool_geometry(
    input_shape: &[usize],
    window: usize,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    const OP: &str = "pool_forward";
    let &[c, h, w] = input_shape else {
        return Err(mismatch(
            OP,
            format!("input must be [C,H,W], got {input_shape:?}"),
        ));
    };
    if window == 0 || stride == 0 {
        return Err(geometry(OP, "window and stride must be positive".into()));
    }
    if window > h || window > w {
        return Err(geometry(
            OP,
            format!("window {window} exceeds input {h}x{w}"),
        ));
    }
    Ok((
        c,
        h,
        w,
        (h - window) / stride + 1,
        (w - window) / stride + 1,
    ))
}

/// Max or average pooling over square windows without padding.
///
/// Max-pool ties resolve to the first (lowest flat index) element in the
/// window, scanned row by row.
pub fn pool_forward<T: Element>(
    input: &Tensor<T>,
    kind: PoolKind,
    window: usize,
    stride: usize,
) -> Result<PoolOutput<T>> {
    let (c, h, w, oh, ow) = pool_geometry(input.shape(), window, stride)?;
    let x = input.data();
    let n_out = c * oh * ow;
    let mut out = Vec::with_capacity(n_out);
    let mut argmax = match kind {
        PoolKind::Max => Some(Vec::with_capacity(n_out)),
        PoolKind::Average => None,
    };
    let inv = T::one() / T::lit((window * window) as f64);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ch * h * w;
                match kind {
                    PoolKind::Max => {
                        let mut best = base + oy * stride * w + ox * stride;
                        for dy in 0..window {
                            for dx in 0..window {
                                let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(x[best]);
                        if let Some(a) = argmax.as_mut() {
                            a.push(best);
                        }
                    }
                    PoolKind::Average => {
                        let mut acc = T::zero();
                        for dy in 0..window {
                            for dx in 0..window {
                                acc += x[base + (oy * stride + dy) * w + ox * stride + dx];
                            }
                        }
                        out.push(acc * inv);
                    }
                }
            }
        }
    }
    Ok(PoolOutput {
        output: Tensor::new(vec![c, oh, ow], out)?,
        argmax,
    })
}

/// Routes each output gradient to its recorded argmax input element.
pub fn max_pool_input_vjp<T: Element>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(mismatch(
            "max_pool_input_vjp",
            format!(
                "{} argmax records for {} gradients",
                argmax.len(),
                grad_out.len()
            ),
        ));
    }
    let mut gin = vec![T::zero(); input_shape.iter().product()];
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gin[idx] += g;
    }
    Tensor::new(input_shape.to_vec(), gin)
}

/// Spreads each output gradient uniformly over its window.
pub fn avg_pool_input_vjp<T: Element>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
    window: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let (c, h, w, oh, ow) = pool_geometry(input_shape, window, stride)?;
    if grad_out.shape() != [c, oh, ow] {
        return Err(mismatch(
            "avg_pool_input_vjp",
            format!(
                "gradient shape {:?} does not match output [{c},{oh},{ow}]",
                grad_out.shape()
            ),
        ));
    }
    let inv = T::one() / T::lit((window * window) as f64);
    let go = grad_out.data();
    let mut gin = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let share = go[(ch * oh + oy) * ow + ox] * inv;
                for dy in 0..window {
                    for dx in 0..window {
                        gin[ch * h * w + (oy * stride + dy) * w + ox * stride + dx] += share;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Independent six-deep loop reference.
    fn naive_conv(
        x: &Tensor<f64>,
        k: &Tensor<f64>,
        b: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let (ci_n, h, w) = (x.shape()[0], x.shape()[1] as isize, x.shape()[2] as isize);
        let (co_n, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let oh = (h as usize + 2 * pad - kh) / stride + 1;
        let ow = (w as usize + 2 * pad - kw) / stride + 1;
        let mut out = Vec::new();
        for co in 0..co_n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..ci_n {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h || ix >= w {
                                    continue;
                                }
                                let xv = x.data()
                                    [(ci * h as usize + iy as usize) * w as usize + ix as usize];
                                let kv = k.data()[((co * ci_n + ci) * kh + ky) * kw + kx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out.push(acc + b.data()[co]);
                }
            }
        }
        out
    }

    #[test]
    fn conv_hand_summed_windows() {
        let x = t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let k = t(&[1, 1, 2, 2], &[1.; 4]);
        let b = t(&[1], &[0.]);
        let y = conv2d_forward(&x, &k, Some(&b), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[12., 16., 24., 28.]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 5, 4], &mut rng);
        let k = t(&[1, 1, 1, 1], &[1.]);
        let y = conv2d_forward(&x, &k, Some(&t(&[1], &[0.])), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
            let x = random(&[3, 8, 8], &mut rng);
            let k = random(&[4, 3, 3, 3], &mut rng);
            let b = random(&[4], &mut rng);
            let y = conv2d_forward(&x, &k, Some(&b), stride, pad).unwrap();
            assert_eq!(y.data(), naive_conv(&x, &k, &b, stride, pad).as_slice());
        }
    }

    #[test]
    fn conv_errors() {
        let x = t(&[1, 2, 2], &[0.; 4]);
        let k = t(&[1, 1, 3, 3], &[0.; 9]);
        assert!(matches!(
            conv2d_forward(&x, &k, None, 1, 0),
            Err(TensorError::InvalidGeometry { .. })
        ));
        let k2 = t(&[1, 2, 1, 1], &[0.; 2]);
        assert!(matches!(
            conv2d_forward(&x, &k2, None, 1, 0),
            Err(TensorError::ShapeMismatch { .. })
        ));
        let k3 = t(&[1, 1, 1, 1], &[1.]);
        assert!(conv2d_forward(&x, &k3, None, 0, 0).is_err());
    }

    #[test]
    fn conv_vjps_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 5, 5], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let (stride, pad) = (2, 1);
        let y = conv2d_forward(&x, &k, None, stride, pad).unwrap();
        let g = random(y.shape(), &mut rng);
        // loss = <g, conv(x, k)> is bilinear, so differences are exact up to rounding
        let loss = |x: &Tensor<f64>, k: &Tensor<f64>| {
            let y = conv2d_forward(x, k, None, stride, pad).unwrap();
            y.data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let gx = conv2d_input_vjp(&g, &k, x.shape(), stride, pad).unwrap();
        let gk = conv2d_weight_vjp(&x, &g, k.shape(), stride, pad).unwrap();
        let h = 1e-3;
        for i in 0..x.len() {
            let mut p = x.data().to_vec();
            p[i] += h;
            let mut m = x.data().to_vec();
            m[i] -= h;
            let fd = (loss(&t(x.shape(), &p), &k) - loss(&t(x.shape(), &m), &k)) / (2.0 * h);
            assert!((fd - gx.data()[i]).abs() < 1e-9);
        }
        for i in 0..k.len() {
            let mut p = k.data().to_vec();
            p[i] += h;
            let mut m = k.data().to_vec();
            m[i] -= h;
            let fd = (loss(&x, &t(k.shape(), &p)) - loss(&x, &t(k.shape(), &m))) / (2.0 * h);
            assert!((fd - gk.data()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn dense_examples() {
        let w = t(&[1, 2], &[2., -1.]);
        let y = dense_forward(&t(&[2], &[3., 4.]), &w, Some(&t(&[1], &[0.]))).unwrap();
        assert_eq!(y.data(), &[2.]);

        let eye = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let x = t(&[3], &[0.5, -2., 7.]);
        assert_eq!(
            dense_forward(&x, &eye, Some(&t(&[3], &[0.; 3]))).unwrap(),
            x
        );
    }

    #[test]
    fn dense_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random(&[5, 7], &mut rng);
        let b = random(&[5], &mut rng);
        let x = random(&[7], &mut rng);
        let y = dense_forward(&x, &w, Some(&b)).unwrap();
        for i in 0..5 {
            let mut acc = 0.0;
            for j in 0..7 {
                acc += w.data()[i * 7 + j] * x.data()[j];
            }
            assert_eq!(y.data()[i], acc + b.data()[i]);
        }
        assert!(dense_forward(&random(&[6], &mut rng), &w, None).is_err());
    }

    #[test]
    fn pool_examples() {
        let x = t(&[1, 2, 2], &[1., 2., 3., 4.]);
        let mx = pool_forward(&x, PoolKind::Max, 2, 2).unwrap();
        assert_eq!(mx.output.data(), &[4.]);
        assert_eq!(mx.argmax.unwrap(), vec![3]);
        let av = pool_forward(&x, PoolKind::Average, 2, 2).unwrap();
        assert_eq!(av.output.data(), &[2.5]);
        assert!(av.argmax.is_none());
    }

    #[test]
    fn max_pool_ties_take_first_index() {
        let x = Tensor::<f64>::full(vec![2, 4, 4], 0.7).unwrap();
        let p = pool_forward(&x, PoolKind::Max, 2, 2).unwrap();
        assert!(p.output.data().iter().all(|&v| v == 0.7));
        assert_eq!(p.argmax.unwrap(), vec![0, 2, 8, 10, 16, 18, 24, 26],);
    }

    #[test]
    fn pool_rejects_oversized_window() {
        let x = t(&[1, 2, 2], &[1., 2., 3., 4.]);
        assert!(pool_forward(&x, PoolKind::Max, 3, 1).is_err());
        assert!(pool_forward(&x, PoolKind::Average, 0, 1).is_err());
    }

    proptest! {
        #[test]
        fn conv_scales_by_unit_kernel(c in -3.0f32..3.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f32>::new(vec![1, 4, 5],
                (0..20).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
            let k = Tensor::<f32>::new(vec![1, 1, 1, 1], vec![c]).unwrap();
            let y = conv2d_forward(&x, &k, None, 1, 0).unwrap();
            for (a, b) in y.data().iter().zip(x.data()) {
                prop_assert_eq!(*a, b * c);
            }
        }

        #[test]
        fn conv_is_linear(a in -2.0f32..2.0, b in -2.0f32..2.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rnd = |shape: &[usize]| {
                let n = shape.iter().product();
                Tensor::<f32>::new(shape.to_vec(),
                    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
            };
            let x = rnd(&[2, 6, 6]);
            let y = rnd(&[2, 6, 6]);
            let k = rnd(&[3, 2, 3, 3]);
            let f = |v: &Tensor<f32>| conv2d_forward(v, &k, None, 1, 1).unwrap();
            let combo = x.scale(a).unwrap().add(&y.scale(b).unwrap()).unwrap();
            let lhs = f(&combo);
            let rhs = f(&x).scale(a).unwrap().add(&f(&y).scale(b).unwrap()).unwrap();
            let scale = rhs.max_abs().max(1.0);
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() <= 1e-6 * scale);
            }
        }

        #[test]
        fn max_pool_dominates_average(seed in 0u64..1000, window in 1usize..4, stride in 1usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[2, 6, 6], &mut rng);
            let mx = pool_forward(&x, PoolKind::Max, window, stride).unwrap();
            let av = pool_forward(&x, PoolKind::Average, window, stride).unwrap();
            for (m, a) in mx.output.data().iter().zip(av.output.data()) {
                prop_assert!(m >= a);
            }
        }

        #[test]
        fn average_pool_of_constant(v in -5.0f64..5.0, window in 1usize..4) {
            let x = Tensor::<f64>::full(vec![1, 5, 5], v).unwrap();
            let av = pool_forward(&x, PoolKind::Average, window, 1).unwrap();
            for o in av.output.data() {
                prop_assert!((o - v).abs() <= 1e-12 * v.abs().max(1.0));
            }
        }
    }
}

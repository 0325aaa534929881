//! Dense row-major tensors and the raw numeric kernels behind the autograd ops.
//!
//! Image batches use NCHW layout throughout. Kernels here never allocate
//! graph state; they are plain functions over slices.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type the engine computes in. Training runs in `f32`; gradient
/// verification runs the same code in `f64`.
pub trait Element:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// Same contract as `matrixmultiply::sgemm`: all strides must describe
    /// in-bounds views of the given pointers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Converts an `f64` literal into the element type.
#[inline]
pub fn cst<E: Element>(v: f64) -> E {
    E::from_f64(v).expect("representable constant")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: E) -> Self {
        Self::from_vec(&[1], vec![v])
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self::from_vec(shape, data.iter().map(|&v| cst(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn item(&self) -> E {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap()).collect()
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| cst(v.to_f64().unwrap())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sum(&self) -> E {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64().unwrap())
            .fold(0.0, f64::max)
    }
}

/// Geometry of a stride-1 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn from_shapes(x: &[usize], wshape: &[usize], pad: (usize, usize)) -> Self {
        assert_eq!(x.len(), 4, "conv input must be NCHW, got {x:?}");
        assert_eq!(wshape.len(), 4, "conv weight must be OIHW, got {wshape:?}");
        assert_eq!(x[1], wshape[1], "conv channel mismatch: input {x:?}, weight {wshape:?}");
        Self {
            cin: x[1],
            h: x[2],
            w: x[3],
            cout: wshape[0],
            kh: wshape[2],
            kw: wshape[3],
            ph: pad.0,
            pw: pad.1,
        }
    }

    pub fn ho(&self) -> usize {
        self.h + 2 * self.ph + 1 - self.kh
    }

    pub fn wo(&self) -> usize {
        self.w + 2 * self.pw + 1 - self.kw
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.ph == 0 && self.pw == 0
    }
}

fn im2col<E: Element>(g: &ConvGeom, x: &[E], col: &mut [E]) {
    let (ho, wo) = (g.ho(), g.wo());
    let plane = ho * wo;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oh in 0..ho {
                    let d = &mut dst[oh * wo..(oh + 1) * wo];
                    let ih = oh as isize + ki as isize - g.ph as isize;
                    if ih < 0 || ih >= g.h as isize {
                        d.fill(E::zero());
                        continue;
                    }
                    let src = &xc[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let off = kj as isize - g.pw as isize;
                    let lo = (-off).max(0) as usize;
                    let hi = ((g.w as isize - off).min(wo as isize)).max(lo as isize) as usize;
                    d[..lo].fill(E::zero());
                    d[hi..].fill(E::zero());
                    if hi > lo {
                        let s0 = (lo as isize + off) as usize;
                        d[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<E: Element>(g: &ConvGeom, col: &[E], x: &mut [E]) {
    let (ho, wo) = (g.ho(), g.wo());
    let plane = ho * wo;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &col[row * plane..(row + 1) * plane];
                for oh in 0..ho {
                    let ih = oh as isize + ki as isize - g.ph as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let s = &src[oh * wo..(oh + 1) * wo];
                    let dst = &mut xc[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let off = kj as isize - g.pw as isize;
                    let lo = (-off).max(0) as usize;
                    let hi = ((g.w as isize - off).min(wo as isize)).max(lo as isize) as usize;
                    for ow in lo..hi {
                        dst[(ow as isize + off) as usize] += s[ow];
                    }
                }
                row += 1;
            }
        }
    }
}

/// `y[b] = W * im2col(x[b])`, weight in OIHW layout.
pub fn conv2d<E: Element>(x: &Tensor<E>, w: &Tensor<E>, pad: (usize, usize)) -> Tensor<E> {
    let g = ConvGeom::from_shapes(x.shape(), w.shape(), pad);
    let b = x.dim(0);
    let (ho, wo) = (g.ho(), g.wo());
    let plane = ho * wo;
    let k = g.k();
    let mut y = Tensor::zeros(&[b, g.cout, ho, wo]);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![E::zero(); k * plane]
    };
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * plane;
    for bi in 0..b {
        let xb = &x.data()[bi * in_sz..(bi + 1) * in_sz];
        let src: &[E] = if g.is_pointwise() {
            xb
        } else {
            im2col(&g, xb, &mut col);
            &col
        };
        let yb = &mut y.data_mut()[bi * out_sz..(bi + 1) * out_sz];
        unsafe {
            E::gemm(
                g.cout,
                k,
                plane,
                E::one(),
                w.data().as_ptr(),
                k as isize,
                1,
                src.as_ptr(),
                plane as isize,
                1,
                E::zero(),
                yb.as_mut_ptr(),
                plane as isize,
                1,
            );
        }
    }
    y
}

/// Gradient of `conv2d` with respect to its input, given the output gradient.
pub fn conv2d_input_grad<E: Element>(
    gy: &Tensor<E>,
    w: &Tensor<E>,
    x_shape: &[usize],
    pad: (usize, usize),
) -> Tensor<E> {
    let g = ConvGeom::from_shapes(x_shape, w.shape(), pad);
    let b = x_shape[0];
    let plane = g.ho() * g.wo();
    let k = g.k();
    assert_eq!(gy.shape(), &[b, g.cout, g.ho(), g.wo()], "conv grad shape");
    let mut gx = Tensor::zeros(x_shape);
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * plane;
    let mut col = vec![E::zero(); k * plane];
    for bi in 0..b {
        let gyb = &gy.data()[bi * out_sz..(bi + 1) * out_sz];
        let gxb = &mut gx.data_mut()[bi * in_sz..(bi + 1) * in_sz];
        let dst: *mut E = if g.is_pointwise() {
            gxb.as_mut_ptr()
        } else {
            col.as_mut_ptr()
        };
        unsafe {
            E::gemm(
                k,
                g.cout,
                plane,
                E::one(),
                w.data().as_ptr(),
                1,
                k as isize,
                gyb.as_ptr(),
                plane as isize,
                1,
                E::zero(),
                dst,
                plane as isize,
                1,
            );
        }
        if !g.is_pointwise() {
            col2im_add(&g, &col, gxb);
        }
    }
    gx
}

/// Gradient of `conv2d` with respect to its weight, summed over the batch.
pub fn conv2d_weight_grad<E: Element>(
    x: &Tensor<E>,
    gy: &Tensor<E>,
    w_shape: &[usize],
    pad: (usize, usize),
) -> Tensor<E> {
    let g = ConvGeom::from_shapes(x.shape(), w_shape, pad);
    let b = x.dim(0);
    let plane = g.ho() * g.wo();
    let k = g.k();
    let mut gw = Tensor::zeros(w_shape);
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * plane;
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![E::zero(); k * plane]
    };
    for bi in 0..b {
        let xb = &x.data()[bi * in_sz..(bi + 1) * in_sz];
        let src: &[E] = if g.is_pointwise() {
            xb
        } else {
            im2col(&g, xb, &mut col);
            &col
        };
        let gyb = &gy.data()[bi * out_sz..(bi + 1) * out_sz];
        unsafe {
            E::gemm(
                g.cout,
                plane,
                k,
                E::one(),
                gyb.as_ptr(),
                plane as isize,
                1,
                src.as_ptr(),
                1,
                plane as isize,
                E::one(),
                gw.data_mut().as_mut_ptr(),
                k as isize,
                1,
            );
        }
    }
    gw
}

/// `a[m,k] * b[k,n]`, optionally transposing either operand.
pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>, ta: bool, tb: bool) -> Tensor<E> {
    assert_eq!(a.shape().len(), 2, "matmul lhs must be 2-D, got {:?}", a.shape());
    assert_eq!(b.shape().len(), 2, "matmul rhs must be 2-D, got {:?}", b.shape());
    let (ar, ac) = (a.dim(0), a.dim(1));
    let (br, bc) = (b.dim(0), b.dim(1));
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul inner dimension mismatch: {:?} x {:?}", a.shape(), b.shape());
    let mut c = Tensor::zeros(&[m, n]);
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    if m > 0 && n > 0 {
        unsafe {
            E::gemm(
                m,
                k,
                n,
                E::one(),
                a.data().as_ptr(),
                rsa,
                csa,
                b.data().as_ptr(),
                rsb,
                csb,
                E::zero(),
                c.data_mut().as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    c
}

fn nchw(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected NCHW tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

/// 2x2 average pooling (floor on odd sizes).
pub fn avg_pool2<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let (b, c, h, w) = nchw(x.shape());
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[b, c, ho, wo]);
    let q = cst::<E>(0.25);
    let xd = x.data();
    let yd = y.data_mut();
    for p in 0..b * c {
        let xs = &xd[p * h * w..];
        let ys = &mut yd[p * ho * wo..(p + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                let r0 = 2 * i * w + 2 * j;
                ys[i * wo + j] = (xs[r0] + xs[r0 + 1] + xs[r0 + w] + xs[r0 + w + 1]) * q;
            }
        }
    }
    y
}

/// Nearest-neighbour 2x upsampling to an explicit output size.
pub fn upsample2<E: Element>(x: &Tensor<E>, out_h: usize, out_w: usize) -> Tensor<E> {
    let (b, c, h, w) = nchw(x.shape());
    let mut y = Tensor::zeros(&[b, c, out_h, out_w]);
    let xd = x.data();
    let yd = y.data_mut();
    for p in 0..b * c {
        let xs = &xd[p * h * w..(p + 1) * h * w];
        let ys = &mut yd[p * out_h * out_w..(p + 1) * out_h * out_w];
        for i in 0..out_h.min(2 * h) {
            for j in 0..out_w.min(2 * w) {
                ys[i * out_w + j] = xs[(i / 2) * w + j / 2];
            }
        }
    }
    y
}

/// Sums each 2x2 output block back onto the source grid (adjoint of `upsample2`).
pub fn sum_pool2<E: Element>(g: &Tensor<E>, h: usize, w: usize) -> Tensor<E> {
    let (b, c, oh, ow) = nchw(g.shape());
    let mut y = Tensor::zeros(&[b, c, h, w]);
    let gd = g.data();
    let yd = y.data_mut();
    for p in 0..b * c {
        let gs = &gd[p * oh * ow..(p + 1) * oh * ow];
        let ys = &mut yd[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                if i / 2 < h && j / 2 < w {
                    ys[(i / 2) * w + j / 2] += gs[i * ow + j];
                }
            }
        }
    }
    y
}

/// Per-(sample, channel) mean over the spatial axes: `[B,C,H,W] -> [B,C]`.
pub fn spatial_mean<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let (b, c, h, w) = nchw(x.shape());
    let hw = h * w;
    let inv = E::one() / cst(hw as f64);
    let data = x
        .data()
        .chunks(hw)
        .map(|p| p.iter().copied().sum::<E>() * inv)
        .collect();
    Tensor::from_vec(&[b, c], data)
}

/// Broadcasts `[B,C]` over a spatial grid: `[B,C] -> [B,C,H,W]`.
pub fn spatial_expand<E: Element>(v: &Tensor<E>, h: usize, w: usize) -> Tensor<E> {
    let (b, c) = (v.dim(0), v.dim(1));
    let mut data = Vec::with_capacity(b * c * h * w);
    for &s in v.data() {
        data.extend(std::iter::repeat_n(s, h * w));
    }
    Tensor::from_vec(&[b, c, h, w], data)
}

/// Instance normalisation over the spatial axes; returns (normalised, inverse std per plane).
pub fn instance_norm<E: Element>(x: &Tensor<E>, eps: f64) -> (Tensor<E>, Vec<E>) {
    let (_, _, h, w) = nchw(x.shape());
    let hw = h * w;
    let n = cst::<E>(hw as f64);
    let eps = cst::<E>(eps);
    let mut y = x.clone();
    let mut inv_std = Vec::with_capacity(x.numel() / hw);
    for p in y.data_mut().chunks_mut(hw) {
        let mean = p.iter().copied().sum::<E>() / n;
        let var = p.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / n;
        let is = E::one() / (var + eps).sqrt();
        for v in p.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv_std.push(is);
    }
    (y, inv_std)
}

/// Input gradient of instance normalisation given the normalised output.
pub fn instance_norm_backward<E: Element>(xhat: &Tensor<E>, inv_std: &[E], gy: &Tensor<E>) -> Tensor<E> {
    let (_, _, h, w) = nchw(xhat.shape());
    let hw = h * w;
    let n = cst::<E>(hw as f64);
    let mut gx = Tensor::zeros(xhat.shape());
    for (((gxp, xp), gp), &is) in gx
        .data_mut()
        .chunks_mut(hw)
        .zip(xhat.data().chunks(hw))
        .zip(gy.data().chunks(hw))
        .zip(inv_std)
    {
        let mg = gp.iter().copied().sum::<E>() / n;
        let mgx = gp.iter().zip(xp).map(|(&g, &x)| g * x).sum::<E>() / n;
        for ((o, &g), &x) in gxp.iter_mut().zip(gp).zip(xp) {
            *o = is * (g - mg - x * mgx);
        }
    }
    gx
}

/// A fixed sparse linear map from a batch of images to a batch of smaller
/// images, each output pixel reading up to four weighted source pixels of one
/// source sample (bilinear crops with masking folded into the weights).
#[derive(Clone, Debug)]
pub struct ResamplePlan {
    pub src_shape: [usize; 4],
    pub out_h: usize,
    pub out_w: usize,
    /// Source sample index per output image.
    pub sources: Vec<usize>,
    /// Per output image, per output pixel: four (source pixel index, weight) taps.
    pub taps: Vec<Vec<[(u32, f64); 4]>>,
}

impl ResamplePlan {
    pub fn out_shape(&self) -> [usize; 4] {
        [self.sources.len(), self.src_shape[1], self.out_h, self.out_w]
    }
}

pub fn resample<E: Element>(x: &Tensor<E>, plan: &ResamplePlan) -> Tensor<E> {
    assert_eq!(x.shape(), &plan.src_shape[..], "resample source shape");
    let [_, c, h, w] = plan.src_shape;
    let plane = plan.out_h * plan.out_w;
    let mut y = Tensor::zeros(&plan.out_shape());
    let xd = x.data();
    let yd = y.data_mut();
    for (n, (&src, taps)) in plan.sources.iter().zip(&plan.taps).enumerate() {
        for ch in 0..c {
            let xs = &xd[(src * c + ch) * h * w..(src * c + ch + 1) * h * w];
            let ys = &mut yd[(n * c + ch) * plane..(n * c + ch + 1) * plane];
            for (o, t) in ys.iter_mut().zip(taps) {
                let mut acc = E::zero();
                for &(i, wt) in t {
                    if wt != 0.0 {
                        acc += xs[i as usize] * cst(wt);
                    }
                }
                *o = acc;
            }
        }
    }
    y
}

pub fn resample_transpose<E: Element>(g: &Tensor<E>, plan: &ResamplePlan) -> Tensor<E> {
    let [_, c, h, w] = plan.src_shape;
    let plane = plan.out_h * plan.out_w;
    let mut x = Tensor::zeros(&plan.src_shape);
    let gd = g.data();
    let xd = x.data_mut();
    for (n, (&src, taps)) in plan.sources.iter().zip(&plan.taps).enumerate() {
        for ch in 0..c {
            let gs = &gd[(n * c + ch) * plane..(n * c + ch + 1) * plane];
            let xs = &mut xd[(src * c + ch) * h * w..(src * c + ch + 1) * h * w];
            for (&gv, t) in gs.iter().zip(taps) {
                for &(i, wt) in t {
                    if wt != 0.0 {
                        xs[i as usize] += gv * cst(wt);
                    }
                }
            }
        }
    }
    x
}

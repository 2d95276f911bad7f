//! Forward and backward kernels for the layers of the U-Net.
//!
//! Convolutions work on a zero-padded copy of each input volume. In the
//! padded frame a kernel tap is a constant flat offset, so every tap is one
//! strided GEMM over the whole volume; outputs landing on the padding ring
//! are discarded.

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Shape5, Tensor5};

/// Taps of a 3x3x3 kernel.
pub const TAPS: usize = 27;

struct PadFrame {
    d: usize,
    h: usize,
    w: usize,
    /// Voxels of the padded volume.
    len: usize,
    /// First flat index at which every tap offset stays in range.
    start: usize,
    /// Number of flat positions covered by the tap GEMMs.
    span: usize,
}

impl PadFrame {
    fn new(d: usize, h: usize, w: usize) -> Self {
        let (pd, ph, pw) = (d + 2, h + 2, w + 2);
        let len = pd * ph * pw;
        let start = ph * pw + pw + 1;
        Self {
            d,
            h,
            w,
            len,
            start,
            span: len - 2 * start,
        }
    }

    fn tap_offset(&self, tap: usize) -> isize {
        let (kz, ky, kx) = ((tap / 9) as isize, ((tap / 3) % 3) as isize, (tap % 3) as isize);
        let ph = (self.h + 2) as isize;
        let pw = (self.w + 2) as isize;
        (kz - 1) * ph * pw + (ky - 1) * pw + (kx - 1)
    }

    /// Copy `channels` stacked volumes into a zeroed padded buffer.
    fn pad<T: Real>(&self, src: &[T], channels: usize) -> Vec<T> {
        let mut out = vec![T::zero(); channels * self.len];
        let (ph, pw) = (self.h + 2, self.w + 2);
        let n = self.d * self.h * self.w;
        for c in 0..channels {
            for z in 0..self.d {
                for y in 0..self.h {
                    let s = c * n + (z * self.h + y) * self.w;
                    let t = c * self.len + ((z + 1) * ph + y + 1) * pw + 1;
                    out[t..t + self.w].copy_from_slice(&src[s..s + self.w]);
                }
            }
        }
        out
    }

    /// Inverse of [`PadFrame::pad`]: gather the interior into `dst`.
    fn unpad_into<T: Real>(&self, src: &[T], channels: usize, dst: &mut [T]) {
        let (ph, pw) = (self.h + 2, self.w + 2);
        let n = self.d * self.h * self.w;
        for c in 0..channels {
            for z in 0..self.d {
                for y in 0..self.h {
                    let t = c * n + (z * self.h + y) * self.w;
                    let s = c * self.len + ((z + 1) * ph + y + 1) * pw + 1;
                    dst[t..t + self.w].copy_from_slice(&src[s..s + self.w]);
                }
            }
        }
    }
}

fn check_conv_shapes(op: &'static str, x: Shape5, w: Shape5, b: Shape5, taps: (usize, usize, usize)) -> Result<()> {
    if w.channels != x.channels || (w.depth, w.height, w.width) != taps || w.batch == 0 {
        return shape_err(op, format!("input {x} incompatible with weight {w}"));
    }
    if b.len() != w.batch {
        return shape_err(op, format!("bias {b} does not match {} output channels", w.batch));
    }
    Ok(())
}

/// 3x3x3 convolution, stride 1, zero "same" padding. Weight shape is
/// (out, in, 3, 3, 3); bias holds `out` values.
pub fn conv3d_forward<T: Real>(x: &Tensor5<T>, w: &Tensor5<T>, b: &Tensor5<T>) -> Result<Tensor5<T>> {
    let xs = x.shape();
    check_conv_shapes("conv3d", xs, w.shape(), b.shape(), (3, 3, 3))?;
    let (cin, cout) = (xs.channels, w.shape().batch);
    let frame = PadFrame::new(xs.depth, xs.height, xs.width);
    let n = xs.spatial();
    let out_shape = Shape5::new(xs.batch, cout, xs.depth, xs.height, xs.width);
    let mut out = Tensor5::zeros(out_shape);
    let mut out_pad = vec![T::zero(); cout * frame.len];
    for bi in 0..xs.batch {
        let src = &x.data()[bi * cin * n..(bi + 1) * cin * n];
        let in_pad = frame.pad(src, cin);
        out_pad.iter_mut().for_each(|v| *v = T::zero());
        for tap in 0..TAPS {
            let off = frame.start as isize + frame.tap_offset(tap);
            // SAFETY: every tap reads [start+off, start+off+span) inside each
            // padded channel and writes [start, start+span) of `out_pad`.
            unsafe {
                T::gemm(
                    cout,
                    cin,
                    frame.span,
                    T::one(),
                    w.data().as_ptr().add(tap),
                    (cin * TAPS) as isize,
                    TAPS as isize,
                    in_pad.as_ptr().offset(off),
                    frame.len as isize,
                    1,
                    T::one(),
                    out_pad.as_mut_ptr().add(frame.start),
                    frame.len as isize,
                    1,
                );
            }
        }
        let dst = &mut out.data_mut()[bi * cout * n..(bi + 1) * cout * n];
        frame.unpad_into(&out_pad, cout, dst);
        for (co, chunk) in dst.chunks_mut(n).enumerate() {
            let bias = b.data()[co];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
    }
    Ok(out)
}

/// Gradients of [`conv3d_forward`] with respect to input, weight and bias.
pub fn conv3d_backward<T: Real>(x: &Tensor5<T>, w: &Tensor5<T>, grad_out: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let xs = x.shape();
    let (cin, cout) = (xs.channels, w.shape().batch);
    let frame = PadFrame::new(xs.depth, xs.height, xs.width);
    let n = xs.spatial();
    let mut grad_x = vec![T::zero(); xs.len()];
    let mut grad_w = vec![T::zero(); w.shape().len()];
    let mut grad_b = vec![T::zero(); cout];
    let mut gin_pad = vec![T::zero(); cin * frame.len];
    for bi in 0..xs.batch {
        let g = &grad_out[bi * cout * n..(bi + 1) * cout * n];
        for (co, chunk) in g.chunks(n).enumerate() {
            grad_b[co] += chunk.iter().copied().sum::<T>();
        }
        let g_pad = frame.pad(g, cout);
        let in_pad = frame.pad(&x.data()[bi * cin * n..(bi + 1) * cin * n], cin);
        gin_pad.iter_mut().for_each(|v| *v = T::zero());
        for tap in 0..TAPS {
            let off = frame.start as isize + frame.tap_offset(tap);
            // SAFETY: same index ranges as the forward pass, read/write roles swapped.
            unsafe {
                T::gemm(
                    cin,
                    cout,
                    frame.span,
                    T::one(),
                    w.data().as_ptr().add(tap),
                    TAPS as isize,
                    (cin * TAPS) as isize,
                    g_pad.as_ptr().add(frame.start),
                    frame.len as isize,
                    1,
                    T::one(),
                    gin_pad.as_mut_ptr().offset(off),
                    frame.len as isize,
                    1,
                );
                T::gemm(
                    cout,
                    frame.span,
                    cin,
                    T::one(),
                    g_pad.as_ptr().add(frame.start),
                    frame.len as isize,
                    1,
                    in_pad.as_ptr().offset(off),
                    1,
                    frame.len as isize,
                    T::one(),
                    grad_w.as_mut_ptr().add(tap),
                    (cin * TAPS) as isize,
                    TAPS as isize,
                );
            }
        }
        frame.unpad_into(&gin_pad, cin, &mut grad_x[bi * cin * n..(bi + 1) * cin * n]);
    }
    (grad_x, grad_w, grad_b)
}

/// 1x1x1 convolution. Weight shape is (out, in, 1, 1, 1).
pub fn pointwise_forward<T: Real>(x: &Tensor5<T>, w: &Tensor5<T>, b: &Tensor5<T>) -> Result<Tensor5<T>> {
    let xs = x.shape();
    check_conv_shapes("pointwise", xs, w.shape(), b.shape(), (1, 1, 1))?;
    let (cin, cout, n) = (xs.channels, w.shape().batch, xs.spatial());
    let mut out = Tensor5::zeros(Shape5::new(xs.batch, cout, xs.depth, xs.height, xs.width));
    for bi in 0..xs.batch {
        let dst = &mut out.data_mut()[bi * cout * n..(bi + 1) * cout * n];
        for (co, chunk) in dst.chunks_mut(n).enumerate() {
            let bias = b.data()[co];
            chunk.iter_mut().for_each(|v| *v = bias);
        }
        // SAFETY: dense row-major (cout x cin) * (cin x n) into (cout x n).
        unsafe {
            T::gemm(
                cout,
                cin,
                n,
                T::one(),
                w.data().as_ptr(),
                cin as isize,
                1,
                x.data().as_ptr().add(bi * cin * n),
                n as isize,
                1,
                T::one(),
                dst.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Ok(out)
}

pub fn pointwise_backward<T: Real>(x: &Tensor5<T>, w: &Tensor5<T>, grad_out: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let xs = x.shape();
    let (cin, cout, n) = (xs.channels, w.shape().batch, xs.spatial());
    let mut grad_x = vec![T::zero(); xs.len()];
    let mut grad_w = vec![T::zero(); cout * cin];
    let mut grad_b = vec![T::zero(); cout];
    for bi in 0..xs.batch {
        let g = &grad_out[bi * cout * n..(bi + 1) * cout * n];
        for (co, chunk) in g.chunks(n).enumerate() {
            grad_b[co] += chunk.iter().copied().sum::<T>();
        }
        // SAFETY: dense operands, shapes as annotated.
        unsafe {
            // (cin x cout) * (cout x n)
            T::gemm(
                cin,
                cout,
                n,
                T::one(),
                w.data().as_ptr(),
                1,
                cin as isize,
                g.as_ptr(),
                n as isize,
                1,
                T::zero(),
                grad_x.as_mut_ptr().add(bi * cin * n),
                n as isize,
                1,
            );
            // (cout x n) * (n x cin)
            T::gemm(
                cout,
                n,
                cin,
                T::one(),
                g.as_ptr(),
                n as isize,
                1,
                x.data().as_ptr().add(bi * cin * n),
                1,
                n as isize,
                T::one(),
                grad_w.as_mut_ptr(),
                cin as isize,
                1,
            );
        }
    }
    (grad_x, grad_w, grad_b)
}

pub fn relu_forward<T: Real>(x: &Tensor5<T>) -> Tensor5<T> {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    out
}

pub fn relu_backward<T: Real>(x: &Tensor5<T>, grad_out: &[T]) -> Vec<T> {
    x.data()
        .iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect()
}

pub fn sigmoid_forward<T: Real>(x: &Tensor5<T>) -> Tensor5<T> {
    let mut out = x.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = T::one() / (T::one() + (-*v).exp()));
    out
}

/// Uses the forward output `y = sigmoid(x)`.
pub fn sigmoid_backward<T: Real>(y: &Tensor5<T>, grad_out: &[T]) -> Vec<T> {
    y.data()
        .iter()
        .zip(grad_out)
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect()
}

/// Max pooling with window == stride == `factors` (z, y, x). Returns the
/// output and, per output element, the flat input index of its maximum.
pub fn maxpool_forward<T: Real>(x: &Tensor5<T>, factors: [usize; 3]) -> Result<(Tensor5<T>, Vec<usize>)> {
    let s = x.shape();
    let [fz, fy, fx] = factors;
    if fz == 0 || fy == 0 || fx == 0 || s.depth % fz != 0 || s.height % fy != 0 || s.width % fx != 0 {
        return shape_err("maxpool3d", format!("input {s} not divisible by {factors:?}"));
    }
    let os = Shape5::new(s.batch, s.channels, s.depth / fz, s.height / fy, s.width / fx);
    let mut out = Tensor5::zeros(os);
    let mut arg = vec![0usize; os.len()];
    let mut o = 0;
    for b in 0..s.batch {
        for c in 0..s.channels {
            for z in 0..os.depth {
                for y in 0..os.height {
                    for xo in 0..os.width {
                        let mut best = x.index(b, c, z * fz, y * fy, xo * fx);
                        for dz in 0..fz {
                            for dy in 0..fy {
                                for dx in 0..fx {
                                    let i = x.index(b, c, z * fz + dz, y * fy + dy, xo * fx + dx);
                                    if x.data()[i] > x.data()[best] {
                                        best = i;
                                    }
                                }
                            }
                        }
                        out.data_mut()[o] = x.data()[best];
                        arg[o] = best;
                        o += 1;
                    }
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool_backward<T: Real>(input_len: usize, argmax: &[usize], grad_out: &[T]) -> Vec<T> {
    let mut g = vec![T::zero(); input_len];
    for (&i, &v) in argmax.iter().zip(grad_out) {
        g[i] += v;
    }
    g
}

/// Corner-aligned linear interpolation weights from `n` samples to `m`.
fn lerp_table(n: usize, m: usize) -> Vec<(usize, f64)> {
    (0..m)
        .map(|j| {
            if n == 1 || m == 1 {
                return (0, 0.0);
            }
            let pos = j as f64 * (n - 1) as f64 / (m - 1) as f64;
            let i0 = (pos.floor() as usize).min(n - 2);
            (i0, pos - i0 as f64)
        })
        .collect()
}

/// Resample one axis of a `[outer, n, inner]` array to `[outer, m, inner]`.
fn interp_axis<T: Real>(src: &[T], outer: usize, n: usize, inner: usize, m: usize) -> Vec<T> {
    let table = lerp_table(n, m);
    let mut out = vec![T::zero(); outer * m * inner];
    for o in 0..outer {
        for (j, &(i0, t)) in table.iter().enumerate() {
            let dst = (o * m + j) * inner;
            let a = (o * n + i0) * inner;
            if n == 1 || t == 0.0 {
                out[dst..dst + inner].copy_from_slice(&src[a..a + inner]);
                continue;
            }
            let (t, u) = (T::of(t), T::of(1.0 - t));
            let b = a + inner;
            for k in 0..inner {
                out[dst + k] = u * src[a + k] + t * src[b + k];
            }
        }
    }
    out
}

/// Transpose of [`interp_axis`].
fn interp_axis_adjoint<T: Real>(grad: &[T], outer: usize, n: usize, inner: usize, m: usize) -> Vec<T> {
    let table = lerp_table(n, m);
    let mut out = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        for (j, &(i0, t)) in table.iter().enumerate() {
            let src = (o * m + j) * inner;
            let a = (o * n + i0) * inner;
            if n == 1 || t == 0.0 {
                for k in 0..inner {
                    out[a + k] += grad[src + k];
                }
                continue;
            }
            let (t, u) = (T::of(t), T::of(1.0 - t));
            for k in 0..inner {
                out[a + k] += u * grad[src + k];
                out[a + inner + k] += t * grad[src + k];
            }
        }
    }
    out
}

/// Trilinear upsampling by integer `factors` (z, y, x), corner aligned.
pub fn upsample_forward<T: Real>(x: &Tensor5<T>, factors: [usize; 3]) -> Tensor5<T> {
    let s = x.shape();
    let (d2, h2, w2) = (s.depth * factors[0], s.height * factors[1], s.width * factors[2]);
    let bc = s.batch * s.channels;
    let a = interp_axis(x.data(), bc * s.depth * s.height, s.width, 1, w2);
    let a = interp_axis(&a, bc * s.depth, s.height, w2, h2);
    let a = interp_axis(&a, bc, s.depth, h2 * w2, d2);
    Tensor5::from_vec(Shape5::new(s.batch, s.channels, d2, h2, w2), a)
        .expect("upsample output length is consistent by construction")
}

pub fn upsample_backward<T: Real>(input: Shape5, factors: [usize; 3], grad_out: &[T]) -> Vec<T> {
    let s = input;
    let (d2, h2, w2) = (s.depth * factors[0], s.height * factors[1], s.width * factors[2]);
    let bc = s.batch * s.channels;
    let g = interp_axis_adjoint(grad_out, bc, s.depth, h2 * w2, d2);
    let g = interp_axis_adjoint(&g, bc * s.depth, s.height, w2, h2);
    interp_axis_adjoint(&g, bc * s.depth * s.height, s.width, 1, w2)
}

/// Channel concatenation `[a, b]`.
pub fn concat_forward<T: Real>(a: &Tensor5<T>, b: &Tensor5<T>) -> Result<Tensor5<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.batch, sa.depth, sa.height, sa.width) != (sb.batch, sb.depth, sb.height, sb.width) {
        return shape_err("concat_skip", format!("{sa} vs {sb}"));
    }
    let n = sa.spatial();
    let os = Shape5::new(sa.batch, sa.channels + sb.channels, sa.depth, sa.height, sa.width);
    let mut data = Vec::with_capacity(os.len());
    for bi in 0..sa.batch {
        data.extend_from_slice(&a.data()[bi * sa.channels * n..(bi + 1) * sa.channels * n]);
        data.extend_from_slice(&b.data()[bi * sb.channels * n..(bi + 1) * sb.channels * n]);
    }
    Tensor5::from_vec(os, data)
}

pub fn concat_backward<T: Real>(a: Shape5, b: Shape5, grad_out: &[T]) -> (Vec<T>, Vec<T>) {
    let n = a.spatial();
    let (na, nb) = (a.channels * n, b.channels * n);
    let mut ga = Vec::with_capacity(a.len());
    let mut gb = Vec::with_capacity(b.len());
    for chunk in grad_out.chunks(na + nb) {
        ga.extend_from_slice(&chunk[..na]);
        gb.extend_from_slice(&chunk[na..]);
    }
    (ga, gb)
}

/// Expand a single-channel foreground probability into `[1 - p, p]`.
pub fn two_class_forward<T: Real>(p: &Tensor5<T>) -> Result<Tensor5<T>> {
    let s = p.shape();
    if s.channels != 1 {
        return shape_err("two_class", format!("expected one channel, got {s}"));
    }
    let n = s.spatial();
    let mut data = Vec::with_capacity(2 * s.len());
    for chunk in p.data().chunks(n) {
        data.extend(chunk.iter().map(|&v| T::one() - v));
        data.extend_from_slice(chunk);
    }
    Tensor5::from_vec(Shape5::new(s.batch, 2, s.depth, s.height, s.width), data)
}

pub fn two_class_backward<T: Real>(p: Shape5, grad_out: &[T]) -> Vec<T> {
    let n = p.spatial();
    let mut g = Vec::with_capacity(p.len());
    for chunk in grad_out.chunks(2 * n) {
        g.extend(chunk[..n].iter().zip(&chunk[n..]).map(|(&bg, &fg)| fg - bg));
    }
    g
}

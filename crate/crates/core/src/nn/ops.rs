//! Pointwise and resampling operators.

use super::{Scalar, Shape4, Tensor};
use crate::exec;

pub fn relu<T: Scalar>(x: &mut Tensor<T>) {
    x.data.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Zero `dy` wherever the forward ReLU output `y` was not positive.
pub fn relu_backward<T: Scalar>(dy: &mut Tensor<T>, y: &Tensor<T>) {
    dy.data.iter_mut().zip(&y.data).for_each(|(g, y)| {
        if *y <= T::zero() {
            *g = T::zero()
        }
    });
}

/// Source taps for 2x linear upsampling with half-pixel centres.
fn taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

#[derive(Clone, Copy)]
enum Axis {
    Z,
    Y,
    X,
}

fn layout(s: Shape4, axis: Axis) -> (usize, usize, usize) {
    match axis {
        Axis::Z => (s.c, s.d, s.h * s.w),
        Axis::Y => (s.c * s.d, s.h, s.w),
        Axis::X => (s.c * s.d * s.h, s.w, 1),
    }
}

fn doubled(s: Shape4, axis: Axis) -> Shape4 {
    match axis {
        Axis::Z => Shape4 { d: 2 * s.d, ..s },
        Axis::Y => Shape4 { h: 2 * s.h, ..s },
        Axis::X => Shape4 { w: 2 * s.w, ..s },
    }
}

fn up_axis<T: Scalar>(x: &Tensor<T>, axis: Axis) -> Tensor<T> {
    let (_, n, inner) = layout(x.shape, axis);
    let tab = taps(n);
    let out_shape = doubled(x.shape, axis);
    let mut y = Tensor::zeros(out_shape);
    exec::for_each_chunk_mut(&mut y.data, 2 * n * inner, |outer, chunk| {
        let src = &x.data[outer * n * inner..(outer + 1) * n * inner];
        for (o, &(i0, i1, f)) in tab.iter().enumerate() {
            let (w0, w1) = (T::lit(1.0 - f), T::lit(f));
            let dst = &mut chunk[o * inner..(o + 1) * inner];
            let a = &src[i0 * inner..(i0 + 1) * inner];
            let b = &src[i1 * inner..(i1 + 1) * inner];
            for ((d, a), b) in dst.iter_mut().zip(a).zip(b) {
                *d = w0 * *a + w1 * *b;
            }
        }
    });
    y
}

fn up_axis_backward<T: Scalar>(dy: &Tensor<T>, in_shape: Shape4, axis: Axis) -> Tensor<T> {
    let (_, n, inner) = layout(in_shape, axis);
    let tab = taps(n);
    let mut dx = Tensor::zeros(in_shape);
    exec::for_each_chunk_mut(&mut dx.data, n * inner, |outer, chunk| {
        let src = &dy.data[outer * 2 * n * inner..(outer + 1) * 2 * n * inner];
        for (o, &(i0, i1, f)) in tab.iter().enumerate() {
            let (w0, w1) = (T::lit(1.0 - f), T::lit(f));
            let g = &src[o * inner..(o + 1) * inner];
            for (j, gv) in g.iter().enumerate() {
                chunk[i0 * inner + j] = chunk[i0 * inner + j] + w0 * *gv;
                chunk[i1 * inner + j] = chunk[i1 * inner + j] + w1 * *gv;
            }
        }
    });
    dx
}

/// Trilinear 2x upsampling (half-pixel centres, edge clamped), applied as
/// three separable linear passes.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let z = up_axis(x, Axis::Z);
    let y = up_axis(&z, Axis::Y);
    up_axis(&y, Axis::X)
}

pub fn upsample2_backward<T: Scalar>(dy: &Tensor<T>, in_shape: Shape4) -> Tensor<T> {
    let s1 = doubled(in_shape, Axis::Z);
    let s2 = doubled(s1, Axis::Y);
    let g2 = up_axis_backward(dy, s2, Axis::X);
    let g1 = up_axis_backward(&g2, s1, Axis::Y);
    up_axis_backward(&g1, in_shape, Axis::Z)
}

/// Output z-indices influenced by input z-index `i` under [`upsample2`].
pub fn upsample2_reach(i: usize, n: usize) -> (usize, usize) {
    (
        (2 * i).saturating_sub(1),
        (2 * i + 2).min(2 * n - 1),
    )
}

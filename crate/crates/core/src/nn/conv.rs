//! 3D convolution by slab-wise im2col and GEMM.
//!
//! Output voxels are processed in slabs of whole output z-planes so the
//! column buffer stays bounded. Every output element is produced by the same
//! GEMM reduction order no matter how slabs are scheduled.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Scalar, Shape4, Tensor};
use crate::error::{Error, Result};
use crate::exec;

/// Column-buffer budget per slab, in elements.
const SLAB_ELEMS: usize = 1 << 22;

#[derive(Clone, Copy)]
struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

impl<T> SendPtr<T> {
    fn get(self) -> *mut T {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv3d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Row-major `[out_ch, in_ch * kernel^3]`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Parameter gradients of one convolution.
#[derive(Clone, Debug)]
pub struct ConvGrad<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv3d<T> {
    /// He-normal initialised convolution with zero bias.
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let pad = kernel / 2;
        let fan_in = (in_ch * kernel.pow(3)) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let weight = (0..out_ch * in_ch * kernel.pow(3))
            .map(|_| T::lit(normal.sample(rng)))
            .collect();
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            weight,
            bias: vec![T::zero(); out_ch],
        }
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel.pow(3)
    }

    fn out_extent(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_shape(&self, input: Shape4) -> Shape4 {
        Shape4::new(
            self.out_ch,
            self.out_extent(input.d),
            self.out_extent(input.h),
            self.out_extent(input.w),
        )
    }

    fn check_input(&self, shape: Shape4) -> Result<()> {
        if shape.c != self.in_ch {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {shape}",
                self.in_ch
            )));
        }
        Ok(())
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    fn slab_planes(&self, out: Shape4) -> usize {
        let per_plane = self.patch_len() * out.h * out.w;
        (SLAB_ELEMS / per_plane.max(1)).clamp(1, out.d)
    }

    pub fn cast<U: Scalar>(&self) -> Conv3d<U> {
        Conv3d {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            weight: self.weight.iter().map(|v| U::lit(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape)?;
        let out = self.out_shape(x.shape);
        let plane = out.h * out.w;
        let n_out = out.spatial();
        let mut y = vec![T::zero(); out.len()];
        let planes = self.slab_planes(out);
        let slabs: Vec<(usize, usize)> = (0..out.d)
            .step_by(planes)
            .map(|z0| (z0, (z0 + planes).min(out.d)))
            .collect();
        let k = self.patch_len();
        let yp = SendPtr(y.as_mut_ptr());
        exec::map_slice(&slabs, |&(z0, z1)| {
            let n = (z1 - z0) * plane;
            let owned;
            let (bptr, rsb) = if self.is_pointwise() {
                (x.data[z0 * plane..].as_ptr(), x.shape.spatial() as isize)
            } else {
                let mut col = vec![T::zero(); k * n];
                self.im2col(x, out, z0, z1, &mut col);
                owned = col;
                (owned.as_ptr(), n as isize)
            };
            // SAFETY: slabs write disjoint column ranges of `y`.
            unsafe {
                T::gemm(
                    self.out_ch,
                    k,
                    n,
                    T::one(),
                    self.weight.as_ptr(),
                    k as isize,
                    1,
                    bptr,
                    rsb,
                    1,
                    T::zero(),
                    yp.get().add(z0 * plane),
                    n_out as isize,
                    1,
                );
            }
        });
        for (o, b) in self.bias.iter().enumerate() {
            if !b.is_zero() {
                y[o * n_out..(o + 1) * n_out]
                    .iter_mut()
                    .for_each(|v| *v = *v + *b);
            }
        }
        Tensor::from_vec(out, y)
    }

    /// Backward pass. Returns the input gradient; accumulates parameter
    /// gradients into `grad` when given.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        mut grad: Option<&mut ConvGrad<T>>,
    ) -> Result<Tensor<T>> {
        self.check_input(x.shape)?;
        let out = self.out_shape(x.shape);
        if dy.shape != out {
            return Err(Error::Shape(format!(
                "conv gradient {} does not match output {out}",
                dy.shape
            )));
        }
        let plane = out.h * out.w;
        let n_out = out.spatial();
        let k = self.patch_len();
        let planes = self.slab_planes(out);
        let mut dx: Tensor<T> = Tensor::zeros(x.shape);

        if let Some(g) = grad.as_deref_mut() {
            for o in 0..self.out_ch {
                let s: T = dy.data[o * n_out..(o + 1) * n_out].iter().copied().sum();
                g.bias[o] = g.bias[o] + s;
            }
        }

        for z0 in (0..out.d).step_by(planes) {
            let z1 = (z0 + planes).min(out.d);
            let n = (z1 - z0) * plane;
            let dy_ptr = dy.data[z0 * plane..].as_ptr();

            if let Some(g) = grad.as_deref_mut() {
                let owned;
                let (cptr, csb) = if self.is_pointwise() {
                    (x.data[z0 * plane..].as_ptr(), x.shape.spatial() as isize)
                } else {
                    let mut col = vec![T::zero(); k * n];
                    self.im2col(x, out, z0, z1, &mut col);
                    owned = col;
                    (owned.as_ptr(), n as isize)
                };
                // dW[o, r] += sum_j dy[o, j] * col[r, j]
                unsafe {
                    T::gemm(
                        self.out_ch,
                        n,
                        k,
                        T::one(),
                        dy_ptr,
                        n_out as isize,
                        1,
                        cptr,
                        1,
                        csb,
                        T::one(),
                        g.weight.as_mut_ptr(),
                        k as isize,
                        1,
                    );
                }
            }

            if self.is_pointwise() {
                // dx[c, j] = sum_o W[o, c] dy[o, j]
                let sp = x.shape.spatial();
                unsafe {
                    T::gemm(
                        k,
                        self.out_ch,
                        n,
                        T::one(),
                        self.weight.as_ptr(),
                        1,
                        k as isize,
                        dy_ptr,
                        n_out as isize,
                        1,
                        T::zero(),
                        dx.data.as_mut_ptr().add(z0 * plane),
                        sp as isize,
                        1,
                    );
                }
            } else {
                let mut dcol = vec![T::zero(); k * n];
                let dcp = SendPtr(dcol.as_mut_ptr());
                let panels: Vec<(usize, usize)> = (0..n)
                    .step_by(2048)
                    .map(|j0| (j0, (j0 + 2048).min(n)))
                    .collect();
                exec::map_slice(&panels, |&(j0, j1)| unsafe {
                    T::gemm(
                        k,
                        self.out_ch,
                        j1 - j0,
                        T::one(),
                        self.weight.as_ptr(),
                        1,
                        k as isize,
                        dy.data[z0 * plane + j0..].as_ptr(),
                        n_out as isize,
                        1,
                        T::zero(),
                        dcp.get().add(j0),
                        n as isize,
                        1,
                    );
                });
                self.col2im(&dcol, &mut dx, out, z0, z1);
            }
        }
        Ok(dx)
    }

    /// Fill `col` (`[patch_len, n]`) with input patches for output planes
    /// `z0..z1`.
    fn im2col(&self, x: &Tensor<T>, out: Shape4, z0: usize, z1: usize, col: &mut [T]) {
        let n = (z1 - z0) * out.h * out.w;
        let (ks, s, p) = (self.kernel, self.stride, self.pad);
        let xs = x.shape;
        exec::for_each_chunk_mut(col, n, |r, row| {
            let kx = r % ks;
            let ky = (r / ks) % ks;
            let kz = (r / (ks * ks)) % ks;
            let ci = r / (ks * ks * ks);
            let chan = x.channel(ci);
            let mut j = 0;
            for oz in z0..z1 {
                let iz = (oz * s + kz) as isize - p as isize;
                if iz < 0 || iz >= xs.d as isize {
                    row[j..j + out.h * out.w].fill(T::zero());
                    j += out.h * out.w;
                    continue;
                }
                for oy in 0..out.h {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= xs.h as isize {
                        row[j..j + out.w].fill(T::zero());
                        j += out.w;
                        continue;
                    }
                    let base = (iz as usize * xs.h + iy as usize) * xs.w;
                    for ox in 0..out.w {
                        let ix = (ox * s + kx) as isize - p as isize;
                        row[j] = if ix < 0 || ix >= xs.w as isize {
                            T::zero()
                        } else {
                            chan[base + ix as usize]
                        };
                        j += 1;
                    }
                }
            }
        });
    }

    /// Scatter-add `dcol` back into `dx`. Parallel over input channels.
    fn col2im(&self, dcol: &[T], dx: &mut Tensor<T>, out: Shape4, z0: usize, z1: usize) {
        let n = (z1 - z0) * out.h * out.w;
        let (ks, s, p) = (self.kernel, self.stride, self.pad);
        let xs = dx.shape;
        let k3 = ks * ks * ks;
        exec::for_each_chunk_mut(&mut dx.data, xs.spatial(), |ci, chan| {
            for kr in 0..k3 {
                let kx = kr % ks;
                let ky = (kr / ks) % ks;
                let kz = kr / (ks * ks);
                let row = &dcol[(ci * k3 + kr) * n..(ci * k3 + kr + 1) * n];
                let mut j = 0;
                for oz in z0..z1 {
                    let iz = (oz * s + kz) as isize - p as isize;
                    if iz < 0 || iz >= xs.d as isize {
                        j += out.h * out.w;
                        continue;
                    }
                    for oy in 0..out.h {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= xs.h as isize {
                            j += out.w;
                            continue;
                        }
                        let base = (iz as usize * xs.h + iy as usize) * xs.w;
                        for ox in 0..out.w {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < xs.w as isize {
                                let t = &mut chan[base + ix as usize];
                                *t = *t + row[j];
                            }
                            j += 1;
                        }
                    }
                }
            }
        });
    }

    pub fn zero_grad(&self) -> ConvGrad<T> {
        ConvGrad {
            weight: vec![T::zero(); self.weight.len()],
            bias: vec![T::zero(); self.bias.len()],
        }
    }
}

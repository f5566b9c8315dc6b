use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::exec;

pub const EPS: f64 = 1e-5;

/// Per-channel statistics of one instance-normalisation layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

impl<T: Scalar> NormStats<T> {
    pub fn compute(x: &Tensor<T>) -> Self {
        let n = x.shape.spatial();
        let stats = exec::map_range(x.shape.c, |c| {
            let chan = x.channel(c);
            let mean = chan.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let var = chan
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            (T::lit(mean), T::lit(1.0 / (var + EPS).sqrt()))
        });
        let (mean, inv_std) = stats.into_iter().unzip();
        Self { mean, inv_std }
    }

    pub fn cast<U: Scalar>(&self) -> NormStats<U> {
        NormStats {
            mean: self.mean.iter().map(|v| U::lit(v.as_f64())).collect(),
            inv_std: self.inv_std.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// `(x - mean) * inv_std` per channel.
pub fn normalize<T: Scalar>(x: &Tensor<T>, stats: &NormStats<T>) -> Tensor<T> {
    let mut y = x.clone();
    let n = x.shape.spatial();
    exec::for_each_chunk_mut(&mut y.data, n, |c, chan| {
        let (m, s) = (stats.mean[c], stats.inv_std[c]);
        chan.iter_mut().for_each(|v| *v = (*v - m) * s);
    });
    y
}

/// Gradient through normalisation with statistics treated as constants.
pub fn backward_frozen<T: Scalar>(dy: &Tensor<T>, stats: &NormStats<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    let n = dy.shape.spatial();
    exec::for_each_chunk_mut(&mut dx.data, n, |c, chan| {
        let s = stats.inv_std[c];
        chan.iter_mut().for_each(|v| *v = *v * s);
    });
    dx
}

/// Gradient through normalisation including the dependence of the
/// statistics on the input. `xhat` is the normalised forward output.
pub fn backward_live<T: Scalar>(dy: &Tensor<T>, xhat: &Tensor<T>, stats: &NormStats<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    let n = dy.shape.spatial();
    exec::for_each_chunk_mut(&mut dx.data, n, |c, chan| {
        let xh = xhat.channel(c);
        let mean_dy = chan.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
        let mean_dy_xh = chan
            .iter()
            .zip(xh)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum::<f64>()
            / n as f64;
        let s = stats.inv_std[c].as_f64();
        chan.iter_mut().zip(xh).for_each(|(v, xh)| {
            *v = T::lit(s * (v.as_f64() - mean_dy - xh.as_f64() * mean_dy_xh));
        });
    });
    dx
}

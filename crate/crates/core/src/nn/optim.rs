//! Adam and limited-memory BFGS.

use std::collections::VecDeque;

use super::Scalar;

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }

    /// Advance the step counter; call once before the `update`s of a step.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    /// Update parameter group `slot` in place.
    pub fn update(&mut self, slot: usize, param: &mut [T], grad: &[T]) {
        while self.moments.len() <= slot {
            self.moments.push((Vec::new(), Vec::new()));
        }
        let (m, v) = &mut self.moments[slot];
        if m.len() != param.len() {
            *m = vec![T::zero(); param.len()];
            *v = vec![T::zero(); param.len()];
        }
        let t = self.t.max(1);
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (ob1, ob2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step = T::lit(self.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(self.eps);
        for (((p, g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + ob1 * *g;
            *v = b2 * *v + ob2 * *g * *g;
            *p = *p - step * *m / ((*v * inv_bc2).sqrt() + eps);
        }
    }
}

/// Outcome of one L-BFGS iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LbfgsStep {
    /// Accepted a step; carries the new objective value.
    Moved(f64),
    /// No descent direction or line search failed; `x` unchanged.
    Stalled,
    /// The objective or gradient became non-finite; `x` unchanged.
    NonFinite,
}

/// L-BFGS with two-loop recursion and Armijo backtracking.
#[derive(Clone, Debug)]
pub struct Lbfgs {
    pub history: usize,
    pub lr: f64,
    pub max_backtracks: usize,
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    current: Option<(f64, Vec<f64>)>,
}

impl Lbfgs {
    pub fn new(history: usize, lr: f64) -> Self {
        Self {
            history,
            lr,
            max_backtracks: 20,
            pairs: VecDeque::new(),
            current: None,
        }
    }

    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            axpy(-a, y, &mut q);
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        } else {
            // No curvature information: the largest coordinate moves by `lr`.
            let inf = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let scale = self.lr / inf.max(f64::MIN_POSITIVE);
            q.iter_mut().for_each(|v| *v *= scale);
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            axpy(a - b, s, &mut q);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    /// One iteration on `x`. `eval` returns objective and gradient.
    pub fn step<T, F>(&mut self, x: &mut [T], eval: &mut F) -> LbfgsStep
    where
        T: Scalar,
        F: FnMut(&[T]) -> Option<(f64, Vec<T>)>,
    {
        let (f0, g0) = match self.current.take() {
            Some(c) => c,
            None => match eval(x) {
                Some((f, g)) => (f, g.iter().map(|v| v.as_f64()).collect::<Vec<_>>()),
                None => return LbfgsStep::NonFinite,
            },
        };
        if !f0.is_finite() || g0.iter().any(|v| !v.is_finite()) {
            return LbfgsStep::NonFinite;
        }
        let dir = self.direction(&g0);
        let slope = dot(&g0, &dir);
        if slope >= 0.0 || !slope.is_finite() {
            self.pairs.clear();
            self.current = Some((f0, g0));
            return LbfgsStep::Stalled;
        }
        let x0: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
        let mut t = 1.0;
        let mut trial: Vec<T> = vec![T::zero(); x.len()];
        for _ in 0..self.max_backtracks {
            for ((tv, x0), d) in trial.iter_mut().zip(&x0).zip(&dir) {
                *tv = T::lit(x0 + t * d);
            }
            match eval(&trial) {
                Some((f1, g1)) if f1.is_finite() => {
                    if f1 <= f0 + 1e-4 * t * slope {
                        let g1: Vec<f64> = g1.iter().map(|v| v.as_f64()).collect();
                        if g1.iter().any(|v| !v.is_finite()) {
                            return LbfgsStep::NonFinite;
                        }
                        let s: Vec<f64> = dir.iter().map(|d| t * d).collect();
                        let y: Vec<f64> = g1.iter().zip(&g0).map(|(a, b)| a - b).collect();
                        let sy = dot(&s, &y);
                        if sy > 1e-10 * dot(&y, &y).max(f64::MIN_POSITIVE) {
                            if self.pairs.len() == self.history {
                                self.pairs.pop_front();
                            }
                            self.pairs.push_back((s, y, 1.0 / sy));
                        }
                        x.copy_from_slice(&trial);
                        self.current = Some((f1, g1));
                        return LbfgsStep::Moved(f1);
                    }
                }
                _ => {}
            }
            t *= 0.5;
        }
        self.current = Some((f0, g0));
        LbfgsStep::Stalled
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

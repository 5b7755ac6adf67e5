use crate::model::{Group, ParamStore};
use crate::tensor::Scalar;

/// Linear warmup over `ceil(warmup · total)` steps, then linear decay to 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LinearSchedule {
    pub fn new(peak: f64, total_steps: usize, warmup: f64) -> Self {
        let warmup_steps = ((warmup * total_steps as f64).ceil() as usize).min(total_steps);
        Self {
            peak,
            total_steps,
            warmup_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let rest = (self.total_steps - self.warmup_steps) as f64;
        self.peak * (self.total_steps - step) as f64 / rest
    }
}

/// Adam with decoupled weight decay and bias correction.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| vec![T::zero(); p.value.numel()])
                .collect()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. `grads` is in store order; `lr` maps a group to its rate.
    /// Groups with a zero rate are left untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Vec<T>],
        lr: impl Fn(Group) -> f64,
    ) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let (c1, c2) = (T::from_f64_lossy(c1), T::from_f64_lossy(c2));
        let eps = T::from_f64_lossy(self.eps);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let rate = lr(p.group);
            if rate == 0.0 {
                continue;
            }
            let rate = T::from_f64_lossy(rate);
            let wd = if p.decay {
                T::from_f64_lossy(self.weight_decay)
            } else {
                T::zero()
            };
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + ob1 * g[k];
                v[k] = b2 * v[k] + ob2 * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *w -= rate * (mhat / (vhat.sqrt() + eps) + wd * *w);
            }
        }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| {
            let x = x.to_f64_lossy();
            x * x
        })
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64_lossy(max_norm / norm);
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

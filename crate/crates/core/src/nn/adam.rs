//! Adam optimizer over a [`ParamStore`].

use ndarray::ArrayD;

use super::{Grads, ParamKind, ParamStore, Scalar};

/// Adam with bias correction. Buffers (running statistics) are never updated.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    beta1: T,
    beta2: T,
    eps: T,
    step_count: u64,
    m: Vec<Option<ArrayD<T>>>,
    v: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1: T::from_f64(beta1),
            beta2: T::from_f64(beta2),
            eps: T::from_f64(eps),
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update with learning rate `lr`. Parameters without a
    /// gradient are left untouched (their moments do not advance either,
    /// matching lazy sparse-update behaviour).
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) {
        if self.m.len() < params.len() {
            self.m.resize_with(params.len(), || None);
            self.v.resize_with(params.len(), || None);
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let lr = T::from_f64(lr);
        let one = T::one();
        let bc1 = one - self.beta1.powi(t);
        let bc2 = one - self.beta2.powi(t);
        for idx in 0..params.len() {
            let id = super::ParamId(idx);
            if params.entry(id).kind != ParamKind::Trainable {
                continue;
            }
            let Some(grad) = grads.get(id) else { continue };
            let m = self.m[idx].get_or_insert_with(|| ArrayD::zeros(grad.shape().to_vec()));
            let v = self.v[idx].get_or_insert_with(|| ArrayD::zeros(grad.shape().to_vec()));
            let value = params.get_mut(id);
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            ndarray::Zip::from(value)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w = *w - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamId;

    #[test]
    fn converges_on_a_quadratic() {
        // Minimize (w - 3)^2 elementwise.
        let mut params = ParamStore::<f64>::new();
        let id = params.add("w", ParamKind::Trainable, ArrayD::zeros(vec![4]));
        let mut opt = Adam::new(0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let g = params.get(id).mapv(|w| 2.0 * (w - 3.0));
            let mut grads = Grads::zeros(params.len());
            grads.accumulate(id, g);
            opt.step(&mut params, &grads, 0.05);
        }
        for &w in params.get(id).iter() {
            assert!((w - 3.0).abs() < 1e-3, "{w}");
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first Adam step is lr * sign(grad).
        let mut params = ParamStore::<f64>::new();
        let id = params.add("w", ParamKind::Trainable, ArrayD::zeros(vec![1]));
        let mut opt = Adam::new(0.9, 0.999, 1e-8);
        let mut grads = Grads::zeros(params.len());
        grads.accumulate(id, ArrayD::from_elem(vec![1], 0.7));
        opt.step(&mut params, &grads, 0.01);
        let w = params.get(ParamId(0)).as_slice().unwrap()[0];
        assert!((w + 0.01).abs() < 1e-6, "{w}");
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut params = ParamStore::<f64>::new();
        let id = params.add("buf", ParamKind::Buffer, ArrayD::from_elem(vec![2], 5.0));
        let mut opt = Adam::new(0.9, 0.999, 1e-8);
        let mut grads = Grads::zeros(params.len());
        grads.accumulate(id, ArrayD::from_elem(vec![2], 1.0));
        opt.step(&mut params, &grads, 0.1);
        assert!(params.get(id).iter().all(|&v| v == 5.0));
    }
}

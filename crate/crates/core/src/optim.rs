//! Optimizers: AdamW for the denoiser, SGD with momentum for the classifier.

use ndarray::ArrayD;

use crate::autodiff::{Grads, Real};
use crate::params::ParamStore;

/// Decoupled-weight-decay adaptive-moment optimizer.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        let m = store.iter().map(|(_, e)| ArrayD::zeros(e.value.raw_dim())).collect();
        let v = store.iter().map(|(_, e)| ArrayD::zeros(e.value.raw_dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. Parameters without a gradient this step are only
    /// subject to weight decay skipping entirely (their moments are frozen).
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let eps = T::from_f64(self.eps);
        let lr = T::from_f64(self.lr);
        let decay = T::from_f64(self.lr * self.weight_decay);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);

        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.value_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + one_m_b1 * g;
                    *v = b2 * *v + one_m_b2 * g * g;
                    let m_hat = *m * inv_bc1;
                    let v_hat = *v * inv_bc2;
                    *p = *p - lr * m_hat / (v_hat.sqrt() + eps) - decay * *p;
                });
        }
    }

    /// Moment arrays in parameter order, for checkpointing.
    pub fn moments(&self) -> (&[ArrayD<T>], &[ArrayD<T>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<ArrayD<T>>, v: Vec<ArrayD<T>>) {
        assert_eq!(m.len(), self.m.len(), "moment count mismatch");
        assert_eq!(v.len(), self.v.len(), "moment count mismatch");
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

/// Plain SGD with momentum.
#[derive(Debug, Clone)]
pub struct SgdMomentum<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<ArrayD<T>>,
}

impl<T: Real> SgdMomentum<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, momentum: f64) -> Self {
        let velocity = store.iter().map(|(_, e)| ArrayD::zeros(e.value.raw_dim())).collect();
        Self { lr, momentum, velocity }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) {
        let mu = T::from_f64(self.momentum);
        let lr = T::from_f64(self.lr);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let vel = &mut self.velocity[id.0];
            let p = store.value_mut(id);
            ndarray::Zip::from(p).and(vel).and(g).for_each(|p, vel, &g| {
                *vel = mu * *vel - lr * g;
                *p = *p + *vel;
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use ndarray::IxDyn;

    fn quadratic_loss_grads(store: &ParamStore<f64>) -> Grads<f64> {
        // loss = mean((p - 3)^2)
        let mut tape = Tape::new();
        let id = store.find("p").unwrap();
        let p = tape.param(store, id);
        let shifted = tape.affine(p, 1.0, -3.0);
        let sq = tape.square(shifted);
        let loss = tape.mean_all(sq);
        tape.backward(loss)
    }

    #[test]
    fn adamw_descends_quadratic() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add("p", ArrayD::zeros(IxDyn(&[4])));
        let mut opt = AdamW::new(&store, 0.1, 0.0);
        for _ in 0..200 {
            let grads = quadratic_loss_grads(&store);
            opt.step(&mut store, &grads);
        }
        let id = store.find("p").unwrap();
        for &v in store.value(id).iter() {
            assert!((v - 3.0).abs() < 0.05, "got {}", v);
        }
    }

    #[test]
    fn adamw_zero_lr_keeps_parameters() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add("p", ArrayD::from_elem(IxDyn(&[4]), 1.5));
        let mut opt = AdamW::new(&store, 0.0, 0.01);
        let grads = quadratic_loss_grads(&store);
        opt.step(&mut store, &grads);
        let id = store.find("p").unwrap();
        for &v in store.value(id).iter() {
            assert_eq!(v, 1.5);
        }
    }

    #[test]
    fn sgd_descends_quadratic() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add("p", ArrayD::zeros(IxDyn(&[4])));
        let mut opt = SgdMomentum::new(&store, 0.1, 0.9);
        for _ in 0..100 {
            let grads = quadratic_loss_grads(&store);
            opt.step(&mut store, &grads);
        }
        let id = store.find("p").unwrap();
        for &v in store.value(id).iter() {
            assert!((v - 3.0).abs() < 0.05, "got {}", v);
        }
    }
}

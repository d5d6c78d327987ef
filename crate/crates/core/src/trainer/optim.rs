//! AdamW with decoupled weight decay and a constant learning rate.

use crate::config::TrainConfig;
use crate::error::{FobaError, Result};
use crate::nn::{ParamStore, Tensor};

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl AdamW {
    /// Zero moments shaped like every parameter in `store`.
    pub fn new(cfg: &TrainConfig, store: &ParamStore<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moments(&self) -> &[Tensor<f32>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<f32>] {
        &self.v
    }

    /// Restores the moment buffers, checking their shapes against `store`.
    pub fn set_state(&mut self, t: u64, m: Vec<Tensor<f32>>, v: Vec<Tensor<f32>>, store: &ParamStore<f32>) -> Result<()> {
        if m.len() != store.len() || v.len() != store.len() {
            return Err(FobaError::Checkpoint(format!(
                "optimizer state has {}/{} tensors for {} parameters",
                m.len(),
                v.len(),
                store.len()
            )));
        }
        for ((_, p), (a, b)) in store.iter().zip(m.iter().zip(&v)) {
            if a.shape() != p.value.shape() || b.shape() != p.value.shape() {
                return Err(FobaError::Checkpoint(format!("optimizer state shape mismatch for {}", p.name)));
            }
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update. `grads` is indexed like the store; `None` entries (frozen
    /// or unused parameters) are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(FobaError::ShapeMismatch(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(grad) = &grads[i] else { continue };
            let param = store.get_mut(id);
            if !param.trainable {
                continue;
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((p, &g), m), v) in param.value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64;
                let mt = self.beta1 * *m as f64 + (1.0 - self.beta1) * g;
                let vt = self.beta2 * *v as f64 + (1.0 - self.beta2) * g * g;
                *m = mt as f32;
                *v = vt as f32;
                let update = (mt / bc1) / ((vt / bc2).sqrt() + self.eps);
                *p = (*p as f64 * decay - self.lr * update) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn store(values: &[f32]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(&[values.len()], values.to_vec()).unwrap(), Init::Zeros)
            .unwrap();
        s
    }

    fn cfg(lr: f64, wd: f64) -> TrainConfig {
        TrainConfig {
            lr,
            weight_decay: wd,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn matches_scalar_recurrence() {
        let c = cfg(1e-2, 0.1);
        let mut s = store(&[0.5]);
        let mut opt = AdamW::new(&c, &s);
        let grads = [0.3, -1.2, 0.7];
        let (mut p, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            p -= c.lr * c.weight_decay * p;
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mh = m / (1.0 - c.beta1.powi(t));
            let vh = v / (1.0 - c.beta2.powi(t));
            p -= c.lr * mh / (vh.sqrt() + c.adam_eps);
            opt.step(&mut s, &[Some(Tensor::from_vec(&[1], vec![g as f32]).unwrap())]).unwrap();
            let got = s.iter().next().unwrap().1.value.data()[0] as f64;
            assert!((got - p).abs() < 1e-6, "step {}: {} vs {}", t, got, p);
        }
        assert_eq!(opt.t, 3);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let c = cfg(1e-3, 1e-12);
        let mut s = store(&[0.0, 0.0]);
        let mut opt = AdamW::new(&c, &s);
        opt.step(&mut s, &[Some(Tensor::from_vec(&[2], vec![4.0, -0.01]).unwrap())]).unwrap();
        let p = s.iter().next().unwrap().1.value.data().to_vec();
        assert!((p[0] + 1e-3).abs() < 1e-7 && (p[1] - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let c = cfg(0.1, 0.5);
        let mut s = store(&[2.0]);
        let mut opt = AdamW::new(&c, &s);
        opt.step(&mut s, &[Some(Tensor::zeros(&[1]))]).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.data()[0], 2.0 * (1.0 - 0.05) as f32);
        // missing gradients leave the parameter alone
        opt.step(&mut s, &[None]).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.data()[0], 1.9);
    }

    #[test]
    fn state_shapes_are_checked() {
        let s = store(&[1.0, 2.0]);
        let mut opt = AdamW::new(&TrainConfig::default(), &s);
        assert!(opt.set_state(1, vec![Tensor::zeros(&[3])], vec![Tensor::zeros(&[2])], &s).is_err());
        assert!(opt.set_state(1, vec![], vec![], &s).is_err());
        opt.set_state(5, vec![Tensor::ones(&[2])], vec![Tensor::ones(&[2])], &s).unwrap();
        assert_eq!(opt.t, 5);
    }
}

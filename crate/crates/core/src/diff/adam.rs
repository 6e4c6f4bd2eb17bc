use super::ParamStore;

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update from the accumulated gradients, which are
/// zeroed afterwards.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) {
    let t = store.bump_step() as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (_, e) in store.iter_mut() {
        let g = e.grad.data_mut();
        let m = e.adam_m.data_mut();
        let v = e.adam_v.data_mut();
        let w = e.value.data_mut();
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            w[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            g[i] = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::DenseArray;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = ParamStore::new();
        let id = s.insert("w", DenseArray::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        s.entry_mut(id).grad.data_mut().copy_from_slice(&[0.5, -2.0, 0.0]);
        adam_step(&mut s, &AdamConfig { lr: 0.1, ..Default::default() });
        let w = s.value(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 2.1).abs() < 1e-6);
        assert_eq!(w[2], 3.0);
        assert_eq!(s.grad(id).sum(), 0.0);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn zero_lr_keeps_values_bit_identical() {
        let mut s = ParamStore::new();
        let id = s.insert("w", DenseArray::from_vec(&[2], vec![0.1, -7.3]).unwrap()).unwrap();
        let before = s.value(id).clone();
        for _ in 0..5 {
            s.entry_mut(id).grad.data_mut().copy_from_slice(&[1.0, -3.0]);
            adam_step(&mut s, &AdamConfig { lr: 0.0, ..Default::default() });
        }
        assert_eq!(s.value(id), &before);
    }
}

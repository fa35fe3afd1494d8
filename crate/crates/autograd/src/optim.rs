use crate::{Float, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are keyed by [`ParamId`].
#[derive(Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        self.step += 1;
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of_f64(c.beta1), T::of_f64(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size = T::of_f64(c.lr / bias1);
        let inv_bias2 = T::of_f64(1.0 / bias2);
        let eps = T::of_f64(c.eps);
        for (id, g) in grads {
            let i = id.index();
            let shape = g.shape().to_vec();
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(shape));
            let (md, vd) = (m.data_mut(), v.data_mut());
            let p = store.get_mut(*id).data_mut();
            for (((pi, mi), vi), &gi) in p.iter_mut().zip(md.iter_mut()).zip(vd.iter_mut()).zip(g.data()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *pi -= step_size * *mi / ((*vi * inv_bias2).sqrt() + eps);
            }
        }
    }

    /// Moment buffers as named tensors (`<param>.m` / `<param>.v`) plus the step count.
    pub fn export(&self, store: &ParamStore<T>) -> (u64, Vec<(String, Tensor<T>)>) {
        let mut out = Vec::new();
        for id in store.ids() {
            let i = id.index();
            if let (Some(Some(m)), Some(Some(v))) = (self.first.get(i), self.second.get(i)) {
                out.push((format!("{}.m", store.name(id)), m.clone()));
                out.push((format!("{}.v", store.name(id)), v.clone()));
            }
        }
        (self.step, out)
    }

    pub fn import(&mut self, store: &ParamStore<T>, step: u64, tensors: &[(String, Tensor<T>)]) {
        self.step = step;
        self.first = vec![None; store.len()];
        self.second = vec![None; store.len()];
        for (name, t) in tensors {
            let (base, slot) = match name.rsplit_once('.') {
                Some((base, "m")) => (base, 0),
                Some((base, "v")) => (base, 1),
                _ => continue,
            };
            if let Some(id) = store.id(base) {
                if slot == 0 {
                    self.first[id.index()] = Some(t.clone());
                } else {
                    self.second[id.index()] = Some(t.clone());
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Binding, ParamKind, Tape};

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("x", Tensor::from_vec(vec![2], vec![3.0, -2.0]).unwrap(), ParamKind::Trainable);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() });
        for _ in 0..500 {
            let tape = Tape::new();
            let bind = Binding::new(&tape, &store, true);
            let loss = bind.var(id).add_scalar(-1.0).sqr().sum();
            let grads = bind.gradients(&tape.backward(loss));
            opt.step(&mut store, &grads);
        }
        assert_eq!(opt.steps(), 500);
        for &v in store.get(id).data() {
            assert!((v - 1.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn frozen_binding_yields_no_gradients() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::ones(vec![3]), ParamKind::Trainable);
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store, false);
        let x = tape.leaf(Tensor::ones(vec![3]));
        let loss = x.mul(bind.var(id)).sum();
        let grads = tape.backward(loss);
        assert!(bind.gradients(&grads).is_empty());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 3]);
    }
}

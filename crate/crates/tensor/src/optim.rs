use std::collections::BTreeMap;

use crate::{Gradients, ParamId, ParamStore, Scalar};

/// First/second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Adam with per-parameter step counters.
///
/// A parameter without a gradient entry is skipped entirely: neither its
/// value nor its moments move.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    state: BTreeMap<ParamId, AdamState<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T, beta1: T, beta2: T) -> Self {
        Self { lr, beta1, beta2, eps: T::lit(1e-8), state: BTreeMap::new() }
    }

    /// Applies one update to every id in `ids` that has a gradient. Returns
    /// the number of parameters touched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, ids: &[ParamId]) -> usize {
        let mut touched = 0;
        for &id in ids {
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            debug_assert_eq!(p.numel(), g.numel());
            let st = self.state.entry(id).or_insert_with(|| AdamState {
                step: 0,
                m: vec![T::zero(); g.numel()],
                v: vec![T::zero(); g.numel()],
            });
            st.step += 1;
            let t = st.step as i32;
            let bc1 = T::one() - self.beta1.powi(t);
            let bc2 = T::one() - self.beta2.powi(t);
            let step_size = self.lr / bc1;
            let bc2_sqrt = bc2.sqrt();
            let (b1, b2) = (self.beta1, self.beta2);
            for (((pv, &gv), m), v) in
                p.data_mut().iter_mut().zip(g.data()).zip(st.m.iter_mut()).zip(st.v.iter_mut())
            {
                *m = b1 * *m + (T::one() - b1) * gv;
                *v = b2 * *v + (T::one() - b2) * gv * gv;
                let denom = v.sqrt() / bc2_sqrt + self.eps;
                *pv -= step_size * *m / denom;
            }
            touched += 1;
        }
        touched
    }

    pub fn state(&self) -> &BTreeMap<ParamId, AdamState<T>> {
        &self.state
    }

    pub fn set_state(&mut self, id: ParamId, state: AdamState<T>) {
        self.state.insert(id, state);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut grads = Gradients::default();
        grads.map.insert(id, Tensor::from_vec(&[2], vec![0.5, -3.0]).unwrap());
        let mut adam = Adam::new(0.1, 0.9, 0.999);
        adam.step(&mut store, &grads, &[id]);
        let d = store.get(id).data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_leaves_parameter_and_state_alone() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Tensor::full(&[3], 1.0)).unwrap();
        let b = store.add("b", Tensor::full(&[3], 2.0)).unwrap();
        let mut grads = Gradients::default();
        grads.map.insert(a, Tensor::full(&[3], 1.0));
        let mut adam = Adam::new(0.01, 0.5, 0.999);
        assert_eq!(adam.step(&mut store, &grads, &[a, b]), 1);
        assert_eq!(store.get(b).data(), &[2.0, 2.0, 2.0]);
        assert!(!adam.state().contains_key(&b));
    }
}

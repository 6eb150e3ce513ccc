use islab_tensor::{Graph, ParamId, ParamStore, Var};

use super::layers::{Conv, Initializer, ParamMode};
use crate::domain::Modality;
use crate::{IslError, Result, Scalar};

/// One-hot modality code ordered (BF, PC, DIC).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModalityCode([f64; 3]);

impl ModalityCode {
    pub fn of(m: Modality) -> Self {
        let mut c = [0.0; 3];
        c[m.index()] = 1.0;
        Self(c)
    }

    /// Accepts only exact one-hot vectors.
    pub fn new(values: [f64; 3]) -> Result<Self> {
        let ones = values.iter().filter(|&&v| v == 1.0).count();
        let zeros = values.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != 2 {
            return Err(IslError::Validation(format!("modality code {values:?} is not one-hot")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> [f64; 3] {
        self.0
    }

    pub fn modality(&self) -> Modality {
        Modality::ALL[self.0.iter().position(|&v| v == 1.0).expect("one-hot")]
    }
}

/// Affine map from a modality code to the full parameter set (kernel and
/// bias) of a generator's first convolution.
#[derive(Clone, Debug)]
pub struct DynamicConvController {
    pub kernel_w: ParamId,
    pub kernel_b: ParamId,
    pub bias_w: ParamId,
    pub bias_b: ParamId,
    /// `[out, in, k, k]` of the convolution being generated.
    pub target_shape: [usize; 4],
}

impl DynamicConvController {
    pub fn build<T: Scalar>(target: &Conv, store: &mut ParamStore<T>, init: &mut Initializer) -> Result<Self> {
        let shape = target.weight_shape();
        let nk: usize = shape.iter().product();
        let out = shape[0];
        Ok(Self {
            kernel_w: store.add("ctrl.kernel.weight", init.normal(&[nk, 3]))?,
            kernel_b: store.add("ctrl.kernel.bias", init.normal(&[nk]))?,
            bias_w: store.add("ctrl.bias.weight", init.normal(&[out, 3]))?,
            bias_b: store.add("ctrl.bias.bias", init.normal(&[out]))?,
            target_shape: shape,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.kernel_w, self.kernel_b, self.bias_w, self.bias_b]
    }

    /// Number of generated values: always the static conv's parameter count.
    pub fn output_len(&self) -> usize {
        self.target_shape.iter().product::<usize>() + self.target_shape[0]
    }

    /// Generated `(weight, bias)` nodes for one code.
    pub fn generate<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mode: ParamMode,
        code: ModalityCode,
    ) -> Result<(Var, Var)> {
        let c: Vec<T> = code.values().iter().map(|&v| T::lit(v)).collect();
        let kw = mode.fetch(g, store, self.kernel_w);
        let kb = mode.fetch(g, store, self.kernel_b);
        let flat = g.affine_vec(kw, kb, &c)?;
        let weight = g.reshape(flat, &self.target_shape)?;
        let bw = mode.fetch(g, store, self.bias_w);
        let bb = mode.fetch(g, store, self.bias_b);
        let bias = g.affine_vec(bw, bb, &c)?;
        Ok((weight, bias))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_one_hot_in_bf_pc_dic_order() {
        assert_eq!(ModalityCode::of(Modality::BF).values(), [1.0, 0.0, 0.0]);
        assert_eq!(ModalityCode::of(Modality::DIC).values(), [0.0, 0.0, 1.0]);
        assert!(ModalityCode::new([1.0, 1.0, 0.0]).is_err());
        assert!(ModalityCode::new([0.5, 0.5, 0.0]).is_err());
        assert_eq!(ModalityCode::new([0.0, 1.0, 0.0]).unwrap().modality(), Modality::PC);
    }
}

use super::{ParamSet, Real, Tensor};
use crate::{Error, Result};

/// Adam moments for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update of `params` along `grads`.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()),
            ));
        }
        for ((p, g), m) in params.tensors().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape("adam_step", format!("{:?} vs {:?}", p.shape(), g.shape())));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let c1 = T::c(1.0 - self.beta1.powi(t));
        let c2 = T::c(1.0 - self.beta2.powi(t));
        let lr = T::c(lr);
        let eps = T::c(self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (k, &gk) in g.data().iter().enumerate() {
                md[k] = b1 * md[k] + (T::one() - b1) * gk;
                vd[k] = b2 * vd[k] + (T::one() - b2) * gk * gk;
                let mh = md[k] / c1;
                let vh = vd[k] / c2;
                pd[k] = pd[k] - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: Vec<f64>) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![v.len()], v).unwrap());
        p
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut p = single(vec![1.0, -2.0, 0.5]);
        let mut s = AdamState::new(&p);
        let g = vec![Tensor::new(vec![3], vec![0.3, -4.0, 1e-3]).unwrap()];
        s.step(&mut p, &g, 1e-3).unwrap();
        let w = p.get("w").unwrap().data();
        let expect = |x: f64, gk: f64| x - 1e-3 * gk / (gk.abs() + 1e-8);
        assert!((w[0] - expect(1.0, 0.3)).abs() < 1e-12);
        assert!((w[1] - expect(-2.0, -4.0)).abs() < 1e-12);
        assert!((w[2] - expect(0.5, 1e-3)).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(vec![1.0, 2.0]);
        let orig = p.clone();
        let mut s = AdamState::new(&p);
        s.step(&mut p, &[Tensor::zeros(&[2])], 1e-3).unwrap();
        assert_eq!(p, orig);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = single(vec![1.0, 2.0]);
        let mut s = AdamState::new(&p);
        assert!(s.step(&mut p, &[Tensor::zeros(&[3])], 1e-3).is_err());
        assert!(s.step(&mut p, &[], 1e-3).is_err());
    }

    #[test]
    fn deterministic_trajectories() {
        let run = || {
            let mut p = single(vec![0.3, -0.7]);
            let mut s = AdamState::new(&p);
            for i in 0..50 {
                let w = p.get("w").unwrap().data().to_vec();
                let g = Tensor::new(vec![2], vec![2.0 * w[0] + i as f64 * 1e-3, 4.0 * w[1]]).unwrap();
                s.step(&mut p, &[g], 1e-2).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}

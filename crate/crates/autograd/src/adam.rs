use crate::real::Real;
use crate::tensor::Tensor;

/// Adam with bias correction; the learning rate is supplied per step so schedules stay external.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Real> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &[Tensor<T>], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1: T::lit(beta1),
            beta2: T::lit(beta2),
            eps: T::lit(eps),
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// Applies one update. `grads[i] == None` means a zero gradient for parameter `i`.
    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>], lr: T) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let pd = p.data_mut();
            match &grads[i] {
                Some(g) => {
                    for (((pv, mv), vv), &gv) in pd.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *mv = b1 * *mv + (T::one() - b1) * gv;
                        *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                        *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
                    }
                }
                None => {
                    for ((pv, mv), vv) in pd.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mv = b1 * *mv;
                        *vv = b2 * *vv;
                        *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = vec![Tensor::from_vec(&[2], vec![1.0f64, -1.0]).unwrap()];
        let g = vec![Some(Tensor::from_vec(&[2], vec![3.0, -0.5]).unwrap())];
        let mut adam = Adam::new(&p, 0.5, 0.999, 1e-8);
        adam.update(&mut p, &g, 0.1);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut p = vec![Tensor::scalar(5.0f64)];
        let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let g = Tensor::scalar(2.0 * (p[0].item() - 1.5));
            adam.update(&mut p, &[Some(g)], 0.05);
        }
        assert!((p[0].item() - 1.5).abs() < 1e-2);
    }
}

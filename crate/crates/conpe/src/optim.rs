//! Adam optimizer over flat parameter groups.

use crate::tensor::Mat;

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// One update; `params` and `grads` are parallel to the shapes at `new`.
    pub fn update(&mut self, params: &mut [&mut Mat], grads: &[Mat]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            debug_assert!(p.same_shape(g));
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        // f(x) = sum((x - 3)^2)
        let mut x = Mat::row_vector(vec![0.0, 10.0, -4.0]);
        let mut opt = Adam::new(0.1, &[(1, 3)]);
        for _ in 0..500 {
            let grad = x.map(|v| 2.0 * (v - 3.0));
            opt.update(&mut [&mut x], &[grad]);
        }
        for v in &x.data {
            assert!((v - 3.0).abs() < 1e-3, "converged to {v}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params_fixed() {
        let mut x = Mat::row_vector(vec![1.0, 2.0]);
        let before = x.clone();
        let mut opt = Adam::new(0.1, &[(1, 2)]);
        opt.update(&mut [&mut x], &[Mat::zeros(1, 2)]);
        assert_eq!(x, before);
    }
}

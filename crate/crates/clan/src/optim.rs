//! SGD with momentum and L2 weight decay.

use crate::tensor::{Element, Tensor};

/// Classic momentum update:
///   v <- momentum * v + g
///   w <- w - lr * v - lr * weight_decay * w
pub struct Sgd<E: Element> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocities: Vec<Vec<E>>,
}

impl<E: Element> Sgd<E> {
    pub fn new(params: &[(String, Tensor<E>)], momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocities: params.iter().map(|(_, t)| vec![E::zero(); t.numel()]).collect(),
        }
    }

    /// Apply one step to `params` (same list and order as construction).
    /// Parameters without an accumulated gradient are treated as g = 0.
    pub fn step(&mut self, params: &[(String, Tensor<E>)], lr: f64) {
        let mu = E::from_f64(self.momentum);
        let lr_e = E::from_f64(lr);
        let wd = E::from_f64(self.weight_decay);
        for ((_, t), vel) in params.iter().zip(self.velocities.iter_mut()) {
            let grad = t.grad();
            let mut data = t.data_vec();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(E::zero(), |g| g[i]);
                vel[i] = mu * vel[i] + g;
                data[i] = data[i] - lr_e * vel[i] - lr_e * wd * data[i];
            }
            t.set_data(&data);
        }
    }
}

/// Step schedule: the rate multiplies by `gamma` every `every` epochs;
/// `every == 0` disables decay.
pub fn lr_at_epoch(lr0: f64, gamma: f64, every: usize, epoch: usize) -> f64 {
    if every == 0 {
        return lr0;
    }
    lr0 * gamma.powi((epoch / every) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_weights_bitwise_unchanged() {
        let w = Tensor::<f64>::param(&[3], vec![0.25, -0.5, 1.0]).unwrap();
        let params = vec![("w".to_string(), w.clone())];
        let mut opt = Sgd::new(&params, 0.9, 1e-4);
        w.mul(&w).unwrap().sum_all().backward().unwrap();
        let before = w.data_vec();
        opt.step(&params, 0.0);
        let after = w.data_vec();
        assert!(before
            .iter()
            .zip(&after)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn plain_sgd_moves_against_gradient() {
        let w = Tensor::<f64>::param(&[1], vec![2.0]).unwrap();
        let params = vec![("w".to_string(), w.clone())];
        let mut opt = Sgd::new(&params, 0.0, 0.0);
        // loss = w^2, grad = 2w = 4
        w.mul(&w).unwrap().sum_all().backward().unwrap();
        opt.step(&params, 0.1);
        assert!((w.data_vec()[0] - (2.0 - 0.1 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let w = Tensor::<f64>::param(&[1], vec![0.0]).unwrap();
        let params = vec![("w".to_string(), w.clone())];
        let mut opt = Sgd::new(&params, 0.5, 0.0);
        // constant gradient of 1 via loss = w
        for _ in 0..2 {
            w.zero_grad();
            w.sum_all().backward().unwrap();
            opt.step(&params, 1.0);
        }
        // steps: v=1, w=-1; v=1.5, w=-2.5
        assert!((w.data_vec()[0] + 2.5).abs() < 1e-12);
    }

    #[test]
    fn schedule_decays_every_interval() {
        assert_eq!(lr_at_epoch(0.01, 0.5, 10, 0), 0.01);
        assert_eq!(lr_at_epoch(0.01, 0.5, 10, 9), 0.01);
        assert_eq!(lr_at_epoch(0.01, 0.5, 10, 10), 0.005);
        assert_eq!(lr_at_epoch(0.01, 0.5, 10, 25), 0.0025);
        assert_eq!(lr_at_epoch(0.01, 0.5, 0, 99), 0.01);
    }
}

//! Adam with per-parameter step sizes.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.8,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// First and second moment estimates of one parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

impl Moments {
    pub fn new(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        }
    }
}

impl Adam {
    /// Updates the moments with `grad` and writes the step to subtract into `out`.
    pub fn step(&self, moments: &mut Moments, grad: &[f64], lr: &[f64], out: &mut [f64]) {
        moments.steps += 1;
        let t = moments.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for k in 0..grad.len() {
            let g = grad[k];
            moments.m[k] = self.beta1 * moments.m[k] + (1.0 - self.beta1) * g;
            moments.v[k] = self.beta2 * moments.v[k] + (1.0 - self.beta2) * g * g;
            let m_hat = moments.m[k] / c1;
            let v_hat = moments.v[k] / c2;
            out[k] = if m_hat == 0.0 {
                0.0
            } else {
                lr[k] * m_hat / (v_hat.sqrt() + self.eps)
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_toy_converges() {
        // f(x) = 2 (x - 3)^2
        let adam = Adam::default();
        let mut m = Moments::new(1);
        let mut x = -1.0;
        let mut step = [0.0];
        for _ in 0..200 {
            let g = 4.0 * (x - 3.0);
            adam.step(&mut m, &[g], &[0.2], &mut step);
            x -= step[0];
        }
        assert!((x - 3.0f64).abs() < 1e-6, "{x}");
    }

    #[test]
    fn zero_gradient_gives_zero_step() {
        let adam = Adam::default();
        let mut m = Moments::new(3);
        let mut step = [1.0; 3];
        adam.step(&mut m, &[0.0; 3], &[0.1; 3], &mut step);
        assert_eq!(step, [0.0; 3]);
    }
}

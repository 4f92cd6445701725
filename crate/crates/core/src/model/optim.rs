use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction and a global step counter.
///
/// Moment buffers grow with their parameter: when a buffer gets longer
/// (head expansion appends classes) the new tail starts at zero and the
/// existing prefix keeps its state.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<S>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<S>] {
        &self.v
    }

    pub fn step<'a, I>(&mut self, params: I, grads: &[Vec<S>]) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Vec<S>>,
    {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = S::lit(c.lr / bc1);
        let bc2_sqrt = S::lit(bc2.sqrt());
        let eps = S::lit(c.eps);
        for (i, p) in params.into_iter().enumerate() {
            let g = grads
                .get(i)
                .ok_or_else(|| Error::Usage(format!("missing gradient for parameter {i}")))?;
            if g.len() != p.len() {
                return Err(Error::Dimension {
                    op: "adam",
                    left: vec![p.len()],
                    right: vec![g.len()],
                });
            }
            if self.m.len() <= i {
                self.m.push(Vec::new());
                self.v.push(Vec::new());
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.len() < p.len() {
                m.resize(p.len(), S::zero());
                v.resize(p.len(), S::zero());
            }
            let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
            for (((pj, &gj), mj), vj) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = b1 * *mj + one_b1 * gj;
                *vj = b2 * *vj + one_b2 * gj * gj;
                *pj -= step_size * *mj / (vj.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::<f64>::new(AdamConfig::default());
        let mut p = vec![1.0, -1.0];
        adam.step([&mut p], &[vec![0.5, -2.0]]).unwrap();
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn grown_parameter_keeps_old_moments() {
        let mut adam = Adam::<f32>::new(AdamConfig::default());
        let mut p = vec![0.0f32; 2];
        adam.step([&mut p], &[vec![1.0, 2.0]]).unwrap();
        let before = adam.first_moments()[0].clone();
        p.push(0.0);
        adam.step([&mut p], &[vec![0.0, 0.0, 3.0]]).unwrap();
        let m = &adam.first_moments()[0];
        assert_eq!(m.len(), 3);
        assert!((m[0] - 0.9 * before[0]).abs() < 1e-7);
        assert!((m[2] - 0.1 * 3.0).abs() < 1e-7);
    }
}

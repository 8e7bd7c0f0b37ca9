//! Adam optimizer state shared by GAN training and latent inversion.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn new(lr: f32, beta1: f32, beta2: f32) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators, one slot per parameter array.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl AdamState {
    pub fn new<I: IntoIterator<Item = usize>>(sizes: I) -> Self {
        let m: Vec<Vec<f32>> = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        let v = m.clone();
        Self { m, v, step: 0 }
    }

    /// Number of updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn slots(&self) -> usize {
        self.m.len()
    }

    /// One bias-corrected Adam update over every slot, in slot order.
    pub fn update<'p, I>(&mut self, cfg: &AdamConfig, slots: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'p mut [f32], &'p [f32])>,
    {
        let slots: Vec<_> = slots.into_iter().collect();
        if slots.len() != self.m.len() {
            return Err(Error::contract(format!(
                "adam: state has {} slots, update supplied {}",
                self.m.len(),
                slots.len()
            )));
        }
        for (i, (p, g)) in slots.iter().enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::dim(format!(
                    "adam slot {i}: state {} values, parameter {}, gradient {}",
                    self.m[i].len(),
                    p.len(),
                    g.len()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
        let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
        let step_size = (cfg.lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for ((p, g), (m, v)) in slots.into_iter().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p -= step_size * *m / (v.sqrt() / bc2_sqrt + cfg.eps);
            }
        }
        Ok(())
    }
}

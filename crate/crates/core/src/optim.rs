//! Optimizers for elementary parameters and hyperparameters, the step-size
//! schedule, and the hyper-update interval.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::network::ModelParams;

/// `v ← v − lr·g`
pub fn sgd_step(values: &mut [f64], gradient: &[f64], lr: f64) -> Result<()> {
    if values.len() != gradient.len() {
        return Err(Error::Shape {
            op: "sgd_step",
            lhs: vec![values.len()],
            rhs: vec![gradient.len()],
        });
    }
    for (v, g) in values.iter_mut().zip(gradient) {
        let next = *v - lr * g;
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("sgd update ({v} - {lr}·{g})")));
        }
        *v = next;
    }
    Ok(())
}

pub fn sgd_step_params(params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
    for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        sgd_step(p.data_mut(), g.data(), lr)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Base step size α.
    pub lr: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    /// Zero moments for buffers of the given lengths.
    pub fn new(lens: &[usize], lr: f64) -> Self {
        Self {
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
            lr,
            t: 0,
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(params: &ModelParams, lr: f64) -> Self {
        let lens: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self::new(&lens, lr)
    }

    /// Advances the moments with `grads` and hands the bias-corrected
    /// direction `m̂/(√v̂ + ε)` of every entry to `apply(buffer, index, d)`.
    fn advance(&mut self, grads: &[&[f64]], mut apply: impl FnMut(usize, usize, f64) -> Result<()>) -> Result<()> {
        if grads.len() != self.m.len() || grads.iter().zip(&self.m).any(|(g, m)| g.len() != m.len()) {
            return Err(Error::Contract("adam state does not match gradient".into()));
        }
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (k, ((g, m), v)) in grads.iter().zip(&mut self.m).zip(&mut self.v).enumerate() {
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                apply(k, i, mhat / (libm::sqrt(vhat) + eps))?;
            }
        }
        Ok(())
    }

    /// One bias-corrected step on a list of buffers with step size `lr`.
    pub fn step_with_lr(&mut self, values: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if values.len() != grads.len() || values.iter().zip(grads).any(|(v, g)| v.len() != g.len()) {
            return Err(Error::Contract("adam values do not match gradient".into()));
        }
        self.advance(grads, |k, i, d| {
            let x = &mut values[k][i];
            let next = *x - lr * d;
            if !next.is_finite() {
                return Err(Error::NonFinite("adam update".into()));
            }
            *x = next;
            Ok(())
        })
    }

    pub fn step(&mut self, values: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        let lr = self.lr;
        self.step_with_lr(values, grads, lr)
    }

    pub fn step_params(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
        let g: Vec<&[f64]> = grads.tensors().into_iter().map(|t| t.data()).collect();
        let mut p: Vec<&mut [f64]> = params.tensors_mut().into_iter().map(|t| t.data_mut()).collect();
        self.step_with_lr(&mut p, &g, lr)
    }

    /// Bias-corrected direction for a single buffer, with per-entry step
    /// sizes applied by the caller.
    pub fn direction(&mut self, grad: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; grad.len()];
        self.advance(&[grad], |_, i, d| {
            out[i] = d;
            Ok(())
        })?;
        Ok(out)
    }
}

/// Constant step size until `anneal_start·total`, then linear decay reaching
/// zero at `epoch == total`.
pub fn anneal(base: f64, epoch: usize, total: usize, anneal_start: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&anneal_start) {
        return Err(Error::Config(format!(
            "anneal start fraction {anneal_start} outside [0, 1]"
        )));
    }
    if epoch > total {
        return Err(Error::Input(format!("epoch {epoch} beyond total {total}")));
    }
    let start = anneal_start * total as f64;
    let e = epoch as f64;
    if e < start || total == 0 {
        return Ok(base);
    }
    let span = total as f64 - start;
    if span <= 0.0 {
        return Ok(0.0);
    }
    Ok(base * (total as f64 - e) / span)
}

pub fn due_for_hyper_update(step: u64, interval: u64) -> bool {
    interval > 0 && step % interval == 0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperOptConfig {
    pub kind: OptimizerKind,
    pub noise_lr: f64,
    pub l2_lr: f64,
    /// Elementary steps per hyperparameter update (K).
    pub interval: u64,
    /// Multiply the hyper step sizes by `interval`.
    pub scale_lr_by_interval: bool,
}

impl HyperOptConfig {
    /// Vanilla gradient descent: 1e-1 for noise, 1e-4 for L2, every 10 steps.
    pub const SGD_DEFAULT: HyperOptConfig = HyperOptConfig {
        kind: OptimizerKind::Sgd,
        noise_lr: 1e-1,
        l2_lr: 1e-4,
        interval: 10,
        scale_lr_by_interval: false,
    };

    /// ADAM: 1e-3 for noise, 1e-6 for L2, every 10 steps.
    pub const ADAM_DEFAULT: HyperOptConfig = HyperOptConfig {
        kind: OptimizerKind::Adam,
        noise_lr: 1e-3,
        l2_lr: 1e-6,
        interval: 10,
        scale_lr_by_interval: false,
    };

    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::Config("hyper update interval must be at least 1".into()));
        }
        if !(self.noise_lr >= 0.0 && self.l2_lr >= 0.0) {
            return Err(Error::Config("hyper step sizes must be non-negative".into()));
        }
        Ok(())
    }

    pub fn effective_lrs(&self) -> (f64, f64) {
        let k = if self.scale_lr_by_interval {
            self.interval as f64
        } else {
            1.0
        };
        (self.noise_lr * k, self.l2_lr * k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_arithmetic() {
        let mut v = [1.0];
        sgd_step(&mut v, &[0.5], 0.1).unwrap();
        assert_eq!(v, [0.95]);
        sgd_step(&mut v, &[0.0], 0.1).unwrap();
        assert_eq!(v, [0.95]);
        // ascent form for a hyperparameter: pass −G
        let mut lambda = [0.1];
        sgd_step(&mut lambda, &[-0.5], 0.01).unwrap();
        assert!((lambda[0] - 0.105).abs() < 1e-15);
        assert!(sgd_step(&mut v, &[f64::INFINITY], 1.0).is_err());
        assert!(sgd_step(&mut v, &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        for &g in &[3.0, -0.002, 1e4] {
            let mut st = AdamState::new(&[1], 0.01);
            let mut x = [1.0];
            st.step(&mut [&mut x[..]], &[&[g][..]]).unwrap();
            let step = 1.0 - x[0];
            assert!((step.abs() - 0.01).abs() < 1e-6, "{step}");
            assert_eq!(step.signum(), g.signum());
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_values() {
        let mut st = AdamState::new(&[2], 0.1);
        let mut x = [1.0, -2.0];
        st.step(&mut [&mut x[..]], &[&[0.0, 0.0][..]]).unwrap();
        assert_eq!(x, [1.0, -2.0]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut st = AdamState::new(&[1], 0.1);
        let mut x = [5.0];
        for _ in 0..100 {
            let g = [2.0 * x[0]];
            st.step(&mut [&mut x[..]], &[&g[..]]).unwrap();
        }
        assert!(x[0].abs() < 0.5, "{}", x[0]);
    }

    #[test]
    fn adam_constant_gradient_saturates() {
        let g = -0.3;
        let mut st = AdamState::new(&[1], 0.01);
        let (mut prev_m, mut prev_v) = (0.0f64, 0.0f64);
        for _ in 0..1000 {
            let d = st.direction(&[g]).unwrap()[0];
            assert!((d + 1.0).abs() < 1e-6, "{d}");
            let (m, v) = (st.m[0][0], st.v[0][0]);
            assert!(m.abs() >= prev_m.abs() && v >= prev_v);
            assert!(m.abs() <= g.abs() && v <= g * g + 1e-18);
            (prev_m, prev_v) = (m, v);
        }
        assert!((prev_m - g).abs() < 1e-12);
    }

    #[test]
    fn anneal_schedule() {
        assert_eq!(anneal(1e-3, 0, 100, 0.5).unwrap(), 1e-3);
        assert_eq!(anneal(1e-3, 100, 100, 0.5).unwrap(), 0.0);
        assert!((anneal(1e-3, 75, 100, 0.5).unwrap() - 5e-4).abs() < 1e-12);
        assert_eq!(anneal(1e-3, 49, 100, 0.5).unwrap(), 1e-3);
        assert!(anneal(1.0, 0, 10, 1.5).is_err());
        assert!(anneal(1.0, 11, 10, 0.5).is_err());
    }

    #[test]
    fn hyper_update_interval() {
        assert!(due_for_hyper_update(10, 10));
        assert!(!due_for_hyper_update(9, 10));
        assert!(due_for_hyper_update(7, 1));
        assert_eq!((1..=95).filter(|&s| due_for_hyper_update(s, 10)).count(), 9);
    }
}

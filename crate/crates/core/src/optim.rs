//! Lookahead over RAdam with decoupled weight decay and a polynomial
//! learning-rate schedule.
//!
//! RAdam step `t` (1-based), for gradient `g` and parameter `p`:
//!
//! ```text
//! m  <- b1 m + (1 - b1) g
//! v  <- b2 v + (1 - b2) g^2
//! m^ =  m / (1 - b1^t)
//! rho_inf = 2 / (1 - b2) - 1
//! rho_t   = rho_inf - 2 t b2^t / (1 - b2^t)
//! if rho_t > 4:
//!     r = sqrt((rho_t - 4)(rho_t - 2) rho_inf / ((rho_inf - 4)(rho_inf - 2) rho_t))
//!     p <- p - lr r m^ / (sqrt(v / (1 - b2^t)) + eps)
//! else:
//!     p <- p - lr m^
//! ```
//!
//! Decoupled decay `p <- p - lr wd p` runs before the update. Every `k` inner
//! steps Lookahead pulls the slow copy towards the fast weights,
//! `slow <- slow + alpha (fast - slow)`, and resets `fast <- slow`.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// `p <- p - lr wd p`, applied to the weights before the update.
    #[default]
    Decoupled,
    /// `g <- g + wd p`, folded into the gradient.
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
    /// Skip decay for batch-norm scales/shifts and conv biases.
    pub exempt_norm_and_bias: bool,
    pub poly_power: f64,
    pub lookahead_k: u64,
    pub lookahead_alpha: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            decay_mode: DecayMode::Decoupled,
            exempt_norm_and_bias: true,
            poly_power: 0.9,
            lookahead_k: 5,
            lookahead_alpha: 0.5,
        }
    }
}

impl OptimConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            out.push(format!("lr0 must be positive, got {}", self.lr0));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            out.push(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            out.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.poly_power >= 0.0) {
            out.push(format!("poly_power must be non-negative, got {}", self.poly_power));
        }
        if self.lookahead_k == 0 {
            out.push("lookahead_k must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.lookahead_alpha) {
            out.push(format!("lookahead_alpha must lie in [0, 1], got {}", self.lookahead_alpha));
        }
        out
    }
}

/// `lr0 (1 - step / max_steps)^power`. Steps past the end clamp to 0 with a
/// warning.
pub fn poly_lr(step: u64, max_steps: u64, lr0: f64, power: f64) -> f64 {
    if step > max_steps {
        log::warn!("poly_lr: step {step} is past max_steps {max_steps}; learning rate clamped to 0");
        return 0.0;
    }
    if step == max_steps {
        return 0.0;
    }
    lr0 * (1.0 - step as f64 / max_steps as f64).powf(power)
}

/// Per-step scalars shared by every parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadamCoeffs {
    pub bias1: f64,
    pub bias2: f64,
    pub rho_t: f64,
    /// `Some(r)` when the variance is rectified, `None` for the momentum-only
    /// branch.
    pub rect: Option<f64>,
}

pub fn radam_coeffs(t: u64, beta1: f64, beta2: f64) -> RadamCoeffs {
    let tf = t as f64;
    let b2t = beta2.powf(tf);
    let bias1 = 1.0 - beta1.powf(tf);
    let bias2 = 1.0 - b2t;
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let rho_t = rho_inf - 2.0 * tf * b2t / bias2;
    let rect = (rho_t > 4.0).then(|| {
        ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt()
    });
    RadamCoeffs {
        bias1,
        bias2,
        rho_t,
        rect,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub config: OptimConfig,
    /// Completed inner steps.
    pub t: u64,
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
    pub slow: IndexMap<String, Tensor<T>>,
}

impl<T: Float> OptimState<T> {
    /// Zero moments; the slow weights start as a copy of `store`.
    pub fn new(config: OptimConfig, store: &ParamStore<T>) -> Result<Self> {
        let p = config.problems();
        if !p.is_empty() {
            return Err(Error::config(p.join("; ")));
        }
        let zeros = |p: &Tensor<T>| Tensor::zeros(p.shape().to_vec());
        Ok(Self {
            config,
            t: 0,
            m: store.iter().map(|(n, p)| (n.to_string(), zeros(&p.value))).collect(),
            v: store.iter().map(|(n, p)| (n.to_string(), zeros(&p.value))).collect(),
            slow: store.iter().map(|(n, p)| (n.to_string(), p.value.clone())).collect(),
        })
    }

    pub fn lr_at(&self, step: u64, max_steps: u64) -> f64 {
        poly_lr(step, max_steps, self.config.lr0, self.config.poly_power)
    }

    /// Validates `grads` against the store without mutating anything.
    fn check_grads(&self, store: &ParamStore<T>, grads: &IndexMap<String, Tensor<T>>) -> Result<()> {
        for (name, p) in store.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Contract(format!("no gradient for parameter `{name}`")))?;
            if g.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer step",
                    lhs: p.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let bad = g.data().iter().filter(|v| !v.is_finite()).count();
            if bad > 0 {
                return Err(Error::NonFiniteGradient {
                    name: name.to_string(),
                    count: bad,
                });
            }
            if !self.m.contains_key(name) {
                return Err(Error::Contract(format!("optimizer has no state for `{name}`")));
            }
        }
        Ok(())
    }

    /// One RAdam update of every parameter. A non-finite gradient aborts the
    /// step before any parameter or moment changes.
    pub fn radam_step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &IndexMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        self.check_grads(store, grads)?;
        self.t += 1;
        let c = &self.config;
        let k = radam_coeffs(self.t, c.beta1, c.beta2);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (ob1, ob2) = (T::from_f64_lossy(1.0 - c.beta1), T::from_f64_lossy(1.0 - c.beta2));
        let eps = T::from_f64_lossy(c.eps);
        let inv_b2 = T::from_f64_lossy(1.0 / k.bias2);
        let step = T::from_f64_lossy(lr / k.bias1 * k.rect.unwrap_or(1.0));
        for (name, p) in store.iter_mut() {
            let decays = p.kind.decays() || !c.exempt_norm_and_bias;
            let wd = if decays { c.weight_decay } else { 0.0 };
            let g = &grads[name];
            let m = self.m.get_mut(name).expect("checked").data_mut();
            let v = self.v.get_mut(name).expect("checked").data_mut();
            let pd = p.value.data_mut();
            let shrink = T::from_f64_lossy(1.0 - lr * wd);
            let l2 = T::from_f64_lossy(wd);
            for i in 0..pd.len() {
                let mut gi = g.data()[i];
                match c.decay_mode {
                    DecayMode::Decoupled => pd[i] *= shrink,
                    DecayMode::L2 => gi += l2 * pd[i],
                }
                m[i] = b1 * m[i] + ob1 * gi;
                v[i] = b2 * v[i] + ob2 * gi * gi;
                let upd = match k.rect {
                    Some(_) => m[i] / ((v[i] * inv_b2).sqrt() + eps),
                    None => m[i],
                };
                pd[i] -= step * upd;
            }
        }
        Ok(())
    }

    /// Lookahead synchronization; acts only when `t` is a multiple of `k`.
    pub fn lookahead_sync(&mut self, store: &mut ParamStore<T>) {
        if self.t == 0 || !self.t.is_multiple_of(self.config.lookahead_k) {
            return;
        }
        let alpha = T::from_f64_lossy(self.config.lookahead_alpha);
        for (name, p) in store.iter_mut() {
            let slow = self.slow.get_mut(name).expect("state covers every parameter").data_mut();
            for (s, f) in slow.iter_mut().zip(p.value.data_mut()) {
                *s += alpha * (*f - *s);
                *f = *s;
            }
        }
    }

    /// Full optimizer step: RAdam, then Lookahead synchronization.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &IndexMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        self.radam_step(store, grads, lr)?;
        self.lookahead_sync(store);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    fn store(vals: &[(&str, f64, ParamKind)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for &(n, v, k) in vals {
            s.insert(n, Tensor::full(vec![1], v), k);
        }
        s
    }

    fn grads(vals: &[(&str, f64)]) -> IndexMap<String, Tensor<f64>> {
        vals.iter()
            .map(|&(n, g)| (n.to_string(), Tensor::full(vec![1], g)))
            .collect()
    }

    #[test]
    fn poly_schedule_values() {
        assert_eq!(poly_lr(0, 1000, 1e-3, 0.9), 1e-3);
        assert_eq!(poly_lr(1000, 1000, 1e-3, 0.9), 0.0);
        assert_eq!(poly_lr(1200, 1000, 1e-3, 0.9), 0.0);
        assert!((poly_lr(500, 1000, 1e-3, 0.9) - 5.358867e-4).abs() < 1e-9);
    }

    #[test]
    fn first_step_is_momentum_only() {
        let k = radam_coeffs(1, 0.9, 0.999);
        assert!((k.rho_t - 1.0).abs() < 1e-9);
        assert!(k.rect.is_none());
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut s = store(&[("w", 2.0, ParamKind::ConvWeight)]);
        let mut o = OptimState::new(cfg, &s).unwrap();
        o.radam_step(&mut s, &grads(&[("w", 1.0)]), 0.01).unwrap();
        assert!((s.tensor("w").unwrap().data()[0] - (2.0 - 0.01)).abs() < 1e-15);
        // rectification switches on at t = 5 for beta2 = 0.999
        assert!(radam_coeffs(4, 0.9, 0.999).rect.is_none());
        assert!(radam_coeffs(5, 0.9, 0.999).rect.is_some());
    }

    #[test]
    fn zero_gradients_are_fixed_points() {
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut s = store(&[("a", 0.3, ParamKind::ConvWeight), ("b", -1.0, ParamKind::BnGamma)]);
        let before = s.clone();
        let mut o = OptimState::new(cfg, &s).unwrap();
        for _ in 0..23 {
            o.step(&mut s, &grads(&[("a", 0.0), ("b", 0.0)]), 1e-3).unwrap();
        }
        assert_eq!(s, before);
    }

    #[test]
    fn identical_parameters_share_trajectories() {
        let mut s = store(&[("a", 0.5, ParamKind::ConvWeight), ("b", 0.5, ParamKind::ConvWeight)]);
        let mut o = OptimState::new(OptimConfig::default(), &s).unwrap();
        for i in 0..17 {
            let g = (i as f64 * 0.7).sin();
            o.step(&mut s, &grads(&[("a", g), ("b", g)]), 1e-2).unwrap();
            assert_eq!(s.tensor("a").unwrap(), s.tensor("b").unwrap());
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut s = store(&[("a", 1.0, ParamKind::ConvWeight), ("b", 1.0, ParamKind::ConvWeight)]);
        let mut o = OptimState::new(OptimConfig::default(), &s).unwrap();
        let before = (s.clone(), o.clone());
        let err = o.step(&mut s, &grads(&[("a", 1.0), ("b", f64::NAN)]), 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref name, count: 1 } if name == "b"));
        assert_eq!((s, o), before);
    }

    #[test]
    fn lookahead_degenerate_alphas() {
        let run = |alpha: f64| {
            let cfg = OptimConfig {
                lookahead_alpha: alpha,
                lookahead_k: 2,
                weight_decay: 0.0,
                ..OptimConfig::default()
            };
            let mut s = store(&[("w", 0.0, ParamKind::ConvWeight)]);
            let mut o = OptimState::new(cfg, &s).unwrap();
            let mut trace = Vec::new();
            for _ in 0..4 {
                o.step(&mut s, &grads(&[("w", 1.0)]), 0.1).unwrap();
                trace.push(s.tensor("w").unwrap().data()[0]);
            }
            trace
        };
        let zero = run(0.0);
        assert_eq!(zero[1], 0.0);
        assert_eq!(zero[3], 0.0);
        let one = run(1.0);
        assert!(one[1] < one[0] && one[3] < one[2]);
        // slow = 0, fast = 1, alpha = 0.5
        let mut s = store(&[("w", 0.0, ParamKind::ConvWeight)]);
        let mut o = OptimState::new(OptimConfig::default(), &s).unwrap();
        s.get_mut("w").unwrap().value = Tensor::full(vec![1], 1.0);
        o.t = 5;
        o.lookahead_sync(&mut s);
        assert_eq!(s.tensor("w").unwrap().data()[0], 0.5);
        assert_eq!(o.slow["w"].data()[0], 0.5);
    }

    #[test]
    fn norm_parameters_are_exempt_from_decay() {
        let mut s = store(&[("w", 1.0, ParamKind::ConvWeight), ("g", 1.0, ParamKind::BnGamma)]);
        let cfg = OptimConfig {
            weight_decay: 0.1,
            ..OptimConfig::default()
        };
        let mut o = OptimState::new(cfg, &s).unwrap();
        o.radam_step(&mut s, &grads(&[("w", 0.0), ("g", 0.0)]), 0.5).unwrap();
        assert!((s.tensor("w").unwrap().data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(s.tensor("g").unwrap().data()[0], 1.0);
    }
}

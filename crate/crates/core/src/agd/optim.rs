use std::f64::consts::PI;

use imp_tensor::{ParamTree, Scalar};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok =
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if !ok {
            return Err(CoreError::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: ParamTree<T>,
    pub v: ParamTree<T>,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros_like(params: &ParamTree<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam step at 1-based step `t`, without weight decay.
///
/// Parameters absent from `grads` are treated as having zero gradient: their
/// moments still decay.
pub fn adam_update<T: Scalar>(
    params: &mut ParamTree<T>,
    grads: &ParamTree<T>,
    moments: &mut Moments<T>,
    lr: f64,
    t: u64,
    config: &AdamConfig,
) -> Result<()> {
    if t == 0 {
        return Err(CoreError::Config("Adam step index is 1-based".into()));
    }
    let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let bc1 = T::lit(1.0 - config.beta1.powf(t as f64));
    let bc2 = T::lit(1.0 - config.beta2.powf(t as f64));
    let (lr, eps) = (T::lit(lr), T::lit(config.eps));
    for (path, p) in params.iter_mut() {
        let m = moments.m.get_mut(path)?;
        let v = moments.v.get_mut(path)?;
        let g = grads.get(path).ok();
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(CoreError::Config(format!(
                    "gradient for {path} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.map_or(T::zero(), |g| g.data()[i]);
            md[i] = b1 * md[i] + c1 * gi;
            vd[i] = b2 * vd[i] + c2 * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup followed by cosine decay to `floor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub peak: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    #[serde(default)]
    pub floor: f64,
}

impl LrSchedule {
    /// Warmup over 5% of `total_steps`.
    pub fn cosine(peak: f64, total_steps: u64) -> Self {
        Self {
            peak,
            total_steps,
            warmup_steps: total_steps / 20,
            floor: 0.0,
        }
    }

    pub fn constant(rate: f64) -> Self {
        Self {
            peak: rate,
            total_steps: 0,
            warmup_steps: 0,
            floor: rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak >= 0.0) || !(self.floor >= 0.0) || self.warmup_steps > self.total_steps {
            return Err(CoreError::Config(format!(
                "invalid learning-rate schedule {self:?}"
            )));
        }
        Ok(())
    }

    /// Rate for 0-based step `t`; steps past `total_steps` clamp to `floor`.
    pub fn rate(&self, t: u64) -> f64 {
        if t < self.warmup_steps {
            return self.peak * (t + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return if t >= self.total_steps {
                self.floor
            } else {
                self.peak
            };
        }
        let progress = ((t - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.floor + 0.5 * (self.peak - self.floor) * (1.0 + (PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use imp_tensor::Tensor;

    fn tree(v: f64) -> ParamTree<f64> {
        let mut t = ParamTree::new();
        t.insert("w", Tensor::from_f64(&[1], &[v]).unwrap())
            .unwrap();
        t
    }

    #[test]
    fn first_step_hand_formula() {
        let mut p = tree(1.0);
        let mut m = Moments::zeros_like(&p);
        adam_update(&mut p, &tree(0.5), &mut m, 0.1, 1, &AdamConfig::default()).unwrap();
        // m_hat = 0.5, v_hat = 0.25
        let expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = tree(3.0);
        let mut m = Moments::zeros_like(&p);
        adam_update(
            &mut p,
            &ParamTree::new(),
            &mut m,
            0.1,
            1,
            &AdamConfig::default(),
        )
        .unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 3.0);
    }

    #[test]
    fn schedule_landmarks() {
        let s = LrSchedule::cosine(1e-3, 1000);
        assert_eq!(s.warmup_steps, 50);
        assert!((s.rate(0) - 1e-3 / 50.0).abs() < 1e-18);
        assert_eq!(s.rate(50), 1e-3);
        assert!((s.rate(50 + 475) - 0.5e-3).abs() < 1e-15);
        assert!(s.rate(1000).abs() < 1e-18);
        assert_eq!(s.rate(5000), s.floor);
        let c = LrSchedule::constant(0.1);
        assert_eq!((c.rate(0), c.rate(99)), (0.1, 0.1));
    }
}

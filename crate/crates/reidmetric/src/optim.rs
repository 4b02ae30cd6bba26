//! AMSGrad optimizer, the step learning-rate schedule, and the warm-up
//! freezing policy.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmsgradConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_bias_correction")]
    pub bias_correction: bool,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_bias_correction() -> bool {
    true
}

impl Default for AmsgradConfig {
    fn default() -> Self {
        AmsgradConfig {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            bias_correction: default_bias_correction(),
        }
    }
}

/// Per-parameter-group AMSGrad moments. Groups are addressed by index;
/// a group's step counter only advances when it receives an update, so
/// freshly unfrozen groups start with proper bias correction.
#[derive(Clone, Debug)]
pub struct AmsgradState {
    cfg: AmsgradConfig,
    groups: Vec<GroupState>,
}

#[derive(Clone, Debug)]
struct GroupState {
    m: Vec<f64>,
    v: Vec<f64>,
    v_max: Vec<f64>,
    t: u64,
}

impl AmsgradState {
    pub fn new(cfg: AmsgradConfig, group_sizes: &[usize]) -> Self {
        AmsgradState {
            cfg,
            groups: group_sizes
                .iter()
                .map(|&n| GroupState { m: vec![0.0; n], v: vec![0.0; n], v_max: vec![0.0; n], t: 0 })
                .collect(),
        }
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Elementwise running max of the second moment for one group
    /// (exposed for the monotonicity checks).
    pub fn v_max(&self, group: usize) -> &[f64] {
        &self.groups[group].v_max
    }

    /// One AMSGrad update on a single parameter group.
    pub fn step_group(&mut self, group: usize, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        let g = &mut self.groups[group];
        if params.len() != g.m.len() || grads.len() != g.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "group {} holds {} params, got {} params / {} grads",
                group,
                g.m.len(),
                params.len(),
                grads.len()
            )));
        }
        g.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let (mc, vc) = if self.cfg.bias_correction {
            (1.0 - b1.powi(g.t as i32), 1.0 - b2.powi(g.t as i32))
        } else {
            (1.0, 1.0)
        };
        for i in 0..params.len() {
            let gi = grads[i];
            g.m[i] = b1 * g.m[i] + (1.0 - b1) * gi;
            g.v[i] = b2 * g.v[i] + (1.0 - b2) * gi * gi;
            if g.v[i] > g.v_max[i] {
                g.v_max[i] = g.v[i];
            }
            let m_hat = g.m[i] / mc;
            let v_hat = g.v_max[i] / vc;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
        }
        Ok(())
    }
}

/// Piecewise-constant learning-rate schedule with head-only warm-up.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_drop_epochs")]
    pub drop_epochs: Vec<usize>,
    #[serde(default = "default_drop_factor")]
    pub drop_factor: f64,
    #[serde(default = "default_total_epochs")]
    pub total_epochs: usize,
    #[serde(default = "default_warmup_epochs")]
    pub warmup_epochs: usize,
}

fn default_base_lr() -> f64 {
    0.0015
}
fn default_drop_epochs() -> Vec<usize> {
    vec![40, 50]
}
fn default_drop_factor() -> f64 {
    10.0
}
fn default_total_epochs() -> usize {
    65
}
fn default_warmup_epochs() -> usize {
    5
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            base_lr: default_base_lr(),
            drop_epochs: default_drop_epochs(),
            drop_factor: default_drop_factor(),
            total_epochs: default_total_epochs(),
            warmup_epochs: default_warmup_epochs(),
        }
    }
}

/// Which parameter groups receive updates at a given epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamScope {
    /// Classifier, depthwise pool weights, and the final projection only.
    HeadOnly,
    All,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs < 1 {
            return Err(Error::Config("total_epochs must be >= 1".into()));
        }
        if !self.drop_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("drop_epochs must be strictly increasing".into()));
        }
        if self.drop_epochs.iter().any(|&e| e >= self.total_epochs) {
            return Err(Error::Config("drop_epochs must be < total_epochs".into()));
        }
        if self.drop_factor <= 0.0 || self.base_lr <= 0.0 {
            return Err(Error::Config("base_lr and drop_factor must be > 0".into()));
        }
        Ok(())
    }

    /// Drops apply at the start of each listed epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::EpochOutOfRange { epoch, total: self.total_epochs });
        }
        let drops = self.drop_epochs.iter().filter(|&&e| epoch >= e).count();
        Ok(self.base_lr / self.drop_factor.powi(drops as i32))
    }

    pub fn scope_at(&self, epoch: usize) -> ParamScope {
        if epoch < self.warmup_epochs {
            ParamScope::HeadOnly
        } else {
            ParamScope::All
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut state = AmsgradState::new(AmsgradConfig::default(), &[4]);
        let mut params = vec![1.0, -2.0, 3.0, 0.5];
        let orig = params.clone();
        state.step_group(0, &mut params, &[0.0; 4], 0.0015).unwrap();
        assert_eq!(params, orig);
    }

    #[test]
    fn single_step_hand_value() {
        // bias correction off, theta=0, g=1:
        // m = 0.1, v = v_max = 0.001,
        // delta = -0.0015 * 0.1 / (sqrt(0.001) + 1e-8) ~ -4.7434e-3
        let cfg = AmsgradConfig { bias_correction: false, ..AmsgradConfig::default() };
        let mut state = AmsgradState::new(cfg, &[1]);
        let mut theta = vec![0.0];
        state.step_group(0, &mut theta, &[1.0], 0.0015).unwrap();
        let expected = -0.0015 * 0.1 / (0.001f64.sqrt() + 1e-8);
        assert!((theta[0] - expected).abs() < 1e-12);
        assert!((theta[0] + 4.7434e-3).abs() < 1e-6);
    }

    #[test]
    fn v_max_persists_after_gradient_shrinks() {
        let cfg = AmsgradConfig { bias_correction: false, ..AmsgradConfig::default() };
        let mut state = AmsgradState::new(cfg, &[1]);
        let mut theta = vec![0.0];
        state.step_group(0, &mut theta, &[1.0], 0.0015).unwrap();
        let vmax_after_1 = state.v_max(0)[0];
        let before = theta[0];
        state.step_group(0, &mut theta, &[0.0], 0.0015).unwrap();
        // v decayed below the step-1 maximum, which v_max must keep
        assert_eq!(state.v_max(0)[0], vmax_after_1);
        // two-step brute-force trace of the update rule
        let m2 = 0.9 * 0.1 + 0.1 * 0.0;
        let expected_delta = -0.0015 * m2 / (vmax_after_1.sqrt() + 1e-8);
        assert!((theta[0] - before - expected_delta).abs() < 1e-15);
    }

    #[test]
    fn v_max_monotone_over_random_steps() {
        let mut rng = Rng::new(10);
        let mut state = AmsgradState::new(AmsgradConfig::default(), &[8]);
        let mut params = vec![0.0; 8];
        let mut prev = state.v_max(0).to_vec();
        for _ in 0..10_000 {
            let grads: Vec<f64> = (0..8).map(|_| rng.normal_scaled(0.0, 2.0)).collect();
            state.step_group(0, &mut params, &grads, 1e-3).unwrap();
            for (p, c) in prev.iter().zip(state.v_max(0)) {
                assert!(c >= p);
            }
            prev = state.v_max(0).to_vec();
        }
    }

    #[test]
    fn near_sign_descent_with_beta2_near_one() {
        // With beta2 ~ 1 and constant gradient, the step approaches
        // -lr * sign(g) once bias correction is applied.
        let cfg = AmsgradConfig { beta2: 1.0 - 1e-12, ..AmsgradConfig::default() };
        let mut state = AmsgradState::new(cfg, &[2]);
        let mut params = vec![0.0, 0.0];
        let lr = 0.01;
        let mut last = params.clone();
        for _ in 0..200 {
            last = params.clone();
            state.step_group(0, &mut params, &[0.5, -2.0], lr).unwrap();
        }
        let d0 = params[0] - last[0];
        let d1 = params[1] - last[1];
        assert!((d0 + lr).abs() < 1e-3 * lr.abs().max(1.0));
        assert!((d1 - lr).abs() < 1e-3);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut state = AmsgradState::new(AmsgradConfig::default(), &[3]);
        let mut params = vec![0.0; 2];
        assert!(state.step_group(0, &mut params, &[0.0; 2], 1e-3).is_err());
    }

    #[test]
    fn lr_schedule_paper_values() {
        let s = Schedule::default();
        assert_eq!(s.lr_at_epoch(0).unwrap(), 0.0015);
        assert_eq!(s.lr_at_epoch(39).unwrap(), 0.0015);
        assert!((s.lr_at_epoch(45).unwrap() - 0.00015).abs() < 1e-18);
        assert!((s.lr_at_epoch(55).unwrap() - 0.000015).abs() < 1e-19);
        assert!(matches!(
            s.lr_at_epoch(65),
            Err(Error::EpochOutOfRange { .. })
        ));
    }

    #[test]
    fn lr_non_increasing() {
        let s = Schedule::default();
        let mut prev = f64::INFINITY;
        for e in 0..s.total_epochs {
            let lr = s.lr_at_epoch(e).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn warmup_scope() {
        let s = Schedule::default();
        assert_eq!(s.scope_at(2), ParamScope::HeadOnly);
        assert_eq!(s.scope_at(4), ParamScope::HeadOnly);
        assert_eq!(s.scope_at(5), ParamScope::All);
        let s = Schedule { warmup_epochs: 0, ..Schedule::default() };
        assert_eq!(s.scope_at(0), ParamScope::All);
    }

    #[test]
    fn schedule_validation() {
        let s = Schedule { drop_epochs: vec![50, 40], ..Schedule::default() };
        assert!(s.validate().is_err());
        let s = Schedule { drop_epochs: vec![40, 70], ..Schedule::default() };
        assert!(s.validate().is_err());
    }
}

//! AdamW over FP32 master state, organized in parameter groups.

mod groups;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TailorError};
use crate::model::DecayClass;

pub use groups::{
    build_coarse_table, build_group_table, build_table, coarse_to_fine, fine_to_coarse,
    group_indices_for, regroup, GroupEntry, GroupLayout, GroupSegment, ParameterGroupTable,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyperparams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyperparams {
    fn default() -> Self {
        AdamHyperparams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamHyperparams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(TailorError::Config(format!("invalid AdamW hyperparameters {self:?}")))
        }
    }

    /// Norm-type parameters are never decayed.
    pub fn for_class(self, class: DecayClass) -> Self {
        match class {
            DecayClass::Decay => self,
            DecayClass::NoDecay => AdamHyperparams {
                weight_decay: 0.0,
                ..self
            },
        }
    }
}

/// Master weights and both Adam moments for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupState {
    pub master: Vec<f32>,
    pub exp_avg: Vec<f32>,
    pub exp_avg_sq: Vec<f32>,
    pub hyper: AdamHyperparams,
}

impl GroupState {
    pub fn zeros(len: usize, hyper: AdamHyperparams) -> Self {
        GroupState {
            master: vec![0.0; len],
            exp_avg: vec![0.0; len],
            exp_avg_sq: vec![0.0; len],
            hyper,
        }
    }

    /// True length (no padding).
    pub fn len(&self) -> usize {
        self.master.len()
    }

    pub fn is_empty(&self) -> bool {
        self.master.is_empty()
    }

    pub fn is_consistent(&self) -> bool {
        self.exp_avg.len() == self.master.len() && self.exp_avg_sq.len() == self.master.len()
    }
}

/// Optimizer state keyed by group index. Partial checkpoints carry a subset
/// of the table's groups.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub layout: GroupLayout,
    /// Number of optimizer steps taken so far.
    pub t: u64,
    pub groups: BTreeMap<usize, GroupState>,
}

pub type Gradients = BTreeMap<usize, Vec<f32>>;

impl OptimizerState {
    /// Zero state for every group of `table`, decay applied per class.
    pub fn zeros(table: &ParameterGroupTable, hyper: AdamHyperparams) -> Self {
        let groups = table
            .groups
            .iter()
            .map(|g| (g.index, GroupState::zeros(g.element_count, hyper.for_class(g.decay_class))))
            .collect();
        OptimizerState {
            layout: table.layout,
            t: 0,
            groups,
        }
    }

    pub fn element_count(&self) -> usize {
        self.groups.values().map(GroupState::len).sum()
    }
}

/// Per-group coefficients, computed in f64 and rounded once to f32.
struct StepCoefficients {
    beta1: f32,
    one_minus_beta1: f32,
    beta2: f32,
    one_minus_beta2: f32,
    inv_bias1: f32,
    inv_bias2: f32,
    lr: f32,
    eps: f32,
    decay: f32,
}

impl StepCoefficients {
    fn new(h: &AdamHyperparams, t: u64) -> Self {
        let t = t.min(i32::MAX as u64) as i32;
        StepCoefficients {
            beta1: h.beta1 as f32,
            one_minus_beta1: (1.0 - h.beta1) as f32,
            beta2: h.beta2 as f32,
            one_minus_beta2: (1.0 - h.beta2) as f32,
            inv_bias1: (1.0 / (1.0 - h.beta1.powi(t))) as f32,
            inv_bias2: (1.0 / (1.0 - h.beta2.powi(t))) as f32,
            lr: h.lr as f32,
            eps: h.eps as f32,
            decay: (1.0 - h.lr * h.weight_decay) as f32,
        }
    }
}

fn update_group(state: &mut GroupState, grad: &[f32], c: &StepCoefficients) {
    let GroupState {
        master,
        exp_avg,
        exp_avg_sq,
        ..
    } = state;
    for (((w, m), v), &g) in master
        .iter_mut()
        .zip(exp_avg.iter_mut())
        .zip(exp_avg_sq.iter_mut())
        .zip(grad)
    {
        *m = c.beta1 * *m + c.one_minus_beta1 * g;
        *v = c.beta2 * *v + c.one_minus_beta2 * (g * g);
        let m_hat = *m * c.inv_bias1;
        let v_hat = *v * c.inv_bias2;
        *w = *w * c.decay - c.lr * (m_hat / (v_hat.sqrt() + c.eps));
    }
}

/// One AdamW step with bias correction and decoupled weight decay.
///
/// Increments `state.t` first and uses the new value for bias correction.
/// The state is left untouched when any gradient is malformed.
pub fn apply_step(state: &mut OptimizerState, grads: &Gradients) -> Result<()> {
    if grads.len() != state.groups.len() {
        return Err(TailorError::Geometry(format!(
            "{} gradient groups for {} state groups",
            grads.len(),
            state.groups.len()
        )));
    }
    for (idx, group) in &state.groups {
        let grad = grads
            .get(idx)
            .ok_or_else(|| TailorError::Geometry(format!("no gradient for group {idx}")))?;
        if grad.len() != group.len() || !group.is_consistent() {
            return Err(TailorError::Geometry(format!(
                "group {idx}: gradient length {} vs state length {}",
                grad.len(),
                group.len()
            )));
        }
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(TailorError::NonFinite { group: *idx, index });
        }
    }

    state.t += 1;
    let t = state.t;
    state.groups.par_iter_mut().for_each(|(idx, group)| {
        let coeffs = StepCoefficients::new(&group.hyper, t);
        update_group(group, &grads[idx], &coeffs);
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(w: Vec<f32>, hyper: AdamHyperparams) -> OptimizerState {
        let n = w.len();
        let mut g = GroupState::zeros(n, hyper);
        g.master = w;
        OptimizerState {
            layout: GroupLayout::LayerAligned,
            t: 0,
            groups: BTreeMap::from([(0, g)]),
        }
    }

    /// Scalar AdamW evaluated entirely in f64.
    fn scalar_reference(w: f64, g: f64, h: &AdamHyperparams, t: i32) -> f64 {
        let m = (1.0 - h.beta1) * g;
        let v = (1.0 - h.beta2) * g * g;
        let m_hat = m / (1.0 - h.beta1.powi(t));
        let v_hat = v / (1.0 - h.beta2.powi(t));
        w - h.lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * w)
    }

    #[test]
    fn zero_gradient_fixed_point() {
        let h = AdamHyperparams {
            weight_decay: 0.0,
            ..AdamHyperparams::default()
        };
        let mut s = single(vec![0.5, -1.25, 3.0], h);
        let before = s.clone();
        apply_step(&mut s, &BTreeMap::from([(0, vec![0.0; 3])])).unwrap();
        assert_eq!(s.groups[&0].master, before.groups[&0].master);
        assert!(s.groups[&0].exp_avg.iter().all(|&x| x == 0.0));
        assert!(s.groups[&0].exp_avg_sq.iter().all(|&x| x == 0.0));
        assert_eq!(s.t, 1);
    }

    #[test]
    fn scalar_first_step_matches_reference() {
        let h = AdamHyperparams {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let expected = scalar_reference(1.0, 0.1, &h, 1);
        assert!((expected - 0.9).abs() < 1e-6);
        let mut s = single(vec![1.0], h);
        apply_step(&mut s, &BTreeMap::from([(0, vec![0.1])])).unwrap();
        let w = s.groups[&0].master[0] as f64;
        assert!((w - expected).abs() < 1e-6, "{w} vs {expected}");
    }

    #[test]
    fn decay_only_step_is_exact() {
        let h = AdamHyperparams {
            lr: 0.05,
            weight_decay: 0.3,
            ..AdamHyperparams::default()
        };
        let w0 = vec![1.0f32, -2.5, 0.125, 7.0];
        let mut s = single(w0.clone(), h);
        apply_step(&mut s, &BTreeMap::from([(0, vec![0.0; 4])])).unwrap();
        let factor = (1.0 - h.lr * h.weight_decay) as f32;
        let expect: Vec<f32> = w0.iter().map(|w| w * factor).collect();
        assert_eq!(s.groups[&0].master, expect);
    }

    #[test]
    fn rejects_bad_gradients_without_mutation() {
        let mut s = single(vec![1.0, 2.0], AdamHyperparams::default());
        let before = s.clone();
        let err = apply_step(&mut s, &BTreeMap::from([(0, vec![1.0])])).unwrap_err();
        assert!(matches!(err, TailorError::Geometry(_)));
        let err = apply_step(&mut s, &BTreeMap::from([(0, vec![1.0, f32::NAN])])).unwrap_err();
        assert!(matches!(err, TailorError::NonFinite { group: 0, index: 1 }));
        assert_eq!(s, before);
    }

    #[test]
    fn hyperparam_validation() {
        assert!(AdamHyperparams::default().validate().is_ok());
        let bad = AdamHyperparams {
            beta2: 1.0,
            ..AdamHyperparams::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn second_moment_stays_nonnegative(
            grads in prop::collection::vec(prop::collection::vec(-1e6f32..1e6, 16), 1..8)
        ) {
            let mut s = single(vec![0.1; 16], AdamHyperparams::default());
            for g in grads {
                apply_step(&mut s, &BTreeMap::from([(0, g)])).unwrap();
                prop_assert!(s.groups[&0].exp_avg_sq.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn permutation_equivariant_without_decay(
            pairs in prop::collection::vec((-4f32..4.0, -1f32..1.0), 2..32),
            seed in any::<u64>(),
        ) {
            let h = AdamHyperparams { weight_decay: 0.0, ..AdamHyperparams::default() };
            let (w, g): (Vec<f32>, Vec<f32>) = pairs.iter().copied().unzip();
            let n = w.len();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.rotate_left((seed as usize) % n);
            perm.swap(0, n - 1);

            let mut plain = single(w.clone(), h);
            apply_step(&mut plain, &BTreeMap::from([(0, g.clone())])).unwrap();

            let pw: Vec<f32> = perm.iter().map(|&i| w[i]).collect();
            let pg: Vec<f32> = perm.iter().map(|&i| g[i]).collect();
            let mut permuted = single(pw, h);
            apply_step(&mut permuted, &BTreeMap::from([(0, pg)])).unwrap();

            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(
                    permuted.groups[&0].master[k].to_bits(),
                    plain.groups[&0].master[i].to_bits()
                );
            }
        }
    }
}

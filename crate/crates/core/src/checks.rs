//! Equivalence sweeps run by the `equiv` and `reparam-check` commands and by
//! the acceptance suite.

use crate::attention::{attn_logits, build_hdm, hd_repssa_s, rep_fuse, AttentionParams, AttentionVariant, AttentionWeights, AttnNeurons};
use crate::error::{Error, Result};
use crate::model::{ForwardMode, Model, ModelConfig};
use crate::neuron::{expand_spike_train, if_multistep_fire, spike_matmul_event, NeuronConfig, SpikeTensor};
use crate::numeric::{matmul, rand_normal, rel_diff, Rng};

pub const SWEEP_THETAS: [f64; 3] = [0.5, 1.0, 1.3];
pub const SWEEP_WINDOWS: [u32; 5] = [1, 2, 4, 6, 8];

/// `-2.0, -1.9, ..., 8.0`, each the closest double to its decimal.
pub fn sweep_potentials() -> Vec<f64> {
    (-20..=80).map(|k| k as f64 / 10.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepMismatch {
    pub v: f64,
    pub theta: f64,
    pub time_window: u32,
    pub level: u32,
    pub if_count: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub cases: usize,
    pub mismatches: Vec<SweepMismatch>,
}

/// Compares `fire(v, θ, T)` against the spike count of the iterative IF
/// neuron over the sweep grid.
pub fn mls_if_sweep(fire: impl Fn(f64, f64, u32) -> u32) -> SweepReport {
    let mut cases = 0;
    let mut mismatches = Vec::new();
    for v in sweep_potentials() {
        for theta in SWEEP_THETAS {
            for t in SWEEP_WINDOWS {
                cases += 1;
                let level = fire(v, theta, t);
                let if_count = if_multistep_fire(v, theta, t).iter().map(|&s| u32::from(s)).sum();
                if level != if_count {
                    mismatches.push(SweepMismatch { v, theta, time_window: t, level, if_count });
                }
            }
        }
    }
    SweepReport { cases, mismatches }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpansionReport {
    pub instances: usize,
    /// Largest relative difference between dense and event-driven products.
    pub max_rel: f64,
    /// Instances whose event count differs from `Σ s · fan_out`.
    pub count_mismatches: usize,
    /// Instances whose expanded train does not sum back to the levels.
    pub identity_failures: usize,
}

impl ExpansionReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel <= tol && self.count_mismatches == 0 && self.identity_failures == 0
    }
}

/// Random `(s, W)` pairs through the dense and the accumulate-only product.
pub fn spike_expansion_check(instances: usize, seed: u64) -> Result<ExpansionReport> {
    let mut rng = Rng::new(seed);
    let mut report = ExpansionReport { instances, max_rel: 0.0, count_mismatches: 0, identity_failures: 0 };
    for _ in 0..instances {
        let t = rng.range_inclusive(1, 8) as u32;
        let (n, k, m) = (rng.range_inclusive(1, 12), rng.range_inclusive(1, 12), rng.range_inclusive(1, 12));
        let levels: Vec<u32> = (0..n * k).map(|_| rng.range_inclusive(0, t as usize) as u32).collect();
        let s = SpikeTensor::new(&[n, k], levels, t)?;
        let w = rand_normal(&mut rng, &[k, m]);
        let train = expand_spike_train(&s)?;
        if train.sum_over_time() != s {
            report.identity_failures += 1;
        }
        let dense = matmul(&s.to_real(), &w)?;
        let (event, count) = spike_matmul_event(&train, &w)?;
        report.max_rel = report.max_rel.max(rel_diff(dense.data(), event.data()));
        if count != s.total() * m as u64 {
            report.count_mismatches += 1;
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReparamReport {
    pub trials: usize,
    pub max_logit_rel: f64,
    pub max_block_rel: f64,
    pub model_pairs: usize,
    pub max_model_rel: f64,
    /// Fusing an already fused model was refused.
    pub guard_triggered: bool,
}

impl ReparamReport {
    pub fn passed(&self) -> bool {
        self.max_logit_rel <= 1e-5 && self.max_block_rel <= 1e-4 && self.max_model_rel <= 1e-4 && self.guard_triggered
    }
}

/// Factored against fused execution: per-head logits and an HD-RepSSA_S
/// block every trial, and a whole model every other trial.
pub fn reparam_check(trials: usize, seed: u64) -> Result<ReparamReport> {
    let mut rng = Rng::new(seed);
    let cfg = NeuronConfig::default();
    let mut report = ReparamReport {
        trials,
        max_logit_rel: 0.0,
        max_block_rel: 0.0,
        model_pairs: 0,
        max_model_rel: 0.0,
        guard_triggered: trials == 0,
    };
    for trial in 0..trials {
        let heads = rng.range_inclusive(1, 4);
        let d = heads * rng.range_inclusive(1, 8);
        let n = rng.range_inclusive(1, 16);
        let p = AttentionParams::random(d, heads, &mut rng)?;
        let levels: Vec<u32> = (0..n * d).map(|_| rng.range_inclusive(0, cfg.time_window as usize) as u32).collect();
        let x = SpikeTensor::new(&[n, d], levels, cfg.time_window)?;
        let factored = AttentionWeights::Factored(p.clone());
        let fused = AttentionWeights::Fused(rep_fuse(&p)?);
        let a = attn_logits(&x, &factored)?;
        let b = attn_logits(&x, &fused)?;
        report.max_logit_rel = report.max_logit_rel.max(rel_diff(a.data(), b.data()));

        let mask = build_hdm(n, 1 + trial % 12)?;
        let neurons = AttnNeurons::new(cfg, d);
        let a = hd_repssa_s(&x, &factored, &mask, &neurons, n)?;
        let b = hd_repssa_s(&x, &fused, &mask, &neurons, n)?;
        report.max_block_rel = report.max_block_rel.max(rel_diff(a.data(), b.data()));

        if trial % 2 == 0 {
            let mcfg = ModelConfig { d_model: 16, heads: 2, d_ff: 32, variant: AttentionVariant::HdRepSsaS, ..ModelConfig::default() };
            let input_dim = mcfg.input_dim;
            let model = Model::new(mcfg, rng.next_u64())?;
            let fused_model = model.reparameterize()?;
            let features = rand_normal(&mut rng, &[n, input_dim]);
            let a = model.logits(&features, ForwardMode::TrainMath)?;
            let b = fused_model.spike_driven_forward(&features)?.logits;
            report.max_model_rel = report.max_model_rel.max(rel_diff(a.data(), b.data()));
            report.model_pairs += 1;
            if trial == 0 {
                report.guard_triggered = matches!(fused_model.reparameterize(), Err(Error::State(_)));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::mls_level;

    #[test]
    fn sweep_passes_for_mls_and_catches_off_by_one() {
        let ok = mls_if_sweep(mls_level);
        assert_eq!(ok.cases, 101 * 3 * 5);
        assert!(ok.mismatches.is_empty(), "{:?}", &ok.mismatches[..ok.mismatches.len().min(5)]);
        let broken = mls_if_sweep(|v, th, t| (mls_level(v, th, t) + 1).min(t));
        assert!(!broken.mismatches.is_empty());
    }

    #[test]
    fn zero_trials_is_a_passing_no_op() {
        let r = reparam_check(0, 1).unwrap();
        assert!(r.passed());
        assert_eq!(r.model_pairs, 0);
    }

    #[test]
    fn reports_are_deterministic_per_seed() {
        assert_eq!(reparam_check(6, 3).unwrap(), reparam_check(6, 3).unwrap());
        assert_eq!(spike_expansion_check(10, 3).unwrap(), spike_expansion_check(10, 3).unwrap());
    }
}

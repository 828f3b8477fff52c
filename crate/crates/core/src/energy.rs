//! FLOP counting, firing rates and ANN/SNN energy estimates.
//!
//! A product is spike-fed when one operand is a spike tensor; those cost
//! `T·R·flops` accumulates. Everything else costs one MAC per flop.

use std::fmt::Write as _;

use crate::attention::AttentionVariant;
use crate::error::{Error, Result};
use crate::exec::{OperandKind, Profiler};
use crate::model::ModelConfig;

/// Energy per multiply-accumulate, nJ.
pub const E_MAC_NJ: f64 = 4.6;
/// Energy per accumulate, nJ.
pub const E_AC_NJ: f64 = 0.9;

const NJ_PER_MJ: f64 = 1e6;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerProfile {
    pub name: String,
    /// MAC count.
    pub flops: u64,
    /// Mean spikes per neuron per timestep of the spike operand.
    pub firing_rate: Option<f64>,
    pub timesteps: u32,
    pub kind: OperandKind,
}

impl LayerProfile {
    pub fn new(name: String, flops: u64, kind: OperandKind, timesteps: u32) -> Self {
        Self { name, flops, firing_rate: None, timesteps, kind }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerEnergy {
    pub name: String,
    pub flops: u64,
    pub firing_rate: Option<f64>,
    pub timesteps: u32,
    pub kind: OperandKind,
    /// SNN-side energy of this layer, nJ.
    pub energy_nj: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub layers: Vec<LayerEnergy>,
    pub e_ann_mj: f64,
    pub e_snn_mj: f64,
    pub saving_ratio: f64,
}

impl EnergyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,flops,R,T,kind,energy_nJ\n");
        for l in &self.layers {
            let r = l.firing_rate.map_or_else(String::new, |r| format!("{:.6}", r));
            let _ = writeln!(out, "{},{},{},{},{},{:.6}", l.name, l.flops, r, l.timesteps, l.kind.as_str(), l.energy_nj);
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "E_ANN_mJ={:.6} E_SNN_mJ={:.6} saving_ratio={:.2}",
            self.e_ann_mj, self.e_snn_mj, self.saving_ratio
        )
    }

    pub fn spike_fed_nj(&self) -> f64 {
        self.layers.iter().filter(|l| l.kind == OperandKind::SpikeFed).map(|l| l.energy_nj).sum()
    }
}

/// Per-product MAC counts for one utterance of `seq_len` frames, keyed like
/// the profiler of a forward pass.
pub fn count_flops(cfg: &ModelConfig, fused: bool, seq_len: usize) -> Vec<LayerProfile> {
    use OperandKind::{RealFed, SpikeFed};
    let t = cfg.neuron.time_window;
    let (n, d, h, ff) = (seq_len as u64, cfg.d_model as u64, cfg.heads as u64, cfg.d_ff as u64);
    let dk = if h == 0 { 0 } else { d / h };
    let mut out = vec![LayerProfile::new("input_proj".into(), n * cfg.input_dim as u64 * d, RealFed, t)];
    for l in 1..=cfg.num_layers {
        let mut push = |name: &str, flops: u64, kind| out.push(LayerProfile::new(format!("L{}.{}", l, name), flops, kind, t));
        if cfg.variant == AttentionVariant::Sdsa3 {
            push("q", n * d * d, SpikeFed);
            push("k", n * d * d, SpikeFed);
            push("v", n * d * d, SpikeFed);
            push("kv", h * dk * n * dk, SpikeFed);
            push("q_kv", h * n * dk * dk, SpikeFed);
        } else {
            push("v", n * d * d, SpikeFed);
            if fused && cfg.variant.is_reparameterizable() {
                push("qk", h * n * d * d, SpikeFed);
                push("logits", h * n * d * n, SpikeFed);
            } else {
                push("q", n * d * d, SpikeFed);
                push("k", n * d * d, SpikeFed);
                push("logits", h * n * dk * n, RealFed);
            }
            push("attn_v", h * n * n * dk, SpikeFed);
        }
        push("out", n * d * d, SpikeFed);
        push("mlp1", n * d * ff, SpikeFed);
        push("mlp2", n * ff * d, SpikeFed);
    }
    out.push(LayerProfile::new("head".into(), d * cfg.num_classes as u64, RealFed, t));
    out
}

/// Mean level over `numel · T`.
pub fn firing_rate(levels: &[f64], time_window: u32) -> f64 {
    if levels.is_empty() || time_window == 0 {
        return 0.0;
    }
    levels.iter().sum::<f64>() / (levels.len() as f64 * time_window as f64)
}

/// Profiles of an instrumented run, with rates filled for spike-fed products.
///
/// Over several calls of one product the rate is weighted by each call's
/// MACs, which keeps `T·R·flops` equal to the accumulations actually needed.
pub fn record_firing_rates(profile: &Profiler, time_window: u32) -> Vec<LayerProfile> {
    profile
        .entries
        .iter()
        .map(|(name, s)| {
            let mut p = LayerProfile::new(name.clone(), s.flops, s.kind, time_window);
            if s.kind == OperandKind::SpikeFed {
                p.firing_rate = Some(if s.flops == 0 {
                    0.0
                } else {
                    s.spike_macs as f64 / (s.flops as f64 * time_window as f64)
                });
            }
            p
        })
        .collect()
}

/// Σ flops · E_MAC, in mJ.
pub fn estimate_ann_energy(profiles: &[LayerProfile]) -> f64 {
    profiles.iter().map(|p| p.flops as f64 * E_MAC_NJ).sum::<f64>() / NJ_PER_MJ
}

fn snn_layer_nj(p: &LayerProfile) -> Result<f64> {
    match p.kind {
        OperandKind::RealFed => Ok(p.flops as f64 * E_MAC_NJ),
        OperandKind::SpikeFed => {
            let r = p.firing_rate.ok_or_else(|| Error::Profile(format!("no firing rate for {}", p.name)))?;
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Profile(format!("firing rate {} of {} outside [0, 1]", r, p.name)));
            }
            Ok(p.timesteps as f64 * r * p.flops as f64 * E_AC_NJ)
        }
    }
}

/// Spike-fed layers at `T·R·flops·E_AC`, real-fed at `flops·E_MAC`; mJ.
pub fn estimate_snn_energy(profiles: &[LayerProfile]) -> Result<f64> {
    let mut total = 0.0;
    for p in profiles {
        total += snn_layer_nj(p)?;
    }
    Ok(total / NJ_PER_MJ)
}

pub fn energy_report(profiles: &[LayerProfile]) -> Result<EnergyReport> {
    let layers = profiles
        .iter()
        .map(|p| {
            Ok(LayerEnergy {
                name: p.name.clone(),
                flops: p.flops,
                firing_rate: p.firing_rate,
                timesteps: p.timesteps,
                kind: p.kind,
                energy_nj: snn_layer_nj(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let e_ann_mj = estimate_ann_energy(profiles);
    let e_snn_mj = layers.iter().map(|l| l.energy_nj).sum::<f64>() / NJ_PER_MJ;
    let saving_ratio = if e_snn_mj > 0.0 { e_ann_mj / e_snn_mj } else { f64::INFINITY };
    Ok(EnergyReport { layers, e_ann_mj, e_snn_mj, saving_ratio })
}

/// Both routes to the spike-fed energy of an event-driven run, in nJ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventCrossCheck {
    pub event_nj: f64,
    pub rate_nj: f64,
}

impl EventCrossCheck {
    pub fn rel_diff(&self) -> f64 {
        let scale = self.event_nj.abs().max(self.rate_nj.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.event_nj - self.rate_nj).abs() / scale
        }
    }
}

/// Accumulation events times E_AC.
pub fn event_energy_nj(events: u64) -> f64 {
    events as f64 * E_AC_NJ
}

/// Compares the counted events of an event-driven run against the
/// rate-based estimate of the same run.
pub fn cross_check_event_energy(profile: &Profiler, time_window: u32) -> Result<EventCrossCheck> {
    let profiles = record_firing_rates(profile, time_window);
    let mut rate_nj = 0.0;
    for p in profiles.iter().filter(|p| p.kind == OperandKind::SpikeFed) {
        rate_nj += snn_layer_nj(p)?;
    }
    Ok(EventCrossCheck { event_nj: event_energy_nj(profile.total_events()), rate_nj })
}

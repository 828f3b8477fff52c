//! Spiking neuron mechanics.
//!
//! Two views of the same neuron live here:
//!
//! * the iterative integrate-and-fire dynamics with soft reset
//!   ([`lif_step`], [`if_multistep_fire`], [`if_multistep_layer`]), kept as the
//!   reference the single-step path is checked against;
//! * single-step multi-level firing ([`mls_fire`]), where one integer level in
//!   `0..=T` stands for the whole `T`-step binary train, together with its
//!   straight-through surrogate gradient and the input-aware per-channel
//!   threshold adaptation ([`imls_fire`]).
//!
//! For event-driven execution a level tensor is expanded back into its binary
//! train ([`expand_spike_train`]) and multiplied by accumulation only
//! ([`spike_matmul_event`]).

use crate::error::{Error, Result};
use crate::numeric::RealArray;

/// Potentials (in threshold units) this close below a level still reach it,
/// so a value on a boundary up to rounding error fires the same on every path.
pub const LEVEL_TOL: f64 = 1e-9;

/// `⌊clip(u, 0, T)⌋` with the boundary tolerance.
#[inline]
pub fn level_floor(u: f64, time_window: f64) -> f64 {
    (u.clamp(0.0, time_window) + LEVEL_TOL).floor().min(time_window)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeuronConfig {
    /// Base firing threshold.
    pub theta: f64,
    /// Leak factor; 1.0 is a pure integrate-and-fire neuron.
    pub beta: f64,
    /// Time window `T`, also the largest multi-level spike.
    pub time_window: u32,
    /// Momentum of the running maximum.
    pub alpha: f64,
    /// Lower clamp of the running maximum.
    pub epsilon: f64,
    /// `false` fires against the fixed base threshold (plain MLS).
    pub adaptive: bool,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        Self { theta: 1.0, beta: 1.0, time_window: 4, alpha: 0.1, epsilon: 1e-5, adaptive: true }
    }
}

impl NeuronConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::Config(format!("theta must be > 0, got {}", self.theta)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if self.time_window < 1 {
            return Err(Error::Config("time window must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Per-channel running maximum of pre-synaptic input and the derived scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdState {
    pub running_max: Vec<f64>,
    /// `T / running_max`, kept in sync by every constructor and update.
    pub lambda: Vec<f64>,
    pub time_window: u32,
    pub frozen: bool,
}

impl ThresholdState {
    /// Neutral start: running max equal to `T`, so the effective threshold
    /// starts out at the base threshold.
    pub fn new(channels: usize, time_window: u32) -> Self {
        Self::from_running_max(vec![time_window as f64; channels], time_window, false)
    }

    pub fn from_running_max(running_max: Vec<f64>, time_window: u32, frozen: bool) -> Self {
        let t = time_window as f64;
        let lambda = running_max.iter().map(|m| t / m).collect();
        Self { running_max, lambda, time_window, frozen }
    }

    pub fn channels(&self) -> usize {
        self.running_max.len()
    }

    /// Per-channel effective threshold `θ·Λ̃/T`; the base threshold when not adaptive.
    pub fn effective_thresholds(&self, cfg: &NeuronConfig) -> Vec<f64> {
        self.scales(cfg).iter().map(ChannelScale::threshold).collect()
    }

    /// Per-channel map from input to normalised potential.
    pub fn scales(&self, cfg: &NeuronConfig) -> Vec<ChannelScale> {
        if cfg.adaptive {
            let gain = self.time_window as f64 / cfg.theta;
            self.running_max.iter().map(|&m| ChannelScale { divisor: m, gain }).collect()
        } else {
            vec![ChannelScale { divisor: cfg.theta, gain: 1.0 }; self.channels()]
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn round_to_storage(&mut self) {
        for m in &mut self.running_max {
            *m = *m as f32 as f64;
        }
        let t = self.time_window as f64;
        self.lambda = self.running_max.iter().map(|m| t / m).collect();
    }
}

/// Maps an input to the potential that fires against a unit threshold:
/// `u = x / divisor * gain`.
///
/// Adaptive channels use `divisor = Λ̃`, `gain = T/θ`, i.e. threshold
/// `θ·Λ̃/T`; dividing by `Λ̃` first makes an input equal to the running max
/// land exactly on `T/θ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelScale {
    pub divisor: f64,
    pub gain: f64,
}

impl ChannelScale {
    pub fn unit(theta: f64) -> Self {
        Self { divisor: theta, gain: 1.0 }
    }

    #[inline]
    pub fn potential(&self, x: f64) -> f64 {
        x / self.divisor * self.gain
    }

    /// `du/dx`, the surrogate slope inside the active range.
    #[inline]
    pub fn slope(&self) -> f64 {
        self.gain / self.divisor
    }

    pub fn threshold(&self) -> f64 {
        self.divisor / self.gain
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MembraneState {
    pub v: RealArray,
}

impl MembraneState {
    pub fn zeros(dims: &[usize]) -> Self {
        Self { v: RealArray::zeros(dims) }
    }
}

/// Integer spike levels in `0..=T`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeTensor {
    pub dims: Vec<usize>,
    pub levels: Vec<u32>,
    pub time_window: u32,
}

impl SpikeTensor {
    pub fn new(dims: &[usize], levels: Vec<u32>, time_window: u32) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != levels.len() {
            return Err(Error::Dimension(format!("dims {:?} vs {} levels", dims, levels.len())));
        }
        let s = Self { dims: dims.to_vec(), levels, time_window };
        s.check()?;
        Ok(s)
    }

    pub fn zeros(dims: &[usize], time_window: u32) -> Self {
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), levels: vec![0; n], time_window }
    }

    /// Reads levels out of a real array holding small non-negative integers.
    pub fn from_real(a: &RealArray, time_window: u32) -> Result<Self> {
        let mut levels = Vec::with_capacity(a.len());
        for (i, &v) in a.data().iter().enumerate() {
            if v < 0.0 || v.fract() != 0.0 || v > time_window as f64 {
                return Err(Error::Corruption(format!("element {} = {} is not a level in 0..={}", i, v, time_window)));
            }
            levels.push(v as u32);
        }
        Ok(Self { dims: a.dims().to_vec(), levels, time_window })
    }

    pub fn to_real(&self) -> RealArray {
        RealArray::new(&self.dims, self.levels.iter().map(|&l| l as f64).collect())
    }

    pub fn total(&self) -> u64 {
        self.levels.iter().map(|&l| l as u64).sum()
    }

    pub fn check(&self) -> Result<()> {
        match self.levels.iter().position(|&l| l > self.time_window) {
            Some(i) => Err(Error::Corruption(format!(
                "level {} at {} exceeds T = {}",
                self.levels[i], i, self.time_window
            ))),
            None => Ok(()),
        }
    }
}

/// One step of leaky integrate-and-fire with soft reset.
///
/// Returns the post-reset membrane and a 0/1 spike array. Firing is inclusive
/// (`v >= θ`).
pub fn lif_step(state: &MembraneState, x: &RealArray, cfg: &NeuronConfig) -> Result<(MembraneState, RealArray)> {
    if state.v.dims() != x.dims() {
        return Err(Error::Dimension(format!("membrane {:?} vs input {:?}", state.v.dims(), x.dims())));
    }
    let mut v = state.v.zip_map(x, |v, x| cfg.beta * v + x)?;
    let mut spikes = RealArray::zeros(x.dims());
    for (vi, si) in v.data_mut().iter_mut().zip(spikes.data_mut()) {
        if *vi + LEVEL_TOL * cfg.theta >= cfg.theta {
            *si = 1.0;
            *vi -= cfg.theta;
        }
    }
    Ok((MembraneState { v }, spikes))
}

/// Integrate-and-fire neuron driven only at the first step, run for `T` steps.
pub fn if_multistep_fire(x1: f64, theta: f64, time_window: u32) -> Vec<u8> {
    let mut v = 0.0;
    let mut train = Vec::with_capacity(time_window as usize);
    for t in 0..time_window {
        if t == 0 {
            v += x1;
        }
        if v + LEVEL_TOL * theta >= theta {
            train.push(1);
            v -= theta;
        } else {
            train.push(0);
        }
    }
    train
}

/// Multi-level spike for a single potential: `⌊clip(v/θ, 0, T)⌋`.
#[inline]
pub fn mls_level(v1: f64, theta: f64, time_window: u32) -> u32 {
    level_floor(v1 / theta, time_window as f64) as u32
}

pub fn mls_fire(v1: &RealArray, theta: f64, time_window: u32) -> SpikeTensor {
    SpikeTensor {
        dims: v1.dims().to_vec(),
        levels: v1.data().iter().map(|&v| mls_level(v, theta, time_window)).collect(),
        time_window,
    }
}

/// Straight-through derivative of the multi-level spike: `1/θ` on the closed
/// interval `[0, θT]`, zero elsewhere.
#[inline]
pub fn mls_surrogate(v1: f64, theta: f64, time_window: u32) -> f64 {
    if (0.0..=theta * time_window as f64).contains(&v1) {
        1.0 / theta
    } else {
        0.0
    }
}

pub fn mls_surrogate_grad(v1: &RealArray, theta: f64, time_window: u32) -> RealArray {
    v1.map(|v| mls_surrogate(v, theta, time_window))
}

/// Per-channel maximum over the valid frames of every sequence in a batch,
/// clamped below at `epsilon`. `x` is `B × L × C`.
pub fn compute_batch_max(x: &RealArray, valid_lengths: &[usize], epsilon: f64) -> Result<Vec<f64>> {
    if x.rank() != 3 {
        return Err(Error::Dimension(format!("expected B×L×C, got {:?}", x.dims())));
    }
    let (b, l, c) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let seqs: Vec<RealArray> = (0..b)
        .map(|i| RealArray::new(&[l, c], x.data()[i * l * c..(i + 1) * l * c].to_vec()))
        .collect();
    let refs: Vec<&RealArray> = seqs.iter().collect();
    batch_max_rows(&refs, valid_lengths, epsilon)
}

/// [`compute_batch_max`] over a batch already split into `L × C` matrices.
pub fn batch_max_rows(seqs: &[&RealArray], valid_lengths: &[usize], epsilon: f64) -> Result<Vec<f64>> {
    if seqs.len() != valid_lengths.len() {
        return Err(Error::Dimension(format!("{} sequences, {} lengths", seqs.len(), valid_lengths.len())));
    }
    let c = seqs.first().ok_or_else(|| Error::Precondition("empty batch".into()))?.cols();
    let mut max = vec![f64::NEG_INFINITY; c];
    let mut seen = false;
    for (seq, &valid) in seqs.iter().zip(valid_lengths) {
        if seq.cols() != c {
            return Err(Error::Dimension(format!("channel count {} vs {}", seq.cols(), c)));
        }
        if valid > seq.rows() {
            return Err(Error::Precondition(format!("valid length {} exceeds {}", valid, seq.rows())));
        }
        for r in 0..valid {
            seen = true;
            for (m, &v) in max.iter_mut().zip(seq.row(r)) {
                *m = m.max(v);
            }
        }
    }
    if !seen {
        return Err(Error::Precondition("no valid frames in batch".into()));
    }
    Ok(max.into_iter().map(|m| m.max(epsilon)).collect())
}

/// Exponential moving average of the running maximum.
pub fn update_running_max(state: &ThresholdState, batch_max: &[f64], alpha: f64) -> Result<ThresholdState> {
    if state.frozen {
        return Err(Error::State("threshold statistics are frozen".into()));
    }
    if batch_max.len() != state.channels() {
        return Err(Error::Dimension(format!("{} channels vs state {}", batch_max.len(), state.channels())));
    }
    let running = state
        .running_max
        .iter()
        .zip(batch_max)
        .map(|(m, b)| (1.0 - alpha) * m + alpha * b)
        .collect();
    Ok(ThresholdState::from_running_max(running, state.time_window, false))
}

/// Fires every element of `x` against its column's scale.
pub fn fire_columns(x: &RealArray, scales: &[ChannelScale], time_window: u32) -> RealArray {
    let c = *x.dims().last().unwrap_or(&1);
    debug_assert_eq!(c, scales.len());
    let t = time_window as f64;
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = level_floor(scales[i % c].potential(*v), t);
    }
    out
}

/// Input-aware multi-level firing of a `B × L × C` batch.
///
/// In training mode the running statistics are first refreshed from the valid
/// frames of this batch, then every element fires against
/// `θ_eff[c] = θ·Λ̃[c]/T`. In inference mode the statistics are used as they are.
pub fn imls_fire(
    x: &RealArray,
    state: &ThresholdState,
    cfg: &NeuronConfig,
    training: bool,
    valid_lengths: &[usize],
) -> Result<(SpikeTensor, ThresholdState)> {
    let c = *x.dims().last().unwrap_or(&0);
    if c != state.channels() {
        return Err(Error::Dimension(format!("input has {} channels, state {}", c, state.channels())));
    }
    let state = if training && cfg.adaptive {
        let batch_max = compute_batch_max(x, valid_lengths, cfg.epsilon)?;
        update_running_max(state, &batch_max, cfg.alpha)?
    } else {
        state.clone()
    };
    let levels = fire_columns(x, &state.scales(cfg), cfg.time_window);
    Ok((SpikeTensor::from_real(&levels, cfg.time_window)?, state))
}

/// Binary spike train, time-major: `bits[t * numel + i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeTrain {
    pub time_window: u32,
    pub dims: Vec<usize>,
    pub bits: Vec<u8>,
}

impl SpikeTrain {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn step(&self, t: usize) -> &[u8] {
        let n = self.numel();
        &self.bits[t * n..(t + 1) * n]
    }

    /// Spike count per element, summed over time.
    pub fn sum_over_time(&self) -> SpikeTensor {
        let n = self.numel();
        let mut levels = vec![0u32; n];
        for t in 0..self.time_window as usize {
            for (l, &b) in levels.iter_mut().zip(self.step(t)) {
                *l += b as u32;
            }
        }
        SpikeTensor { dims: self.dims.clone(), levels, time_window: self.time_window }
    }
}

/// Level `k` becomes `k` ones followed by `T - k` zeros.
pub fn expand_spike_train(s: &SpikeTensor) -> Result<SpikeTrain> {
    s.check()?;
    let n = s.levels.len();
    let t_max = s.time_window as usize;
    let mut bits = vec![0u8; t_max * n];
    for (i, &l) in s.levels.iter().enumerate() {
        for t in 0..l as usize {
            bits[t * n + i] = 1;
        }
    }
    Ok(SpikeTrain { time_window: s.time_window, dims: s.dims.clone(), bits })
}

/// Accumulate-only product of a binary train `T × N × D` with `W: D × M`.
///
/// For each step and each emitted spike the matching row of `W` is added to
/// the output. Returns the product and the number of scalar accumulations.
pub fn spike_matmul_event(train: &SpikeTrain, w: &RealArray) -> Result<(RealArray, u64)> {
    if train.dims.len() != 2 {
        return Err(Error::Dimension(format!("train must be T×N×D, got step dims {:?}", train.dims)));
    }
    let (n, d) = (train.dims[0], train.dims[1]);
    let (d2, m) = w.shape2();
    if d != d2 {
        return Err(Error::Dimension(format!("train width {} vs weight rows {}", d, d2)));
    }
    let mut out = vec![0.0; n * m];
    let mut events = 0u64;
    for t in 0..train.time_window as usize {
        let step = train.step(t);
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for (k, &bit) in step[i * d..(i + 1) * d].iter().enumerate() {
                if bit == 0 {
                    continue;
                }
                for (o, &wv) in orow.iter_mut().zip(w.row(k)) {
                    *o += wv;
                }
                events += m as u64;
            }
        }
    }
    Ok((RealArray::new(&[n, m], out), events))
}

/// Iterative integrate-and-fire of a whole layer, every neuron driven only at
/// the first step, with its column's threshold. Keeps every intermediate
/// membrane and spike array, as unrolled multi-step training would.
#[derive(Clone, Debug)]
pub struct MultiStepTrace {
    pub membrane: Vec<RealArray>,
    pub spikes: Vec<RealArray>,
}

impl MultiStepTrace {
    /// Number of stored scalar states (membrane + spike values over all steps).
    pub fn state_count(&self) -> usize {
        self.membrane.iter().chain(&self.spikes).map(RealArray::len).sum()
    }

    pub fn levels(&self) -> RealArray {
        let mut total = RealArray::zeros(self.spikes[0].dims());
        for s in &self.spikes {
            for (a, b) in total.data_mut().iter_mut().zip(s.data()) {
                *a += b;
            }
        }
        total
    }
}

/// Runs each element's normalised potential through a unit-threshold IF neuron.
pub fn if_multistep_layer(v1: &RealArray, scales: &[ChannelScale], time_window: u32) -> MultiStepTrace {
    let c = *v1.dims().last().unwrap_or(&1);
    let mut state = MembraneState::zeros(v1.dims());
    let mut membrane = Vec::with_capacity(time_window as usize);
    let mut spikes = Vec::with_capacity(time_window as usize);
    for t in 0..time_window {
        if t == 0 {
            state.v = v1.clone();
            for (i, v) in state.v.data_mut().iter_mut().enumerate() {
                *v = scales[i % c].potential(*v);
            }
        }
        let mut s = RealArray::zeros(v1.dims());
        for (v, si) in state.v.data_mut().iter_mut().zip(s.data_mut()) {
            if *v + LEVEL_TOL >= 1.0 {
                *si = 1.0;
                *v -= 1.0;
            }
        }
        membrane.push(state.v.clone());
        spikes.push(s);
    }
    MultiStepTrace { membrane, spikes }
}

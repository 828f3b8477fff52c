//! Execution backends for the spiking forward pass.
//!
//! Attention, MLP and model code is written once against [`Exec`]; a backend
//! decides what each primitive means. [`DenseExec`] evaluates directly and can
//! optionally execute spike-fed products by event accumulation, fire through
//! the iterative IF reference, and record per-product operation counts and
//! per-site firing statistics. The recording tape in
//! [`crate::autodiff`] is another backend.
//!
//! A product is *spike-fed* when one operand holds spike levels; those go
//! through [`Exec::spike_matmul`] (spikes on the left) or
//! [`Exec::matmul_spike`] (spikes on the right). Everything else is
//! [`Exec::matmul`].

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::neuron::{
    batch_max_rows, expand_spike_train, fire_columns, if_multistep_layer, spike_matmul_event, update_running_max,
    NeuronConfig, SpikeTensor, ThresholdState,
};
use crate::numeric::{matmul, softmax_rows, RealArray};

pub trait Exec {
    type V: Clone;

    fn constant(&mut self, a: RealArray) -> Self::V;
    /// A trainable parameter; `id` indexes the owner's parameter list.
    fn weight(&mut self, id: usize, w: &RealArray) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a RealArray;
    fn time_window(&self) -> u32;

    fn matmul(&mut self, key: &str, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn spike_matmul(&mut self, key: &str, s: &Self::V, w: &Self::V) -> Result<Self::V>;
    fn matmul_spike(&mut self, key: &str, a: &Self::V, s: &Self::V) -> Result<Self::V>;

    fn transpose(&mut self, a: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    /// Adds a `1 × C` row to every row of `a`.
    fn add_row(&mut self, a: &Self::V, row: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: &Self::V, k: f64) -> Self::V;
    fn mask_mul(&mut self, a: &Self::V, mask: &Rc<RealArray>) -> Result<Self::V>;
    /// Softmax over the first `valid_cols` columns; the rest get weight zero.
    fn softmax_rows(&mut self, a: &Self::V, valid_cols: usize) -> Result<Self::V>;
    fn zero_rows_from(&mut self, a: &Self::V, valid_rows: usize) -> Self::V;
    fn col_slice(&mut self, a: &Self::V, start: usize, len: usize) -> Self::V;
    fn concat_cols(&mut self, parts: &[Self::V]) -> Self::V;
    /// Mean over the first `valid_rows` rows, as a `1 × C` row.
    fn mean_pool(&mut self, a: &Self::V, valid_rows: usize) -> Result<Self::V>;

    /// Fires one neuron site for a whole batch of `L × C` inputs.
    fn fire(&mut self, site: usize, xs: &[Self::V], valid: &[usize]) -> Result<Vec<Self::V>>;

    fn observe_attention(&mut self, _layer: usize, _head: usize, _map: &Self::V) {}
}

/// Neuron parameters plus one threshold state per site.
#[derive(Clone, Debug)]
pub struct SiteBank {
    pub cfg: NeuronConfig,
    pub states: Vec<ThresholdState>,
    /// Refresh statistics from each batch before firing (training mode).
    pub update: bool,
}

impl SiteBank {
    pub fn frozen(cfg: NeuronConfig, states: Vec<ThresholdState>) -> Self {
        Self { cfg, states, update: false }
    }

    /// Applies the training-mode statistics update for `site` if enabled.
    pub fn refresh(&mut self, site: usize, xs: &[&RealArray], valid: &[usize]) -> Result<()> {
        if !(self.update && self.cfg.adaptive) {
            return Ok(());
        }
        let state = self
            .states
            .get(site)
            .ok_or_else(|| Error::State(format!("no neuron site {}", site)))?;
        let batch_max = batch_max_rows(xs, valid, self.cfg.epsilon)?;
        self.states[site] = update_running_max(state, &batch_max, self.cfg.alpha)?;
        Ok(())
    }

    pub fn check_channels(&self, site: usize, x: &RealArray) -> Result<()> {
        let state = self
            .states
            .get(site)
            .ok_or_else(|| Error::State(format!("no neuron site {}", site)))?;
        if x.cols() != state.channels() {
            return Err(Error::Dimension(format!(
                "site {} has {} channels, input has {}",
                site,
                state.channels(),
                x.cols()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OperandKind {
    SpikeFed,
    RealFed,
}

impl OperandKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OperandKind::SpikeFed => "spike-fed",
            OperandKind::RealFed => "real-fed",
        }
    }
}

/// Counters for one named product over a run.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductStats {
    pub kind: OperandKind,
    /// Multiply-accumulate count of the dense product.
    pub flops: u64,
    /// Sum of spike levels of the spike operand.
    pub spike_sum: u64,
    /// Element count of the spike operand.
    pub spike_numel: u64,
    /// Sum of spike levels times the fan-out of each spike, i.e. the
    /// accumulations the product needs when driven by events.
    pub spike_macs: u64,
    /// Scalar accumulations actually executed (event-driven runs only).
    pub events: u64,
}

/// Ordered record of every product executed during a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Profiler {
    pub entries: Vec<(String, ProductStats)>,
}

impl Profiler {
    fn entry(&mut self, key: &str, kind: OperandKind) -> &mut ProductStats {
        let idx = match self.entries.iter().position(|(k, _)| k == key) {
            Some(i) => i,
            None => {
                self.entries.push((
                    key.to_string(),
                    ProductStats { kind, flops: 0, spike_sum: 0, spike_numel: 0, spike_macs: 0, events: 0 },
                ));
                self.entries.len() - 1
            }
        };
        &mut self.entries[idx].1
    }

    pub fn get(&self, key: &str) -> Option<&ProductStats> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, s)| s)
    }

    pub fn total_events(&self) -> u64 {
        self.entries.iter().map(|(_, s)| s.events).sum()
    }

    /// Adds the counters of `other`, keeping first-seen key order.
    pub fn merge(&mut self, other: &Profiler) {
        for (key, s) in &other.entries {
            let e = self.entry(key, s.kind);
            e.flops += s.flops;
            e.spike_sum += s.spike_sum;
            e.spike_numel += s.spike_numel;
            e.spike_macs += s.spike_macs;
            e.events += s.events;
        }
    }
}

/// Per-site firing statistics over valid frames.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteActivity {
    /// Sum of levels per channel.
    pub channel_sum: Vec<f64>,
    /// Number of valid frames seen.
    pub frames: u64,
    pub time_window: u32,
}

impl SiteActivity {
    pub fn new(channels: usize, time_window: u32) -> Self {
        Self { channel_sum: vec![0.0; channels], frames: 0, time_window }
    }

    /// Mean spikes per neuron per step.
    pub fn mean_rate(&self) -> f64 {
        if self.frames == 0 {
            return 0.0;
        }
        let total: f64 = self.channel_sum.iter().sum();
        total / (self.frames as f64 * self.channel_sum.len() as f64 * self.time_window as f64)
    }

    pub fn channel_rates(&self) -> Vec<f64> {
        let denom = (self.frames.max(1) * self.time_window as u64) as f64;
        self.channel_sum.iter().map(|s| s / denom).collect()
    }

    pub fn silent_channels(&self) -> usize {
        self.channel_sum.iter().filter(|&&s| s == 0.0).count()
    }

    pub fn merge(&mut self, other: &SiteActivity) {
        for (a, b) in self.channel_sum.iter_mut().zip(&other.channel_sum) {
            *a += b;
        }
        self.frames += other.frames;
    }
}

/// Direct evaluation backend.
pub struct DenseExec {
    pub bank: SiteBank,
    /// Execute spike-fed products by expansion and accumulation.
    pub event_driven: bool,
    /// Fire through the iterative IF reference instead of the single-step rule.
    pub multistep_oracle: bool,
    /// Scalar states the iterative reference had to keep.
    pub oracle_states: usize,
    pub profiler: Option<Profiler>,
    pub activity: Option<Vec<SiteActivity>>,
    pub attention_maps: Option<Vec<(usize, usize, RealArray)>>,
}

impl DenseExec {
    pub fn new(bank: SiteBank) -> Self {
        Self {
            bank,
            event_driven: false,
            multistep_oracle: false,
            oracle_states: 0,
            profiler: None,
            activity: None,
            attention_maps: None,
        }
    }

    pub fn with_profiler(mut self) -> Self {
        self.profiler = Some(Profiler::default());
        self
    }

    pub fn with_activity(mut self) -> Self {
        let t = self.bank.cfg.time_window;
        self.activity = Some(self.bank.states.iter().map(|s| SiteActivity::new(s.channels(), t)).collect());
        self
    }

    pub fn event_driven(mut self) -> Self {
        self.event_driven = true;
        self
    }

    pub fn multistep_oracle(mut self) -> Self {
        self.multistep_oracle = true;
        self
    }

    pub fn capture_attention(mut self) -> Self {
        self.attention_maps = Some(Vec::new());
        self
    }

    fn record(&mut self, key: &str, kind: OperandKind, flops: u64, spikes: Option<&RealArray>, events: u64) {
        if let Some(p) = self.profiler.as_mut() {
            let e = p.entry(key, kind);
            e.flops += flops;
            if let Some(s) = spikes {
                let sum = s.sum() as u64;
                e.spike_sum += sum;
                e.spike_numel += s.len() as u64;
                if !s.is_empty() {
                    e.spike_macs += sum * (flops / s.len() as u64);
                }
            }
            e.events += events;
        }
    }

    /// `s · w` by expanding `s` into its binary train and accumulating rows of `w`.
    fn event_product(&self, s: &RealArray, w: &RealArray) -> Result<(RealArray, u64)> {
        let spikes = SpikeTensor::from_real(s, self.bank.cfg.time_window)?;
        let train = expand_spike_train(&spikes)?;
        spike_matmul_event(&train, w)
    }
}

type Shared = Rc<RealArray>;

impl Exec for DenseExec {
    type V = Shared;

    fn constant(&mut self, a: RealArray) -> Shared {
        Rc::new(a)
    }

    fn weight(&mut self, _id: usize, w: &RealArray) -> Shared {
        Rc::new(w.clone())
    }

    fn value<'a>(&'a self, v: &'a Shared) -> &'a RealArray {
        v
    }

    fn time_window(&self) -> u32 {
        self.bank.cfg.time_window
    }

    fn matmul(&mut self, key: &str, a: &Shared, b: &Shared) -> Result<Shared> {
        let out = matmul(a, b)?;
        let flops = (a.rows() * a.cols() * b.cols()) as u64;
        self.record(key, OperandKind::RealFed, flops, None, 0);
        Ok(Rc::new(out))
    }

    fn spike_matmul(&mut self, key: &str, s: &Shared, w: &Shared) -> Result<Shared> {
        let flops = (s.rows() * s.cols() * w.cols()) as u64;
        let (out, events) = if self.event_driven { self.event_product(s, w)? } else { (matmul(s, w)?, 0) };
        self.record(key, OperandKind::SpikeFed, flops, Some(s), events);
        Ok(Rc::new(out))
    }

    fn matmul_spike(&mut self, key: &str, a: &Shared, s: &Shared) -> Result<Shared> {
        let flops = (a.rows() * a.cols() * s.cols()) as u64;
        let (out, events) = if self.event_driven {
            // a·s = (sᵀ·aᵀ)ᵀ keeps the spike operand on the left.
            let (t, ev) = self.event_product(&s.transpose(), &a.transpose())?;
            (t.transpose(), ev)
        } else {
            (matmul(a, s)?, 0)
        };
        self.record(key, OperandKind::SpikeFed, flops, Some(s), events);
        Ok(Rc::new(out))
    }

    fn transpose(&mut self, a: &Shared) -> Shared {
        Rc::new(a.transpose())
    }

    fn add(&mut self, a: &Shared, b: &Shared) -> Result<Shared> {
        Ok(Rc::new(a.add(b)?))
    }

    fn add_row(&mut self, a: &Shared, row: &Shared) -> Result<Shared> {
        let (r, c) = a.shape2();
        if row.len() != c {
            return Err(Error::Dimension(format!("row of {} added to {} columns", row.len(), c)));
        }
        let mut out = (**a).clone();
        for i in 0..r {
            for j in 0..c {
                out.set(i, j, a.at(i, j) + row.data()[j]);
            }
        }
        Ok(Rc::new(out))
    }

    fn scale(&mut self, a: &Shared, k: f64) -> Shared {
        Rc::new(a.scale(k))
    }

    fn mask_mul(&mut self, a: &Shared, mask: &Rc<RealArray>) -> Result<Shared> {
        Ok(Rc::new(a.zip_map(mask, |x, m| x * m)?))
    }

    fn softmax_rows(&mut self, a: &Shared, valid_cols: usize) -> Result<Shared> {
        Ok(Rc::new(masked_softmax(a, valid_cols)?))
    }

    fn zero_rows_from(&mut self, a: &Shared, valid_rows: usize) -> Shared {
        Rc::new(zero_rows_from(a, valid_rows))
    }

    fn col_slice(&mut self, a: &Shared, start: usize, len: usize) -> Shared {
        Rc::new(a.col_slice(start, len))
    }

    fn concat_cols(&mut self, parts: &[Shared]) -> Shared {
        let refs: Vec<&RealArray> = parts.iter().map(|p| p.as_ref()).collect();
        Rc::new(RealArray::concat_cols(&refs))
    }

    fn mean_pool(&mut self, a: &Shared, valid_rows: usize) -> Result<Shared> {
        Ok(Rc::new(mean_pool(a, valid_rows)?))
    }

    fn fire(&mut self, site: usize, xs: &[Shared], valid: &[usize]) -> Result<Vec<Shared>> {
        for x in xs {
            self.bank.check_channels(site, x)?;
        }
        let refs: Vec<&RealArray> = xs.iter().map(|x| x.as_ref()).collect();
        self.bank.refresh(site, &refs, valid)?;
        let scales = self.bank.states[site].scales(&self.bank.cfg);
        let t = self.bank.cfg.time_window;
        let mut out = Vec::with_capacity(xs.len());
        for (x, &v) in xs.iter().zip(valid) {
            let levels = if self.multistep_oracle {
                let trace = if_multistep_layer(x, &scales, t);
                self.oracle_states += trace.state_count();
                trace.levels()
            } else {
                fire_columns(x, &scales, t)
            };
            if let Some(act) = self.activity.as_mut() {
                let a = &mut act[site];
                for r in 0..v {
                    for (s, l) in a.channel_sum.iter_mut().zip(levels.row(r)) {
                        *s += l;
                    }
                }
                a.frames += v as u64;
            }
            out.push(Rc::new(levels));
        }
        Ok(out)
    }

    fn observe_attention(&mut self, layer: usize, head: usize, map: &Shared) {
        if let Some(maps) = self.attention_maps.as_mut() {
            maps.push((layer, head, (**map).clone()));
        }
    }
}

pub fn masked_softmax(a: &RealArray, valid_cols: usize) -> Result<RealArray> {
    let (r, c) = a.shape2();
    if valid_cols >= c {
        return softmax_rows(a);
    }
    let mut masked = a.clone();
    for i in 0..r {
        for j in valid_cols..c {
            masked.set(i, j, f64::NEG_INFINITY);
        }
    }
    softmax_rows(&masked)
}

pub fn zero_rows_from(a: &RealArray, valid_rows: usize) -> RealArray {
    let (r, c) = a.shape2();
    let mut out = a.clone();
    for v in &mut out.data_mut()[valid_rows.min(r) * c..] {
        *v = 0.0;
    }
    out
}

pub fn mean_pool(a: &RealArray, valid_rows: usize) -> Result<RealArray> {
    let (r, c) = a.shape2();
    if valid_rows == 0 || valid_rows > r {
        return Err(Error::Precondition(format!("cannot pool {} of {} rows", valid_rows, r)));
    }
    let mut out = vec![0.0; c];
    for i in 0..valid_rows {
        for (o, v) in out.iter_mut().zip(a.row(i)) {
            *o += v;
        }
    }
    let n = valid_rows as f64;
    Ok(RealArray::new(&[1, c], out.into_iter().map(|v| v / n).collect()))
}

//! Spiking transformer sequence classifier: input projection, residual
//! attention/MLP blocks, valid-frame mean pooling and a linear head.

use std::fs;
use std::path::Path;
use std::rc::Rc;

use crate::attention::{
    build_hdm, channel_mlp_exec, fuse_qk, repssa_exec, sdsa3_exec, AttentionVariant, AttnHandles, AttnSites, LayerCtx,
    MlpSites, QkHandles,
};
use crate::config::{parse_bool, parse_kv, parse_value, Entry};
use crate::data::{Batch, Utterance};
use crate::error::{Error, Result};
use crate::exec::{DenseExec, Exec, Profiler, SiteBank};
use crate::neuron::{NeuronConfig, ThresholdState};
use crate::numeric::{RealArray, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub variant: AttentionVariant,
    pub num_classes: usize,
    pub input_dim: usize,
    pub neuron: NeuronConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            d_model: 32,
            heads: 4,
            d_ff: 128,
            variant: AttentionVariant::HdRepSsaS,
            num_classes: 4,
            input_dim: 16,
            neuron: NeuronConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn time_window(&self) -> u32 {
        self.neuron.time_window
    }

    pub fn validate(&self) -> Result<()> {
        self.neuron.validate()?;
        if self.num_layers < 1 {
            return Err(Error::Config("num_layers must be >= 1".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.d_model == 0 || self.d_ff == 0 || self.input_dim == 0 || self.num_classes < 2 {
            return Err(Error::Config("widths must be >= 1 and num_classes >= 2".into()));
        }
        Ok(())
    }

    /// Applies one `model.*` or `neuron.*` key. Returns `false` for keys of
    /// other sections.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "model.layers" => self.num_layers = parse_value(key, value)?,
            "model.d_model" => self.d_model = parse_value(key, value)?,
            "model.heads" => self.heads = parse_value(key, value)?,
            "model.d_ff" => self.d_ff = parse_value(key, value)?,
            "model.variant" => self.variant = value.parse()?,
            "model.num_classes" => self.num_classes = parse_value(key, value)?,
            "model.input_dim" => self.input_dim = parse_value(key, value)?,
            "neuron.theta" => self.neuron.theta = parse_value(key, value)?,
            "neuron.beta" => self.neuron.beta = parse_value(key, value)?,
            "neuron.T" => self.neuron.time_window = parse_value(key, value)?,
            "neuron.alpha" => self.neuron.alpha = parse_value(key, value)?,
            "neuron.epsilon" => self.neuron.epsilon = parse_value(key, value)?,
            "neuron.adaptive" => self.neuron.adaptive = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        let n = &self.neuron;
        format!(
            "model.layers = {}\nmodel.d_model = {}\nmodel.heads = {}\nmodel.d_ff = {}\nmodel.variant = {}\n\
             model.num_classes = {}\nmodel.input_dim = {}\nneuron.theta = {:?}\nneuron.beta = {:?}\nneuron.T = {}\n\
             neuron.alpha = {:?}\nneuron.epsilon = {:?}\nneuron.adaptive = {}\n",
            self.num_layers,
            self.d_model,
            self.heads,
            self.d_ff,
            self.variant,
            self.num_classes,
            self.input_dim,
            n.theta,
            n.beta,
            n.time_window,
            n.alpha,
            n.epsilon,
            n.adaptive
        )
    }

    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let mut cfg = Self::default();
        for e in entries {
            if !cfg.apply(&e.key, &e.value)? {
                return Err(Error::Config(format!("unknown key {:?} on line {}", e.key, e.line)));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Factored query/key weights, as used in training.
    TrainMath,
    /// Fused query/key weights; requires a reparameterized model.
    SpikeDriven,
}

#[derive(Clone, Debug, PartialEq)]
struct BlockLayout {
    w_q: usize,
    w_k: usize,
    w_v: usize,
    w_out: usize,
    w1: usize,
    w2: usize,
    entry: usize,
    attn: AttnSites,
    mlp: MlpSites,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    param_names: Vec<String>,
    param_dims: Vec<Vec<usize>>,
    site_names: Vec<String>,
    site_channels: Vec<usize>,
    blocks: Vec<BlockLayout>,
    input_proj: usize,
    head_w: usize,
    head_b: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut l = Layout {
            param_names: Vec::new(),
            param_dims: Vec::new(),
            site_names: Vec::new(),
            site_channels: Vec::new(),
            blocks: Vec::new(),
            input_proj: 0,
            head_w: 0,
            head_b: 0,
        };
        let (d, f) = (cfg.d_model, cfg.d_ff);
        l.input_proj = l.param("input_proj", &[cfg.input_dim, d]);
        for i in 1..=cfg.num_layers {
            let w_q = l.param(&format!("L{}.w_q", i), &[d, d]);
            let w_k = l.param(&format!("L{}.w_k", i), &[d, d]);
            let w_v = l.param(&format!("L{}.w_v", i), &[d, d]);
            let w_out = l.param(&format!("L{}.w_out", i), &[d, d]);
            let w1 = l.param(&format!("L{}.w1", i), &[d, f]);
            let w2 = l.param(&format!("L{}.w2", i), &[f, d]);
            let entry = l.site(&format!("L{}.entry", i), d);
            // SDSA-3 fires its own query and key; RepSSA never reads these slots.
            let (q, k) = if cfg.variant == AttentionVariant::Sdsa3 {
                (l.site(&format!("L{}.q", i), d), l.site(&format!("L{}.k", i), d))
            } else {
                (usize::MAX, usize::MAX)
            };
            let v = l.site(&format!("L{}.v", i), d);
            let out = l.site(&format!("L{}.attn_out", i), d);
            let input = l.site(&format!("L{}.mlp_in", i), d);
            let hidden = l.site(&format!("L{}.mlp_hidden", i), f);
            l.blocks.push(BlockLayout {
                w_q,
                w_k,
                w_v,
                w_out,
                w1,
                w2,
                entry,
                attn: AttnSites { q, k, v, out },
                mlp: MlpSites { input, hidden },
            });
        }
        l.head_w = l.param("head.w", &[d, cfg.num_classes]);
        l.head_b = l.param("head.b", &[1, cfg.num_classes]);
        l
    }

    fn param(&mut self, name: &str, dims: &[usize]) -> usize {
        self.param_names.push(name.to_string());
        self.param_dims.push(dims.to_vec());
        self.param_names.len() - 1
    }

    fn site(&mut self, name: &str, channels: usize) -> usize {
        self.site_names.push(name.to_string());
        self.site_channels.push(channels);
        self.site_names.len() - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// Trainable tensors, f32-representable.
    pub params: Vec<RealArray>,
    /// One threshold state per spiking site.
    pub sites: Vec<ThresholdState>,
    /// Per layer, per head fused W_QK once reparameterized.
    fused: Option<Vec<Vec<RealArray>>>,
    layout: Layout,
}

/// Logits and per-product counters of an event-driven run.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeDrivenOutput {
    pub logits: RealArray,
    pub profile: Profiler,
}

impl SpikeDrivenOutput {
    /// Accumulation events summed per layer prefix (`L1`, `L2`, ...).
    pub fn events_per_layer(&self) -> Vec<(String, u64)> {
        let mut out: Vec<(String, u64)> = Vec::new();
        for (key, stats) in &self.profile.entries {
            let layer = key.split('.').next().unwrap_or(key).to_string();
            match out.iter_mut().find(|(l, _)| *l == layer) {
                Some(e) => e.1 += stats.events,
                None => out.push((layer, stats.events)),
            }
        }
        out
    }
}

impl Model {
    /// Fan-based uniform initialisation; the head bias starts at zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = Rng::new(seed);
        let params = layout
            .param_dims
            .iter()
            .enumerate()
            .map(|(i, dims)| {
                if i == layout.head_b {
                    return RealArray::zeros(dims);
                }
                let a = (6.0 / (dims[0] + dims[1]) as f64).sqrt();
                let mut w = RealArray::new(dims, (0..dims[0] * dims[1]).map(|_| rng.uniform(-a, a)).collect());
                w.round_to_storage();
                w
            })
            .collect();
        let sites = layout
            .site_channels
            .iter()
            .map(|&c| ThresholdState::new(c, config.time_window()))
            .collect();
        Ok(Self { config, params, sites, fused: None, layout })
    }

    pub fn param_names(&self) -> &[String] {
        &self.layout.param_names
    }

    pub fn site_names(&self) -> &[String] {
        &self.layout.site_names
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.layout.param_names.iter().position(|n| n == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(RealArray::len).sum()
    }

    pub fn is_fused(&self) -> bool {
        self.fused.is_some()
    }

    /// Fused W_QK blocks of a 1-based layer.
    pub fn fused_qk(&self, layer: usize) -> Option<&[RealArray]> {
        self.fused.as_ref().and_then(|f| f.get(layer.checked_sub(1)?)).map(Vec::as_slice)
    }

    /// Fuses every layer's query/key weights and freezes all threshold states.
    pub fn reparameterize(&self) -> Result<Model> {
        if self.is_fused() {
            return Err(Error::State("model is already reparameterized".into()));
        }
        let mut m = self.clone();
        m.fused = Some(m.compute_fused()?);
        for s in &mut m.sites {
            s.freeze();
        }
        Ok(m)
    }

    fn compute_fused(&self) -> Result<Vec<Vec<RealArray>>> {
        if !self.config.variant.is_reparameterizable() {
            return Ok(vec![Vec::new(); self.layout.blocks.len()]);
        }
        self.layout
            .blocks
            .iter()
            .map(|b| fuse_qk(&self.params[b.w_q], &self.params[b.w_k], self.config.heads))
            .collect()
    }

    /// Runs the network over a padded batch of `L_max × C_in` inputs.
    pub fn forward_exec<E: Exec>(
        &self,
        e: &mut E,
        inputs: &[RealArray],
        valid: &[usize],
        mode: ForwardMode,
    ) -> Result<Vec<E::V>> {
        if mode == ForwardMode::SpikeDriven && !self.is_fused() {
            return Err(Error::State("spike-driven mode needs a reparameterized model".into()));
        }
        if inputs.is_empty() || inputs.len() != valid.len() {
            return Err(Error::Dimension(format!("{} inputs, {} lengths", inputs.len(), valid.len())));
        }
        let n = inputs[0].rows();
        for (x, &v) in inputs.iter().zip(valid) {
            if x.rows() != n || x.cols() != self.config.input_dim {
                return Err(Error::Dimension(format!(
                    "input {:?}, expected {} × {}",
                    x.dims(),
                    n,
                    self.config.input_dim
                )));
            }
            if v == 0 || v > n {
                return Err(Error::Precondition(format!("valid length {} for {} frames", v, n)));
            }
        }

        let lay = &self.layout;
        let w: Vec<E::V> = self.params.iter().enumerate().map(|(i, p)| e.weight(i, p)).collect();
        let mut xs = Vec::with_capacity(inputs.len());
        for x in inputs {
            let xv = e.constant(x.clone());
            xs.push(e.matmul("input_proj", &xv, &w[lay.input_proj])?);
        }

        let variant = self.config.variant;
        for (i, b) in lay.blocks.iter().enumerate() {
            let layer = i + 1;
            let mask = if variant.uses_mask() { Some(Rc::new(build_hdm(n, layer)?.values)) } else { None };
            let ctx = LayerCtx { layer, heads: self.config.heads, mask: mask.as_ref(), valid };
            let qk = match (mode, variant) {
                (ForwardMode::SpikeDriven, v) if v.is_reparameterizable() => {
                    let blocks = self.fused_qk(layer).ok_or_else(|| Error::State("missing fused weights".into()))?;
                    QkHandles::Fused(blocks.iter().map(|m| e.constant(m.clone())).collect())
                }
                _ => QkHandles::Factored { w_q: w[b.w_q].clone(), w_k: w[b.w_k].clone() },
            };
            let handles = AttnHandles { qk, w_v: w[b.w_v].clone(), w_out: w[b.w_out].clone() };

            let xs_spk = e.fire(b.entry, &xs, valid)?;
            let attn = match variant {
                AttentionVariant::Sdsa3 => sdsa3_exec(e, &xs_spk, &handles, &b.attn, &ctx)?,
                v => repssa_exec(e, v.uses_softmax(), &xs_spk, &handles, &b.attn, &ctx)?,
            };
            let mut x1 = Vec::with_capacity(xs.len());
            for (a, x) in attn.iter().zip(&xs) {
                x1.push(e.add(a, x)?);
            }
            let mlp = channel_mlp_exec(e, &x1, &w[b.w1], &w[b.w2], &b.mlp, layer, valid)?;
            xs.clear();
            for (m, x) in mlp.iter().zip(&x1) {
                xs.push(e.add(m, x)?);
            }
        }

        let mut logits = Vec::with_capacity(xs.len());
        for (x, &v) in xs.iter().zip(valid) {
            let pooled = e.mean_pool(x, v)?;
            let z = e.matmul("head", &pooled, &w[lay.head_w])?;
            logits.push(e.add_row(&z, &w[lay.head_b])?);
        }
        Ok(logits)
    }

    /// A dense backend over a copy of the current (frozen) threshold states.
    pub fn dense_exec(&self) -> DenseExec {
        DenseExec::new(SiteBank::frozen(self.config.neuron, self.sites.clone()))
    }

    /// Logits of one utterance, length `num_classes`.
    pub fn logits(&self, features: &RealArray, mode: ForwardMode) -> Result<RealArray> {
        if features.rows() == 0 {
            return Err(Error::Precondition("empty sequence".into()));
        }
        let mut e = self.dense_exec();
        let out = self.forward_exec(&mut e, std::slice::from_ref(features), &[features.rows()], mode)?;
        (*out[0]).clone().reshape(&[self.config.num_classes])
    }

    pub fn logits_batch(&self, batch: &Batch, mode: ForwardMode) -> Result<Vec<RealArray>> {
        let mut e = self.dense_exec();
        let out = self.forward_exec(&mut e, &batch.sequences(), &batch.valid_lengths, mode)?;
        out.into_iter().map(|z| (*z).clone().reshape(&[self.config.num_classes])).collect()
    }

    pub fn predict(&self, u: &Utterance, mode: ForwardMode) -> Result<usize> {
        Ok(argmax(self.logits(&u.features, mode)?.data()))
    }

    /// Event-driven inference: every spike-fed product runs by accumulation
    /// over the expanded binary trains.
    pub fn spike_driven_forward(&self, features: &RealArray) -> Result<SpikeDrivenOutput> {
        if !self.is_fused() {
            return Err(Error::State("spike-driven inference needs a reparameterized model".into()));
        }
        if features.rows() == 0 {
            return Err(Error::Precondition("empty sequence".into()));
        }
        let mut e = self.dense_exec().event_driven().with_profiler();
        let out = self.forward_exec(&mut e, std::slice::from_ref(features), &[features.rows()], ForwardMode::SpikeDriven)?;
        let logits = (*out[0]).clone().reshape(&[self.config.num_classes])?;
        Ok(SpikeDrivenOutput { logits, profile: e.profiler.take().unwrap_or_default() })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = self.checkpoint_bytes();
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Model> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut records: Vec<Record> = Vec::new();
        records.push(Record::text(CONFIG_RECORD, &self.config.to_kv()));
        records.push(Record::new(FUSED_RECORD, vec![], vec![f64::from(u8::from(self.is_fused()))]));
        for (name, p) in self.layout.param_names.iter().zip(&self.params) {
            records.push(Record::new(name, p.dims().to_vec(), p.data().to_vec()));
        }
        for (name, s) in self.layout.site_names.iter().zip(&self.sites) {
            records.push(Record::new(
                &format!("sites.{}.running_max", name),
                vec![s.channels()],
                s.running_max.clone(),
            ));
            records.push(Record::new(&format!("sites.{}.frozen", name), vec![], vec![f64::from(u8::from(s.frozen))]));
        }
        encode_records(&records)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Model> {
        let records = decode_records(bytes)?;
        let find = |name: &str| {
            records
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::Format(format!("missing record {:?}", name)))
        };
        let cfg_text = find(CONFIG_RECORD)?.as_text()?;
        let entries = parse_kv(&cfg_text, Path::new(CONFIG_RECORD))?;
        let config = ModelConfig::from_entries(&entries)?;
        let mut model = Model::new(config, 0)?;
        let expected = 2 + model.params.len() + 2 * model.sites.len();
        if records.len() != expected {
            return Err(Error::Format(format!("{} records, expected {}", records.len(), expected)));
        }
        for i in 0..model.params.len() {
            let r = find(&model.layout.param_names[i])?;
            if r.dims != model.layout.param_dims[i] {
                return Err(Error::Format(format!(
                    "record {} has dims {:?}, expected {:?}",
                    r.name, r.dims, model.layout.param_dims[i]
                )));
            }
            model.params[i] = RealArray::new(&r.dims, r.data.clone());
        }
        let t = model.config.time_window();
        for i in 0..model.sites.len() {
            let name = &model.layout.site_names[i];
            let rm = find(&format!("sites.{}.running_max", name))?;
            if rm.dims != [model.layout.site_channels[i]] {
                return Err(Error::Format(format!("record {} has dims {:?}", rm.name, rm.dims)));
            }
            let frozen = find(&format!("sites.{}.frozen", name))?.flag()?;
            model.sites[i] = ThresholdState::from_running_max(rm.data.clone(), t, frozen);
        }
        if find(FUSED_RECORD)?.flag()? {
            model.fused = Some(model.compute_fused()?);
        }
        Ok(model)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

const MAGIC: &[u8; 4] = b"IMLS";
pub const CHECKPOINT_VERSION: u32 = 1;
const CONFIG_RECORD: &str = "__config__";
const FUSED_RECORD: &str = "__fused__";

#[derive(Clone, Debug, PartialEq)]
struct Record {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Record {
    fn new(name: &str, dims: Vec<usize>, data: Vec<f64>) -> Self {
        Self { name: name.to_string(), dims, data }
    }

    /// Text stored one byte per payload element.
    fn text(name: &str, text: &str) -> Self {
        let bytes = text.as_bytes();
        Self::new(name, vec![bytes.len()], bytes.iter().map(|&b| f64::from(b)).collect())
    }

    fn as_text(&self) -> Result<String> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::Format(format!("record {} is not text", self.name)))
                }
            })
            .collect::<Result<_>>()?;
        String::from_utf8(bytes).map_err(|e| Error::Format(format!("record {}: {}", self.name, e)))
    }

    fn flag(&self) -> Result<bool> {
        match self.data.as_slice() {
            [v] if *v == 0.0 => Ok(false),
            [v] if *v == 1.0 => Ok(true),
            _ => Err(Error::Format(format!("record {} is not a flag", self.name))),
        }
    }
}

fn encode_records(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        let name = r.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(r.dims.len() as u8);
        for &d in &r.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &r.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated: need {} bytes at offset {}, have {}", n, self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn decode_records(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4).map_err(|_| Error::Format("file too short for magic".into()))? != MAGIC {
        return Err(Error::Format("bad magic, not a checkpoint".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("version {} unsupported (expected {})", version, CHECKPOINT_VERSION)));
    }
    let count = c.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|e| Error::Format(format!("record name: {}", e)))?
            .to_string();
        let rank = c.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let payload = c.take(n.checked_mul(4).ok_or_else(|| Error::Format("record too large".into()))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect();
        records.push(Record { name, dims, data });
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rel_diff;

    fn small(variant: AttentionVariant) -> ModelConfig {
        ModelConfig { d_model: 8, heads: 2, d_ff: 16, input_dim: 4, num_classes: 3, variant, ..ModelConfig::default() }
    }

    fn input(rng: &mut Rng, l: usize, c: usize) -> RealArray {
        crate::numeric::rand_normal(rng, &[l, c])
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = ModelConfig { variant: AttentionVariant::Sdsa3, ..small(AttentionVariant::Sdsa3) };
        let e = parse_kv(&cfg.to_kv(), Path::new("t")).unwrap();
        assert_eq!(ModelConfig::from_entries(&e).unwrap(), cfg);
    }

    #[test]
    fn zero_features_give_head_bias() {
        let mut m = Model::new(small(AttentionVariant::HdRepSsaS), 1).unwrap();
        let b = m.param_index("head.b").unwrap();
        m.params[b] = RealArray::new(&[1, 3], vec![0.25, -1.0, 3.0]);
        let z = m.logits(&RealArray::zeros(&[5, 4]), ForwardMode::TrainMath).unwrap();
        assert_eq!(z.data(), &[0.25, -1.0, 3.0]);
    }

    #[test]
    fn zero_weights_make_blocks_identity() {
        let mut m = Model::new(small(AttentionVariant::HdRepSsaL), 2).unwrap();
        for (i, name) in m.layout.param_names.clone().iter().enumerate() {
            if name.starts_with('L') {
                m.params[i] = RealArray::zeros(m.params[i].dims());
            }
        }
        let mut rng = Rng::new(3);
        let x = input(&mut rng, 6, 4);
        // With identity blocks the logits are the head applied to pooled projected input.
        let proj = crate::numeric::matmul(&x, &m.params[m.layout.input_proj]).unwrap();
        let pooled = crate::exec::mean_pool(&proj, 6).unwrap();
        let expected = crate::numeric::matmul(&pooled, &m.params[m.layout.head_w]).unwrap();
        let z = m.logits(&x, ForwardMode::TrainMath).unwrap();
        assert!(rel_diff(z.data(), expected.data()) < 1e-12);
    }

    #[test]
    fn spike_driven_needs_fusion_and_fusion_is_guarded() {
        let m = Model::new(small(AttentionVariant::HdRepSsaS), 4).unwrap();
        let x = RealArray::filled(&[3, 4], 0.5);
        assert!(matches!(m.logits(&x, ForwardMode::SpikeDriven), Err(Error::State(_))));
        assert!(matches!(m.spike_driven_forward(&x), Err(Error::State(_))));
        let f = m.reparameterize().unwrap();
        assert!(f.sites.iter().all(|s| s.frozen));
        assert!(matches!(f.reparameterize(), Err(Error::State(_))));
    }

    #[test]
    fn fused_matches_factored_for_every_variant() {
        let mut rng = Rng::new(5);
        for v in AttentionVariant::ALL {
            let m = Model::new(small(v), 6).unwrap();
            let f = m.reparameterize().unwrap();
            for _ in 0..5 {
                let x = input(&mut rng, 7, 4).scale(2.0);
                let a = m.logits(&x, ForwardMode::TrainMath).unwrap();
                let b = f.logits(&x, ForwardMode::SpikeDriven).unwrap();
                assert!(rel_diff(a.data(), b.data()) < 1e-4, "{}", v);
                let s = f.spike_driven_forward(&x).unwrap();
                assert!(rel_diff(s.logits.data(), b.data()) < 1e-4, "{}", v);
            }
        }
    }

    #[test]
    fn empty_sequence_rejected() {
        let m = Model::new(small(AttentionVariant::RepSsaS), 1).unwrap();
        assert!(matches!(m.logits(&RealArray::zeros(&[0, 4]), ForwardMode::TrainMath), Err(Error::Precondition(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let m = Model::new(small(AttentionVariant::HdRepSsaS), 8).unwrap().reparameterize().unwrap();
        let bytes = m.checkpoint_bytes();
        let back = Model::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.checkpoint_bytes(), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Model::from_checkpoint_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Model::from_checkpoint_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(Model::from_checkpoint_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    }
}

//! Spiking self-attention variants, the hierarchical decay mask and the
//! spiking channel MLP.
//!
//! The `*_exec` functions are generic over [`Exec`] and are what the model
//! and the trainer call. The free functions further down are single-sequence
//! convenience wrappers that evaluate with frozen neuron states.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::exec::{DenseExec, Exec, SiteBank};
use crate::neuron::{NeuronConfig, SpikeTensor, ThresholdState};
use crate::numeric::{matmul, matmul_nt, RealArray, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionVariant {
    HdRepSsaS,
    HdRepSsaL,
    RepSsaS,
    RepSsaL,
    Sdsa3,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 5] = [
        AttentionVariant::HdRepSsaS,
        AttentionVariant::HdRepSsaL,
        AttentionVariant::RepSsaS,
        AttentionVariant::RepSsaL,
        AttentionVariant::Sdsa3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::HdRepSsaS => "hd_repssa_s",
            AttentionVariant::HdRepSsaL => "hd_repssa_l",
            AttentionVariant::RepSsaS => "repssa_s",
            AttentionVariant::RepSsaL => "repssa_l",
            AttentionVariant::Sdsa3 => "sdsa3",
        }
    }

    pub fn uses_softmax(self) -> bool {
        matches!(self, AttentionVariant::HdRepSsaS | AttentionVariant::RepSsaS)
    }

    pub fn uses_mask(self) -> bool {
        matches!(self, AttentionVariant::HdRepSsaS | AttentionVariant::HdRepSsaL)
    }

    pub fn is_reparameterizable(self) -> bool {
        self != AttentionVariant::Sdsa3
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention variant {:?}", s)))
    }
}

/// φ(l) = 1 − 2^(−5−l) for a 1-based layer index.
pub fn decay_factor(layer: usize) -> f64 {
    1.0 - 2f64.powi(-5 - layer as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecayMask {
    pub layer: usize,
    pub phi: f64,
    pub values: RealArray,
}

impl DecayMask {
    pub fn seq_len(&self) -> usize {
        self.values.rows()
    }
}

pub fn build_hdm(seq_len: usize, layer: usize) -> Result<DecayMask> {
    if layer == 0 {
        return Err(Error::Precondition("layer index is 1-based".into()));
    }
    build_hdm_with_factor(seq_len, layer, decay_factor(layer))
}

/// Same as [`build_hdm`] with an explicit decay factor.
pub fn build_hdm_with_factor(seq_len: usize, layer: usize, phi: f64) -> Result<DecayMask> {
    if seq_len == 0 {
        return Err(Error::Precondition("mask needs seq_len >= 1".into()));
    }
    if !(phi > 0.0 && phi <= 1.0) {
        return Err(Error::Config(format!("decay factor {} outside (0, 1]", phi)));
    }
    let mut values = RealArray::zeros(&[seq_len, seq_len]);
    for i in 0..seq_len {
        for j in 0..seq_len {
            values.set(i, j, phi.powi(i.abs_diff(j) as i32));
        }
    }
    Ok(DecayMask { layer, phi, values })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: RealArray,
    pub w_k: RealArray,
    pub w_v: RealArray,
    pub w_out: RealArray,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(w_q: RealArray, w_k: RealArray, w_v: RealArray, w_out: RealArray, heads: usize) -> Result<Self> {
        let d = w_q.rows();
        check_heads(d, heads)?;
        for (name, w) in [("W_Q", &w_q), ("W_K", &w_k), ("W_V", &w_v), ("W_out", &w_out)] {
            if w.dims() != [d, d] {
                return Err(Error::Dimension(format!("{} is {:?}, expected [{}, {}]", name, w.dims(), d, d)));
            }
        }
        Ok(Self { w_q, w_k, w_v, w_out, heads })
    }

    pub fn random(d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        let a = (6.0 / (2 * d) as f64).sqrt();
        let mut draw = || RealArray::new(&[d, d], (0..d * d).map(|_| rng.uniform(-a, a)).collect());
        let (q, k, v, o) = (draw(), draw(), draw(), draw());
        Self::new(q, k, v, o, heads)
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_k(&self) -> usize {
        self.d_model() / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedAttentionParams {
    /// One D×D block per head.
    pub w_qk: Vec<RealArray>,
    pub w_v: RealArray,
    pub w_out: RealArray,
    pub heads: usize,
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("width {} not divisible by {} heads", d, heads)));
    }
    Ok(())
}

/// Per-head W_QK = W_Q[:, h] · W_K[:, h]ᵀ.
pub fn fuse_qk(w_q: &RealArray, w_k: &RealArray, heads: usize) -> Result<Vec<RealArray>> {
    let d = w_q.rows();
    check_heads(d, heads)?;
    let dk = d / heads;
    (0..heads)
        .map(|h| matmul_nt(&w_q.col_slice(h * dk, dk), &w_k.col_slice(h * dk, dk)))
        .collect()
}

pub fn rep_fuse(p: &AttentionParams) -> Result<FusedAttentionParams> {
    Ok(FusedAttentionParams {
        w_qk: fuse_qk(&p.w_q, &p.w_k, p.heads)?,
        w_v: p.w_v.clone(),
        w_out: p.w_out.clone(),
        heads: p.heads,
    })
}

/// Parameter counts of the query/key path: (factored, fused).
pub fn qk_param_counts(d: usize, heads: usize) -> (usize, usize) {
    (2 * d * d, heads * d * d)
}

/// Either parameterization of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub enum AttentionWeights {
    Factored(AttentionParams),
    Fused(FusedAttentionParams),
}

impl AttentionWeights {
    fn heads(&self) -> usize {
        match self {
            AttentionWeights::Factored(p) => p.heads,
            AttentionWeights::Fused(p) => p.heads,
        }
    }

    fn w_v(&self) -> &RealArray {
        match self {
            AttentionWeights::Factored(p) => &p.w_v,
            AttentionWeights::Fused(p) => &p.w_v,
        }
    }

    fn w_out(&self) -> &RealArray {
        match self {
            AttentionWeights::Factored(p) => &p.w_out,
            AttentionWeights::Fused(p) => &p.w_out,
        }
    }
}

/// Query/key weights as handles of some backend.
#[derive(Clone, Debug)]
pub enum QkHandles<V> {
    Factored { w_q: V, w_k: V },
    Fused(Vec<V>),
}

#[derive(Clone, Debug)]
pub struct AttnHandles<V> {
    pub qk: QkHandles<V>,
    pub w_v: V,
    pub w_out: V,
}

/// Neuron site indices used by one attention layer. `q` and `k` are only
/// read by SDSA-3.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSites {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub out: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerCtx<'a> {
    /// 1-based.
    pub layer: usize,
    pub heads: usize,
    /// Decay mask sized to the padded sequence length.
    pub mask: Option<&'a Rc<RealArray>>,
    pub valid: &'a [usize],
}

impl LayerCtx<'_> {
    fn key(&self, name: &str) -> String {
        format!("L{}.{}", self.layer, name)
    }
}

/// Per-head logits for one sequence.
pub fn head_logits_exec<E: Exec>(
    e: &mut E,
    x: &E::V,
    qk: &QkHandles<E::V>,
    heads: usize,
    ctx: &LayerCtx<'_>,
) -> Result<Vec<E::V>> {
    let d = e.value(x).cols();
    let dk = d / heads;
    let mut out = Vec::with_capacity(heads);
    match qk {
        QkHandles::Factored { w_q, w_k } => {
            let q = e.spike_matmul(&ctx.key("q"), x, w_q)?;
            let k = e.spike_matmul(&ctx.key("k"), x, w_k)?;
            for h in 0..heads {
                let qh = e.col_slice(&q, h * dk, dk);
                let kh = e.col_slice(&k, h * dk, dk);
                let kt = e.transpose(&kh);
                out.push(e.matmul(&ctx.key("logits"), &qh, &kt)?);
            }
        }
        QkHandles::Fused(blocks) => {
            if blocks.len() != heads {
                return Err(Error::Dimension(format!("{} fused blocks for {} heads", blocks.len(), heads)));
            }
            let xt = e.transpose(x);
            for w in blocks {
                let p = e.spike_matmul(&ctx.key("qk"), x, w)?;
                out.push(e.matmul_spike(&ctx.key("logits"), &p, &xt)?);
            }
        }
    }
    Ok(out)
}

/// RepSSA over a batch of spike inputs, softmax or linear, with an optional mask.
pub fn repssa_exec<E: Exec>(
    e: &mut E,
    softmax: bool,
    xs: &[E::V],
    w: &AttnHandles<E::V>,
    sites: &AttnSites,
    ctx: &LayerCtx<'_>,
) -> Result<Vec<E::V>> {
    let mut xv = Vec::with_capacity(xs.len());
    for x in xs {
        xv.push(e.spike_matmul(&ctx.key("v"), x, &w.w_v)?);
    }
    let vs = e.fire(sites.v, &xv, ctx.valid)?;
    let d = e.value(&vs[0]).cols();
    let dk = d / ctx.heads;
    let inv_sqrt = 1.0 / (dk as f64).sqrt();

    let mut mixed = Vec::with_capacity(xs.len());
    for (b, x) in xs.iter().enumerate() {
        let n_valid = ctx.valid[b];
        let v = if softmax { vs[b].clone() } else { e.zero_rows_from(&vs[b], n_valid) };
        let logits = head_logits_exec(e, x, &w.qk, ctx.heads, ctx)?;
        let mut per_head = Vec::with_capacity(ctx.heads);
        for (h, a) in logits.into_iter().enumerate() {
            let a = match ctx.mask {
                Some(m) => e.mask_mul(&a, m)?,
                None => a,
            };
            let a = if softmax {
                let scaled = e.scale(&a, inv_sqrt);
                e.softmax_rows(&scaled, n_valid)?
            } else {
                a
            };
            e.observe_attention(ctx.layer, h, &a);
            let vh = e.col_slice(&v, h * dk, dk);
            per_head.push(e.matmul_spike(&ctx.key("attn_v"), &a, &vh)?);
        }
        mixed.push(e.concat_cols(&per_head));
    }

    let os = e.fire(sites.out, &mixed, ctx.valid)?;
    os.iter().map(|o| e.spike_matmul(&ctx.key("out"), o, &w.w_out)).collect()
}

/// SDSA-3: SN(Q_s (K_sᵀ V_s)) W_out per head, all operands spikes.
pub fn sdsa3_exec<E: Exec>(
    e: &mut E,
    xs: &[E::V],
    w: &AttnHandles<E::V>,
    sites: &AttnSites,
    ctx: &LayerCtx<'_>,
) -> Result<Vec<E::V>> {
    let (w_q, w_k) = match &w.qk {
        QkHandles::Factored { w_q, w_k } => (w_q, w_k),
        QkHandles::Fused(_) => return Err(Error::State("SDSA-3 has no fused form".into())),
    };
    let project = |e: &mut E, name: &str, wt: &E::V, site: usize| -> Result<Vec<E::V>> {
        let mut pre = Vec::with_capacity(xs.len());
        for x in xs {
            pre.push(e.spike_matmul(&ctx.key(name), x, wt)?);
        }
        e.fire(site, &pre, ctx.valid)
    };
    let qs = project(e, "q", w_q, sites.q)?;
    let ks = project(e, "k", w_k, sites.k)?;
    let vs = project(e, "v", &w.w_v, sites.v)?;
    let d = e.value(&qs[0]).cols();
    let dk = d / ctx.heads;

    let mut mixed = Vec::with_capacity(xs.len());
    for b in 0..xs.len() {
        let n_valid = ctx.valid[b];
        let k = e.zero_rows_from(&ks[b], n_valid);
        let v = e.zero_rows_from(&vs[b], n_valid);
        let mut per_head = Vec::with_capacity(ctx.heads);
        for h in 0..ctx.heads {
            let kh = e.col_slice(&k, h * dk, dk);
            let kt = e.transpose(&kh);
            let vh = e.col_slice(&v, h * dk, dk);
            let kv = e.spike_matmul(&ctx.key("kv"), &kt, &vh)?;
            let qh = e.col_slice(&qs[b], h * dk, dk);
            per_head.push(e.spike_matmul(&ctx.key("q_kv"), &qh, &kv)?);
        }
        mixed.push(e.concat_cols(&per_head));
    }

    let os = e.fire(sites.out, &mixed, ctx.valid)?;
    os.iter().map(|o| e.spike_matmul(&ctx.key("out"), o, &w.w_out)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpSites {
    pub input: usize,
    pub hidden: usize,
}

/// SN(SN(X)·W1)·W2 over a batch.
pub fn channel_mlp_exec<E: Exec>(
    e: &mut E,
    xs: &[E::V],
    w1: &E::V,
    w2: &E::V,
    sites: &MlpSites,
    layer: usize,
    valid: &[usize],
) -> Result<Vec<E::V>> {
    let k1 = format!("L{}.mlp1", layer);
    let k2 = format!("L{}.mlp2", layer);
    let s1 = e.fire(sites.input, xs, valid)?;
    let mut hidden = Vec::with_capacity(xs.len());
    for s in &s1 {
        hidden.push(e.spike_matmul(&k1, s, w1)?);
    }
    let s2 = e.fire(sites.hidden, &hidden, valid)?;
    s2.iter().map(|s| e.spike_matmul(&k2, s, w2)).collect()
}

/// Frozen neuron states for the standalone attention functions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnNeurons {
    pub cfg: NeuronConfig,
    pub q: ThresholdState,
    pub k: ThresholdState,
    pub v: ThresholdState,
    pub out: ThresholdState,
}

impl AttnNeurons {
    pub fn new(cfg: NeuronConfig, d: usize) -> Self {
        let s = ThresholdState::new(d, cfg.time_window);
        Self { cfg, q: s.clone(), k: s.clone(), v: s.clone(), out: s }
    }

    fn exec(&self) -> DenseExec {
        let states = vec![self.q.clone(), self.k.clone(), self.v.clone(), self.out.clone()];
        DenseExec::new(SiteBank::frozen(self.cfg, states))
    }
}

const STANDALONE_SITES: AttnSites = AttnSites { q: 0, k: 1, v: 2, out: 3 };

fn check_spike_input(x_s: &SpikeTensor, d: usize) -> Result<RealArray> {
    x_s.check()?;
    let x = x_s.to_real();
    if x.rank() != 2 || x.cols() != d {
        return Err(Error::Dimension(format!("spike input {:?} for width {}", x.dims(), d)));
    }
    Ok(x)
}

fn handles(e: &mut DenseExec, w: &AttentionWeights) -> AttnHandles<Rc<RealArray>> {
    let qk = match w {
        AttentionWeights::Factored(p) => QkHandles::Factored { w_q: e.weight(0, &p.w_q), w_k: e.weight(1, &p.w_k) },
        AttentionWeights::Fused(p) => QkHandles::Fused(p.w_qk.iter().map(|b| e.weight(0, b)).collect()),
    };
    AttnHandles { qk, w_v: e.weight(2, w.w_v()), w_out: e.weight(3, w.w_out()) }
}

/// Per-head logits, stacked as H × N × N.
pub fn attn_logits(x_s: &SpikeTensor, w: &AttentionWeights) -> Result<RealArray> {
    let d = w.w_v().rows();
    let x = check_spike_input(x_s, d)?;
    let n = x.rows();
    let heads = w.heads();
    let mut e = DenseExec::new(SiteBank::frozen(NeuronConfig::default(), Vec::new()));
    let hs = handles(&mut e, w);
    let valid = [n];
    let ctx = LayerCtx { layer: 1, heads, mask: None, valid: &valid };
    let xv = e.constant(x);
    let per_head = head_logits_exec(&mut e, &xv, &hs.qk, heads, &ctx)?;
    let mut data = Vec::with_capacity(heads * n * n);
    for a in per_head {
        data.extend_from_slice(a.data());
    }
    Ok(RealArray::new(&[heads, n, n], data))
}

fn repssa_single(
    x_s: &SpikeTensor,
    w: &AttentionWeights,
    mask: Option<&DecayMask>,
    neurons: &AttnNeurons,
    valid_len: usize,
    softmax: bool,
) -> Result<RealArray> {
    let d = w.w_v().rows();
    let x = check_spike_input(x_s, d)?;
    let n = x.rows();
    if valid_len > n {
        return Err(Error::Precondition(format!("valid length {} exceeds {} rows", valid_len, n)));
    }
    let mask = match mask {
        Some(m) if m.seq_len() != n => {
            return Err(Error::Dimension(format!("mask for length {} applied to {} rows", m.seq_len(), n)))
        }
        Some(m) => Some(Rc::new(m.values.clone())),
        None => None,
    };
    let mut e = neurons.exec();
    let hs = handles(&mut e, w);
    let valid = [valid_len];
    let ctx = LayerCtx { layer: 1, heads: w.heads(), mask: mask.as_ref(), valid: &valid };
    let xv = e.constant(x);
    let out = repssa_exec(&mut e, softmax, &[xv], &hs, &STANDALONE_SITES, &ctx)?;
    Ok((*out[0]).clone())
}

/// SN(softmax((A ⊙ H)/√d_k) · V_s) · W_out.
pub fn hd_repssa_s(
    x_s: &SpikeTensor,
    w: &AttentionWeights,
    mask: &DecayMask,
    neurons: &AttnNeurons,
    valid_len: usize,
) -> Result<RealArray> {
    repssa_single(x_s, w, Some(mask), neurons, valid_len, true)
}

/// SN((A ⊙ H) · V_s) · W_out.
pub fn hd_repssa_l(
    x_s: &SpikeTensor,
    w: &AttentionWeights,
    mask: &DecayMask,
    neurons: &AttnNeurons,
    valid_len: usize,
) -> Result<RealArray> {
    repssa_single(x_s, w, Some(mask), neurons, valid_len, false)
}

pub fn repssa_s(x_s: &SpikeTensor, w: &AttentionWeights, neurons: &AttnNeurons, valid_len: usize) -> Result<RealArray> {
    repssa_single(x_s, w, None, neurons, valid_len, true)
}

pub fn repssa_l(x_s: &SpikeTensor, w: &AttentionWeights, neurons: &AttnNeurons, valid_len: usize) -> Result<RealArray> {
    repssa_single(x_s, w, None, neurons, valid_len, false)
}

pub fn sdsa3(x_s: &SpikeTensor, p: &AttentionParams, neurons: &AttnNeurons) -> Result<RealArray> {
    let x = check_spike_input(x_s, p.d_model())?;
    let n = x.rows();
    let mut e = neurons.exec();
    let hs = handles(&mut e, &AttentionWeights::Factored(p.clone()));
    let valid = [n];
    let ctx = LayerCtx { layer: 1, heads: p.heads, mask: None, valid: &valid };
    let xv = e.constant(x);
    let out = sdsa3_exec(&mut e, &[xv], &hs, &STANDALONE_SITES, &ctx)?;
    Ok((*out[0]).clone())
}

pub fn channel_mlp(
    x: &RealArray,
    w1: &RealArray,
    w2: &RealArray,
    cfg: &NeuronConfig,
    input_state: &ThresholdState,
    hidden_state: &ThresholdState,
) -> Result<RealArray> {
    let (n, d) = x.shape2();
    if w1.rows() != d || w2.rows() != w1.cols() || w2.cols() != d {
        return Err(Error::Dimension(format!(
            "MLP weights {:?} and {:?} for width {}",
            w1.dims(),
            w2.dims(),
            d
        )));
    }
    let mut e = DenseExec::new(SiteBank::frozen(*cfg, vec![input_state.clone(), hidden_state.clone()]));
    let (a, b) = (e.weight(0, w1), e.weight(1, w2));
    let xv = e.constant(x.clone());
    let out = channel_mlp_exec(&mut e, &[xv], &a, &b, &MlpSites { input: 0, hidden: 1 }, 1, &[n])?;
    Ok((*out[0]).clone())
}

/// Reference logits X W_Q[:,h] (X W_K[:,h])ᵀ computed without the backend.
pub fn factored_logits_reference(x: &RealArray, p: &AttentionParams) -> Result<Vec<RealArray>> {
    let dk = p.d_k();
    let q = matmul(x, &p.w_q)?;
    let k = matmul(x, &p.w_k)?;
    (0..p.heads)
        .map(|h| matmul_nt(&q.col_slice(h * dk, dk), &k.col_slice(h * dk, dk)))
        .collect()
}

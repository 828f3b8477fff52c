//! Reverse-mode gradients over a recorded tape of matrix primitives.
//!
//! Spike nodes use the straight-through rule: the forward value is the
//! discrete level (or, in relaxed mode, the clipped potential without the
//! floor) and the backward pass multiplies by the per-channel slope inside the
//! firing range. Threshold statistics never receive a gradient.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::exec::{masked_softmax, mean_pool, zero_rows_from, Exec, SiteBank};
use crate::neuron::{level_floor, ChannelScale};
use crate::numeric::{matmul, matmul_nt, RealArray, Rng};

pub type Var = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MaskMul(Var, Rc<RealArray>),
    Softmax(Var),
    Spike { x: Var, scales: Rc<Vec<ChannelScale>>, time_window: u32 },
    Transpose(Var),
    ColSlice(Var, usize),
    ConcatCols(Vec<Var>),
    ZeroRowsFrom(Var, usize),
    MeanPool(Var, usize),
    /// Saved softmax probabilities and the target.
    CrossEntropy(Var, Rc<RealArray>, usize),
    MeanOf(Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Rc<RealArray>,
    op: Op,
}

/// Ordered record of primitive applications.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, accumulated per parameter id.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub params: BTreeMap<usize, RealArray>,
    nodes: Vec<Option<RealArray>>,
}

impl Gradients {
    pub fn param(&self, id: usize) -> Option<&RealArray> {
        self.params.get(&id)
    }

    pub fn node(&self, v: Var) -> Option<&RealArray> {
        self.nodes.get(v).and_then(Option::as_ref)
    }

    /// Dense gradient list aligned with `shapes`; missing entries are zero.
    pub fn dense(&self, shapes: &[RealArray]) -> Vec<RealArray> {
        shapes
            .iter()
            .enumerate()
            .map(|(i, p)| self.params.get(&i).cloned().unwrap_or_else(|| RealArray::zeros(p.dims())))
            .collect()
    }
}

fn accumulate(slot: &mut Option<RealArray>, g: RealArray) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &RealArray {
        &self.nodes[v].value
    }

    pub fn shared(&self, v: Var) -> Rc<RealArray> {
        Rc::clone(&self.nodes[v].value)
    }

    fn push(&mut self, value: RealArray, op: Op) -> Var {
        self.nodes.push(Node { value: Rc::new(value), op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, a: RealArray) -> Var {
        self.push(a, Op::Leaf)
    }

    pub fn param(&mut self, id: usize, a: &RealArray) -> Var {
        self.push(a.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(a).shape2();
        let bias = self.value(row);
        if bias.len() != c {
            return Err(Error::Dimension(format!("row of {} added to {} columns", bias.len(), c)));
        }
        let mut v = self.value(a).clone();
        for i in 0..r {
            for j in 0..c {
                v.set(i, j, v.at(i, j) + bias.data()[j]);
            }
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn mask_mul(&mut self, a: Var, mask: &Rc<RealArray>) -> Result<Var> {
        let v = self.value(a).zip_map(mask, |x, m| x * m)?;
        Ok(self.push(v, Op::MaskMul(a, Rc::clone(mask))))
    }

    pub fn softmax(&mut self, a: Var, valid_cols: usize) -> Result<Var> {
        let v = masked_softmax(self.value(a), valid_cols)?;
        Ok(self.push(v, Op::Softmax(a)))
    }

    /// Multi-level firing; `relaxed` drops the floor (used for gradient checks).
    pub fn spike(&mut self, x: Var, scales: Rc<Vec<ChannelScale>>, time_window: u32, relaxed: bool) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if scales.len() != c {
            return Err(Error::Dimension(format!("{} scales for {} channels", scales.len(), c)));
        }
        let t = time_window as f64;
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let u = scales[i % c].potential(*v);
            *v = if relaxed { u.clamp(0.0, t) } else { level_floor(u, t) };
        }
        Ok(self.push(out, Op::Spike { x, scales, time_window }))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).col_slice(start, len);
        self.push(v, Op::ColSlice(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&RealArray> = parts.iter().map(|&p| self.value(p)).collect();
        let v = RealArray::concat_cols(&refs);
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn zero_rows_from(&mut self, a: Var, valid_rows: usize) -> Var {
        let v = zero_rows_from(self.value(a), valid_rows);
        self.push(v, Op::ZeroRowsFrom(a, valid_rows))
    }

    pub fn mean_pool(&mut self, a: Var, valid_rows: usize) -> Result<Var> {
        let v = mean_pool(self.value(a), valid_rows)?;
        Ok(self.push(v, Op::MeanPool(a, valid_rows)))
    }

    /// Softmax cross-entropy of a `1 × C` logit row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        if label >= z.len() {
            return Err(Error::Precondition(format!("label {} with {} classes", label, z.len())));
        }
        let probs = crate::numeric::softmax_rows(&z.clone().reshape(&[1, z.len()])?)?;
        let max = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z.data()[label];
        Ok(self.push(RealArray::scalar(loss), Op::CrossEntropy(logits, Rc::new(probs), label)))
    }

    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Precondition("mean of no terms".into()));
        }
        let total: f64 = xs.iter().map(|&x| self.value(x).sum()).sum();
        Ok(self.push(RealArray::scalar(total / xs.len() as f64), Op::MeanOf(xs.to_vec())))
    }

    /// Region of every spike input relative to the clip range: 0 below, 1
    /// inside, 2 above. Two evaluations with equal signatures lie on the same
    /// linear piece of the relaxed forward.
    pub fn kink_signature(&self) -> Vec<u8> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::Spike { x, scales, time_window } = &node.op {
                let xv = self.value(*x);
                let c = xv.cols();
                let t = *time_window as f64;
                for (i, &v) in xv.data().iter().enumerate() {
                    let u = scales[i % c].potential(v);
                    sig.push(if u < 0.0 {
                        0
                    } else if u <= t {
                        1
                    } else {
                        2
                    });
                }
            }
        }
        sig
    }

    /// Back-propagates from a scalar node with seed gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward recording".into()));
        }
        if loss >= self.nodes.len() {
            return Err(Error::State(format!("loss node {} not on tape", loss)));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension(format!("loss must be scalar, got {:?}", self.value(loss).dims())));
        }
        let mut grads: Vec<Option<RealArray>> = vec![None; self.nodes.len()];
        grads[loss] = Some(RealArray::filled(self.value(loss).dims(), 1.0));
        let mut params = BTreeMap::new();

        for idx in (0..=loss).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let slot = params.entry(*id).or_insert_with(|| None);
                    accumulate(slot, g.clone());
                }
                Op::MatMul(a, b) => {
                    let ga = matmul_nt(&g, self.value(*b))?;
                    let gb = matmul(&self.value(*a).transpose(), &g)?;
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*b], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*b], g.clone());
                }
                Op::AddRow(a, row) => {
                    let (r, c) = g.shape2();
                    let mut gr = vec![0.0; c];
                    for i in 0..r {
                        for (s, v) in gr.iter_mut().zip(g.row(i)) {
                            *s += v;
                        }
                    }
                    let dims = self.value(*row).dims().to_vec();
                    accumulate(&mut grads[*row], RealArray::new(&dims, gr));
                    accumulate(&mut grads[*a], g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                    let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*b], gb);
                }
                Op::Scale(a, k) => accumulate(&mut grads[*a], g.scale(*k)),
                Op::MaskMul(a, m) => accumulate(&mut grads[*a], g.zip_map(m, |x, y| x * y)?),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let (r, c) = y.shape2();
                    let mut ga = RealArray::zeros(&[r, c]);
                    for i in 0..r {
                        let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga.set(i, j, y.at(i, j) * (g.at(i, j) - dot));
                        }
                    }
                    accumulate(&mut grads[*a], ga);
                }
                Op::Spike { x, scales, time_window } => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let t = *time_window as f64;
                    let mut gx = g.clone();
                    for (i, (gv, &v)) in gx.data_mut().iter_mut().zip(xv.data()).enumerate() {
                        let s = &scales[i % c];
                        let u = s.potential(v);
                        *gv *= if (0.0..=t).contains(&u) { s.slope() } else { 0.0 };
                    }
                    accumulate(&mut grads[*x], gx);
                }
                Op::Transpose(a) => accumulate(&mut grads[*a], g.transpose()),
                Op::ColSlice(a, start) => {
                    let (r, c) = self.value(*a).shape2();
                    let w = g.cols();
                    let mut ga = RealArray::zeros(&[r, c]);
                    for i in 0..r {
                        for j in 0..w {
                            ga.set(i, start + j, g.at(i, j));
                        }
                    }
                    accumulate(&mut grads[*a], ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        accumulate(&mut grads[p], g.col_slice(start, w));
                        start += w;
                    }
                }
                Op::ZeroRowsFrom(a, valid) => accumulate(&mut grads[*a], zero_rows_from(&g, *valid)),
                Op::MeanPool(a, valid) => {
                    let (r, c) = self.value(*a).shape2();
                    let mut ga = RealArray::zeros(&[r, c]);
                    let n = *valid as f64;
                    for i in 0..*valid {
                        for j in 0..c {
                            ga.set(i, j, g.data()[j] / n);
                        }
                    }
                    accumulate(&mut grads[*a], ga);
                }
                Op::CrossEntropy(z, probs, label) => {
                    let seed = g.data()[0];
                    let mut gz = probs.data().to_vec();
                    gz[*label] -= 1.0;
                    let dims = self.value(*z).dims().to_vec();
                    accumulate(&mut grads[*z], RealArray::new(&dims, gz.into_iter().map(|v| v * seed).collect()));
                }
                Op::MeanOf(xs) => {
                    let share = g.data()[0] / xs.len() as f64;
                    for &x in xs {
                        let dims = self.value(x).dims().to_vec();
                        accumulate(&mut grads[x], RealArray::filled(&dims, share));
                    }
                }
            }
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            params: params.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))).collect(),
            nodes: grads,
        })
    }
}

/// Backend that records the forward pass on a tape.
pub struct TapeExec {
    pub tape: Tape,
    pub bank: SiteBank,
    pub relaxed: bool,
    /// Pre-recorded variables to hand out for each weight id.
    pub bound: Option<Vec<Var>>,
}

impl TapeExec {
    pub fn new(bank: SiteBank) -> Self {
        Self { tape: Tape::new(), bank, relaxed: false, bound: None }
    }

    pub fn relaxed(bank: SiteBank) -> Self {
        Self { tape: Tape::new(), bank, relaxed: true, bound: None }
    }
}

impl Exec for TapeExec {
    type V = Var;

    fn constant(&mut self, a: RealArray) -> Var {
        self.tape.leaf(a)
    }

    fn weight(&mut self, id: usize, w: &RealArray) -> Var {
        match self.bound.as_ref().and_then(|b| b.get(id)) {
            Some(&v) => v,
            None => self.tape.param(id, w),
        }
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a RealArray {
        self.tape.value(*v)
    }

    fn time_window(&self) -> u32 {
        self.bank.cfg.time_window
    }

    fn matmul(&mut self, _key: &str, a: &Var, b: &Var) -> Result<Var> {
        self.tape.matmul(*a, *b)
    }

    fn spike_matmul(&mut self, _key: &str, s: &Var, w: &Var) -> Result<Var> {
        self.tape.matmul(*s, *w)
    }

    fn matmul_spike(&mut self, _key: &str, a: &Var, s: &Var) -> Result<Var> {
        self.tape.matmul(*a, *s)
    }

    fn transpose(&mut self, a: &Var) -> Var {
        self.tape.transpose(*a)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.add(*a, *b)
    }

    fn add_row(&mut self, a: &Var, row: &Var) -> Result<Var> {
        self.tape.add_row(*a, *row)
    }

    fn scale(&mut self, a: &Var, k: f64) -> Var {
        self.tape.scale(*a, k)
    }

    fn mask_mul(&mut self, a: &Var, mask: &Rc<RealArray>) -> Result<Var> {
        self.tape.mask_mul(*a, mask)
    }

    fn softmax_rows(&mut self, a: &Var, valid_cols: usize) -> Result<Var> {
        self.tape.softmax(*a, valid_cols)
    }

    fn zero_rows_from(&mut self, a: &Var, valid_rows: usize) -> Var {
        self.tape.zero_rows_from(*a, valid_rows)
    }

    fn col_slice(&mut self, a: &Var, start: usize, len: usize) -> Var {
        self.tape.col_slice(*a, start, len)
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Var {
        self.tape.concat_cols(parts)
    }

    fn mean_pool(&mut self, a: &Var, valid_rows: usize) -> Result<Var> {
        self.tape.mean_pool(*a, valid_rows)
    }

    fn fire(&mut self, site: usize, xs: &[Var], valid: &[usize]) -> Result<Vec<Var>> {
        for &x in xs {
            self.bank.check_channels(site, self.tape.value(x))?;
        }
        let refs: Vec<&RealArray> = xs.iter().map(|&x| self.tape.value(x)).collect();
        self.bank.refresh(site, &refs, valid)?;
        let scales = Rc::new(self.bank.states[site].scales(&self.bank.cfg));
        let t = self.bank.cfg.time_window;
        xs.iter().map(|&x| self.tape.spike(x, Rc::clone(&scales), t, self.relaxed)).collect()
    }
}

/// One probed parameter element.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Every probe straddled a clip kink.
    pub kinked: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    /// Fraction of probed elements within `tol`; kinked probes count as failures.
    pub fn pass_rate(&self, tol: f64) -> f64 {
        if self.entries.is_empty() {
            return 1.0;
        }
        let ok = self.entries.iter().filter(|e| !e.kinked && e.rel_error <= tol).count();
        ok as f64 / self.entries.len() as f64
    }

    pub fn kinked(&self) -> usize {
        self.entries.iter().filter(|e| e.kinked).count()
    }

    /// The `q`-quantile of the relative error (`q` in `[0, 1]`).
    pub fn quantile(&self, q: f64) -> f64 {
        let mut errs: Vec<f64> = self.entries.iter().map(|e| e.rel_error).collect();
        if errs.is_empty() {
            return 0.0;
        }
        errs.sort_by(f64::total_cmp);
        let i = ((errs.len() - 1) as f64 * q).round() as usize;
        errs[i]
    }
}

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;
const KINK_RETRIES: usize = 8;

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR)
}

/// Central-difference check of every element of `params`.
///
/// `f` records a scalar loss given the parameter variables. A probe whose
/// ±`eps` evaluations cross a clip kink is moved to a nearby random point
/// (up to 8 times) and reported as kinked if it never lands cleanly.
pub fn grad_check<F>(f: F, params: &[RealArray], eps: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |point: &[RealArray]| -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok((tape, loss))
    };
    let analytic_at = |point: &[RealArray], p: usize, i: usize| -> Result<(f64, Vec<u8>)> {
        let (tape, loss) = eval(point)?;
        let g = tape.backward(loss)?;
        Ok((g.param(p).map_or(0.0, |a| a.data()[i]), tape.kink_signature()))
    };
    let loss_at = |point: &[RealArray]| -> Result<(f64, Vec<u8>)> {
        let (tape, loss) = eval(point)?;
        Ok((tape.value(loss).data()[0], tape.kink_signature()))
    };

    let (base_tape, base_loss) = eval(params)?;
    let base_grads = base_tape.backward(base_loss)?;
    let base_sig = base_tape.kink_signature();
    let mut rng = Rng::new(seed);
    let mut report = GradCheckReport::default();

    for (p, param) in params.iter().enumerate() {
        for i in 0..param.len() {
            let mut point = params.to_vec();
            let mut analytic = base_grads.param(p).map_or(0.0, |a| a.data()[i]);
            let mut sig = base_sig.clone();
            let mut entry = None;
            for attempt in 0..=KINK_RETRIES {
                if attempt > 0 {
                    let jitter = rng.uniform(-8.0, 8.0) * eps;
                    point[p].data_mut()[i] = params[p].data()[i] + jitter;
                    (analytic, sig) = analytic_at(&point, p, i)?;
                }
                let x0 = point[p].data()[i];
                point[p].data_mut()[i] = x0 + eps;
                let (lp, sp) = loss_at(&point)?;
                point[p].data_mut()[i] = x0 - eps;
                let (lm, sm) = loss_at(&point)?;
                point[p].data_mut()[i] = x0;
                let numeric = (lp - lm) / (2.0 * eps);
                let clean = sp == sig && sm == sig;
                entry = Some(GradCheckEntry {
                    param: p,
                    index: i,
                    analytic,
                    numeric,
                    rel_error: relative_error(analytic, numeric),
                    kinked: !clean,
                });
                if clean {
                    break;
                }
            }
            report.entries.extend(entry);
        }
    }
    Ok(report)
}

/// Adam moments and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<RealArray>,
    pub v: Vec<RealArray>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &[RealArray], lr: f64) -> Self {
        let zeros = || params.iter().map(|p| RealArray::zeros(p.dims())).collect::<Vec<_>>();
        Self { m: zeros(), v: zeros(), step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub fn adam_step(params: &mut [RealArray], grads: &[RealArray], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dims() != g.dims() || p.dims() != state.m[i].dims() {
            return Err(Error::Dimension(format!(
                "param {} is {:?}, grad {:?}, moment {:?}",
                i,
                p.dims(),
                g.dims(),
                state.m[i].dims()
            )));
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = b1 * *mj + (1.0 - b1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = b2 * *vj + (1.0 - b2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((pj, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            let mhat = mj / c1;
            let vhat = vj / c2;
            *pj -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::{mls_surrogate, NeuronConfig, ThresholdState};

    fn arr(rows: &[Vec<f64>]) -> RealArray {
        RealArray::from_rows(rows)
    }

    #[test]
    fn linear_gradient_is_input() {
        let mut t = Tape::new();
        let x = t.leaf(arr(&[vec![2.0, -3.0]]));
        let w = t.param(0, &arr(&[vec![1.5], vec![0.5]]));
        let y = t.matmul(x, w).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.param(0).unwrap().data(), &[2.0, -3.0]);
    }

    #[test]
    fn backward_on_empty_tape_is_state_error() {
        assert!(matches!(Tape::new().backward(0), Err(Error::State(_))));
    }

    #[test]
    fn saturated_and_negative_spikes_have_zero_gradient() {
        let cfg = NeuronConfig::default();
        let state = ThresholdState::new(3, cfg.time_window);
        let scales = Rc::new(state.scales(&cfg));
        let theta_eff = scales[0].threshold();
        let t = cfg.time_window as f64;
        let mut tape = Tape::new();
        let x = tape.param(0, &arr(&[vec![theta_eff * t + 1.0, -0.5, 0.5 * theta_eff]]));
        let s = tape.spike(x, scales, cfg.time_window, false).unwrap();
        let ones = tape.leaf(arr(&[vec![1.0], vec![1.0], vec![1.0]]));
        let y = tape.matmul(s, ones).unwrap();
        let g = tape.backward(y).unwrap();
        let gx = g.param(0).unwrap().data();
        assert_eq!(gx[0], 0.0);
        assert_eq!(gx[1], 0.0);
        assert_eq!(gx[2], mls_surrogate(0.5 * theta_eff, theta_eff, cfg.time_window));
    }

    #[test]
    fn quadratic_matches_closed_form() {
        // ½‖xW‖² has gradient xᵀ(xW).
        let mut rng = Rng::new(3);
        let x = crate::numeric::rand_normal(&mut rng, &[3, 4]);
        let w = crate::numeric::rand_normal(&mut rng, &[4, 2]);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let wv = t.param(0, &w);
        let y = t.matmul(xv, wv).unwrap();
        let sq = t.mul(y, y).unwrap();
        let ones = t.leaf(RealArray::filled(&[2, 1], 1.0));
        let row = t.matmul(sq, ones).unwrap();
        let tr = t.transpose(row);
        let ones3 = t.leaf(RealArray::filled(&[3, 1], 1.0));
        let total = t.matmul(tr, ones3).unwrap();
        let loss = t.scale(total, 0.5);
        let g = t.backward(loss).unwrap();
        let expected = matmul(&x.transpose(), &matmul(&x, &w).unwrap()).unwrap();
        assert!(crate::numeric::rel_diff(g.param(0).unwrap().data(), expected.data()) < 1e-4);
    }

    #[test]
    fn softmax_cross_entropy_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let x = crate::numeric::rand_normal(&mut rng, &[1, 5]);
        let w = crate::numeric::rand_normal(&mut rng, &[5, 4]);
        let report = grad_check(
            |t, p| {
                let xv = t.leaf(x.clone());
                let z = t.matmul(xv, p[0])?;
                let sm = t.softmax(z, 4)?;
                let scaled = t.scale(sm, 3.0);
                t.cross_entropy(scaled, 2)
            },
            &[w],
            1e-3,
            0,
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-3, "max error {}", report.max_rel_error());
    }

    #[test]
    fn masked_softmax_gives_masked_columns_no_gradient() {
        let mut t = Tape::new();
        let a = t.param(0, &arr(&[vec![0.3, -0.2, 0.9]]));
        let s = t.softmax(a, 2).unwrap();
        assert_eq!(t.value(s).data()[2], 0.0);
        let w = t.leaf(arr(&[vec![1.0], vec![2.0], vec![3.0]]));
        let y = t.matmul(s, w).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.param(0).unwrap().data()[2], 0.0);
    }

    #[test]
    fn relaxed_imls_layer_matches_finite_differences() {
        let cfg = NeuronConfig::default();
        let mut rng = Rng::new(5);
        let x = crate::numeric::rand_uniform(&mut rng, &[4, 6]);
        let w = crate::numeric::rand_normal(&mut rng, &[6, 3]);
        let w2 = crate::numeric::rand_normal(&mut rng, &[3, 2]);
        let state = ThresholdState::from_running_max(vec![1.5, 0.8, 2.0], cfg.time_window, false);
        let scales = Rc::new(state.scales(&cfg));
        let report = grad_check(
            |t, p| {
                let xv = t.leaf(x.clone());
                let h = t.matmul(xv, p[0])?;
                let s = t.spike(h, Rc::clone(&scales), cfg.time_window, true)?;
                let z = t.matmul(s, p[1])?;
                let pooled = t.mean_pool(z, 4)?;
                t.cross_entropy(pooled, 1)
            },
            &[w, w2],
            1e-3,
            0,
        )
        .unwrap();
        let clean: Vec<_> = report.entries.iter().filter(|e| !e.kinked).collect();
        assert!(!clean.is_empty());
        for e in clean {
            assert!(e.rel_error < 1e-3, "{:?}", e);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = vec![arr(&[vec![1.0, -2.0]])];
        let mut st = OptimizerState::new(&p, 1e-3);
        let before = p.clone();
        adam_step(&mut p, &[RealArray::zeros(&[1, 2])], &mut st).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr() {
        let mut p = vec![RealArray::scalar(0.0)];
        let mut st = OptimizerState::new(&p, 1e-3);
        let g = [RealArray::scalar(0.37)];
        let mut prev = 0.0;
        for _ in 0..2000 {
            adam_step(&mut p, &g, &mut st).unwrap();
            let now = p[0].data()[0];
            let step = prev - now;
            prev = now;
            assert!((step - 1e-3).abs() < 1e-6, "step {}", step);
        }
    }

    #[test]
    fn adam_shape_mismatch_rejected() {
        let mut p = vec![RealArray::zeros(&[2, 2])];
        let mut st = OptimizerState::new(&p, 1e-3);
        assert!(matches!(adam_step(&mut p, &[RealArray::zeros(&[2, 1])], &mut st), Err(Error::Dimension(_))));
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut rng = Rng::new(9);
            let mut p = vec![crate::numeric::rand_normal(&mut rng, &[3, 3])];
            let mut st = OptimizerState::new(&p, 1e-2);
            for _ in 0..20 {
                let g = vec![crate::numeric::rand_normal(&mut rng, &[3, 3])];
                adam_step(&mut p, &g, &mut st).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}

//! Command-line workflows over the spikeformer library.
//!
//! Every command writes its resolved settings first, then its results, to the
//! given writer. Exit codes: 0 success, 1 failed check or runtime error,
//! 2 usage error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use spikeformer::attention::{build_hdm, AttentionVariant};
use spikeformer::checks::{mls_if_sweep, reparam_check, spike_expansion_check};
use spikeformer::config::RunConfig;
use spikeformer::data::{load_features_csv, load_manifest, synthetic_split, write_manifest, Utterance};
use spikeformer::energy::{cross_check_event_energy, energy_report, record_firing_rates};
use spikeformer::exec::Profiler;
use spikeformer::model::{argmax, ForwardMode, Model};
use spikeformer::neuron::mls_level;
use spikeformer::numeric::rel_diff;
use spikeformer::train::{train_with, write_metrics_csv};
use spikeformer::Error;

/// Tolerance of the dense against spike-driven logits comparison.
const MODE_TOL: f64 = 1e-4;
/// Tolerance of the event-count against rate-based energy comparison.
const ENERGY_TOL: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "spikeformer", version, about = "Spiking Transformer kernels: checks, training, inference and energy reports")]
pub struct Cli {
    /// Worker threads. Execution is single-threaded; only 1 is accepted.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Multi-level against iterative firing, and spike expansion against dense products.
    Equiv,
    /// Factored against fused query/key weights.
    ReparamCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Trains a model from a config file.
    Train(TrainArgs),
    /// Classifies the utterances of a manifest.
    Infer(InferArgs),
    /// Energy report of spike-driven inference over a manifest.
    Energy {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Writes the per-product report here instead of stdout.
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
    /// Values of the decay mask of one layer.
    Mask {
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        len: usize,
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
    /// Per-head attention maps of one layer for one utterance.
    AttnDump {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Feature CSV of the utterance.
        #[arg(long)]
        utterance: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out_csv: PathBuf,
    },
    /// Writes the synthetic task as feature files and manifests.
    GenData {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        train_per_class: usize,
        #[arg(long, default_value_t = 50)]
        test_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub metrics_csv: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<AttentionVariant>,
    /// Time window.
    #[arg(long = "T")]
    pub time_window: Option<u32>,
    /// Sets both the training and the data seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Event-driven inference with fused weights.
    #[arg(long)]
    pub spike_driven: bool,
    #[arg(long)]
    pub energy_csv: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<AttentionVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("writing output: {0}")]
    Output(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(Error::Config(_) | Error::Parse { .. } | Error::Io { .. } | Error::Precondition(_)) => 2,
            _ => 1,
        }
    }
}

type CliResult = Result<(), CliError>;

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with(args: impl IntoIterator<Item = impl Into<OsString> + Clone>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{}", text) } else { write!(err, "{}", text) };
            return code;
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e);
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> CliResult {
    if cli.threads != 1 {
        return Err(CliError::Usage(format!("--threads {}: only single-threaded execution is supported", cli.threads)));
    }
    match &cli.command {
        Command::Equiv => {
            print_resolved(out, &[("command", "equiv".into()), ("threads", "1".into())])?;
            cmd_equiv(mls_level, out)
        }
        Command::ReparamCheck { seed, trials } => {
            print_resolved(
                out,
                &[("command", "reparam-check".into()), ("seed", seed.to_string()), ("trials", trials.to_string())],
            )?;
            cmd_reparam_check(*seed, *trials, out)
        }
        Command::Train(a) => cmd_train(a, out),
        Command::Infer(a) => cmd_infer(a, out),
        Command::Energy { checkpoint, manifest, out_csv } => cmd_energy(checkpoint, manifest, out_csv.as_deref(), out),
        Command::Mask { layer, len, out_csv } => cmd_mask(*layer, *len, out_csv.as_deref(), out),
        Command::AttnDump { checkpoint, utterance, layer, out_csv } => cmd_attn_dump(checkpoint, utterance, *layer, out_csv, out),
        Command::GenData { out_dir, train_per_class, test_per_class, seed } => {
            cmd_gen_data(out_dir, *train_per_class, *test_per_class, *seed, out)
        }
    }
}

fn print_resolved(out: &mut dyn Write, pairs: &[(&str, String)]) -> std::io::Result<()> {
    writeln!(out, "# resolved config")?;
    for (k, v) in pairs {
        writeln!(out, "{} = {}", k, v)?;
    }
    writeln!(out)
}

fn print_block(out: &mut dyn Write, text: &str) -> std::io::Result<()> {
    writeln!(out, "# resolved config")?;
    write!(out, "{}", text)?;
    writeln!(out)
}

/// Firing sweep with `fire` standing in for multi-level firing, then the
/// spike-expansion product check.
pub fn cmd_equiv(fire: impl Fn(f64, f64, u32) -> u32, out: &mut dyn Write) -> CliResult {
    let sweep = mls_if_sweep(fire);
    writeln!(out, "mls_vs_if cases={} mismatches={}", sweep.cases, sweep.mismatches.len())?;
    for m in sweep.mismatches.iter().take(20) {
        writeln!(
            out,
            "  mismatch v={} theta={} T={}: level {} vs {} IF spikes",
            m.v, m.theta, m.time_window, m.level, m.if_count
        )?;
    }
    let exp = spike_expansion_check(200, 0)?;
    writeln!(
        out,
        "spike_expansion instances={} max_rel={:.3e} count_mismatches={} identity_failures={}",
        exp.instances, exp.max_rel, exp.count_mismatches, exp.identity_failures
    )?;
    if !sweep.mismatches.is_empty() {
        let m = sweep.mismatches[0];
        return Err(CliError::CheckFailed(format!(
            "{} firing mismatches, first at (v={}, theta={}, T={})",
            sweep.mismatches.len(),
            m.v,
            m.theta,
            m.time_window
        )));
    }
    if !exp.passed(1e-5) {
        return Err(CliError::CheckFailed("spike expansion disagrees with the dense product".into()));
    }
    writeln!(out, "PASS")?;
    Ok(())
}

pub fn cmd_reparam_check(seed: u64, trials: usize, out: &mut dyn Write) -> CliResult {
    let r = reparam_check(trials, seed)?;
    writeln!(
        out,
        "trials={} logits_max_rel={:.3e} block_max_rel={:.3e} model_pairs={} model_max_rel={:.3e} guard={}",
        r.trials, r.max_logit_rel, r.max_block_rel, r.model_pairs, r.max_model_rel, r.guard_triggered
    )?;
    if !r.passed() {
        return Err(CliError::CheckFailed("factored and fused execution disagree".into()));
    }
    writeln!(out, "PASS")?;
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = a.variant {
        cfg.model.variant = v;
    }
    if let Some(t) = a.time_window {
        cfg.model.neuron.time_window = t;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.data.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult {
    let cfg = resolve_train_config(a)?;
    let mut resolved = cfg.to_kv();
    let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
    let _ = write!(resolved, "out_checkpoint = {}\nmetrics_csv = {}\nthreads = 1\n", path(&a.out_checkpoint), path(&a.metrics_csv));
    print_block(out, &resolved)?;

    let (train_set, test_set) = cfg.load_data()?;
    writeln!(out, "train utterances={} test utterances={}", train_set.len(), test_set.len())?;
    let model = Model::new(cfg.model, cfg.train.seed)?;
    writeln!(out, "parameters={}", model.num_parameters())?;
    let mut write_err = None;
    let (trained, history) = train_with(&model, &train_set, &test_set, &cfg.train, |m| {
        let rates: Vec<String> = m.site_rates.iter().map(|r| format!("{:.3}", r)).collect();
        if let Err(e) = writeln!(
            out,
            "epoch {:3} loss {:.4} train_acc {:.4} test_acc {:.4} rates [{}]",
            m.epoch,
            m.loss,
            m.train_acc,
            m.test_acc,
            rates.join(" ")
        ) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    if let Some(p) = &a.metrics_csv {
        write_metrics_csv(p, &history, trained.site_names())?;
    }
    if let Some(p) = &a.out_checkpoint {
        trained.save_checkpoint(p)?;
    }
    if let Some(last) = history.last() {
        writeln!(out, "final test_acc {:.4}", last.test_acc)?;
    }
    Ok(())
}

fn load_nonempty_manifest(path: &Path, model: &Model) -> Result<Vec<Utterance>, CliError> {
    let utts = load_manifest(path, model.config.num_classes)?;
    if utts.is_empty() {
        return Err(CliError::Usage(format!("manifest {} lists no utterances", path.display())));
    }
    if let Some(u) = utts.iter().find(|u| u.features.cols() != model.config.input_dim) {
        return Err(CliError::Usage(format!(
            "{} has {} feature columns, the model expects {}",
            u.id,
            u.features.cols(),
            model.config.input_dim
        )));
    }
    Ok(utts)
}

/// The checkpoint fused for spike-driven inference, fusing it if needed.
fn fused_model(model: &Model, out: &mut dyn Write) -> Result<Model, CliError> {
    if model.is_fused() {
        return Ok(model.clone());
    }
    if !model.config.variant.is_reparameterizable() {
        return Err(CliError::Usage(format!("variant {} has no fused form", model.config.variant)));
    }
    writeln!(out, "note: checkpoint is not reparameterized; fusing query/key weights for spike-driven inference")?;
    Ok(model.reparameterize()?)
}

fn checkpoint_block(model: &Model, extra: &[(&str, String)]) -> String {
    let mut s = model.config.to_kv();
    let _ = writeln!(s, "fused = {}", model.is_fused());
    for (k, v) in extra {
        let _ = writeln!(s, "{} = {}", k, v);
    }
    s
}

pub fn cmd_infer(a: &InferArgs, out: &mut dyn Write) -> CliResult {
    let model = Model::load_checkpoint(&a.checkpoint)?;
    let extra = [
        ("checkpoint", a.checkpoint.display().to_string()),
        ("manifest", a.manifest.display().to_string()),
        ("spike_driven", a.spike_driven.to_string()),
        ("energy_csv", a.energy_csv.as_ref().map_or("none".into(), |p| p.display().to_string())),
        ("threads", "1".into()),
    ];
    print_block(out, &checkpoint_block(&model, &extra))?;
    let utts = load_nonempty_manifest(&a.manifest, &model)?;
    let fused = if a.spike_driven { Some(fused_model(&model, out)?) } else { None };

    let mut profile = Profiler::default();
    let mut correct = 0;
    let mut max_rel: f64 = 0.0;
    writeln!(out, "id,label,prediction")?;
    for u in &utts {
        let dense = model.logits(&u.features, ForwardMode::TrainMath)?;
        let logits = match &fused {
            Some(f) => {
                let run = f.spike_driven_forward(&u.features)?;
                max_rel = max_rel.max(rel_diff(run.logits.data(), dense.data()));
                profile.merge(&run.profile);
                run.logits
            }
            None => {
                if a.energy_csv.is_some() {
                    let mut e = model.dense_exec().with_profiler();
                    let n = u.features.rows();
                    model.forward_exec(&mut e, std::slice::from_ref(&u.features), &[n], ForwardMode::TrainMath)?;
                    profile.merge(&e.profiler.unwrap_or_default());
                }
                dense
            }
        };
        let p = argmax(logits.data());
        correct += usize::from(p == u.label);
        writeln!(out, "{},{},{}", u.id, u.label, p)?;
    }
    writeln!(out, "accuracy {:.4} ({}/{})", correct as f64 / utts.len() as f64, correct, utts.len())?;
    if let Some(p) = &a.energy_csv {
        let report = energy_report(&record_firing_rates(&profile, model.config.neuron.time_window))?;
        fs::write(p, report.to_csv()).map_err(|e| Error::Io { path: p.clone(), source: e })?;
        writeln!(out, "{}", report.summary())?;
    }
    if fused.is_some() {
        writeln!(out, "spike-driven vs dense logits max_rel={:.3e}", max_rel)?;
        if max_rel > MODE_TOL {
            return Err(CliError::CheckFailed(format!("spike-driven logits differ from dense by {:.3e}", max_rel)));
        }
    }
    Ok(())
}

pub fn cmd_energy(checkpoint: &Path, manifest: &Path, out_csv: Option<&Path>, out: &mut dyn Write) -> CliResult {
    let model = Model::load_checkpoint(checkpoint)?;
    let extra = [
        ("checkpoint", checkpoint.display().to_string()),
        ("manifest", manifest.display().to_string()),
        ("out_csv", out_csv.map_or("none".into(), |p| p.display().to_string())),
        ("threads", "1".into()),
    ];
    print_block(out, &checkpoint_block(&model, &extra))?;
    let utts = load_nonempty_manifest(manifest, &model)?;
    let fused = fused_model(&model, out)?;
    let mut profile = Profiler::default();
    for u in &utts {
        profile.merge(&fused.spike_driven_forward(&u.features)?.profile);
    }
    let t = model.config.neuron.time_window;
    let report = energy_report(&record_firing_rates(&profile, t))?;
    match out_csv {
        Some(p) => fs::write(p, report.to_csv()).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?,
        None => write!(out, "{}", report.to_csv())?,
    }
    writeln!(out, "{}", report.summary())?;
    let check = cross_check_event_energy(&profile, t)?;
    writeln!(
        out,
        "cross_check event_nJ={:.3} rate_nJ={:.3} rel_diff={:.3e}",
        check.event_nj,
        check.rate_nj,
        check.rel_diff()
    )?;
    if check.rel_diff() > ENERGY_TOL {
        return Err(CliError::CheckFailed("event-count and rate-based energies disagree".into()));
    }
    Ok(())
}

pub fn cmd_mask(layer: usize, len: usize, out_csv: Option<&Path>, out: &mut dyn Write) -> CliResult {
    print_resolved(
        out,
        &[
            ("command", "mask".into()),
            ("layer", layer.to_string()),
            ("len", len.to_string()),
            ("out_csv", out_csv.map_or("none".into(), |p| p.display().to_string())),
        ],
    )?;
    if layer == 0 || len == 0 {
        return Err(CliError::Usage("--layer and --len must be >= 1".into()));
    }
    let mask = build_hdm(len, layer)?;
    let mut csv = String::new();
    for i in 0..len {
        let row: Vec<String> = mask.values.row(i).iter().map(|v| format!("{}", v)).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    match out_csv {
        Some(p) => fs::write(p, &csv).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?,
        None => write!(out, "{}", csv)?,
    }
    writeln!(out, "phi = {}", mask.phi)?;
    Ok(())
}

/// Attention weight times query-key distance, averaged over valid queries.
fn mean_attention_distance(map: &spikeformer::numeric::RealArray) -> f64 {
    let (r, c) = map.shape2();
    let mut total = 0.0;
    for i in 0..r {
        let row_mass: f64 = map.row(i).iter().map(|w| w.abs()).sum();
        if row_mass > 0.0 {
            total += (0..c).map(|j| map.at(i, j).abs() * i.abs_diff(j) as f64).sum::<f64>() / row_mass;
        }
    }
    total / r.max(1) as f64
}

pub fn cmd_attn_dump(checkpoint: &Path, utterance: &Path, layer: usize, out_csv: &Path, out: &mut dyn Write) -> CliResult {
    let model = Model::load_checkpoint(checkpoint)?;
    let extra = [
        ("checkpoint", checkpoint.display().to_string()),
        ("utterance", utterance.display().to_string()),
        ("layer", layer.to_string()),
        ("out_csv", out_csv.display().to_string()),
    ];
    print_block(out, &checkpoint_block(&model, &extra))?;
    if model.config.variant == AttentionVariant::Sdsa3 {
        return Err(CliError::Usage("sdsa3 forms no attention map".into()));
    }
    if layer == 0 || layer > model.config.num_layers {
        return Err(CliError::Usage(format!("--layer {} outside 1..={}", layer, model.config.num_layers)));
    }
    let features = load_features_csv(utterance)?;
    if features.cols() != model.config.input_dim {
        return Err(CliError::Usage(format!(
            "utterance has {} columns, the model expects {}",
            features.cols(),
            model.config.input_dim
        )));
    }
    let n = features.rows();
    let mut e = model.dense_exec().capture_attention();
    model.forward_exec(&mut e, &[features], &[n], ForwardMode::TrainMath)?;
    let maps: Vec<_> = e.attention_maps.unwrap_or_default().into_iter().filter(|(l, _, _)| *l == layer).collect();
    let mut csv = String::from("head,query,key,weight\n");
    for (_, head, map) in &maps {
        for i in 0..map.rows() {
            for j in 0..map.cols() {
                let _ = writeln!(csv, "{},{},{},{:e}", head, i, j, map.at(i, j));
            }
        }
    }
    fs::write(out_csv, csv).map_err(|e| Error::Io { path: out_csv.to_path_buf(), source: e })?;
    for (_, head, map) in &maps {
        writeln!(out, "layer {} head {} mean_distance {:.4}", layer, head, mean_attention_distance(map))?;
    }
    Ok(())
}

pub fn cmd_gen_data(out_dir: &Path, train_per_class: usize, test_per_class: usize, seed: u64, out: &mut dyn Write) -> CliResult {
    print_resolved(
        out,
        &[
            ("command", "gen-data".into()),
            ("out_dir", out_dir.display().to_string()),
            ("train_per_class", train_per_class.to_string()),
            ("test_per_class", test_per_class.to_string()),
            ("seed", seed.to_string()),
        ],
    )?;
    let (train_set, test_set) = synthetic_split(train_per_class, test_per_class, seed)?;
    let a = write_manifest(&out_dir.join("train"), &train_set)?;
    let b = write_manifest(&out_dir.join("test"), &test_set)?;
    writeln!(out, "wrote {} ({} utterances)", a.display(), train_set.len())?;
    writeln!(out, "wrote {} ({} utterances)", b.display(), test_set.len())?;
    Ok(())
}

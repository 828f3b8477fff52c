use std::collections::BTreeMap;

use spikeformer::attention::AttentionVariant;
use spikeformer::autodiff::TapeExec;
use spikeformer::data::{make_batches, synthetic_split, Utterance};
use spikeformer::energy::{count_flops, cross_check_event_energy, energy_report, record_firing_rates};
use spikeformer::exec::{OperandKind, SiteBank};
use spikeformer::model::{ForwardMode, Model, ModelConfig};
use spikeformer::numeric::{rand_normal, rel_diff, RealArray, Rng};
use spikeformer::train::{train, TrainConfig};

fn small_config(variant: AttentionVariant) -> ModelConfig {
    ModelConfig { d_model: 16, heads: 2, d_ff: 32, variant, ..ModelConfig::default() }
}

/// A model whose threshold statistics have seen one short epoch of data.
fn warmed(variant: AttentionVariant, seed: u64) -> (Model, Vec<Utterance>) {
    let (tr, te) = synthetic_split(6, 3, seed).unwrap();
    let model = Model::new(small_config(variant), seed).unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 8, seed, ..TrainConfig::default() };
    let (model, _) = train(&model, &tr, &[], &cfg).unwrap();
    (model, te)
}

#[test]
fn padding_never_changes_logits() {
    for variant in AttentionVariant::ALL {
        let (model, test) = warmed(variant, 3);
        let fused = if variant.is_reparameterizable() { Some(model.reparameterize().unwrap()) } else { None };
        for batch in make_batches(&test, 5, None).unwrap() {
            assert!(batch.valid_lengths.iter().any(|&v| v < batch.max_len()));
            let padded = model.logits_batch(&batch, ForwardMode::TrainMath).unwrap();
            for (i, z) in padded.iter().enumerate() {
                let alone = model.logits(&test[i + batch_offset(&test, &batch)].features, ForwardMode::TrainMath).unwrap();
                assert!(rel_diff(z.data(), alone.data()) < 1e-5, "{}", variant);
            }
            if let Some(f) = &fused {
                let padded = f.logits_batch(&batch, ForwardMode::SpikeDriven).unwrap();
                for (i, z) in padded.iter().enumerate() {
                    let alone = f.logits(&test[i + batch_offset(&test, &batch)].features, ForwardMode::SpikeDriven).unwrap();
                    assert!(rel_diff(z.data(), alone.data()) < 1e-5, "{} fused", variant);
                }
            }
        }
    }
}

fn batch_offset(all: &[Utterance], batch: &spikeformer::data::Batch) -> usize {
    all.iter().position(|u| u.id == batch.ids[0]).unwrap()
}

#[test]
fn spike_driven_inference_matches_dense_training_math() {
    for variant in [AttentionVariant::HdRepSsaS, AttentionVariant::RepSsaL] {
        let (model, _) = warmed(variant, 9);
        let fused = model.reparameterize().unwrap();
        let mut rng = Rng::new(50);
        for _ in 0..50 {
            let n = rng.range_inclusive(1, 20);
            let x = rand_normal(&mut rng, &[n, model.config.input_dim]);
            let dense = model.logits(&x, ForwardMode::TrainMath).unwrap();
            let out = fused.spike_driven_forward(&x).unwrap();
            assert!(rel_diff(out.logits.data(), dense.data()) < 1e-4, "{}", variant);
        }
    }
}

#[test]
fn event_counts_match_rate_accounting_and_flop_model() {
    for variant in [AttentionVariant::HdRepSsaS, AttentionVariant::HdRepSsaL] {
        let (model, test) = warmed(variant, 4);
        let fused = model.reparameterize().unwrap();
        let t = model.config.neuron.time_window;
        for u in test.iter().take(4) {
            let out = fused.spike_driven_forward(&u.features).unwrap();
            for (key, s) in &out.profile.entries {
                if s.kind == OperandKind::SpikeFed {
                    let fan_out = s.flops / s.spike_numel;
                    assert_eq!(s.events, s.spike_sum * fan_out, "{}", key);
                } else {
                    assert_eq!(s.events, 0, "{}", key);
                }
            }
            let check = cross_check_event_energy(&out.profile, t).unwrap();
            assert!(check.rel_diff() < 1e-6, "{:?}", check);
            let report = energy_report(&record_firing_rates(&out.profile, t)).unwrap();
            assert!((report.spike_fed_nj() - check.event_nj).abs() <= 1e-6 * check.event_nj.max(1.0));

            let counted: BTreeMap<_, _> = out.profile.entries.iter().map(|(k, s)| (k.clone(), (s.flops, s.kind))).collect();
            let modelled: BTreeMap<_, _> =
                count_flops(&model.config, true, u.len()).into_iter().map(|p| (p.name, (p.flops, p.kind))).collect();
            assert_eq!(counted, modelled);
        }
    }
}

#[test]
fn merged_profiles_of_mixed_lengths_keep_routes_equal() {
    let (model, test) = warmed(AttentionVariant::HdRepSsaS, 5);
    let fused = model.reparameterize().unwrap();
    let mut merged = spikeformer::exec::Profiler::default();
    for u in &test {
        merged.merge(&fused.spike_driven_forward(&u.features).unwrap().profile);
    }
    assert!(test.iter().any(|u| u.len() != test[0].len()));
    let check = cross_check_event_energy(&merged, model.config.neuron.time_window).unwrap();
    assert!(check.rel_diff() < 1e-9, "{:?}", check);
}

#[test]
fn factored_flop_model_matches_dense_profile() {
    for variant in AttentionVariant::ALL {
        let model = Model::new(small_config(variant), 1).unwrap();
        let x = rand_normal(&mut Rng::new(2), &[7, model.config.input_dim]);
        let mut e = model.dense_exec().with_profiler();
        model.forward_exec(&mut e, &[x], &[7], ForwardMode::TrainMath).unwrap();
        let counted: BTreeMap<_, _> =
            e.profiler.unwrap().entries.into_iter().map(|(k, s)| (k, (s.flops, s.kind))).collect();
        let modelled: BTreeMap<_, _> =
            count_flops(&model.config, false, 7).into_iter().map(|p| (p.name, (p.flops, p.kind))).collect();
        assert_eq!(counted, modelled, "{}", variant);
    }
}

#[test]
fn silent_input_costs_no_events() {
    let (model, _) = warmed(AttentionVariant::HdRepSsaS, 2);
    let fused = model.reparameterize().unwrap();
    let out = fused.spike_driven_forward(&RealArray::zeros(&[10, model.config.input_dim])).unwrap();
    let check = cross_check_event_energy(&out.profile, model.config.neuron.time_window).unwrap();
    assert_eq!((check.event_nj, check.rate_nj), (0.0, 0.0));
}

fn with_window(t: u32) -> Model {
    let mut cfg = small_config(AttentionVariant::HdRepSsaS);
    cfg.neuron.time_window = t;
    Model::new(cfg, 11).unwrap()
}

#[test]
fn tape_size_does_not_depend_on_time_window() {
    let (tr, _) = synthetic_split(2, 1, 5).unwrap();
    let batch = make_batches(&tr, 8, None).unwrap().remove(0);
    let sizes: Vec<usize> = [4, 6]
        .into_iter()
        .map(|t| {
            let m = with_window(t);
            let bank = SiteBank { cfg: m.config.neuron, states: m.sites.clone(), update: true };
            let mut ex = TapeExec::new(bank);
            m.forward_exec(&mut ex, &batch.sequences(), &batch.valid_lengths, ForwardMode::TrainMath).unwrap();
            ex.tape.len()
        })
        .collect();
    assert_eq!(sizes[0], sizes[1]);
}

#[test]
fn multistep_oracle_state_grows_linearly_in_time_window() {
    let x = rand_normal(&mut Rng::new(3), &[12, 16]);
    let mut counts = Vec::new();
    for t in [4, 6] {
        let m = with_window(t);
        let mut oracle = m.dense_exec().multistep_oracle();
        let a = m.forward_exec(&mut oracle, std::slice::from_ref(&x), &[12], ForwardMode::TrainMath).unwrap();
        let b = m.logits(&x, ForwardMode::TrainMath).unwrap();
        assert!(rel_diff(a[0].data(), b.data()) < 1e-12);
        counts.push(oracle.oracle_states);
    }
    assert_eq!(counts[1] * 4, counts[0] * 6);
}

#[test]
fn checkpoint_file_round_trip_is_exact() {
    let (model, test) = warmed(AttentionVariant::HdRepSsaS, 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    for m in [model.clone(), model.reparameterize().unwrap()] {
        m.save_checkpoint(&path).unwrap();
        let back = Model::load_checkpoint(&path).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.sites, m.sites);
        assert_eq!(back.is_fused(), m.is_fused());
        let mode = if m.is_fused() { ForwardMode::SpikeDriven } else { ForwardMode::TrainMath };
        assert_eq!(back.logits(&test[0].features, mode).unwrap(), m.logits(&test[0].features, mode).unwrap());
    }
    assert!(Model::load_checkpoint(&dir.path().join("missing")).is_err());
}

#[test]
fn training_is_deterministic_per_seed_and_frozen_zero_lr_is_a_no_op() {
    let (tr, te) = synthetic_split(4, 2, 8).unwrap();
    let model = Model::new(small_config(AttentionVariant::HdRepSsaS), 8).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 4, seed: 8, ..TrainConfig::default() };
    let (a, ha) = train(&model, &tr, &te, &cfg).unwrap();
    let (b, hb) = train(&model, &tr, &te, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(ha, hb);

    let frozen = TrainConfig { lr: 0.0, freeze_thresholds: true, ..cfg };
    let (c, hc) = train(&model, &tr, &te, &frozen).unwrap();
    assert_eq!(c.params, model.params);
    assert_eq!(c.sites, model.sites);
    assert!(hc.windows(2).all(|w| w[0].test_acc == w[1].test_acc));
}

#[test]
fn divergent_learning_rate_is_reported() {
    let (tr, _) = synthetic_split(2, 1, 1).unwrap();
    let model = Model::new(small_config(AttentionVariant::HdRepSsaS), 1).unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 4, lr: f64::INFINITY, ..TrainConfig::default() };
    let r = train(&model, &tr, &[], &cfg);
    assert!(matches!(r, Err(spikeformer::Error::Divergence(_))), "{:?}", r.map(|(m, _)| m.params[0].data()[..4].to_vec()));
}

#[test]
fn fusion_replaces_two_d_by_dk_factors_with_one_d_by_d_block_per_head() {
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let (d, h) = (model.config.d_model, model.config.heads);
    let dk = d / h;
    let fused = model.reparameterize().unwrap();
    for layer in 1..=model.config.num_layers {
        let blocks = fused.fused_qk(layer).unwrap();
        assert_eq!(blocks.len(), h);
        assert!(blocks.iter().all(|b| b.dims() == [d, d]));
        let factored: usize = ["q", "k"]
            .iter()
            .map(|w| model.params[model.param_index(&format!("L{}.w_{}", layer, w)).unwrap()].len())
            .sum();
        assert_eq!(factored, h * 2 * d * dk);
        assert_eq!(blocks.iter().map(RealArray::len).sum::<usize>(), h * d * d);
    }
}

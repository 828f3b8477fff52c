use std::fs;
use std::path::Path;

use spikeformer_cli::{cmd_equiv, main_with, CliError};

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("spikeformer").chain(args.iter().copied());
    let code = main_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn equiv_passes_and_prints_config() {
    let (code, out, _) = run(&["equiv"]);
    assert_eq!(code, 0, "{}", out);
    assert!(out.starts_with("# resolved config\ncommand = equiv\n"));
    assert!(out.contains("cases=1515 mismatches=0"));
}

#[test]
fn equiv_reports_an_off_by_one_floor() {
    let mut out = Vec::new();
    let shifted = |v: f64, theta: f64, t: u32| ((v / theta).clamp(0.0, t as f64).floor() as u32 + 1).min(t);
    let r = cmd_equiv(shifted, &mut out);
    assert!(matches!(r, Err(CliError::CheckFailed(_))));
    assert_eq!(r.unwrap_err().exit_code(), 1);
    let text = String::from_utf8(out).unwrap();
    assert!(text.contains("mismatch v=-2 theta=0.5 T=1: level 1 vs 0 IF spikes"), "{}", text);
}

#[test]
fn reparam_check_is_deterministic_and_zero_trials_is_a_no_op() {
    let (code, out, _) = run(&["reparam-check", "--trials", "0"]);
    assert_eq!(code, 0);
    assert!(out.contains("trials=0"));
    let a = run(&["reparam-check", "--trials", "8", "--seed", "4"]);
    let b = run(&["reparam-check", "--trials", "8", "--seed", "4"]);
    assert_eq!(a.0, 0);
    assert_eq!(a, b);
}

#[test]
fn mask_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mask.csv");
    let (code, out, _) = run(&["mask", "--layer", "1", "--len", "5", "--out-csv", p(&path)]);
    assert_eq!(code, 0, "{}", out);
    let rows: Vec<Vec<f64>> = fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0][1], 0.984375);
    for i in 0..5 {
        assert_eq!(rows[i][i], 1.0);
        for j in 0..5 {
            assert_eq!(rows[i][j], rows[j][i]);
        }
    }
    assert_eq!(run(&["mask", "--layer", "0", "--len", "5"]).0, 2);
}

#[test]
fn usage_errors_exit_with_two() {
    let (code, _, err) = run(&["train", "--variant", "bogus"]);
    assert_eq!(code, 2);
    assert!(err.contains("bogus"));
    assert_eq!(run(&["frobnicate"]).0, 2);
    assert_eq!(run(&["--threads", "4", "equiv"]).0, 2);

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, "model.layers = 2\nmodel.colour = blue\n").unwrap();
    let (code, _, err) = run(&["train", "--config", p(&cfg)]);
    assert_eq!(code, 2);
    assert!(err.contains("model.colour"), "{}", err);
}

#[test]
fn help_exits_cleanly() {
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("reparam-check"));
}

/// Generates a small data set and trains two epochs on it.
fn small_run(dir: &Path) -> (String, std::path::PathBuf) {
    let data = dir.join("data");
    assert_eq!(run(&["gen-data", "--out-dir", p(&data), "--train-per-class", "6", "--test-per-class", "3", "--seed", "2"]).0, 0);
    let cfg = dir.join("small.conf");
    fs::write(
        &cfg,
        format!(
            "# two quick epochs\nmodel.d_model = 16\nmodel.heads = 2\nmodel.d_ff = 32\nneuron.theta = 0.5\n\
             train.epochs = 2\ntrain.batch_size = 8\ntrain.grad_clip = 1.0\n\
             data.train_manifest = {}\ndata.test_manifest = {}\n",
            p(&data.join("train/manifest.csv")),
            p(&data.join("test/manifest.csv"))
        ),
    )
    .unwrap();
    let ckpt = dir.join("m.ckpt");
    let metrics = dir.join("metrics.csv");
    let (code, out, err) =
        run(&["train", "--config", p(&cfg), "--out-checkpoint", p(&ckpt), "--metrics-csv", p(&metrics), "--seed", "3"]);
    assert_eq!(code, 0, "{}{}", out, err);
    assert!(out.contains("train.seed = 3") && out.contains("neuron.theta = 0.5"));
    let header = fs::read_to_string(&metrics).unwrap().lines().next().unwrap().to_string();
    assert!(header.starts_with("epoch,loss,train_acc,test_acc,rate_L1.entry"), "{}", header);
    (out, ckpt)
}

#[test]
fn train_infer_energy_and_attention_dump() {
    let dir = tempfile::tempdir().unwrap();
    let (out1, ckpt) = small_run(dir.path());
    let first = fs::read(&ckpt).unwrap();

    // Same flags and seed, same run.
    let again = tempfile::tempdir().unwrap();
    let (out2, ckpt2) = small_run(again.path());
    let strip = |s: &str| s.lines().filter(|l| !l.contains(".csv") && !l.contains(".ckpt")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&out1), strip(&out2));
    assert_eq!(first, fs::read(&ckpt2).unwrap());

    let test_manifest = dir.path().join("data/test/manifest.csv");
    let energy_csv = dir.path().join("energy.csv");
    let (code, out, err) =
        run(&["infer", "--checkpoint", p(&ckpt), "--manifest", p(&test_manifest), "--spike-driven", "--energy-csv", p(&energy_csv)]);
    assert_eq!(code, 0, "{}{}", out, err);
    assert!(out.contains("note: checkpoint is not reparameterized"));
    assert!(out.contains("accuracy "));
    let max_rel: f64 = out.lines().find_map(|l| l.strip_prefix("spike-driven vs dense logits max_rel=")).unwrap().parse().unwrap();
    assert!(max_rel < 1e-4);
    let csv = fs::read_to_string(&energy_csv).unwrap();
    assert!(csv.starts_with("layer,flops,R,T,kind,energy_nJ\ninput_proj,"));

    let (code, out, _) = run(&["energy", "--checkpoint", p(&ckpt), "--manifest", p(&test_manifest)]);
    assert_eq!(code, 0, "{}", out);
    let summary = out.lines().find(|l| l.starts_with("E_ANN_mJ=")).unwrap();
    let ratio = summary.rsplit("saving_ratio=").next().unwrap();
    assert_eq!(ratio.split('.').nth(1).unwrap().len(), 2, "{}", summary);

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "# nothing here\n").unwrap();
    assert_eq!(run(&["energy", "--checkpoint", p(&ckpt), "--manifest", p(&empty)]).0, 2);

    let utt = fs::read_to_string(&test_manifest).unwrap();
    let first_file = utt.lines().find(|l| !l.starts_with('#')).unwrap().split(',').next().unwrap().to_string();
    let maps = dir.path().join("attn.csv");
    let (code, out, _) = run(&[
        "attn-dump",
        "--checkpoint",
        p(&ckpt),
        "--utterance",
        p(&dir.path().join("data/test").join(first_file)),
        "--layer",
        "1",
        "--out-csv",
        p(&maps),
    ]);
    assert_eq!(code, 0, "{}", out);
    let mut row_sums = std::collections::BTreeMap::new();
    for line in fs::read_to_string(&maps).unwrap().lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        *row_sums.entry((f[0].to_string(), f[1].to_string())).or_insert(0.0) += f[3].parse::<f64>().unwrap();
    }
    assert!(!row_sums.is_empty());
    assert!(row_sums.values().all(|s| (s - 1.0).abs() < 1e-9));
    assert_eq!(run(&["attn-dump", "--checkpoint", p(&ckpt), "--utterance", p(&maps), "--layer", "9", "--out-csv", p(&maps)]).0, 2);
}

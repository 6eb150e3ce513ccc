use std::fs;
use std::path::{Path, PathBuf};

use islab_cli::{run, RunConfig};
use islab_core::dataset::{build_manifest, read_image, write_image, Layout, Manifest};
use islab_core::domain::{Modality, CHANNEL_ORDER};
use islab_core::inference::{prediction_path, RoutingTable};
use islab_core::models::Tier;

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn islab(args: &[&str]) -> i32 {
    run(std::iter::once("islab").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, n: usize) -> PathBuf {
    let data = dir.join("data");
    assert_eq!(islab(&["synth", "--out", p(&data), "--samples", &n.to_string(), "--size", "64", "--seed", "3"]), 0);
    data
}

#[test]
fn shipped_configs_parse() {
    for name in ["configs/paper.toml", "configs/test.toml"] {
        let cfg = RunConfig::load(Some(&repo_file(name))).unwrap();
        let (tc, _) = cfg.train_config(None).unwrap();
        tc.validate().unwrap();
        cfg.synth_config().unwrap().validate().unwrap();
    }
    let (tc, _) = RunConfig::load(Some(&repo_file("configs/test.toml"))).unwrap().train_config(None).unwrap();
    assert_eq!(tc.tier, Tier::Test);
    let routing = RoutingTable::load(repo_file("configs/routing_final.toml")).unwrap();
    assert_eq!(routing, RoutingTable::final_solution());
}

#[test]
fn usage_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let d = p(tmp.path());
    assert_eq!(islab(&["train", "--data", d, "--out", d, "--strategy", "dynamic", "--strategy", "separate"]), 1);
    assert_eq!(islab(&["train", "--data", d, "--out", d, "--strategy", "joint"]), 1);
    assert_eq!(islab(&["frobnicate"]), 1);
    assert_eq!(islab(&["--help"]), 0);
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[train]\nepochs = 3\n").unwrap();
    assert_eq!(islab(&["--config", p(&bad), "train", "--data", d, "--out", d]), 1);
}

#[test]
fn synth_output_rebuilds_to_the_same_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 6);
    let saved = Manifest::load(data.join("manifest.toml")).unwrap();
    let scanned = build_manifest(&data, &Layout::default()).unwrap();
    assert_eq!(saved.entries, scanned.entries);
    let other = tmp.path().join("m.toml");
    assert_eq!(islab(&["manifest", "--root", p(&data), "--out", p(&other)]), 0);
    assert_eq!(Manifest::load(&other).unwrap().entries, saved.entries);
}

#[test]
fn unwritable_output_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("plain_file");
    fs::write(&file, "x").unwrap();
    let code = islab(&["synth", "--out", p(&file.join("sub")), "--samples", "3", "--size", "32"]);
    assert_eq!(code, 2);
}

#[test]
fn unetpp_log_has_no_discriminator_terms() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 3);
    let models = tmp.path().join("models");
    let code = islab(&[
        "train", "--data", p(&data), "--out", p(&models), "--tier", "test", "--backbone", "unetpp", "--strategy", "unified",
    ]);
    assert_eq!(code, 0);
    let log = fs::read_to_string(models.join("unetpp-unified/log.jsonl")).unwrap();
    assert!(!log.is_empty());
    assert!(!log.contains("d_loss") && !log.contains("g_adv"));
    assert!(models.join("unetpp-unified/model.ckpt").is_file());
}

#[test]
fn predict_fails_before_writing_when_a_model_is_missing() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 3);
    let out = tmp.path().join("pred");
    let code = islab(&["predict", "--checkpoints", p(tmp.path()), "--data", p(&data), "--out", p(&out)]);
    assert_eq!(code, 2);
    assert!(!out.exists());
}

fn copy_ground_truth_as_predictions(data: &Path, out: &Path) -> Manifest {
    let m = Manifest::load(data.join("manifest.toml")).unwrap();
    fs::create_dir_all(out).unwrap();
    for e in &m.entries {
        let s = m.load_sample(e).unwrap();
        for o in CHANNEL_ORDER {
            let plane = s.target(o).cloned().unwrap_or_else(|| s.input.clone());
            write_image(&plane, prediction_path(out, &e.id, o)).unwrap();
        }
    }
    m
}

#[test]
fn perfect_predictions_score_perfectly_and_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 9);
    let pred = tmp.path().join("pred");
    copy_ground_truth_as_predictions(&data, &pred);
    let (e1, e2) = (tmp.path().join("e1"), tmp.path().join("e2"));
    assert_eq!(islab(&["evaluate", "--pred", p(&pred), "--data", p(&data), "--out", p(&e1)]), 0);
    assert_eq!(islab(&["evaluate", "--pred", p(&pred), "--data", p(&data), "--out", p(&e2)]), 0);
    let t1 = fs::read(e1.join("metrics.txt")).unwrap();
    assert_eq!(t1, fs::read(e2.join("metrics.txt")).unwrap());
    let text = String::from_utf8(t1).unwrap();
    for line in text.lines().filter(|l| l.starts_with(['M', 'N'])) {
        let cells: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cells[1], "0.0000", "{line}");
        assert_eq!(cells[2], "1.0000", "{line}");
    }
    let tub = text.lines().find(|l| l.starts_with('T')).unwrap();
    let cells: Vec<&str> = tub.split_whitespace().collect();
    assert_eq!((cells[1], cells[4], cells[5]), ("-", "-", "-"));
}

#[test]
fn unmatched_predictions_are_listed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 3);
    let pred = tmp.path().join("pred");
    let m = copy_ground_truth_as_predictions(&data, &pred);
    let plane = read_image(m.root.join(&m.entries[0].input)).unwrap();
    write_image(&plane, prediction_path(&pred, "ghost", CHANNEL_ORDER[0])).unwrap();
    assert_eq!(islab(&["evaluate", "--pred", p(&pred), "--data", p(&data), "--out", p(&tmp.path().join("e"))]), 2);
}

#[test]
fn predict_writes_readable_planes_with_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 3);
    let models = tmp.path().join("models");
    let cfg = tmp.path().join("fast.toml");
    fs::write(&cfg, "[train]\npreset = \"test\"\nepochs_constant = 1\nepochs_decay = 0\nsteps_per_epoch = 1\n").unwrap();
    let code = islab(&[
        "--config", p(&cfg), "train", "--data", p(&data), "--out", p(&models), "--strategy", "unified", "--backbone", "unetpp",
    ]);
    assert_eq!(code, 0);
    let out = tmp.path().join("pred");
    let code = islab(&[
        "predict", "--checkpoints", p(&models), "--model", "unetpp-unified", "--data", p(&data), "--out", p(&out), "--modality",
        "dic", "--tta",
    ]);
    assert_eq!(code, 0);
    let m = Manifest::load(data.join("manifest.toml")).unwrap();
    let dic: Vec<_> = m.entries.iter().filter(|e| e.modality == Modality::DIC).collect();
    assert!(!dic.is_empty());
    for e in dic {
        for o in CHANNEL_ORDER {
            assert_eq!(read_image(prediction_path(&out, &e.id, o)).unwrap().dims(), (64, 64));
        }
        let prov = fs::read_to_string(out.join(format!("{}_provenance.json", e.id))).unwrap();
        assert!(prov.contains("\"tta\": true") && prov.contains("unetpp-unified"));
    }
    assert_eq!(fs::read_dir(&out).unwrap().count(), 5 * m.entries.iter().filter(|e| e.modality == Modality::DIC).count());
}

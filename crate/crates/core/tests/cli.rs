//! Drives the `mmemo` binary as a subprocess.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmemo::checkpoint::Checkpoint;
use mmemo::config::RunConfig;
use mmemo::corpus::{Corpus, CorpusSpec};
use mmemo::toy;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn mmemo(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mmemo"));
    cmd.args(args).env_remove(mmemo::config::OUT_DIR_ENV);
    if let Some(dir) = env_out {
        cmd.env(mmemo::config::OUT_DIR_ENV, dir);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn shipped_configs_match_the_toy_presets() {
    let run = RunConfig::load(configs().join("toy.toml")).unwrap();
    let preset = toy::run_config();
    assert_eq!(run.model, preset.model);
    assert_eq!(run.pretrain, preset.pretrain);
    assert_eq!(run.downstream, preset.downstream);
    assert_eq!(run.hash(), preset.hash());
    for (file, spec) in [
        ("pretrain_corpus.toml", toy::pretrain_spec()),
        ("labeled_corpus.toml", toy::labeled_spec()),
    ] {
        let text = std::fs::read_to_string(configs().join(file)).unwrap();
        let parsed: CorpusSpec = toml::from_str(&text).unwrap();
        assert_eq!(parsed, spec, "{file}");
    }
}

/// A config small enough to pre-train in a second.
fn small_run(dir: &Path) -> String {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        "[model]\nhidden = 16\nheads = 2\nlayers = 1\nmax_len = 64\nvisual_dim = 16\nacoustic_dim = 16\n\
         [pretrain]\nsteps = 16\nbatch_size = 8\n\
         [downstream]\nepochs = 1\nfolds = 2\nseeds = [0]\n\
         [paths]\npretrain_data = \"un.ndjson\"\nlabeled_data = \"lab.ndjson\"\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn small_corpora(dir: &Path) {
    let base = "visual_dim = 16\nacoustic_dim = 16\ntext_words = [2, 5]\ngroups = 2\n";
    let corpora = [
        (
            "un",
            "counts = [6, 6, 6, 6]\nlabeled = false\nemotion_phrase_rate = 1.0\n",
            24,
        ),
        ("lab", "counts = [4, 4, 4, 4]\n", 16),
    ];
    for (name, extra, n) in corpora {
        let spec = dir.join(format!("{name}.toml"));
        std::fs::write(&spec, format!("{base}{extra}")).unwrap();
        let data = dir.join(format!("{name}.ndjson"));
        let stdout = ok(&mmemo(
            &[
                "gen-data",
                "--spec",
                spec.to_str().unwrap(),
                "--out",
                data.to_str().unwrap(),
            ],
            None,
        ));
        assert!(stdout.contains(&format!("wrote {n} samples")), "{stdout}");
        let corpus = Corpus::load(&data).unwrap();
        assert!(dir.join(format!("{name}.ndjson.manifest.json")).exists());
        assert_eq!(corpus.len(), n);
    }
}

#[test]
fn full_pipeline_through_every_subcommand() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_corpora(dir);
    let run = small_run(dir);
    let out = dir.join("out");
    let out_s = out.to_str().unwrap();

    let stdout = ok(&mmemo(&["pretrain", "--config", &run, "--out-dir", out_s], None));
    assert!(stdout.contains("wwmlm") && stdout.contains("span_mafr"), "{stdout}");
    let ck = out.join("checkpoint.ckpt");
    let ck_s = ck.to_str().unwrap();
    let log = std::fs::read_to_string(out.join("pretrain_log.ndjson")).unwrap();
    let steps: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(steps.iter().filter(|v| v["event"] == "pretrain_step").count() == 16);

    // save -> load -> save is bitwise stable
    let bytes = std::fs::read(&ck).unwrap();
    let again = dir.join("again.ckpt");
    Checkpoint::load(&ck).unwrap().save(&again).unwrap();
    assert_eq!(bytes, std::fs::read(&again).unwrap());

    ok(&mmemo(
        &["finetune", "--config", &run, "--checkpoint", ck_s, "--out-dir", out_s],
        None,
    ));
    ok(&mmemo(
        &["prompt", "--config", &run, "--checkpoint", ck_s, "--out-dir", out_s],
        None,
    ));
    let stdout = ok(&mmemo(
        &[
            "eval",
            "--config",
            &run,
            "--setting",
            "pretrain+prompt",
            "--checkpoint",
            ck_s,
            "--fraction",
            "0.1",
            "--out-dir",
            out_s,
        ],
        None,
    ));
    assert!(stdout.contains("fraction 0.1"), "{stdout}");
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics_pretrain_prompt.json")).unwrap()).unwrap();
    assert_eq!(metrics["fraction"], 0.1);
    assert_eq!(metrics["setting"], "pretrain+prompt");
    assert!(out.join("metrics_pretrain_finetune.json").exists());

    ok(&mmemo(
        &["eval", "--config", &run, "--setting", "direct", "--out-dir", out_s],
        None,
    ));
    let stdout = ok(&mmemo(
        &["ablate", "--config", &run, "--fraction", "0.5", "--out-dir", out_s],
        None,
    ));
    assert!(stdout.contains("w/o acoustic task"), "{stdout}");
    let ablation: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(ablation["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn environment_overrides_the_output_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_corpora(dir);
    let run = small_run(dir);
    let from_env = dir.join("from_env");
    ok(&mmemo(
        &[
            "pretrain",
            "--config",
            &run,
            "--out-dir",
            dir.join("flag").to_str().unwrap(),
        ],
        Some(&from_env),
    ));
    assert!(from_env.join("checkpoint.ckpt").exists());
    assert!(from_env.join("pretrain_log.ndjson").exists());
    assert!(!dir.join("flag").exists());
}

#[test]
fn failures_exit_nonzero_with_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let bad = dir.join("bad.toml");
    std::fs::write(&bad, "[model]\nhidden = 30\nheads = 4\n").unwrap();
    let missing_cfg = dir.join("missing.toml");
    let missing_data = dir.join("missing.ndjson");
    let cases: [(&[&str], i32); 4] = [
        (&["pretrain", "--no-such-flag"], 2),
        (&["pretrain", "--config", bad.to_str().unwrap()], 2),
        (&["pretrain", "--config", missing_cfg.to_str().unwrap()], 2),
        (&["prompt", "--data", missing_data.to_str().unwrap()], 1),
    ];
    for (args, code) in cases {
        let out = mmemo(args, Some(dir));
        assert_eq!(out.status.code(), Some(code), "{args:?}");
        assert!(!out.stderr.is_empty(), "{args:?}");
    }
}

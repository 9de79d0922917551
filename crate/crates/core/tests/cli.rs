mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use savc::config::RunConfig;

const SMALL: &str = "\
[data]
n_speakers = 3
n_emotions = 3
utterances_per_pair = 10
frames = 24
unit_channels = 6
mel_channels = 6

[model]
unit_channels = 6
mel_channels = 6
conv_channels = 12
gru_hidden = 8
content_dim = 4
prosody_dim = 2
speaker_dim = 8
n_style_tokens = 4
token_dim = 6
n_emotions = 3

[train]
batch_size = 4
teacher_steps = 15
main_steps = 15
finetune_steps = 8
adversarial_window = 5

[eval]
n_pairs = 4
";

fn savc(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_savc"));
    c.args(args).env_remove("RUST_LOG");
    match env_seed {
        Some(s) => c.env(savc::cli::SEED_ENV, s),
        None => c.env_remove(savc::cli::SEED_ENV),
    };
    c.output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = savc(args, None);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, SMALL).unwrap();
    p.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_with_config_succeeds() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path());
    let wd = d.path().join("w");
    let o = ok(&["gen-data", "--config", &cfg, "--work-dir", s(&wd)]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("90 utterances"));
    assert!(wd.join("corpus/manifest.json").is_file());
}

#[test]
fn train_without_teacher_is_a_stage_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path());
    let wd = d.path().join("w");
    ok(&["gen-data", "--config", &cfg, "--work-dir", s(&wd)]);
    let o = savc(&["train", "--config", &cfg, "--work-dir", s(&wd)], None);
    assert_eq!(o.status.code(), Some(4));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error: kind=stage message="), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(savc(&["frobnicate"], None).status.code(), Some(2));
    assert_eq!(savc(&["convert"], None).status.code(), Some(2));
    let help = savc(&["--help"], None);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("gen-data"));
}

#[test]
fn bad_config_exits_three() {
    let d = tempfile::tempdir().unwrap();
    for text in ["[data]\nn_speakers = many\n", "[nonsense]\n", "[train]\nbogus = 1\n"] {
        let p = d.path().join("bad.cfg");
        fs::write(&p, text).unwrap();
        let o = savc(&["inspect", "--dump-config", "--config", s(&p)], None);
        assert_eq!(o.status.code(), Some(3), "{text}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("kind=config"));
    }
    let o = savc(&["inspect", "--dump-config", "--config", s(&d.path().join("absent.cfg"))], None);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn dumped_config_reparses_to_the_same_values() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path());
    let o = ok(&["inspect", "--dump-config", "--config", &cfg, "--seed", "31"]);
    let text = String::from_utf8(o.stdout).unwrap();
    let back = RunConfig::parse(&text).unwrap();
    let mut expect = RunConfig::load(&cfg).unwrap();
    expect.set_seed(31);
    assert_eq!(back.data, expect.data);
    assert_eq!(back.model, expect.model);
    assert_eq!(back.train, expect.train);
    assert_eq!(back.eval, expect.eval);
}

#[test]
fn seed_priority_flag_then_file_then_environment() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path());
    let gen = |name: &str, cfg: &str, extra: &[&str], env: Option<&str>| {
        let wd = d.path().join(name);
        let mut args = vec!["gen-data", "--config", cfg, "--work-dir", s(&wd)];
        args.extend_from_slice(extra);
        assert!(savc(&args, env).status.success());
        common::tree(&wd.join("corpus"))
    };
    let flag5 = gen("flag5", &cfg, &["--seed", "5"], None);
    let env5 = gen("env5", &cfg, &[], Some("5"));
    let plain = gen("plain", &cfg, &[], None);
    assert_eq!(flag5, env5);
    assert_ne!(flag5, plain);

    // A seed in the file beats the environment.
    let seeded = d.path().join("seeded.cfg");
    fs::write(&seeded, SMALL.replace("[data]\n", "[data]\nseed = 9\n")).unwrap();
    let seeded = seeded.to_string_lossy().into_owned();
    let file9 = gen("file9", &seeded, &[], Some("5"));
    let flag9 = gen("flag9", &cfg, &["--seed", "9"], None);
    assert_eq!(file9, flag9);

    let o = savc(&["inspect", "--dump-config"], Some("not-a-number"));
    assert_eq!(o.status.code(), Some(3));
}

fn pipeline(wd: &Path, cfg: &str) {
    let w = s(wd);
    for stage in ["gen-data", "pretrain-teacher", "train", "finetune"] {
        ok(&[stage, "--config", cfg, "--work-dir", w, "--jobs", "1"]);
    }
    let corpus = savc::tensorio::load_manifest(wd.join("corpus/manifest.json")).unwrap();
    let pairs: String = corpus
        .utterances
        .iter()
        .take(3)
        .map(|r| format!("{} spk01\n", r.id))
        .collect();
    let pairs_path = wd.join("pairs.txt");
    fs::write(&pairs_path, pairs).unwrap();
    ok(&["convert", "--config", cfg, "--work-dir", w, "--pairs", s(&pairs_path)]);
    ok(&["eval", "--config", cfg, "--work-dir", w]);
}

#[test]
fn full_pipeline_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path());
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    pipeline(&a, &cfg);
    pipeline(&b, &cfg);
    for sub in ["corpus", "teacher", "main", "finetuned", "converted"] {
        let ta = common::tree(&a.join(sub));
        let tb = common::tree(&b.join(sub));
        assert!(!ta.is_empty(), "{sub}");
        assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>(), "{sub}");
        for (k, va) in &ta {
            let vb = &tb[k];
            if sub == "converted" && k == "manifest.json" {
                // Source feature paths point into each run's own corpus.
                let na = String::from_utf8_lossy(va).replace(s(&a), "<wd>");
                let nb = String::from_utf8_lossy(vb).replace(s(&b), "<wd>");
                assert_eq!(na, nb);
            } else {
                assert!(va == vb, "{sub}/{k} differs");
            }
        }
    }
    for f in ["report.json", "report.csv"] {
        assert!(fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    assert_eq!(fs::read_dir(a.join("converted/mel")).unwrap().count(), 3);

    let ck = ok(&["inspect", s(&a.join("finetuned"))]);
    assert!(String::from_utf8_lossy(&ck.stdout).contains("stage=finetuned"));
    let svg = a.join("main.svg");
    ok(&["plot", "--log", s(&a.join("logs/main.csv")), "--out", s(&svg)]);
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    // A teacher checkpoint is the wrong stage for conversion.
    let o = savc(
        &["eval", "--config", &cfg, "--work-dir", s(&a), "--checkpoint", s(&a.join("teacher"))],
        None,
    );
    assert_eq!(o.status.code(), Some(4));
}

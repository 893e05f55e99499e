use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn gujin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gujin"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout_json(out: &Output) -> Value {
    assert_eq!(code(out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const CORPUS: &str = "天地玄黃宇宙洪荒\n日月盈昃辰宿列張\n寒來暑往秋收冬藏\n閏餘成歲律呂調陽\n";

#[test]
fn corpus_stats_matches_worked_example() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "two.txt", "天地\n玄黃宇宙\n");
    let out = gujin(&["corpus-stats", &input]);
    assert_eq!(code(&out), 0);
    assert_eq!(
        String::from_utf8(out.stdout).unwrap().trim(),
        r#"{"sentence_count":2,"total_chars":6,"mean_length":3.0,"variance":1.0}"#
    );
}

#[test]
fn bleu_of_identical_files_is_one() {
    let dir = TempDir::new().unwrap();
    let refs = write(dir.path(), "refs.txt", "學而時習之不亦說乎\n有朋自遠方來不亦樂乎\n");
    let report = stdout_json(&gujin(&["eval-bleu", "--candidates", &refs, "--references", &refs]));
    for n in 1..=4 {
        assert_eq!(report["bleu"][n.to_string()], 1.0, "{report}");
    }
    assert_eq!(report["brevity_penalty"], 1.0);
}

#[test]
fn report_goes_to_out_file() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "two.txt", "天地\n玄黃宇宙\n");
    let target = dir.path().join("stats.json");
    let out = gujin(&["--out", target.to_str().unwrap(), "corpus-stats", &input]);
    assert_eq!(code(&out), 0);
    assert!(out.stdout.is_empty());
    let v: Value = serde_json::from_str(&fs::read_to_string(target).unwrap()).unwrap();
    assert_eq!(v["sentence_count"], 2);
}

#[test]
fn exit_codes_separate_usage_and_data_errors() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&gujin(&["no-such-command"])), 1);
    assert_eq!(code(&gujin(&["--help"])), 0);
    let missing = dir.path().join("absent.txt");
    assert_eq!(code(&gujin(&["corpus-stats", missing.to_str().unwrap()])), 2);
    let a = write(dir.path(), "a.txt", "一\n二\n");
    let b = write(dir.path(), "b.txt", "一\n");
    assert_eq!(code(&gujin(&["eval-bleu", "--candidates", &a, "--references", &b])), 2);
    let cfg = write(dir.path(), "bad.toml", "corpus = \"c.txt\"\nvocab = \"v.json\"\noutput_dir = \"o\"\nbogus = 1\n");
    let out = gujin(&["pretrain", "--config", &cfg]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn build_vocab_extends_base_and_reports_added() {
    let dir = TempDir::new().unwrap();
    let a = write(dir.path(), "a.txt", "天地玄黃\n");
    let b = write(dir.path(), "b.txt", "天地宇宙\n");
    let base = dir.path().join("base.json");
    let grown = dir.path().join("grown.json");
    let first = stdout_json(&gujin(&["build-vocab", &a, "-o", base.to_str().unwrap()]));
    assert_eq!(first["added"], 4);
    let second = stdout_json(&gujin(&[
        "build-vocab",
        &b,
        "--base",
        base.to_str().unwrap(),
        "--extra",
        "儒家",
        "-o",
        grown.to_str().unwrap(),
    ]));
    assert_eq!(second["added"], 4);
    assert_eq!(second["size"].as_u64().unwrap(), first["size"].as_u64().unwrap() + 4);
}

#[test]
fn eval_cls_reports_weighted_metrics() {
    let dir = TempDir::new().unwrap();
    let t = write(dir.path(), "t.txt", "儒家\n儒家\n道家\n道家\n");
    let p = write(dir.path(), "p.txt", "儒家\n道家\n道家\n道家\n");
    let r = stdout_json(&gujin(&["eval-cls", "--truths", &t, "--predictions", &p]));
    assert_eq!(r["accuracy"], 0.75);
    assert_eq!(r["weighted"]["recall"], 0.75);
    let unknown = write(dir.path(), "u.txt", "儒家\n法家\n道家\n道家\n");
    let labels = write(dir.path(), "l.txt", "儒家\n道家\n");
    let out = gujin(&["eval-cls", "--truths", &t, "--predictions", &unknown, "--labels", &labels]);
    assert_eq!(code(&out), 2);
}

fn pretrain_config(dir: &Path, out_dir: &str, aliased: bool) -> String {
    let train = if aliased {
        "leraning_rate = 3e-3\nepoches = 2\ntrain_batch_size = 2\n"
    } else {
        "learning_rate = 3e-3\nnum_train_epochs = 2\nper_device_train_batch_size = 2\n"
    };
    let text = format!(
        "corpus = \"corpus.txt\"\nvocab = \"vocab.json\"\noutput_dir = \"{out_dir}\"\n\n\
         [model]\nn_layers = 1\nn_heads = 2\nd_model = 16\nd_ff = 32\ncontext_len = 16\n\n\
         [train]\n{train}seed = 7\ncheckpoint_every = 2\n"
    );
    write(dir, &format!("{out_dir}.toml"), &text)
}

fn without_clock(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("wall_clock_seconds");
    v
}

#[test]
fn pretrain_is_reproducible_from_echoed_config() {
    let dir = TempDir::new().unwrap();
    let corpus = write(dir.path(), "corpus.txt", CORPUS);
    let vocab = dir.path().join("vocab.json");
    assert_eq!(code(&gujin(&["build-vocab", &corpus, "-o", vocab.to_str().unwrap()])), 0);

    let first = stdout_json(&gujin(&["-q", "pretrain", "--config", &pretrain_config(dir.path(), "run_a", false)]));
    let aliased = stdout_json(&gujin(&["pretrain", "--config", &pretrain_config(dir.path(), "run_b", true)]));
    assert_eq!(first["steps"], 4);
    assert_eq!(without_clock(first.clone()), without_clock(aliased));

    let run_a = dir.path().join("run_a");
    for name in ["config.toml", "model.gjlm", "report.json", "checkpoint-2.gjlm", "checkpoint-4.gjlm"] {
        assert!(run_a.join(name).exists(), "{name} missing");
    }
    let echoed = fs::read_to_string(run_a.join("config.toml")).unwrap();
    assert!(echoed.contains("num_train_epochs = 2"));

    // Re-run from the echoed config into a fresh directory.
    let replay_cfg = echoed.replace(
        run_a.to_str().unwrap(),
        dir.path().join("replay").to_str().unwrap(),
    );
    let replay_path = write(dir.path(), "replay.toml", &replay_cfg);
    let replay = stdout_json(&gujin(&["pretrain", "--config", &replay_path]));
    assert_eq!(without_clock(first), without_clock(replay));
    let a = fs::read(run_a.join("model.gjlm")).unwrap();
    let b = fs::read(dir.path().join("replay/model.gjlm")).unwrap();
    assert!(a == b, "checkpoints differ");
    assert_eq!(
        fs::read_to_string(dir.path().join("replay/config.toml")).unwrap(),
        replay_cfg
    );

    // The trained checkpoint scores the corpus and round-trips through eval-ppl.
    let ckpt = run_a.join("model.gjlm");
    let ppl = stdout_json(&gujin(&[
        "eval-ppl",
        "--model",
        ckpt.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
        &corpus,
    ]));
    assert!(ppl["ppl"].as_f64().unwrap().is_finite());

    // A vocabulary the checkpoint was not trained with is a data error.
    let other = dir.path().join("other.json");
    let extra = write(dir.path(), "extra.txt", "子曰\n");
    gujin(&["build-vocab", &extra, "-o", other.to_str().unwrap()]);
    let out = gujin(&["eval-ppl", "--model", ckpt.to_str().unwrap(), "--vocab", other.to_str().unwrap(), &corpus]);
    assert_eq!(code(&out), 2);
}

#[test]
fn diverging_training_exits_with_numeric_code() {
    let dir = TempDir::new().unwrap();
    let corpus = write(dir.path(), "corpus.txt", CORPUS);
    let vocab = dir.path().join("vocab.json");
    gujin(&["build-vocab", &corpus, "-o", vocab.to_str().unwrap()]);
    let cfg = write(
        dir.path(),
        "boom.toml",
        "corpus = \"corpus.txt\"\nvocab = \"vocab.json\"\noutput_dir = \"boom\"\n\n\
         [model]\nn_layers = 1\nn_heads = 2\nd_model = 16\nd_ff = 32\ncontext_len = 16\n\n\
         [train]\nlearning_rate = 1e300\nnum_train_epochs = 5\nper_device_train_batch_size = 2\nwarmup_proportion = 0.0\n",
    );
    let out = gujin(&["pretrain", "--config", &cfg]);
    assert_eq!(code(&out), 3, "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn translate_and_classify_emit_one_record_per_input() {
    let dir = TempDir::new().unwrap();
    let pairs = write(
        dir.path(),
        "pairs.jsonl",
        "{\"Ancient\":\"學而時習之\",\"Chinese\":\"學習並時常溫習\"}\n{\"Ancient\":\"有朋自遠方來\",\"Chinese\":\"有朋友從遠方來\"}\n",
    );
    let vocab = dir.path().join("vocab.json");
    let out = gujin(&[
        "build-vocab",
        &pairs,
        "--format",
        "aligned",
        "--extra",
        "儒家道家",
        "-o",
        vocab.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let cfg = write(
        dir.path(),
        "t.toml",
        "pairs = \"pairs.jsonl\"\nvocab = \"vocab.json\"\noutput_dir = \"tr\"\n\n\
         [model]\nn_layers = 1\nn_heads = 2\nd_model = 16\nd_ff = 32\ncontext_len = 32\n\n\
         [train]\nnum_train_epochs = 1\nper_device_train_batch_size = 2\n\n[decode]\nmax_gen_length = 4\n",
    );
    stdout_json(&gujin(&["-q", "finetune-translate", "--config", &cfg]));
    let ckpt = dir.path().join("tr/model.gjlm");
    let (m, v) = (ckpt.to_str().unwrap(), vocab.to_str().unwrap());

    let out = gujin(&["translate", "--model", m, "--vocab", v, "--max-gen-length", "4", "學而", "有朋"]);
    assert_eq!(code(&out), 0);
    let lines: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["source"], "有朋");
    assert!(lines[0]["translation"].as_str().unwrap().chars().count() <= 4);

    let labels = write(dir.path(), "labels.txt", "儒家\n道家\n");
    let out = gujin(&["classify", "--model", m, "--vocab", v, "--labels", &labels, "學而", "有朋"]);
    assert_eq!(code(&out), 0);
    for line in String::from_utf8(out.stdout).unwrap().lines() {
        let r: Value = serde_json::from_str(line).unwrap();
        assert!(["儒家", "道家"].contains(&r["label"].as_str().unwrap()));
        assert_eq!(r["scores"].as_array().unwrap().len(), 2);
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_bridgecond");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("BRIDGECOND_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn sorted_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn count_line(out: &str, label: &str) -> usize {
    out.lines()
        .find_map(|l| l.strip_prefix(label))
        .unwrap_or_else(|| panic!("no {label:?} line in {out}"))
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn gen_world_is_deterministic_and_handles_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, z) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("z"));
    assert_eq!(code(&run(&["gen-world", "--count", "10", "--seed", "4", "--out", p(&a)])), 0);
    assert_eq!(code(&run(&["gen-world", "--count", "10", "--seed", "4", "--out", p(&b)])), 0);
    let files = sorted_files(&a);
    assert_eq!(files.iter().filter(|(n, _)| n.ends_with(".ppm")).count(), 10);
    assert_eq!(files.iter().filter(|(n, _)| n.ends_with(".json")).count(), 10);
    assert_eq!(files, sorted_files(&b));
    assert_eq!(code(&run(&["gen-world", "--count", "0", "--out", p(&z)])), 0);
    assert!(sorted_files(&z).is_empty());
}

#[test]
fn seed_env_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = Command::new(BIN)
        .args(["gen-world", "--count", "1", "--out", p(&a)])
        .env("BRIDGECOND_SEED", "17")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(code(&run(&["gen-world", "--count", "1", "--seed", "17", "--out", p(&b)])), 0);
    assert_eq!(sorted_files(&a), sorted_files(&b));
    assert!(a.join("scene_000017.ppm").is_file());
}

#[test]
fn build_dataset_reports_counts_and_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let mut accepted = Vec::new();
    for tau in ["0", "5", "9"] {
        let out = dir.path().join(format!("tau{tau}"));
        let o = run(&["build-dataset", "--scenes", "6", "--tau-q", tau, "--out", p(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let s = stdout(&o);
        for label in ["objects found:", "masks kept:", "pairs built:", "pairs accepted:"] {
            count_line(&s, label);
        }
        if tau == "0" {
            assert_eq!(count_line(&s, "pairs accepted:"), count_line(&s, "rows written:"));
        }
        accepted.push(count_line(&s, "pairs accepted:"));
    }
    assert!(accepted.windows(2).all(|w| w[0] >= w[1]), "{accepted:?}");
}

#[test]
fn build_dataset_is_reproducible_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&run(&["build-dataset", "--scenes", "5", "--out", p(&a)])), 0);
    assert_eq!(code(&run(&["build-dataset", "--scenes", "5", "--workers", "3", "--out", p(&b)])), 0);
    assert_eq!(sorted_files(&a), sorted_files(&b));
    assert_eq!(sorted_files(&a.join("images")), sorted_files(&b.join("images")));
}

#[test]
fn broken_scorer_is_a_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = run(&["build-dataset", "--scenes", "1", "--scorer", "exit 1", "--timeout-secs", "2", "--out", p(&out)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(count_line(&stdout(&o), "rows unscored:") > 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&["gen-world", "--out", "/tmp/x", "--bogus"])), 1);
    assert_eq!(code(&run(&["no-such-command"])), 1);
    assert_eq!(code(&run(&["train", "--stage", "4", "--data", "x", "--out", "y"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "unknown_key = 1\n").unwrap();
    let o = run(&["build-dataset", "--config", p(&cfg), "--out", p(&dir.path().join("d"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("unknown_key"), "{}", stderr(&o));
}

#[test]
fn help_lists_flags_with_defaults() {
    let cases: &[(&str, &[&str])] = &[
        ("gen-world", &["--count", "--seed", "--out", "[default: 10]"]),
        ("build-dataset", &["--scenes", "--config", "--out", "--workers", "[default: 1]"]),
        ("train", &["--stage", "--data", "--from-checkpoint", "--out", "--seed"]),
        ("edit", &["--checkpoint", "--image", "--instruction", "--lambda", "--seed", "--out", "[default: 1]"]),
        ("eval", &["--manifest", "--pred", "--scorer", "--out", "[default: mock]"]),
        ("gradcheck", &["--module", "[default: all]"]),
    ];
    for (cmd, flags) in cases {
        let o = run(&[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        let text = stdout(&o);
        for f in *flags {
            assert!(text.contains(f), "{cmd} help lacks {f}:\n{text}");
        }
    }
}

#[test]
fn gradcheck_all_passes() {
    let o = run(&["gradcheck", "--module", "all"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let s = stdout(&o);
    for block in ["attention", "layer_norm", "lora", "qformer", "bim", "iaa", "denoiser", "stage1_loss", "stage2_loss", "stage3_loss"] {
        assert!(s.lines().any(|l| l.starts_with(block) && l.ends_with("ok")), "{block}: {s}");
    }
    assert_eq!(code(&run(&["gradcheck", "--module", "nope"])), 1);
}

struct Trained {
    _dir: tempfile::TempDir,
    data: PathBuf,
    config: PathBuf,
    ck3: PathBuf,
    root: PathBuf,
}

fn quick_config(dir: &Path) -> PathBuf {
    let cfg = dir.join("run.toml");
    fs::write(
        &cfg,
        "stage1_steps = 4\nstage1_batch_size = 2\nstage2_steps = 6\nstage2_batch_size = 2\n\
         stage3_steps = 30\nstage3_batch_size = 2\nstage3_lr = 0.01\ntasks = [\"removal\"]\nmodes = [\"template\"]\n",
    )
    .unwrap();
    cfg
}

fn train_chain(seed: &str, out: &str) -> Trained {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = quick_config(&root);
    let data = root.join("data");
    let o = run(&["build-dataset", "--scenes", "4", "--config", p(&config), "--out", p(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ck = root.join(out);
    let mut prev: Option<PathBuf> = None;
    for stage in ["1", "2", "3"] {
        let mut args = vec!["train", "--stage", stage, "--data", p(&data), "--config", p(&config), "--seed", seed, "--out", p(&ck)];
        let prev_s;
        if let Some(pr) = &prev {
            prev_s = pr.to_str().unwrap().to_string();
            args.extend(["--from-checkpoint", &prev_s]);
        }
        let o = run(&args);
        assert_eq!(code(&o), 0, "stage {stage}: {}", stderr(&o));
        prev = Some(ck.join(format!("stage{stage}.ckpt")));
    }
    Trained {
        ck3: prev.unwrap(),
        _dir: dir,
        data,
        config,
        root,
    }
}

#[test]
fn training_chain_traces_determinism_and_editing() {
    let a = train_chain("3", "ck");
    let b = train_chain("3", "ck");

    for (stage, parts) in [
        (1, "llm,text_feature,image_feature"),
        (2, "llm,sd,target_image_feature"),
        (3, "target_image_feature,sd"),
    ] {
        let name = format!("ck/stage{stage}_trace.csv");
        let trace = fs::read_to_string(a.root.join(&name)).unwrap();
        assert_eq!(trace.lines().next().unwrap(), format!("step,stage,total,{parts}"));
        let ck = format!("ck/stage{stage}.ckpt");
        assert_eq!(fs::read(a.root.join(&ck)).unwrap(), fs::read(b.root.join(&ck)).unwrap());
        assert_eq!(trace, fs::read_to_string(b.root.join(&name)).unwrap());
    }

    let manifest = fs::read_to_string(a.data.join("manifest.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    let src = a.data.join(first["src_path"].as_str().unwrap());
    let out = |name: &str| a.root.join(name);
    let edit = |lambda: &str, seed: &str, dest: &Path| {
        run(&[
            "edit", "--checkpoint", p(&a.ck3), "--image", p(&src), "--instruction", "remove the red circle.",
            "--lambda", lambda, "--seed", seed, "--steps", "20", "--out", p(dest),
        ])
    };
    for (lambda, seed, name) in [("1", "5", "e1.ppm"), ("1", "5", "e1b.ppm"), ("0", "5", "e0.ppm")] {
        let o = edit(lambda, seed, &out(name));
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let read = |n: &str| fs::read(out(n)).unwrap();
    assert_eq!(read("e1.ppm"), read("e1b.ppm"));
    assert_ne!(read("e1.ppm"), read("e0.ppm"));
    let header = |n: &str| String::from_utf8_lossy(&read(n)[..12]).into_owned();
    assert_eq!(header("e1.ppm"), String::from_utf8_lossy(&fs::read(&src).unwrap()[..12]));

    let ck1 = a.root.join("ck/stage1.ckpt");
    let o = run(&[
        "edit", "--checkpoint", p(&ck1), "--image", p(&src), "--instruction", "remove it.", "--steps", "5", "--out",
        p(&out("early.ppm")),
    ]);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));

    let o = run(&["train", "--stage", "3", "--data", p(&a.data), "--from-checkpoint", p(&ck1), "--config", p(&a.config), "--out", p(&out("x"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("stage 2 checkpoint"), "{}", stderr(&o));

    let other = a.root.join("other.toml");
    fs::write(&other, "d_model = 32\n").unwrap();
    let o = run(&["train", "--stage", "3", "--data", p(&a.data), "--from-checkpoint", p(&a.root.join("ck/stage2.ckpt")), "--config", p(&other), "--out", p(&out("y"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("does not match"), "{}", stderr(&o));
}

#[test]
fn eval_scores_perfect_predictions_and_flags_missing_ones() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let pred = dir.path().join("pred");
    assert_eq!(code(&run(&["build-dataset", "--scenes", "2", "--out", p(&data)])), 0);
    fs::create_dir_all(&pred).unwrap();
    let manifest = fs::read_to_string(data.join("manifest.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = manifest.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    for r in &rows {
        let tgt = data.join(r["tgt_path"].as_str().unwrap());
        fs::copy(tgt, pred.join(format!("{}.ppm", r["id"].as_str().unwrap()))).unwrap();
    }
    let report = dir.path().join("report.csv");
    let o = run(&["eval", "--manifest", p(&data), "--pred", p(&pred), "--out", p(&report)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("10.000"), "{}", stdout(&o));
    assert_eq!(fs::read_to_string(&report).unwrap().lines().count(), rows.len() + 1);

    let par = dir.path().join("par.csv");
    assert_eq!(code(&run(&["eval", "--manifest", p(&data), "--pred", p(&pred), "--workers", "4", "--out", p(&par)])), 0);
    assert_eq!(fs::read(&report).unwrap(), fs::read(&par).unwrap());

    fs::remove_file(pred.join(format!("{}.ppm", rows[0]["id"].as_str().unwrap()))).unwrap();
    let o = run(&["eval", "--manifest", p(&data), "--pred", p(&pred), "--out", p(&report)]);
    assert_eq!(code(&o), 2);
    assert!(fs::read_to_string(&report).unwrap().contains("n/a"));
}

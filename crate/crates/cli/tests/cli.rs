use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use uvcgan::config::RunConfig;
use uvcgan::data::{save_image, Image};
use uvcgan::discriminator::DiscriminatorConfig;
use uvcgan::generator::GeneratorConfig;
use uvcgan::metrics::MetricReport;
use uvcgan::session::{read_log, LogRecord, CHECKPOINT_DIR, GRID_FILE, LOG_FILE};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_uvcgan-lab"));
    c.env_remove("UVCGAN_LAB_OUT");
    c
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    eprintln!("stdout:\n{}", String::from_utf8_lossy(&out.stdout));
    eprintln!("stderr:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn picture(k: usize, domain: usize, size: usize) -> Image {
    let mut v = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 / size as f64, y as f64 / size as f64);
                let s = if domain == 0 { (fx * (3 + k) as f64 + c as f64).sin() } else { (fy * (2 + k) as f64).cos() };
                v.push(0.5 + 0.4 * s);
            }
        }
    }
    Image::new(3, size, size, v)
}

fn write_dataset(root: &Path, n: usize) {
    for (dir, domain, offset) in [("trainA", 0, 0), ("trainB", 1, 0), ("testA", 0, 50), ("testB", 1, 50)] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).unwrap();
        for k in 0..n {
            save_image(&d.join(format!("{k:03}.png")), &picture(k + offset, domain, 72)).unwrap();
        }
    }
}

/// Small networks at 64-pixel crops, written as a TOML file.
fn write_config(dir: &Path, data: &Path) -> PathBuf {
    let mut c = RunConfig::default();
    c.generator = GeneratorConfig::small();
    c.discriminator = DiscriminatorConfig::small();
    c.data.root = Some(data.to_path_buf());
    c.data.size_scale = 4.0;
    c.train.total_iters = 3;
    c.train.checkpoint_every = 2;
    c.pretrain.total_steps = 2;
    c.pretrain.batch_size = 2;
    c.pretrain.patch_size = 8;
    c.metrics.eval_size = 64;
    c.metrics.kid_subset_size = 2;
    c.metrics.kid_n_subsets = 3;
    let p = dir.join("run.toml");
    std::fs::write(&p, c.to_toml_string()).unwrap();
    p
}

fn header(out: &Path) -> RunConfig {
    match read_log(&out.join(LOG_FILE)).unwrap().remove(0) {
        LogRecord::Header(h) => h.config,
        other => panic!("first record is not a header: {other:?}"),
    }
}

#[test]
fn malformed_config_exits_2_with_key_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let o = run(bin().args(["train", "--out"]).arg(tmp.path().join("o")).arg("--config").arg(&cfg));
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("train") && e.contains("learning_rate"), "{e}");

    let o = run(bin().args(["train", "--set", "loss.gamma=oops", "--out"]).arg(tmp.path().join("o")));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("loss.gamma"));

    let o = run(bin().args(["train", "--iters", "0", "--out"]).arg(tmp.path().join("o")));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tmp.path().join("nowhere"));
    let o = run(bin().arg("train").arg("--config").arg(&cfg).arg("--out").arg(tmp.path().join("o")));
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("nowhere"));
}

#[test]
fn oversized_kid_subset_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_dataset(&data, 4);
    let manifest = tmp.path().join("m.toml");
    std::fs::write(&manifest, "kid_subset_size = 3\nkid_n_subsets = 2\neval_size = 64\n").unwrap();
    let o = run(bin()
        .args(["evaluate", "--self-eval", "--data-root"])
        .arg(&data)
        .arg("--manifest")
        .arg(&manifest)
        .arg("--out")
        .arg(tmp.path().join("r.json")));
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn self_evaluation_writes_report_with_manifest_source() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_dataset(&data, 4);
    let manifest = tmp.path().join("m.toml");
    let text = "# calibration\nkid_subset_size = 2\nkid_n_subsets = 4\neval_size = 64\n";
    std::fs::write(&manifest, text).unwrap();
    let report = tmp.path().join("r.json");
    let o = run(bin().args(["evaluate", "--self-eval", "--data-root"]).arg(&data).arg("--manifest").arg(&manifest).arg("--out").arg(&report));
    assert!(o.status.success());
    let r: MetricReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r.self_evaluation);
    assert_eq!(r.manifest_source.as_deref(), Some(text));
    assert_eq!(r.manifest.kid_n_subsets, 4);
    assert_eq!(r.scores.len(), 2);
    assert!(r.scores.iter().all(|s| s.fid.is_finite() && s.fid >= 0.0));

    let o = run(bin().arg("report").arg(&report));
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("a_vs_a"));
}

#[test]
fn train_resume_translate_evaluate_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_dataset(&data, 3);
    let cfg = write_config(tmp.path(), &data);
    let root = tmp.path().join("runs");

    // Relative --out lands under the env var; flags override the file.
    let o = run(bin()
        .env("UVCGAN_LAB_OUT", &root)
        .args(["train", "--out", "r1", "--iters", "2", "--size-scale", "4", "--no-gp", "--seed", "7", "--config"])
        .arg(&cfg));
    assert!(o.status.success());
    let out = root.join("r1");
    let h = header(&out);
    assert_eq!(h.train.total_iters, 2);
    assert_eq!(h.seed, 7);
    assert!(!h.train.use_gp);
    assert_eq!(h.data.size_scale, 4.0);

    let o = run(bin().args(["train", "--resume", "--iters", "3", "--no-gp", "--seed", "7", "--config"]).arg(&cfg).arg("--out").arg(&out));
    assert!(o.status.success());
    let log = read_log(&out.join(LOG_FILE)).unwrap();
    assert!(log.iter().any(|r| matches!(r, LogRecord::Resume { step: 2 })));
    assert_eq!(log.last().unwrap().step(), Some(3));

    let ckpt = out.join(CHECKPOINT_DIR);
    let translate = |dest: &Path| {
        run(bin()
            .args(["translate", "--direction", "a2b", "--size", "64", "--checkpoint"])
            .arg(&ckpt)
            .arg("--input")
            .arg(data.join("testA"))
            .arg("--out")
            .arg(dest))
    };
    assert!(translate(&tmp.path().join("t1")).status.success());
    assert!(translate(&tmp.path().join("t2")).status.success());
    let mut names: Vec<String> = std::fs::read_dir(tmp.path().join("t1"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["000.png", "001.png", "002.png", GRID_FILE]);
    for n in &names {
        let a = std::fs::read(tmp.path().join("t1").join(n)).unwrap();
        let b = std::fs::read(tmp.path().join("t2").join(n)).unwrap();
        assert_eq!(a, b, "{n} differs between runs");
    }

    let report = tmp.path().join("eval.json");
    let o = run(bin().arg("evaluate").arg("--checkpoint").arg(&ckpt).arg("--data-root").arg(&data).arg("--out").arg(&report).args(["--bogus-flag"]));
    assert_eq!(o.status.code(), Some(2));
    let manifest = tmp.path().join("m.toml");
    std::fs::write(&manifest, "kid_subset_size = 2\nkid_n_subsets = 3\neval_size = 64\n").unwrap();
    let o = run(bin().arg("evaluate").arg("--checkpoint").arg(&ckpt).arg("--data-root").arg(&data).arg("--manifest").arg(&manifest).arg("--out").arg(&report));
    assert!(o.status.success());
    let r: MetricReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(!r.self_evaluation);
    assert!(r.checkpoint_hash.is_some());
    assert_eq!(r.scores.iter().map(|s| s.direction.as_str()).collect::<Vec<_>>(), ["a2b", "b2a"]);

    let o = run(bin().args(["report", "--json"]).arg(&out));
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v[0]["log"]["steps"], 3);
    assert_eq!(v[0]["log"]["resumes"], 1);
    assert_eq!(v[0]["log"]["label"], "pretrain=none gp=off idt=on");
}

#[test]
fn pretrain_then_train_from_it() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_dataset(&data, 3);
    let cfg = write_config(tmp.path(), &data);
    let pre = tmp.path().join("pre");
    let o = run(bin().arg("pretrain").arg("--config").arg(&cfg).arg("--out").arg(&pre).args(["--iters", "2", "--corpus", "same"]));
    assert!(o.status.success());
    assert_eq!(header(&pre).pretrain.total_steps, 2);

    let out = tmp.path().join("tr");
    let o = run(bin()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--iters", "1", "--pretrain", "same", "--no-idt", "--pretrained"])
        .arg(pre.join(CHECKPOINT_DIR)));
    assert!(o.status.success());
    let h = header(&out);
    assert_eq!(h.train.pretrained_checkpoint, Some(pre.join(CHECKPOINT_DIR)));
    assert!(!h.train.use_identity);

    // `same` without a checkpoint is a configuration error.
    let o = run(bin().arg("train").arg("--config").arg(&cfg).arg("--out").arg(&out).args(["--pretrain", "same"]));
    assert_eq!(o.status.code(), Some(2));
}

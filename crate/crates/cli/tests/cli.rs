use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[supernet]
cells = 2
init_channels = 4
reduction_positions = [1]
intermediate_nodes = 2
input_shape = [3, 8, 8]
classes = 2

[search]
epochs = 2
first_stage_epochs = 1
batch_size = 4
attack = { kind = "pgd", epsilon = 0.0078431372549, step_size = 0.0039215686275, steps = 1, random_init = true, seed = 0 }

[train]
epochs = 2
lr = 0.05
milestones = [1]
batch_size = 4
eval_batch_size = 8
attack = { kind = "pgd", epsilon = 0.031372549, step_size = 0.0156862745, steps = 1, random_init = true, seed = 0 }

[evaluation]
batch_size = 8
attacks = [
  { kind = "fgsm", epsilon = 0.031372549, step_size = 0.031372549, steps = 1, random_init = false, seed = 0 },
  { kind = "pgd", epsilon = 0.031372549, step_size = 0.0156862745, steps = 2, random_init = true, seed = 0 },
]

[data]
source = "synthetic"
train = 16
test = 8
extent = 8
separation = 0.8
"#;

fn advnas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advnas")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = advnas(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(advnas(&["--help"]).status.code(), Some(0));
    assert_eq!(advnas(&["search"]).status.code(), Some(2));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let r = advnas(&["search", "--out", s(&out), "--set", "search.first_stage_epochs=99"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[search]\nbogus = 1\n").unwrap();
    assert_eq!(advnas(&["search", "--config", s(&cfg), "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_data_error_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = dir.path().join("cifar.toml");
    fs::write(&cfg, "[data]\nsource = \"cifar10\"\npath = \"/nonexistent/cifar\"\n").unwrap();
    let r = advnas(&["search", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("/nonexistent/cifar"));
    assert!(!out.exists());
}

#[test]
fn search_is_reproducible_and_reportable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&advnas(&["search", "--config", s(&cfg), "--seed", "3", "--out", s(&a)]));
    ok(&advnas(&["search", "--config", s(&cfg), "--seed", "3", "--out", s(&b)]));
    let ta = tree(&a);
    assert_eq!(ta, tree(&b));
    let names: Vec<&str> = ta.iter().map(|(n, _)| n.as_str()).collect();
    for f in [
        "config.resolved.toml",
        "genotype_final.txt",
        "genotypes/epoch_001.txt",
        "genotypes/epoch_002.txt",
        "metrics.csv",
        "report.json",
        "report.txt",
    ] {
        assert!(names.contains(&f), "{f} missing from {names:?}");
    }
    let rep = dir.path().join("rep");
    let r = advnas(&["report", "--run", s(&a), "--out", s(&rep)]);
    ok(&r);
    assert_eq!(fs::read(rep.join("report.txt")).unwrap(), fs::read(a.join("report.txt")).unwrap());
    assert_eq!(fs::read(rep.join("report.json")).unwrap(), fs::read(a.join("report.json")).unwrap());
    assert_eq!(r.stdout, fs::read(a.join("report.txt")).unwrap());
    let c = dir.path().join("c");
    ok(&advnas(&["search", "--config", s(&cfg), "--seed", "4", "--out", s(&c)]));
    assert_ne!(fs::read(c.join("metrics.csv")).unwrap(), fs::read(a.join("metrics.csv")).unwrap());
}

#[test]
fn train_attack_eval_transfer_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config(d);
    let search = d.join("search");
    ok(&advnas(&["search", "--config", s(&cfg), "--out", s(&search)]));
    let g = search.join("genotype_final.txt");

    let t1 = d.join("t1");
    ok(&advnas(&["train", "--config", s(&cfg), "--genotype", s(&g), "--out", s(&t1)]));
    for f in ["curves.csv", "checkpoints/last.ckpt", "report.txt", "report.json"] {
        assert!(t1.join(f).is_file(), "{f}");
    }
    let report = fs::read_to_string(t1.join("report.txt")).unwrap();
    assert!(report.contains("FGSM") && report.contains("PGD^2"), "{report}");

    let t2 = d.join("t2");
    ok(&advnas(&["train", "--config", s(&cfg), "--seed", "9", "--genotype", s(&g), "--out", s(&t2)]));

    let short = d.join("short");
    ok(&advnas(&["train", "--config", s(&cfg), "--set", "train.epochs=1", "--genotype", s(&g), "--out", s(&short)]));
    ok(&advnas(&["train", "--config", s(&cfg), "--genotype", s(&g), "--out", s(&short), "--resume"]));
    assert_eq!(
        fs::read(short.join("checkpoints/last.ckpt")).unwrap(),
        fs::read(t1.join("checkpoints/last.ckpt")).unwrap()
    );
    assert_eq!(fs::read(short.join("curves.csv")).unwrap(), fs::read(t1.join("curves.csv")).unwrap());
    let wrong = advnas(&[
        "train", "--config", s(&cfg), "--set", "train.lr=0.5", "--genotype", s(&g), "--out", s(&short), "--resume",
    ]);
    assert_eq!(wrong.status.code(), Some(2));

    let ck1 = t1.join("checkpoints/last.ckpt");
    let ck2 = t2.join("checkpoints/last.ckpt");
    let ev = d.join("eval");
    ok(&advnas(&["eval", "--config", s(&cfg), "--checkpoint", s(&ck1), "--out", s(&ev)]));
    let ev_json: serde_json::Value = serde_json::from_slice(&fs::read(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(ev_json["evaluation"]["natural"]["total"], 8);
    assert_eq!(ev_json["evaluation"]["attacks"].as_array().unwrap().len(), 2);

    let at = d.join("attack");
    ok(&advnas(&[
        "attack", "--config", s(&cfg), "--checkpoint", s(&ck1), "--out", s(&at), "--kind", "fgsm", "--epsilon", "0",
    ]));
    let at_json: serde_json::Value = serde_json::from_slice(&fs::read(at.join("report.json")).unwrap()).unwrap();
    assert_eq!(
        at_json["evaluation"]["attacks"][0]["counts"],
        at_json["evaluation"]["natural"],
        "FGSM with zero budget must not change accuracy"
    );

    let tr = d.join("transfer");
    ok(&advnas(&[
        "transfer", "--config", s(&cfg), "--source", s(&ck1), "--target", s(&ck1), "--out", s(&tr), "--steps", "2",
    ]));
    let tj: serde_json::Value = serde_json::from_slice(&fs::read(tr.join("report.json")).unwrap()).unwrap();
    assert_eq!(tj["transfer"], tj["white_box"]);
    let tr2 = d.join("transfer2");
    ok(&advnas(&["transfer", "--config", s(&cfg), "--source", s(&ck2), "--target", s(&ck1), "--out", s(&tr2)]));

    let rep = advnas(&["report", "--run", s(&t1)]);
    ok(&rep);
    assert!(String::from_utf8_lossy(&rep.stdout).contains("train_adv"));
    assert_eq!(advnas(&["report", "--run", s(d)]).status.code(), Some(3));
    let missing = advnas(&["eval", "--checkpoint", s(&d.join("nope.ckpt")), "--out", s(&d.join("x"))]);
    assert_eq!(missing.status.code(), Some(3));
}

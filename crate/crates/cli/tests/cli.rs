use std::path::Path;
use std::process::Command;

const TINY: &str = "seed = 3
[corpus]
groups = 3
images_per_group = 2
width = 256
height = 256
[svm]
epochs = 5
[suite]
manipulations = [\"blur:0.5\"]
[cnn]
max_train_patches = 8
[cnn.train]
epochs = 1
batch_size = 4
";

fn srmnet(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_srmnet")).args(args).output().unwrap()
}

fn run_suite(config: &Path, out: &Path) {
    let o = srmnet(&[
        "suite",
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn suite_output_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_suite(&config, &a);
    run_suite(&config, &b);
    let table = std::fs::read_to_string(a.join("suite.tsv")).unwrap();
    assert!(table.starts_with("manipulation\tparameter\tmethod\t"));
    assert_eq!(table.lines().count(), 3);
    assert_eq!(table, std::fs::read_to_string(b.join("suite.tsv")).unwrap());
    let mut names: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    for name in &names {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    assert!(names.iter().any(|n| n.starts_with("loss_")));
}

#[test]
fn unknown_config_key_fails() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[svm]\nlamda = 1.0\n").unwrap();
    let out = dir.path().join("out");
    let o = srmnet(&[
        "suite",
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(!out.join("suite.tsv").exists());
}

use std::fs;
use std::process::{Command, Output};

fn mex3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mex3d")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&mex3d(&[])), 1);
    assert_eq!(code(&mex3d(&["eval", "--bogus"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "lbp.radii=1,1\n").unwrap();
    let o = mex3d(&["eval", "--config", conf.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("lbp.radii"));
}

#[test]
fn missing_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = mex3d(&["eval", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn reliability_table() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("coders.csv");
    fs::write(&f, "sample,coder1,coder2\na,1+2,1+2\nb,4,4+7\nc,4,9\n").unwrap();
    let o = mex3d(&["reliability", f.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        String::from_utf8(o.stdout).unwrap(),
        "sample,reliability\na,1.000000\nb,0.666667\nc,0.000000\npooled,0.666667\n"
    );
}

#[test]
fn synth_then_preprocess_with_failures_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let conf = dir.path().join("run.conf");
    fs::write(
        &conf,
        format!(
            "dataset.root={}\nsynth.subjects=2\nsynth.samples=2\nsynth.classes=2\nsynth.points=800\nsynth.width=64\nsynth.height=64\n",
            data.display()
        ),
    )
    .unwrap();
    let c = conf.to_str().unwrap();
    let o = mex3d(&["synth", "--config", c, "--seed", "3", "--out", data.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(data.join("index.csv")).unwrap().lines().count(), 5);

    fs::remove_file(data.join("s01").join("m02").join("landmarks2d.csv")).unwrap();
    let work = dir.path().join("work");
    let o = mex3d(&["preprocess", "--config", c, "--workers", "1", "--out", work.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("3 of 4 samples"));
}

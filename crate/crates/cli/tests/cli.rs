use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use evcomplete::event::{denormalize, SensorGeometry};
use evcomplete::io::{read_evcl, write_evcl};
use evcomplete::pipeline::read_pairs;

const TINY: &str = "\
seed = 3
slices = 10
test_slices = 3
n_dense = 32
n_sparse = 8
levels = 2
widths = 8,16
cuboid_r = 0.4,0.8
max_k = 6
step_embed_dim = 8
diffusion_steps = 50
fast_steps = 5
epochs_edn = 2
epochs_ern = 2
lr = 1e-3
batch_size = 4
";

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_evcomplete"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed");
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    run(dir, args).status.code().expect("exit code")
}

/// Runs every stage into `dir` and returns the eval summary line.
fn full_run(dir: &Path) -> String {
    fs::write(dir.join("run.cfg"), TINY).unwrap();
    let base = ["--config", "run.cfg", "--threads", "1"];
    let with = |extra: &[&str]| -> Vec<String> {
        extra.iter().chain(&base).map(|s| s.to_string()).collect()
    };
    let call = |extra: &[&str]| {
        let args = with(extra);
        ok(dir, &args.iter().map(String::as_str).collect::<Vec<_>>())
    };
    call(&["gen-data", "--out", "data"]);
    let log = call(&["train-edn", "data", "--out", "edn.edr"]);
    assert!(log.lines().any(|l| l.starts_with("stage=edn epoch=2 loss=")), "{log}");
    call(&["cache-coarse", "data", "edn.edr", "--out", "coarse.evcl"]);
    let log = call(&["train-ern", "data", "coarse.evcl", "--out", "ern.edr"]);
    assert!(log.lines().any(|l| l.starts_with("stage=ern epoch=0 loss=")), "{log}");
    let summary = call(&["eval", "data", "edn.edr", "ern.edr", "--out", "report.csv"]);

    let g = SensorGeometry::new(34, 34).unwrap();
    let sparse: Vec<_> = read_pairs(&dir.join("data"), "test")
        .unwrap()
        .iter()
        .flat_map(|p| denormalize(&p.sparse, g, p.anchor).into_events())
        .collect();
    write_evcl(&dir.join("sparse.evcl"), &sparse, g).unwrap();
    call(&["complete", "sparse.evcl", "edn.edr", "ern.edr", "--out", "dense.evcl"]);
    call(&["render", "dense.evcl", "--out", "dense.ppm"]);
    summary
}

#[test]
fn end_to_end_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = full_run(a.path());
    let sb = full_run(b.path());
    assert_eq!(sa, sb);
    assert!(sa.contains("samples=3"), "{sa}");
    for f in ["edn.edr", "ern.edr", "coarse.evcl", "report.csv", "dense.evcl", "dense.ppm"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
    assert!(a.path().join("edn.edr.cfg").exists());

    let (dense, _) = read_evcl(&a.path().join("dense.evcl")).unwrap();
    let (sparse, _) = read_evcl(&a.path().join("sparse.evcl")).unwrap();
    assert_eq!(dense.len(), 32 * (sparse.len() / 8));
    assert!(dense.windows(2).all(|w| w[0].t <= w[1].t));
    let csv = fs::read_to_string(a.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(fs::read(a.path().join("dense.ppm")).unwrap().starts_with(b"P6\n34 34\n255\n"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.cfg"), "no_such_key = 1\n").unwrap();
    assert_eq!(code(d, &["--config", "bad.cfg", "gen-data", "--out", "x"]), 2);
    assert_eq!(code(d, &["--config", "missing.cfg", "gen-data", "--out", "x"]), 2);
    assert_eq!(code(d, &["--steps", "0", "gen-data", "--out", "x"]), 2);

    fs::write(d.join("junk.evcl"), b"not events").unwrap();
    assert_eq!(code(d, &["render", "junk.evcl", "--out", "x.ppm"]), 3);
    assert_eq!(code(d, &["train-edn", "nowhere", "--out", "e.edr"]), 3);

    fs::write(d.join("run.cfg"), TINY).unwrap();
    ok(d, &["--config", "run.cfg", "gen-data", "--out", "data"]);
    assert_eq!(code(d, &["--config", "run.cfg", "cache-coarse", "data", "none.edr", "--out", "c.evcl"]), 3);

    fs::write(d.join("hot.cfg"), format!("{TINY}\n").replace("lr = 1e-3", "lr = 1e39")).unwrap();
    let out = run(d, &["--config", "hot.cfg", "train-edn", "data", "--out", "hot.edr"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stdout).contains("event=divergence"));
    // The last good parameters are still written.
    assert!(d.join("hot.edr").exists());
}

#[test]
fn slice_and_render_verbs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("events.csv"), "# W=4 H=4\n0,1,1,1\n5,2,2,0\n9,3,3,1\n12,0,0,1\n20,1,2,0\n").unwrap();
    let log = ok(d, &["slice", "events.csv", "--size", "2", "--out", "slices.evcl"]);
    assert!(log.contains("slices=2"), "{log}");
    ok(d, &["render", "events.csv", "--out", "img.ppm"]);
    let img = fs::read(d.join("img.ppm")).unwrap();
    assert_eq!(img.len(), "P6\n4 4\n255\n".len() + 48);
}

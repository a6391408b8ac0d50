use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use feddm::config::RunManifest;

const TINY: &str = "\
[federation]
clients = 4
per_round = 2
rounds = 2
local_epochs = 1
mu = 0.1
batch_size = 32
seed = 3

[diffusion]
steps = 15

[model]
hidden = 8

[data]
samples = 200

[eval]
samples = 128

[output]
samples = 20
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_feddm"));
    c.env("FEDDM_LOG", "error");
    c
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.ini");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path
}

fn run_dirs(out: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
    v.sort();
    v
}

fn code(c: &mut Command) -> i32 {
    c.output().unwrap().status.code().unwrap()
}

#[test]
fn single_run_and_rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(code(bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(out)), 0);
    }
    let dirs = run_dirs(&a);
    assert_eq!(dirs.len(), 1);
    let name = dirs[0].file_name().unwrap();
    for file in ["metrics.csv", "samples.csv", "checkpoint.bin"] {
        let x = fs::read(a.join(name).join(file)).unwrap();
        let y = fs::read(b.join(name).join(file)).unwrap();
        assert_eq!(x, y, "{file} differs between reruns");
    }
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(dirs[0].join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.seed, 3);
    let metrics = fs::read_to_string(dirs[0].join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "round,variant,mean_local_loss,fid,bytes_up,bytes_down,wall_time");
    assert_eq!(metrics.lines().count(), 4);
}

#[test]
fn grid_of_variants_and_skews() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "\n[grid]\nvariant = vanilla, prox, quant\nbits = 8\nskew = 1, 3\n");
    let out = tmp.path().join("out");
    assert_eq!(code(bin().args(["run", "--jobs", "2", "--config"]).arg(&cfg).arg("--out").arg(&out)), 0);
    let dirs = run_dirs(&out);
    assert_eq!(dirs.len(), 6);
    let manifests: Vec<String> = dirs.iter().map(|d| fs::read_to_string(d.join("manifest.json")).unwrap()).collect();
    for (i, m) in manifests.iter().enumerate() {
        for n in &manifests[i + 1..] {
            assert_ne!(m, n);
        }
    }
    assert!(dirs.iter().any(|d| d.join("checkpoint.quant.bin").is_file()));

    assert_eq!(code(bin().args(["report", "--out"]).arg(&out)), 0);
    let report = fs::read_to_string(out.join("report.md")).unwrap();
    assert_eq!(report.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| run")).count(), 6);
    let svgs = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg")).count();
    assert_eq!(svgs, 6);
}

#[test]
fn report_mebibytes_are_exact_and_quant_is_a_quarter() {
    let tmp = tempfile::tempdir().unwrap();
    // wide layers so per-tensor headers are negligible next to the codes
    let cfg = write_config(tmp.path(), "\n[grid]\nvariant = vanilla, quant\nbits = 8\n").to_path_buf();
    let text = fs::read_to_string(&cfg).unwrap().replace("hidden = 8", "hidden = 256, 256");
    fs::write(&cfg, text).unwrap();
    let out = tmp.path().join("out");
    assert_eq!(code(bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(&out)), 0);
    assert_eq!(code(bin().args(["report", "--out"]).arg(&out)), 0);
    let runs = feddm::report::load_runs(&out).unwrap();
    let mib = |variant: &str| {
        let r = runs.iter().find(|r| r.manifest.name.starts_with(variant)).unwrap();
        let bytes: u64 = r.rows.iter().map(|row| row.bytes_up + row.bytes_down).sum();
        assert_eq!(r.mebibytes(), bytes as f64 / 1_048_576.0);
        r.mebibytes()
    };
    let ratio = mib("quant") / mib("vanilla");
    assert!((ratio - 0.25).abs() < 1e-3, "{ratio}");
}

#[test]
fn report_of_one_run_has_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("out");
    assert_eq!(code(bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(&out)), 0);
    assert_eq!(code(bin().args(["report", "--out"]).arg(&out)), 0);
    let table = feddm::report::summary_table(&feddm::report::load_runs(&out).unwrap());
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("out");
    assert_eq!(code(bin().args(["run", "--seed", "77", "--config"]).arg(&cfg).arg("--out").arg(&out)), 0);
    let dir = &run_dirs(&out)[0];
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.seed, 77);
    assert_eq!(manifest.run.experiment.fed.seed, 77);
}

#[test]
fn sample_and_partition_subcommands() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "\n[partition]\nmode = skew2\n");
    let out = tmp.path().join("out");
    assert_eq!(code(bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(&out)), 0);
    let ck = run_dirs(&out)[0].join("checkpoint.bin");
    let samples = tmp.path().join("s.csv");
    assert_eq!(code(bin().args(["sample", "--samples", "7", "--checkpoint"]).arg(&ck).arg("--out").arg(&samples)), 0);
    let text = fs::read_to_string(&samples).unwrap();
    assert_eq!(text.lines().count(), 8);
    assert_eq!(text.lines().next().unwrap(), "x1,x2");

    let part = tmp.path().join("part");
    assert_eq!(code(bin().args(["partition", "--config"]).arg(&cfg).arg("--out").arg(&part)), 0);
    let assignment = fs::read_to_string(part.join("assignment.csv")).unwrap();
    assert_eq!(assignment.lines().count(), 201);
    assert!(part.join("data.csv").is_file());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    assert_eq!(code(bin().args(["run", "--config", "/definitely/missing.ini", "--out"]).arg(&out)), 1);
    let bad = write_config(tmp.path(), "\n[federation]\nwhatever = 1\n");
    let o = bin().args(["run", "--config"]).arg(&bad).arg("--out").arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("whatever"));
    assert_eq!(code(bin().arg("frobnicate")), 1);
    assert_eq!(code(bin().args(["report", "--out"]).arg(tmp.path())), 2);
    let garbage = tmp.path().join("garbage.bin");
    fs::write(&garbage, b"nope").unwrap();
    assert_eq!(code(bin().args(["sample", "--out", "/tmp/never.csv", "--checkpoint"]).arg(&garbage)), 2);
    assert_eq!(code(bin().arg("--help")), 0);
}

#[test]
fn verify_passes_on_a_clean_build() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin().args(["verify", "--out"]).arg(tmp.path()).output().unwrap();
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 6);
    assert!(tmp.path().join("verify.txt").is_file());
}

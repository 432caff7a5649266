use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn terrafit(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_terrafit"));
    cmd.args(args);
    match threads {
        Some(n) => cmd.env("TERRAFIT_THREADS", n),
        None => cmd.env_remove("TERRAFIT_THREADS"),
    };
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A small site so the full pipeline runs in well under a second.
fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    let text = format!(
        "# small site\ninput = {data}\noutput = {out}\nsim_length = 30\nsim_width = 5\nlanes = 2\n\
         dx = 1\ndy = 1\nx_min = 0\nx_max = 30\ny_min = 0\ny_max = 5\nsamples = 40\n{extra}",
        data = dir.join("data").display(),
        out = dir.join("out").display(),
    );
    fs::write(&path, text).unwrap();
    path
}

fn simulate_into(dir: &Path, cfg: &Path) {
    let out = terrafit(
        &["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.join("data").to_str().unwrap()],
        None,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn simulate_default_writes_six_files_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let out = terrafit(&["simulate", "--seed", "7", "--out", dir.to_str().unwrap()], None);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let fa = csv_files(&a);
    assert_eq!(fs::read_dir(&a).unwrap().count(), 6);
    assert_eq!(fa.len(), 6);
    assert_eq!(fa, csv_files(&b));
    assert!(fa.iter().any(|(n, _)| n == "rmv_cell1_layer3.csv"));
    assert!(fa.iter().any(|(n, _)| n == "truth_cell1_layer1.csv"));
}

#[test]
fn config_errors_exit_two_with_the_key_name() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "samples = 10\nsmoothing_levels = 8,16\n").unwrap();
    let out = terrafit(&["pipeline", "--config", cfg.to_str().unwrap()], None);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("smoothing_levels"), "{}", stderr(&out));

    let out = terrafit(&["fit", "--mode", "wavelet"], None);
    assert_eq!(code(&out), 2);
    let out = terrafit(&["simulate"], Some("zero"));
    assert_eq!(code(&out), 2);
    let out = terrafit(&["fit"], None);
    assert_eq!(code(&out), 2, "missing input is a configuration problem");
}

#[test]
fn runtime_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("missing.cfg");
    fs::write(&cfg, format!("input = {}\n", tmp.path().join("nope.csv").display())).unwrap();
    let out = terrafit(&["fit", "--config", cfg.to_str().unwrap()], None);
    assert_eq!(code(&out), 1, "{}", stderr(&out));

    let grid = tmp.path().join("bad_grid.csv");
    fs::write(&grid, "3,2,0,0\n1,2,3\n").unwrap();
    let out = terrafit(&["render", grid.to_str().unwrap()], None);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("malformed grid"), "{}", stderr(&out));
}

#[test]
fn pipeline_emits_fields_and_three_by_four_maps_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    simulate_into(tmp.path(), &cfg);
    let out = terrafit(&["pipeline", "--config", cfg.to_str().unwrap()], None);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let run = tmp.path().join("out");
    let cell = run.join("cell_1");
    let names: Vec<String> = csv_files(&cell).into_iter().map(|(n, _)| n).collect();
    let maps: Vec<&String> = names.iter().filter(|n| n.starts_with("cred_")).collect();
    assert_eq!(maps.len(), 12, "{names:?}");
    for t in 1..=3 {
        for l in ["8", "16", "1000", "inf"] {
            assert!(names.contains(&format!("cred_layer{t}_lambda{l}.csv")));
            assert!(cell.join(format!("cred_layer{t}_lambda{l}.ppm")).exists());
        }
        assert!(names.contains(&format!("field_layer{t}.csv")));
        assert!(cell.join(format!("field_layer{t}.legend.txt")).exists());
    }
    let manifest = fs::read_to_string(run.join("manifest.json")).unwrap();
    assert!(manifest.contains("config_sha256"));
    assert!(manifest.contains("cell_1/fit.json"));

    // Rerun from the recorded configuration, on one worker thread.
    let used = run.join("config.used");
    let rerun = tmp.path().join("rerun");
    let out = terrafit(
        &["pipeline", "--config", used.to_str().unwrap(), "--out", rerun.to_str().unwrap()],
        Some("1"),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(csv_files(&cell), csv_files(&rerun.join("cell_1")));
    assert_eq!(fs::read(cell.join("fit.json")).unwrap(), fs::read(rerun.join("cell_1/fit.json")).unwrap());
}

#[test]
fn staged_commands_reproduce_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "mode = detail\n");
    simulate_into(tmp.path(), &cfg);
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&terrafit(&["pipeline", "--config", c], None)), 0);
    let staged = tmp.path().join("staged");
    let s = staged.to_str().unwrap();
    for cmd in ["fit", "sample", "scalespace"] {
        let out = terrafit(&[cmd, "--config", c, "--out", s], None);
        assert_eq!(code(&out), 0, "{cmd}: {}", stderr(&out));
    }
    assert_eq!(csv_files(&tmp.path().join("out/cell_1")), csv_files(&staged.join("cell_1")));
}

#[test]
fn carryover_off_matches_single_layer_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c = 0\n");
    simulate_into(tmp.path(), &cfg);
    let joint = tmp.path().join("out/cell_1");
    assert_eq!(code(&terrafit(&["pipeline", "--config", cfg.to_str().unwrap()], None)), 0);
    let joint_files = csv_files(&joint);
    for t in 1..=3 {
        let single_cfg = write_config(tmp.path(), &format!("c = 0\nlayers = {t}\n"));
        let single = tmp.path().join(format!("single{t}"));
        let out = terrafit(
            &["pipeline", "--config", single_cfg.to_str().unwrap(), "--out", single.to_str().unwrap()],
            None,
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let single_files = csv_files(&single.join("cell_1"));
        assert_eq!(single_files.len(), 4 + 3, "4 maps, the field, mean and sd");
        for (name, bytes) in single_files {
            let joint_bytes = &joint_files.iter().find(|(n, _)| *n == name).expect("same file in joint run").1;
            assert_eq!(&bytes, joint_bytes, "{name}");
        }
    }
}

#[test]
fn render_writes_ppm_and_legend() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = tmp.path().join("g.csv");
    fs::write(&grid, "2,2,0,0,1,1\n1,1\n1,1\n").unwrap();
    let out = terrafit(&["render", grid.to_str().unwrap(), "--scale", "3"], None);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ppm = fs::read(tmp.path().join("g.ppm")).unwrap();
    let header = b"P6\n6 6\n255\n";
    assert!(ppm.starts_with(header));
    assert!(ppm[header.len()..].chunks(3).all(|p| p == [0, 0, 255]), "all-positive grid is solid blue");
    let legend = fs::read_to_string(tmp.path().join("g.legend.txt")).unwrap();
    assert!(legend.contains("max 1"));
}

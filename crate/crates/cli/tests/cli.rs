use std::path::Path;
use std::process::{Command, Output};

use semlink_core::data::procedural_corpus;

fn semlink(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semlink")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = semlink(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_image(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("in.ppm");
    procedural_corpus(3, 16, 4).remove(2).save(&p).unwrap();
    p
}

#[test]
fn help_lists_subcommands() {
    let text = ok(&["--help"]);
    for cmd in ["train", "transmit", "sweep", "codec", "fec-bench"] {
        assert!(text.contains(cmd), "{cmd} missing");
    }
}

#[test]
fn codec_encode_decode_matches_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_image(dir.path());
    let (bin, a, b) = (dir.path().join("x.bin"), dir.path().join("a.ppm"), dir.path().join("b.ppm"));
    ok(&["codec", "encode", s(&input), s(&bin), "--quality", "75"]);
    ok(&["codec", "decode", s(&bin), s(&a)]);
    let text = ok(&["codec", "roundtrip", s(&input), s(&b), "--quality", "75"]);
    assert!(text.contains("PSNR"));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn transmit_image_stream_only() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_image(dir.path());
    let out = dir.path().join("out.ppm");
    let text = ok(&["transmit", "--input", s(&input), "--output", s(&out), "--snr-db", "12", "--trials", "3"]);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        assert_eq!(r.split(',').nth(5), Some("false"), "{r}");
    }
    assert!(out.exists());
}

#[test]
fn fec_bench_reports_each_point() {
    let text = ok(&["fec-bench", "--snr-db", "1,9", "--trials", "4", "--seed", "3"]);
    let rows: Vec<Vec<&str>> = text.lines().skip(2).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][2], "1.000000");
    assert_eq!(rows[1][2], "0.000000");
}

#[test]
fn sweep_is_reproducible_and_reports_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(
        &cfg,
        "[sweep]\nsnr_db = [3.0, 9.0]\nquality = [20]\nseeds = 2\n[data]\ncount = 2\n",
    )
    .unwrap();
    let (a, b, plots) = (dir.path().join("a.csv"), dir.path().join("b.csv"), dir.path().join("plots"));
    ok(&["sweep", "--config", s(&cfg), "--csv", s(&a), "--plot-dir", s(&plots)]);
    ok(&["sweep", "--config", s(&cfg), "--csv", s(&b)]);
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("snr_db,cbr,psnr_db,ms_ssim,corruption_rate,seed\n"));
    for m in ["cbr", "psnr_db", "ms_ssim", "corruption_rate"] {
        assert!(plots.join(format!("{m}.dat")).exists());
    }
    let c = dir.path().join("c.csv");
    ok(&["sweep", "--config", s(&cfg), "--csv", s(&c), "--trials", "1", "--snr-db", "5"]);
    assert_eq!(std::fs::read_to_string(&c).unwrap().lines().count(), 2);

    std::fs::write(&cfg, "[sweep]\nseeds = 2\nquality = \"high\"\n").unwrap();
    let out = semlink(&["sweep", "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn training_stages_run_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let (c1, c2, c3) = (dir.path().join("s1.json"), dir.path().join("s2.json"), dir.path().join("s3.json"));
    let log = dir.path().join("log.csv");
    let common = ["--steps", "2", "--images", "4", "--snr-db", "4,8"];
    let mut args = vec!["train", "--stage", "1", "--out", s(&c1), "--log", s(&log)];
    args.extend(common);
    ok(&args);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 3);

    let mut skip = vec!["train", "--stage", "3", "--resume", s(&c1), "--out", s(&c3)];
    skip.extend(common);
    let out = semlink(&skip);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage"));

    let mut args = vec!["train", "--stage", "2", "--resume", s(&c1), "--out", s(&c2)];
    args.extend(common);
    assert!(ok(&args).contains("frozen parameters unchanged"));

    let input = write_image(dir.path());
    let text = ok(&["transmit", "--input", s(&input), "--model", s(&c2), "--snr-db", "6"]);
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert!(row[7].parse::<usize>().unwrap() > 0, "no semantic symbols: {row:?}");
}

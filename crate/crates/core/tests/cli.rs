use std::path::Path;
use std::process::Command;

fn run(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fracheat")).args(args).output().unwrap()
}

fn out_dir(d: &Path) -> &str {
    d.to_str().unwrap()
}

#[test]
fn bad_a_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["--a", "1.5", "--out", out_dir(d.path()), "spectrum"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["--a", "0.1", "--s", "0.2", "--out", out_dir(d.path()), "spectrum"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn spectrum_lists_the_kappa_one_eigenspace() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["--a", "0.3", "--kappa", "1", "--out", out_dir(d.path()), "spectrum"]);
    assert!(o.status.success());
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("spectrum.json")).unwrap()).unwrap();
    let idx = v["result"]["indices"].as_array().unwrap();
    assert_eq!(idx.len(), 2);
    assert!(idx.iter().all(|i| i["eigenvalue"].as_f64().unwrap() == 1.0));
}

#[test]
fn frequency_of_theta20_is_one() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["--a", "-0.4", "--fixture", "theta20", "--out", out_dir(d.path()), "frequency"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(d.path().join("frequency.csv")).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "N0").unwrap();
    let mut rows = 0;
    for l in lines {
        let n0: f64 = l.split(',').nth(col).unwrap().parse().unwrap();
        assert!((n0 - 1.0).abs() < 1e-6, "{n0}");
        rows += 1;
    }
    assert!(rows > 0);
}

#[test]
fn solve_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"params":{"a":0.2},"grid":{"x_axes":[{"lo":-1,"hi":1,"cells":16}],
            "y_max":1,"y_cells":8,"t_start":0,"t_end":0.1,"steps":10}}"#,
    )
    .unwrap();
    let mut outs = Vec::new();
    for k in 0..2 {
        let dir = d.path().join(format!("run{k}"));
        let o = run(&["--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap(), "solve"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outs.push(std::fs::read(dir.join("solution.bin")).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
    let bin = &outs[0];
    assert_eq!(&bin[..8], b"FHGRID01");
    // header is 104 bytes for N = 1; 11 levels of 17 x 8 nodes follow
    let count = u64::from_le_bytes(bin[96..104].try_into().unwrap());
    assert_eq!(count, 11 * 17 * 8);
    assert_eq!(bin.len(), 104 + 8 * count as usize);
}

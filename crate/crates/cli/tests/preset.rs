use std::path::Path;
use std::process::Command;
use std::time::Instant;

// Kept in its own target so nothing else competes for the core while the
// run is timed.
#[test]
fn synthetic_preset_trains_within_five_minutes() {
    let dir = tempfile::tempdir().unwrap();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.json");
    let started = Instant::now();
    let o = Command::new(env!("CARGO_BIN_EXE_prototransfer"))
        .current_dir(dir.path())
        .args(["--threads", "1", "pretrain", "--progress-every", "0", "-o", "syn.ptt1", "-c"])
        .arg(&config)
        .output()
        .unwrap();
    let secs = started.elapsed().as_secs_f64();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8_lossy(&o.stdout);
    let acc: f64 = out
        .split("final smoothed accuracy ")
        .nth(1)
        .and_then(|s| s.split(',').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(acc >= 0.95, "final smoothed accuracy {acc}");
    assert!(secs <= 300.0, "took {secs:.0}s");
}

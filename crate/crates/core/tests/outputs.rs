use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use voipsim::engine::SimTime;
use voipsim::radio::Standard;
use voipsim::scenario::{
    emit_comparison, emit_run, run_pair, shipped_scenario, Comparison, TIMELINE_COLUMNS,
};

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn short_pair(seed: u64) -> Comparison {
    run_pair(
        &shipped_scenario(),
        Standard::A,
        Standard::B,
        seed,
        Some(SimTime::from_secs(75)),
    )
    .unwrap()
}

#[test]
fn comparison_file_set_and_schemas() {
    let c = short_pair(1);
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    emit_comparison(&c, &out).unwrap();
    let files = snapshot(&out);

    for f in [
        "comparison.csv",
        "report.txt",
        "a/summary.csv",
        "b/session_timeline.csv",
        "a/series/mac.retx_ack_timeout.csv",
    ] {
        assert!(files.contains_key(f), "missing {f}");
    }
    for (name, body) in files.iter().filter(|(n, _)| n.contains("series/")) {
        let text = String::from_utf8(body.clone()).unwrap();
        assert!(text.starts_with("t_seconds,value,unit\n"), "{name}");
    }
    let timeline = String::from_utf8(files["a/session_timeline.csv"].clone()).unwrap();
    let mut lines = timeline.lines();
    assert_eq!(lines.next().unwrap(), TIMELINE_COLUMNS.join(","));
    assert_eq!(lines.count(), 5);
    // nothing left behind next to the output
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 1);
}

#[test]
fn rerun_is_byte_identical_and_replaces_old_output() {
    let tmp = tempfile::tempdir().unwrap();
    let (d1, d2) = (tmp.path().join("one"), tmp.path().join("two"));
    emit_comparison(&short_pair(7), &d1).unwrap();
    emit_comparison(&short_pair(7), &d2).unwrap();
    assert_eq!(snapshot(&d1), snapshot(&d2));

    let other = short_pair(8);
    emit_comparison(&other, &d2).unwrap();
    assert_ne!(snapshot(&d1), snapshot(&d2));
}

#[test]
fn unwritable_target_fails_without_partial_output() {
    let c = short_pair(1);
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    assert!(emit_run(&c.first, &blocker.join("out")).is_err());
    assert_eq!(fs::read(&blocker).unwrap(), b"x");
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 1);
}

#[test]
fn swapping_arms_gives_reciprocal_ratios() {
    let c = short_pair(2);
    let s = c.swapped();
    for (r, q) in c.rows.iter().zip(&s.rows) {
        assert_eq!(r.metric, q.metric);
        assert_eq!((r.first, r.second), (q.second, q.first));
        assert_eq!(r.holds, q.holds, "{}", r.metric);
        if let (Some(a), Some(b)) = (r.ratio, q.ratio) {
            assert!((a * b - 1.0).abs() < 1e-12, "{}", r.metric);
        }
    }
}

#[test]
fn self_comparison_has_unit_ratios_and_no_verdicts() {
    let c = run_pair(
        &shipped_scenario(),
        Standard::B,
        Standard::B,
        4,
        Some(SimTime::from_secs(30)),
    )
    .unwrap();
    for r in &c.rows {
        assert_eq!(r.holds, None);
        if let Some(x) = r.ratio {
            assert_eq!(x, 1.0, "{}", r.metric);
        }
    }
    assert!(c.orderings_hold());
}

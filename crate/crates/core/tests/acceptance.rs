//! One line per acceptance criterion on stderr, then the verdict.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voipsim::engine::SimTime;
use voipsim::mac::simulate_saturation;
use voipsim::metrics::RunReport;
use voipsim::radio::{PhyProfile, Standard};
use voipsim::scenario::{emit_comparison, run_comparison, shipped_scenario, Comparison};
use voipsim::sip::{CallId, DialogInput, DialogState, SipDialog};
use voipsim::stack::encapsulate;
use voipsim::voip::{Verdict, FRAME_BYTES};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn report(n: u32, title: &str, pass: bool, detail: String) {
    // straight to stderr so the line survives output capture
    let line = format!(
        "criterion {n:>2} [{}] {title}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

fn comparisons() -> &'static BTreeMap<u64, Comparison> {
    static RUNS: OnceLock<BTreeMap<u64, Comparison>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let cfg = shipped_scenario();
        std::thread::scope(|s| {
            let handles: Vec<_> = SEEDS
                .iter()
                .map(|&seed| {
                    let cfg = &cfg;
                    s.spawn(move || {
                        (
                            seed,
                            run_comparison(cfg, seed).expect("shipped scenario runs"),
                        )
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    })
}

fn shipped() -> &'static Comparison {
    &comparisons()[&shipped_scenario().seed]
}

fn arms(c: &Comparison) -> (&RunReport, &RunReport) {
    (c.arm(Standard::A).unwrap(), c.arm(Standard::B).unwrap())
}

fn scalar(r: &RunReport, key: &str) -> f64 {
    r.scalar(key)
        .unwrap_or_else(|| panic!("{key} missing from report"))
}

#[test]
fn c01_media_packet_size() {
    let ip = encapsulate(FRAME_BYTES, true).unwrap().wire_bytes();
    report(
        1,
        "G.711 packet size at IP",
        ip == 200,
        format!("{ip} B (160 + 12 + 8 + 20)"),
    );
}

// Frozen from an independent evaluation of the saturation fixed point
// (B profile, 1000-byte payload, basic access).
const SATURATION_ORACLE: [(usize, f64); 3] = [
    (2, 0.485091862576),
    (5, 0.488685004496),
    (10, 0.470010775509),
];

#[test]
fn c02_saturation_matches_oracle() {
    let phy = PhyProfile::dot11b();
    let mut pass = true;
    let mut parts = Vec::new();
    for (n, s) in SATURATION_ORACLE {
        let run = simulate_saturation(n, &phy, 1000, SimTime::from_secs(30), 11);
        let rel = (run.throughput - s).abs() / s;
        pass &= rel <= 0.10;
        parts.push(format!(
            "n={n} {:.4} vs {:.4} ({:+.1}%)",
            run.throughput,
            s,
            100.0 * (run.throughput - s) / s
        ));
    }
    report(
        2,
        "DCF saturation vs analytical model",
        pass,
        parts.join(", "),
    );
}

#[test]
fn c03_ftp_peaks() {
    let (a, b) = arms(shipped());
    let mut pass = true;
    let mut parts = Vec::new();
    for key in ["ftp_server_peak_bps", "ftp_client_peak_bps"] {
        let (pa, pb) = (scalar(a, key), scalar(b, key));
        pass &= pa > 0.0 && pb > 0.0 && pa >= 2.0 * pb;
        parts.push(format!(
            "{key} a={:.2} Mb/s b={:.2} Mb/s",
            pa / 1e6,
            pb / 1e6
        ));
    }
    report(3, "FTP peak throughput a >= 2b", pass, parts.join(", "));
}

#[test]
fn c04_cbr_delay_and_throughput() {
    let (a, b) = arms(shipped());
    let (da, db) = (
        scalar(a, "cbr_mean_delay_ms"),
        scalar(b, "cbr_mean_delay_ms"),
    );
    let (ta, tb) = (
        scalar(a, "cbr_throughput_bps"),
        scalar(b, "cbr_throughput_bps"),
    );
    let same = (ta - tb).abs() <= 0.01 * ta.max(tb);
    let pass = db >= 1.5 * da && (1.0..=50.0).contains(&da) && (2.0..=100.0).contains(&db) && same;
    report(
        4,
        "CBR delay b >= 1.5a, throughput equal",
        pass,
        format!("delay a={da:.3} ms b={db:.3} ms, throughput a={ta:.0} b={tb:.0} bps"),
    );
}

#[test]
fn c05_jitter_drops_and_verdicts() {
    let (a, b) = arms(shipped());
    let (ja, jb) = (scalar(a, "jitter_drops"), scalar(b, "jitter_drops"));
    let all_good_a = a.voip.iter().all(|v| v.quality.verdict == Verdict::Good);
    let degraded: Vec<&str> = b
        .voip
        .iter()
        .filter(|vb| {
            let va = a.voip.iter().find(|va| va.id == vb.id).expect("same flows");
            vb.quality.loss_fraction > va.quality.loss_fraction
                || (vb.quality.verdict == Verdict::Poor && va.quality.verdict == Verdict::Good)
        })
        .map(|v| v.id.as_str())
        .collect();
    let pass = jb >= 10.0 && jb >= 5.0 * ja.max(1.0) && all_good_a && !degraded.is_empty();
    report(
        5,
        "jitter-buffer drops and call quality",
        pass,
        format!("drops a={ja} b={jb}, a all good={all_good_a}, b degraded={degraded:?}"),
    );
}

#[test]
fn c06_ack_timeout_retransmissions() {
    let (a, b) = arms(shipped());
    let (ra, rb) = (
        scalar(a, "mac_retx_ack_timeout"),
        scalar(b, "mac_retx_ack_timeout"),
    );
    report(
        6,
        "ACK-timeout retransmissions b > a",
        rb > ra && rb >= 10.0,
        format!("a={ra} b={rb}"),
    );
}

#[test]
fn c07_fifo_wait() {
    let (a, b) = arms(shipped());
    let (wa, wb) = (scalar(a, "fifo_avg_wait_ms"), scalar(b, "fifo_avg_wait_ms"));
    report(
        7,
        "FIFO time in queue b >= 2a",
        wb >= 2.0 * wa,
        format!("a={wa:.3} ms b={wb:.3} ms"),
    );
}

#[test]
fn c08_session_timeline() {
    let (a, b) = arms(shipped());
    let cfg = shipped_scenario();
    let byes: Vec<f64> = cfg
        .flows
        .iter()
        .filter_map(|f| match f {
            voipsim::config::FlowSpec::Voip(v) => Some(v.bye_at_s),
            _ => None,
        })
        .collect();
    let common_bye = byes[0];
    let mut problems = Vec::new();
    if byes.iter().any(|&x| x != common_bye) {
        problems.push("scenario BYE times differ".to_string());
    }
    for arm in [a, b] {
        if arm.timeline.len() != 5 {
            problems.push(format!("{}: {} dialogs", arm.phy, arm.timeline.len()));
        }
        for t in &arm.timeline {
            let init = t.initiation_s.unwrap_or(f64::NAN);
            let est = t.establishment_s.unwrap_or(f64::NAN);
            if !(50.0..=175.0).contains(&init) {
                problems.push(format!("{} {} initiation {init}", arm.phy, t.call_id));
            }
            if !(60.0..=125.0).contains(&est) {
                problems.push(format!("{} {} establishment {est}", arm.phy, t.call_id));
            }
            if t.state != DialogState::Terminated || t.bye_s != Some(common_bye) {
                problems.push(format!(
                    "{} {} ended {:?} bye {:?}",
                    arm.phy, t.call_id, t.state, t.bye_s
                ));
            }
        }
    }
    for t in &a.timeline {
        if !(19.0..=53.0).contains(&t.talk_initiator_s)
            || !(5.0..=56.0).contains(&t.talk_receiver_s)
        {
            problems.push(format!(
                "{} talk {}/{}",
                t.call_id, t.talk_initiator_s, t.talk_receiver_s
            ));
        }
    }
    let est: Vec<String> = a
        .timeline
        .iter()
        .map(|t| format!("{:.2}", t.establishment_s.unwrap_or(0.0)))
        .collect();
    report(
        8,
        "session timeline shape",
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "5 dialogs per arm, established at {} s, BYE at {common_bye} s",
                est.join("/")
            )
        } else {
            problems.join("; ")
        },
    );
}

#[test]
fn c09_conservation() {
    let mut bad = Vec::new();
    for c in comparisons().values() {
        for arm in [&c.first, &c.second] {
            for row in arm.conservation.iter().filter(|r| !r.holds()) {
                bad.push(format!("seed {} {} {}", arm.seed, arm.phy, row.flow));
            }
            if !arm.jitter_closure_holds() {
                bad.push(format!("seed {} {} jitter closure", arm.seed, arm.phy));
            }
        }
    }
    let flows = shipped().first.conservation.len();
    report(
        9,
        "packet conservation and jitter closure",
        bad.is_empty(),
        if bad.is_empty() {
            format!("{flows} flows x 2 arms x {} seeds exact", SEEDS.len())
        } else {
            bad.join("; ")
        },
    );
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.insert(
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn c10_determinism() {
    let cfg = shipped_scenario();
    let first = shipped();
    let again = run_comparison(&cfg, cfg.seed).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    emit_comparison(first, &tmp.path().join("one")).unwrap();
    emit_comparison(&again, &tmp.path().join("two")).unwrap();
    let (t1, t2) = (tree(&tmp.path().join("one")), tree(&tmp.path().join("two")));
    let identical = !t1.is_empty() && t1 == t2;

    let other = &comparisons()[&2];
    let seed_matters = first.first.scalar("mac_collisions") != other.first.scalar("mac_collisions")
        || first.second.scalar("mac_collisions") != other.second.scalar("mac_collisions");

    let mut violated = Vec::new();
    for (seed, c) in comparisons() {
        for r in c.rows.iter().filter(|r| r.holds == Some(false)) {
            violated.push(format!("seed {seed} {}", r.metric));
        }
    }
    report(
        10,
        "determinism and seed stability",
        identical && seed_matters && violated.is_empty(),
        format!(
            "{} CSVs identical={identical}, seed changes collisions={seed_matters}, ordering violations {violated:?}",
            t1.len()
        ),
    );
}

/// Legal dialog edges, written out independently of the implementation.
fn legal(from: DialogState, input: DialogInput) -> Option<DialogState> {
    use DialogInput as I;
    use DialogState as S;
    match (from, input) {
        (S::Idle, I::RegisterSent) => Some(S::Registering),
        (S::Registering, I::Registered) => Some(S::Idle),
        (S::Idle, I::InviteSent) => Some(S::Inviting),
        (S::Inviting, I::ProvisionalReceived) => Some(S::Ringing),
        (S::Ringing, I::Answered) | (S::Inviting, I::Answered) => Some(S::Established),
        (S::Established, I::ByeSent) => Some(S::Terminating),
        (S::Terminating, I::ByeConfirmed) => Some(S::Terminated),
        (S::Inviting, I::CancelSent) | (S::Ringing, I::CancelSent) => Some(S::Cancelled),
        (S::Inviting, I::Rejected) | (S::Ringing, I::Rejected) => Some(S::Failed),
        _ => None,
    }
}

#[test]
fn c11_dialog_fuzzing() {
    const SEQUENCES: u32 = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let (mut illegal, mut bad_cancel, mut bad_bye, mut applied) = (0u64, 0u64, 0u64, 0u64);
    let (mut cancel_after_est, mut bye_before_est) = (0u64, 0u64);
    for seq in 0..SEQUENCES {
        let mut d = SipDialog::new(CallId(seq), 1, 2);
        let mut was_established = false;
        let len = rng.gen_range(1..=16);
        for step in 0..len {
            let input = DialogInput::ALL[rng.gen_range(0..DialogInput::ALL.len())];
            let before = d.state();
            let now = SimTime(step as u64);
            let res = d.apply(input, now);
            applied += 1;
            match (res, legal(before, input)) {
                (Ok(next), Some(want)) if next == want && d.state() == want => {}
                (Err(_), None) if d.state() == before => {}
                _ => illegal += 1,
            }
            if input == DialogInput::CancelSent
                && (before == DialogState::Established || was_established)
            {
                cancel_after_est += 1;
                bad_cancel += u64::from(d.state() == DialogState::Cancelled);
            }
            if input == DialogInput::ByeSent && !was_established {
                bye_before_est += 1;
                bad_bye += u64::from(d.state() == DialogState::Terminating);
            }
            was_established |= d.state() == DialogState::Established;
        }
    }
    let pass = illegal == 0
        && bad_cancel == 0
        && bad_bye == 0
        && cancel_after_est > 0
        && bye_before_est > 0;
    report(
        11,
        "dialog state machine fuzzing",
        pass,
        format!(
            "{SEQUENCES} sequences, {applied} inputs, {illegal} illegal, CANCEL after Established {cancel_after_est} tried {bad_cancel} accepted, BYE before Established {bye_before_est} tried {bad_bye} accepted"
        ),
    );
}

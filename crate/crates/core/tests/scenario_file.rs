use voipsim::config::{load_scenario, FlowSpec, ScenarioConfig};
use voipsim::scenario::{shipped_scenario, SHIPPED_SCENARIO_TOML};

#[test]
fn shipped_scenario_inventory() {
    let cfg = shipped_scenario();
    assert_eq!(cfg.nodes.len(), 10);
    assert_eq!(cfg.flows.len(), 8);
    assert_eq!(cfg.channels.len(), 3);
    assert_eq!(cfg.duration_s, 134.0);

    let pairs = |want: fn(&FlowSpec) -> Option<(u32, u32)>| {
        cfg.flows.iter().filter_map(want).collect::<Vec<_>>()
    };
    let voip = pairs(|f| match f {
        FlowSpec::Voip(v) => Some((v.src, v.dst)),
        _ => None,
    });
    assert_eq!(voip, vec![(4, 5), (3, 7), (1, 9), (2, 8), (5, 7)]);
    let ftp = pairs(|f| match f {
        FlowSpec::Ftp(v) => Some((v.src, v.dst)),
        _ => None,
    });
    assert_eq!(ftp, vec![(4, 6), (3, 8)]);
    let cbr = pairs(|f| match f {
        FlowSpec::Cbr(v) => Some((v.src, v.dst)),
        _ => None,
    });
    assert_eq!(cbr, vec![(1, 9)]);

    let mobile: Vec<u32> = cfg
        .nodes
        .iter()
        .filter(|n| !n.waypoints.is_empty())
        .map(|n| n.id)
        .collect();
    assert_eq!(mobile, vec![1, 7, 8]);
    for n in &cfg.nodes {
        let expected = match n.id {
            1..=4 => "0100",
            7..=9 => "0010",
            10 => "0001",
            _ => continue,
        };
        assert_eq!(n.mask, expected, "node {}", n.id);
    }
}

#[test]
fn shipped_scenario_round_trips() {
    let cfg = shipped_scenario();
    let text = cfg.to_toml_string().unwrap();
    assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), cfg);
}

#[test]
fn load_reports_every_problem_with_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let broken = SHIPPED_SCENARIO_TOML
        .replacen("src = 4\ndst = 5", "src = 4\ndst = 99", 1)
        .replacen("mask = \"0100\"", "mask = \"0000001\"", 1);
    std::fs::write(&path, broken).unwrap();
    let err = load_scenario(&path).unwrap_err();
    let issues = err.issues();
    assert!(issues.len() >= 2, "{err}");
    assert!(
        issues
            .iter()
            .any(|i| i.context.contains("voip-4-5") && i.message.contains("99")),
        "{err}"
    );
    assert!(issues.iter().all(|i| i.line.is_some()), "{err}");
}

#[test]
fn missing_file_is_an_error() {
    assert!(load_scenario(std::path::Path::new("/nonexistent/scenario.toml")).is_err());
}

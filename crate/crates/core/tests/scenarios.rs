use std::path::PathBuf;

use impham::scenario::{builtin, load, ScenarioConfig, BUILTIN_NAMES};

fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

#[test]
fn shipped_files_match_builtins() {
    for name in BUILTIN_NAMES {
        let path = scenario_dir().join(format!("{name}.json"));
        let from_file = load(path.to_str().unwrap()).unwrap();
        assert_eq!(from_file, builtin(name).unwrap(), "{name}");
    }
}

#[test]
fn round_trip_is_identity_up_to_key_order() {
    for name in BUILTIN_NAMES {
        let text = std::fs::read_to_string(scenario_dir().join(format!("{name}.json"))).unwrap();
        let original: serde_json::Value = serde_json::from_str(&text).unwrap();
        let again: serde_json::Value =
            serde_json::from_str(&ScenarioConfig::from_json(&text).unwrap().to_json()).unwrap();
        assert_eq!(original, again);
    }
}

#[test]
fn missing_file_is_a_config_error() {
    assert!(matches!(load("/nonexistent/scenario.json"), Err(impham::Error::Config(_))));
}

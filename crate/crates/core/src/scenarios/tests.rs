use std::path::Path;

use super::*;

#[test]
fn every_name_resolves_and_validates() {
    let names = names();
    assert_eq!(names.len(), 36);
    for name in &names {
        let cfg = template(name).unwrap_or_else(|| panic!("{name} has no template"));
        assert_eq!(&cfg.scenario, name);
        cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(cfg.attack.is_some(), name.starts_with("naw-"));
    }
}

#[test]
fn unknown_names_resolve_to_none() {
    for bad in ["", "naw-pba", "clean-krum-smoke", "naw-pba-huge", "pba-smoke"] {
        assert!(template(bad).is_none(), "{bad} should not resolve");
    }
}

#[test]
fn shipped_config_files_match_templates_exactly() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in names() {
        let path = dir.join(format!("{name}.json"));
        let text = std::fs::read_to_string(&path)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let on_disk: FedConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(on_disk, template(&name).unwrap(), "{name} drifted from its template");
    }
    // And nothing extra ships: the mapping is 1:1.
    let mut shipped: Vec<String> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter_map(|f| f.strip_suffix(".json").map(str::to_string))
        .collect();
    shipped.sort();
    let mut expected = names();
    expected.sort();
    assert_eq!(shipped, expected);
}

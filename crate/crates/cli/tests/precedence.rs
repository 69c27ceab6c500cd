use std::collections::BTreeMap;

use derefl_cli::config::{resolve, Config, Kind, Source, BACKENDS_ENV, REGISTRY};
use proptest::prelude::*;

fn value_for(kind: Kind, salt: u32) -> String {
    match kind {
        Kind::Int | Kind::OptInt => (salt % 50 + 1).to_string(),
        Kind::Float => format!("{}.5", salt % 7),
        Kind::Bool => (salt % 2 == 0).to_string(),
        Kind::Text => format!("path/{salt}"),
        Kind::Choice(options) => options[salt as usize % options.len()].to_string(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn flag_beats_file_beats_default(
        layers in prop::collection::vec((0u8..4, any::<u32>(), any::<u32>()), REGISTRY.len()),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let mut file_text = String::new();
        let mut flags = Vec::new();
        let mut expected = BTreeMap::new();
        let base = Config::from_env();
        for (spec, &(mask, a, b)) in REGISTRY.iter().zip(&layers) {
            let in_file = mask & 1 == 1;
            let in_flags = mask & 2 == 2;
            let (fv, gv) = (value_for(spec.kind, a), value_for(spec.kind, b));
            if in_file {
                file_text.push_str(&format!("{} = {fv}\n", spec.key));
            }
            if in_flags {
                flags.push((spec.key.to_string(), gv.clone()));
            }
            let want = if in_flags {
                (gv, Source::Flag)
            } else if in_file {
                (fv, Source::File)
            } else {
                (base.raw(spec.key).to_string(), base.source(spec.key))
            };
            expected.insert(spec.key, want);
        }
        let path = dir.path().join("c.cfg");
        std::fs::write(&path, file_text).unwrap();
        let c = resolve(&[], Some(&path), &flags).unwrap();
        for (key, (value, source)) in expected {
            prop_assert_eq!(c.raw(key), value.as_str());
            prop_assert_eq!(c.source(key), source);
        }
    }
}

#[test]
fn env_sets_backends_default_only() {
    let c = Config::from_env();
    match std::env::var(BACKENDS_ENV) {
        Ok(v) if !v.is_empty() => assert_eq!(c.source("backends_dir"), Source::Env),
        _ => assert_eq!(c.source("backends_dir"), Source::Default),
    }
}

#[test]
fn presets_sit_below_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.cfg");
    std::fs::write(&path, "k = 3\n").unwrap();
    let c = resolve(&["k7".to_string()], Some(&path), &[]).unwrap();
    assert_eq!(c.usize("k"), 3);
    assert_eq!(c.raw("aux_mode"), "ranged");
    assert_eq!(c.source("aux_mode"), Source::Preset);
}

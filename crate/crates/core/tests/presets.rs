use pseudoseg::ExperimentConfig;
use std::path::PathBuf;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_configs_match_the_builtin_presets() {
    for (name, preset) in [("smoke", ExperimentConfig::smoke()), ("desk", ExperimentConfig::desk())] {
        let path = configs_dir().join(format!("{name}.toml"));
        let mut loaded = ExperimentConfig::load(&path).unwrap();
        assert_eq!(loaded.output_dir, PathBuf::from("runs").join(name));
        loaded.output_dir = preset.output_dir.clone();
        assert_eq!(loaded, preset, "{} is out of date", path.display());
        assert_eq!(loaded.hash(), preset.hash());
    }
}

use std::path::{Path, PathBuf};

use monodomain_core::config::RunConfig;
use monodomain_core::experiment::build_mesh;
use monodomain_core::mesh::TissueTag;
use monodomain_core::splitting::Scheme;

fn recipes() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../recipes");
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    v.sort();
    v
}

fn load(name: &str) -> RunConfig {
    RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../recipes").join(name)).unwrap()
}

#[test]
fn every_recipe_validates_and_round_trips() {
    let all = recipes();
    assert_eq!(all.len(), 11);
    for p in &all {
        let cfg = RunConfig::load(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(cfg.name, p.file_stem().unwrap().to_str().unwrap());
        let again = RunConfig::from_toml_str(&cfg.to_toml(), p).unwrap();
        assert_eq!(again.to_toml(), cfg.to_toml());
    }
}

#[test]
fn fibrotic_series_shares_tissue_and_protocol() {
    let base = load("fibrotic_h200.toml");
    for (h, file) in [(0.018, "fibrotic_h180.toml"), (0.014, "fibrotic_h140.toml"), (0.01, "fibrotic_h100.toml")] {
        let c = load(file);
        assert_eq!(c.mesh.h, Some(h));
        assert_eq!(c.tissue.d0_myocyte, base.tissue.d0_myocyte);
        assert_eq!(c.tissue.d0_fibrotic(), base.tissue.d0_fibrotic());
        assert_eq!(c.fibrosis.as_ref().unwrap().seed, base.fibrosis.as_ref().unwrap().seed);
        assert_eq!(c.stimulus.len(), 2);
        assert_eq!(c.scheme.scheme, Scheme::Daeti);
    }
    let mesh = build_mesh(&base).unwrap();
    assert_eq!(mesh.n_nodes(), 63001);
    assert_eq!(mesh.count_tag(TissueTag::Fibroblast), 6300);
}

#[test]
fn comparison_recipes_use_the_reference_steps() {
    for file in ["strip.toml", "planar.toml", "fibrotic_h200.toml"] {
        let c = load(file).compare.unwrap();
        assert_eq!(c.reference, Scheme::Ost);
        assert_eq!(c.dt.get(&Scheme::Ost), Some(&0.01));
        assert_eq!(c.dt.get(&Scheme::Daeti), Some(&0.1));
    }
}

use std::path::Path;
use std::sync::Arc;

use contrastaug_core::augment::GatewayGenerability;
use contrastaug_core::dataset::{self, CorpusManifest, IngestLayout, TRAIN};
use contrastaug_core::evaluation::{self, option_pool_from_probes, selected_by_concept, ExperimentConfig};
use contrastaug_core::features::{extract_textual, ExtractConfig, FeatureStatus};
use contrastaug_core::filter::{filter_and_select, EmbeddingSimilarity, ImageData, ScoringContext, SelectParams};
use contrastaug_core::gateway::mock::{tags_in, MockBackend, MockWorld};
use contrastaug_core::gateway::{BackendConfig, Cache, DecodeParams, Gateway, Role};
use contrastaug_core::pairs::{discover, DiscoveryParams};

fn setup(root: &Path, world: &MockWorld, seed: u64) -> (CorpusManifest, Gateway) {
    world.write_corpus(root, 35).unwrap();
    let layout = IngestLayout {
        extensions: vec!["img".into()],
        underscores_as_spaces: false,
        metadata_file: "concept.json".into(),
    };
    let ingested = dataset::ingest(root, &layout, seed).unwrap();
    let manifest = dataset::split(&ingested.manifest, 5, 15, 15).unwrap();
    let backend = Arc::new(MockBackend::new(seed, world.clone()));
    let mut gateway = Gateway::new(Cache::in_memory());
    for role in Role::ALL {
        gateway = gateway.with_backend(BackendConfig::new(role, format!("mock-{role}")), backend.clone()).unwrap();
    }
    (manifest, gateway)
}

#[test]
fn contrastive_features_fix_misidentification() {
    let dir = tempfile::tempdir().unwrap();
    let world = MockWorld::species(12);
    let (manifest, gateway) = setup(dir.path(), &world, 3);
    let ids: Vec<String> = manifest.concepts.iter().map(|c| c.id.clone()).collect();
    let params = DiscoveryParams { subset_size: 12, ..DiscoveryParams::default() };
    let found = discover(&gateway, &manifest, dir.path(), &ids, &params, 3).unwrap();
    assert!(!found.pairs.is_empty());
    for p in &found.pairs {
        assert!(world.concept(&p.target).unwrap().novel, "{} is a known concept", p.target);
        assert!(p.rate_t_to_m > 0.2);
    }

    let sim = EmbeddingSimilarity::new(&gateway);
    let mut selected = Vec::new();
    for pair in &found.pairs {
        let target = manifest.concept(&pair.target).unwrap();
        let against = manifest.concept(&pair.misidentified).unwrap();
        let extraction = extract_textual(&gateway, target, Some(against), &ExtractConfig::default()).unwrap();
        assert!(!extraction.features.is_empty());
        let reals = |c: &str| -> Vec<ImageData> {
            manifest
                .split_assets(c, TRAIN)
                .unwrap()
                .into_iter()
                .map(|a| ImageData::new(a.read_bytes(dir.path()).unwrap()))
                .collect()
        };
        let ctx = ScoringContext::new(reals(&target.id), reals(&against.id), 5, 3).unwrap();
        let supplier = GatewayGenerability { gateway: &gateway, concept_name: target.canonical_name.clone(), seed: 3 };
        let selection =
            filter_and_select(extraction.features, &ctx, &sim, &SelectParams::default(), &supplier).unwrap();
        let chosen: Vec<_> = selection.selected().cloned().collect();
        assert!(!chosen.is_empty() && chosen.len() <= 5);
        for f in &chosen {
            assert_eq!(tags_in(&f.text), [target.id.to_lowercase()], "{}", f.text);
        }
        assert!(selection.features.iter().all(|f| f.status != FeatureStatus::Rejected || f.g_score.is_none()));
        selected.extend(chosen);
    }

    let targets: Vec<String> = found.pairs.iter().map(|p| p.target.clone()).collect();
    let pool = option_pool_from_probes(&found.probes);
    let by_concept = selected_by_concept(&selected);
    let decode = DecodeParams::default();
    let config = ExperimentConfig::from_ratio("5:0", true, 3).unwrap();
    let with = evaluation::evaluate(&gateway, &manifest, dir.path(), &targets, &pool, Some(&by_concept), &config, &decode)
        .unwrap();
    assert_eq!(with.result.accuracy, Some(1.0));
    let config = ExperimentConfig::from_ratio("5:0", false, 3).unwrap();
    let without =
        evaluation::evaluate(&gateway, &manifest, dir.path(), &targets, &pool, None, &config, &decode).unwrap();
    assert!(without.result.accuracy.unwrap() < 1.0);
}

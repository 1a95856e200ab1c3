use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sista::adapt::{adapt_classifier, build_banks, ClassifierArch};
use sista::pipeline::{bundled_discriminator, bundled_generator, ExperimentConfig};
use sista::pretrain::appearance_layers;
use sista::sampler::{curate_dataset, load_manifest_images, ClassMode, GeneratorBank, SyntheticManifest};
use sista::{ClassifierHandle, Discriminator, Generator, NRCConfig, PruneConfig, Strategy};

#[test]
fn shipped_config_matches_the_builtin_miniature() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/miniature.toml");
    let cfg = ExperimentConfig::load(&root).unwrap();
    let builtin = ExperimentConfig::miniature("runs/miniature");
    assert_eq!(cfg.seeds, builtin.seeds);
    assert_eq!(cfg.strategy, builtin.strategy);
    assert_eq!(cfg.ratio, builtin.ratio);
    assert_eq!(cfg.samples, builtin.samples);
    assert_eq!(cfg.nrc, builtin.nrc);
    assert_eq!(cfg.shift, builtin.shift);
    let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(again, cfg);
}

#[test]
fn bundled_networks_survive_a_byte_round_trip() {
    for conditional in [false, true] {
        let g = bundled_generator::<f64>(conditional).unwrap();
        let back = Generator::<f64>::from_bytes(&g.to_bytes().unwrap()).unwrap();
        assert_eq!(back.checksum(), g.checksum());
        assert_eq!(back.is_conditional(), conditional);
    }
    let d = bundled_discriminator::<f32>().unwrap();
    assert_eq!(
        Discriminator::<f32>::from_bytes(&d.to_bytes().unwrap())
            .unwrap()
            .checksum(),
        d.checksum()
    );
}

#[test]
fn curated_set_feeds_adaptation() {
    let gen = bundled_generator::<f32>(true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PruneConfig::new(Strategy::PruneZero, appearance_layers(gen.num_layers()), 5);
    cfg.ratio = 50.0;
    let m = curate_dataset(
        GeneratorBank::One(&gen),
        None,
        &cfg,
        24,
        ClassMode::UniformRandom,
        dir.path(),
    )
    .unwrap();
    assert_eq!(m.len(), 24);

    let reread = SyntheticManifest::read(dir.path()).unwrap();
    assert_eq!(reread.hash(), m.hash());
    assert_eq!(reread.recompute_hash().unwrap(), m.hash());
    assert_eq!(load_manifest_images::<f32>(&reread).unwrap().len(), 24);

    let model = ClassifierHandle::<f32>::init(ClassifierArch::toy(3), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let unlabeled = reread.without_classes();
    assert_eq!(build_banks(&model, &unlabeled).unwrap().len(), 24);
    let nrc = NRCConfig {
        epochs: 1,
        batch_size: 8,
        head_only: true,
        ..NRCConfig::default()
    };
    let r = adapt_classifier(&model, &unlabeled, &nrc).unwrap();
    assert_eq!(r.history.len(), 3);
    assert_ne!(r.model.weight_checksum(), model.weight_checksum());
}

#[test]
fn curation_is_reproducible_from_the_seed() {
    let gen = bundled_generator::<f32>(false).unwrap();
    let cfg = PruneConfig::new(Strategy::PruneZero, appearance_layers(gen.num_layers()), 9);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run = |p: &Path| curate_dataset(GeneratorBank::One(&gen), None, &cfg, 10, ClassMode::None, p).unwrap();
    assert_eq!(run(a.path()).hash(), run(b.path()).hash());
}

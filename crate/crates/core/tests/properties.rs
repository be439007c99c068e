use proptest::prelude::*;
use restora_core::checkpoint::Checkpoint;
use restora_core::config::RunConfig;
use restora_core::degradations::{apply_degradation, CorruptionType, DegradationKind};
use restora_core::heads::TaskKind;
use restora_core::metrics;
use restora_core::model::{Model, ModelConfig};
use restora_core::scenes;

fn corruption() -> impl Strategy<Value = CorruptionType> {
    prop::sample::select(CorruptionType::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn degraded_images_stay_in_range_and_are_seeded(t in corruption(), sev in 0u8..=5, seed in any::<u64>()) {
        let img = scenes::generate(16, seed).image;
        let kind = DegradationKind::new(t, sev).unwrap();
        let a = apply_degradation(&img, kind, seed).unwrap();
        let b = apply_degradation(&img, kind, seed).unwrap();
        prop_assert_eq!(a.shape(), img.shape());
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(a.data(), b.data());
        if sev == 0 {
            prop_assert_eq!(a.data(), img.data());
        }
    }

    #[test]
    fn stronger_noise_lowers_psnr(seed in any::<u64>()) {
        let img = scenes::generate(24, seed).image;
        let scores: Vec<f64> = (1..=5)
            .map(|s| {
                let kind = DegradationKind::new(CorruptionType::GaussianNoise, s).unwrap();
                metrics::psnr(&apply_degradation(&img, kind, seed).unwrap(), &img, 1.0).unwrap()
            })
            .collect();
        prop_assert!(scores.windows(2).all(|w| w[0] > w[1]), "{:?}", scores);
    }

    #[test]
    fn config_text_round_trips(entries in prop::collection::btree_map("[a-z]{1,6}(\\.[a-z_]{1,6}){0,2}", "[a-z0-9_.,-]{1,10}", 0..8)) {
        let mut cfg = RunConfig::new();
        for (k, v) in &entries {
            cfg.set(k, v);
        }
        let back = RunConfig::parse_str(&cfg.to_text()).unwrap();
        prop_assert_eq!(back.values(), cfg.values());
        prop_assert_eq!(back.digest(), cfg.digest());
    }
}

#[test]
fn checkpoint_round_trip_preserves_every_group() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = Model::new(ModelConfig::default(), 4).unwrap();
    m.add_task("cls", TaskKind::Classification).unwrap();
    let path = dir.path().join("ck.tar");
    Checkpoint::from_model(&m, 4, "stage2", 17).save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.meta.step, 17);
    let restored = ck.into_model().unwrap();
    assert_eq!(restored.store.digests(), m.store.digests());
}

#[test]
fn overrides_beat_included_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("base.cfg"), "seed = 1\nmodel.image_size = 32\n").unwrap();
    std::fs::write(dir.path().join("run.cfg"), "include = base.cfg\nseed = 2\n").unwrap();
    let mut cfg = RunConfig::load(&dir.path().join("run.cfg")).unwrap();
    assert_eq!(cfg.seed().unwrap(), 2);
    cfg.apply_overrides(&["seed=3"]).unwrap();
    assert_eq!(cfg.seed().unwrap(), 3);
    assert_eq!(cfg.get("model.image_size"), Some("32"));
}

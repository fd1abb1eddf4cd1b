use augdetect::data::{
    generate_synthetic_dataset, load_checkpoint, load_dataset, parse_eps, quantize, save_checkpoint, save_dataset,
    write_results, Checkpoint, ContainerHeader, Curve, DatasetContainer, ResultTable, RunConfig, RunOutput,
    SyntheticConfig, WriteOptions,
};
use augdetect::models::{ClassHead, ClassifierNet, SslEncoder};
use augdetect::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn container() -> impl Strategy<Value = DatasetContainer> {
    (1usize..6, 1u16..5, 1u16..5, 1u8..4, 2u8..17, "[a-z0-9/=]{0,12}").prop_flat_map(|(n, h, w, c, k, prov)| {
        let pix = n * h as usize * w as usize * c as usize;
        (prop::collection::vec(any::<u8>(), pix), prop::collection::vec(0..k, n)).prop_map(move |(pixels, labels)| {
            DatasetContainer {
                header: ContainerHeader {
                    count: n as u32,
                    height: h,
                    width: w,
                    channels: c,
                    num_classes: k,
                    provenance: prov.clone(),
                },
                pixels,
                labels,
            }
        })
    })
}

proptest! {
    #[test]
    fn container_bytes_round_trip(c in container()) {
        let bytes = c.to_bytes();
        let back = DatasetContainer::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_bytes(), bytes);
        let images = c.to_images();
        prop_assert_eq!(DatasetContainer::from_images(&images, &c.header.provenance), c);
    }

    #[test]
    fn truncation_is_detected(c in container(), cut in 1usize..8) {
        let bytes = c.to_bytes();
        let cut = cut.min(bytes.len());
        prop_assert!(DatasetContainer::from_bytes(&bytes[..bytes.len() - cut]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        prop_assert!(matches!(DatasetContainer::from_bytes(&long), Err(Error::Truncated(_))));
    }

    #[test]
    fn adversarial_quantization_keeps_the_budget(
        src in prop::collection::vec(any::<u8>(), 12),
        noise in prop::collection::vec(-0.2f64..0.2, 12),
        steps in 0u32..20,
    ) {
        let eps = steps as f64 / 255.0;
        let source = DatasetContainer {
            header: ContainerHeader { count: 1, height: 2, width: 2, channels: 3, num_classes: 2, provenance: String::new() },
            pixels: src,
            labels: vec![1],
        }
        .to_images();
        let mut adv = source.clone();
        for (a, n) in adv.images.data_mut().iter_mut().zip(&noise) {
            *a = (*a + n.clamp(-eps, eps)).clamp(0.0, 1.0);
        }
        let q = DatasetContainer::from_adversarial(&adv, &source, eps, "pgd").to_images();
        for (a, s) in q.images.data().iter().zip(source.images.data()) {
            prop_assert!((a - s).abs() <= eps + 1e-12);
        }
    }

    #[test]
    fn quantize_is_nearest(v in -0.5f64..1.5) {
        let q = quantize(v) as f64 / 255.0;
        prop_assert!((q - v.clamp(0.0, 1.0)).abs() <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn fraction_budgets_parse(num in 0u32..300, den in 1u32..300) {
        let v = parse_eps(&format!("{num}/{den}")).unwrap();
        prop_assert!((v - num as f64 / den as f64).abs() < 1e-15);
    }
}

#[test]
fn header_errors_are_typed() {
    let c = generate_synthetic_dataset(&SyntheticConfig { classes: 3, per_class: 2, height: 4, width: 4, seed: 1 }).unwrap();
    let bytes = c.to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(DatasetContainer::from_bytes(&bad), Err(Error::BadMagic)));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(DatasetContainer::from_bytes(&bad), Err(Error::VersionMismatch { .. })));
    let mut bad = bytes.clone();
    *bad.last_mut().unwrap() = 3;
    assert!(matches!(DatasetContainer::from_bytes(&bad), Err(Error::LabelOutOfRange { .. })));
    assert!(parse_eps("1/0").is_err());
    assert!(parse_eps("-0.1").is_err());
    assert!(matches!(
        generate_synthetic_dataset(&SyntheticConfig { classes: 17, ..Default::default() }),
        Err(Error::UnsupportedClasses(17))
    ));
}

#[test]
fn synthetic_data_is_seeded_and_balanced() {
    let cfg = SyntheticConfig { classes: 4, per_class: 5, height: 8, width: 8, seed: 3 };
    let a = generate_synthetic_dataset(&cfg).unwrap();
    assert_eq!(a, generate_synthetic_dataset(&cfg).unwrap());
    assert_ne!(a, generate_synthetic_dataset(&SyntheticConfig { seed: 4, ..cfg.clone() }).unwrap());
    for k in 0..4u8 {
        assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), 5);
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.bynd");
    save_dataset(&p, &a).unwrap();
    assert_eq!(load_dataset(&p).unwrap(), a);
}

#[test]
fn checkpoints_round_trip_and_detect_damage() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = ClassifierNet::init([3, 16, 16], 4, &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("clf.ckpt");
    save_checkpoint(&p, &net, 5, json!({"lr": 0.1})).unwrap();
    let (back, header) = load_checkpoint::<ClassifierNet>(&p).unwrap();
    assert_eq!(header.seed, 5);
    let x = generate_synthetic_dataset(&SyntheticConfig { classes: 4, per_class: 2, height: 16, width: 16, seed: 0 })
        .unwrap()
        .to_images()
        .images;
    let d = net.predict_logits(&x).unwrap().max_abs_diff(&back.predict_logits(&x).unwrap());
    assert!(d < 1e-5, "logit drift {d}");

    let bytes = std::fs::read(&p).unwrap();
    let mut flipped = bytes.clone();
    let n = flipped.len();
    flipped[n - 12] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checksum)));
    assert!(Checkpoint::from_bytes(&bytes[..n - 20]).is_err());
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert!(matches!(ck.into_model::<ClassHead>(), Err(Error::TopologyMismatch(_))));
    let enc = SslEncoder::init([3, 16, 16], &mut rng).unwrap();
    let ck = Checkpoint::from_model(&enc, 0, json!(null));
    assert_eq!(Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap(), ck);
}

fn run_output() -> RunOutput {
    let mut t = ResultTable::new("metrics", &["k", "auc"]);
    t.push(vec!["5".into(), "0.9".into()]);
    RunOutput {
        tables: vec![t],
        curves: vec![Curve { name: "pgd".into(), points: vec![(0.0, 0.0, f64::INFINITY), (1.0, 1.0, 0.0)] }],
        config: Some(serde_json::to_value(RunConfig::default()).unwrap()),
        ..Default::default()
    }
}

#[test]
fn results_are_atomic_and_respect_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_output();
    let path = write_results(dir.path(), "run", &out, WriteOptions::default()).unwrap();
    let listing = |p: &std::path::Path| {
        let mut v: Vec<String> = std::fs::read_dir(p).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        v.sort();
        v
    };
    let files = listing(&path);
    assert!(files.contains(&"summary.json".to_string()));
    assert!(matches!(write_results(dir.path(), "run", &out, WriteOptions::default()), Err(Error::RunExists(_))));
    let snapshot: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(path.join(f)).unwrap()).collect();
    write_results(dir.path(), "run", &out, WriteOptions { force: true, fail_after_files: None }).unwrap();
    let again: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(path.join(f)).unwrap()).collect();
    assert_eq!(snapshot, again);
    for i in 0..files.len() {
        assert!(write_results(dir.path(), "other", &out, WriteOptions { force: false, fail_after_files: Some(i) }).is_err());
        assert_eq!(listing(dir.path()), vec!["run".to_string()]);
    }
    assert!(write_results(dir.path(), "../escape", &out, WriteOptions::default()).is_err());
}

#[test]
fn config_accepts_fraction_budgets() {
    let v = json!({"attacks": {"eps": "8/255"}, "eval": {"eps_grid": ["2/255", 0.5]}});
    let cfg: RunConfig = serde_json::from_value(v).unwrap();
    assert!((cfg.attacks.eps - 8.0 / 255.0).abs() < 1e-15);
    assert_eq!(cfg.eval.eps_grid, vec![2.0 / 255.0, 0.5]);
    cfg.validate().unwrap();
}

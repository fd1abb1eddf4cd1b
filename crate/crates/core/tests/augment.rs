use augdetect::augment::{
    apply_params, default_policy, generate_neighbors, neighbor_augmentations, sample_augmentation, AugParams,
    Augmentation, AugmentationSpec,
};
use augdetect::Error;
use nalgebra::DMatrix;
use ndt::Tensor64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SHAPE: [usize; 3] = [2, 5, 5];

fn image(shape: [usize; 3]) -> impl Strategy<Value = Tensor64> {
    let n: usize = shape.iter().product();
    prop::collection::vec(0.0f64..=1.0, n).prop_map(move |d| Tensor64::new(vec![1, shape[0], shape[1], shape[2]], d).unwrap())
}

fn params() -> impl Strategy<Value = AugParams> {
    prop_oneof![
        (-30.0f64..30.0).prop_map(|degrees| AugParams::Rotation { degrees }),
        (0.5f64..1.5, 0.5f64..1.5).prop_map(|(brightness, contrast)| AugParams::ColorJitter { brightness, contrast }),
        (-2i64..=2, -2i64..=2).prop_map(|(dx, dy)| AugParams::Translation { dx, dy }),
        any::<bool>().prop_map(|flip| AugParams::HorizontalFlip { flip }),
    ]
}

/// Dense matrix of a linear map, one column per basis vector.
fn dense(n: usize, f: impl Fn(&[f64], &mut [f64])) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let mut y = vec![0.0; n];
        f(&e, &mut y);
        m.set_column(j, &nalgebra::DVector::from_vec(y));
    }
    m
}

proptest! {
    #[test]
    fn transpose_is_the_adjoint(ps in prop::collection::vec(params(), 1..4)) {
        let aug = Augmentation::from_params(ps, SHAPE);
        let n = SHAPE.iter().product();
        let fwd = dense(n, |x, y| aug.op.apply(x, y));
        let bwd = dense(n, |y, x| aug.op.apply_transpose(y, x));
        prop_assert!((fwd.transpose() - bwd).amax() < 1e-12);
    }

    #[test]
    fn outputs_stay_in_range(x in image(SHAPE), ps in prop::collection::vec(params(), 1..3)) {
        let y = Augmentation::from_params(ps, SHAPE).apply(&x);
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn sampled_params_respect_the_policy(seed in any::<u64>(), deg in 0.0f64..40.0, lo in 0.5f64..1.0, hi in 1.0f64..1.5) {
        let policy = vec![
            AugmentationSpec::rotation(deg),
            AugmentationSpec::color_jitter(lo, hi),
            AugmentationSpec::Translation { max_shift: 2 },
        ];
        let aug = sample_augmentation(&policy, SHAPE, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(aug.params.len(), 3);
        for (spec, p) in policy.iter().zip(&aug.params) {
            prop_assert!(spec.validate(p).is_ok());
        }
    }

    #[test]
    fn neighbors_are_reproducible_and_prefix_stable(x in image(SHAPE), seed in any::<u64>()) {
        let a = generate_neighbors(&x, 6, &default_policy(), seed).unwrap();
        let b = generate_neighbors(&x, 3, &default_policy(), seed).unwrap();
        let per: usize = SHAPE.iter().product();
        prop_assert_eq!(&a.neighbors.data()[..3 * per], b.neighbors.data());
        prop_assert_eq!(&a.params[..3], &b.params[..]);
        let again = generate_neighbors(&x, 6, &default_policy(), seed).unwrap();
        prop_assert_eq!(a.neighbors, again.neighbors);
    }
}

#[test]
fn quarter_turn_permutes_pixels() {
    let d: Vec<f64> = (0..9).map(|v| v as f64 / 8.0).collect();
    let x = Tensor64::new(vec![1, 1, 3, 3], d).unwrap();
    let y = apply_params(&x, &AugmentationSpec::rotation(90.0), &AugParams::Rotation { degrees: 90.0 }).unwrap();
    let mut sorted_in = x.data().to_vec();
    let mut sorted_out = y.data().to_vec();
    sorted_in.sort_by(f64::total_cmp);
    sorted_out.sort_by(f64::total_cmp);
    assert_eq!(sorted_in, sorted_out);
    assert_eq!(y.data()[4], x.data()[4]);
    assert_ne!(y, x);
}

#[test]
fn flip_twice_is_identity() {
    let x = Tensor64::new(vec![1, 1, 2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
    let spec = AugmentationSpec::HorizontalFlip { probability: 1.0 };
    let p = AugParams::HorizontalFlip { flip: true };
    let once = apply_params(&x, &spec, &p).unwrap();
    assert_eq!(once.data(), &[0.3, 0.2, 0.1, 0.6, 0.5, 0.4]);
    assert_eq!(apply_params(&once, &spec, &p).unwrap(), x);
}

#[test]
fn jitter_scales_around_the_mean() {
    let x = Tensor64::new(vec![1, 1, 1, 4], vec![0.2, 0.4, 0.6, 0.8]).unwrap();
    let y = apply_params(
        &x,
        &AugmentationSpec::color_jitter(0.5, 1.5),
        &AugParams::ColorJitter { brightness: 1.0, contrast: 0.5 },
    )
    .unwrap();
    let want = [0.35, 0.45, 0.55, 0.65];
    for (a, b) in y.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn invalid_requests_are_rejected() {
    let x = Tensor64::zeros(&[1, 1, 2, 2]);
    assert!(matches!(
        apply_params(&x, &AugmentationSpec::rotation(15.0), &AugParams::Rotation { degrees: 40.0 }),
        Err(Error::ParamOutOfRange { .. })
    ));
    assert!(matches!(
        apply_params(&x, &AugmentationSpec::rotation(15.0), &AugParams::HorizontalFlip { flip: true }),
        Err(Error::Config(_))
    ));
    assert!(matches!(neighbor_augmentations(&[], [1, 2, 2], 3, 0), Err(Error::EmptyPolicy)));
    assert!(generate_neighbors(&x, 0, &default_policy(), 0).is_err());
}

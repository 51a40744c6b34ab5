use ndarray::Array2;
use proptest::prelude::*;

use dbag::descriptor::{self, FeatureStats, PadMode, SliceParams};
use dbag::eval::{self, SplitMode};
use dbag::manifest::{Manifest, ManifestRecord};
use dbag::trainer::{build_triplets, TrainConfig};
use dbag::Label;

fn labels_from(bits: &[bool]) -> Vec<Label> {
    bits.iter().map(|&b| if b { Label::Fake } else { Label::Real }).collect()
}

fn manifest(n: usize) -> Manifest {
    let records = (0..n)
        .map(|i| ManifestRecord {
            video_id: format!("v{i}"),
            path: format!("v{i}").into(),
            label: if i % 2 == 0 { Label::Real } else { Label::Fake },
            dataset_name: "d".into(),
            manipulation_type: None,
            identity_id: None,
        })
        .collect();
    Manifest::new(records, "").unwrap()
}

proptest! {
    #[test]
    fn triplets_respect_labels(bits in prop::collection::vec(any::<bool>(), 4..80), seed in any::<u64>()) {
        let labels = labels_from(&bits);
        let fakes = bits.iter().filter(|&&b| b).count();
        prop_assume!(fakes >= 2 && bits.len() - fakes >= 2);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let t = build_triplets(&labels, 2, &mut rng).unwrap();
        prop_assert_eq!(t.len(), 2 * labels.len());
        for x in t {
            prop_assert_ne!(x.anchor, x.positive);
            prop_assert_eq!(labels[x.anchor], labels[x.positive]);
            prop_assert_ne!(labels[x.anchor], labels[x.negative]);
        }
    }

    #[test]
    fn epoch_triplets_are_seeded(bits in prop::collection::vec(any::<bool>(), 4..40), seed in any::<u64>(), epoch in 0usize..50) {
        let labels = labels_from(&bits);
        let fakes = bits.iter().filter(|&&b| b).count();
        prop_assume!(fakes >= 2 && bits.len() - fakes >= 2);
        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        let a = dbag::trainer::epoch_triplets(&labels, &cfg, epoch).unwrap();
        let b = dbag::trainer::epoch_triplets(&labels, &cfg, epoch).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn repeat_last_pads_short_videos(len in 1usize..119) {
        let fv = Array2::from_shape_fn((len, 3), |(r, c)| (r * 3 + c) as f32);
        let p = SliceParams { pad_mode: PadMode::RepeatLast, ..SliceParams::default() };
        let s = descriptor::slice(fv.view(), &p, "v", None).unwrap();
        prop_assert_eq!(s.len(), 1);
        prop_assert_eq!(s[0].matrix.nrows(), 120);
        prop_assert_eq!(s[0].matrix.row(119), fv.row(len - 1));
        let off = descriptor::slice(fv.view(), &SliceParams::default(), "v", None).unwrap();
        prop_assert!(off.is_empty());
    }

    #[test]
    fn auc_flips_when_labels_flip(scores in prop::collection::vec(0.0f64..1.0, 2..60), bits in prop::collection::vec(any::<bool>(), 2..60)) {
        let n = scores.len().min(bits.len());
        let (scores, labels) = (&scores[..n], labels_from(&bits[..n]));
        let fakes = labels.iter().filter(|l| l.is_fake()).count();
        prop_assume!(fakes > 0 && fakes < n);
        let flipped: Vec<Label> = labels.iter().map(|l| if l.is_fake() { Label::Real } else { Label::Fake }).collect();
        let a = eval::auc(scores, &labels).unwrap();
        let b = eval::auc(scores, &flipped).unwrap();
        prop_assert!((a + b - 100.0).abs() < 1e-9);
        let e = eval::eer(scores, &labels).unwrap();
        prop_assert!((0.0..=100.0).contains(&e));
    }

    #[test]
    fn random_split_is_a_partition(n in 2usize..300, seed in any::<u64>()) {
        let m = manifest(n);
        let plan = eval::make_split(&m, SplitMode::Random8020, seed).unwrap();
        let train = plan.count(eval::Assignment::Train);
        let test = plan.count(eval::Assignment::Test);
        prop_assert_eq!(train + test, n);
        prop_assert_eq!(train, 4 * n / 5);
        prop_assert_eq!(plan, eval::make_split(&m, SplitMode::Random8020, seed).unwrap());
    }

    #[test]
    fn standardized_columns_have_unit_scale(rows in 2usize..40, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut m = Array2::from_shape_fn((rows, descriptor::FRAME_DIM), |(_, c)| rng.random_range(-10.0f32..10.0) * (c % 7 + 1) as f32);
        m.column_mut(4).fill(3.0);
        let stats = FeatureStats::fit([m.view()]).unwrap();
        stats.apply(&mut m);
        for c in (0..descriptor::FRAME_DIM).filter(|&c| c != 4) {
            let col = m.column(c);
            let mean = col.sum() / rows as f32;
            prop_assert!(mean.abs() < 1e-3);
        }
        prop_assert!(m.column(4).iter().all(|v| v.abs() < 1e-6));
    }
}

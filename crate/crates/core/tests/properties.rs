//! Property tests for the invariants of every module.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rcl::collapse::{full_gram_eigenvalues, gm_k, gram_spectrum, hm_k};
use rcl::data::{gen_teacher_tasks, inject_label_noise, metric, MetricKind, NoiseConfig, TeacherConfig};
use rcl::harness::{aggregate, cell_dataset, ExperimentRecord};
use rcl::matrix::{pinv, projector, sym_eig, Matrix};
use rcl::net::{softmax, Activation, EncoderConfig, EncoderModel};
use rcl::oracle::{closed_form_pseudo_loss, mc_gaussian_norm_sq};
use rcl::regularize::{capcort_i_loss, capcort_mlp_loss, wc_loss, MlpHead};

fn matrix(rows: std::ops::RangeInclusive<usize>, cols: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Matrix> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0..3.0f64, r * c).prop_map(move |v| Matrix::new(r, c, v).unwrap())
    })
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn encoder(seed: u64) -> EncoderModel {
    EncoderModel::init(EncoderConfig {
        input_dim: 4,
        hidden_dim: 5,
        num_layers: 2,
        activation: Activation::Tanh,
        num_classes: 3,
        seed,
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn psd_spectrum_is_nonnegative_and_sums_to_trace(z in matrix(1..=12, 1..=8)) {
        let g = z.gram();
        let eig = sym_eig(&g).unwrap();
        prop_assert!(eig.eigenvalues.iter().all(|&l| l >= 0.0));
        let sum: f64 = eig.eigenvalues.iter().sum();
        prop_assert!((sum - g.trace()).abs() <= 1e-9 * g.trace().max(1e-300));
    }

    #[test]
    fn projector_fixes_the_column_space(b in matrix(2..=10, 1..=5), x in prop::collection::vec(-2.0..2.0f64, 5)) {
        let bx = b.matvec(&x[..b.cols()]).unwrap();
        let pbx = projector(&b).unwrap().matvec(&bx).unwrap();
        let err: f64 = pbx.iter().zip(&bx).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt();
        let norm: f64 = bx.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(err <= 1e-8 * norm.max(1e-12));
    }

    #[test]
    fn pinv_is_an_involution_on_full_rank(seed in any::<u64>(), r in 2usize..8, extra in 0usize..4) {
        let a = gaussian(r + extra, r, seed);
        let back = pinv(&pinv(&a).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&a) <= 1e-7 * a.frobenius_norm());
    }

    #[test]
    fn inner_and_outer_gram_share_nonzero_spectrum(seed in any::<u64>(), n in 2usize..14, d in 2usize..9) {
        prop_assume!(n != d);
        let z = gaussian(n, d, seed);
        let inner = gram_spectrum(&z).unwrap().eigenvalues;
        let outer = full_gram_eigenvalues(&z).unwrap();
        let top = inner[0];
        for i in 0..n.min(d) {
            prop_assert!((inner[i] - outer[i]).abs() <= 1e-8 * top);
        }
        for l in inner.iter().skip(n.min(d)).chain(outer.iter().skip(n.min(d))) {
            prop_assert!(l.abs() <= 1e-8 * top);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(logits in prop::collection::vec(-20.0..20.0f64, 2..8), c in -50.0..50.0f64) {
        let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
        for (a, b) in softmax(&logits).iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn snapshot_restore_reproduces_outputs_bitwise(seed in any::<u64>(), other in any::<u64>(), x in prop::collection::vec(-2.0..2.0f64, 4)) {
        let model = encoder(seed);
        let snap = model.snapshot();
        let before = model.forward(&x).unwrap().logits;
        let mut m = encoder(other);
        m.restore(&snap).unwrap();
        let after = m.forward(&x).unwrap().logits;
        prop_assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn consistency_losses_are_nonnegative_and_vanish_on_equality(a in matrix(1..=6, 1..=5), seed in any::<u64>()) {
        let b = gaussian(a.rows(), a.cols(), seed);
        prop_assert!(capcort_i_loss(&a, &b).unwrap().0 > 0.0);
        prop_assert_eq!(capcort_i_loss(&a, &a).unwrap().0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = MlpHead::glorot(a.cols(), 2, &mut rng);
        prop_assert!(capcort_mlp_loss(&a, &b, &head).unwrap().loss >= 0.0);
        let (fin, pre) = (encoder(seed), encoder(seed ^ 1));
        prop_assert!(wc_loss(&fin.params, &pre.params).unwrap().0 > 0.0);
        prop_assert_eq!(wc_loss(&fin.params, &fin.params).unwrap().0, 0.0);
    }

    #[test]
    fn identity_phi_reduces_mlp_to_capcort_i(a in matrix(1..=6, 1..=5), seed in any::<u64>()) {
        let b = gaussian(a.rows(), a.cols(), seed);
        let direct = capcort_i_loss(&a, &b).unwrap().0;
        let via_mlp = capcort_mlp_loss(&a, &b, &MlpHead::identity(a.cols())).unwrap().loss;
        prop_assert!((direct - via_mlp).abs() <= 1e-12 * (1.0 + direct));
    }

    #[test]
    fn spectrum_scales_quadratically(seed in any::<u64>(), c in 0.1..10.0f64) {
        let z = gaussian(12, 5, seed);
        let base = gram_spectrum(&z).unwrap();
        let scaled = gram_spectrum(&z.scale(c)).unwrap();
        for k in 1..=5 {
            prop_assert!(rel(gm_k(&scaled, k).unwrap(), c * c * gm_k(&base, k).unwrap()) <= 1e-10);
            prop_assert!(rel(hm_k(&scaled, k).unwrap(), c * c * hm_k(&base, k).unwrap()) <= 1e-10);
        }
    }

    #[test]
    fn spectrum_is_rotation_invariant(seed in any::<u64>()) {
        let z = gaussian(10, 4, seed);
        let s = gaussian(4, 4, seed ^ 0xabc);
        let q = sym_eig(&s.add(&s.transpose()).unwrap()).unwrap().eigenvectors;
        let a = gram_spectrum(&z).unwrap().eigenvalues;
        let b = gram_spectrum(&z.matmul(&q).unwrap()).unwrap().eigenvalues;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-8 * a[0]);
        }
    }

    #[test]
    fn gm_k_is_nonincreasing_in_k(z in matrix(3..=12, 2..=8)) {
        let r = gram_spectrum(&z).unwrap();
        let gms: Vec<f64> = (1..=r.d).map(|k| gm_k(&r, k).unwrap()).collect();
        prop_assert!(gms.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    }

    #[test]
    fn duplicate_rows_never_shrink_eigenvalues(seed in any::<u64>(), n in 2usize..10, d in 2usize..6, dup in 0usize..10) {
        let z = gaussian(n, d, seed);
        let extra = z.select_rows(&[dup % n]);
        let grown = z.vstack(&extra).unwrap();
        let before = gram_spectrum(&z).unwrap().eigenvalues;
        let after = gram_spectrum(&grown).unwrap().eigenvalues;
        let tol = 1e-10 * after[0];
        prop_assert!(after[0] + tol >= before[0]);
        prop_assert!(before.iter().zip(&after).all(|(b, a)| a + tol >= *b));
    }

    #[test]
    fn bias_column_never_increases_pseudo_loss(seed in any::<u64>(), n in 6usize..20, d in 1usize..5, e in 1usize..5) {
        let pre = gaussian(n, d, seed);
        let fin = gaussian(n, e, seed ^ 7);
        let plain = closed_form_pseudo_loss(&pre, &fin).unwrap();
        let aug = closed_form_pseudo_loss(&pre, &fin.with_constant_column(1.0)).unwrap();
        prop_assert!(aug <= plain + 1e-9 * (1.0 + plain));
    }

    #[test]
    fn metrics_stay_in_range(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40)) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        for kind in [MetricKind::Accuracy, MetricKind::MacroF1, MetricKind::MicroF1] {
            let v = metric(&preds, &labels, kind).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let mcc = metric(&preds, &labels, MetricKind::Mcc).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&mcc));
    }

    #[test]
    fn ranks_are_valid_and_order_independent(vals in prop::collection::vec(0.0..1.0f64, 12), fails in prop::collection::vec(any::<bool>(), 12), rot in 0usize..12) {
        let mut records = Vec::new();
        for (i, (v, f)) in vals.iter().zip(&fails).enumerate() {
            records.push(ExperimentRecord {
                task: format!("t{}", i % 2),
                method: format!("m{}", (i / 2) % 3),
                seed: (i / 6) as u64,
                train_size: 100,
                noise_p: 0.0,
                lambda: 0.0,
                metric: (v * 20.0).round() / 20.0,
                heldout_metric: *v,
                failed: *f,
            });
        }
        for filtered in [false, true] {
            let rep = aggregate(&records, filtered);
            for row in &rep.ranks {
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 6.0).abs() < 1e-12, "ranks of three methods sum to 6");
            }
            for m in &rep.methods {
                prop_assert!((1.0..=3.0).contains(&m.average_rank));
            }
            let mut shuffled = records.clone();
            shuffled.rotate_left(rot);
            shuffled.reverse();
            // Debug form so that NaN means of all-failed methods compare equal.
            let expect = format!("{rep:?}");
            prop_assert_eq!(format!("{:?}", aggregate(&shuffled, filtered)), expect.clone());
            prop_assert_eq!(format!("{:?}", aggregate(&records, filtered)), expect);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn noise_injection_keeps_features(seed in any::<u64>(), p in 0.0..1.0f64) {
        let cfg = TeacherConfig { train: 40, dev: 10, heldout: 10, ..TeacherConfig::default() };
        let (ds, _) = gen_teacher_tasks(seed % 1000, &cfg, 1).unwrap();
        let noisy = inject_label_noise(&ds, NoiseConfig { p, seed }).unwrap();
        prop_assert!(noisy.train.features.data().iter().zip(ds.train.features.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(&noisy.dev, &ds.dev);
        prop_assert_eq!(&noisy.heldout, &ds.heldout);
    }

    #[test]
    fn generators_are_pure_functions_of_the_seed(seed in 0u64..1000) {
        let cfg = TeacherConfig { train: 30, dev: 10, heldout: 10, ..TeacherConfig::default() };
        prop_assert_eq!(gen_teacher_tasks(seed, &cfg, 2).unwrap(), gen_teacher_tasks(seed, &cfg, 2).unwrap());
    }

    #[test]
    fn every_method_sees_the_same_corrupted_labels(seed in 0u64..50, p in 0.05..0.5f64) {
        let cfg = TeacherConfig { train: 60, dev: 10, heldout: 10, ..TeacherConfig::default() };
        let (ds, _) = gen_teacher_tasks(3, &cfg, 1).unwrap();
        let a = cell_dataset(&ds, 40, p, seed).unwrap();
        let b = cell_dataset(&ds, 40, p, seed).unwrap();
        prop_assert_eq!(a.train.labels, b.train.labels);
    }
}

#[test]
fn gaussian_expectation_matches_frobenius_norm() {
    for seed in 0..5 {
        let m = gaussian(6, 4, 100 + seed);
        let (mean, se) = mc_gaussian_norm_sq(&m, 100_000, seed).unwrap();
        assert!((mean - m.frobenius_sq()).abs() <= 3.0 * se, "seed {seed}: {mean} ± {se} vs {}", m.frobenius_sq());
    }
}

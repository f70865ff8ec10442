use ddb_core::bridging::*;
use ddb_core::data::{DomainData, LabelMap, Sample, TrainData};
use ddb_core::mixing::{BinaryMask, PathKind};
use ddb_core::model::{Arch, SegModel};
use ddb_core::optim::AdamWConfig;
use ddb_core::ops;
use ddb_core::train::StageSchedule;
use ddb_core::{DetRng, Tape, Tensor};
use proptest::prelude::*;

fn model(seed: u64) -> SegModel {
    SegModel::init(Arch::toy(3, 4), &mut DetRng::new(seed)).unwrap()
}

fn image(h: usize, w: usize, rng: &mut DetRng) -> Tensor {
    Tensor::new(&[h, w, 3], (0..h * w * 3).map(|_| rng.uniform()).collect()).unwrap()
}

fn labels(h: usize, w: usize, rng: &mut DetRng) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.below(4) as u8).collect()).unwrap()
}

#[test]
fn ema_matches_geometric_closed_form() {
    let (theta, phi) = (model(1), model(2));
    for n in [1u32, 10, 100] {
        let mut teacher = EmaTeacher::new(&phi, 0.99).unwrap();
        for _ in 0..n {
            ema_update(&mut teacher, &theta).unwrap();
        }
        let an = 0.99f64.powi(n as i32);
        for ((t, s), f) in teacher.model().params().iter().zip(theta.params()).zip(phi.params()) {
            for ((&p, &q), &r) in t.value.data().iter().zip(s.value.data()).zip(f.value.data()) {
                assert!((p - (q + an * (r - q))).abs() < 1e-12);
            }
        }
    }
}

/// Scalar-loop `sum_i w_i * -ln softmax(logits_i)[y_i]`.
fn ce_loop(logits: &Tensor, labels: &LabelMap, weights: &[f64]) -> f64 {
    let k = logits.shape()[2];
    let mut total = 0.0;
    for (i, &y) in labels.data().iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        total += weights[i] * -((row[y as usize] - m) - z.ln());
    }
    total
}

#[test]
fn path_loss_matches_loop_oracle() {
    let mut rng = DetRng::new(8);
    for seed in 0..5 {
        let student = model(10 + seed);
        let teacher = model(20 + seed);
        let (xs, xt) = (image(16, 16, &mut rng), image(16, 16, &mut rng));
        let ys = labels(16, 16, &mut rng);
        for kind in [PathKind::Region, PathKind::Class] {
            let (mixed, w, pseudo) = bridge_sample(&teacher, kind, 0.3, 0.5, &xs, &ys, &xt, &mut rng).unwrap();
            let mut tape = Tape::new();
            let bound = student.bind(&mut tape);
            let v = path_loss(&mut tape, &student, &bound, &xs, &ys, &mixed, &w).unwrap();
            let (_, ls) = student.infer(&xs).unwrap();
            let (_, lm) = student.infer(&mixed.image).unwrap();
            let src = ce_loop(&ls, &ys, &[1.0; 256]);
            let brg = ce_loop(&lm, mixed.hard_label().unwrap(), w.0.data());
            assert!((tape.value(v.source).item() - src).abs() < 1e-10);
            assert!((tape.value(v.bridge).item() - brg).abs() < 1e-10);
            assert!((tape.value(v.total).item() - src - brg).abs() < 1e-10);
            let mut distinct: Vec<f64> = w.0.data().to_vec();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            assert!(distinct.iter().all(|&x| x == 1.0 || x == pseudo.ratio));
        }
    }
}

#[test]
fn path_loss_degenerate_mixes() {
    let mut rng = DetRng::new(9);
    let student = model(3);
    let (xs, xt) = (image(16, 16, &mut rng), image(16, 16, &mut rng));
    let (ys, yt) = (labels(16, 16, &mut rng), labels(16, 16, &mut rng));
    let eval = |mixed: &ddb_core::mixing::MixedSample, w: f64| {
        let mut tape = Tape::new();
        let bound = student.bind(&mut tape);
        let weights = WeightMap(Tensor::full(&[16, 16], w));
        let v = path_loss(&mut tape, &student, &bound, &xs, &ys, mixed, &weights).unwrap();
        (tape.value(v.source).item(), tape.value(v.total).item())
    };
    let zero_mask = BinaryMask::zeros(16, 16);
    let mixed = ddb_core::mixing::apply_local_mix(&xs, &ys, &xt, &yt, &zero_mask, PathKind::Region).unwrap();
    let (src, total) = eval(&mixed, 0.0);
    assert_eq!(src, total);
    let pure = ddb_core::mixing::apply_local_mix(&xs, &ys, &xt, &yt, &BinaryMask::ones(16, 16), PathKind::Region).unwrap();
    let (src, total) = eval(&pure, 1.0);
    assert!((total - 2.0 * src).abs() < 1e-12);
}

#[test]
fn pseudo_labels_are_the_teacher_argmax() {
    let mut rng = DetRng::new(4);
    let teacher = model(5);
    let x = image(16, 16, &mut rng);
    let pack = make_pseudo_labels(&teacher, &x, 0.968).unwrap();
    let (_, logits) = teacher.infer(&x).unwrap();
    let probs = ops::softmax(&logits, 2).unwrap();
    assert_eq!(pack.labels, LabelMap::from_argmax(&logits).unwrap());
    let confident = probs.data().chunks(4).filter(|r| r.iter().cloned().fold(0.0, f64::max) > 0.968).count();
    assert_eq!(pack.ratio, confident as f64 / 256.0);
}

fn tiny_data(rng: &mut DetRng) -> TrainData {
    let src = (0..3).map(|_| Sample { image: image(16, 16, rng), label: Some(labels(16, 16, rng)) }).collect();
    let tgt = (0..3).map(|_| Sample { image: image(16, 16, rng), label: None }).collect();
    TrainData {
        sources: vec![DomainData { name: "s".into(), samples: src }],
        targets: vec![DomainData { name: "t".into(), samples: tgt }],
    }
}

fn cfg(steps: u64, lr: f64) -> PathConfig {
    let optimizer = AdamWConfig { lr_extractor: lr, lr_head: lr, ..AdamWConfig::default() };
    PathConfig::new(PathKind::Region, StageSchedule { steps, batch_size: 2, optimizer })
}

#[test]
fn zero_steps_or_zero_rate_leave_models_untouched() {
    let mut rng = DetRng::new(6);
    let data = tiny_data(&mut rng);
    for (steps, lr) in [(0, 1e-3), (3, 0.0)] {
        let mut student = model(7);
        let init = student.clone();
        let mut teacher = EmaTeacher::new(&student, 0.99).unwrap();
        let logs = dpdb_stage(&mut student, &mut teacher, &data, &cfg(steps, lr), &mut DetRng::new(1)).unwrap();
        assert_eq!(logs.len() as u64, steps);
        assert_eq!(student, init);
        assert_eq!(teacher.model(), &init);
    }
}

#[test]
fn stage_moves_student_and_teacher_deterministically() {
    let mut rng = DetRng::new(6);
    let data = tiny_data(&mut rng);
    let run = || {
        let mut student = model(7);
        let mut teacher = EmaTeacher::new(&student, 0.99).unwrap();
        let logs = dpdb_stage(&mut student, &mut teacher, &data, &cfg(3, 1e-3), &mut DetRng::new(1)).unwrap();
        (student, teacher, logs)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    assert_ne!(a.0, model(7));
    assert!(a.2.iter().all(|l| (0.0..=1.0).contains(&l.mean_ratio) && l.source_loss > 0.0));
}

#[test]
fn class_path_unselected_pixels_come_from_target() {
    let mut rng = DetRng::new(12);
    let teacher = model(1);
    for _ in 0..50 {
        let (xs, xt) = (image(16, 16, &mut rng), image(16, 16, &mut rng));
        let ys = labels(16, 16, &mut rng);
        let (mixed, _, pseudo) = bridge_sample(&teacher, PathKind::Class, 0.3, 0.968, &xs, &ys, &xt, &mut rng).unwrap();
        let mask = mixed.mask.as_ref().unwrap();
        let label = mixed.hard_label().unwrap();
        for i in 0..256 {
            if mask.data()[i] == 1 {
                assert_eq!(label.data()[i], ys.data()[i]);
            } else {
                assert_eq!(label.data()[i], pseudo.labels.data()[i]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn teacher_stays_in_convex_hull(seed in any::<u64>(), alpha in 0.0f64..0.999, steps in 1usize..20) {
        let mut rng = DetRng::new(seed);
        let arch = Arch { in_channels: 1, widths: vec![2], kernel: 3, stride: 2, classes: 2 };
        let init = SegModel::init(arch.clone(), &mut rng).unwrap();
        let mut teacher = EmaTeacher::new(&init, alpha).unwrap();
        let mut lo: Vec<Vec<f64>> = init.params().iter().map(|p| p.value.data().to_vec()).collect();
        let mut hi = lo.clone();
        for _ in 0..steps {
            let s = SegModel::init(arch.clone(), &mut rng).unwrap();
            for (i, p) in s.params().iter().enumerate() {
                for (j, &v) in p.value.data().iter().enumerate() {
                    lo[i][j] = lo[i][j].min(v);
                    hi[i][j] = hi[i][j].max(v);
                }
            }
            teacher.update(&s).unwrap();
        }
        for (i, p) in teacher.model().params().iter().enumerate() {
            for (j, &v) in p.value.data().iter().enumerate() {
                prop_assert!(v >= lo[i][j] - 1e-12 && v <= hi[i][j] + 1e-12);
            }
        }
    }
}

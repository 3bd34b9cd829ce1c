//! Teacher-student pretraining and the hand-off of its FFN weights.

mod common;

use doremi::checkpoint::Checkpoint;
use doremi::net::BlockRef;
use doremi::pretrain::{ema_update, export_pretrained_ffn, import_pretrained_ffn, Pretrainer, PRETRAINED_FFN_KIND};
use doremi::synth::{CorpusManifest, Split};
use doremi::train::{DoremiModel, TrainConfig};

fn small_pretrainer(seed: u64) -> Pretrainer {
    Pretrainer::new(TrainConfig::default().pretrain_config(), seed).unwrap()
}

#[test]
fn ema_matches_geometric_closed_form() {
    let p = small_pretrainer(0);
    let mut student = p.student.clone();
    // a student far from the teacher, held fixed
    for id in student.ids().collect::<Vec<_>>() {
        let shape = student.get(id).shape().to_vec();
        *student.get_mut(id) = common::normal(&mut common::rng(id.index() as u64), &shape, 1.0);
    }
    let mut teacher = p.teacher.clone();
    let m: f64 = 0.996;
    for _ in 0..100 {
        ema_update(&mut teacher, &student, m).unwrap();
    }
    let w = m.powi(100);
    let mut worst: f64 = 0.0;
    for id in teacher.ids() {
        for ((t, t0), s) in teacher.get(id).data().iter().zip(p.teacher.get(id).data()).zip(student.get(id).data()) {
            worst = worst.max((t - (w * t0 + (1.0 - w) * s)).abs());
        }
    }
    assert!(worst <= 1e-12, "worst {worst:e}");
}

#[test]
fn teacher_pass_records_no_gradients_and_prototypes_stay_unit() {
    let mut p = small_pretrainer(1);
    let scenes = CorpusManifest::standard().scenes(0, Split::Train).unwrap();
    let view = p.teacher_view(&scenes[0]).unwrap();
    assert_eq!(view.grad_leaves, 0);
    let teacher_before = p.teacher.clone();
    let history = p.run(&scenes[..2], 2).unwrap();
    assert!(history.iter().all(|l| l.is_finite()));
    let protos = p.student.get(p.model.head.prototypes);
    for j in 0..protos.cols() {
        let n: f64 = (0..protos.rows()).map(|i| protos.get2(i, j).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() <= 1e-12, "column {j} norm {n}");
    }
    assert_ne!(teacher_before, p.teacher);
    for id in p.teacher.ids() {
        assert!(p.teacher.is_frozen(id));
    }
}

#[test]
fn pretraining_is_reproducible() {
    let scenes = CorpusManifest::standard().scenes(1, Split::Train).unwrap();
    let mut a = small_pretrainer(5);
    let mut b = small_pretrainer(5);
    assert_eq!(a.run(&scenes[..2], 1).unwrap(), b.run(&scenes[..2], 1).unwrap());
    assert_eq!(a.checkpoint().hash().unwrap(), b.checkpoint().hash().unwrap());
}

#[test]
fn ffn_export_import_is_identity() {
    let p = small_pretrainer(2);
    let cfg = TrainConfig::default();
    let blocks = cfg.placement();
    let ckpt = export_pretrained_ffn(&p.student, &p.model.backbone, &blocks).unwrap();
    assert_eq!(ckpt.kind, PRETRAINED_FFN_KIND);
    let round = Checkpoint::read(&mut ckpt.to_bytes().unwrap().as_slice()).unwrap();
    let mut target = DoremiModel::build(&cfg, &[0, 1, 2], None).unwrap();
    for &at in &blocks {
        let ffn = target.backbone.block(at).unwrap().ffn.clone();
        import_pretrained_ffn(&round, at, &ffn, &mut target.store).unwrap();
        let src = p.model.backbone.block(at).unwrap().ffn.params();
        for (s, t) in src.iter().zip(ffn.params()) {
            assert_eq!(p.student.get(*s), target.store.get(t));
        }
    }
    let missing = BlockRef { stage: 0, block: 0 };
    assert!(!blocks.contains(&missing));
    let ffn = target.backbone.block(missing).unwrap().ffn.clone();
    assert!(import_pretrained_ffn(&round, missing, &ffn, &mut target.store).is_err());
}

#[test]
fn experts_start_as_copies_of_the_pretrained_ffn() {
    let p = small_pretrainer(3);
    let cfg = TrainConfig::default();
    let model = DoremiModel::build(&cfg, &[0, 1, 2], Some(&p.checkpoint())).unwrap();
    for layer in &model.layers {
        let src = p.model.backbone.block(layer.at).unwrap().ffn.params();
        let re = layer.bank.re.as_ref().unwrap();
        for copy in layer.bank.experts.iter().chain([re]) {
            for (s, t) in src.iter().zip(copy.params()) {
                assert_eq!(p.student.get(*s), model.store.get(t));
            }
        }
        for id in re.params() {
            assert!(model.store.is_frozen(id));
        }
    }
}

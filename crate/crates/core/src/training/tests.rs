use super::*;
use crate::cmtpp::{init_projector, ProjectorConfig};
use crate::model::ModelConfig;
use crate::numerics::{finite_difference_coords, log_softmax, DenseArray, ParamTensors};
use rand::{Rng, SeedableRng};

fn tiny_backbone() -> BackboneParams {
    let mut b = BackboneParams::init(&ModelConfig {
        vocab_size: 13,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 12,
        ffn_ratio: 2.0,
        norm_eps: 1e-6,
        seed: 1,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for t in b.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    b
}

fn tiny_projector(k_max: usize) -> ProjectorParams {
    let mut p = init_projector(
        &ProjectorConfig {
            k_max,
            expansion_ratio: 1.5,
            seed: 3,
        },
        8,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in p.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.2..0.2);
        }
    }
    p
}

fn tiny_batch(seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Batch::new((0..2 * 7).map(|_| rng.random_range(0..13)).collect(), 2, 7).unwrap()
}

fn cfg(offsets: Vec<usize>, weights: Vec<f64>, lambda_kd: f64) -> TrainingConfig {
    TrainingConfig {
        seq_len: 7,
        batch_size: 2,
        offsets,
        offset_weights: weights,
        lambda_kd,
        ..TrainingConfig::default()
    }
}

#[test]
fn default_config_is_valid_and_uniform() {
    let c = TrainingConfig::default();
    assert!(c.validate().is_ok());
    assert_eq!(c.lambda_kd, 0.7);
    assert_eq!(c.temperature, 2.0);
    assert_eq!(c.peak_lr, 2.0e-4);
    let c = cfg(vec![1, 2, 3], vec![], 0.7);
    assert_eq!(c.weights(), vec![1.0 / 3.0; 3]);
}

#[test]
fn config_issues_are_keyed() {
    let c = TrainingConfig {
        lambda_kd: 1.5,
        temperature: 0.0,
        warmup_ratio: 1.0,
        offsets: vec![1, 2],
        offset_weights: vec![0.5, 0.6],
        ..TrainingConfig::default()
    };
    let keys: Vec<String> = c.issues().into_iter().map(|i| i.key).collect();
    assert_eq!(
        keys,
        ["warmup_ratio", "lambda_kd", "temperature", "offset_weights"]
    );
    let dup = TrainingConfig {
        offsets: vec![1, 1],
        ..TrainingConfig::default()
    };
    assert_eq!(dup.issues()[0].key, "offsets");
}

/// Recomputes every per-offset component outside the training path.
fn independent_components(
    batch: &Batch,
    backbone: &BackboneParams,
    projector: &ProjectorParams,
    k: usize,
    t: f64,
) -> (f64, f64) {
    let v = backbone.vocab_size();
    let mut student = Vec::new();
    let mut teacher = Vec::new();
    let mut targets = Vec::new();
    for b in 0..batch.batch_size {
        let row = batch.row(b);
        let (hidden, logits) = backbone.forward(row).unwrap();
        for (i, target) in mtp_targets(row, k).into_iter().enumerate() {
            if let Some(target) = target {
                let out = projector.forward(hidden.row(i), k).unwrap();
                student.extend(backbone.lm_logits(&out));
                teacher.extend_from_slice(logits.row(i + k));
                targets.push(Some(target));
            }
        }
    }
    let n = targets.len();
    let student = DenseArray::from_vec(&[n, v], student).unwrap();
    let teacher = DenseArray::from_vec(&[n, v], teacher).unwrap();
    let ce = ce_loss(&log_softmax(&student, 1).unwrap(), &targets).unwrap();
    let kd = kd_loss(&teacher, &student, t).unwrap();
    (ce.value, kd)
}

#[test]
fn total_loss_decomposes_into_offset_components() {
    let (backbone, projector) = (tiny_backbone(), tiny_projector(3));
    let batch = tiny_batch(5);
    let c = cfg(vec![1, 3], vec![0.25, 0.75], 0.7);
    let report = total_loss(&batch, &backbone, &projector, &c).unwrap();
    let mut recomposed = 0.0;
    for o in &report.offsets {
        let (ce, kd) = independent_components(&batch, &backbone, &projector, o.offset, c.temperature);
        assert!((ce - o.ce).abs() < 1e-10);
        assert!((kd - o.kd).abs() < 1e-10);
        recomposed += o.weight * ((1.0 - c.lambda_kd) * ce + c.lambda_kd * kd);
    }
    assert!((report.total - recomposed).abs() < 1e-10);
    assert_eq!(report.offsets[1].count, 2 * (7 - 4));
}

#[test]
fn zero_kd_weight_leaves_cross_entropy() {
    let (backbone, projector) = (tiny_backbone(), tiny_projector(2));
    let batch = tiny_batch(6);
    let report = total_loss(&batch, &backbone, &projector, &cfg(vec![1, 2], vec![], 0.0)).unwrap();
    let ce: f64 = report.offsets.iter().map(|o| o.weight * o.ce).sum();
    assert!((report.total - ce).abs() < 1e-12);
}

#[test]
fn offsets_beyond_the_sequence_contribute_nothing() {
    let (backbone, projector) = (tiny_backbone(), tiny_projector(3));
    let batch = Batch::new(vec![1, 2, 3, 4], 2, 2).unwrap();
    let mut c = cfg(vec![3], vec![], 0.7);
    c.seq_len = 2;
    let report = total_loss(&batch, &backbone, &projector, &c).unwrap();
    assert_eq!(report.total, 0.0);
    assert_eq!(report.offsets[0].count, 0);
    assert_eq!(report.grads.flatten().iter().map(|x| x.abs()).sum::<f64>(), 0.0);
}

#[test]
fn unsupported_offsets_are_rejected() {
    let (backbone, projector) = (tiny_backbone(), tiny_projector(2));
    let err = total_loss(&tiny_batch(1), &backbone, &projector, &cfg(vec![3], vec![], 0.7));
    assert!(matches!(err, Err(Error::OffsetOutOfRange { offset: 3, k_max: 2 })));
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let (backbone, projector) = (tiny_backbone(), tiny_projector(2));
    let batch = tiny_batch(7);
    let c = cfg(vec![1, 2], vec![0.4, 0.6], 0.7);
    let report = total_loss(&batch, &backbone, &projector, &c).unwrap();
    let analytic = report.grads.flatten();

    let flat = DenseArray::from_vec(&[projector.num_params()], projector.flatten()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let coords: Vec<usize> = (0..20).map(|_| rng.random_range(0..flat.len())).collect();
    let mut q = projector.clone();
    let numeric = finite_difference_coords(
        |theta| {
            q.assign_flat(theta.data());
            total_loss(&batch, &backbone, &q, &c).unwrap().total
        },
        &flat,
        &coords,
        1e-5,
    )
    .unwrap();
    for (&i, n) in coords.iter().zip(&numeric) {
        let a = analytic[i];
        let scale = a.abs().max(n.abs());
        assert!(
            scale < 1e-9 || (a - n).abs() / scale < 1e-4,
            "coord {i}: analytic {a} numeric {n}"
        );
    }
}

#[test]
fn backbone_loss_gradient_matches_finite_differences() {
    let backbone = tiny_backbone();
    let batch = tiny_batch(9);
    let (_, grads) = backbone_loss(&batch, &backbone).unwrap();
    let analytic = grads.flatten();
    let flat = DenseArray::from_vec(&[backbone.num_params()], backbone.flatten()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let coords: Vec<usize> = (0..20).map(|_| rng.random_range(0..flat.len())).collect();
    let mut q = backbone.clone();
    let numeric = finite_difference_coords(
        |theta| {
            q.assign_flat(theta.data());
            backbone_loss(&batch, &q).unwrap().0.value
        },
        &flat,
        &coords,
        1e-5,
    )
    .unwrap();
    for (&i, n) in coords.iter().zip(&numeric) {
        let a = analytic[i];
        let scale = a.abs().max(n.abs());
        assert!(scale < 1e-9 || (a - n).abs() / scale < 1e-4, "coord {i}");
    }
}

#[test]
fn small_corpus_is_rejected() {
    let c = cfg(vec![1], vec![], 0.7);
    let tokens = vec![1u32; 10 * 2 * 7 - 1];
    let err = train_backbone(tiny_backbone(), &tokens, &c, |_| ControlFlow::Continue(()));
    assert!(matches!(
        err,
        Err(Error::CorpusTooSmall { tokens: 139, required: 140 })
    ));
}

#[test]
fn non_finite_loss_reports_its_step() {
    let mut backbone = tiny_backbone();
    backbone.lm_head.data_mut()[0] = f64::NAN;
    let c = cfg(vec![1], vec![], 0.7);
    let tokens = vec![0u32; 200];
    let err = train_backbone(backbone.clone(), &tokens, &c, |_| ControlFlow::Continue(()));
    assert!(matches!(err, Err(Error::NonFiniteLoss { step: 1, .. })));
    let err = train_projector(tiny_projector(1), &backbone, &tokens, &c, |_| ControlFlow::Continue(()));
    assert!(matches!(err, Err(Error::NonFiniteLoss { step: 1, .. })));
}

#[test]
fn projector_training_leaves_backbone_untouched() {
    let backbone = tiny_backbone();
    let before = backbone.fingerprint();
    let mut c = cfg(vec![1, 2], vec![], 0.7);
    c.total_steps = 20;
    c.peak_lr = 1e-2;
    let tokens: Vec<u32> = (0..400).map(|i| (i * 7 % 13) as u32).collect();
    let init = tiny_projector(2);
    let out = train_projector(init.clone(), &backbone, &tokens, &c, |_| ControlFlow::Continue(())).unwrap();
    assert_eq!(before, backbone.fingerprint());
    assert_ne!(out.params.fingerprint(), init.fingerprint());
    assert_eq!(out.log.len(), 20);
    assert_eq!(out.log[0].ce.len(), 2);
}

#[test]
fn observer_can_stop_training() {
    let mut c = cfg(vec![1], vec![], 0.7);
    c.total_steps = 50;
    let tokens: Vec<u32> = (0..400).map(|i| (i % 13) as u32).collect();
    let out = train_backbone(tiny_backbone(), &tokens, &c, |l| {
        if l.step == 5 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.log.len(), 5);
}

#[test]
fn training_is_deterministic() {
    let mut c = cfg(vec![1], vec![], 0.7);
    c.total_steps = 5;
    let tokens: Vec<u32> = (0..400).map(|i| (i * 5 % 13) as u32).collect();
    let run = || {
        train_backbone(tiny_backbone(), &tokens, &c, |_| ControlFlow::Continue(()))
            .unwrap()
            .params
            .fingerprint()
    };
    assert_eq!(run(), run());
}

#[test]
fn loss_csv_layout() {
    let log = vec![StepLog {
        step: 1,
        lr: 1e-4,
        total: 2.5,
        ce: vec![1.0, 2.0],
        kd: vec![3.0, 4.0],
        grad_norm: 0.5,
    }];
    let csv = loss_csv(&[1, 2], &log);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "step,lr,total,ce_1,ce_2,kd_1,kd_2");
    assert_eq!(lines.next().unwrap(), "1,1e-4,2.5,1,2,3,4");
    let backbone_csv = loss_csv(
        &[0],
        &[StepLog {
            kd: vec![],
            ce: vec![2.5],
            ..log[0].clone()
        }],
    );
    assert!(backbone_csv.starts_with("step,lr,total,ce_0\n"));
}

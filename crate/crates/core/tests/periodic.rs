//! Trainability on a deterministic period-6 corpus at the default model size.

use std::ops::ControlFlow;

use tegu_core::cmtpp::{init_projector, ProjectorConfig};
use tegu_core::decoding::greedy_decode;
use tegu_core::metrics::entropy_sweep;
use tegu_core::model::{BackboneParams, ModelConfig};
use tegu_core::numerics::ParamTensors;
use tegu_core::training::{tokenize, train_backbone, train_projector, TrainingConfig};

fn corpus() -> Vec<u32> {
    tokenize("abcdef".repeat(4000).as_bytes())
}

/// Smaller batch than the default so the run fits a single core.
fn smoke_cfg(peak_lr: f64, offsets: Vec<usize>) -> TrainingConfig {
    TrainingConfig {
        batch_size: 4,
        total_steps: 2000,
        peak_lr,
        offsets,
        ..TrainingConfig::default()
    }
}

fn stop_below(threshold: f64) -> impl FnMut(&tegu_core::training::StepLog) -> ControlFlow<()> {
    move |l| {
        if l.ce.iter().all(|&c| c < threshold) {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    }
}

#[test]
fn periodic_corpus_is_learned_end_to_end() {
    let tokens = corpus();
    let model = ModelConfig::default();
    let bb = train_backbone(
        BackboneParams::init(&model).unwrap(),
        &tokens,
        &smoke_cfg(1e-3, vec![1]),
        stop_below(0.05),
    )
    .unwrap();
    let last = bb.log.last().unwrap();
    assert!(last.total < 0.05, "backbone CE {} after {} steps", last.total, last.step);
    let bb_steps = last.step;
    let backbone = bb.params;

    // Greedy continues the cycle.
    let out = greedy_decode(&tokenize(b"abcdefab"), &backbone, 24).unwrap();
    assert_eq!(out.continuation(), tokenize(b"cdefabcdefabcdefabcdefab").as_slice());

    let before = backbone.fingerprint();
    let init = init_projector(&ProjectorConfig::default(), model.d_model).unwrap();
    let proj = train_projector(
        init,
        &backbone,
        &tokens,
        &smoke_cfg(2e-4, vec![1, 2]),
        stop_below(0.1),
    )
    .unwrap();
    let last = proj.log.last().unwrap();
    eprintln!("backbone steps {}, projector steps {}", bb_steps, last.step);
    assert!(last.ce[0] < 0.1, "projector k=1 CE {} after {} steps", last.ce[0], last.step);
    assert_eq!(before, backbone.fingerprint());

    // Step conditioning is live: the two offsets disagree on the same state.
    let (hidden, _) = backbone.forward(&tokens[..16]).unwrap();
    let a = proj.params.forward(hidden.row(10), 1).unwrap();
    let b = proj.params.forward(hidden.row(10), 2).unwrap();
    let linf = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(linf > 0.0);

    // Near zero relative to the uniform ceiling ln 256.
    let report = entropy_sweep(&tokens[..2048], &backbone, &proj.params, &[1, 2]).unwrap();
    let ceiling = 256f64.ln();
    for o in &report.offsets {
        assert!(o.mean < 0.1 * ceiling, "offset {} mean entropy {}", o.offset, o.mean);
    }
}

/// 100-step moving average of the projector loss falls across every
/// 1,000-step window.
#[test]
fn projector_loss_trends_down() {
    let tokens = corpus();
    let model = ModelConfig {
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 32,
        ..ModelConfig::default()
    };
    let bb_cfg = TrainingConfig {
        seq_len: 32,
        batch_size: 4,
        total_steps: 400,
        peak_lr: 3e-3,
        ..TrainingConfig::default()
    };
    let backbone = train_backbone(BackboneParams::init(&model).unwrap(), &tokens, &bb_cfg, |_| {
        ControlFlow::Continue(())
    })
    .unwrap()
    .params;
    let cfg = TrainingConfig {
        total_steps: 1200,
        peak_lr: 1e-3,
        offsets: vec![1, 2],
        ..bb_cfg
    };
    let init = init_projector(&ProjectorConfig::default(), model.d_model).unwrap();
    let out = train_projector(init, &backbone, &tokens, &cfg, |_| ControlFlow::Continue(())).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|l| l.total).collect();
    let ma: Vec<f64> = losses.windows(100).map(|w| w.iter().sum::<f64>() / 100.0).collect();
    for start in 0..ma.len().saturating_sub(1000) {
        assert!(
            ma[start + 1000] < ma[start],
            "moving average rose from {} to {} over window at {start}",
            ma[start],
            ma[start + 1000]
        );
    }
}

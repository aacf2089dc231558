mod common;

use std::collections::BTreeSet;

use common::{conv_oracle, max_abs_diff, randomized};
use maect::checkpoint::Checkpoint;
use maect::losses::SsimParams;
use maect::mae::{
    evaluate, finetune_step, generate_mask, pretrain_step, pretrain_step_full, run_protocol, run_stage,
    transfer_weights, MaskConfig, Protocol, ProtocolData, ProtocolPlan, Stage, StageData, TrainPlan,
};
use maect::optim::{LrSchedule, Optimizer};
use maect::sim::{build_dataset, NoiseParams, PairedSample};
use maect::swin::{ModelConfig, Shortcuts, SwinDenoiser};
use maect::{Error, Tensor};

fn off_model(size: usize, seed: u64) -> SwinDenoiser {
    let mut cfg = ModelConfig::tiny(size);
    cfg.shortcuts = Shortcuts::OFF;
    SwinDenoiser::new(cfg, seed).unwrap()
}

fn plan(stage: Stage, epochs: usize, lr: f64, seed: u64) -> TrainPlan {
    TrainPlan {
        epochs,
        seed,
        schedule: LrSchedule { base_lr: lr, ..LrSchedule::default() },
        ..TrainPlan::new(stage)
    }
}

fn data(n: usize, seed: u64) -> Vec<PairedSample> {
    build_dataset(n, 16, &NoiseParams::default(), seed).unwrap()
}

fn pretrained(seed: u64) -> SwinDenoiser {
    let mut m = off_model(16, seed);
    let d = data(4, seed);
    let imgs: Vec<&Tensor> = d.iter().map(|s| &s.ldct).collect();
    run_stage(&mut m, &plan(Stage::Pretrain, 2, 1e-3, seed), StageData::Unlabeled(&imgs), &[]).unwrap();
    m
}

#[test]
fn transfer_is_bit_exact_and_reconnects_shortcuts() {
    let m = pretrained(1);
    let ckpt = Checkpoint::from_model(&m);
    let fresh = SwinDenoiser::new(ModelConfig::tiny(16), 99).unwrap();
    let t = transfer_weights(&ckpt, fresh).unwrap();
    assert_eq!(t.shortcuts(), Shortcuts::ON);
    for nt in &ckpt.tensors {
        let p = t.params().get(&nt.name).unwrap();
        assert_eq!(p.value.shape(), nt.shape.as_slice());
        for (a, b) in p.value.data().iter().zip(&nt.data) {
            assert_eq!(a.to_bits(), (*b as f64).to_bits());
        }
    }
    // Through the byte format as well.
    let again = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
    assert_eq!(again, ckpt);
    assert_eq!(Checkpoint::from_model(&t).tensors, ckpt.tensors);
}

#[test]
fn transfer_rejects_other_architectures() {
    let ckpt = Checkpoint::from_model(&off_model(16, 1));
    let mut cfg = ModelConfig::tiny(16);
    cfg.embed_dim = 16;
    let err = transfer_weights(&ckpt, SwinDenoiser::new(cfg, 0).unwrap()).unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.contains("embed_dim")), "{err}");

    let mut partial = ckpt.clone();
    partial.tensors.pop();
    let err = transfer_weights(&partial, SwinDenoiser::new(ModelConfig::tiny(16), 0).unwrap()).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
}

#[test]
fn transferred_forward_minus_shortcuts_equals_pretrained() {
    let mut pre = randomized(ModelConfig::tiny(16), 5);
    pre.set_shortcuts(Shortcuts::OFF);
    let ckpt = Checkpoint::from_model(&pre);
    let pre = ckpt.to_model().unwrap();
    let t = transfer_weights(&ckpt, ckpt.to_model().unwrap()).unwrap();
    let x = common::uniform(&[1, 16, 16, 1], 0.0, 1.0, 6);
    let on = t.forward(&x).unwrap();
    // The trunk skip passes the shallow features through conv_last, which is
    // linear apart from its bias.
    let p = |n: &str| t.params().get(n).unwrap().value.clone();
    let f = t.shallow_features(&x).unwrap();
    let skip = conv_oracle(&f, &p("conv_last.weight"), &Tensor::zeros(&[1]));
    let stripped: Vec<f64> = on.data().iter().zip(x.data()).zip(skip.data()).map(|((o, x), s)| o - x - s).collect();
    let off = pre.forward(&x).unwrap();
    assert!(max_abs_diff(&stripped, off.data()) < 1e-6);
}

#[test]
fn parameter_set_is_identical_across_stages() {
    let on = SwinDenoiser::new(ModelConfig::tiny(16), 3).unwrap();
    let off = off_model(16, 3);
    let names = |m: &SwinDenoiser| m.params().iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect::<Vec<_>>();
    assert_eq!(names(&on), names(&off));
    assert_eq!(on.params(), off.params());
}

#[test]
fn protocol_guards() {
    let d = data(1, 0);
    let mask = generate_mask(16, 16, 8, 0.75, 0).unwrap();
    let mut on = SwinDenoiser::new(ModelConfig::tiny(16), 0).unwrap();
    let mut opt = Optimizer::new(on.params(), Default::default(), LrSchedule::default());
    let loss = Default::default();
    assert!(matches!(pretrain_step(&mut on, &d[0].ldct, &mask, &mut opt, &loss), Err(Error::Config(_))));
    let mut off = off_model(16, 0);
    assert!(matches!(finetune_step(&mut off, &d[0].ldct, &d[0].ndct, &mut opt, &loss), Err(Error::Config(_))));
    let small = Tensor::zeros(&[8, 8]);
    assert!(matches!(finetune_step(&mut on, &d[0].ldct, &small, &mut opt, &loss), Err(Error::Data(_))));
    assert_eq!(opt.state.step_count(), 0);
    let imgs = [&d[0].ldct];
    assert!(run_stage(&mut on, &plan(Stage::Pretrain, 1, 1e-3, 0), StageData::Unlabeled(&imgs), &[]).is_err());
    assert!(run_stage(&mut off, &plan(Stage::Finetune, 1, 1e-3, 0), StageData::Paired(&d), &[]).is_err());
}

#[test]
fn empty_mask_gives_zero_masked_loss() {
    let mut m = off_model(16, 2);
    let x = data(1, 2)[0].ldct.clone();
    let mask = generate_mask(16, 16, 8, 0.0, 0).unwrap();
    let mut opt = Optimizer::new(m.params(), Default::default(), LrSchedule::default());
    assert_eq!(pretrain_step(&mut m, &x, &mask, &mut opt, &Default::default()).unwrap(), 0.0);
}

#[test]
fn identity_finetune_has_zero_loss() {
    let mut m = SwinDenoiser::new(ModelConfig::tiny(16), 2).unwrap();
    for p in m.params_mut().iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = data(1, 3)[0].ndct.clone();
    let mut opt = Optimizer::new(m.params(), Default::default(), LrSchedule::default());
    assert!(finetune_step(&mut m, &x, &x, &mut opt, &Default::default()).unwrap().abs() < 1e-12);
}

#[test]
fn identity_model_eval_reports_ldct_quality() {
    let mut m = SwinDenoiser::new(ModelConfig::tiny(16), 2).unwrap();
    for p in m.params_mut().iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    for r in evaluate(&m, &data(3, 4), &SsimParams::default()).unwrap() {
        assert!((r.ssim - r.ldct_ssim).abs() < 1e-12);
        assert!((r.rmse - r.ldct_rmse).abs() < 1e-12);
    }
}

#[test]
fn log_has_one_row_per_iteration() {
    let d = data(5, 7);
    for (epochs, batch) in [(1, 1), (2, 2), (3, 5), (2, 4)] {
        let mut m = SwinDenoiser::new(ModelConfig::tiny(16), 0).unwrap();
        let p = TrainPlan { batch_size: batch, ..plan(Stage::Finetune, epochs, 1e-3, 0) };
        let log = run_stage(&mut m, &p, StageData::Paired(&d), &[]).unwrap();
        assert_eq!(log.len(), epochs * 5usize.div_ceil(batch));
        assert!(log.iter().enumerate().all(|(i, r)| r.iter == i && r.loss.is_some()));
        let with_val = run_stage(&mut m, &p, StageData::Paired(&d), &d[..2]).unwrap();
        assert_eq!(with_val.iter().filter(|r| r.loss.is_none()).count(), epochs);
    }
}

#[test]
fn pretraining_reduces_reconstruction_loss() {
    for seed in 0..3 {
        let mut m = off_model(16, seed);
        let d = data(10, 100 + seed);
        let imgs: Vec<&Tensor> = d.iter().map(|s| &s.ldct).collect();
        let log = run_stage(&mut m, &plan(Stage::Pretrain, 20, 1e-3, seed), StageData::Unlabeled(&imgs), &[]).unwrap();
        assert_eq!(log.len(), 200);
        let mean = |r: &[maect::mae::LogRow]| r.iter().map(|r| r.loss.unwrap()).sum::<f64>() / r.len() as f64;
        let (first, last) = (mean(&log[..20]), mean(&log[180..]));
        assert!(last < first, "seed {seed}: {first} -> {last}");
    }
}

#[test]
fn batched_pretraining_shares_one_mask() {
    let mut m = off_model(16, 8);
    let d = data(2, 8);
    let mask = generate_mask(16, 16, 8, 0.5, 3).unwrap();
    let x = maect::mae::stack_images(&[&d[0].ldct, &d[1].ldct]).unwrap();
    let mut opt = Optimizer::new(m.params(), Default::default(), LrSchedule::default());
    let out = pretrain_step_full(&mut m, &x, &mask, &mut opt, &Default::default(), true).unwrap();
    assert_eq!(out.prediction.shape(), &[2, 16, 16, 1]);
    assert!(out.loss.is_finite() && out.loss > 0.0);
}

fn protocol_plan(protocol: Protocol) -> ProtocolPlan {
    ProtocolPlan {
        protocol,
        model: ModelConfig::tiny(16),
        init_seed: 4,
        pretrain: TrainPlan { mask: MaskConfig::default(), ..plan(Stage::Pretrain, 1, 1e-3, 5) },
        finetune: plan(Stage::Finetune, 2, 1e-3, 6),
    }
}

#[test]
fn protocols_are_deterministic() {
    let labeled = data(3, 10);
    let unlabeled: Vec<Tensor> = data(2, 11).into_iter().map(|s| s.ldct).collect();
    let d = || ProtocolData { labeled: &labeled, unlabeled: &unlabeled, validation: &labeled[..1] };
    for p in [Protocol::Baseline, Protocol::Supervised, Protocol::SemiSupervised] {
        let a = run_protocol(&protocol_plan(p), d()).unwrap();
        let b = run_protocol(&protocol_plan(p), d()).unwrap();
        assert_eq!(a.finetuned.to_bytes().unwrap(), b.finetuned.to_bytes().unwrap());
        assert_eq!(a.log, b.log);
        assert_eq!(a.pretrained.is_some(), p != Protocol::Baseline);
    }
    let semi = run_protocol(&protocol_plan(Protocol::SemiSupervised), d()).unwrap();
    let sup = run_protocol(&protocol_plan(Protocol::Supervised), d()).unwrap();
    let pre_rows = |o: &maect::mae::ProtocolOutcome| o.log.iter().filter(|r| r.stage == "pretrain").count();
    assert_eq!(pre_rows(&semi), 5);
    assert_eq!(pre_rows(&sup), 3);
}

#[test]
fn semi_without_unlabeled_equals_supervised() {
    let labeled = data(3, 12);
    let d = ProtocolData { labeled: &labeled, unlabeled: &[], validation: &[] };
    let semi = run_protocol(&protocol_plan(Protocol::SemiSupervised), d).unwrap();
    let sup = run_protocol(&protocol_plan(Protocol::Supervised), d).unwrap();
    assert_eq!(semi.finetuned, sup.finetuned);
    assert_eq!(semi.pretrained, sup.pretrained);
}

#[test]
fn finetune_starts_from_transferred_parameters() {
    let ckpt = Checkpoint::from_model(&pretrained(9));
    let t = transfer_weights(&ckpt, SwinDenoiser::new(ModelConfig::tiny(16), 0).unwrap()).unwrap();
    // Zero learning rate: the finetuned model keeps the transferred values.
    let mut m = t.clone();
    run_stage(&mut m, &plan(Stage::Finetune, 1, 0.0, 0), StageData::Paired(&data(2, 9)), &[]).unwrap();
    assert_eq!(m.params().iter().map(|p| &p.value).collect::<Vec<_>>(), t.params().iter().map(|p| &p.value).collect::<Vec<_>>());
    let names: BTreeSet<_> = t.params().names().collect();
    assert_eq!(names, ckpt.tensors.iter().map(|n| n.name.as_str()).collect());
}

#[test]
fn empty_labeled_set_rejected() {
    let d = ProtocolData { labeled: &[], unlabeled: &[], validation: &[] };
    assert!(matches!(run_protocol(&protocol_plan(Protocol::Baseline), d), Err(Error::Data(_))));
}

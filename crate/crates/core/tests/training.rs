use lgqave_core::datamodel::QaMode;
use lgqave_core::model::{forward_on, prepare, ModelDims, ModelParams, Pipeline, PreparedEpisode, Scoring};
use lgqave_core::numcore::{ParamTree, Tape};
use lgqave_core::synthbench::{generate_splits, toy_episode, SynthConfig};
use lgqave_core::training::{
    batch_gradients, batch_loss, contrastive_loss, cosine_lr, evaluate, fit, model_grad_check, sample_negatives,
    CategoryBank, Metric, NegativeSet, StepInputs, TrainConfig, Trainer,
};
use lgqave_core::Exec;
use proptest::prelude::*;

fn brute_ce(scores: &[f64], target: usize) -> f64 {
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    -(scores[target].exp() / z).ln()
}

fn toy_params(seed: u64, d: usize) -> ModelParams {
    ModelParams::init(ModelDims::new(16, 16, d), seed, 0.0, 0.9).unwrap()
}

fn toy_prepared(seed: u64, frames: usize, objects: usize, options: usize, params: &ModelParams) -> PreparedEpisode {
    prepare(&toy_episode(seed, frames, objects, options, 16), params, &Pipeline::default()).unwrap()
}

#[test]
fn contrastive_loss_oracles() {
    assert!((contrastive_loss(1.0, &[0.0, 0.0]) - 0.55144471).abs() < 1e-8);
    assert!((contrastive_loss(0.3, &[0.3; 4]) - 5f64.ln()).abs() < 1e-12);
    assert!((contrastive_loss(-2.0, &[-2.0]) - 2f64.ln()).abs() < 1e-12);
    assert!(contrastive_loss(60.0, &[0.0, 0.0]) < 1e-20);
    assert!(contrastive_loss(1e4, &[-1e4]).is_finite());
    let scores = [0.3, -1.2, 2.5, 0.0, 0.7, -0.4, 1.1, 0.9];
    assert!((contrastive_loss(scores[0], &scores[1..]) - brute_ce(&scores, 0)).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn more_negatives_never_lower_the_loss(pos in -5.0f64..5.0, negs in prop::collection::vec(-5.0f64..5.0, 1..8), extra in -5.0f64..5.0) {
        let mut more = negs.clone();
        more.push(extra);
        prop_assert!(contrastive_loss(pos, &more) >= contrastive_loss(pos, &negs));
    }

    #[test]
    fn negative_order_is_irrelevant(pos in -5.0f64..5.0, mut negs in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        let a = contrastive_loss(pos, &negs);
        negs.reverse();
        prop_assert!((a - contrastive_loss(pos, &negs)).abs() < 1e-12);
    }
}

#[test]
fn cosine_schedule_examples() {
    assert_eq!(cosine_lr(0, 100, 0.1), 0.1);
    assert!(cosine_lr(100, 100, 0.1).abs() < 1e-18);
    assert!((cosine_lr(50, 100, 0.1) - 0.05).abs() < 1e-15);
    assert!(cosine_lr(30, 100, 0.1) > cosine_lr(31, 100, 0.1));
}

#[test]
fn multi_choice_negatives_are_the_other_options() {
    let params = toy_params(1, 16);
    let mut ep = toy_prepared(1, 2, 1, 5, &params);
    ep.label = 2;
    let bank = CategoryBank::from_episodes([&ep]);
    assert_eq!(sample_negatives(0, &[&ep], &bank, 0), NegativeSet::Options(vec![0, 1, 3, 4]));
}

#[test]
fn open_ended_negatives_are_foreign_positives_plus_hard_ones() {
    let params = toy_params(2, 16);
    let mut eps: Vec<PreparedEpisode> = (0..8).map(|s| toy_prepared(10 + s, 1, 1, 3, &params)).collect();
    for e in &mut eps {
        e.qa_mode = QaMode::OpenEnded;
        e.category = "same".into();
    }
    let bank = CategoryBank::from_episodes(&eps);
    let batch: Vec<&PreparedEpisode> = eps.iter().take(3).collect();
    for i in 0..3 {
        let NegativeSet::Pool { foreign, hard } = sample_negatives(i, &batch, &bank, 42) else {
            panic!("open-ended episodes get pools")
        };
        assert_eq!(foreign.len(), 2);
        assert!(!foreign.contains(&i));
        assert_eq!(hard.len(), 4);
        let answers = bank.answers("same");
        assert!(hard.iter().all(|&k| answers[k].as_slice() != batch[i].positive_answer()));
        assert_eq!(sample_negatives(i, &batch, &bank, 42), sample_negatives(i, &batch, &bank, 42));
    }
}

#[test]
fn zero_heads_give_uniform_loss() {
    let cfg = SynthConfig { n_episodes: 10, ..SynthConfig::default() };
    let [train, _, _] = generate_splits(&cfg, Exec::Sequential).unwrap();
    let params = ModelParams::init(ModelDims::new(64, 64, 64), 3, 0.02, 0.9).unwrap();
    let pipe = Pipeline::default();
    for ep in &train {
        let prep = prepare(ep, &params, &pipe).unwrap();
        let bank = CategoryBank::from_episodes([&prep]);
        let parts = batch_loss::<f64>(&params, &[&prep], 0.0, &pipe, &StepInputs::unmasked(&[&prep], &bank)).unwrap();
        assert!((parts.l_vqa - 5f64.ln()).abs() < 1e-6, "{}", parts.l_vqa);
        assert_eq!(parts.loss, parts.l_vqa);
    }
}

#[test]
fn loss_parts_match_an_independent_evaluation() {
    let mut params = toy_params(4, 16);
    params.randomize_heads(5);
    let pipe = Pipeline::default();
    let eps = [toy_prepared(20, 3, 2, 4, &params), toy_prepared(21, 3, 2, 4, &params)];
    let batch: Vec<&PreparedEpisode> = eps.iter().collect();
    let bank = CategoryBank::from_episodes(batch.iter().copied());
    let inputs = StepInputs::unmasked(&batch, &bank);

    let mut f = Vec::new();
    let mut q = Vec::new();
    let mut l_vqa = 0.0;
    for ep in &eps {
        let mut tape = Tape::<f64>::new();
        let p = params.bind(&mut tape);
        let fw = forward_on(&mut tape, &p, ep, &pipe, &vec![true; ep.question.rows()], Scoring::Options).unwrap();
        let logits: Vec<f64> = tape.value(fw.logits).data.clone();
        l_vqa += brute_ce(&logits, ep.label) / 2.0;
        f.push(tape.value(fw.f_final).data.clone());
        q.push(tape.value(fw.q_pool).data.clone());
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let l_vq = (0..2).map(|i| brute_ce(&[dot(&f[i], &q[0]), dot(&f[i], &q[1])], i)).sum::<f64>() / 2.0;

    let parts = batch_loss::<f64>(&params, &batch, 1.0, &pipe, &inputs).unwrap();
    assert!((parts.l_vqa - l_vqa).abs() < 1e-9);
    assert!((parts.l_vq.unwrap() - l_vq).abs() < 1e-9);
    assert!((parts.loss - (l_vqa + l_vq)).abs() < 1e-9);

    let zero = batch_loss::<f64>(&params, &batch, 0.0, &pipe, &inputs).unwrap();
    assert_eq!(zero.loss, zero.l_vqa);

    let (grad_parts, _) = batch_gradients::<f64>(&params, &batch, 1.0, &pipe, &inputs, Exec::Sequential).unwrap();
    assert!((grad_parts.loss - parts.loss).abs() < 1e-9);
}

#[test]
fn single_episode_batches_skip_the_question_contrast() {
    let params = toy_params(6, 16);
    let ep = toy_prepared(30, 2, 1, 3, &params);
    let bank = CategoryBank::from_episodes([&ep]);
    let parts =
        batch_loss::<f64>(&params, &[&ep], 1.0, &Pipeline::default(), &StepInputs::unmasked(&[&ep], &bank)).unwrap();
    assert!(parts.l_vq.is_none());
    assert_eq!(parts.loss, parts.l_vqa);
}

#[test]
fn parallel_and_sequential_gradients_agree() {
    let mut params = toy_params(7, 16);
    params.randomize_heads(8);
    let pipe = Pipeline::default();
    let eps: Vec<PreparedEpisode> = (0..4).map(|s| toy_prepared(40 + s, 3, 2, 4, &params)).collect();
    let batch: Vec<&PreparedEpisode> = eps.iter().collect();
    let bank = CategoryBank::from_episodes(batch.iter().copied());
    let inputs = StepInputs::unmasked(&batch, &bank);
    let (a, ga) = batch_gradients::<f32>(&params, &batch, 1.0, &pipe, &inputs, Exec::Sequential).unwrap();
    let (b, gb) = batch_gradients::<f32>(&params, &batch, 1.0, &pipe, &inputs, Exec::Parallel).unwrap();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}

fn overfit_config() -> TrainConfig {
    TrainConfig { lr0: 1e-2, batch_size: 1, mask_keep: 1.0, seed: 3, ..TrainConfig::default() }
}

#[test]
fn single_episode_overfits_within_200_steps() {
    let mut params = toy_params(9, 16);
    let ep = toy_prepared(50, 4, 3, 5, &params);
    let bank = CategoryBank::from_episodes([&ep]);
    let mut trainer = Trainer::new(overfit_config(), 200, Exec::Sequential);
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        last = trainer.train_step(&mut params, &[&ep], &bank).unwrap().loss;
        if last < 0.01 {
            break;
        }
    }
    assert!(last < 0.01, "loss stayed at {last}");
}

#[test]
fn identical_seeds_give_identical_parameters() {
    let run = || {
        let mut params = toy_params(10, 16);
        let eps: Vec<PreparedEpisode> = (0..3).map(|s| toy_prepared(60 + s, 3, 2, 4, &params)).collect();
        let batch: Vec<&PreparedEpisode> = eps.iter().collect();
        let bank = CategoryBank::from_episodes(batch.iter().copied());
        let cfg = TrainConfig { lr0: 1e-3, mask_keep: 0.7, ..TrainConfig::default() };
        let mut trainer = Trainer::new(cfg, 10, Exec::Parallel);
        let losses: Vec<f64> = (0..3).map(|_| trainer.train_step(&mut params, &batch, &bank).unwrap().loss).collect();
        (params, losses)
    };
    let (pa, la) = run();
    let (pb, lb) = run();
    assert_eq!(la, lb);
    let mut bits_a = Vec::new();
    pa.visit("", &mut |_, t| bits_a.extend(t.data().iter().map(|v| v.to_bits())));
    let mut bits_b = Vec::new();
    pb.visit("", &mut |_, t| bits_b.extend(t.data().iter().map(|v| v.to_bits())));
    assert_eq!(bits_a, bits_b);
}

#[test]
fn selector_stays_frozen_by_default() {
    let mut params = toy_params(11, 16);
    let before = params.selector.clone();
    let ep = toy_prepared(70, 2, 2, 3, &params);
    let bank = CategoryBank::from_episodes([&ep]);
    let mut trainer = Trainer::new(overfit_config(), 5, Exec::Sequential);
    trainer.train_step(&mut params, &[&ep], &bank).unwrap();
    assert_eq!(params.selector, before);
}

#[test]
fn without_locals_the_final_feature_is_the_global_one() {
    let mut params = toy_params(12, 16);
    params.randomize_heads(1);
    let pipe = Pipeline { local: false, ..Pipeline::default() };
    let ep = toy_prepared(80, 6, 2, 3, &params);
    let mut tape = Tape::<f32>::new();
    let p = params.bind(&mut tape);
    let fw = forward_on(&mut tape, &p, &ep, &pipe, &vec![true; ep.question.rows()], Scoring::Options).unwrap();
    assert!(fw.locals.is_empty());
    assert_eq!(tape.tensor(fw.f_final), tape.tensor(fw.f_global.unwrap()));
}

#[test]
fn configs_reject_out_of_range_values() {
    let ok = TrainConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        TrainConfig { lambda: -1.0, ..ok.clone() },
        TrainConfig { lr0: 0.0, ..ok.clone() },
        TrainConfig { epochs: 31, ..ok.clone() },
        TrainConfig { beta: 1.5, ..ok.clone() },
        TrainConfig { gamma: -0.5, ..ok.clone() },
        TrainConfig { pipeline: Pipeline { local: false, global: false, ..Pipeline::default() }, ..ok.clone() },
    ] {
        assert!(bad.validate().is_err());
    }
    assert!(serde_json::from_str::<TrainConfig>(r#"{"lamda": 1.0}"#).is_err());
}

#[test]
fn toy_model_gradients_match_central_differences() {
    let mut params = toy_params(13, 16);
    params.randomize_heads(14);
    let pipe = Pipeline::default();
    let ep = toy_prepared(90, 1, 2, 3, &params);
    for check in model_grad_check(&params, &[&ep], 1.0, &pipe, 1e-3).unwrap() {
        assert!(check.max_rel_error < 1e-3, "{}: {:.3e}", check.name, check.max_rel_error);
    }
}

#[test]
fn fit_restores_the_best_validation_parameters() {
    let cfg = SynthConfig { n_episodes: 60, width: 32, ..SynthConfig::default() };
    let [train, val, _] = generate_splits(&cfg, Exec::Parallel).unwrap();
    let mut params = ModelParams::init(ModelDims::new(32, 32, 16), 1, 0.0, 0.9).unwrap();
    let tc = TrainConfig { lr0: 3e-3, epochs: 3, batch_size: 16, beta: 0.0, patience: 1, ..TrainConfig::default() };
    let mut epochs = Vec::new();
    let summary = fit(&mut params, &train, &val, &tc, Exec::Parallel, &mut |m| {
        if let Metric::Epoch(e) = m {
            epochs.push(*e);
        }
    })
    .unwrap();
    assert_eq!(epochs.len(), summary.epochs_run);
    let best = epochs[summary.best_epoch];
    assert_eq!(best.val_accuracy, summary.best_val_accuracy);
    let val_p: Vec<PreparedEpisode> = val.iter().map(|e| prepare(e, &params, &tc.pipeline).unwrap()).collect();
    let eval = evaluate(&params, &val_p, &tc.pipeline, Exec::Parallel).unwrap();
    assert_eq!(eval.accuracy, best.val_accuracy);
    assert!((eval.loss - best.val_loss).abs() < 1e-9);
}

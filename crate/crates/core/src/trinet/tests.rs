use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::augment::AugmentPolicy;
use crate::data::{Dataset, LabeledExample};
use crate::federation::tests::{toy_clients, toy_config, toy_dataset, toy_shard};
use crate::federation::{run_phase1, train_supervised, ClientState, RoundConfig, RoundContext, RoundReport, ServerState};
use crate::nn::gradcheck::{max_relative_error, numerical_gradient, FD_STEP};
use crate::nn::{init_params, loss_and_grad, NetworkArchitecture, ParameterSet, Tensor};
use crate::rng::{stream, Purpose};

fn ctx<'a>(arch: &'a NetworkArchitecture, cfg: &'a RoundConfig, test: &'a Dataset) -> RoundContext<'a> {
    RoundContext {
        arch,
        config: cfg,
        test,
        master_seed: 7,
    }
}

/// A two-layer net so that a cutoff of one is a valid splice.
fn tiny_cfg() -> Phase2Config {
    Phase2Config {
        splice: SpliceSpec { shallow_cutoff: 1 },
        ..Phase2Config::default()
    }
}

fn stacked(examples: &[LabeledExample]) -> (Tensor, Vec<usize>) {
    let imgs: Vec<&Tensor> = examples.iter().map(|e| &*e.image).collect();
    (Tensor::stack(imgs).unwrap(), examples.iter().map(|e| e.label).collect())
}

#[test]
fn finetune_identity_cases() {
    let arch = NetworkArchitecture::tiny();
    let shard = toy_shard(&arch, 0, 5, 0, 1);
    let p = init_params(&arch, 3);
    let policy = AugmentPolicy::disabled();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(finetune(&arch, &p, &shard.labeled, 0, 4, 0.1, &policy, &mut rng).unwrap(), p);
    assert_eq!(finetune(&arch, &p, &shard.labeled, 3, 4, 0.0, &policy, &mut rng).unwrap(), p);
    assert!(finetune(&arch, &p, &[], 1, 4, 0.1, &policy, &mut rng).is_err());
}

#[test]
fn finetune_overfits_one_example() {
    let arch = NetworkArchitecture::tiny();
    let shard = toy_shard(&arch, 0, 1, 0, 2);
    let p = init_params(&arch, 4);
    let (x, y) = stacked(&shard.labeled);
    let before = crate::nn::network::loss(&arch, &p, &x, &y).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tuned = finetune(&arch, &p, &shard.labeled, 20, 1, 0.1, &AugmentPolicy::disabled(), &mut rng).unwrap();
    let after = crate::nn::network::loss(&arch, &tuned, &x, &y).unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn lambda_zero_drops_pseudo_term() {
    let arch = NetworkArchitecture::tiny();
    let shard = toy_shard(&arch, 0, 3, 0, 1);
    let other = toy_shard(&arch, 0, 3, 0, 2);
    let p = init_params(&arch, 1);
    let (xl, yl) = stacked(&shard.labeled);
    let (xp, yp) = stacked(&other.labeled);
    let (l0, g0) = combined_loss_and_grad(&arch, &p, (&xl, &yl), Some((&xp, &yp)), 0.0).unwrap();
    let (ls, gs) = loss_and_grad(&arch, &p, &xl, &yl).unwrap();
    assert_eq!(l0, ls);
    assert_eq!(g0, gs);
    let (l1, _) = combined_loss_and_grad(&arch, &p, (&xl, &yl), Some((&xp, &yp)), 1.0).unwrap();
    assert!(l1 > ls);
}

#[test]
fn combined_gradient_matches_finite_differences() {
    let arch = NetworkArchitecture::tiny();
    let lab = toy_shard(&arch, 0, 2, 0, 11);
    let pse = toy_shard(&arch, 0, 2, 0, 12);
    let p = init_params(&arch, 5);
    let (xl, yl) = stacked(&lab.labeled);
    let (xp, yp) = stacked(&pse.labeled);
    // flip one pseudo label so both terms carry distinct gradients
    let yp = vec![(yp[0] + 1) % 3, yp[1]];
    let (_, g) = combined_loss_and_grad(&arch, &p, (&xl, &yl), Some((&xp, &yp)), 1.0).unwrap();
    let numeric = numerical_gradient(&p, FD_STEP, |q| {
        combined_loss_and_grad(&arch, q, (&xl, &yl), Some((&xp, &yp)), 1.0).map(|r| r.0)
    })
    .unwrap();
    let analytic: Vec<f64> = g.values().collect();
    let err = max_relative_error(&analytic, &numeric);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn paired_steps_cycle_the_shorter_stream() {
    let arch = NetworkArchitecture::tiny();
    let lab = toy_shard(&arch, 0, 4, 0, 1);
    let pse = toy_shard(&arch, 0, 10, 0, 2);
    let lr: Vec<&LabeledExample> = lab.labeled.iter().collect();
    let pr: Vec<&LabeledExample> = pse.labeled.iter().collect();
    let p = init_params(&arch, 0);
    let policy = AugmentPolicy::disabled();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (_, losses) = train_paired(&arch, &p, &lr, &pr, 2, (4, 4), 0.1, 1.0, &policy, &mut rng).unwrap();
    assert_eq!(losses.len(), 2);
    assert!(losses.iter().all(|l| l.is_finite() && *l > 0.0));

    // no pseudo data: identical to plain supervised training on the same stream
    let a = train_paired(&arch, &p, &lr, &[], 2, (4, 4), 0.1, 1.0, &policy, &mut ChaCha8Rng::seed_from_u64(3))
        .unwrap();
    let b = train_supervised(&arch, &p, &lr, 2, 4, 0.1, &policy, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a.0, b.params);
    assert_eq!(a.1, b.epoch_losses);
}

#[test]
fn threshold_one_is_supervised_after_finetune() {
    let arch = NetworkArchitecture::tiny();
    let test = toy_dataset(&arch, 6, 0);
    let rc = toy_config();
    let c = ctx(&arch, &rc, &test);
    let cfg = tiny_cfg();
    let global = init_params(&arch, 1);
    let local = init_params(&arch, 2);
    let shard = toy_shard(&arch, 3, 6, 8, 5);
    let mut client = ClientState::new(shard.clone(), local.clone());
    let up = local_update_phase2(&c, &cfg, &mut client, &global, None, 1.0, 4).unwrap();
    assert_eq!(up.n_selected, 0);

    let spliced = splice(&global, &local, cfg.splice).unwrap();
    let mut rng = stream(7, 3, 4, Purpose::Finetune);
    let tuned = finetune(&arch, &spliced, &shard.labeled, 1, 4, 0.1, &rc.augment, &mut rng).unwrap();
    let refs: Vec<&LabeledExample> = shard.labeled.iter().collect();
    let mut rng = stream(7, 3, 4, Purpose::PseudoTrain);
    let expected = train_supervised(&arch, &tuned, &refs, rc.local_epochs, 4, 0.1, &rc.augment, &mut rng).unwrap();
    assert_eq!(up.params, expected.params);
    assert_eq!(client.local_params, expected.params);
}

#[test]
fn threshold_zero_selects_all_and_flags_behave() {
    let arch = NetworkArchitecture::tiny();
    let test = toy_dataset(&arch, 6, 0);
    let rc = toy_config();
    let c = ctx(&arch, &rc, &test);
    let global = init_params(&arch, 1);
    let shard = toy_shard(&arch, 0, 6, 8, 5);

    let mut client = ClientState::new(shard.clone(), init_params(&arch, 2));
    let up = local_update_phase2(&c, &tiny_cfg(), &mut client, &global, None, 0.0, 1).unwrap();
    assert_eq!(up.n_selected, 8);
    assert!(up.n_correct <= 8);

    let no_thr = Phase2Config {
        no_threshold: true,
        ..tiny_cfg()
    };
    let mut client = ClientState::new(shard.clone(), init_params(&arch, 2));
    assert_eq!(local_update_phase2(&c, &no_thr, &mut client, &global, None, 1.0, 1).unwrap().n_selected, 8);

    let no_pseudo = Phase2Config {
        no_pseudo: true,
        ..tiny_cfg()
    };
    let mut client = ClientState::new(shard.clone(), init_params(&arch, 2));
    assert_eq!(local_update_phase2(&c, &no_pseudo, &mut client, &global, None, 0.0, 1).unwrap().n_selected, 0);

    // skipping the fine-tune makes the update start from the raw splice
    let no_ft = Phase2Config {
        no_finetune: true,
        ..tiny_cfg()
    };
    let mut a = ClientState::new(shard.clone(), init_params(&arch, 2));
    let mut b = ClientState::new(shard, init_params(&arch, 2));
    let ua = local_update_phase2(&c, &no_ft, &mut a, &global, None, 1.0, 1).unwrap();
    let ub = local_update_phase2(&c, &tiny_cfg(), &mut b, &global, None, 1.0, 1).unwrap();
    assert_ne!(ua.params, ub.params);
}

#[test]
fn accumulation_keeps_earlier_labels() {
    let arch = NetworkArchitecture::tiny();
    let test = toy_dataset(&arch, 6, 0);
    let rc = toy_config();
    let c = ctx(&arch, &rc, &test);
    let cfg = Phase2Config {
        accumulate_pseudo: true,
        ..tiny_cfg()
    };
    let global = init_params(&arch, 1);
    let mut client = ClientState::new(toy_shard(&arch, 0, 6, 8, 5), init_params(&arch, 2));
    local_update_phase2(&c, &cfg, &mut client, &global, None, 0.0, 1).unwrap();
    assert_eq!(client.pseudo_pool.len(), 8);
    let up = local_update_phase2(&c, &cfg, &mut client, &global, None, 1.0, 2).unwrap();
    assert_eq!(up.n_selected, 0);
    assert_eq!(client.pseudo_pool.len(), 8);
}

fn run_both(cfg: &Phase2Config, t1: usize, t2: usize) -> (Vec<RoundReport>, ServerState) {
    let arch = NetworkArchitecture::tiny();
    let test = toy_dataset(&arch, 9, 0);
    let rc = RoundConfig {
        augment: AugmentPolicy::digits(),
        ..toy_config()
    };
    let c = ctx(&arch, &rc, &test);
    let init = init_params(&arch, 0);
    let mut server = ServerState::new(init.clone());
    let mut clients = toy_clients(&arch, 3, &init);
    let mut seen = Vec::new();
    let mut sink = |r: &RoundReport| {
        seen.push(r.clone());
        Ok(())
    };
    run_phase1(&c, &mut server, &mut clients, t1, &mut sink).unwrap();
    run_phase2(&c, cfg, &mut server, &mut clients, t2, &mut sink).unwrap();
    (seen, server)
}

#[test]
fn phase_two_rounds_are_reported_and_reproducible() {
    let cfg = tiny_cfg();
    let (a, sa) = run_both(&cfg, 2, 3);
    let (b, sb) = run_both(&cfg, 2, 3);
    assert_eq!(a, b);
    assert_eq!(sa.global_params, sb.global_params);
    assert_eq!(a.len(), 5);
    assert_eq!(sa.round, 5);
    assert_eq!(sa.phase2_round, 3);
    assert!(a[..2].iter().all(|r| r.threshold.is_none()));
    for r in &a[2..] {
        let theta = r.threshold.unwrap();
        assert!(theta > 0.0 && theta <= 0.93);
        assert!(r.clients.iter().all(|c| c.client_threshold.unwrap() >= 1.0 / 3.0));
    }
    let state = sa.threshold_state.unwrap();
    assert_eq!(state.client_maxima.len(), 3);
    assert!(state.current <= state.alpha_threshold * state.mean + 1e-15);
}

#[test]
fn frozen_theta_bar_reuses_first_mean() {
    let cfg = Phase2Config {
        freeze_theta_bar: true,
        schedule: ThresholdSchedule {
            mode: ScheduleMode::Clamped,
            breakpoints: (100, 100),
        },
        ..tiny_cfg()
    };
    let (reports, _) = run_both(&cfg, 1, 3);
    let first = reports[1].threshold.unwrap();
    assert!(reports[2..].iter().all(|r| r.threshold.unwrap() == first));
}

#[test]
fn invalid_phase_two_config() {
    let arch = NetworkArchitecture::reference();
    assert!(Phase2Config::default().validate(&arch).is_ok());
    let bad = Phase2Config {
        splice: SpliceSpec { shallow_cutoff: 5 },
        ..Default::default()
    };
    assert!(bad.validate(&arch).is_err());
    let bad = Phase2Config {
        alpha_threshold: 0.0,
        ..Default::default()
    };
    assert!(bad.validate(&arch).is_err());
    let bad = Phase2Config {
        lambda: -1.0,
        ..Default::default()
    };
    assert!(bad.validate(&arch).is_err());
}

#[test]
fn zero_params_threshold_state() {
    let arch = NetworkArchitecture::tiny();
    let zero = ParameterSet::zeros(&arch);
    let shard = toy_shard(&arch, 0, 1, 4, 0);
    let probs = global_unlabeled_probs(&arch, &zero, &shard.unlabeled).unwrap();
    assert!((max_confidence(&probs) - 1.0 / 3.0).abs() < 1e-15);
}

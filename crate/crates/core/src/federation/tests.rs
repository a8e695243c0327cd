use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{Dataset, Example};
use crate::nn::network::loss;
use crate::nn::{init_params, loss_and_grad, Tensor};

/// Images whose bright horizontal band encodes the class, plus noise.
pub(crate) fn toy_dataset(arch: &NetworkArchitecture, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = arch.input_shape();
    let m = arch.num_classes();
    let band = (h / m).max(1);
    let examples = (0..n)
        .map(|i| {
            let label = (i + seed as usize) % m;
            let mut px = Vec::with_capacity(c * h * w);
            for _ in 0..c {
                for y in 0..h {
                    for _ in 0..w {
                        let lit = y / band == label;
                        px.push(if lit { 0.7 + 0.3 * rng.gen::<f64>() } else { 0.2 * rng.gen::<f64>() });
                    }
                }
            }
            Example::labeled(Tensor::new(vec![c, h, w], px).unwrap(), label)
        })
        .collect();
    Dataset::new(examples, m).unwrap()
}

pub(crate) fn toy_shard(
    arch: &NetworkArchitecture,
    client_id: usize,
    n_labeled: usize,
    n_unlabeled: usize,
    seed: u64,
) -> ClientShard {
    let ds = toy_dataset(arch, n_labeled + n_unlabeled, seed);
    let labeled: Vec<usize> = (0..n_labeled).collect();
    let unlabeled: Vec<usize> = (n_labeled..n_labeled + n_unlabeled).collect();
    ClientShard::from_indices(client_id, &ds, &labeled, &unlabeled)
}

pub(crate) fn toy_config() -> RoundConfig {
    RoundConfig {
        local_epochs: 2,
        batch_size_labeled: 4,
        batch_size_pseudo: 4,
        eta: 0.1,
        participation: Participation::Fraction(1.0),
        augment: AugmentPolicy::disabled(),
    }
}

pub(crate) fn toy_clients(arch: &NetworkArchitecture, k: usize, init: &ParameterSet) -> Vec<ClientState> {
    (0..k)
        .map(|id| ClientState::new(toy_shard(arch, id, 6, 9, 100 + id as u64), init.clone()))
        .collect()
}

fn no_sink() -> impl FnMut(&RoundReport) -> Result<()> {
    |_| Ok(())
}

#[test]
fn full_participation_selects_everyone() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ids = select_clients(10, Participation::Fraction(1.0), &mut rng).unwrap();
    assert_eq!(ids, (0..10).collect::<Vec<_>>());
    let one = select_clients(10, Participation::Count(1), &mut rng).unwrap();
    assert_eq!(one.len(), 1);
    assert!(one[0] < 10);
}

#[test]
fn selection_is_deterministic_and_bounded() {
    let a = select_clients(10, Participation::Count(4), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let b = select_clients(10, Participation::Count(4), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    assert_eq!(a, b);
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(select_clients(10, Participation::Count(0), &mut rng).is_err());
    assert!(select_clients(10, Participation::Count(11), &mut rng).is_err());
    assert!(select_clients(10, Participation::Fraction(0.01), &mut rng).is_err());
}

#[test]
fn aggregate_mean_of_two() {
    let arch = NetworkArchitecture::tiny();
    let n = arch.num_parameters();
    let base = ParameterSet::zeros(&arch);
    let a = base.with_values(&vec![1.0; n]).unwrap();
    let mut vb = vec![3.0; n];
    vb[0] = 5.0;
    let b = base.with_values(&vb).unwrap();
    let mean: Vec<f64> = aggregate(&[&a, &b]).unwrap().values().collect();
    assert_eq!(mean[0], 3.0);
    assert!(mean[1..].iter().all(|&v| v == 2.0));
    assert_eq!(aggregate(&[&a]).unwrap(), a);
}

#[test]
fn aggregate_reflections_cancel() {
    let arch = NetworkArchitecture::tiny();
    let mut sets = Vec::new();
    for seed in 0..5 {
        let p = init_params(&arch, seed);
        let neg: Vec<f64> = p.values().map(|v| -v).collect();
        sets.push(p.with_values(&neg).unwrap());
        sets.push(p);
    }
    let refs: Vec<&ParameterSet> = sets.iter().collect();
    assert!(aggregate(&refs).unwrap().values().all(|v| v.abs() < 1e-15));
}

#[test]
fn aggregate_errors() {
    assert!(matches!(aggregate(&[]), Err(Error::EmptyAggregation)));
    let a = ParameterSet::zeros(&NetworkArchitecture::tiny());
    let b = ParameterSet::zeros(&NetworkArchitecture::compact_for([1, 8, 8], 3));
    assert!(matches!(aggregate(&[&a, &b]), Err(Error::FingerprintMismatch { .. })));
}

fn ctx<'a>(arch: &'a NetworkArchitecture, cfg: &'a RoundConfig, test: &'a Dataset) -> RoundContext<'a> {
    RoundContext {
        arch,
        config: cfg,
        test,
        master_seed: 42,
    }
}

#[test]
fn zero_learning_rate_returns_global() {
    let arch = NetworkArchitecture::tiny();
    let test = toy_dataset(&arch, 6, 0);
    let cfg = RoundConfig { eta: 0.0, ..toy_config() };
    let global = init_params(&arch, 3);
    let mut client = ClientState::new(toy_shard(&arch, 0, 5, 0, 1), ParameterSet::zeros(&arch));
    let up = local_update_phase1(&ctx(&arch, &cfg, &test), &mut client, &global, 1).unwrap();
    assert_eq!(up.params, global);
    assert_eq!(client.local_params, global);
}

#[test]
fn overfits_a_single_example() {
    let arch = NetworkArchitecture::tiny();
    let test = toy_dataset(&arch, 6, 0);
    let cfg = RoundConfig {
        local_epochs: 30,
        eta: 0.05,
        ..toy_config()
    };
    let global = init_params(&arch, 5);
    let mut client = ClientState::new(toy_shard(&arch, 0, 1, 0, 2), global.clone());
    let up = local_update_phase1(&ctx(&arch, &cfg, &test), &mut client, &global, 1).unwrap();
    assert!(up.epoch_losses.windows(2).all(|w| w[1] < w[0]), "{:?}", up.epoch_losses);
}

#[test]
fn partial_batch_is_kept() {
    let arch = NetworkArchitecture::tiny();
    let shard = toy_shard(&arch, 0, 60, 0, 3);
    let examples: Vec<&LabeledExample> = shard.labeled.iter().collect();
    let start = init_params(&arch, 1);
    let policy = AugmentPolicy::disabled();
    let eta = 0.1;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let stats = train_supervised(&arch, &start, &examples, 1, 50, eta, &policy, &mut rng).unwrap();

    // replay the same shuffle by hand: exactly two steps, sizes 50 and 10
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut order: Vec<usize> = (0..60).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut p = start.clone();
    let mut sizes = Vec::new();
    for chunk in order.chunks(50) {
        let imgs: Vec<&Tensor> = chunk.iter().map(|&i| &*examples[i].image).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| examples[i].label).collect();
        let (_, g) = loss_and_grad(&arch, &p, &Tensor::stack(imgs).unwrap(), &labels).unwrap();
        p = crate::nn::sgd_step(&p, &g, eta).unwrap();
        sizes.push(chunk.len());
    }
    assert_eq!(sizes, vec![50, 10]);
    assert_eq!(stats.params, p);
}

#[test]
fn empty_labeled_set_is_rejected() {
    let arch = NetworkArchitecture::tiny();
    let test = toy_dataset(&arch, 6, 0);
    let cfg = toy_config();
    let p = init_params(&arch, 0);
    let mut client = ClientState::new(toy_shard(&arch, 4, 0, 3, 1), p.clone());
    assert!(matches!(
        local_update_phase1(&ctx(&arch, &cfg, &test), &mut client, &p, 1),
        Err(Error::EmptyLabeled { client: 4 })
    ));
}

#[test]
fn zero_rounds_change_nothing() {
    let arch = NetworkArchitecture::tiny();
    let test = toy_dataset(&arch, 6, 0);
    let cfg = toy_config();
    let init = init_params(&arch, 0);
    let mut server = ServerState::new(init.clone());
    let mut clients = toy_clients(&arch, 2, &init);
    let reports = run_phase1(&ctx(&arch, &cfg, &test), &mut server, &mut clients, 0, &mut no_sink()).unwrap();
    assert!(reports.is_empty());
    assert_eq!(server.global_params, init);
    assert_eq!(server.round, 0);
}

#[test]
fn single_client_global_equals_local() {
    let arch = NetworkArchitecture::tiny();
    let test = toy_dataset(&arch, 6, 0);
    let cfg = toy_config();
    let init = init_params(&arch, 0);
    let mut server = ServerState::new(init.clone());
    let mut clients = toy_clients(&arch, 1, &init);
    run_phase1(&ctx(&arch, &cfg, &test), &mut server, &mut clients, 1, &mut no_sink()).unwrap();
    assert_eq!(server.global_params, clients[0].local_params);
    assert_ne!(server.global_params, init);
}

#[test]
fn global_is_mean_of_participants_only() {
    let arch = NetworkArchitecture::tiny();
    let test = toy_dataset(&arch, 9, 0);
    let cfg = RoundConfig {
        participation: Participation::Count(2),
        ..toy_config()
    };
    let init = init_params(&arch, 0);
    let mut server = ServerState::new(init.clone());
    let mut clients = toy_clients(&arch, 5, &init);
    let c = ctx(&arch, &cfg, &test);
    for _ in 0..3 {
        let before: Vec<ParameterSet> = clients.iter().map(|c| c.local_params.clone()).collect();
        let report = run_phase1(&c, &mut server, &mut clients, 1, &mut no_sink()).unwrap().remove(0);
        assert_eq!(report.participants.len(), 2);
        let ups: Vec<&ParameterSet> = report.participants.iter().map(|&i| &clients[i].local_params).collect();
        assert_eq!(server.global_params, aggregate(&ups).unwrap());
        for (i, b) in before.iter().enumerate() {
            if !report.participants.contains(&i) {
                assert_eq!(&clients[i].local_params, b);
            }
        }
    }
    assert_eq!(server.round, 3);
}

#[test]
fn reports_are_reproducible() {
    let arch = NetworkArchitecture::tiny();
    let test = toy_dataset(&arch, 9, 0);
    let cfg = RoundConfig {
        augment: AugmentPolicy::digits(),
        participation: Participation::Count(3),
        ..toy_config()
    };
    let run = || {
        let init = init_params(&arch, 0);
        let mut server = ServerState::new(init.clone());
        let mut clients = toy_clients(&arch, 4, &init);
        let mut seen = Vec::new();
        let mut sink = |r: &RoundReport| {
            seen.push(r.clone());
            Ok(())
        };
        run_phase1(&ctx(&arch, &cfg, &test), &mut server, &mut clients, 3, &mut sink).unwrap();
        (seen, server.global_params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert!(a.iter().all(|r| (0.0..=1.0).contains(&r.test_accuracy)));
}

#[test]
fn evaluate_oracle_and_ties() {
    let arch = NetworkArchitecture::tiny();
    let one = toy_dataset(&arch, 1, 1);
    let shard = toy_shard(&arch, 0, 1, 0, 1);
    let refs: Vec<&LabeledExample> = shard.labeled.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let policy = AugmentPolicy::disabled();
    let trained = train_supervised(&arch, &init_params(&arch, 0), &refs, 200, 1, 0.1, &policy, &mut rng).unwrap();
    assert_eq!(evaluate(&arch, &trained.params, &one).unwrap(), 1.0);

    // uniform outputs: every prediction is class 0
    let balanced = toy_dataset(&arch, 9, 0);
    let zero = ParameterSet::zeros(&arch);
    let acc = evaluate(&arch, &zero, &balanced).unwrap();
    assert!((acc - 3.0 / 9.0).abs() < 1e-15);

    let p = init_params(&arch, 8);
    let twice = balanced.concat(&balanced).unwrap();
    assert_eq!(evaluate(&arch, &p, &balanced).unwrap(), evaluate(&arch, &p, &twice).unwrap());
}

#[test]
fn fedsem_labels_everything_once() {
    let arch = NetworkArchitecture::tiny();
    let init = init_params(&arch, 0);
    let mut client = ClientState::new(toy_shard(&arch, 0, 3, 7, 4), init);
    assert_eq!(label_all_unlabeled(&arch, &mut client).unwrap(), 7);
    assert_eq!(label_all_unlabeled(&arch, &mut client).unwrap(), 7);
    assert_eq!(client.pseudo_labeled.len(), 7);
    assert_eq!(client.supervised_examples().len(), 10);
}

#[test]
fn loss_helper_matches_train_loss() {
    let arch = NetworkArchitecture::tiny();
    let shard = toy_shard(&arch, 0, 4, 0, 1);
    let p = init_params(&arch, 2);
    let imgs: Vec<&Tensor> = shard.labeled.iter().map(|e| &*e.image).collect();
    let labels: Vec<usize> = shard.labeled.iter().map(|e| e.label).collect();
    let batch = Tensor::stack(imgs).unwrap();
    let refs: Vec<&LabeledExample> = shard.labeled.iter().collect();
    let stats = train_supervised(
        &arch,
        &p,
        &refs,
        1,
        4,
        0.0,
        &AugmentPolicy::disabled(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let direct = loss(&arch, &p, &batch, &labels).unwrap();
    assert!((stats.epoch_losses[0] - direct).abs() < 1e-12);
}

//! Communication rounds: client selection, supervised local updates,
//! parameter averaging and centralized evaluation.

mod training;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::augment::AugmentPolicy;
use crate::data::{ClientShard, Dataset, LabeledExample};
use crate::error::{Error, Result};
use crate::nn::{argmax, forward_chunked, NetworkArchitecture, ParameterSet};
use crate::rng::{stream, Purpose, SERVER};
use crate::trinet::ThresholdState;

pub use training::{make_batch, train_supervised, TrainStats, EVAL_CHUNK};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Participation {
    /// Fraction of clients per round, rounded to the nearest count.
    Fraction(f64),
    Count(usize),
}

impl Participation {
    pub fn count(&self, num_clients: usize) -> usize {
        match *self {
            Participation::Fraction(f) => (f * num_clients as f64).round() as usize,
            Participation::Count(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    pub local_epochs: usize,
    pub batch_size_labeled: usize,
    pub batch_size_pseudo: usize,
    pub eta: f64,
    pub participation: Participation,
    pub augment: AugmentPolicy,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            local_epochs: 5,
            batch_size_labeled: 50,
            batch_size_pseudo: 50,
            eta: 0.01,
            participation: Participation::Fraction(1.0),
            augment: AugmentPolicy::digits(),
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs", "must be at least 1"));
        }
        if self.batch_size_labeled == 0 {
            return Err(Error::config("batch_size_labeled", "must be at least 1"));
        }
        if self.batch_size_pseudo == 0 {
            return Err(Error::config("batch_size_pseudo", "must be at least 1"));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::config("eta", "must be a finite non-negative number"));
        }
        if !self.augment.is_valid() {
            return Err(Error::config("augment_contrast", "must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    PreTrain,
    PseudoLabel,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::PreTrain => "pretrain",
            Phase::PseudoLabel => "pseudo_label",
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        match s {
            "pretrain" => Some(Phase::PreTrain),
            "pseudo_label" => Some(Phase::PseudoLabel),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global_params: ParameterSet,
    /// The global parameters before the last aggregation.
    pub previous_global: Option<ParameterSet>,
    /// Completed communication rounds across both phases.
    pub round: usize,
    /// Completed rounds of the pseudo-label phase.
    pub phase2_round: usize,
    pub phase: Phase,
    pub threshold_state: Option<ThresholdState>,
}

impl ServerState {
    pub fn new(global_params: ParameterSet) -> Self {
        ServerState {
            global_params,
            previous_global: None,
            round: 0,
            phase2_round: 0,
            phase: Phase::PreTrain,
            threshold_state: None,
        }
    }

    pub(crate) fn install(&mut self, global: ParameterSet) {
        self.previous_global = Some(std::mem::replace(&mut self.global_params, global));
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub shard: ClientShard,
    pub local_params: ParameterSet,
    /// Pseudo-labeled examples merged into supervised training (FedSem baseline).
    pub pseudo_labeled: Vec<LabeledExample>,
    /// How many of `pseudo_labeled` match the hidden ground truth (diagnostic).
    pub pseudo_correct: usize,
    /// Accumulated pseudo labels by unlabeled index, when accumulation is enabled.
    pub pseudo_pool: std::collections::BTreeMap<usize, usize>,
}

impl ClientState {
    pub fn new(shard: ClientShard, local_params: ParameterSet) -> Self {
        ClientState {
            client_id: shard.client_id,
            shard,
            local_params,
            pseudo_labeled: Vec::new(),
            pseudo_correct: 0,
            pseudo_pool: Default::default(),
        }
    }

    pub(crate) fn supervised_examples(&self) -> Vec<&LabeledExample> {
        self.shard.labeled.iter().chain(&self.pseudo_labeled).collect()
    }
}

/// Per-client diagnostics for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundStats {
    pub client_id: usize,
    pub loss: f64,
    pub client_threshold: Option<f64>,
    pub n_selected: usize,
    pub n_correct: usize,
}

impl ClientRoundStats {
    pub fn pseudo_accuracy(&self) -> Option<f64> {
        (self.n_selected > 0).then(|| self.n_correct as f64 / self.n_selected as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub phase: Phase,
    pub mean_client_loss: f64,
    pub test_accuracy: f64,
    pub threshold: Option<f64>,
    pub total_pseudo_selected: usize,
    pub pseudo_label_accuracy: Option<f64>,
    pub participants: Vec<usize>,
    pub clients: Vec<ClientRoundStats>,
}

impl RoundReport {
    pub(crate) fn from_clients(
        round: usize,
        phase: Phase,
        test_accuracy: f64,
        threshold: Option<f64>,
        clients: Vec<ClientRoundStats>,
    ) -> Self {
        let n = clients.len().max(1) as f64;
        let selected: usize = clients.iter().map(|c| c.n_selected).sum();
        let correct: usize = clients.iter().map(|c| c.n_correct).sum();
        RoundReport {
            round,
            phase,
            mean_client_loss: clients.iter().map(|c| c.loss).sum::<f64>() / n,
            test_accuracy,
            threshold,
            total_pseudo_selected: selected,
            pseudo_label_accuracy: (selected > 0).then(|| correct as f64 / selected as f64),
            participants: clients.iter().map(|c| c.client_id).collect(),
            clients,
        }
    }
}

/// Everything a round needs besides the mutable server and client state.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub arch: &'a NetworkArchitecture,
    pub config: &'a RoundConfig,
    pub test: &'a Dataset,
    pub master_seed: u64,
}

/// Called once per completed round, before the next one starts.
pub type RoundSink<'s> = dyn FnMut(&RoundReport) -> Result<()> + 's;

/// Uniform sample of participant ids without replacement, ascending.
pub fn select_clients<R: Rng + ?Sized>(
    num_clients: usize,
    participation: Participation,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let n = participation.count(num_clients);
    if n == 0 || n > num_clients {
        return Err(Error::InvalidParticipation {
            requested: n,
            available: num_clients,
        });
    }
    let mut picked = index::sample(rng, num_clients, n).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Element-wise unweighted mean.
pub fn aggregate(sets: &[&ParameterSet]) -> Result<ParameterSet> {
    let (first, rest) = sets.split_first().ok_or(Error::EmptyAggregation)?;
    for other in rest {
        first.check_compatible(other)?;
    }
    let mut sum: Vec<f64> = first.values().collect();
    for other in rest {
        for (acc, v) in sum.iter_mut().zip(other.values()) {
            *acc += v;
        }
    }
    let n = sets.len() as f64;
    sum.iter_mut().for_each(|v| *v /= n);
    first.with_values(&sum)
}

/// Fraction of examples whose argmax prediction equals the true label.
pub fn evaluate(arch: &NetworkArchitecture, params: &ParameterSet, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let images: Vec<_> = test.examples().iter().map(|e| e.image()).collect();
    let probs = forward_chunked(arch, params, &images, EVAL_CHUNK)?;
    let correct = test
        .examples()
        .iter()
        .enumerate()
        .filter(|(i, e)| argmax(probs.row(*i)) == e.true_label())
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub params: ParameterSet,
    pub epoch_losses: Vec<f64>,
}

impl LocalUpdate {
    pub fn mean_loss(&self) -> f64 {
        self.epoch_losses.iter().sum::<f64>() / self.epoch_losses.len().max(1) as f64
    }
}

/// Local Update I: start from the global parameters and run supervised SGD on D_L.
pub fn local_update_phase1(
    ctx: &RoundContext<'_>,
    client: &mut ClientState,
    global: &ParameterSet,
    round: usize,
) -> Result<LocalUpdate> {
    if client.shard.labeled.is_empty() {
        return Err(Error::EmptyLabeled {
            client: client.client_id,
        });
    }
    let mut rng = stream(ctx.master_seed, client.client_id as u64, round as u64, Purpose::LocalTrain);
    let examples = client.supervised_examples();
    let stats = train_supervised(
        ctx.arch,
        global,
        &examples,
        ctx.config.local_epochs,
        ctx.config.batch_size_labeled,
        ctx.config.eta,
        &ctx.config.augment,
        &mut rng,
    )?;
    client.local_params = stats.params.clone();
    Ok(LocalUpdate {
        params: stats.params,
        epoch_losses: stats.epoch_losses,
    })
}

pub(crate) fn participants_of(
    ctx: &RoundContext<'_>,
    num_clients: usize,
    round: usize,
) -> Result<Vec<usize>> {
    let mut rng = stream(ctx.master_seed, SERVER, round as u64, Purpose::Select);
    select_clients(num_clients, ctx.config.participation, &mut rng)
}

/// Mutable references to the selected clients, in id order.
pub(crate) fn pick_mut<'c>(clients: &'c mut [ClientState], ids: &[usize]) -> Vec<&'c mut ClientState> {
    clients
        .iter_mut()
        .enumerate()
        .filter(|(i, _)| ids.binary_search(i).is_ok())
        .map(|(_, c)| c)
        .collect()
}

/// Runs `rounds` supervised FedAvg rounds, labeling reports with `phase`.
pub fn run_supervised_rounds(
    ctx: &RoundContext<'_>,
    server: &mut ServerState,
    clients: &mut [ClientState],
    rounds: usize,
    phase: Phase,
    sink: &mut RoundSink<'_>,
) -> Result<Vec<RoundReport>> {
    let mut reports = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let round = server.round + 1;
        let ids = participants_of(ctx, clients.len(), round)?;
        let global = &server.global_params;
        let updates: Vec<(LocalUpdate, usize, usize)> = pick_mut(clients, &ids)
            .into_par_iter()
            .map(|client| {
                let up = local_update_phase1(ctx, client, global, round)?;
                Ok((up, client.pseudo_labeled.len(), client.pseudo_correct))
            })
            .collect::<Result<_>>()?;
        let uploads: Vec<&ParameterSet> = updates.iter().map(|u| &u.0.params).collect();
        let next = aggregate(&uploads)?;
        let accuracy = evaluate(ctx.arch, &next, ctx.test)?;
        server.install(next);
        server.round = round;
        if phase == Phase::PseudoLabel {
            server.phase2_round += 1;
        }
        let stats = ids
            .iter()
            .zip(&updates)
            .map(|(&id, (u, n_selected, n_correct))| ClientRoundStats {
                client_id: id,
                loss: u.mean_loss(),
                client_threshold: None,
                n_selected: *n_selected,
                n_correct: *n_correct,
            })
            .collect();
        let report = RoundReport::from_clients(round, phase, accuracy, None, stats);
        sink(&report)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Phase I: `rounds` rounds of supervised pretraining on labeled data only.
pub fn run_phase1(
    ctx: &RoundContext<'_>,
    server: &mut ServerState,
    clients: &mut [ClientState],
    rounds: usize,
    sink: &mut RoundSink<'_>,
) -> Result<Vec<RoundReport>> {
    if server.phase != Phase::PreTrain {
        return Err(Error::InvalidSplit(
            "pretraining cannot resume after the pseudo-label phase started".into(),
        ));
    }
    run_supervised_rounds(ctx, server, clients, rounds, Phase::PreTrain, sink)
}

/// FedSem baseline step: every unlabeled example gets its local model's argmax as label.
pub fn label_all_unlabeled(arch: &NetworkArchitecture, client: &mut ClientState) -> Result<usize> {
    client.pseudo_correct = 0;
    if client.shard.unlabeled.is_empty() {
        client.pseudo_labeled.clear();
        return Ok(0);
    }
    let images: Vec<_> = client.shard.unlabeled.iter().map(|e| &*e.image).collect();
    let probs = forward_chunked(arch, &client.local_params, &images, EVAL_CHUNK)?;
    client.pseudo_labeled = client
        .shard
        .unlabeled
        .iter()
        .enumerate()
        .map(|(i, e)| LabeledExample {
            image: e.image.clone(),
            label: argmax(probs.row(i)),
            source_index: e.source_index,
        })
        .collect();
    client.pseudo_correct = client
        .shard
        .unlabeled
        .iter()
        .zip(&client.pseudo_labeled)
        .filter(|(u, p)| u.hidden_label().reveal_for_evaluation() == p.label)
        .count();
    Ok(client.pseudo_labeled.len())
}

#[cfg(test)]
pub(crate) mod tests;

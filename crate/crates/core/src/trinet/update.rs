//! Local Update II and the pseudo-label phase driver.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::pseudo::{joint_from_probs, select_pseudo, PseudoEntry, PseudoSet};
use super::splice::{splice, SpliceSpec};
use super::threshold::{global_unlabeled_probs, max_confidence, ThresholdSchedule, ThresholdState};
use crate::augment::AugmentPolicy;
use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::federation::{
    aggregate, evaluate, make_batch, participants_of, pick_mut, train_supervised, ClientRoundStats,
    ClientState, Phase, RoundContext, RoundReport, RoundSink, ServerState, EVAL_CHUNK,
};
use crate::nn::{forward_chunked, loss_and_grad, GradientSet, NetworkArchitecture, ParameterSet, Tensor};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct Phase2Config {
    pub splice: SpliceSpec,
    pub finetune_epochs: usize,
    /// Weight of the pseudo-labeled loss.
    pub lambda: f64,
    pub alpha_threshold: f64,
    pub schedule: ThresholdSchedule,
    /// Select every unlabeled example regardless of confidence.
    pub no_threshold: bool,
    pub no_finetune: bool,
    /// Train the combined model on labeled data only.
    pub no_pseudo: bool,
    /// Keep earlier rounds' pseudo labels instead of reselecting from scratch.
    pub accumulate_pseudo: bool,
    /// Reuse the first pseudo-label round's mean client threshold.
    pub freeze_theta_bar: bool,
}

impl Default for Phase2Config {
    fn default() -> Self {
        Phase2Config {
            splice: SpliceSpec::default(),
            finetune_epochs: 1,
            lambda: 1.0,
            alpha_threshold: 0.93,
            schedule: ThresholdSchedule::default(),
            no_threshold: false,
            no_finetune: false,
            no_pseudo: false,
            accumulate_pseudo: false,
            freeze_theta_bar: false,
        }
    }
}

impl Phase2Config {
    pub fn validate(&self, arch: &NetworkArchitecture) -> Result<()> {
        self.splice.validate(arch.parameterized_layers().len())?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("lambda", "must be a finite non-negative number"));
        }
        if !(self.alpha_threshold > 0.0 && self.alpha_threshold <= 1.0) {
            return Err(Error::config("alpha_threshold", "must be in (0, 1]"));
        }
        let (a, b) = self.schedule.breakpoints;
        if a > b {
            return Err(Error::config("threshold_breakpoints", "first breakpoint exceeds the second"));
        }
        Ok(())
    }
}

/// Supervised fine-tuning of a spliced model on the client's labeled data.
#[allow(clippy::too_many_arguments)]
pub fn finetune<R: Rng + ?Sized>(
    arch: &NetworkArchitecture,
    spliced: &ParameterSet,
    labeled: &[LabeledExample],
    epochs: usize,
    batch_size: usize,
    eta: f64,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<ParameterSet> {
    if labeled.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let refs: Vec<&LabeledExample> = labeled.iter().collect();
    Ok(train_supervised(arch, spliced, &refs, epochs, batch_size, eta, policy, rng)?.params)
}

/// `L_l + lambda * L_p` and its gradient; an empty pseudo batch drops the second term.
pub fn combined_loss_and_grad(
    arch: &NetworkArchitecture,
    params: &ParameterSet,
    labeled: (&Tensor, &[usize]),
    pseudo: Option<(&Tensor, &[usize])>,
    lambda: f64,
) -> Result<(f64, GradientSet)> {
    let (mut total, mut grads) = loss_and_grad(arch, params, labeled.0, labeled.1)?;
    if let Some((batch, labels)) = pseudo {
        if lambda != 0.0 {
            let (lp, gp) = loss_and_grad(arch, params, batch, labels)?;
            total += lambda * lp;
            grads.add_scaled(&gp, lambda)?;
        }
    }
    Ok((total, grads))
}

fn shuffled_chunks<R: Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

fn batch_of<R: Rng + ?Sized>(
    examples: &[&LabeledExample],
    idx: &[usize],
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<(Tensor, Vec<usize>)> {
    let images: Vec<&Tensor> = idx.iter().map(|&i| &*examples[i].image).collect();
    let labels = idx.iter().map(|&i| examples[i].label).collect();
    Ok((make_batch(&images, policy, rng)?, labels))
}

/// Paired mini-batch SGD: each step takes one labeled and one pseudo batch, and
/// the shorter stream cycles until the longer one is exhausted once.
#[allow(clippy::too_many_arguments)]
pub fn train_paired<R: Rng + ?Sized>(
    arch: &NetworkArchitecture,
    start: &ParameterSet,
    labeled: &[&LabeledExample],
    pseudo: &[&LabeledExample],
    epochs: usize,
    batch_sizes: (usize, usize),
    eta: f64,
    lambda: f64,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<(ParameterSet, Vec<f64>)> {
    if pseudo.is_empty() {
        let stats = train_supervised(arch, start, labeled, epochs, batch_sizes.0, eta, policy, rng)?;
        return Ok((stats.params, stats.epoch_losses));
    }
    if labeled.is_empty() || batch_sizes.0 == 0 || batch_sizes.1 == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut params = start.clone();
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let lb = shuffled_chunks(labeled.len(), batch_sizes.0, rng);
        let pb = shuffled_chunks(pseudo.len(), batch_sizes.1, rng);
        let steps = lb.len().max(pb.len());
        let mut total = 0.0;
        for s in 0..steps {
            let (xl, yl) = batch_of(labeled, &lb[s % lb.len()], policy, rng)?;
            let (xp, yp) = batch_of(pseudo, &pb[s % pb.len()], policy, rng)?;
            let (loss, grads) = combined_loss_and_grad(arch, &params, (&xl, &yl), Some((&xp, &yp)), lambda)?;
            params.apply_sgd(&grads, eta)?;
            total += loss;
        }
        losses.push(total / steps as f64);
    }
    Ok((params, losses))
}

#[derive(Debug, Clone)]
pub struct Phase2Update {
    pub params: ParameterSet,
    pub epoch_losses: Vec<f64>,
    pub n_selected: usize,
    pub n_correct: usize,
}

impl Phase2Update {
    pub fn mean_loss(&self) -> f64 {
        self.epoch_losses.iter().sum::<f64>() / self.epoch_losses.len().max(1) as f64
    }
}

/// Local Update II: splice, fine-tune, jointly predict, select and train the combined model.
///
/// `global_probs` may carry the global model's outputs on the client's unlabeled
/// data when the caller already computed them for the client threshold.
pub fn local_update_phase2(
    ctx: &RoundContext<'_>,
    cfg: &Phase2Config,
    client: &mut ClientState,
    global: &ParameterSet,
    global_probs: Option<&Tensor>,
    theta_t: f64,
    round: usize,
) -> Result<Phase2Update> {
    let id = client.client_id;
    if client.shard.labeled.is_empty() {
        return Err(Error::EmptyLabeled { client: id });
    }
    let rc = ctx.config;
    let spliced = splice(global, &client.local_params, cfg.splice)?;
    let combined = if cfg.no_finetune {
        spliced
    } else {
        let mut rng = stream(ctx.master_seed, id as u64, round as u64, Purpose::Finetune);
        finetune(
            ctx.arch,
            &spliced,
            &client.shard.labeled,
            cfg.finetune_epochs,
            rc.batch_size_labeled,
            rc.eta,
            &rc.augment,
            &mut rng,
        )?
    };

    let mut selected = PseudoSet::default();
    if !cfg.no_pseudo && !client.shard.unlabeled.is_empty() {
        let unlabeled = &client.shard.unlabeled;
        let images: Vec<&Tensor> = unlabeled.iter().map(|u| &*u.image).collect();
        let g = match global_probs {
            Some(p) => p.clone(),
            None => forward_chunked(ctx.arch, global, &images, EVAL_CHUNK)?,
        };
        let l = forward_chunked(ctx.arch, &client.local_params, &images, EVAL_CHUNK)?;
        let c = forward_chunked(ctx.arch, &combined, &images, EVAL_CHUNK)?;
        let preds = joint_from_probs(&l, &g, &c)?;
        let theta = if cfg.no_threshold { 0.0 } else { theta_t };
        selected = select_pseudo(unlabeled, &preds, theta)?;
    }
    let n_selected = selected.len();
    let n_correct = selected.count_correct(&client.shard.unlabeled);

    let training_set = if cfg.accumulate_pseudo {
        for e in &selected.entries {
            client.pseudo_pool.insert(e.index, e.label);
        }
        PseudoSet {
            entries: client
                .pseudo_pool
                .iter()
                .map(|(&index, &label)| PseudoEntry {
                    index,
                    source_index: client.shard.unlabeled[index].source_index,
                    label,
                    confidence: f64::NAN,
                })
                .collect(),
        }
    } else {
        selected
    };
    let pseudo = training_set.to_examples(&client.shard.unlabeled);
    let labeled: Vec<&LabeledExample> = client.shard.labeled.iter().collect();
    let pseudo_refs: Vec<&LabeledExample> = pseudo.iter().collect();
    let mut rng = stream(ctx.master_seed, id as u64, round as u64, Purpose::PseudoTrain);
    let (params, epoch_losses) = train_paired(
        ctx.arch,
        &combined,
        &labeled,
        &pseudo_refs,
        rc.local_epochs,
        (rc.batch_size_labeled, rc.batch_size_pseudo),
        rc.eta,
        cfg.lambda,
        &rc.augment,
        &mut rng,
    )?;
    client.local_params = params.clone();
    Ok(Phase2Update {
        params,
        epoch_losses,
        n_selected,
        n_correct,
    })
}

/// Phase II: `rounds` pseudo-label rounds continuing from the server's current round.
pub fn run_phase2(
    ctx: &RoundContext<'_>,
    cfg: &Phase2Config,
    server: &mut ServerState,
    clients: &mut [ClientState],
    rounds: usize,
    sink: &mut RoundSink<'_>,
) -> Result<Vec<RoundReport>> {
    cfg.validate(ctx.arch)?;
    let mut reports = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        server.phase = Phase::PseudoLabel;
        let round = server.round + 1;
        let t = server.phase2_round + 1;
        let ids = participants_of(ctx, clients.len(), round)?;
        let global = server.global_params.clone();

        // threshold exchange precedes selection
        let mut participants = pick_mut(clients, &ids);
        let probs: Vec<Option<Tensor>> = participants
            .par_iter()
            .map(|c| {
                if c.shard.unlabeled.is_empty() {
                    Ok(None)
                } else {
                    global_unlabeled_probs(ctx.arch, &global, &c.shard.unlabeled).map(Some)
                }
            })
            .collect::<Result<_>>()?;
        let maxima: BTreeMap<usize, f64> = ids
            .iter()
            .zip(&probs)
            .filter_map(|(&id, p)| p.as_ref().map(|p| (id, max_confidence(p))))
            .collect();
        let mut state = if maxima.is_empty() {
            // nothing to pseudo-label anywhere this round
            ThresholdState {
                client_maxima: maxima,
                mean: 1.0,
                alpha_threshold: cfg.alpha_threshold,
                schedule: cfg.schedule,
                current: 1.0,
            }
        } else {
            ThresholdState::from_maxima(maxima, cfg.alpha_threshold, cfg.schedule, t)?
        };
        if cfg.freeze_theta_bar {
            if let Some(prev) = &server.threshold_state {
                state.mean = prev.mean;
                state.current = super::global_threshold(prev.mean, t, cfg.alpha_threshold, &cfg.schedule);
            }
        }
        let theta_t = state.current;

        let updates: Vec<Phase2Update> = participants
            .par_iter_mut()
            .zip(&probs)
            .map(|(client, p)| local_update_phase2(ctx, cfg, client, &global, p.as_ref(), theta_t, round))
            .collect::<Result<_>>()?;
        drop(participants);

        let uploads: Vec<&ParameterSet> = updates.iter().map(|u| &u.params).collect();
        let next = aggregate(&uploads)?;
        let accuracy = evaluate(ctx.arch, &next, ctx.test)?;
        server.install(next);
        server.round = round;
        server.phase2_round = t;
        let stats = ids
            .iter()
            .zip(&updates)
            .map(|(&id, u)| ClientRoundStats {
                client_id: id,
                loss: u.mean_loss(),
                client_threshold: state.client_maxima.get(&id).copied(),
                n_selected: u.n_selected,
                n_correct: u.n_correct,
            })
            .collect();
        let reported = if cfg.no_threshold { 0.0 } else { theta_t };
        server.threshold_state = Some(state);
        let report = RoundReport::from_clients(round, Phase::PseudoLabel, accuracy, Some(reported), stats);
        sink(&report)?;
        reports.push(report);
    }
    Ok(reports)
}

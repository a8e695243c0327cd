//! IID and two-class non-IID labeled/unlabeled splits across clients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClientShard, Dataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    Iid,
    NonIid,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitConfig {
    pub num_clients: usize,
    pub labeled_total: usize,
    pub mode: SplitMode,
    /// Only used in non-IID mode.
    pub labeled_classes_per_client: usize,
    pub seed: u64,
}

impl SplitConfig {
    pub fn iid(num_clients: usize, labeled_total: usize, seed: u64) -> Self {
        SplitConfig {
            num_clients,
            labeled_total,
            mode: SplitMode::Iid,
            labeled_classes_per_client: 2,
            seed,
        }
    }

    pub fn non_iid(num_clients: usize, labeled_total: usize, seed: u64) -> Self {
        SplitConfig {
            mode: SplitMode::NonIid,
            ..Self::iid(num_clients, labeled_total, seed)
        }
    }

    pub fn labeled_per_client(&self) -> usize {
        self.labeled_total / self.num_clients.max(1)
    }

    pub fn validate(&self, dataset_len: usize, num_classes: usize) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::InvalidSplit("need at least one client".into()));
        }
        if self.labeled_total > dataset_len {
            return Err(Error::InvalidSplit(format!(
                "{} labeled examples requested from a dataset of {dataset_len}",
                self.labeled_total
            )));
        }
        if !self.labeled_total.is_multiple_of(self.num_clients) {
            return Err(Error::InvalidSplit(format!(
                "labeled total {} is not divisible by {} clients",
                self.labeled_total, self.num_clients
            )));
        }
        if self.labeled_per_client() == 0 {
            return Err(Error::InvalidSplit(
                "every client needs at least one labeled example".into(),
            ));
        }
        if self.mode == SplitMode::NonIid {
            let c = self.labeled_classes_per_client;
            if c == 0 || c > num_classes {
                return Err(Error::InvalidSplit(format!(
                    "labeled classes per client must be in [1, {num_classes}], got {c}"
                )));
            }
            if self.labeled_per_client() < c {
                return Err(Error::InvalidSplit(format!(
                    "{} labeled examples per client cannot cover {c} classes",
                    self.labeled_per_client()
                )));
            }
        }
        Ok(())
    }
}

/// Splits `dataset` into `num_clients` shards of labeled and unlabeled examples.
///
/// In non-IID mode client `k` draws its labeled examples from classes
/// `(c*k + j) mod M` for `j < c`, while its unlabeled share is drawn from the
/// shuffled remainder and so covers every class.
pub fn partition(dataset: &Dataset, cfg: &SplitConfig) -> Result<Vec<ClientShard>> {
    let n = dataset.len();
    let m = dataset.num_classes();
    cfg.validate(n, m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.num_clients;
    let per_client = cfg.labeled_per_client();

    let (labeled, mut rest): (Vec<Vec<usize>>, Vec<usize>) = match cfg.mode {
        SplitMode::Iid => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let rest = order.split_off(cfg.labeled_total);
            (order.chunks(per_client).map(<[usize]>::to_vec).collect(), rest)
        }
        SplitMode::NonIid => {
            let c = cfg.labeled_classes_per_client;
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); m];
            for (i, ex) in dataset.examples().iter().enumerate() {
                pools[ex.true_label()].push(i);
            }
            for pool in &mut pools {
                pool.shuffle(&mut rng);
            }
            let quota = |j: usize| per_client / c + usize::from(j < per_client % c);
            let mut demand = vec![0usize; m];
            for client in 0..k {
                for j in 0..c {
                    demand[(c * client + j) % m] += quota(j);
                }
            }
            for (class, (&need, pool)) in demand.iter().zip(&pools).enumerate() {
                if need > pool.len() {
                    return Err(Error::InsufficientClassExamples {
                        class,
                        needed: need,
                        available: pool.len(),
                    });
                }
            }
            let mut taken = vec![false; n];
            let mut cursor = vec![0usize; m];
            let mut labeled = Vec::with_capacity(k);
            for client in 0..k {
                let mut mine = Vec::with_capacity(per_client);
                for j in 0..c {
                    let class = (c * client + j) % m;
                    let start = cursor[class];
                    let picked = &pools[class][start..start + quota(j)];
                    cursor[class] += quota(j);
                    for &i in picked {
                        taken[i] = true;
                    }
                    mine.extend_from_slice(picked);
                }
                labeled.push(mine);
            }
            let mut rest: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
            rest.shuffle(&mut rng);
            (labeled, rest)
        }
    };

    // unlabeled shares differ in size by at most one
    let base = rest.len() / k;
    let extra = rest.len() % k;
    let mut shards = Vec::with_capacity(k);
    for (client, mine) in labeled.iter().enumerate() {
        let take = base + usize::from(client < extra);
        let tail = rest.split_off(take);
        shards.push(ClientShard::from_indices(client, dataset, mine, &rest));
        rest = tail;
    }
    Ok(shards)
}

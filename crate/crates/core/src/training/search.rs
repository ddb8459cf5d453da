use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::samples::SampleSet;
use super::trainer::{arch_for, derive_seed, stream, train_model, EpochLog, TrainConfig};
use crate::exec::Execution;
use crate::models::{ArchitectureKind, ArchitectureSpec, Network};
use crate::{Error, Result};

pub const DEFAULT_ITERATIONS: usize = 100;

/// Discrete hyperparameter ranges sampled by [`random_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchGrid {
    pub batch_sizes: Vec<usize>,
    pub dropout_rates: Vec<f64>,
    pub hidden_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub max_grad_norms: Vec<f64>,
    pub l1_alphas: Vec<f64>,
}

impl Default for SearchGrid {
    fn default() -> Self {
        Self {
            batch_sizes: vec![32, 64, 128, 256],
            dropout_rates: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            hidden_sizes: vec![5, 10, 20, 40, 80, 160],
            learning_rates: vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0],
            max_grad_norms: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0],
            l1_alphas: vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0],
        }
    }
}

impl SearchGrid {
    /// Grid holding exactly the values of `cfg`.
    pub fn single(cfg: &TrainConfig) -> Self {
        Self {
            batch_sizes: vec![cfg.batch_size],
            dropout_rates: vec![cfg.dropout_rate],
            hidden_sizes: vec![cfg.hidden_size],
            learning_rates: vec![cfg.learning_rate],
            max_grad_norms: vec![cfg.max_grad_norm],
            l1_alphas: vec![cfg.l1_alpha],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let empty = self.batch_sizes.is_empty()
            || self.dropout_rates.is_empty()
            || self.hidden_sizes.is_empty()
            || self.learning_rates.is_empty()
            || self.max_grad_norms.is_empty()
            || self.l1_alphas.is_empty();
        if empty {
            return Err(Error::invalid("every search grid dimension needs a value"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub config: TrainConfig,
    pub arch: ArchitectureSpec,
}

/// Draws `iterations` candidates uniformly with replacement.
///
/// Dropout is drawn only for kinds that use it and the L1 weight only for
/// the SLP; other kinds keep the base configuration's values.
pub fn sample_candidates(
    base_arch: &ArchitectureSpec,
    grid: &SearchGrid,
    iterations: usize,
    base: &TrainConfig,
    seed: u64,
) -> Result<Vec<Candidate>> {
    grid.validate()?;
    if iterations == 0 {
        return Err(Error::invalid("random search needs at least one iteration"));
    }
    let kind = base_arch.kind;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::SEARCH]));
    (0..iterations)
        .map(|index| {
            let mut cfg = base.clone();
            cfg.batch_size = *grid.batch_sizes.choose(&mut rng).unwrap();
            let dropout = *grid.dropout_rates.choose(&mut rng).unwrap();
            cfg.hidden_size = *grid.hidden_sizes.choose(&mut rng).unwrap();
            cfg.learning_rate = *grid.learning_rates.choose(&mut rng).unwrap();
            cfg.max_grad_norm = *grid.max_grad_norms.choose(&mut rng).unwrap();
            let alpha = *grid.l1_alphas.choose(&mut rng).unwrap();
            cfg.dropout_rate = if kind.uses_dropout() { dropout } else { 0.0 };
            if kind == ArchitectureKind::Slp {
                cfg.l1_alpha = alpha;
            }
            cfg.seed = derive_seed(seed, &[stream::CANDIDATE, index as u64]);
            let arch = arch_for(base_arch, &cfg);
            arch.validate()?;
            Ok(Candidate {
                index,
                config: cfg,
                arch,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub candidate: Candidate,
    pub val_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub candidate: usize,
    #[serde(flatten)]
    pub epoch: EpochLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: usize,
    pub results: Vec<CandidateResult>,
    pub network: Network,
    pub log: Vec<LogRow>,
}

impl SearchOutcome {
    pub fn best_result(&self) -> &CandidateResult {
        &self.results[self.best]
    }
}

/// Trains every candidate and keeps the one with the lowest validation
/// loss (ties go to the earliest). Numerical failures are recorded and
/// excluded; any other error aborts the search.
pub fn random_search(
    base_arch: &ArchitectureSpec,
    grid: &SearchGrid,
    iterations: usize,
    base: &TrainConfig,
    seed: u64,
    data: (&SampleSet, &SampleSet),
    dims: (usize, usize),
    exec: Execution,
) -> Result<SearchOutcome> {
    let candidates = sample_candidates(base_arch, grid, iterations, base, seed)?;
    let (train, val) = data;
    let outcomes = exec.map(&candidates, |c| train_model(&c.arch, &c.config, dims.0, dims.1, train, val));

    let mut results = Vec::with_capacity(candidates.len());
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, Network)> = None;
    let mut failures = Vec::new();
    for (c, outcome) in candidates.into_iter().zip(outcomes) {
        match outcome {
            Ok(o) => {
                log.extend(o.log.iter().map(|e| LogRow {
                    candidate: c.index,
                    epoch: *e,
                }));
                if best.as_ref().is_none_or(|b| o.best_val_loss < b.1) {
                    best = Some((c.index, o.best_val_loss, o.network));
                }
                results.push(CandidateResult {
                    candidate: c,
                    val_loss: Some(o.best_val_loss),
                    best_epoch: Some(o.best_epoch),
                    epochs_run: o.log.len(),
                    error: None,
                });
            }
            Err(e) if e.is_numerical() => {
                log::warn!("candidate {} failed: {e}", c.index);
                failures.push(format!("candidate {}: {e}", c.index));
                results.push(CandidateResult {
                    candidate: c,
                    val_loss: None,
                    best_epoch: None,
                    epochs_run: 0,
                    error: Some(e.to_string()),
                });
            }
            Err(e) => return Err(e),
        }
    }
    let Some((best, _, network)) = best else {
        return Err(Error::AllCandidatesFailed {
            count: failures.len(),
            log: failures.join("; "),
        });
    };
    Ok(SearchOutcome {
        best,
        results,
        network,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_grid_defaults() {
        let g = SearchGrid::default();
        assert_eq!(g.batch_sizes, vec![32, 64, 128, 256]);
        assert_eq!(g.hidden_sizes.len(), 6);
        assert_eq!(g.learning_rates[0], 1e-5);
        assert_eq!(g.max_grad_norms[5], 10.0);
        assert_eq!(g.l1_alphas[5], 1.0);
    }

    #[test]
    fn candidate_sequence_is_seeded() {
        let arch = ArchitectureSpec::new(ArchitectureKind::Mlp, 10, 0.1);
        let base = TrainConfig::default();
        let a = sample_candidates(&arch, &SearchGrid::default(), 20, &base, 42).unwrap();
        let b = sample_candidates(&arch, &SearchGrid::default(), 20, &base, 42).unwrap();
        let c = sample_candidates(&arch, &SearchGrid::default(), 20, &base, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|c| c.config.l1_alpha == 0.0));
        assert!(a.iter().all(|c| c.arch.hidden_size == c.config.hidden_size));
    }

    #[test]
    fn slp_draws_alpha_but_not_dropout() {
        let arch = ArchitectureSpec::new(ArchitectureKind::Slp, 0, 0.0);
        let cands = sample_candidates(&arch, &SearchGrid::default(), 30, &TrainConfig::default(), 1).unwrap();
        assert!(cands.iter().all(|c| c.config.dropout_rate == 0.0 && c.config.l1_alpha > 0.0));
    }

    #[test]
    fn empty_grid_rejected() {
        let mut g = SearchGrid::default();
        g.l1_alphas.clear();
        let arch = ArchitectureSpec::new(ArchitectureKind::Slp, 0, 0.0);
        assert!(sample_candidates(&arch, &g, 3, &TrainConfig::default(), 1).is_err());
    }
}

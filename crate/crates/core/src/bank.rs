//! The thread bank: one fixed-size state per discovered thread.
//!
//! Applying a decision touches exactly one slot. Deciding `n̂ + 1` appends a
//! slot initialised from the empty-thread state; every other slot is left as
//! it was. The bank is generic over the state representation so the same
//! transition rule drives both plain inference (`Vec<f64>`) and
//! differentiable rollouts (graph node handles).

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::story::ClipFeature;

/// Folds a clip into a thread state.
pub trait ThreadUpdater {
    fn state_dim(&self) -> usize;

    /// The state a new thread starts from before its first clip is folded in.
    fn empty_state(&self) -> Vec<f64>;

    fn update(&self, clip: &ClipFeature, state: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThreadBank<S = Vec<f64>> {
    states: Vec<S>,
}

impl<S> Default for ThreadBank<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S> ThreadBank<S> {
    /// An empty bank (`n̂ = 0`).
    pub fn new() -> Self {
        Self { states: Vec::new() }
    }

    /// Number of discovered threads `n̂`.
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[S] {
        &self.states
    }

    /// State of 1-based thread `i`.
    pub fn state(&self, i: usize) -> Option<&S> {
        i.checked_sub(1).and_then(|k| self.states.get(k))
    }

    /// Applies a 1-based decision. `update` receives the current state of the
    /// chosen thread, or `None` when the decision opens a new thread.
    pub fn apply_with<F>(&mut self, decision: usize, update: F) -> Result<()>
    where
        F: FnOnce(Option<&S>) -> Result<S>,
    {
        let n = self.states.len();
        if decision == 0 || decision > n + 1 {
            return Err(Error::DecisionOutOfRange {
                decision,
                threads: n,
            });
        }
        if decision == n + 1 {
            let s = update(None)?;
            self.states.push(s);
        } else {
            let s = update(Some(&self.states[decision - 1]))?;
            self.states[decision - 1] = s;
        }
        Ok(())
    }

    /// Reorders slots so that new slot `k` holds old slot `perm[k]` (0-based).
    pub fn permuted(&self, perm: &[usize]) -> Self
    where
        S: Clone,
    {
        assert_eq!(perm.len(), self.states.len());
        Self {
            states: perm.iter().map(|&k| self.states[k].clone()).collect(),
        }
    }

    pub fn from_states(states: Vec<S>) -> Self {
        Self { states }
    }
}

impl ThreadBank<Vec<f64>> {
    /// `bank_apply`: folds `clip` into thread `decision` (1-based).
    pub fn apply<U: ThreadUpdater + ?Sized>(
        &mut self,
        clip: &ClipFeature,
        decision: usize,
        updater: &U,
    ) -> Result<()> {
        self.apply_with(decision, |prev| match prev {
            Some(s) => updater.update(clip, s),
            None => updater.update(clip, &updater.empty_state()),
        })
    }

    /// Number of stored reals: `n̂ · D`.
    pub fn storage_len(&self) -> usize {
        self.states.iter().map(Vec::len).sum()
    }
}

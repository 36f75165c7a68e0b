//! Client identity and the per-task old / in-between / new group split.

use crate::error::{Error, Result};
use crate::rng::{self, domain};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClientId(pub usize);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "client-{}", self.0)
    }
}

/// Group membership for one task. `old` clients hold only past data, `between`
/// clients hold past and current data, `new` clients joined at this task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientGroupAssignment {
    pub task: usize,
    pub old: BTreeSet<ClientId>,
    pub between: BTreeSet<ClientId>,
    pub new: BTreeSet<ClientId>,
}

impl ClientGroupAssignment {
    pub fn total(&self) -> usize {
        self.old.len() + self.between.len() + self.new.len()
    }

    pub fn all_clients(&self) -> BTreeSet<ClientId> {
        self.old
            .iter()
            .chain(&self.between)
            .chain(&self.new)
            .copied()
            .collect()
    }

    /// Clients holding current-task data.
    pub fn current_holders(&self) -> BTreeSet<ClientId> {
        self.between.iter().chain(&self.new).copied().collect()
    }

    fn assert_disjoint(&self) {
        debug_assert_eq!(
            self.all_clients().len(),
            self.total(),
            "group sets overlap"
        );
    }
}

/// Advance group membership into `task_id`. Task 0 puts all `initial` clients
/// in the new group; later tasks add `increment` brand-new clients and re-draw
/// a seeded `transition_fraction` of existing clients into the in-between
/// group, leaving the rest old.
pub fn advance_client_groups(
    prev: Option<&ClientGroupAssignment>,
    task_id: usize,
    initial: usize,
    increment: usize,
    transition_fraction: f64,
    seed: u64,
) -> Result<ClientGroupAssignment> {
    if !(0.0..=1.0).contains(&transition_fraction) {
        return Err(Error::invalid(
            "transition_fraction",
            "must lie in [0, 1]",
        ));
    }
    let next = if task_id == 0 {
        if prev.is_some() {
            return Err(Error::invalid("prev", "task 0 takes no prior assignment"));
        }
        if initial == 0 {
            return Err(Error::invalid("initial", "need at least one client"));
        }
        ClientGroupAssignment {
            task: 0,
            old: BTreeSet::new(),
            between: BTreeSet::new(),
            new: (0..initial).map(ClientId).collect(),
        }
    } else {
        let prev = prev.ok_or_else(|| Error::invalid("prev", "required for task > 0"))?;
        let existing: Vec<ClientId> = prev.all_clients().into_iter().collect();
        let n_between = ((existing.len() as f64) * transition_fraction).round() as usize;
        let n_between = n_between.min(existing.len());
        let mut shuffled = existing.clone();
        let mut r = rng::rng(seed, &[domain::GROUPS, task_id as u64]);
        shuffled.shuffle(&mut r);
        let between: BTreeSet<ClientId> = shuffled[..n_between].iter().copied().collect();
        let old: BTreeSet<ClientId> = shuffled[n_between..].iter().copied().collect();
        let next_id = existing.iter().map(|c| c.0 + 1).max().unwrap_or(0);
        let new: BTreeSet<ClientId> = (next_id..next_id + increment).map(ClientId).collect();
        ClientGroupAssignment {
            task: task_id,
            old,
            between,
            new,
        }
    };
    next.assert_disjoint();
    Ok(next)
}

/// Seeded uniform sample of `count` round participants without replacement.
/// Eligibility is the current-data holders; `include_old` extends it to old
/// clients, which then train from replay memory alone. Fewer eligible than
/// `count` means everyone participates. The result is sorted by id.
pub fn sample_round_clients(
    assignment: &ClientGroupAssignment,
    count: usize,
    include_old: bool,
    seed: u64,
) -> Vec<ClientId> {
    let mut eligible: Vec<ClientId> = if include_old {
        assignment.all_clients().into_iter().collect()
    } else {
        assignment.current_holders().into_iter().collect()
    };
    if count >= eligible.len() {
        return eligible;
    }
    let mut r = rng::rng(seed, &[domain::ROUND_SAMPLE, assignment.task as u64]);
    eligible.shuffle(&mut r);
    let mut picked: Vec<ClientId> = eligible[..count].to_vec();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_zero_puts_everyone_in_new() {
        let g = advance_client_groups(None, 0, 20, 0, 0.9, 1).unwrap();
        assert_eq!(g.new.len(), 20);
        assert!(g.old.is_empty() && g.between.is_empty());
    }

    #[test]
    fn transition_fraction_splits_existing() {
        let g0 = advance_client_groups(None, 0, 10, 0, 0.9, 1).unwrap();
        let g1 = advance_client_groups(Some(&g0), 1, 10, 5, 0.9, 1).unwrap();
        assert_eq!(g1.between.len(), 9);
        assert_eq!(g1.old.len(), 1);
        assert_eq!(g1.new.len(), 5);
        // New ids continue past the existing range.
        assert!(g1.new.iter().all(|c| c.0 >= 10));
        assert_eq!(g1.total(), 15);
    }

    #[test]
    fn zero_fraction_retires_everyone() {
        let g0 = advance_client_groups(None, 0, 4, 0, 0.5, 2).unwrap();
        let g1 = advance_client_groups(Some(&g0), 1, 4, 2, 0.0, 2).unwrap();
        assert_eq!(g1.old.len(), 4);
        assert!(g1.between.is_empty());
        assert_eq!(g1.new.len(), 2);
    }

    #[test]
    fn growth_is_monotone_and_deterministic() {
        let mut g = advance_client_groups(None, 0, 6, 0, 0.7, 9).unwrap();
        let mut prev_total = g.total();
        for t in 1..5 {
            let next = advance_client_groups(Some(&g), t, 6, 3, 0.7, 9).unwrap();
            assert!(next.total() >= prev_total);
            prev_total = next.total();
            let again = advance_client_groups(Some(&g), t, 6, 3, 0.7, 9).unwrap();
            assert_eq!(next, again);
            g = next;
        }
    }

    #[test]
    fn round_sampling_is_deterministic_without_replacement() {
        let g0 = advance_client_groups(None, 0, 20, 0, 0.9, 3).unwrap();
        let all = sample_round_clients(&g0, 20, false, 5);
        assert_eq!(all.len(), 20);
        let five = sample_round_clients(&g0, 5, false, 5);
        let five_again = sample_round_clients(&g0, 5, false, 5);
        assert_eq!(five, five_again);
        assert_eq!(five.len(), 5);
        let unique: BTreeSet<_> = five.iter().collect();
        assert_eq!(unique.len(), 5);
        assert!(sample_round_clients(&g0, 0, false, 5).is_empty());
    }

    #[test]
    fn old_clients_excluded_unless_enabled() {
        let g0 = advance_client_groups(None, 0, 10, 0, 0.9, 1).unwrap();
        let g1 = advance_client_groups(Some(&g0), 1, 10, 0, 0.0, 1).unwrap();
        // Everyone is old now; no one holds current data.
        assert!(sample_round_clients(&g1, 5, false, 7).is_empty());
        assert_eq!(sample_round_clients(&g1, 5, true, 7).len(), 5);
    }

    #[test]
    fn rejects_bad_fraction() {
        assert!(advance_client_groups(None, 0, 5, 0, 1.5, 0).is_err());
    }
}

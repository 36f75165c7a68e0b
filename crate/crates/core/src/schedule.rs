//! Class-incremental task schedules.

use crate::error::{Error, Result};
use crate::rng::{self, domain};
use serde::{Deserialize, Serialize};

/// Ordered list of pairwise-disjoint class sets, one per task. Each task's
/// classes are stored sorted; the draw order inside a chunk carries no
/// meaning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    tasks: Vec<Vec<usize>>,
}

impl TaskSchedule {
    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    /// Sorted class ids of task `t`.
    pub fn classes(&self, t: usize) -> &[usize] {
        &self.tasks[t]
    }

    /// Sorted class ids of all tasks up to and including `t`.
    pub fn classes_through(&self, t: usize) -> Vec<usize> {
        let mut all: Vec<usize> = self.tasks[..=t].iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    /// Number of distinct classes seen once task `t` has arrived.
    pub fn class_count_through(&self, t: usize) -> usize {
        self.tasks[..=t].iter().map(|c| c.len()).sum()
    }

    /// Task that introduces `class`, if any task does.
    pub fn task_of_class(&self, class: usize) -> Option<usize> {
        self.tasks.iter().position(|c| c.binary_search(&class).is_ok())
    }
}

/// Draw `t` disjoint class sets of `classes_per_task` ids each by a seeded
/// shuffle of all class ids.
pub fn build_task_schedule(
    class_count: usize,
    t: usize,
    classes_per_task: usize,
    seed: u64,
) -> Result<TaskSchedule> {
    if class_count == 0 || t == 0 || classes_per_task == 0 {
        return Err(Error::invalid(
            "schedule",
            "class_count, T, and classes_per_task must be positive",
        ));
    }
    if t * classes_per_task > class_count {
        return Err(Error::InsufficientClasses {
            needed: t * classes_per_task,
            available: class_count,
        });
    }
    let perm = rng::permutation(class_count, seed, &[domain::SCHEDULE]);
    let tasks = (0..t)
        .map(|i| {
            let mut chunk: Vec<usize> =
                perm[i * classes_per_task..(i + 1) * classes_per_task].to_vec();
            chunk.sort_unstable();
            chunk
        })
        .collect();
    Ok(TaskSchedule { tasks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn covers_all_classes_disjointly() {
        let s = build_task_schedule(100, 10, 10, 42).unwrap();
        let mut seen = BTreeSet::new();
        for t in 0..10 {
            assert_eq!(s.classes(t).len(), 10);
            for &c in s.classes(t) {
                assert!(seen.insert(c), "class {} appears twice", c);
            }
        }
        assert_eq!(seen.len(), 100);
        assert_eq!(s.class_count_through(9), 100);
    }

    #[test]
    fn single_task_takes_everything() {
        let s = build_task_schedule(4, 1, 4, 999).unwrap();
        assert_eq!(s.classes(0), &[0, 1, 2, 3]);
    }

    #[test]
    fn matches_independent_shuffle_oracle() {
        // Re-run the documented draw: a seeded permutation chunked into
        // consecutive groups, each sorted.
        let s = build_task_schedule(6, 3, 2, 7).unwrap();
        let perm = crate::rng::permutation(6, 7, &[crate::rng::domain::SCHEDULE]);
        for t in 0..3 {
            let mut expect = perm[t * 2..(t + 1) * 2].to_vec();
            expect.sort_unstable();
            assert_eq!(s.classes(t), expect.as_slice());
        }
    }

    #[test]
    fn rejects_insufficient_classes() {
        assert!(matches!(
            build_task_schedule(5, 3, 2, 0),
            Err(Error::InsufficientClasses { needed: 6, available: 5 })
        ));
    }

    #[test]
    fn task_of_class_inverts_schedule() {
        let s = build_task_schedule(9, 3, 3, 4).unwrap();
        for t in 0..3 {
            for &c in s.classes(t) {
                assert_eq!(s.task_of_class(c), Some(t));
            }
        }
        assert_eq!(s.task_of_class(1000), None);
    }
}

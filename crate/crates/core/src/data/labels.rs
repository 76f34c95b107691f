//! Scenario-dependent mapping from digits to output units.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Split,
    Permuted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Task,
    Domain,
    Class,
}

impl Protocol {
    pub const ALL: [Protocol; 2] = [Protocol::Split, Protocol::Permuted];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Split => "split",
            Protocol::Permuted => "permuted",
        }
    }
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Task, Scenario::Domain, Scenario::Class];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Task => "task",
            Scenario::Domain => "domain",
            Scenario::Class => "class",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split" => Ok(Protocol::Split),
            "permuted" => Ok(Protocol::Permuted),
            _ => Err(Error::Config(format!("unknown protocol `{s}`"))),
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task" | "task-il" => Ok(Scenario::Task),
            "domain" | "domain-il" => Ok(Scenario::Domain),
            "class" | "class-il" => Ok(Scenario::Class),
            _ => Err(Error::Config(format!("unknown scenario `{s}`"))),
        }
    }
}

/// Maps `(task, digit)` pairs to output units and yields the active unit
/// sets used for training and evaluation.
///
/// Units are laid out task by task: task `t` owns units
/// `t * k .. (t + 1) * k` where `k` is the number of classes per task.
/// Task-IL treats each block as a separate head, Class-IL grows the active
/// set block by block, and Domain-IL reuses the first block for every task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    scenario: Scenario,
    task_classes: Vec<Vec<u8>>,
    per_task: usize,
}

impl LabelMap {
    /// `task_classes[t]` lists the digits of task `t`, in within-task order.
    pub fn new(scenario: Scenario, task_classes: Vec<Vec<u8>>) -> Result<Self> {
        let per_task = task_classes.first().map_or(0, Vec::len);
        if per_task == 0 {
            return Err(contract("label map needs at least one task with classes"));
        }
        if task_classes.iter().any(|c| c.len() != per_task) {
            return Err(contract("all tasks must have the same number of classes"));
        }
        Ok(Self {
            scenario,
            task_classes,
            per_task,
        })
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario
    }

    pub fn n_tasks(&self) -> usize {
        self.task_classes.len()
    }

    pub fn classes_per_task(&self) -> usize {
        self.per_task
    }

    /// Number of output units the classifier needs.
    pub fn output_width(&self) -> usize {
        match self.scenario {
            Scenario::Domain => self.per_task,
            Scenario::Task | Scenario::Class => self.per_task * self.n_tasks(),
        }
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.n_tasks() {
            return Err(contract(format!(
                "task {task} outside stream of {} tasks",
                self.n_tasks()
            )));
        }
        Ok(())
    }

    /// Units task `task`'s own data is trained on.
    pub fn train_units(&self, task: usize) -> Result<Vec<usize>> {
        self.check_task(task)?;
        let k = self.per_task;
        Ok(match self.scenario {
            Scenario::Task => (task * k..(task + 1) * k).collect(),
            Scenario::Domain => (0..k).collect(),
            Scenario::Class => (0..(task + 1) * k).collect(),
        })
    }

    /// Units scored when testing task `task` after `seen` tasks were trained.
    pub fn eval_units(&self, task: usize, seen: usize) -> Result<Vec<usize>> {
        self.check_task(task)?;
        if seen == 0 || seen > self.n_tasks() || task >= seen {
            return Err(contract(format!(
                "cannot evaluate task {task} after {seen} tasks"
            )));
        }
        let k = self.per_task;
        Ok(match self.scenario {
            Scenario::Task => (task * k..(task + 1) * k).collect(),
            Scenario::Domain => (0..k).collect(),
            Scenario::Class => (0..seen * k).collect(),
        })
    }

    /// Units a frozen copy trained on `previous` tasks can speak for, when
    /// producing targets for an input attributed to task `owner`.
    pub fn previous_units(&self, owner: usize, previous: usize) -> Result<Vec<usize>> {
        if previous == 0 || owner >= previous {
            return Err(contract(format!(
                "no earlier units for task {owner} with {previous} completed tasks"
            )));
        }
        let k = self.per_task;
        Ok(match self.scenario {
            Scenario::Task => (owner * k..(owner + 1) * k).collect(),
            Scenario::Domain => (0..k).collect(),
            Scenario::Class => (0..previous * k).collect(),
        })
    }

    /// Position of `digit` within task `task`'s classes.
    pub fn within_task(&self, task: usize, digit: u8) -> Result<usize> {
        self.check_task(task)?;
        self.task_classes[task]
            .iter()
            .position(|&d| d == digit)
            .ok_or_else(|| contract(format!("digit {digit} does not belong to task {task}")))
    }

    /// Global output unit for `digit` of task `task`.
    pub fn unit(&self, task: usize, digit: u8) -> Result<usize> {
        let pos = self.within_task(task, digit)?;
        Ok(match self.scenario {
            Scenario::Domain => pos,
            Scenario::Task | Scenario::Class => task * self.per_task + pos,
        })
    }

    /// Training target for `digit` of task `task`, as a position within
    /// [`Self::train_units`]`(task)`.
    pub fn target(&self, task: usize, digit: u8) -> Result<usize> {
        let pos = self.within_task(task, digit)?;
        Ok(match self.scenario {
            Scenario::Task | Scenario::Domain => pos,
            Scenario::Class => task * self.per_task + pos,
        })
    }
}

/// The label convention as a free function: split tasks hold digits
/// `{2t, 2t+1}`, permuted tasks hold all ten digits (`task` is 0-based).
pub fn map_label(protocol: Protocol, scenario: Scenario, task: usize, digit: u8) -> Result<usize> {
    if digit > 9 {
        return Err(contract(format!("digit {digit} outside 0..=9")));
    }
    let d = digit as usize;
    match protocol {
        Protocol::Split => {
            if d / 2 != task {
                return Err(contract(format!("digit {digit} does not belong to split task {task}")));
            }
            Ok(match scenario {
                Scenario::Task | Scenario::Domain => d % 2,
                Scenario::Class => d,
            })
        }
        Protocol::Permuted => Ok(match scenario {
            Scenario::Task | Scenario::Domain => d,
            Scenario::Class => d + 10 * task,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split(scenario: Scenario) -> LabelMap {
        LabelMap::new(scenario, (0..5).map(|t| vec![2 * t, 2 * t + 1]).collect()).unwrap()
    }

    #[test]
    fn split_widths() {
        assert_eq!(split(Scenario::Task).output_width(), 10);
        assert_eq!(split(Scenario::Domain).output_width(), 2);
        assert_eq!(split(Scenario::Class).output_width(), 10);
    }

    #[test]
    fn free_function_examples() {
        assert_eq!(map_label(Protocol::Split, Scenario::Domain, 2, 4).unwrap(), 0);
        assert_eq!(map_label(Protocol::Split, Scenario::Class, 2, 5).unwrap(), 5);
        assert_eq!(map_label(Protocol::Split, Scenario::Task, 2, 5).unwrap(), 1);
        assert_eq!(map_label(Protocol::Permuted, Scenario::Class, 2, 7).unwrap(), 27);
        assert!(map_label(Protocol::Split, Scenario::Class, 0, 3).is_err());
        assert!(map_label(Protocol::Permuted, Scenario::Class, 0, 10).is_err());
    }

    #[test]
    fn class_targets_are_digits_for_split() {
        let m = split(Scenario::Class);
        for t in 0..5u8 {
            for d in [2 * t, 2 * t + 1] {
                assert_eq!(m.target(t as usize, d).unwrap(), d as usize);
            }
        }
    }

    #[test]
    fn eval_units_reject_unseen_tasks() {
        let m = split(Scenario::Class);
        assert!(m.eval_units(3, 3).is_err());
        assert_eq!(m.eval_units(0, 3).unwrap(), (0..6).collect::<Vec<_>>());
    }
}

use std::sync::Arc;

use super::{random_shift, Generator, SequenceKind};
use crate::error::{Error, Result};

/// Points of one task of a multitask design.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDesign {
    pub shift: Vec<f64>,
    pub m: u32,
    /// `n × d`, row-major.
    pub points: Vec<f64>,
}

impl TaskDesign {
    pub fn n(&self) -> usize {
        1 << self.m
    }

    pub fn point(&self, i: usize, d: usize) -> &[f64] {
        &self.points[i * d..(i + 1) * d]
    }
}

/// Per-task shifted copies of one low-discrepancy sequence.
///
/// Tasks are stored in non-increasing order of size. `order[k]` is the
/// caller's index of the task stored at position `k`; ties keep the
/// caller's order.
#[derive(Debug, Clone)]
pub struct LdDesign {
    generator: Arc<Generator>,
    tasks: Vec<TaskDesign>,
    order: Vec<usize>,
}

impl LdDesign {
    /// `sizes` and `shifts` are given in caller task order.
    pub fn new(generator: Arc<Generator>, sizes: &[usize], shifts: Vec<Vec<f64>>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::InvalidParameter("at least one task required".into()));
        }
        if shifts.len() != sizes.len() {
            return Err(Error::LengthMismatch { expected: sizes.len(), got: shifts.len() });
        }
        let d = generator.dim();
        for &n in sizes {
            if !n.is_power_of_two() {
                return Err(Error::NotPowerOfTwo(n));
            }
            if n as u64 > generator.n_max() {
                return Err(Error::IndexOutOfRange { index: n as u64, limit: generator.n_max() });
            }
        }
        for s in &shifts {
            if s.len() != d {
                return Err(Error::LengthMismatch { expected: d, got: s.len() });
            }
            if s.iter().any(|x| !(0.0..1.0).contains(x)) {
                return Err(Error::InvalidParameter("shift outside [0,1)".into()));
            }
        }
        let mut order: Vec<usize> = (0..sizes.len()).collect();
        order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]));
        let tasks = order
            .iter()
            .map(|&u| {
                let n = sizes[u];
                Ok(TaskDesign {
                    shift: shifts[u].clone(),
                    m: n.trailing_zeros(),
                    points: generator.points(&shifts[u], 0, n)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { generator, tasks, order })
    }

    /// Independent random shifts, task `k` (caller order) from substream `k`.
    pub fn random(generator: Arc<Generator>, sizes: &[usize], seed: u64) -> Result<Self> {
        let kind = generator.kind();
        let d = generator.dim();
        let shifts = (0..sizes.len()).map(|k| random_shift(kind, d, seed, k)).collect();
        Self::new(generator, sizes, shifts)
    }

    pub fn generator(&self) -> &Arc<Generator> {
        &self.generator
    }

    pub fn kind(&self) -> SequenceKind {
        self.generator.kind()
    }

    pub fn dim(&self) -> usize {
        self.generator.dim()
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Tasks in internal (non-increasing size) order.
    pub fn tasks(&self) -> &[TaskDesign] {
        &self.tasks
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Internal sizes `n_1 >= ... >= n_L`.
    pub fn sizes(&self) -> Vec<usize> {
        self.tasks.iter().map(TaskDesign::n).collect()
    }

    pub fn total(&self) -> usize {
        self.tasks.iter().map(TaskDesign::n).sum()
    }

    /// Internal position of caller task `user`.
    pub fn internal_index(&self, user: usize) -> Option<usize> {
        self.order.iter().position(|&u| u == user)
    }
}

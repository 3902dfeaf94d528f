//! Exact operation tallies for the simulated datapaths.
//!
//! Every datapath operation takes a caller-owned [`OpCounter`] and bumps the
//! tallies for the circuit block it models. Counters never share state, so
//! per-thread counters can be merged with `+=` in any order.

use std::ops::{Add, AddAssign};

use serde::Serialize;

/// Circuit block an operation is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    /// FWHT butterfly network (write path and query rotation).
    Transform,
    /// Comparator bank against the codebook boundaries.
    Quantize,
    /// Norm extraction on the write path.
    Norm,
    /// Per-query product table generation.
    Table,
    /// Per-key lookup, adder tree and norm scaling.
    Score,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Transform,
        Category::Quantize,
        Category::Norm,
        Category::Table,
        Category::Score,
    ];

    fn slot(self) -> usize {
        self as usize
    }
}

/// Tallies for one category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Tally {
    pub multiplications: u64,
    pub additions: u64,
    pub comparisons: u64,
    pub lookups: u64,
}

impl AddAssign for Tally {
    fn add_assign(&mut self, rhs: Self) {
        self.multiplications += rhs.multiplications;
        self.additions += rhs.additions;
        self.comparisons += rhs.comparisons;
        self.lookups += rhs.lookups;
    }
}

impl Add for Tally {
    type Output = Tally;

    fn add(mut self, rhs: Self) -> Tally {
        self += rhs;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpCounter {
    slots: [Tally; 5],
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn mults(&mut self, cat: Category, n: u64) {
        self.slots[cat.slot()].multiplications += n;
    }

    pub fn adds(&mut self, cat: Category, n: u64) {
        self.slots[cat.slot()].additions += n;
    }

    pub fn compares(&mut self, cat: Category, n: u64) {
        self.slots[cat.slot()].comparisons += n;
    }

    pub fn lookups(&mut self, cat: Category, n: u64) {
        self.slots[cat.slot()].lookups += n;
    }

    pub fn get(&self, cat: Category) -> Tally {
        self.slots[cat.slot()]
    }

    pub fn total(&self) -> Tally {
        self.slots.iter().fold(Tally::default(), |acc, t| acc + *t)
    }

    /// Multiplications summed over the given categories.
    pub fn multiplications_in(&self, cats: &[Category]) -> u64 {
        cats.iter().map(|c| self.get(*c).multiplications).sum()
    }
}

impl AddAssign<&OpCounter> for OpCounter {
    fn add_assign(&mut self, rhs: &OpCounter) {
        for (a, b) in self.slots.iter_mut().zip(rhs.slots.iter()) {
            *a += *b;
        }
    }
}

/// Serialized form: one entry per category plus the grand total.
#[derive(Serialize)]
struct CounterReport {
    transform: Tally,
    quantize: Tally,
    norm: Tally,
    table: Tally,
    score: Tally,
    total: Tally,
}

impl Serialize for OpCounter {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        CounterReport {
            transform: self.get(Category::Transform),
            quantize: self.get(Category::Quantize),
            norm: self.get(Category::Norm),
            table: self.get(Category::Table),
            score: self.get(Category::Score),
            total: self.total(),
        }
        .serialize(serializer)
    }
}

//! Replay buffer of verified, canonicalized solutions per problem.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::canon::{self, Frontend};
use crate::dataset::Problem;
use crate::error::{Error, Result};
use crate::sandbox::{ExecutionLimits, Sandbox};

/// One line of a buffer snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferRecord {
    pub problem_id: String,
    pub canonical_solution: String,
    pub epoch_added: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BufferStats {
    pub adds: u64,
    /// Canonical form already present.
    pub duplicates: u64,
    /// Canonicalization or verification failed.
    pub skipped: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Entry {
    canonical: String,
    epoch_added: u64,
}

/// Everything needed to canonicalize and verify a candidate entry.
#[derive(Clone, Copy)]
pub struct Admission<'a> {
    pub sandbox: &'a Sandbox,
    pub frontend: Frontend<'a>,
    pub limits: &'a ExecutionLimits,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayBuffer {
    entries: BTreeMap<String, Vec<Entry>>,
    stats: BufferStats,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a problem with an empty store.
    pub fn ensure_problem(&mut self, problem_id: &str) {
        self.entries.entry(problem_id.to_string()).or_default();
    }

    pub fn stats(&self) -> BufferStats {
        self.stats
    }

    pub fn len(&self, problem_id: &str) -> usize {
        self.entries.get(problem_id).map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.values().all(Vec::is_empty)
    }

    pub fn total(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    /// Stored canonical solutions for a problem, in insertion order.
    pub fn solutions(&self, problem_id: &str) -> Vec<&str> {
        self.entries
            .get(problem_id)
            .map(|v| v.iter().map(|e| e.canonical.as_str()).collect())
            .unwrap_or_default()
    }

    pub fn contains(&self, problem_id: &str, canonical: &str) -> bool {
        self.entries
            .get(problem_id)
            .is_some_and(|v| v.iter().any(|e| e.canonical == canonical))
    }

    /// Canonicalizes `solution`, checks that both it and its canonical form
    /// pass every test of `problem`, and stores the canonical form if new.
    /// Failures are logged and counted, never raised.
    pub fn add_if_new(&mut self, problem: &Problem, solution: &str, epoch: u64, admission: Admission<'_>) -> bool {
        match self.try_add(problem, solution, epoch, admission) {
            Ok(inserted) => inserted,
            Err(e) => {
                log::warn!("buffer: skipping a solution for {}: {e}", problem.id);
                self.stats.skipped += 1;
                false
            }
        }
    }

    fn try_add(&mut self, problem: &Problem, solution: &str, epoch: u64, admission: Admission<'_>) -> Result<bool> {
        let canonical = canon::canonicalize(solution, problem.entry_name()?, admission.frontend)?;
        if self.contains(&problem.id, &canonical) {
            self.stats.duplicates += 1;
            return Ok(false);
        }
        let original = admission.sandbox.run_tests(solution, &problem.tests, admission.limits)?;
        if !original.all_passed() {
            return Err(Error::Canonicalize(format!(
                "solution passes {}/{} tests",
                original.passed_tests, original.total_tests
            )));
        }
        if canonical != solution {
            let reduced = admission.sandbox.run_tests(&canonical, &problem.tests, admission.limits)?;
            if reduced.per_test != original.per_test {
                return Err(Error::Canonicalize(format!(
                    "canonical form passes {}/{} tests, the original passes all",
                    reduced.passed_tests, reduced.total_tests
                )));
            }
        }
        self.entries.entry(problem.id.clone()).or_default().push(Entry {
            canonical,
            epoch_added: epoch,
        });
        self.stats.adds += 1;
        Ok(true)
    }

    /// `n` draws, uniform with replacement. Empty or unknown stores give an
    /// empty list.
    pub fn sample_valid(&self, problem_id: &str, n: usize, rng: &mut impl Rng) -> Vec<String> {
        sample_with_replacement(&self.solutions(problem_id), n, rng)
            .into_iter()
            .map(str::to_string)
            .collect()
    }

    pub fn records(&self) -> Vec<BufferRecord> {
        self.entries
            .iter()
            .flat_map(|(id, v)| {
                v.iter().map(move |e| BufferRecord {
                    problem_id: id.clone(),
                    canonical_solution: e.canonical.clone(),
                    epoch_added: e.epoch_added,
                })
            })
            .collect()
    }

    /// Writes one JSON record per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for rec in self.records() {
            serde_json::to_writer(&mut out, &rec)?;
            out.push(b'\n');
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&out).map_err(|e| Error::io(path, e))
    }

    /// Restores a snapshot. Statistics start from the restored adds.
    pub fn load(path: &Path, problem_ids: impl IntoIterator<Item = String>) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut buffer = ReplayBuffer::new();
        for id in problem_ids {
            buffer.ensure_problem(&id);
        }
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: BufferRecord = serde_json::from_str(&line).map_err(|e| Error::Record {
                index: i,
                message: e.to_string(),
            })?;
            if buffer.contains(&rec.problem_id, &rec.canonical_solution) {
                return Err(Error::Record {
                    index: i,
                    message: format!("duplicate entry for {}", rec.problem_id),
                });
            }
            buffer.entries.entry(rec.problem_id).or_default().push(Entry {
                canonical: rec.canonical_solution,
                epoch_added: rec.epoch_added,
            });
            buffer.stats.adds += 1;
        }
        Ok(buffer)
    }

    /// Per-problem entry counts.
    pub fn counts(&self) -> BTreeMap<String, usize> {
        self.entries.iter().map(|(k, v)| (k.clone(), v.len())).collect()
    }
}

/// `n` uniform draws with replacement from `items`.
pub fn sample_with_replacement<T: Clone>(items: &[T], n: usize, rng: &mut impl Rng) -> Vec<T> {
    if items.is_empty() {
        return Vec::new();
    }
    (0..n).map(|_| items[rng.gen_range(0..items.len())].clone()).collect()
}

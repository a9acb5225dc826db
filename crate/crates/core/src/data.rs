//! Synthetic classification data and batching.
//!
//! The stand-in task is "majority count": every sequence contains some copies
//! of token 7 and some of token 9, and the label is 1 when 7 occurs more
//! often. Solving it requires aggregating across positions.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::nn::ModelConfig;
use crate::tensor::{Matrix, Rng};

pub const TOKEN_A: u32 = 7;
pub const TOKEN_B: u32 = 9;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seq_len: usize,
    pub sequences: Vec<Vec<u32>>,
    pub labels: Vec<u32>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Checks ids and labels against a model configuration.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.seq_len != cfg.seq_len {
            return Err(Error::Data(format!(
                "dataset sequence length {} but model expects {}",
                self.seq_len, cfg.seq_len
            )));
        }
        for (i, (seq, &label)) in self.sequences.iter().zip(&self.labels).enumerate() {
            if let Some(&t) = seq.iter().find(|&&t| t as usize >= cfg.vocab_size) {
                return Err(Error::Data(format!("row {i}: token {t} >= vocab {}", cfg.vocab_size)));
            }
            if label as usize >= cfg.n_classes {
                return Err(Error::Data(format!("row {i}: label {label} >= {} classes", cfg.n_classes)));
            }
        }
        Ok(())
    }

    /// Gathers rows into a `len x seq` token matrix and a label list.
    pub fn gather(&self, indices: &[usize]) -> (Matrix, Vec<u32>) {
        let mut data = Vec::with_capacity(indices.len() * self.seq_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend(self.sequences[i].iter().map(|&t| t as f32));
            labels.push(self.labels[i]);
        }
        let m = Matrix::from_vec(indices.len(), self.seq_len, data).expect("sequence lengths are uniform");
        (m, labels)
    }

    /// Writes `label,tok0,tok1,...` lines.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for (seq, label) in self.sequences.iter().zip(&self.labels) {
            write!(w, "{label}")?;
            for t in seq {
                write!(w, ",{t}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `label,tok0,tok1,...` lines. Blank lines are skipped.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Dataset> {
        let mut sequences = Vec::new();
        let mut labels = Vec::new();
        let mut seq_len = None;
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<u32> = line
                .split(',')
                .map(|f| f.trim().parse::<u32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?;
            if fields.len() < 2 {
                return Err(Error::Data(format!("line {}: need a label and tokens", n + 1)));
            }
            let len = *seq_len.get_or_insert(fields.len() - 1);
            if fields.len() - 1 != len {
                return Err(Error::Data(format!(
                    "line {}: {} tokens, expected {len}",
                    n + 1,
                    fields.len() - 1
                )));
            }
            labels.push(fields[0]);
            sequences.push(fields[1..].to_vec());
        }
        let seq_len = seq_len.ok_or_else(|| Error::Data("empty dataset".into()))?;
        Ok(Dataset {
            seq_len,
            sequences,
            labels,
            seed: 0,
        })
    }
}

/// Generates the majority-count task.
///
/// Each sequence draws counts `n7, n9` uniformly from `0..=seq/2` (redrawn
/// while equal), places them at random distinct positions and fills the rest
/// with uniform tokens other than 7 and 9. Label is `1` iff `n7 > n9`.
pub fn gen_majority_task(size: usize, cfg: &ModelConfig, seed: u64) -> Result<Dataset> {
    if size == 0 {
        return Err(Error::Data("dataset size must be at least 1".into()));
    }
    if cfg.vocab_size < 10 {
        return Err(Error::Data(format!(
            "vocab of {} cannot hold tokens 7 and 9 plus fillers",
            cfg.vocab_size
        )));
    }
    if cfg.n_classes < 2 {
        return Err(Error::Data("majority task needs two classes".into()));
    }
    let s = cfg.seq_len;
    if s < 1 {
        return Err(Error::Data("sequence length must be at least 1".into()));
    }
    let max_count = (s / 2).max(1);
    let mut rng = Rng::seed(seed);
    let fillers: Vec<u32> = (0..cfg.vocab_size as u32)
        .filter(|&t| t != TOKEN_A && t != TOKEN_B)
        .collect();
    let mut sequences = Vec::with_capacity(size);
    let mut labels = Vec::with_capacity(size);
    let mut positions: Vec<usize> = (0..s).collect();
    for _ in 0..size {
        let (na, nb) = loop {
            let a = rng.below(max_count + 1);
            let b = rng.below(max_count + 1);
            if a != b && a + b <= s {
                break (a, b);
            }
        };
        let mut seq: Vec<u32> = (0..s).map(|_| fillers[rng.below(fillers.len())]).collect();
        rng.shuffle(&mut positions);
        for &p in &positions[..na] {
            seq[p] = TOKEN_A;
        }
        for &p in &positions[na..na + nb] {
            seq[p] = TOKEN_B;
        }
        labels.push(u32::from(na > nb));
        sequences.push(seq);
    }
    Ok(Dataset {
        seq_len: s,
        sequences,
        labels,
        seed,
    })
}

/// Endless mini-batch stream over a dataset.
///
/// Each epoch visits a fresh seeded permutation of all rows. The final short
/// batch of an epoch is topped up with rows drawn with replacement, so every
/// batch has exactly `batch_size` rows; with fewer rows than `batch_size` the
/// whole batch is such a resample.
#[derive(Debug, Clone)]
pub struct Batches<'a> {
    data: &'a Dataset,
    batch_size: usize,
    rng: Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

pub fn batches(data: &Dataset, batch_size: usize, seed: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if data.is_empty() {
        return Err(Error::Data("cannot batch an empty dataset".into()));
    }
    Ok(Batches {
        data,
        batch_size,
        rng: Rng::seed(seed),
        order: Vec::new(),
        cursor: 0,
        epoch: 0,
    })
}

impl Batches<'_> {
    /// Epochs started so far.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Row indices of the next batch.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order = (0..self.data.len()).collect();
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
            self.epoch += 1;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let mut idx = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        while idx.len() < self.batch_size {
            idx.push(self.rng.below(self.data.len()));
        }
        idx
    }
}

impl Iterator for Batches<'_> {
    type Item = (Matrix, Vec<u32>);

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.next_indices();
        Some(self.data.gather(&idx))
    }
}

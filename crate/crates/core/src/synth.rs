//! Chain-based synthetic corpora.
//!
//! Items are partitioned into `pattern_count` disjoint chains of
//! `pattern_len` items. User `u` belongs to group `u % pattern_count` and
//! walks a contiguous segment of its group's chain; with probability `noise`
//! each step is replaced by a uniformly random item.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{write_file, RawCorpus};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub users: usize,
    pub items: usize,
    pub pattern_count: usize,
    pub pattern_len: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            users: 2000,
            items: 500,
            pattern_count: 25,
            pattern_len: 20,
            noise: 0.2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Param(msg));
        if self.users == 0 || self.pattern_count == 0 {
            return bad("users and pattern-count must be positive".into());
        }
        if self.pattern_len < 2 {
            return bad(format!("pattern length {} is below 2", self.pattern_len));
        }
        if self.items < self.pattern_len {
            return bad(format!(
                "{} items cannot hold a chain of length {}",
                self.items, self.pattern_len
            ));
        }
        if self.pattern_count * self.pattern_len > self.items {
            return bad(format!(
                "{} chains of length {} need {} items, only {} available",
                self.pattern_count,
                self.pattern_len,
                self.pattern_count * self.pattern_len,
                self.items
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 1]", self.noise));
        }
        Ok(())
    }

    /// The latent chains as item numbers.
    pub fn chains(&self) -> Result<Vec<Vec<usize>>> {
        self.validate()?;
        let mut perm: Vec<usize> = (0..self.items).collect();
        perm.shuffle(&mut substream(self.seed, Stream::Synth, 0));
        Ok(perm
            .chunks(self.pattern_len)
            .take(self.pattern_count)
            .map(<[usize]>::to_vec)
            .collect())
    }

    pub fn generate(&self) -> Result<RawCorpus> {
        let chains = self.chains()?;
        let mut rng = substream(self.seed, Stream::Synth, 1);
        let len = self.pattern_len;
        let min_len = (len / 2).max(2);
        let records = (0..self.users)
            .map(|u| {
                let chain = &chains[u % self.pattern_count];
                let n = rng.random_range(min_len..=len);
                let start = rng.random_range(0..=len - n);
                let items = chain[start..start + n]
                    .iter()
                    .map(|&i| {
                        let i = if self.noise > 0.0 && rng.random_bool(self.noise) {
                            rng.random_range(0..self.items)
                        } else {
                            i
                        };
                        format!("i{i}")
                    })
                    .collect();
                (format!("u{u}"), items)
            })
            .collect();
        Ok(RawCorpus { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, render(&self.generate()?).as_bytes())
    }
}

/// Dataset text: one `user<TAB>item,item,...` line per record.
pub fn render(raw: &RawCorpus) -> String {
    raw.records
        .iter()
        .map(|(u, items)| format!("{u}\t{}\n", items.join(",")))
        .collect()
}

//! Behavior-sequence ingestion, filtering, user splits and sample generation.
//!
//! Input files hold one user per line: `user-id<TAB>item1,item2,...` in
//! chronological order. Repeated lines for the same user are appended in file
//! order.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

/// Longest prefix fed to the sequence encoder.
pub const MAX_PREFIX: usize = 20;

/// Records as read from disk, one per distinct user id, in first-seen order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RawCorpus {
    pub records: Vec<(String, Vec<String>)>,
}

impl RawCorpus {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, path)
    }

    /// Parses dataset text; `origin` only labels error messages.
    pub fn parse(text: &str, origin: impl Into<PathBuf>) -> Result<Self> {
        let origin = origin.into();
        let mut records: Vec<(String, Vec<String>)> = Vec::new();
        let mut by_user: HashMap<String, usize> = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| Error::Parse {
                path: origin.clone(),
                line: lineno + 1,
                msg: msg.to_string(),
            };
            let (user, items) = line
                .split_once('\t')
                .ok_or_else(|| err("expected `user-id<TAB>items`"))?;
            if user.is_empty() {
                return Err(err("empty user id"));
            }
            if items.is_empty() {
                return Err(err("empty item list"));
            }
            let mut parsed = Vec::new();
            for item in items.split(',') {
                if item.is_empty() {
                    return Err(err("empty item id"));
                }
                parsed.push(item.to_string());
            }
            match by_user.get(user) {
                Some(&slot) => records[slot].1.extend(parsed),
                None => {
                    by_user.insert(user.to_string(), records.len());
                    records.push((user.to_string(), parsed));
                }
            }
        }
        if records.is_empty() {
            return Err(Error::EmptyCorpus(format!(
                "{} contains no records",
                origin.display()
            )));
        }
        Ok(RawCorpus { records })
    }

    pub fn interactions(&self) -> usize {
        self.records.iter().map(|(_, items)| items.len()).sum()
    }
}

/// Dense bijection between opaque string ids and `0..len`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocab {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_ids(ids: Vec<String>) -> Self {
        let index = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Vocab { ids, index }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub users: Vocab,
    pub items: Vocab,
    pub sequences: Vec<Vec<usize>>,
    split: Vec<Split>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_len: f64,
    /// Fraction of empty cells in the user-item matrix, in `[0, 1]`.
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainSample {
    pub user: usize,
    pub prefix: Vec<usize>,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalCase {
    pub user: usize,
    /// Leading 80% of the user's sequence.
    pub prefix: Vec<usize>,
    /// Remaining items, sorted and deduplicated.
    pub ground_truth: Vec<usize>,
}

impl EvalCase {
    /// The part of the prefix fed to the sequence encoder.
    pub fn encoding_prefix(&self) -> &[usize] {
        let start = self.prefix.len().saturating_sub(MAX_PREFIX);
        &self.prefix[start..]
    }
}

/// Drops rare items and too-short users, rebuilds dense vocabularies and
/// splits users 8:1:1 after a seeded shuffle.
///
/// Filtering runs to a fixed point: dropping a user can push an item back
/// under `min_count`, so passes repeat until nothing changes.
pub fn preprocess(raw: &RawCorpus, min_count: usize, seed: u64) -> Result<Corpus> {
    if min_count < 1 {
        return Err(Error::Param("min-count must be at least 1".into()));
    }
    let mut seqs: Vec<(&str, Vec<&str>)> = raw
        .records
        .iter()
        .map(|(u, items)| (u.as_str(), items.iter().map(String::as_str).collect()))
        .collect();
    loop {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for (_, items) in &seqs {
            for &it in items {
                *counts.entry(it).or_default() += 1;
            }
        }
        let before: usize = seqs.iter().map(|(_, s)| s.len()).sum::<usize>() + seqs.len();
        for (_, items) in seqs.iter_mut() {
            items.retain(|it| counts[it] >= min_count);
        }
        seqs.retain(|(_, items)| items.len() >= 2);
        let after: usize = seqs.iter().map(|(_, s)| s.len()).sum::<usize>() + seqs.len();
        if after == before {
            break;
        }
    }
    if seqs.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "no user keeps two or more items at min-count {min_count}"
        )));
    }

    let users = Vocab::from_ids(seqs.iter().map(|(u, _)| u.to_string()).collect());
    let mut item_ids: Vec<String> = Vec::new();
    let mut item_index: HashMap<&str, usize> = HashMap::new();
    let mut sequences = Vec::with_capacity(seqs.len());
    for (_, items) in &seqs {
        let mut seq = Vec::with_capacity(items.len());
        for &it in items {
            let next = item_ids.len();
            let idx = *item_index.entry(it).or_insert_with(|| {
                item_ids.push(it.to_string());
                next
            });
            seq.push(idx);
        }
        sequences.push(seq);
    }
    let items = Vocab::from_ids(item_ids);

    let n = users.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, Stream::Split, 0));
    let n_val = n / 10;
    let n_test = n / 10;
    let n_train = n - n_val - n_test;
    let mut split = vec![Split::Train; n];
    for &u in &order[n_train..n_train + n_val] {
        split[u] = Split::Val;
    }
    for &u in &order[n_train + n_val..] {
        split[u] = Split::Test;
    }
    Ok(Corpus {
        users,
        items,
        sequences,
        split,
    })
}

impl Corpus {
    /// Assembles a corpus from already-dense parts. Used by tests and by
    /// callers that manage their own vocabularies.
    pub fn from_parts(
        users: Vocab,
        items: Vocab,
        sequences: Vec<Vec<usize>>,
        split: Vec<Split>,
    ) -> Result<Self> {
        if sequences.len() != users.len() || split.len() != users.len() {
            return Err(Error::Shape(format!(
                "{} users, {} sequences, {} split labels",
                users.len(),
                sequences.len(),
                split.len()
            )));
        }
        if let Some(&bad) = sequences.iter().flatten().find(|&&i| i >= items.len()) {
            return Err(Error::Index(format!(
                "item {bad} outside vocabulary of {}",
                items.len()
            )));
        }
        Ok(Corpus {
            users,
            items,
            sequences,
            split,
        })
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn split_of(&self, user: usize) -> Split {
        self.split[user]
    }

    pub fn users_in(&self, split: Split) -> Vec<usize> {
        (0..self.num_users())
            .filter(|&u| self.split[u] == split)
            .collect()
    }

    /// Keeps only the users of `split`, re-indexed densely. The item
    /// vocabulary is left untouched.
    pub fn restrict_to(&self, split: Split) -> Corpus {
        let keep = self.users_in(split);
        Corpus {
            users: Vocab::from_ids(keep.iter().map(|&u| self.users.id(u).to_string()).collect()),
            items: self.items.clone(),
            sequences: keep.iter().map(|&u| self.sequences[u].clone()).collect(),
            split: vec![split; keep.len()],
        }
    }

    pub fn stats(&self) -> CorpusStats {
        let interactions: usize = self.sequences.iter().map(Vec::len).sum();
        let users = self.num_users();
        let items = self.num_items();
        let cells = (users * items) as f64;
        CorpusStats {
            users,
            items,
            interactions,
            avg_len: interactions as f64 / users.max(1) as f64,
            sparsity: if cells > 0.0 {
                1.0 - interactions as f64 / cells
            } else {
                1.0
            },
        }
    }

    /// Every position k >= 1 of every training user becomes a target, with the
    /// up-to-20 preceding items as prefix.
    pub fn make_train_samples(&self) -> Vec<TrainSample> {
        let mut out = Vec::new();
        for user in self.users_in(Split::Train) {
            let seq = &self.sequences[user];
            for k in 1..seq.len() {
                let start = k.saturating_sub(MAX_PREFIX);
                out.push(TrainSample {
                    user,
                    prefix: seq[start..k].to_vec(),
                    target: seq[k],
                });
            }
        }
        out
    }

    /// Returns the evaluation cases of `split` and the number of users skipped
    /// because their 20% tail (or 80% head) was empty.
    pub fn make_eval_cases(&self, split: Split) -> (Vec<EvalCase>, usize) {
        let mut cases = Vec::new();
        let mut skipped = 0;
        for user in self.users_in(split) {
            let seq = &self.sequences[user];
            let cut = seq.len() * 4 / 5;
            if cut == 0 || cut == seq.len() {
                skipped += 1;
                continue;
            }
            let mut gt = seq[cut..].to_vec();
            gt.sort_unstable();
            gt.dedup();
            cases.push(EvalCase {
                user,
                prefix: seq[..cut].to_vec(),
                ground_truth: gt,
            });
        }
        (cases, skipped)
    }

    /// Writes the filtered corpus in the input format, using original ids.
    pub fn write_dataset(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (u, seq) in self.sequences.iter().enumerate() {
            out.push_str(self.users.id(u));
            out.push('\t');
            let items: Vec<&str> = seq.iter().map(|&i| self.items.id(i)).collect();
            out.push_str(&items.join(","));
            out.push('\n');
        }
        write_file(path, out.as_bytes())
    }

    /// Writes `index<TAB>id` lines for users and items and one file of user
    /// ids per split.
    pub fn write_vocab_and_splits(&self, dir: &Path) -> Result<()> {
        let vocab_text = |v: &Vocab| {
            v.ids()
                .iter()
                .enumerate()
                .map(|(i, id)| format!("{i}\t{id}\n"))
                .collect::<String>()
        };
        write_file(&dir.join("users.tsv"), vocab_text(&self.users).as_bytes())?;
        write_file(&dir.join("items.tsv"), vocab_text(&self.items).as_bytes())?;
        for split in [Split::Train, Split::Val, Split::Test] {
            let text: String = self
                .users_in(split)
                .iter()
                .map(|&u| format!("{}\n", self.users.id(u)))
                .collect();
            write_file(&dir.join(format!("split_{split}.txt")), text.as_bytes())?;
        }
        Ok(())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(bytes)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(lines: &str) -> RawCorpus {
        RawCorpus::parse(lines, "mem").unwrap()
    }

    #[test]
    fn parses_single_record() {
        let r = raw("u1\ta,b,a\n");
        assert_eq!(
            r.records,
            vec![("u1".to_string(), vec!["a".into(), "b".into(), "a".into()])]
        );
    }

    #[test]
    fn empty_item_list_names_line() {
        let err = RawCorpus::parse("u1\ta\nu2\t\n", "data.tsv").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_tab_is_parse_error() {
        assert!(matches!(
            RawCorpus::parse("u1 a,b\n", "x"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        assert!(matches!(
            RawCorpus::parse("", "x"),
            Err(Error::EmptyCorpus(_))
        ));
    }

    #[test]
    fn repeated_user_lines_concatenate_in_file_order() {
        let r = raw("u1\ta,b\nu2\tc\nu1\td\n");
        assert_eq!(r.records.len(), 2);
        assert_eq!(r.records[0].1, vec!["a", "b", "d"]);
    }

    #[test]
    fn rare_item_is_removed() {
        // x appears 4 times, everything else 5+
        let text = "u1\ta,b,x\nu2\ta,b,x\nu3\ta,b,x\nu4\ta,b,x\nu5\ta,b\n";
        let c = preprocess(&raw(text), 5, 0).unwrap();
        assert!(c.items.index_of("x").is_none());
        assert_eq!(c.num_items(), 2);
        for seq in &c.sequences {
            assert_eq!(seq.len(), 2);
        }
    }

    #[test]
    fn min_count_one_keeps_everything() {
        let text = "u1\ta,b,c\nu2\td,e\n";
        let r = raw(text);
        let c = preprocess(&r, 1, 3).unwrap();
        assert_eq!(c.stats().interactions, r.interactions());
        assert_eq!(c.num_items(), 5);
    }

    #[test]
    fn ten_users_split_eight_one_one() {
        let text: String = (0..10).map(|u| format!("u{u}\ta,b\n")).collect();
        let c = preprocess(&raw(&text), 1, 42).unwrap();
        assert_eq!(c.users_in(Split::Train).len(), 8);
        assert_eq!(c.users_in(Split::Val).len(), 1);
        assert_eq!(c.users_in(Split::Test).len(), 1);
    }

    #[test]
    fn short_users_dropped() {
        let c = preprocess(&raw("u1\ta\nu2\ta,b\n"), 1, 0).unwrap();
        assert_eq!(c.num_users(), 1);
        assert_eq!(c.users.id(0), "u2");
    }

    #[test]
    fn all_filtered_is_empty_corpus() {
        assert!(matches!(
            preprocess(&raw("u1\ta,b\n"), 5, 0),
            Err(Error::EmptyCorpus(_))
        ));
    }

    fn one_user(seq: Vec<usize>, items: usize) -> Corpus {
        Corpus::from_parts(
            Vocab::from_ids(vec!["u".into()]),
            Vocab::from_ids((0..items).map(|i| i.to_string()).collect()),
            vec![seq],
            vec![Split::Train],
        )
        .unwrap()
    }

    #[test]
    fn samples_enumerate_prefixes() {
        let s = one_user(vec![0, 1, 2], 3).make_train_samples();
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].prefix.clone(), s[0].target), (vec![0], 1));
        assert_eq!((s[1].prefix.clone(), s[1].target), (vec![0, 1], 2));
        assert_eq!(one_user(vec![0, 1], 2).make_train_samples().len(), 1);
    }

    #[test]
    fn long_prefix_keeps_last_twenty() {
        let seq: Vec<usize> = (0..25).collect();
        let s = one_user(seq.clone(), 25).make_train_samples();
        let last = s.last().unwrap();
        // k = 25 (1-based) → target v25, prefix v5..v24 → indices 4..24
        assert_eq!(last.target, 24);
        assert_eq!(last.prefix, seq[4..24].to_vec());
    }

    fn eval_shape(m: usize) -> Option<(usize, usize)> {
        let mut c = one_user((0..m).collect(), m.max(1));
        c.split = vec![Split::Test];
        let (cases, _) = c.make_eval_cases(Split::Test);
        cases
            .first()
            .map(|e| (e.prefix.len(), e.ground_truth.len()))
    }

    #[test]
    fn eighty_twenty_cut() {
        assert_eq!(eval_shape(10), Some((8, 2)));
        assert_eq!(eval_shape(4), Some((3, 1)));
        assert_eq!(eval_shape(1), None);
    }
}

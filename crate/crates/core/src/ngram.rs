//! Repeat n-gram blocking.
//!
//! For a row whose last `n - 1` tokens equal the first `n - 1` tokens of an
//! earlier window, the token that followed that window is banned by writing
//! [`MASKED`] into its log-probability. Two kernels compute the same result:
//! a sequential scan, and a data-parallel kernel with one task group per
//! row and one task per window start.

use std::collections::BTreeSet;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::tensor::{Tensor, MASKED};

/// Windows handed to one worker at a time by the parallel kernel. Rows
/// with fewer windows are scanned by the task that owns the row.
const WINDOW_GRAIN: usize = 1024;

/// Generated token ids, `rows x cols`, with a per-row valid length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMatrix {
    rows: usize,
    cols: usize,
    ids: Vec<u32>,
    valid: Vec<usize>,
}

impl TokenMatrix {
    pub fn new(rows: usize, cols: usize, ids: Vec<u32>, valid: Vec<usize>) -> Result<Self> {
        if ids.len() != rows * cols || valid.len() != rows {
            return Err(Error::dim("TokenMatrix", &[rows, cols], &[ids.len(), valid.len()]));
        }
        if let Some(&bad) = valid.iter().find(|&&v| v > cols) {
            return Err(Error::Index {
                op: "TokenMatrix",
                index: bad,
                bound: cols,
            });
        }
        Ok(TokenMatrix {
            rows,
            cols,
            ids,
            valid,
        })
    }

    /// Right-pads ragged rows; each row's valid length is its own length.
    pub fn from_rows(rows: &[Vec<u32>]) -> Self {
        let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            ids.extend_from_slice(row);
            ids.extend(std::iter::repeat_n(0, cols - row.len()));
        }
        TokenMatrix {
            rows: rows.len(),
            cols,
            ids,
            valid: rows.iter().map(Vec::len).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn valid_length(&self, row: usize) -> usize {
        self.valid[row]
    }

    /// Marks a row finished; it is skipped by both kernels.
    pub fn freeze_row(&mut self, row: usize) {
        self.valid[row] = 0;
    }

    /// Valid tokens of `row`.
    pub fn row(&self, row: usize) -> &[u32] {
        &self.ids[row * self.cols..row * self.cols + self.valid[row]]
    }
}

/// Per-row log-probability scores over the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    vocab: usize,
    data: Vec<f32>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, vocab: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * vocab {
            return Err(Error::dim("ScoreMatrix", &[rows, vocab], &[data.len()]));
        }
        Ok(ScoreMatrix { rows, vocab, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.vocab..(r + 1) * self.vocab]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.vocab..(r + 1) * self.vocab]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, r: usize, tok: usize) -> f32 {
        self.data[r * self.vocab + tok]
    }
}

impl TryFrom<Tensor> for ScoreMatrix {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::dim("ScoreMatrix", t.shape(), &[0, 0]));
        }
        let (rows, vocab) = (t.shape()[0], t.shape()[1]);
        ScoreMatrix::new(rows, vocab, t.into_data())
    }
}

/// Banned token ids per row.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BanSet {
    rows: Vec<BTreeSet<u32>>,
}

impl BanSet {
    pub fn empty(rows: usize) -> Self {
        BanSet {
            rows: vec![BTreeSet::new(); rows],
        }
    }

    pub fn row(&self, r: usize) -> &BTreeSet<u32> {
        &self.rows[r]
    }

    pub fn rows(&self) -> usize {
        self.rows.len()
    }

    pub fn total(&self) -> usize {
        self.rows.iter().map(BTreeSet::len).sum()
    }
}

impl FromIterator<BTreeSet<u32>> for BanSet {
    fn from_iter<I: IntoIterator<Item = BTreeSet<u32>>>(iter: I) -> Self {
        BanSet {
            rows: iter.into_iter().collect(),
        }
    }
}

/// A kernel that bans repeated n-grams in place.
pub trait NgramBlocker: Send + Sync {
    fn name(&self) -> &'static str;

    /// Floors banned entries of `scores` and reports what was banned.
    /// `n == 0` disables blocking.
    fn ban(&self, tokens: &TokenMatrix, scores: &mut ScoreMatrix, n: usize) -> BanSet;
}

#[derive(Debug, Default)]
pub struct ReferenceKernel;

#[derive(Debug, Default)]
pub struct ParallelKernel;

impl NgramBlocker for ReferenceKernel {
    fn name(&self) -> &'static str {
        "reference"
    }

    fn ban(&self, tokens: &TokenMatrix, scores: &mut ScoreMatrix, n: usize) -> BanSet {
        debug_assert_eq!(tokens.rows(), scores.rows());
        if n == 0 {
            return BanSet::empty(tokens.rows());
        }
        let vocab = scores.vocab();
        (0..tokens.rows())
            .map(|r| {
                let row = tokens.row(r);
                let mut banned = BTreeSet::new();
                if row.len() + 1 < n {
                    return banned;
                }
                let start = row.len() + 1 - n;
                let probs = scores.row_mut(r);
                for c in 0..start {
                    if (0..n - 1).all(|i| row[c + i] == row[start + i]) {
                        let tok = row[c + n - 1];
                        if (tok as usize) < vocab {
                            probs[tok as usize] = MASKED;
                            banned.insert(tok);
                        }
                    }
                }
                banned
            })
            .collect()
    }
}

impl NgramBlocker for ParallelKernel {
    fn name(&self) -> &'static str {
        "parallel"
    }

    fn ban(&self, tokens: &TokenMatrix, scores: &mut ScoreMatrix, n: usize) -> BanSet {
        debug_assert_eq!(tokens.rows(), scores.rows());
        if n == 0 {
            return BanSet::empty(tokens.rows());
        }
        let vocab = scores.vocab();
        scores
            .data
            .par_chunks_mut(vocab.max(1))
            .take(tokens.rows())
            .enumerate()
            .map(|(r, probs)| ban_row_parallel(tokens, r, probs, n))
            .collect::<Vec<_>>()
            .into_iter()
            .collect()
    }
}

/// One task per row; windows fan out to further tasks past the grain.
fn ban_row_parallel(tokens: &TokenMatrix, r: usize, probs: &mut [f32], n: usize) -> BTreeSet<u32> {
    let row = tokens.row(r);
    let mut banned = BTreeSet::new();
    if row.len() + 1 < n {
        return banned;
    }
    let start = row.len() + 1 - n;
    let suffix = &row[start..];
    let hit = |col: usize| (0..n - 1).all(|i| row[col + i] == suffix[i]).then(|| row[col + n - 1]);
    let mut apply = |tok: u32| {
        if (tok as usize) < probs.len() {
            probs[tok as usize] = MASKED;
            banned.insert(tok);
        }
    };
    if start < WINDOW_GRAIN {
        (0..start).filter_map(hit).for_each(&mut apply);
    } else {
        // Every hit writes the same value, so application order is irrelevant.
        let hits: Vec<u32> = (0..start).into_par_iter().with_min_len(WINDOW_GRAIN).filter_map(hit).collect();
        hits.into_iter().for_each(&mut apply);
    }
    banned
}

/// Functional form of the sequential kernel.
pub fn ban_repeated_ngrams_reference(tokens: &TokenMatrix, scores: &ScoreMatrix, n: usize) -> (ScoreMatrix, BanSet) {
    let mut out = scores.clone();
    let bans = ReferenceKernel.ban(tokens, &mut out, n);
    (out, bans)
}

/// Functional form of the data-parallel kernel. Runs on the current rayon
/// pool.
pub fn ban_repeated_ngrams_parallel(tokens: &TokenMatrix, scores: &ScoreMatrix, n: usize) -> (ScoreMatrix, BanSet) {
    let mut out = scores.clone();
    let bans = ParallelKernel.ban(tokens, &mut out, n);
    (out, bans)
}

/// Built-in kernels keyed by CLI name.
pub fn ngram_kernels() -> &'static Registry<dyn NgramBlocker> {
    static REGISTRY: OnceLock<Registry<dyn NgramBlocker>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut reg: Registry<dyn NgramBlocker> = Registry::new("n-gram kernel");
        reg.register("reference", Arc::new(ReferenceKernel))
            .register("parallel", Arc::new(ParallelKernel));
        reg
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flat_scores(rows: usize, vocab: usize) -> ScoreMatrix {
        ScoreMatrix::new(rows, vocab, (0..rows * vocab).map(|i| -(i as f32) * 0.01 - 0.5).collect()).unwrap()
    }

    fn both(tokens: &TokenMatrix, scores: &ScoreMatrix, n: usize) -> (ScoreMatrix, BanSet) {
        let (rs, rb) = ban_repeated_ngrams_reference(tokens, scores, n);
        let (ps, pb) = ban_repeated_ngrams_parallel(tokens, scores, n);
        assert_eq!(rb, pb);
        assert_eq!(rs, ps);
        (rs, rb)
    }

    fn set(ids: &[u32]) -> BTreeSet<u32> {
        ids.iter().copied().collect()
    }

    #[test]
    fn trigram_example() {
        let tokens = TokenMatrix::from_rows(&[vec![1, 2, 3, 1, 2]]);
        let scores = flat_scores(1, 8);
        let (out, bans) = both(&tokens, &scores, 3);
        assert_eq!(bans.row(0), &set(&[3]));
        assert_eq!(out.get(0, 3), MASKED);
    }

    #[test]
    fn repeated_token_bigram() {
        let tokens = TokenMatrix::from_rows(&[vec![7, 7, 7, 7]]);
        let (_, bans) = both(&tokens, &flat_scores(1, 10), 2);
        assert_eq!(bans.row(0), &set(&[7]));
    }

    #[test]
    fn unigram_bans_every_generated_token() {
        let tokens = TokenMatrix::from_rows(&[vec![4, 6, 4, 9]]);
        let (_, bans) = both(&tokens, &flat_scores(1, 10), 1);
        assert_eq!(bans.row(0), &set(&[4, 6, 9]));
    }

    #[test]
    fn no_complete_window() {
        let tokens = TokenMatrix::from_rows(&[vec![1, 2, 1]]);
        // n > L + 1
        let (out, bans) = both(&tokens, &flat_scores(1, 5), 5);
        assert_eq!(bans.total(), 0);
        assert_eq!(out, flat_scores(1, 5));
        // L = n - 1 exactly: zero windows
        let (_, bans) = both(&tokens, &flat_scores(1, 5), 4);
        assert_eq!(bans.total(), 0);
    }

    #[test]
    fn zero_disables_and_frozen_rows_are_skipped() {
        let mut tokens = TokenMatrix::from_rows(&[vec![5, 5, 5], vec![5, 5, 5]]);
        let (_, bans) = both(&tokens, &flat_scores(2, 6), 0);
        assert_eq!(bans.total(), 0);
        tokens.freeze_row(1);
        let (out, bans) = both(&tokens, &flat_scores(2, 6), 2);
        assert_eq!(bans.row(0), &set(&[5]));
        assert!(bans.row(1).is_empty());
        assert_eq!(out.row(1), flat_scores(2, 6).row(1));
    }

    #[test]
    fn kernels_registered_by_name() {
        assert_eq!(ngram_kernels().names(), vec!["reference", "parallel"]);
        assert_eq!(ngram_kernels().get("parallel").unwrap().name(), "parallel");
        assert!(ngram_kernels().get("gpu").is_err());
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let rows: Vec<Vec<u32>> = (0..16)
            .map(|r| (0..300).map(|i| ((i * 7 + r * 3) % 5) as u32).collect())
            .collect();
        let tokens = TokenMatrix::from_rows(&rows);
        let scores = flat_scores(16, 8);
        let expected = ban_repeated_ngrams_reference(&tokens, &scores, 3);
        for threads in [1, 2, 4] {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let got = pool.install(|| ban_repeated_ngrams_parallel(&tokens, &scores, 3));
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn long_rows_split_windows_across_tasks() {
        let len = 3 * WINDOW_GRAIN + 17;
        let rows: Vec<Vec<u32>> = (0..3)
            .map(|r| (0..len).map(|i| ((i * 13 + r) % 11) as u32).collect())
            .collect();
        let tokens = TokenMatrix::from_rows(&rows);
        let scores = flat_scores(3, 12);
        for n in [2, 3, 5] {
            let expected = ban_repeated_ngrams_reference(&tokens, &scores, n);
            assert!(expected.1.total() > 0);
            for threads in [1, 3] {
                let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
                assert_eq!(pool.install(|| ban_repeated_ngrams_parallel(&tokens, &scores, n)), expected);
            }
        }
    }

    fn case() -> impl Strategy<Value = (TokenMatrix, ScoreMatrix, usize)> {
        (1usize..8, 0usize..24, 4usize..12, 0usize..6).prop_flat_map(|(rows, cols, vocab, n)| {
            (
                prop::collection::vec(0u32..vocab as u32, rows * cols),
                prop::collection::vec(0usize..=cols, rows),
                prop::collection::vec(-10.0f32..0.0, rows * vocab),
                Just((rows, cols, vocab, n)),
            )
                .prop_map(|(ids, valid, scores, (rows, cols, vocab, n))| {
                    (
                        TokenMatrix::new(rows, cols, ids, valid).unwrap(),
                        ScoreMatrix::new(rows, vocab, scores).unwrap(),
                        n,
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn kernels_agree((tokens, scores, n) in case()) {
            let (rs, rb) = ban_repeated_ngrams_reference(&tokens, &scores, n);
            let (ps, pb) = ban_repeated_ngrams_parallel(&tokens, &scores, n);
            prop_assert_eq!(rb, pb);
            prop_assert_eq!(rs, ps);
        }

        #[test]
        fn only_banned_entries_change((tokens, scores, n) in case()) {
            let (out, bans) = ban_repeated_ngrams_parallel(&tokens, &scores, n);
            for r in 0..scores.rows() {
                for t in 0..scores.vocab() {
                    let changed = out.get(r, t).to_bits() != scores.get(r, t).to_bits();
                    prop_assert_eq!(changed, bans.row(r).contains(&(t as u32)));
                }
            }
        }

        #[test]
        fn banning_is_idempotent((tokens, scores, n) in case()) {
            let (once, _) = ban_repeated_ngrams_reference(&tokens, &scores, n);
            let (twice, _) = ban_repeated_ngrams_reference(&tokens, &once, n);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn banned_token_never_argmax((tokens, scores, n) in case()) {
            let (out, bans) = ban_repeated_ngrams_parallel(&tokens, &scores, n);
            for r in 0..out.rows() {
                if bans.row(r).len() == out.vocab() {
                    continue;
                }
                let row = out.row(r);
                let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                prop_assert!(!bans.row(r).contains(&(best as u32)));
            }
        }
    }
}

//! Global edge parameter vocabulary and PMI statistics.
//!
//! Edges are identified by ordered word-id pairs `(a, n)`: word `a` sends a
//! message to word `n`. Pairs seen at least `k` times in training get their
//! own trainable weight ("named"); everything else shares one public weight.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::io::Write;

/// Co-occurrence counts of ordered pairs within a sliding window of
/// half-width `window` (the `p` hyperparameter).
#[derive(Debug, Clone)]
pub struct EdgeStats {
    pub counts: HashMap<(u32, u32), u64>,
    pub window: usize,
}

/// Count ordered neighbor pairs `(sender, receiver)` over encoded documents.
/// Every token occurrence at position `i` receives from positions
/// `i-window ..= i+window` clamped to the document, including itself, so the
/// self pair `(w, w)` is always counted at least once per occurrence.
pub fn count_edge_pairs(docs: &[crate::data::Document], window: usize) -> Result<EdgeStats> {
    if window < 1 {
        return Err(Error::Config("window must be >= 1".into()));
    }
    let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
    for doc in docs {
        let n = doc.tokens.len();
        for i in 0..n {
            let lo = i.saturating_sub(window);
            let hi = (i + window).min(n - 1);
            let receiver = doc.tokens[i];
            for j in lo..=hi {
                let sender = doc.tokens[j];
                *counts.entry((sender, receiver)).or_insert(0) += 1;
            }
        }
    }
    Ok(EdgeStats { counts, window })
}

/// Map from ordered word pairs to edge-parameter indices, with a shared
/// public index for rare or unseen pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeVocabulary {
    index: HashMap<(u32, u32), u32>,
    named: Vec<(u32, u32)>,
    pub k: u64,
    pub window: usize,
}

impl EdgeVocabulary {
    /// Named pairs in index order (index `i` holds the pair for parameter `i`).
    pub fn named_pairs(&self) -> &[(u32, u32)] {
        &self.named
    }

    pub fn named_count(&self) -> usize {
        self.named.len()
    }

    /// Index of the shared public edge parameter: one past the named block.
    pub fn public_index(&self) -> u32 {
        self.named.len() as u32
    }

    /// Total number of edge parameters, named plus public.
    pub fn param_count(&self) -> usize {
        self.named.len() + 1
    }

    /// Parameter index for a sender/receiver pair; rare and unseen pairs
    /// resolve to the public index.
    pub fn resolve(&self, sender: u32, receiver: u32) -> u32 {
        self.index
            .get(&(sender, receiver))
            .copied()
            .unwrap_or_else(|| self.public_index())
    }

    /// Rebuild from an ordered pair list, as read back from a checkpoint.
    pub fn from_parts(named: Vec<(u32, u32)>, k: u64, window: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(named.len());
        for (i, &pair) in named.iter().enumerate() {
            if index.insert(pair, i as u32).is_some() {
                return Err(Error::Checkpoint(format!(
                    "duplicate edge pair {pair:?} in edge vocabulary"
                )));
            }
        }
        Ok(Self {
            index,
            named,
            k,
            window,
        })
    }

    /// One named pair per line: `sender_id\treceiver_id\tcount\tindex`,
    /// with the public row last.
    pub fn dump_tsv(&self, stats: &EdgeStats, w: &mut impl Write) -> std::io::Result<()> {
        for (i, pair) in self.named.iter().enumerate() {
            let count = stats.counts.get(pair).copied().unwrap_or(0);
            writeln!(w, "{}\t{}\t{}\t{}", pair.0, pair.1, count, i)?;
        }
        writeln!(w, "public\tpublic\t0\t{}", self.public_index())
    }
}

/// Assign indices to pairs with count >= k. Indices follow sorted pair
/// order so the mapping is independent of hash iteration order.
pub fn build_edge_vocabulary(stats: &EdgeStats, k: u64) -> Result<EdgeVocabulary> {
    if k < 1 {
        return Err(Error::Config("edge frequency threshold k must be >= 1".into()));
    }
    let mut named: Vec<(u32, u32)> = stats
        .counts
        .iter()
        .filter(|&(_, &c)| c >= k)
        .map(|(&pair, _)| pair)
        .collect();
    named.sort_unstable();
    EdgeVocabulary::from_parts(named, k, stats.window)
}

/// Positive PMI values for unordered word pairs, computed over sliding
/// windows of `window` tokens. Keys are stored canonically as `(min, max)`.
#[derive(Debug, Clone)]
pub struct PmiTable {
    values: HashMap<(u32, u32), f64>,
    pub window: usize,
    pub total_windows: u64,
}

impl PmiTable {
    /// PMI for a pair in either order; 0.0 when the pair has no positive PMI.
    pub fn get(&self, a: u32, b: u32) -> f64 {
        let key = (a.min(b), a.max(b));
        self.values.get(&key).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Distinct unordered pairs (i < j) with positive PMI, excluding the
    /// diagonal self-pairs.
    pub fn distinct_positive_pairs(&self) -> usize {
        self.values.keys().filter(|(a, b)| a != b).count()
    }
}

/// Compute positive PMI over encoded documents. Windows of `window` tokens
/// slide one token at a time; documents shorter than the window contribute a
/// single window. `PMI(i,j) = ln(N(i,j) * N / (N(i) * N(j)))` with
/// window-presence counts; only strictly positive values are kept. The
/// diagonal uses `PMI(i,i) = ln(N / N(i))`, which is nonnegative whenever
/// word `i` misses at least one window.
pub fn compute_pmi_table(docs: &[crate::data::Document], window: usize) -> Result<PmiTable> {
    if window < 2 {
        return Err(Error::Config("PMI window must be >= 2".into()));
    }
    let mut word_windows: HashMap<u32, u64> = HashMap::new();
    let mut pair_windows: HashMap<(u32, u32), u64> = HashMap::new();
    let mut total_windows: u64 = 0;
    let mut seen: Vec<u32> = Vec::new();
    for doc in docs {
        let n = doc.tokens.len();
        if n == 0 {
            continue;
        }
        let starts = if n <= window { 0..1 } else { 0..(n - window + 1) };
        for start in starts {
            total_windows += 1;
            let end = (start + window).min(n);
            seen.clear();
            seen.extend_from_slice(&doc.tokens[start..end]);
            seen.sort_unstable();
            seen.dedup();
            for (ai, &a) in seen.iter().enumerate() {
                *word_windows.entry(a).or_insert(0) += 1;
                for &b in &seen[ai..] {
                    // Includes the diagonal (a, a) so self-loops get a value.
                    *pair_windows.entry((a, b)).or_insert(0) += 1;
                }
            }
        }
    }
    let mut values = HashMap::new();
    let total = total_windows as f64;
    for (&(a, b), &n_ab) in &pair_windows {
        let n_a = word_windows[&a] as f64;
        let n_b = word_windows[&b] as f64;
        let pmi = ((n_ab as f64) * total / (n_a * n_b)).ln();
        if pmi > 0.0 {
            values.insert((a, b), pmi);
        }
    }
    Ok(PmiTable {
        values,
        window,
        total_windows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Document;

    fn doc(tokens: &[u32]) -> Document {
        Document {
            label_id: 0,
            tokens: tokens.to_vec(),
        }
    }

    #[test]
    fn two_token_doc_yields_four_ordered_pairs() {
        // "a b" with window 2: every position sees both tokens.
        let stats = count_edge_pairs(&[doc(&[1, 2])], 2).unwrap();
        assert_eq!(stats.counts.len(), 4);
        for pair in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            assert_eq!(stats.counts[&pair], 1, "pair {pair:?}");
        }
    }

    #[test]
    fn repeated_word_accumulates_counts() {
        // "a b a", window 1:
        //   i=0 (a): senders a,b   -> (a,a)+1, (b,a)+1
        //   i=1 (b): senders a,b,a -> (a,b)+2, (b,b)+1
        //   i=2 (a): senders b,a   -> (b,a)+1, (a,a)+1
        let stats = count_edge_pairs(&[doc(&[1, 2, 1])], 1).unwrap();
        assert_eq!(stats.counts[&(1, 2)], 2);
        assert_eq!(stats.counts[&(2, 1)], 2);
        assert_eq!(stats.counts[&(1, 1)], 2);
        assert_eq!(stats.counts[&(2, 2)], 1);
    }

    #[test]
    fn window_clamps_at_document_edges() {
        let stats = count_edge_pairs(&[doc(&[1])], 3).unwrap();
        assert_eq!(stats.counts.len(), 1);
        assert_eq!(stats.counts[&(1, 1)], 1);
    }

    #[test]
    fn pair_count_total_is_conserved() {
        // Sum of counts == sum over positions of neighborhood size.
        let d = doc(&[5, 6, 7, 5, 8]);
        let stats = count_edge_pairs(std::slice::from_ref(&d), 2).unwrap();
        let total: u64 = stats.counts.values().sum();
        let expected: u64 = (0..5)
            .map(|i: usize| {
                let lo = i.saturating_sub(2);
                let hi = (i + 2).min(4);
                (hi - lo + 1) as u64
            })
            .sum();
        assert_eq!(total, expected);
    }

    #[test]
    fn edge_vocabulary_thresholds_and_sorts() {
        let stats = count_edge_pairs(&[doc(&[1, 2, 1])], 1).unwrap();
        // counts: (1,2)=2, (2,1)=2, (1,1)=2, (2,2)=1; k=2 drops (2,2).
        let vocab = build_edge_vocabulary(&stats, 2).unwrap();
        assert_eq!(vocab.named_count(), 3);
        assert_eq!(vocab.named_pairs(), &[(1, 1), (1, 2), (2, 1)]);
        assert_eq!(vocab.param_count(), 4);
        assert_eq!(vocab.resolve(1, 2), 1);
        assert_eq!(vocab.resolve(2, 2), vocab.public_index());
        assert_eq!(vocab.resolve(9, 9), 3);
    }

    #[test]
    fn huge_k_maps_everything_to_public() {
        let stats = count_edge_pairs(&[doc(&[1, 2, 3])], 2).unwrap();
        let vocab = build_edge_vocabulary(&stats, u64::MAX).unwrap();
        assert_eq!(vocab.named_count(), 0);
        assert_eq!(vocab.param_count(), 1);
        assert_eq!(vocab.resolve(1, 2), 0);
    }

    #[test]
    fn pmi_toy_corpus_keeps_only_positive_entries() {
        // Docs ["a b", "a c"] (ids a=1,b=2,c=3), window 2: two windows.
        // N=2, N(a)=2, N(b)=1, N(c)=1, N(a,b)=1, N(a,c)=1, N(b,c)=0.
        // PMI(a,b) = ln(1*2/(2*1)) = 0 -> dropped (strictly positive only).
        // PMI(b,b) = ln(2/1) = ln 2 kept; PMI(a,a) = ln(2*2/4) = 0 dropped.
        let docs = [doc(&[1, 2]), doc(&[1, 3])];
        let table = compute_pmi_table(&docs, 2).unwrap();
        assert_eq!(table.total_windows, 2);
        assert_eq!(table.len(), 2);
        assert!((table.get(2, 2) - 2f64.ln()).abs() < 1e-12);
        assert!((table.get(3, 3) - 2f64.ln()).abs() < 1e-12);
        assert_eq!(table.get(1, 2), 0.0);
        assert_eq!(table.get(1, 1), 0.0);
    }

    #[test]
    fn pmi_lookup_is_symmetric() {
        let docs = [doc(&[1, 2, 3, 1, 2]), doc(&[2, 3])];
        let table = compute_pmi_table(&docs, 2).unwrap();
        for a in 1..=3u32 {
            for b in 1..=3u32 {
                assert_eq!(table.get(a, b), table.get(b, a), "({a},{b})");
            }
        }
    }

    #[test]
    fn short_documents_contribute_one_window() {
        // Window 20 over short docs: each doc is one window.
        let docs = [doc(&[1, 2]), doc(&[3])];
        let table = compute_pmi_table(&docs, 20).unwrap();
        assert_eq!(table.total_windows, 2);
    }

    #[test]
    fn sliding_window_count_matches_length() {
        // len 5, window 2 -> 4 windows.
        let docs = [doc(&[1, 2, 3, 4, 5])];
        let table = compute_pmi_table(&docs, 2).unwrap();
        assert_eq!(table.total_windows, 4);
    }
}

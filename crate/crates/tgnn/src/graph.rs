//! Per-document graph construction.
//!
//! Nodes are token positions (repeated words get one node per occurrence).
//! Each node's in-neighborhood is the positions within `window` of it,
//! itself included; each incoming edge carries the parameter index for the
//! `(sender_word, receiver_word)` pair.

use crate::edges::EdgeVocabulary;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextGraph {
    /// Word id at each node (= token position).
    pub node_words: Vec<u32>,
    /// In-neighbor positions per node, ascending, always containing the
    /// node itself.
    pub neighbors: Vec<Vec<usize>>,
    /// Edge parameter index per (node, neighbor slot), parallel to
    /// `neighbors`.
    pub edge_refs: Vec<Vec<u32>>,
    pub label_id: usize,
    pub window: usize,
}

impl TextGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_words.len()
    }

    /// Total directed edges, self-loops included.
    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(|n| n.len()).sum()
    }
}

/// Build the graph for one encoded document. Errors on empty documents:
/// upstream loading drops them, so one arriving here is a logic error in the
/// caller.
pub fn build_text_graph(
    doc: &crate::data::Document,
    edge_vocab: &EdgeVocabulary,
    window: usize,
) -> Result<TextGraph> {
    if window < 1 {
        return Err(Error::Config("window must be >= 1".into()));
    }
    let n = doc.tokens.len();
    if n == 0 {
        return Err(Error::Data("cannot build a graph for an empty document".into()));
    }
    let mut neighbors = Vec::with_capacity(n);
    let mut edge_refs = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(window);
        let hi = (i + window).min(n - 1);
        let receiver = doc.tokens[i];
        let mut nbrs = Vec::with_capacity(hi - lo + 1);
        let mut refs = Vec::with_capacity(hi - lo + 1);
        for j in lo..=hi {
            nbrs.push(j);
            refs.push(edge_vocab.resolve(doc.tokens[j], receiver));
        }
        neighbors.push(nbrs);
        edge_refs.push(refs);
    }
    Ok(TextGraph {
        node_words: doc.tokens.clone(),
        neighbors,
        edge_refs,
        label_id: doc.label_id,
        window,
    })
}

/// Build graphs for a whole partition, preserving document order.
pub fn build_graphs(
    docs: &[crate::data::Document],
    edge_vocab: &EdgeVocabulary,
    window: usize,
) -> Result<Vec<TextGraph>> {
    docs.iter()
        .map(|d| build_text_graph(d, edge_vocab, window))
        .collect()
}

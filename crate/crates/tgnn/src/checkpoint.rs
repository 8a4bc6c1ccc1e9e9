//! Binary checkpoint: everything needed to reload a trained model and
//! evaluate new text without the training corpus.
//!
//! Layout (all integers little-endian u32, all floats little-endian f32):
//!   magic `TGNN`, version,
//!   header |V|, d, E+1, c,
//!   parameter arrays in field order: embeddings (row-major), edge weights,
//!     gates, dense map (row-major), bias,
//!   |V| length-prefixed UTF-8 word records (id order, id 0 = `<unk>`),
//!   label count + length-prefixed label records (id order),
//!   edge section: window, k, named pair count, then length-prefixed
//!     `sender\treceiver` records in index order (public edge is implicit).
//!
//! Word frequencies are not serialized; a reloaded vocabulary reports 0.

use crate::data::{LabelMap, Vocabulary, UNK_WORD};
use crate::edges::EdgeVocabulary;
use crate::error::{Error, Result};
use crate::model::Params;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"TGNN";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: Params<f32>,
    pub vocab: Vocabulary,
    pub labels: LabelMap,
    pub edge_vocab: EdgeVocabulary,
}

fn as_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::Checkpoint(format!("{what} ({value}) exceeds u32 range")))
}

fn push_record(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    buf.extend_from_slice(&as_u32(s.len(), "record length")?.to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn save(
    path: &Path,
    params: &Params<f32>,
    vocab: &Vocabulary,
    labels: &LabelMap,
    edge_vocab: &EdgeVocabulary,
) -> Result<()> {
    if vocab.len() != params.vocab_size() {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} words but parameters cover {}",
            vocab.len(),
            params.vocab_size()
        )));
    }
    if edge_vocab.param_count() != params.edge_param_count() {
        return Err(Error::Checkpoint(format!(
            "edge vocabulary has {} parameters but model holds {}",
            edge_vocab.param_count(),
            params.edge_param_count()
        )));
    }
    if labels.len() != params.num_classes() {
        return Err(Error::Checkpoint(format!(
            "{} labels but {} classes",
            labels.len(),
            params.num_classes()
        )));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for dim in [
        params.vocab_size(),
        params.dim(),
        params.edge_param_count(),
        params.num_classes(),
    ] {
        buf.extend_from_slice(&as_u32(dim, "header dimension")?.to_le_bytes());
    }
    let arrays: [&[f32]; 5] = [
        params.embeddings.as_slice().expect("row-major"),
        params.edge_weights.as_slice().expect("contiguous"),
        params.gates.as_slice().expect("contiguous"),
        params.dense_w.as_slice().expect("row-major"),
        params.dense_b.as_slice().expect("contiguous"),
    ];
    for arr in arrays {
        for &v in arr {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for word in vocab.words() {
        push_record(&mut buf, word)?;
    }
    buf.extend_from_slice(&as_u32(labels.len(), "label count")?.to_le_bytes());
    for name in labels.names() {
        push_record(&mut buf, name)?;
    }
    buf.extend_from_slice(&as_u32(edge_vocab.window, "edge window")?.to_le_bytes());
    buf.extend_from_slice(
        &u32::try_from(edge_vocab.k)
            .map_err(|_| Error::Checkpoint(format!("edge threshold k ({}) exceeds u32 range", edge_vocab.k)))?
            .to_le_bytes(),
    );
    buf.extend_from_slice(&as_u32(edge_vocab.named_count(), "edge pair count")?.to_le_bytes());
    for &(a, n) in edge_vocab.named_pairs() {
        push_record(&mut buf, &format!("{a}\t{n}"))?;
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let slice = &self.buf[self.pos..end];
                self.pos = end;
                Ok(slice)
            }
            None => Err(Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes for {what} at offset {}",
                self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32_vec(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.take(count * 4, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn record(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not valid UTF-8")))
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let vocab_size = cur.u32("vocab size")? as usize;
    let dim = cur.u32("dimension")? as usize;
    let edge_params = cur.u32("edge parameter count")? as usize;
    let classes = cur.u32("class count")? as usize;
    if vocab_size == 0 || dim == 0 || edge_params == 0 || classes < 2 {
        return Err(Error::Checkpoint(format!(
            "implausible header: |V|={vocab_size} d={dim} edges={edge_params} c={classes}"
        )));
    }

    let embeddings = cur.f32_vec(vocab_size * dim, "embeddings")?;
    let edge_weights = cur.f32_vec(edge_params, "edge weights")?;
    let gates = cur.f32_vec(vocab_size, "gates")?;
    let dense_w = cur.f32_vec(dim * classes, "dense map")?;
    let dense_b = cur.f32_vec(classes, "bias")?;
    let params = Params {
        embeddings: ndarray::Array2::from_shape_vec((vocab_size, dim), embeddings)
            .expect("length checked"),
        edge_weights: ndarray::Array1::from_vec(edge_weights),
        gates: ndarray::Array1::from_vec(gates),
        dense_w: ndarray::Array2::from_shape_vec((dim, classes), dense_w)
            .expect("length checked"),
        dense_b: ndarray::Array1::from_vec(dense_b),
    };

    let mut words = Vec::with_capacity(vocab_size);
    for i in 0..vocab_size {
        words.push(cur.record(&format!("vocabulary word {i}"))?);
    }
    if words[0] != UNK_WORD {
        return Err(Error::Checkpoint(format!(
            "first vocabulary record is {:?}, expected {UNK_WORD}",
            words[0]
        )));
    }
    let vocab = Vocabulary::from_words(words)
        .map_err(|e| Error::Checkpoint(format!("invalid vocabulary section: {e}")))?;

    let label_count = cur.u32("label count")? as usize;
    if label_count != classes {
        return Err(Error::Checkpoint(format!(
            "label section has {label_count} entries but header declares {classes} classes"
        )));
    }
    let mut names = Vec::with_capacity(label_count);
    for i in 0..label_count {
        names.push(cur.record(&format!("label {i}"))?);
    }
    let labels = LabelMap::from_names(names);

    let window = cur.u32("edge window")? as usize;
    let k = cur.u32("edge threshold")? as u64;
    let named_count = cur.u32("edge pair count")? as usize;
    if named_count + 1 != edge_params {
        return Err(Error::Checkpoint(format!(
            "edge section declares {named_count} named pairs but header has {edge_params} parameters"
        )));
    }
    let mut named = Vec::with_capacity(named_count);
    for i in 0..named_count {
        let rec = cur.record(&format!("edge pair {i}"))?;
        let parsed = rec.split_once('\t').and_then(|(a, n)| {
            Some((a.parse::<u32>().ok()?, n.parse::<u32>().ok()?))
        });
        match parsed {
            Some(pair) => named.push(pair),
            None => {
                return Err(Error::Checkpoint(format!(
                    "edge pair record {i} is malformed: {rec:?}"
                )))
            }
        }
    }
    let edge_vocab = EdgeVocabulary::from_parts(named, k, window)?;

    if cur.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the edge section",
            buf.len() - cur.pos
        )));
    }
    params.validate().map_err(|e| {
        Error::Checkpoint(format!("checkpoint parameters fail validation: {e}"))
    })?;
    Ok(Checkpoint {
        params,
        vocab,
        labels,
        edge_vocab,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocabulary, RawDocument};
    use crate::edges::{build_edge_vocabulary, count_edge_pairs};
    use crate::model::initialize_params;

    fn fixture() -> (Params<f32>, Vocabulary, LabelMap, EdgeVocabulary) {
        let docs = vec![
            RawDocument {
                label_id: 0,
                tokens: vec!["red".into(), "fish".into(), "red".into()],
            },
            RawDocument {
                label_id: 1,
                tokens: vec!["blue".into(), "fish".into()],
            },
        ];
        let vocab = build_vocabulary(&docs, 1).unwrap();
        let encoded: Vec<_> = docs.iter().map(|d| vocab.encode_doc(d)).collect();
        let stats = count_edge_pairs(&encoded, 2).unwrap();
        let ev = build_edge_vocabulary(&stats, 2).unwrap();
        let params =
            initialize_params::<f32>(vocab.len(), 4, ev.param_count(), 2, None, 17).unwrap();
        let labels = LabelMap::from_names(vec!["colors".into(), "animals".into()]);
        (params, vocab, labels, ev)
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let (params, vocab, labels, ev) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tgnn");
        save(&path, &params, &vocab, &labels, &ev).unwrap();
        let ck = load(&path).unwrap();
        assert_eq!(ck.params, params);
        assert_eq!(ck.vocab.words(), vocab.words());
        assert_eq!(ck.labels.names(), labels.names());
        assert_eq!(ck.edge_vocab, ev);
        assert_eq!(ck.edge_vocab.k, 2);
        assert_eq!(ck.edge_vocab.window, 2);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let (params, vocab, labels, ev) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.tgnn");
        let p2 = dir.path().join("b.tgnn");
        save(&p1, &params, &vocab, &labels, &ev).unwrap();
        save(&p2, &params, &vocab, &labels, &ev).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.tgnn");
        std::fs::write(&path, b"NOPE").unwrap();
        let err = load(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err:?}");
    }

    #[test]
    fn truncation_is_detected() {
        let (params, vocab, labels, ev) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tgnn");
        save(&path, &params, &vocab, &labels, &ev).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.tgnn");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        let err = load(&cut).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err:?}");
    }

    #[test]
    fn trailing_garbage_is_detected() {
        let (params, vocab, labels, ev) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tgnn");
        save(&path, &params, &vocab, &labels, &ev).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn size_mismatches_are_rejected_at_save_time() {
        let (params, vocab, labels, _) = fixture();
        let tiny = EdgeVocabulary::from_parts(vec![], 2, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tgnn");
        let err = save(&path, &params, &vocab, &labels, &tiny).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err:?}");
    }
}

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::chunk::chunk_document;
use super::embed::{cosine, embed_text, Embedder};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ESIKB001";

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeChunk {
    /// Equal to the insertion index.
    pub chunk_id: usize,
    pub source: String,
    pub text: String,
    pub embedding: Vec<f32>,
}

/// Immutable once built; share it freely between readers.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeBase {
    dim: usize,
    chunks: Vec<KnowledgeChunk>,
}

impl KnowledgeBase {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            chunks: Vec::new(),
        }
    }

    /// Chunks and embeds each `(source, text)` document.
    pub fn build<'a>(
        docs: impl IntoIterator<Item = (&'a str, &'a str)>,
        embedder: &dyn Embedder,
        chunk_chars: usize,
        overlap_chars: usize,
    ) -> Result<Self> {
        let mut kb = Self::empty(embedder.dim());
        for (source, text) in docs {
            for piece in chunk_document(text, chunk_chars, overlap_chars) {
                if piece.trim().is_empty() {
                    continue;
                }
                kb.push(source, &piece, embedder)?;
            }
        }
        Ok(kb)
    }

    pub fn push(&mut self, source: &str, text: &str, embedder: &dyn Embedder) -> Result<usize> {
        if embedder.dim() != self.dim {
            return Err(Error::Shape(format!(
                "embedder dimension {} does not match knowledge base dimension {}",
                embedder.dim(),
                self.dim
            )));
        }
        let embedding = embed_text(text, embedder)?;
        let chunk_id = self.chunks.len();
        self.chunks.push(KnowledgeChunk {
            chunk_id,
            source: source.to_string(),
            text: text.to_string(),
            embedding,
        });
        Ok(chunk_id)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunks(&self) -> &[KnowledgeChunk] {
        &self.chunks
    }

    pub fn get(&self, id: usize) -> Option<&KnowledgeChunk> {
        self.chunks.get(id)
    }

    /// Top `min(k, len)` chunks by cosine similarity to an already embedded
    /// query, descending, ties broken by ascending id.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<(&KnowledgeChunk, f64)>> {
        if self.chunks.is_empty() {
            return Err(Error::EmptyKnowledgeBase);
        }
        if query.len() != self.dim {
            return Err(Error::Shape(format!("query has dimension {}, expected {}", query.len(), self.dim)));
        }
        let mut scored: Vec<(&KnowledgeChunk, f64)> =
            self.chunks.iter().map(|c| (c, cosine(query, &c.embedding))).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.chunk_id.cmp(&b.0.chunk_id)));
        scored.truncate(k);
        Ok(scored)
    }

    /// Header `(d_kb, count)` as little-endian u32 after an 8-byte magic, then
    /// per chunk: source and text as length-prefixed UTF-8, then `d_kb` f32.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.chunks.len() as u32).to_le_bytes());
        for c in &self.chunks {
            for s in [&c.source, &c.text] {
                buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
                buf.extend_from_slice(s.as_bytes());
            }
            for v in &c.embedding {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |m: &str| Error::Corrupt {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(8).ok_or_else(|| corrupt("truncated header"))? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let dim = r.u32().ok_or_else(|| corrupt("truncated header"))? as usize;
        let count = r.u32().ok_or_else(|| corrupt("truncated header"))? as usize;
        let mut chunks = Vec::with_capacity(count);
        for chunk_id in 0..count {
            let source = r.string().ok_or_else(|| corrupt("truncated chunk"))?;
            let text = r.string().ok_or_else(|| corrupt("truncated chunk"))?;
            let raw = r.take(dim * 4).ok_or_else(|| corrupt("truncated embedding"))?;
            let embedding = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            chunks.push(KnowledgeChunk {
                chunk_id,
                source,
                text,
                embedding,
            });
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { dim, chunks })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}

/// Embeds `query` and searches `kb`.
pub fn retrieve<'kb>(
    query: &str,
    k: usize,
    kb: &'kb KnowledgeBase,
    embedder: &dyn Embedder,
) -> Result<Vec<(&'kb KnowledgeChunk, f64)>> {
    if kb.is_empty() {
        return Err(Error::EmptyKnowledgeBase);
    }
    let q = embed_text(query, embedder)?;
    kb.search(&q, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cqa::{seed_documents, HashEmbedder};

    fn seeded() -> (KnowledgeBase, HashEmbedder) {
        let e = HashEmbedder::default();
        let kb = KnowledgeBase::build(seed_documents(), &e, 800, 100).unwrap();
        (kb, e)
    }

    #[test]
    fn self_query_ranks_first_with_unit_similarity() {
        let (kb, e) = seeded();
        let target = &kb.chunks()[3];
        let hits = retrieve(&target.text, 3, &kb, &e).unwrap();
        assert_eq!(hits[0].0.chunk_id, 3);
        assert!((hits[0].1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn oversized_k_returns_everything_sorted() {
        let (kb, e) = seeded();
        let hits = retrieve("heart rate", kb.len() + 10, &kb, &e).unwrap();
        assert_eq!(hits.len(), kb.len());
        assert!(hits.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn rbbb_query_finds_rsr_chunk() {
        let (kb, e) = seeded();
        let hits = retrieve("right bundle branch block", 3, &kb, &e).unwrap();
        assert!(hits.iter().any(|(c, _)| c.text.contains("RSR'")));
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let e = HashEmbedder::default();
        let mut kb = KnowledgeBase::empty(e.dim());
        kb.push("a", "same words here", &e).unwrap();
        kb.push("b", "something else entirely", &e).unwrap();
        kb.push("c", "same words here", &e).unwrap();
        let hits = retrieve("same words here", 2, &kb, &e).unwrap();
        assert_eq!(hits.iter().map(|h| h.0.chunk_id).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn empty_kb_is_an_error() {
        let e = HashEmbedder::default();
        let kb = KnowledgeBase::empty(e.dim());
        assert!(matches!(retrieve("x", 1, &kb, &e), Err(Error::EmptyKnowledgeBase)));
    }

    #[test]
    fn file_round_trip() {
        let (kb, _) = seeded();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.bin");
        kb.save(&path).unwrap();
        assert_eq!(KnowledgeBase::load(&path).unwrap(), kb);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(KnowledgeBase::load(&path).is_err());
    }

    #[test]
    fn chunk_ids_follow_insertion_and_embeddings_are_unit() {
        let (kb, _) = seeded();
        for (i, c) in kb.chunks().iter().enumerate() {
            assert_eq!(c.chunk_id, i);
            let n: f64 = c.embedding.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }
}

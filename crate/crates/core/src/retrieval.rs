//! BM25 inverted index over a document corpus.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenize::{terms, truncate_to_tokens};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

/// Text injected when a search matches nothing.
pub const NO_RESULTS: &str = "No results found.";

const INDEX_FORMAT: &str = "refine-loop-bm25";
const INDEX_VERSION: u32 = 1;

/// A corpus record. Serialized as `{id, title, text}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    #[serde(rename = "text")]
    pub body: String,
}

impl Document {
    pub fn new(id: impl Into<String>, title: impl Into<String>, body: impl Into<String>) -> Self {
        Document {
            id: id.into(),
            title: title.into(),
            body: body.into(),
        }
    }

    /// The text that is indexed: title followed by body.
    pub fn indexed_text(&self) -> String {
        format!("{} {}", self.title, self.body)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub top_k: usize,
    pub doc_token_budget: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            top_k: 3,
            doc_token_budget: 512,
        }
    }
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("duplicate document id `{0}`")]
    DuplicateDocId(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("document `{0}` has an empty body")]
    EmptyBody(String),
    #[error("invalid BM25 parameters k1={k1}, b={b}")]
    InvalidParameters { k1: f64, b: f64 },
    #[error("query has no searchable terms")]
    EmptyQuery,
    #[error("top_k={top_k} outside 1..={doc_count}")]
    InvalidTopK { top_k: usize, doc_count: usize },
    #[error("doc_token_budget must be positive")]
    InvalidBudget,
    #[error("index file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    /// Position of the document in the id-sorted document table.
    pub doc: u32,
    pub tf: u32,
}

/// Immutable BM25 index. Documents are stored sorted by id so that postings
/// lists, sorted by document position, are also sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    docs: Vec<Document>,
    doc_lengths: Vec<u32>,
    postings: BTreeMap<String, Vec<Posting>>,
    avg_doc_length: f64,
    k1: f64,
    b: f64,
}

/// A ranked hit.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored<'a> {
    pub doc: &'a Document,
    pub score: f64,
}

/// `ln((N - df + 0.5) / (df + 0.5) + 1)`
pub fn bm25_idf(doc_count: usize, df: usize) -> f64 {
    let n = doc_count as f64;
    let df = df as f64;
    ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
}

/// Term-frequency saturation with document length normalization.
pub fn bm25_tf(tf: f64, doc_len: f64, avg_doc_length: f64, k1: f64, b: f64) -> f64 {
    tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * doc_len / avg_doc_length))
}

/// Unique query terms in first-occurrence order.
pub fn query_terms(q: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    terms(q).into_iter().filter(|t| seen.insert(t.clone())).collect()
}

impl RetrievalIndex {
    pub fn build(corpus: impl IntoIterator<Item = Document>, k1: f64, b: f64) -> Result<Self, RetrievalError> {
        if !(k1 > 0.0 && k1.is_finite() && (0.0..=1.0).contains(&b)) {
            return Err(RetrievalError::InvalidParameters { k1, b });
        }
        let mut docs: Vec<Document> = corpus.into_iter().collect();
        if docs.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        docs.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in docs.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(RetrievalError::DuplicateDocId(pair[0].id.clone()));
            }
        }
        if let Some(d) = docs.iter().find(|d| d.body.trim().is_empty()) {
            return Err(RetrievalError::EmptyBody(d.id.clone()));
        }

        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(docs.len());
        for (pos, doc) in docs.iter().enumerate() {
            let toks = terms(&doc.indexed_text());
            doc_lengths.push(toks.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in toks {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    doc: pos as u32,
                    tf: count,
                });
            }
        }
        let avg_doc_length = doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / doc_lengths.len() as f64;
        Ok(RetrievalIndex {
            docs,
            doc_lengths,
            postings,
            avg_doc_length,
            k1,
            b,
        })
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, pos: usize) -> u32 {
        self.doc_lengths[pos]
    }

    pub fn params(&self) -> (f64, f64) {
        (self.k1, self.b)
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    /// All documents matching at least one query term, ranked by score
    /// descending with ties broken by id ascending.
    pub fn score_all(&self, q: &str) -> Result<Vec<Scored<'_>>, RetrievalError> {
        let qterms = query_terms(q);
        if qterms.is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        let mut scores: BTreeMap<u32, f64> = BTreeMap::new();
        let n = self.docs.len();
        for term in &qterms {
            let plist = self.postings(term);
            if plist.is_empty() {
                continue;
            }
            let idf = bm25_idf(n, plist.len());
            for p in plist {
                let dl = self.doc_lengths[p.doc as usize] as f64;
                *scores.entry(p.doc).or_insert(0.0) +=
                    idf * bm25_tf(p.tf as f64, dl, self.avg_doc_length, self.k1, self.b);
            }
        }
        let mut hits: Vec<Scored<'_>> = scores
            .into_iter()
            .map(|(pos, score)| Scored {
                doc: &self.docs[pos as usize],
                score,
            })
            .collect();
        // Positions follow id order, so a stable sort on score keeps id ties ascending.
        hits.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(hits)
    }

    pub fn query(&self, q: &str, cfg: &RetrievalConfig) -> Result<Vec<Document>, RetrievalError> {
        self.check_config(cfg)?;
        let mut hits = self.score_all(q)?;
        hits.truncate(cfg.top_k);
        Ok(hits.into_iter().map(|h| h.doc.clone()).collect())
    }

    pub fn check_config(&self, cfg: &RetrievalConfig) -> Result<(), RetrievalError> {
        if cfg.top_k == 0 || cfg.top_k > self.docs.len() {
            return Err(RetrievalError::InvalidTopK {
                top_k: cfg.top_k,
                doc_count: self.docs.len(),
            });
        }
        if cfg.doc_token_budget == 0 {
            return Err(RetrievalError::InvalidBudget);
        }
        Ok(())
    }

    /// Writes the index as JSONL: a versioned header line, one line per
    /// document, then one line per term with its postings.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), RetrievalError> {
        let header = IndexHeader {
            format: INDEX_FORMAT.to_string(),
            version: INDEX_VERSION,
            k1: self.k1,
            b: self.b,
            doc_count: self.docs.len(),
            term_count: self.postings.len(),
            avg_doc_length: self.avg_doc_length,
        };
        writeln!(w, "{}", to_json(&header)?)?;
        for (doc, &length) in self.docs.iter().zip(&self.doc_lengths) {
            writeln!(
                w,
                "{}",
                to_json(&DocLine {
                    doc: doc.clone(),
                    length
                })?
            )?;
        }
        for (term, plist) in &self.postings {
            let line = TermLine {
                term: term.clone(),
                postings: plist.iter().map(|p| (p.doc, p.tf)).collect(),
            };
            writeln!(w, "{}", to_json(&line)?)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, RetrievalError> {
        let mut lines = r.lines();
        let header: IndexHeader = match lines.next() {
            Some(line) => from_json(&line?)?,
            None => return Err(RetrievalError::Format("missing header".into())),
        };
        if header.format != INDEX_FORMAT || header.version != INDEX_VERSION {
            return Err(RetrievalError::Format(format!(
                "unsupported index {} v{}",
                header.format, header.version
            )));
        }
        let mut docs = Vec::with_capacity(header.doc_count);
        let mut doc_lengths = Vec::with_capacity(header.doc_count);
        for _ in 0..header.doc_count {
            let line = lines
                .next()
                .ok_or_else(|| RetrievalError::Format("truncated document table".into()))??;
            let d: DocLine = from_json(&line)?;
            docs.push(d.doc);
            doc_lengths.push(d.length);
        }
        let mut postings = BTreeMap::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: TermLine = from_json(&line)?;
            if t.postings.iter().any(|&(doc, _)| doc as usize >= docs.len()) {
                return Err(RetrievalError::Format(format!("posting out of range for `{}`", t.term)));
            }
            postings.insert(
                t.term,
                t.postings.into_iter().map(|(doc, tf)| Posting { doc, tf }).collect(),
            );
        }
        if postings.len() != header.term_count {
            return Err(RetrievalError::Format("term count mismatch".into()));
        }
        Ok(RetrievalIndex {
            docs,
            doc_lengths,
            postings,
            avg_doc_length: header.avg_doc_length,
            k1: header.k1,
            b: header.b,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    format: String,
    version: u32,
    k1: f64,
    b: f64,
    doc_count: usize,
    term_count: usize,
    avg_doc_length: f64,
}

#[derive(Serialize, Deserialize)]
struct DocLine {
    doc: Document,
    length: u32,
}

#[derive(Serialize, Deserialize)]
struct TermLine {
    term: String,
    postings: Vec<(u32, u32)>,
}

fn to_json<T: Serialize>(v: &T) -> Result<String, RetrievalError> {
    serde_json::to_string(v).map_err(|e| RetrievalError::Format(e.to_string()))
}

fn from_json<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T, RetrievalError> {
    serde_json::from_str(s).map_err(|e| RetrievalError::Format(e.to_string()))
}

/// Renders retrieved documents as `[Doc i: <title>] <body>` lines, truncated
/// to the block token budget.
pub fn render_documents_block(docs: &[Document], cfg: &RetrievalConfig) -> String {
    if docs.is_empty() {
        return NO_RESULTS.to_string();
    }
    let full = docs
        .iter()
        .enumerate()
        .map(|(i, d)| format!("[Doc {}: {}] {}", i + 1, d.title, d.body))
        .collect::<Vec<_>>()
        .join("\n");
    truncate_to_tokens(&full, cfg.doc_token_budget).to_string()
}

/// Reads a `{id, title, text}` JSONL corpus.
pub fn read_corpus<R: BufRead>(r: R) -> Result<Vec<Document>, RetrievalError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(from_json(&line)?);
    }
    Ok(out)
}

//! Dependency-parsed corpora: reading, validation, and the vocabulary.
//!
//! File format: one word per line as `index token parent_index`, indices
//! 1-based and contiguous within a document, `parent_index 0` for the root.
//! Documents are separated by a blank line and `#` starts a comment line.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt::{self, Write as _};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("document {doc}: {}", violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid { doc: usize, violations: Vec<TreeViolation> },
    #[error("corpus contains no documents")]
    Empty,
    #[error("document {doc}: word id {id} outside vocabulary of size {vocab}")]
    WordOutOfRange { doc: usize, id: usize, vocab: usize },
}

/// A broken tree invariant together with the offending word index (0-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeViolation {
    NoRoot,
    MultipleRoots { roots: Vec<usize> },
    SelfParent { index: usize },
    ParentOutOfRange { index: usize, parent: usize },
    CycleDetected { index: usize },
    LengthMismatch { words: usize, parents: usize },
}

impl fmt::Display for TreeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeViolation::NoRoot => write!(f, "no root"),
            TreeViolation::MultipleRoots { roots } => write!(f, "multiple roots at {roots:?}"),
            TreeViolation::SelfParent { index } => write!(f, "self-parent at word {index}"),
            TreeViolation::ParentOutOfRange { index, parent } => {
                write!(f, "parent {parent} of word {index} out of range")
            }
            TreeViolation::CycleDetected { index } => {
                write!(f, "cycle detected through word {index}")
            }
            TreeViolation::LengthMismatch { words, parents } => {
                write!(f, "{words} words but {parents} parent entries")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vocabulary from tokens in the given id order. Duplicate tokens
    /// are rejected.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, String>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::new();
        for t in tokens {
            let t = t.into();
            if vocab.get(&t).is_some() {
                return Err(format!("duplicate token {t:?}"));
            }
            vocab.intern(&t);
        }
        Ok(vocab)
    }

    /// Returns the id for `token`, assigning the next free id if unseen.
    pub fn intern(&mut self, token: &str) -> usize {
        if let Some(&id) = self.token_to_id.get(token) {
            return id;
        }
        let id = self.id_to_token.len();
        self.id_to_token.push(token.to_owned());
        self.token_to_id.insert(token.to_owned(), id);
        id
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }
}

/// One parsed sentence: word ids plus a rooted dependency tree over them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepDocument {
    words: Vec<usize>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    root: Option<usize>,
    order: Vec<usize>,
}

impl DepDocument {
    /// Builds a document, rejecting anything that is not a single rooted tree.
    /// `None` marks the root.
    pub fn new(words: Vec<usize>, parent: Vec<Option<usize>>) -> Result<Self, Vec<TreeViolation>> {
        validate_tree(&words, &parent)?;
        let n = words.len();
        let mut children = vec![Vec::new(); n];
        let mut root = None;
        for (i, p) in parent.iter().enumerate() {
            match p {
                Some(p) => children[*p].push(i),
                None => root = Some(i),
            }
        }
        let order = topological_order(&children, root, n);
        Ok(Self {
            words,
            parent,
            children,
            root,
            order,
        })
    }

    pub fn empty() -> Self {
        Self {
            words: Vec::new(),
            parent: Vec::new(),
            children: Vec::new(),
            root: None,
            order: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[usize] {
        &self.words
    }

    pub fn word(&self, n: usize) -> usize {
        self.words[n]
    }

    pub fn parent(&self, n: usize) -> Option<usize> {
        self.parent[n]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parent
    }

    pub fn children(&self, n: usize) -> &[usize] {
        &self.children[n]
    }

    pub fn root(&self) -> Option<usize> {
        self.root
    }

    /// Parents before children; among available words the lowest index first.
    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    /// Iterator over `(child, parent)` pairs for every non-root word.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.parent.iter().enumerate().filter_map(|(n, p)| p.map(|p| (n, p)))
    }

    /// Same tree with word ids replaced through `map`.
    pub fn remap_words(&self, map: impl Fn(usize) -> usize) -> Self {
        let mut doc = self.clone();
        for w in doc.words.iter_mut() {
            *w = map(*w);
        }
        doc
    }
}

fn topological_order(children: &[Vec<usize>], root: Option<usize>, n: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(n);
    let mut ready = BinaryHeap::new();
    if let Some(r) = root {
        ready.push(Reverse(r));
    }
    while let Some(Reverse(i)) = ready.pop() {
        order.push(i);
        for &c in &children[i] {
            ready.push(Reverse(c));
        }
    }
    order
}

/// Checks the single-rooted-tree invariants. Returns every violation found.
pub fn validate_tree(words: &[usize], parent: &[Option<usize>]) -> Result<(), Vec<TreeViolation>> {
    let n = parent.len();
    let mut violations = Vec::new();
    if words.len() != n {
        violations.push(TreeViolation::LengthMismatch {
            words: words.len(),
            parents: n,
        });
        return Err(violations);
    }
    if n == 0 {
        return Ok(());
    }
    let roots: Vec<usize> = (0..n).filter(|&i| parent[i].is_none()).collect();
    match roots.len() {
        0 => violations.push(TreeViolation::NoRoot),
        1 => {}
        _ => violations.push(TreeViolation::MultipleRoots { roots }),
    }
    let mut structural = false;
    for (i, p) in parent.iter().enumerate() {
        if let Some(p) = *p {
            if p == i {
                violations.push(TreeViolation::SelfParent { index: i });
                structural = true;
            } else if p >= n {
                violations.push(TreeViolation::ParentOutOfRange { index: i, parent: p });
                structural = true;
            }
        }
    }
    if !structural {
        // walk up from each word; colors: 0 unvisited, 1 on current path, 2 done
        let mut color = vec![0u8; n];
        for start in 0..n {
            if color[start] != 0 {
                continue;
            }
            let mut path = Vec::new();
            let mut cur = Some(start);
            while let Some(i) = cur {
                match color[i] {
                    0 => {
                        color[i] = 1;
                        path.push(i);
                        cur = parent[i];
                    }
                    1 => {
                        violations.push(TreeViolation::CycleDetected { index: i });
                        break;
                    }
                    _ => break,
                }
            }
            for i in path {
                color[i] = 2;
            }
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    documents: Vec<DepDocument>,
    vocabulary: Vocabulary,
}

impl Corpus {
    pub fn new(documents: Vec<DepDocument>, vocabulary: Vocabulary) -> Result<Self, CorpusError> {
        if documents.is_empty() {
            return Err(CorpusError::Empty);
        }
        let v = vocabulary.len();
        for (d, doc) in documents.iter().enumerate() {
            if let Some(&id) = doc.words().iter().find(|&&w| w >= v) {
                return Err(CorpusError::WordOutOfRange { doc: d, id, vocab: v });
            }
        }
        Ok(Self { documents, vocabulary })
    }

    pub fn documents(&self) -> &[DepDocument] {
        &self.documents
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.documents.iter().map(DepDocument::len).sum()
    }

    /// Splits off the documents from `at` onwards into a second corpus that
    /// shares this vocabulary.
    pub fn split_at(&self, at: usize) -> Result<(Corpus, Corpus), CorpusError> {
        let (a, b) = self.documents.split_at(at.min(self.documents.len()));
        Ok((
            Corpus::new(a.to_vec(), self.vocabulary.clone())?,
            Corpus::new(b.to_vec(), self.vocabulary.clone())?,
        ))
    }
}

/// A document as read from text, before token ids are assigned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub tokens: Vec<String>,
    pub parent: Vec<Option<usize>>,
    /// 1-based line number of the document's first word
    pub first_line: usize,
}

/// Splits corpus text into raw documents without touching any vocabulary.
pub fn parse_raw_documents(text: &str) -> Result<Vec<RawDocument>, CorpusError> {
    let mut docs = Vec::new();
    let mut current: Option<RawDocument> = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.starts_with('#') {
            continue;
        }
        if trimmed.is_empty() {
            if let Some(doc) = current.take() {
                docs.push(doc);
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(CorpusError::Parse {
                line: lineno,
                message: format!("expected 3 fields `index token parent_index`, found {}", fields.len()),
            });
        }
        let index: usize = fields[0].parse().map_err(|_| CorpusError::Parse {
            line: lineno,
            message: format!("bad word index {:?}", fields[0]),
        })?;
        let parent: usize = fields[2].parse().map_err(|_| CorpusError::Parse {
            line: lineno,
            message: format!("bad parent index {:?}", fields[2]),
        })?;
        let doc = current.get_or_insert_with(|| RawDocument {
            tokens: Vec::new(),
            parent: Vec::new(),
            first_line: lineno,
        });
        let expected = doc.tokens.len() + 1;
        if index != expected {
            return Err(CorpusError::Parse {
                line: lineno,
                message: format!("word index {index} is not contiguous, expected {expected}"),
            });
        }
        doc.tokens.push(fields[1].to_owned());
        doc.parent.push(if parent == 0 { None } else { Some(parent - 1) });
    }
    if let Some(doc) = current.take() {
        docs.push(doc);
    }
    Ok(docs)
}

/// Parses and validates a corpus, building the vocabulary in order of first
/// appearance.
pub fn parse_corpus(text: &str) -> Result<Corpus, CorpusError> {
    let raw = parse_raw_documents(text)?;
    let mut vocab = Vocabulary::new();
    let mut docs = Vec::with_capacity(raw.len());
    for (d, r) in raw.into_iter().enumerate() {
        let words = r.tokens.iter().map(|t| vocab.intern(t)).collect();
        let doc =
            DepDocument::new(words, r.parent).map_err(|violations| CorpusError::Invalid { doc: d, violations })?;
        docs.push(doc);
    }
    Corpus::new(docs, vocab)
}

/// Writes a corpus in the text format read by [`parse_corpus`].
pub fn serialize_corpus(corpus: &Corpus) -> String {
    let mut out = String::new();
    for (d, doc) in corpus.documents().iter().enumerate() {
        if d > 0 {
            out.push('\n');
        }
        for n in 0..doc.len() {
            let token = corpus
                .vocabulary()
                .token(doc.word(n))
                .expect("word ids validated against vocabulary");
            let parent = doc.parent(n).map_or(0, |p| p + 1);
            writeln!(out, "{} {} {}", n + 1, token, parent).expect("write to String");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_single_document() {
        let c = parse_corpus("1 the 2\n2 dog 0\n3 barked 2\n").unwrap();
        assert_eq!(c.len(), 1);
        let d = &c.documents()[0];
        assert_eq!(d.len(), 3);
        assert_eq!(d.parents(), &[Some(1), None, Some(1)]);
        assert_eq!(c.vocab_size(), 3);
        assert_eq!(d.root(), Some(1));
        assert_eq!(d.topological_order(), &[1, 0, 2]);
    }

    #[test]
    fn shared_vocabulary_across_documents() {
        let text = "# header\n1 a 0\n2 b 1\n\n1 b 0\n2 c 1\n";
        let c = parse_corpus(text).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.vocab_size(), 3);
        assert_eq!(c.documents()[1].words(), &[1, 2]);
    }

    #[test]
    fn two_cycle_is_rejected() {
        let err = parse_corpus("1 a 0\n2 b 3\n3 c 2\n").unwrap_err();
        match &err {
            CorpusError::Invalid { doc: 0, violations } => {
                assert!(violations
                    .iter()
                    .any(|v| matches!(v, TreeViolation::CycleDetected { .. })));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("cycle detected"));
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let err = parse_corpus("1 a 0\n2 b\n").unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 2, .. }));
        let err = parse_corpus("1 a 0\n3 b 1\n").unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 2, .. }));
        let err = parse_corpus("1 a x\n").unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 1, .. }));
        assert_eq!(parse_corpus("# nothing\n").unwrap_err(), CorpusError::Empty);
    }

    #[test]
    fn tree_validation_cases() {
        assert!(validate_tree(&[0, 0, 0], &[None, Some(0), Some(1)]).is_ok());
        let v = validate_tree(&[0, 0], &[None, None]).unwrap_err();
        assert!(matches!(v[0], TreeViolation::MultipleRoots { .. }));
        assert!(v[0].to_string().contains("multiple roots"));
        let v = validate_tree(&[0; 4], &[None, Some(0), Some(0), Some(3)]).unwrap_err();
        assert_eq!(v, vec![TreeViolation::SelfParent { index: 3 }]);
        assert!(v[0].to_string().contains("self-parent"));
        let v = validate_tree(&[0; 2], &[Some(1), Some(0)]).unwrap_err();
        assert!(v.contains(&TreeViolation::NoRoot));
        let v = validate_tree(&[0; 2], &[None, Some(5)]).unwrap_err();
        assert!(matches!(v[0], TreeViolation::ParentOutOfRange { index: 1, parent: 5 }));
        assert!(validate_tree(&[], &[]).is_ok());
    }

    #[test]
    fn topological_order_breaks_ties_by_index() {
        // root 2 with children 4, 0; 0 has child 1 and 3
        let d = DepDocument::new(vec![0; 5], vec![Some(2), Some(0), None, Some(0), Some(2)]).unwrap();
        assert_eq!(d.topological_order(), &[2, 0, 1, 3, 4]);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn arb_corpus() -> impl Strategy<Value = Corpus> {
            let doc = prop::collection::vec((0usize..6, any::<prop::sample::Index>()), 0..9);
            prop::collection::vec(doc, 1..5).prop_map(|docs| {
                let mut vocab = Vocabulary::new();
                let mut out = Vec::new();
                for d in docs {
                    let words: Vec<usize> = d.iter().map(|(w, _)| vocab.intern(&format!("t{w}"))).collect();
                    let parent: Vec<Option<usize>> = d
                        .iter()
                        .enumerate()
                        .map(|(n, (_, ix))| if n == 0 { None } else { Some(ix.index(n)) })
                        .collect();
                    out.push(DepDocument::new(words, parent).unwrap());
                }
                Corpus::new(out, vocab).unwrap()
            })
        }

        proptest! {
            #[test]
            fn round_trip(c in arb_corpus()) {
                // empty documents have no lines and vanish in text form
                let nonempty: Vec<DepDocument> =
                    c.documents().iter().filter(|d| !d.is_empty()).cloned().collect();
                prop_assume!(!nonempty.is_empty());
                let c = Corpus::new(nonempty, c.vocabulary().clone()).unwrap();
                let back = parse_corpus(&serialize_corpus(&c)).unwrap();
                prop_assert_eq!(back, c);
            }

            #[test]
            fn children_count(c in arb_corpus()) {
                for d in c.documents() {
                    let total: usize = (0..d.len()).map(|n| d.children(n).len()).sum();
                    prop_assert_eq!(total, d.len().saturating_sub(1));
                    prop_assert_eq!(d.topological_order().len(), d.len());
                }
            }
        }
    }
}

//! Corpus ingestion and the anchor-title fast-match index.
//!
//! The corpus is one JSON record per line (see [`RawPage`] for the schema).
//! Anchor surfaces are normalized (NFC, trim, whitespace collapse, case
//! fold) and counted into an [`AnchorIndex`]; a foreign-language index is
//! merged into English title space through [`InterLangMap`]. Candidate
//! retrieval is an exact lookup on the normalized surface, ranked by link
//! count.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::Error;
use crate::Result;

/// On-disk corpus record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawPage {
    pub page_id: String,
    pub title: String,
    pub language: String,
    pub text: String,
    pub first_paragraph: String,
    #[serde(default)]
    pub anchors: Vec<RawAnchor>,
    #[serde(default)]
    pub outlinks: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawAnchor {
    pub surface: String,
    pub target: String,
}

/// A tokenized page.
#[derive(Debug, Clone)]
pub struct WikiPage {
    pub page_id: String,
    pub title: String,
    pub language: String,
    pub tokens: Vec<String>,
    /// Token index one past the end of the first paragraph.
    pub first_paragraph_end: usize,
    pub anchors: Vec<(String, String)>,
    pub outlinks: Vec<String>,
}

/// Document counts used for IDF weights, over English pages only.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_docs: usize,
    pub doc_freq: BTreeMap<String, usize>,
}

impl CorpusStats {
    /// ln(N / df); words never seen get the maximum weight ln(N).
    pub fn idf(&self, word: &str) -> f64 {
        let df = self.doc_freq.get(word).copied().unwrap_or(1).max(1);
        ((self.n_docs as f64) / (df as f64)).ln()
    }
}

/// Whitespace-plus-punctuation tokenizer: alphanumeric runs are tokens and
/// every other non-space character is a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

/// Sentence spans over a token sequence, split after `.`, `?` and `!`.
pub fn sentence_spans(tokens: &[String]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, tok) in tokens.iter().enumerate() {
        if tok == "." || tok == "?" || tok == "!" {
            spans.push((start, i + 1));
            start = i + 1;
        }
    }
    if start < tokens.len() {
        spans.push((start, tokens.len()));
    }
    spans
}

/// Canonical surface form: NFC, trimmed, internal whitespace collapsed,
/// case-folded.
pub fn normalize_surface(s: &str) -> String {
    let nfc: String = s.nfc().collect();
    nfc.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Parse and tokenize a corpus file; statistics cover English pages only.
pub fn ingest_corpus(path: &Path) -> Result<(Vec<WikiPage>, CorpusStats)> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let reader = BufReader::new(file);

    let mut pages = Vec::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawPage = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: display.clone(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        if !seen.insert((raw.language.clone(), raw.title.clone())) {
            return Err(Error::DuplicateTitle {
                title: raw.title,
                language: raw.language,
                line: lineno + 1,
            });
        }
        for (ai, a) in raw.anchors.iter().enumerate() {
            if a.surface.trim().is_empty() {
                return Err(Error::MalformedRecord {
                    path: display.clone(),
                    line: lineno + 1,
                    msg: format!("anchor {ai} has an empty surface"),
                });
            }
        }
        let tokens = tokenize(&raw.text);
        let para_len = tokenize(&raw.first_paragraph).len();
        if para_len == 0 || tokens.is_empty() {
            return Err(Error::EmptyParagraph { title: raw.title });
        }
        pages.push(WikiPage {
            page_id: raw.page_id,
            title: raw.title,
            language: raw.language,
            first_paragraph_end: para_len.min(tokens.len()),
            tokens,
            anchors: raw.anchors.into_iter().map(|a| (a.surface, a.target)).collect(),
            outlinks: raw.outlinks,
        });
    }
    if pages.is_empty() {
        return Err(Error::EmptyCorpus { path: display });
    }

    let mut stats = CorpusStats::default();
    for page in pages.iter().filter(|p| p.language == "en") {
        stats.n_docs += 1;
        let distinct: BTreeSet<&String> = page.tokens.iter().collect();
        for w in distinct {
            *stats.doc_freq.entry(w.clone()).or_insert(0) += 1;
        }
    }
    Ok((pages, stats))
}

/// Anchor-title index: normalized surface form to candidate titles ranked
/// by link count (count descending, title ascending on ties).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnchorIndex {
    pub language: String,
    pub entries: BTreeMap<String, Vec<(String, u64)>>,
}

impl AnchorIndex {
    /// Count every (surface, target) anchor occurrence over pages of `lang`.
    pub fn build(pages: &[WikiPage], lang: &str) -> AnchorIndex {
        let mut counts: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
        for page in pages.iter().filter(|p| p.language == lang) {
            for (surface, target) in &page.anchors {
                let key = normalize_surface(surface);
                if key.is_empty() {
                    continue;
                }
                *counts.entry(key).or_default().entry(target.clone()).or_insert(0) += 1;
            }
        }
        let entries = counts
            .into_iter()
            .map(|(surface, by_title)| (surface, rank(by_title)))
            .collect();
        AnchorIndex {
            language: lang.to_string(),
            entries,
        }
    }

    /// Top-K candidates for a surface; empty means NIL downstream.
    pub fn fast_match(&self, surface: &str, k: usize) -> Vec<(String, u64)> {
        assert!(k >= 1, "fast_match needs K >= 1, got {k}");
        match self.entries.get(&normalize_surface(surface)) {
            Some(cands) => cands.iter().take(k).cloned().collect(),
            None => Vec::new(),
        }
    }

    /// P(title | surface) from anchor counts; 0 for unknown pairs.
    pub fn prior(&self, surface: &str, title: &str) -> f64 {
        let Some(cands) = self.entries.get(&normalize_surface(surface)) else {
            return 0.0;
        };
        let total: u64 = cands.iter().map(|(_, c)| c).sum();
        if total == 0 {
            return 0.0;
        }
        let count = cands
            .iter()
            .find(|(t, _)| t == title)
            .map(|(_, c)| *c)
            .unwrap_or(0);
        count as f64 / total as f64
    }

    pub fn total_count(&self) -> u64 {
        self.entries
            .values()
            .flat_map(|v| v.iter().map(|(_, c)| c))
            .sum()
    }

    /// Remap foreign targets to English titles, summing counts that land on
    /// the same English title. Unmappable targets are dropped (and logged).
    pub fn merge_crosslingual(&self, map: &InterLangMap) -> AnchorIndex {
        let mut entries = BTreeMap::new();
        let mut dropped: u64 = 0;
        for (surface, cands) in &self.entries {
            let mut by_title: BTreeMap<String, u64> = BTreeMap::new();
            for (target, count) in cands {
                match map.lookup(&self.language, target) {
                    Some(en) => *by_title.entry(en.to_string()).or_insert(0) += count,
                    None => {
                        dropped += count;
                        log::debug!(
                            "dropping anchor target {target:?} ({}): no inter-language link",
                            self.language
                        );
                    }
                }
            }
            if !by_title.is_empty() {
                entries.insert(surface.clone(), rank(by_title));
            }
        }
        if dropped > 0 {
            log::warn!(
                "merge {}->en dropped {dropped} anchor occurrences without inter-language links",
                self.language
            );
        }
        AnchorIndex {
            language: self.language.clone(),
            entries,
        }
    }

    // ── Persistence ──────────────────────────────────────────────────

    const MAGIC: &'static [u8; 4] = b"ATIX";
    const VERSION: u32 = 1;

    /// Versioned binary layout; entries are already sorted, so rebuilding
    /// from the same corpus reproduces the file byte for byte.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        write_str(w, &self.language)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (surface, cands) in &self.entries {
            write_str(w, surface)?;
            w.write_all(&(cands.len() as u32).to_le_bytes())?;
            for (title, count) in cands {
                write_str(w, title)?;
                w.write_all(&count.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R, path: &str) -> Result<AnchorIndex> {
        let bad = |msg: &str| Error::BadFormat {
            path: path.to_string(),
            msg: msg.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != Self::MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(r, path)?;
        if version != Self::VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let language = read_str(r, path)?;
        let n = read_u64(r, path)? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let surface = read_str(r, path)?;
            let m = read_u32(r, path)? as usize;
            let mut cands = Vec::with_capacity(m);
            for _ in 0..m {
                let title = read_str(r, path)?;
                let count = read_u64(r, path)?;
                cands.push((title, count));
            }
            entries.insert(surface, cands);
        }
        Ok(AnchorIndex { language, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let display = path.display().to_string();
        let mut f = File::create(path).map_err(|e| Error::io(&display, e))?;
        self.write_binary(&mut f).map_err(|e| Error::io(&display, e))
    }

    pub fn load(path: &Path) -> Result<AnchorIndex> {
        let display = path.display().to_string();
        let mut f = File::open(path).map_err(|e| Error::io(&display, e))?;
        Self::read_binary(&mut f, &display)
    }

    /// Tab-separated `surface<TAB>title<TAB>count` lines, for inspection
    /// and for oracle comparison in tests.
    pub fn export_text<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for (surface, cands) in &self.entries {
            for (title, count) in cands {
                writeln!(w, "{surface}\t{title}\t{count}")?;
            }
        }
        Ok(())
    }
}

/// Sort candidates by count descending, title ascending.
fn rank(by_title: BTreeMap<String, u64>) -> Vec<(String, u64)> {
    let mut v: Vec<(String, u64)> = by_title.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

/// (language, foreign title) to English title, from inter-language links.
#[derive(Debug, Clone, Default)]
pub struct InterLangMap {
    pairs: HashMap<(String, String), String>,
}

impl InterLangMap {
    /// Parse `language<TAB>foreign_title<TAB>english_title` lines. When
    /// `english_titles` is given, links to unknown English pages are
    /// dropped here rather than at merge time.
    pub fn load(path: &Path, english_titles: Option<&BTreeSet<String>>) -> Result<InterLangMap> {
        let display = path.display().to_string();
        let file = File::open(path).map_err(|e| Error::io(&display, e))?;
        let mut map = InterLangMap::default();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&display, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(lang), Some(foreign), Some(english)) =
                (parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::MalformedRecord {
                    path: display.clone(),
                    line: lineno + 1,
                    msg: "expected language<TAB>foreign_title<TAB>english_title".to_string(),
                });
            };
            if let Some(known) = english_titles {
                if !known.contains(english) {
                    log::debug!("dropping inter-language link to unknown page {english:?}");
                    continue;
                }
            }
            map.insert(lang, foreign, english);
        }
        Ok(map)
    }

    pub fn insert(&mut self, lang: &str, foreign: &str, english: &str) {
        self.pairs
            .insert((lang.to_string(), foreign.to_string()), english.to_string());
    }

    pub fn lookup(&self, lang: &str, foreign: &str) -> Option<&str> {
        self.pairs
            .get(&(lang.to_string(), foreign.to_string()))
            .map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R, path: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, path: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R, path: &str) -> Result<String> {
    let n = read_u32(r, path)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    String::from_utf8(buf).map_err(|_| Error::BadFormat {
        path: path.to_string(),
        msg: "non-utf8 string".to_string(),
    })
}

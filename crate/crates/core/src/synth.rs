//! Deterministic synthetic fixtures: a small ambiguous knowledge base with
//! entity-specific context vocabularies, query sets, embedding tables, and
//! a pseudo-foreign transform (orthogonally rotated embeddings plus token
//! renaming) for zero-shot experiments.
//!
//! Construction guarantees:
//! - every ambiguous surface points at its candidate entities with equal
//!   anchor counts, so priors alone cannot separate them;
//! - each entity owns an exclusive context vocabulary whose vectors cluster
//!   around an entity center, so contexts do separate them;
//! - titles and surfaces never collide with context words, keeping the
//!   within-language features identical across languages.

use std::fmt::Write as _;

use crate::kb::RawAnchor;
use crate::tensor::SeededRng;

/// Shape of the generated world.
#[derive(Debug, Clone)]
pub struct ToySpec {
    pub entities: usize,
    pub surfaces: usize,
    pub candidates_per_surface: usize,
    pub words_per_entity: usize,
    pub train_queries: usize,
    pub dev_queries: usize,
    pub test_queries: usize,
    pub embedding_dim: usize,
    /// Anchor occurrences per (surface, entity) pair; equal counts keep
    /// priors flat.
    pub anchors_per_pair: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            entities: 50,
            surfaces: 20,
            candidates_per_surface: 3,
            words_per_entity: 8,
            train_queries: 2000,
            dev_queries: 400,
            test_queries: 400,
            embedding_dim: 16,
            anchors_per_pair: 2,
            seed: 1234,
        }
    }
}

/// Generated file contents, ready to write to disk.
#[derive(Debug, Clone)]
pub struct ToyData {
    pub corpus_jsonl: String,
    pub embeddings_txt: String,
    pub train_jsonl: String,
    pub dev_jsonl: String,
    pub test_jsonl: String,
    pub titles: Vec<String>,
    pub surfaces: Vec<String>,
    /// Entity indices behind each surface.
    pub surface_entities: Vec<Vec<usize>>,
}

/// Pseudoword generator: 2-4 open syllables, collision-checked.
struct WordMint {
    used: std::collections::BTreeSet<String>,
}

impl WordMint {
    fn new() -> Self {
        WordMint {
            used: Default::default(),
        }
    }

    fn word(&mut self, rng: &mut SeededRng) -> String {
        const C: [&str; 14] = [
            "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
        ];
        const V: [&str; 5] = ["a", "e", "i", "o", "u"];
        loop {
            let syllables = 2 + rng.below(3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(C[rng.below(C.len())]);
                w.push_str(V[rng.below(V.len())]);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn json_page(
    page_id: &str,
    title: &str,
    language: &str,
    first_paragraph: &str,
    rest: &str,
    anchors: &[(String, String)],
    outlinks: &[String],
) -> String {
    let text = if rest.is_empty() {
        first_paragraph.to_string()
    } else {
        format!("{first_paragraph} {rest}")
    };
    serde_json::to_string(&crate::kb::RawPage {
        page_id: page_id.to_string(),
        title: title.to_string(),
        language: language.to_string(),
        text,
        first_paragraph: first_paragraph.to_string(),
        anchors: anchors
            .iter()
            .map(|(s, t)| RawAnchor {
                surface: s.clone(),
                target: t.clone(),
            })
            .collect(),
        outlinks: outlinks.to_vec(),
    })
    .expect("page serializes")
}

/// Build the full toy world.
pub fn generate(spec: &ToySpec) -> ToyData {
    let mut rng = SeededRng::new(spec.seed);
    let mut mint = WordMint::new();

    // Entity titles: two capitalized pseudowords joined by an underscore.
    let titles: Vec<String> = (0..spec.entities)
        .map(|_| {
            let a = capitalize(&mint.word(&mut rng));
            let b = capitalize(&mint.word(&mut rng));
            format!("{a}_{b}")
        })
        .collect();

    // Exclusive context vocabulary per entity.
    let vocab: Vec<Vec<String>> = (0..spec.entities)
        .map(|_| (0..spec.words_per_entity).map(|_| mint.word(&mut rng)).collect())
        .collect();

    // Shared filler words; present in every page so their IDF is zero.
    let fillers: Vec<String> = (0..3).map(|_| mint.word(&mut rng)).collect();

    // Ambiguous surfaces and their candidate groups, round-robin over
    // entities so each surface sees a distinct group.
    let surfaces: Vec<String> = (0..spec.surfaces)
        .map(|i| {
            if i % 2 == 0 {
                mint.word(&mut rng)
            } else {
                format!("{} {}", mint.word(&mut rng), mint.word(&mut rng))
            }
        })
        .collect();
    let surface_entities: Vec<Vec<usize>> = (0..spec.surfaces)
        .map(|i| {
            (0..spec.candidates_per_surface)
                .map(|j| (i * spec.candidates_per_surface + j) % spec.entities)
                .collect()
        })
        .collect();

    // Embeddings: entity centers plus per-word noise.
    let dim = spec.embedding_dim;
    let centers: Vec<Vec<f64>> = (0..spec.entities)
        .map(|_| unit_vector(dim, &mut rng))
        .collect();
    let mut embeddings = String::new();
    for (e, words) in vocab.iter().enumerate() {
        for w in words {
            let v: Vec<f64> = centers[e]
                .iter()
                .map(|c| c + 0.1 * rng.uniform(-1.0, 1.0))
                .collect();
            write_embedding(&mut embeddings, w, &v);
        }
    }
    for f in &fillers {
        let v = unit_vector(dim, &mut rng);
        write_embedding(&mut embeddings, f, &v);
    }

    // Pages: first paragraph and body drawn from the entity vocabulary.
    let mut corpus = String::new();
    for (e, title) in titles.iter().enumerate() {
        let para = sentence_of(&vocab[e], &fillers, 6, &mut rng);
        let body = format!(
            "{} {}",
            sentence_of(&vocab[e], &fillers, 5, &mut rng),
            sentence_of(&vocab[e], &fillers, 5, &mut rng)
        );
        corpus.push_str(&json_page(
            &format!("p{e:03}"),
            title,
            "en",
            &para,
            &body,
            &[],
            &[],
        ));
        corpus.push('\n');
    }
    // Hub pages carry the anchors that define the candidate sets.
    for (si, surface) in surfaces.iter().enumerate() {
        let mut anchors = Vec::new();
        for &e in &surface_entities[si] {
            for _ in 0..spec.anchors_per_pair {
                anchors.push((surface.clone(), titles[e].clone()));
            }
        }
        let para = sentence_of(&fillers, &fillers, 4, &mut rng);
        corpus.push_str(&json_page(
            &format!("hub{si:03}"),
            &format!("Hub_{si:02}"),
            "en",
            &para,
            "",
            &anchors,
            &[],
        ));
        corpus.push('\n');
    }

    // Queries: a sentence mentioning the surface inside entity context,
    // plus one or two pure-context sentences.
    let make_queries = |prefix: &str, count: usize, rng: &mut SeededRng| {
        let mut out = String::new();
        for qi in 0..count {
            let si = rng.below(spec.surfaces);
            let group = &surface_entities[si];
            let e = group[rng.below(group.len())];
            let surface = &surfaces[si];

            let lead = sentence_of(&vocab[e], &fillers, 4, rng);
            let lead_tokens = crate::kb::tokenize(&lead);
            let mention_start = lead_tokens.len();
            let surface_len = crate::kb::tokenize(surface).len();
            let tail = sentence_of(&vocab[e], &fillers, 3, rng);
            let text = format!("{lead} {surface} {tail}");
            let extra = if rng.unit() < 0.5 {
                format!(" {}", sentence_of(&vocab[e], &fillers, 4, rng))
            } else {
                String::new()
            };

            let doc = crate::context::RawQueryDoc {
                doc_id: format!("{prefix}-doc-{qi:05}"),
                language: "en".to_string(),
                text: format!("{text}{extra}"),
                mentions: vec![crate::context::RawMention {
                    start_token: mention_start,
                    end_token: mention_start + surface_len,
                    surface: surface.clone(),
                    gold_title: Some(titles[e].clone()),
                    query_id: format!("{prefix}-{qi:05}"),
                }],
            };
            out.push_str(&serde_json::to_string(&doc).expect("query serializes"));
            out.push('\n');
        }
        out
    };

    let train_jsonl = make_queries("train", spec.train_queries, &mut rng);
    let dev_jsonl = make_queries("dev", spec.dev_queries, &mut rng);
    let test_jsonl = make_queries("test", spec.test_queries, &mut rng);

    ToyData {
        corpus_jsonl: corpus,
        embeddings_txt: embeddings,
        train_jsonl,
        dev_jsonl,
        test_jsonl,
        titles,
        surfaces,
        surface_entities,
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn unit_vector(dim: usize, rng: &mut SeededRng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    v.into_iter().map(|x| x / norm).collect()
}

fn sentence_of(vocab: &[String], fillers: &[String], words: usize, rng: &mut SeededRng) -> String {
    let mut parts = Vec::with_capacity(words + 2);
    parts.push(fillers[rng.below(fillers.len())].clone());
    for _ in 0..words {
        parts.push(vocab[rng.below(vocab.len())].clone());
    }
    format!("{} .", parts.join(" "))
}

fn write_embedding(out: &mut String, word: &str, v: &[f64]) {
    out.push_str(word);
    for x in v {
        // Default float formatting round-trips exactly.
        let _ = write!(out, " {x}");
    }
    out.push('\n');
}

/// A pseudo-foreign rendering of toy data: tokens renamed and embeddings
/// rotated by a fixed random orthogonal matrix.
#[derive(Debug, Clone)]
pub struct PseudoForeign {
    pub language: String,
    pub corpus_jsonl: String,
    pub embeddings_txt: String,
    pub interlang_tsv: String,
    pub dictionary_tsv: String,
    pub queries_jsonl: String,
}

/// Rename an alphanumeric token into the pseudo-language.
pub fn rename_token(token: &str) -> String {
    if token.chars().any(|c| c.is_alphanumeric()) {
        format!("zz{token}")
    } else {
        token.to_string()
    }
}

fn rename_text(text: &str) -> String {
    crate::kb::tokenize(text)
        .iter()
        .map(|t| rename_token(t))
        .collect::<Vec<_>>()
        .join(" ")
}

fn rename_title(title: &str) -> String {
    format!("XX_{title}")
}

/// Random orthogonal matrix via Gram-Schmidt on a seeded Gaussian-ish
/// square matrix.
pub fn orthogonal_matrix(dim: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        for r in &rows {
            let d: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (x, rv) in v.iter_mut().zip(r) {
                *x -= d * rv;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
    }
    rows
}

fn apply_matrix(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// Derive the pseudo-foreign world from toy data: rotated embedding table,
/// renamed corpus with inter-language links, an alignment dictionary, and
/// renamed test queries (gold titles stay English).
pub fn pseudo_foreign(
    toy: &ToyData,
    language: &str,
    dictionary_pairs: usize,
    seed: u64,
) -> PseudoForeign {
    let mut rng = SeededRng::new(seed);

    // Parse the English table back out of its text form.
    let mut vocab: Vec<(String, Vec<f64>)> = Vec::new();
    for line in toy.embeddings_txt.lines() {
        let mut parts = line.split_whitespace();
        let word = parts.next().expect("word").to_string();
        let v: Vec<f64> = parts.map(|p| p.parse().expect("float")).collect();
        vocab.push((word, v));
    }
    let dim = vocab[0].1.len();
    let q = orthogonal_matrix(dim, &mut rng);

    let mut embeddings = String::new();
    for (w, v) in &vocab {
        write_embedding(&mut embeddings, &rename_token(w), &apply_matrix(&q, v));
    }

    let mut corpus = String::new();
    let mut interlang = String::new();
    for line in toy.corpus_jsonl.lines() {
        let page: crate::kb::RawPage = serde_json::from_str(line).expect("page parses");
        let foreign_title = rename_title(&page.title);
        let renamed = crate::kb::RawPage {
            page_id: format!("xx-{}", page.page_id),
            title: foreign_title.clone(),
            language: language.to_string(),
            text: rename_text(&page.text),
            first_paragraph: rename_text(&page.first_paragraph),
            anchors: page
                .anchors
                .iter()
                .map(|a| RawAnchor {
                    surface: rename_text(&a.surface),
                    target: rename_title(&a.target),
                })
                .collect(),
            outlinks: page.outlinks.iter().map(|t| rename_title(t)).collect(),
        };
        corpus.push_str(&serde_json::to_string(&renamed).expect("page serializes"));
        corpus.push('\n');
        let _ = writeln!(interlang, "{language}\t{foreign_title}\t{}", page.title);
    }

    let mut dictionary = String::new();
    let mut picked = std::collections::BTreeSet::new();
    let n = dictionary_pairs.min(vocab.len());
    while picked.len() < n {
        let (w, _) = &vocab[rng.below(vocab.len())];
        if picked.insert(w.clone()) {
            let _ = writeln!(dictionary, "{}\t{w}", rename_token(w));
        }
    }

    let mut queries = String::new();
    for line in toy.test_jsonl.lines() {
        let doc: crate::context::RawQueryDoc = serde_json::from_str(line).expect("query parses");
        let renamed = crate::context::RawQueryDoc {
            doc_id: format!("xx-{}", doc.doc_id),
            language: language.to_string(),
            text: rename_text(&doc.text),
            mentions: doc
                .mentions
                .iter()
                .map(|m| crate::context::RawMention {
                    start_token: m.start_token,
                    end_token: m.end_token,
                    surface: rename_text(&m.surface),
                    gold_title: m.gold_title.clone(),
                    query_id: format!("xx-{}", m.query_id),
                })
                .collect(),
        };
        queries.push_str(&serde_json::to_string(&renamed).expect("query serializes"));
        queries.push('\n');
    }

    PseudoForeign {
        language: language.to_string(),
        corpus_jsonl: corpus,
        embeddings_txt: embeddings,
        interlang_tsv: interlang,
        dictionary_tsv: dictionary,
        queries_jsonl: queries,
    }
}

/// A three-way ambiguous fixture modeled on a famous namesake problem:
/// two same-sport entities separated only by fine context plus one from a
/// different domain.
pub struct NamesakeFixture {
    pub corpus_jsonl: String,
    pub embeddings_txt: String,
    pub train_jsonl: String,
    pub quarterback_title: String,
    pub tightend_title: String,
    pub golfer_title: String,
    pub surface: String,
}

pub fn namesake_fixture(seed: u64) -> NamesakeFixture {
    let mut rng = SeededRng::new(seed);
    let dim = 12;

    let quarterback = "Alex_Smith_(quarterback)";
    let tightend = "Alex_Smith_(tight_end)";
    let golfer = "Alex_Smith_(golfer)";

    // Shared football words plus discriminative words per entity.
    let shared_football = ["football", "nfl", "league", "american"];
    let qb_words = ["quarterback", "kansas", "chiefs", "passer", "season"];
    let te_words = ["tight", "end", "tampa", "buccaneers", "draft"];
    let golf_words = ["golfer", "golf", "course", "scottish", "championship"];

    let mut embeddings = String::new();
    let centers: Vec<Vec<f64>> = (0..4).map(|_| unit_vector(dim, &mut rng)).collect();
    let add_words = |words: &[&str], center: usize, embeddings: &mut String, rng: &mut SeededRng| {
        for w in words {
            let v: Vec<f64> = centers[center]
                .iter()
                .map(|c| c + 0.15 * rng.uniform(-1.0, 1.0))
                .collect();
            write_embedding(embeddings, w, &v);
        }
    };
    add_words(&shared_football, 0, &mut embeddings, &mut rng);
    add_words(&qb_words, 1, &mut embeddings, &mut rng);
    add_words(&te_words, 2, &mut embeddings, &mut rng);
    add_words(&golf_words, 3, &mut embeddings, &mut rng);

    let page = |title: &str, own: &[&str], shared: &[&str], pid: &str, rng: &mut SeededRng| {
        let words: Vec<String> = own.iter().chain(shared).map(|s| s.to_string()).collect();
        let para = sentence_of(&words, &words, 6, rng);
        let body = sentence_of(&words, &words, 6, rng);
        json_page(pid, title, "en", &para, &body, &[], &[])
    };
    let mut corpus = String::new();
    corpus.push_str(&page(quarterback, &qb_words, &shared_football, "qb", &mut rng));
    corpus.push('\n');
    corpus.push_str(&page(tightend, &te_words, &shared_football, "te", &mut rng));
    corpus.push('\n');
    corpus.push_str(&page(golfer, &golf_words, &[], "golf", &mut rng));
    corpus.push('\n');
    // The anchor hub gives the surface equal counts on all three pages.
    let surface = "Alex Smith".to_string();
    let mut anchors: Vec<(String, String)> = Vec::new();
    for t in [quarterback, tightend, golfer] {
        for _ in 0..2 {
            anchors.push((surface.clone(), t.to_string()));
        }
    }
    corpus.push_str(&json_page(
        "hub",
        "Hub_Namesakes",
        "en",
        "famous namesakes .",
        "",
        &anchors,
        &[],
    ));
    corpus.push('\n');

    let mut train = String::new();
    let mut qi = 0;
    let mut add_queries =
        |own: &[&str], shared: &[&str], title: &str, count: usize, train: &mut String, rng: &mut SeededRng| {
            let words: Vec<String> = own.iter().chain(shared).map(|s| s.to_string()).collect();
            for _ in 0..count {
                let lead = sentence_of(&words, &words, 4, rng);
                let lead_len = crate::kb::tokenize(&lead).len();
                let tail = sentence_of(&words, &words, 4, rng);
                let doc = crate::context::RawQueryDoc {
                    doc_id: format!("ns-doc-{qi:03}"),
                    language: "en".into(),
                    text: format!("{lead} Alex Smith {tail}"),
                    mentions: vec![crate::context::RawMention {
                        start_token: lead_len,
                        end_token: lead_len + 2,
                        surface: surface.clone(),
                        gold_title: Some(title.to_string()),
                        query_id: format!("ns-{qi:03}"),
                    }],
                };
                train.push_str(&serde_json::to_string(&doc).expect("query serializes"));
                train.push('\n');
                qi += 1;
            }
        };
    add_queries(&qb_words, &shared_football, quarterback, 30, &mut train, &mut rng);
    add_queries(&te_words, &shared_football, tightend, 30, &mut train, &mut rng);
    add_queries(&golf_words, &[], golfer, 30, &mut train, &mut rng);

    NamesakeFixture {
        corpus_jsonl: corpus,
        embeddings_txt: embeddings,
        train_jsonl: train,
        quarterback_title: quarterback.to_string(),
        tightend_title: tightend.to_string(),
        golfer_title: golfer.to_string(),
        surface,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{ingest_corpus, AnchorIndex};
    use std::io::Write as _;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = ToySpec {
            entities: 6,
            surfaces: 2,
            train_queries: 5,
            dev_queries: 2,
            test_queries: 2,
            ..Default::default()
        };
        let a = generate(&spec);
        let b = generate(&spec);
        assert_eq!(a.corpus_jsonl, b.corpus_jsonl);
        assert_eq!(a.embeddings_txt, b.embeddings_txt);
        assert_eq!(a.train_jsonl, b.train_jsonl);
    }

    #[test]
    fn toy_priors_are_flat_per_surface() {
        let spec = ToySpec {
            entities: 9,
            surfaces: 3,
            train_queries: 1,
            dev_queries: 1,
            test_queries: 1,
            ..Default::default()
        };
        let toy = generate(&spec);
        let f = write_tmp(&toy.corpus_jsonl);
        let (pages, _) = ingest_corpus(f.path()).unwrap();
        let index = AnchorIndex::build(&pages, "en");
        for (si, surface) in toy.surfaces.iter().enumerate() {
            for &e in &toy.surface_entities[si] {
                let p = index.prior(surface, &toy.titles[e]);
                let want = 1.0 / spec.candidates_per_surface as f64;
                assert!((p - want).abs() < 1e-12, "surface {surface}: prior {p}");
            }
        }
    }

    #[test]
    fn toy_queries_parse_and_span_the_surface() {
        let spec = ToySpec {
            entities: 6,
            surfaces: 2,
            train_queries: 20,
            dev_queries: 1,
            test_queries: 1,
            ..Default::default()
        };
        let toy = generate(&spec);
        let f = write_tmp(&toy.train_jsonl);
        let docs = crate::context::load_queries(f.path()).unwrap();
        assert_eq!(docs.len(), 20);
        for doc in &docs {
            let m = &doc.mentions[0];
            let span: Vec<String> = doc.tokens[m.start_token..m.end_token].to_vec();
            assert_eq!(span.join(" "), m.surface);
        }
    }

    #[test]
    fn orthogonal_matrix_has_orthonormal_rows() {
        let mut rng = SeededRng::new(3);
        let q = orthogonal_matrix(8, &mut rng);
        for i in 0..8 {
            for j in 0..8 {
                let d: f64 = q[i].iter().zip(&q[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-10, "({i},{j}): {d}");
            }
        }
    }

    #[test]
    fn pseudo_foreign_preserves_token_counts_and_gold() {
        let spec = ToySpec {
            entities: 6,
            surfaces: 2,
            train_queries: 2,
            dev_queries: 1,
            test_queries: 5,
            ..Default::default()
        };
        let toy = generate(&spec);
        let pf = pseudo_foreign(&toy, "xx", 50, 9);

        let ef = write_tmp(&toy.test_jsonl);
        let ff = write_tmp(&pf.queries_jsonl);
        let en_docs = crate::context::load_queries(ef.path()).unwrap();
        let xx_docs = crate::context::load_queries(ff.path()).unwrap();
        assert_eq!(en_docs.len(), xx_docs.len());
        for (e, x) in en_docs.iter().zip(&xx_docs) {
            assert_eq!(e.tokens.len(), x.tokens.len());
            assert_eq!(x.language, "xx");
            assert_eq!(
                e.mentions[0].gold_title, x.mentions[0].gold_title,
                "gold stays English"
            );
            assert_eq!(x.tokens[0], format!("zz{}", e.tokens[0]));
        }
    }

    #[test]
    fn namesake_fixture_is_prior_flat() {
        let fx = namesake_fixture(5);
        let f = write_tmp(&fx.corpus_jsonl);
        let (pages, _) = ingest_corpus(f.path()).unwrap();
        let index = AnchorIndex::build(&pages, "en");
        let cands = index.fast_match(&fx.surface, 10);
        assert_eq!(cands.len(), 3);
        assert!(cands.iter().all(|(_, c)| *c == 2));
    }
}

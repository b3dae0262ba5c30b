//! Word-embedding tables, least-squares cross-lingual alignment, and
//! IDF-weighted page embeddings.
//!
//! Tables load from the plain text format `word v1 .. vd`, one entry per
//! line, with an optional `count dim` header. A foreign table is brought
//! into English space either by loading pre-aligned vectors or by fitting
//! an [`AlignmentMatrix`] on a bilingual dictionary with ridge-damped
//! normal equations. Page vectors are the IDF-weighted average of their
//! word vectors, then passed through a trainable tanh layer to meet the
//! context encoders in one space.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::kb::{CorpusStats, WikiPage};
use crate::tensor::{ParamId, ParamSet, Tape, Var};
use crate::Result;

/// Per-language word vector table.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub language: String,
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
    /// True once the vectors are expressed in English space.
    pub aligned: bool,
}

impl EmbeddingTable {
    pub fn new(language: &str, dim: usize) -> Self {
        EmbeddingTable {
            language: language.to_string(),
            dim,
            vectors: HashMap::new(),
            aligned: language == "en",
        }
    }

    pub fn insert(&mut self, word: &str, vector: Vec<f64>) {
        assert_eq!(
            vector.len(),
            self.dim,
            "vector length {} does not match table dim {}",
            vector.len(),
            self.dim
        );
        self.vectors.insert(word.to_string(), vector);
    }

    pub fn lookup(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(|v| v.as_slice())
    }

    /// Unknown words map to the all-zero out-of-vocabulary vector.
    pub fn vector_or_zero(&self, word: &str) -> Vec<f64> {
        self.lookup(word).map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; self.dim])
    }

    /// Apply an alignment matrix to every vector, producing a table in the
    /// target (English) space.
    pub fn aligned_by(&self, matrix: &AlignmentMatrix) -> EmbeddingTable {
        assert_eq!(
            matrix.dim, self.dim,
            "alignment dim {} does not match table dim {}",
            matrix.dim, self.dim
        );
        let vectors = self
            .vectors
            .iter()
            .map(|(w, v)| (w.clone(), matrix.apply(v)))
            .collect();
        EmbeddingTable {
            language: self.language.clone(),
            dim: self.dim,
            vectors,
            aligned: true,
        }
    }
}

/// Load a table from text; duplicate words keep the last entry.
pub fn load_embeddings(path: &Path, language: &str) -> Result<EmbeddingTable> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut table: Option<EmbeddingTable> = None;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if lineno == 0 && fields.len() == 2 {
            if let (Ok(_count), Ok(_dim)) = (fields[0].parse::<usize>(), fields[1].parse::<usize>())
            {
                continue; // count header
            }
        }
        let word = fields[0];
        let vector: Vec<f64> = fields[1..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::MalformedRecord {
                path: display.clone(),
                line: lineno + 1,
                msg: format!("bad float: {e}"),
            })?;
        let table = table.get_or_insert_with(|| EmbeddingTable::new(language, vector.len()));
        if vector.len() != table.dim {
            return Err(Error::VectorLength {
                path: display.clone(),
                line: lineno + 1,
                expected: table.dim,
                found: vector.len(),
            });
        }
        if table.vectors.contains_key(word) {
            log::warn!("{display}:{}: duplicate word {word:?}, last entry wins", lineno + 1);
        }
        table.insert(word, vector);
    }
    table.ok_or(Error::BadFormat {
        path: display,
        msg: "no embedding entries".to_string(),
    })
}

/// d×d projection of one language's vectors onto English space.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix {
    pub source_language: String,
    pub target_language: String,
    pub dim: usize,
    /// Row-major d×d weights; applied as `W x`.
    pub weights: Vec<f64>,
    /// Mean squared residual over the training dictionary at fit time.
    pub residual: f64,
}

impl AlignmentMatrix {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        assert_eq!(x.len(), d, "alignment input dim {} expected {}", x.len(), d);
        (0..d)
            .map(|i| {
                self.weights[i * d..(i + 1) * d]
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum()
            })
            .collect()
    }

    const MAGIC: &'static [u8; 4] = b"ALGN";

    pub fn save(&self, path: &Path) -> Result<()> {
        let display = path.display().to_string();
        let mut f = File::create(path).map_err(|e| Error::io(&display, e))?;
        let io = |e| Error::io(&display, e);
        f.write_all(Self::MAGIC).map_err(io)?;
        write_str(&mut f, &self.source_language).map_err(io)?;
        write_str(&mut f, &self.target_language).map_err(io)?;
        f.write_all(&(self.dim as u32).to_le_bytes()).map_err(io)?;
        f.write_all(&self.residual.to_le_bytes()).map_err(io)?;
        for w in &self.weights {
            f.write_all(&w.to_le_bytes()).map_err(io)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<AlignmentMatrix> {
        let display = path.display().to_string();
        let mut f = File::open(path).map_err(|e| Error::io(&display, e))?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic).map_err(|e| Error::io(&display, e))?;
        if &magic != Self::MAGIC {
            return Err(Error::BadFormat {
                path: display,
                msg: "bad magic".to_string(),
            });
        }
        let source_language = read_str(&mut f, &display)?;
        let target_language = read_str(&mut f, &display)?;
        let dim = read_u32(&mut f, &display)? as usize;
        let residual = read_f64(&mut f, &display)?;
        let mut weights = Vec::with_capacity(dim * dim);
        for _ in 0..dim * dim {
            weights.push(read_f64(&mut f, &display)?);
        }
        Ok(AlignmentMatrix {
            source_language,
            target_language,
            dim,
            weights,
            residual,
        })
    }
}

/// Load a tab-separated `foreign<TAB>english` dictionary.
pub fn load_dictionary(path: &Path) -> Result<Vec<(String, String)>> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(f), Some(e)) = (parts.next(), parts.next()) else {
            return Err(Error::MalformedRecord {
                path: display.clone(),
                line: lineno + 1,
                msg: "expected foreign<TAB>english".to_string(),
            });
        };
        pairs.push((f.to_string(), e.to_string()));
    }
    Ok(pairs)
}

/// Ridge damping applied to the normal equations; keeps rank-deficient toy
/// dictionaries solvable.
pub const RIDGE_LAMBDA: f64 = 1e-6;

/// Fit `W = argmin sum ||W x_f - x_e||^2` over dictionary pairs found in
/// both vocabularies, via damped normal equations.
pub fn fit_ls_alignment(
    dictionary: &[(String, String)],
    foreign: &EmbeddingTable,
    english: &EmbeddingTable,
) -> Result<AlignmentMatrix> {
    assert_eq!(
        foreign.dim, english.dim,
        "foreign dim {} does not match english dim {}",
        foreign.dim, english.dim
    );
    let d = foreign.dim;
    let usable: Vec<(&[f64], &[f64])> = dictionary
        .iter()
        .filter_map(|(f, e)| Some((foreign.lookup(f)?, english.lookup(e)?)))
        .collect();
    if usable.len() < d {
        return Err(Error::Underdetermined {
            usable: usable.len(),
            dim: d,
        });
    }

    // Normal equations: (Xf^T Xf + lambda I) W^T = Xf^T Xe, one solve per
    // output coordinate.
    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d * d]; // column j holds Xf^T Xe[:, j]
    for (xf, xe) in &usable {
        for i in 0..d {
            for j in 0..d {
                gram[i * d + j] += xf[i] * xf[j];
                rhs[i * d + j] += xf[i] * xe[j];
            }
        }
    }
    for i in 0..d {
        gram[i * d + i] += RIDGE_LAMBDA;
    }

    let chol = cholesky(&gram, d).map_err(Error::Singular)?;
    let mut weights = vec![0.0; d * d];
    for j in 0..d {
        let col: Vec<f64> = (0..d).map(|i| rhs[i * d + j]).collect();
        let sol = chol_solve(&chol, &col, d);
        // sol is column j of W^T, i.e. row j of W.
        weights[j * d..(j + 1) * d].copy_from_slice(&sol);
    }

    let mut residual = 0.0;
    let matrix = AlignmentMatrix {
        source_language: foreign.language.clone(),
        target_language: english.language.clone(),
        dim: d,
        weights,
        residual: 0.0,
    };
    for (xf, xe) in &usable {
        let y = matrix.apply(xf);
        residual += y.iter().zip(*xe).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    residual /= usable.len() as f64;
    log::info!(
        "alignment {}->{}: {} usable pairs, mean squared residual {residual:.3e}",
        matrix.source_language,
        matrix.target_language,
        usable.len()
    );
    Ok(AlignmentMatrix { residual, ..matrix })
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
fn cholesky(a: &[f64], n: usize) -> std::result::Result<Vec<f64>, String> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(format!("matrix not positive definite at pivot {i}"));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

fn chol_solve(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    // L y = b
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    // L^T x = y
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// IDF-weighted page vector plus its trained projection.
#[derive(Debug, Clone)]
pub struct PageEmbedding {
    pub title: String,
    pub raw: Vec<f64>,
    /// True when no token had both a vector and a positive IDF.
    pub empty: bool,
}

/// Weighted average of the page's word vectors: `sum(e_w idf_w) / sum(idf_w)`
/// over in-vocabulary tokens with positive IDF, per occurrence.
pub fn embed_page(page: &WikiPage, table: &EmbeddingTable, stats: &CorpusStats) -> PageEmbedding {
    embed_tokens(&page.title, &page.tokens, table, stats)
}

/// Same weighting over an arbitrary token sequence.
pub fn embed_tokens(
    title: &str,
    tokens: &[String],
    table: &EmbeddingTable,
    stats: &CorpusStats,
) -> PageEmbedding {
    let weighted: Vec<(f64, &[f64])> = tokens
        .iter()
        .filter_map(|tok| {
            let vec = table.lookup(tok)?;
            let idf = stats.idf(tok);
            (idf > 0.0).then_some((idf, vec))
        })
        .collect();
    match weighted_average(&weighted, table.dim) {
        Some(raw) => PageEmbedding {
            title: title.to_string(),
            raw,
            empty: false,
        },
        None => {
            log::debug!("page {title:?} has no usable tokens; zero embedding");
            PageEmbedding {
                title: title.to_string(),
                raw: vec![0.0; table.dim],
                empty: true,
            }
        }
    }
}

/// `sum(w_i v_i) / sum(w_i)`; `None` when the weights sum to zero.
pub fn weighted_average(items: &[(f64, &[f64])], dim: usize) -> Option<Vec<f64>> {
    let mut acc = vec![0.0; dim];
    let mut weight_sum = 0.0;
    for (w, v) in items {
        for (a, x) in acc.iter_mut().zip(*v) {
            *a += w * x;
        }
        weight_sum += w;
    }
    if weight_sum == 0.0 {
        return None;
    }
    acc.iter_mut().for_each(|a| *a /= weight_sum);
    Some(acc)
}

/// Trainable tanh layer mapping raw page vectors into the context-encoder
/// output space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PageProjection {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl PageProjection {
    pub fn init(
        params: &mut ParamSet,
        in_dim: usize,
        out_dim: usize,
        rng: &mut crate::tensor::SeededRng,
        l2: f64,
    ) -> Self {
        PageProjection {
            weight: params.add_matrix("page_proj.weight", out_dim, in_dim, rng, l2),
            bias: params.add_bias("page_proj.bias", out_dim, l2),
        }
    }

    /// tanh(W raw + b)
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, raw: Var) -> Var {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        let wx = tape.matvec(w, raw);
        let a = tape.add(wx, b);
        tape.tanh(a)
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

fn read_f64<R: Read>(r: &mut R, path: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(f64::from_le_bytes(b))
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, SeededRng, Tensor};
    use std::io::Write as IoWrite;

    fn write_table(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_three_words_of_dim_four() {
        let f = write_table(&[
            "alpha 1 0 0 0",
            "beta 0 1 0 0",
            "gamma 0 0 1 0.5",
        ]);
        let t = load_embeddings(f.path(), "en").unwrap();
        assert_eq!(t.dim, 4);
        assert_eq!(t.vectors.len(), 3);
        assert_eq!(t.lookup("gamma").unwrap(), &[0.0, 0.0, 1.0, 0.5]);
    }

    #[test]
    fn header_line_is_skipped() {
        let f = write_table(&["2 3", "a 1 2 3", "b 4 5 6"]);
        let t = load_embeddings(f.path(), "en").unwrap();
        assert_eq!(t.dim, 3);
        assert_eq!(t.vectors.len(), 2);
    }

    #[test]
    fn unknown_word_is_the_zero_vector() {
        let f = write_table(&["a 1 2"]);
        let t = load_embeddings(f.path(), "en").unwrap();
        assert_eq!(t.vector_or_zero("zzz"), vec![0.0, 0.0]);
        assert!(t.lookup("zzz").is_none());
    }

    #[test]
    fn short_vector_line_names_the_line() {
        let f = write_table(&["a 1 2 3 4", "b 1 2 3"]);
        let err = load_embeddings(f.path(), "en").unwrap_err();
        match err {
            Error::VectorLength { line, expected, found, .. } => {
                assert_eq!((line, expected, found), (2, 4, 3));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    fn table_from(entries: &[(&str, &[f64])], lang: &str) -> EmbeddingTable {
        let mut t = EmbeddingTable::new(lang, entries[0].1.len());
        for (w, v) in entries {
            t.insert(w, v.to_vec());
        }
        t
    }

    #[test]
    fn identity_tables_align_to_identity() {
        let en = table_from(
            &[
                ("a", &[1.0, 0.0]),
                ("b", &[0.0, 1.0]),
                ("c", &[1.0, 1.0]),
            ],
            "en",
        );
        let mut fo = en.clone();
        fo.language = "xx".to_string();
        fo.aligned = false;
        let dict = vec![
            ("a".to_string(), "a".to_string()),
            ("b".to_string(), "b".to_string()),
            ("c".to_string(), "c".to_string()),
        ];
        let m = fit_ls_alignment(&dict, &fo, &en).unwrap();
        assert!((m.weights[0] - 1.0).abs() < 1e-5);
        assert!((m.weights[3] - 1.0).abs() < 1e-5);
        assert!(m.weights[1].abs() < 1e-5 && m.weights[2].abs() < 1e-5);
        assert!(m.residual < 1e-10, "residual {}", m.residual);
    }

    #[test]
    fn rotation_is_recovered_as_its_inverse() {
        // Foreign vectors are R * english for a fixed 2x2 rotation. The
        // dictionary is large enough that the ridge bias stays below the
        // tolerance.
        let theta: f64 = 0.7;
        let (c, s) = (theta.cos(), theta.sin());
        let mut rng = SeededRng::new(41);
        let mut en = EmbeddingTable::new("en", 2);
        let mut fo = EmbeddingTable::new("xx", 2);
        let mut dict = Vec::new();
        for i in 0..100 {
            let w = format!("w{i}");
            let v = [rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)];
            en.insert(&w, v.to_vec());
            fo.insert(&w, vec![c * v[0] - s * v[1], s * v[0] + c * v[1]]);
            dict.push((w.clone(), w));
        }
        let m = fit_ls_alignment(&dict, &fo, &en).unwrap();
        // R^-1 = [[c, s], [-s, c]]
        let expect = [c, s, -s, c];
        for (got, want) in m.weights.iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-8, "got {got}, want {want}");
        }
    }

    #[test]
    fn alignment_reproduces_exact_linear_map_per_coordinate() {
        let mut rng = SeededRng::new(5);
        let d = 4;
        let mut en = EmbeddingTable::new("en", d);
        let mut fo = EmbeddingTable::new("xx", d);
        // Any well-conditioned map works; use a shear + scale.
        let map = |v: &[f64]| {
            vec![
                1.1 * v[0] + 0.2 * v[3],
                0.9 * v[1] - 0.1 * v[0],
                1.3 * v[2],
                v[3] + 0.4 * v[2],
            ]
        };
        let mut dict = Vec::new();
        for i in 0..24 {
            let w = format!("w{i}");
            let v: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
            fo.insert(&w, map(&v));
            en.insert(&w, v);
            dict.push((w.clone(), w));
        }
        let m = fit_ls_alignment(&dict, &fo, &en).unwrap();
        for w in fo.vectors.keys() {
            let back = m.apply(fo.lookup(w).unwrap());
            for (a, b) in back.iter().zip(en.lookup(w).unwrap()) {
                assert!((a - b).abs() < 1e-6, "coordinate error {}", (a - b).abs());
            }
        }
    }

    #[test]
    fn one_pair_for_dim_four_is_underdetermined() {
        let en = table_from(&[("a", &[1.0, 0.0, 0.0, 0.0])], "en");
        let mut fo = en.clone();
        fo.language = "xx".into();
        let dict = vec![("a".to_string(), "a".to_string())];
        let err = fit_ls_alignment(&dict, &fo, &en).unwrap_err();
        assert!(matches!(err, Error::Underdetermined { usable: 1, dim: 4 }), "{err}");
    }

    fn stats_with(words: &[(&str, usize)], n_docs: usize) -> CorpusStats {
        CorpusStats {
            n_docs,
            doc_freq: words.iter().map(|(w, c)| (w.to_string(), *c)).collect(),
        }
    }

    fn page_of(tokens: &[&str]) -> WikiPage {
        WikiPage {
            page_id: "p".into(),
            title: "P".into(),
            language: "en".into(),
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            first_paragraph_end: tokens.len(),
            anchors: vec![],
            outlinks: vec![],
        }
    }

    #[test]
    fn single_word_page_embeds_to_that_word() {
        let table = table_from(&[("w", &[0.3, -0.7])], "en");
        let stats = stats_with(&[("w", 1)], 4);
        let p = page_of(&["w", "w", "w"]);
        let e = embed_page(&p, &table, &stats);
        assert_eq!(e.raw, vec![0.3, -0.7]);
    }

    #[test]
    fn equal_idf_words_average() {
        let table = table_from(&[("a", &[1.0, 0.0]), ("b", &[0.0, 1.0])], "en");
        let stats = stats_with(&[("a", 2), ("b", 2)], 4);
        let p = page_of(&["a", "b"]);
        let e = embed_page(&p, &table, &stats);
        assert!((e.raw[0] - 0.5).abs() < 1e-12 && (e.raw[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn idf_weights_mix_vectors() {
        // Weights 2.0 on [1,0] and 1.0 on [0,1] give [2/3, 1/3].
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        let avg = weighted_average(&[(2.0, &a), (1.0, &b)], 2).unwrap();
        assert!((avg[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((avg[1] - 1.0 / 3.0).abs() < 1e-12);

        // The page path weights by idf from corpus stats in the same way.
        let table = table_from(&[("a", &a), ("b", &b)], "en");
        let stats = stats_with(&[("a", 2), ("b", 4)], 8);
        let (ia, ib) = (stats.idf("a"), stats.idf("b"));
        let e = embed_page(&page_of(&["a", "b"]), &table, &stats);
        assert!((e.raw[0] - ia / (ia + ib)).abs() < 1e-12);
        assert!((e.raw[1] - ib / (ia + ib)).abs() < 1e-12);
    }

    #[test]
    fn page_with_no_usable_tokens_is_flagged_zero() {
        let table = table_from(&[("a", &[1.0, 0.0])], "en");
        // "a" appears in every doc: idf 0; "zzz" is OOV.
        let stats = stats_with(&[("a", 4)], 4);
        let p = page_of(&["a", "zzz"]);
        let e = embed_page(&p, &table, &stats);
        assert!(e.empty);
        assert_eq!(e.raw, vec![0.0, 0.0]);
    }

    #[test]
    fn repeating_tokens_leaves_embedding_unchanged() {
        let table = table_from(&[("a", &[1.0, 0.5]), ("b", &[-0.5, 1.0])], "en");
        let stats = stats_with(&[("a", 1), ("b", 2)], 6);
        let single = embed_page(&page_of(&["a", "b"]), &table, &stats);
        let tripled = embed_page(&page_of(&["a", "b", "a", "b", "a", "b"]), &table, &stats);
        for (x, y) in single.raw.iter().zip(&tripled.raw) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_norm_bounded_by_max_word_norm() {
        let mut rng = SeededRng::new(17);
        for _ in 0..20 {
            let table = {
                let mut t = EmbeddingTable::new("en", 3);
                for i in 0..5 {
                    t.insert(
                        &format!("w{i}"),
                        (0..3).map(|_| rng.uniform(-2.0, 2.0)).collect(),
                    );
                }
                t
            };
            let stats = stats_with(
                &[("w0", 1), ("w1", 2), ("w2", 3), ("w3", 4), ("w4", 5)],
                16,
            );
            let toks: Vec<String> = (0..8).map(|_| format!("w{}", rng.below(5))).collect();
            let p = page_of(&toks.iter().map(|s| s.as_str()).collect::<Vec<_>>());
            let e = embed_page(&p, &table, &stats);
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let max_norm = table.vectors.values().map(|v| norm(v)).fold(0.0, f64::max);
            assert!(norm(&e.raw) <= max_norm + 1e-12);
        }
    }

    #[test]
    fn zero_projection_params_give_zero_vector() {
        let mut ps = ParamSet::new();
        let proj = PageProjection {
            weight: ps.add("w", Tensor::zeros(vec![3, 2]), true, 0.0),
            bias: ps.add("b", Tensor::zeros(vec![3]), true, 0.0),
        };
        let mut tape = Tape::new();
        let raw = tape.leaf_vec(vec![0.4, -0.9]);
        let out = proj.forward(&mut tape, &ps, raw);
        assert_eq!(tape.data(out), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn projection_output_is_bounded() {
        let mut rng = SeededRng::new(23);
        let mut ps = ParamSet::new();
        let proj = PageProjection::init(&mut ps, 4, 5, &mut rng, 0.0);
        let mut tape = Tape::new();
        let raw = tape.leaf_vec(vec![4.0, -5.0, 3.0, 0.5]);
        let out = proj.forward(&mut tape, &ps, raw);
        assert!(tape.data(out).iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn projection_gradient_passes_fd_check() {
        let mut rng = SeededRng::new(31);
        let mut ps = ParamSet::new();
        let proj = PageProjection::init(&mut ps, 3, 4, &mut rng, 0.0);
        let raw = vec![0.2, -0.6, 0.9];
        let probe: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let err = grad_check(
            |t, ps| {
                let r = t.leaf_vec(raw.clone());
                let out = proj.forward(t, ps, r);
                let p = t.leaf_vec(probe.clone());
                t.dot(p, out)
            },
            &ps,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "projection fd error {err}");
    }

    #[test]
    fn alignment_matrix_round_trips_through_disk() {
        let m = AlignmentMatrix {
            source_language: "xx".into(),
            target_language: "en".into(),
            dim: 2,
            weights: vec![1.0, 2.0, 3.0, 4.0],
            residual: 0.5,
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        m.save(f.path()).unwrap();
        let back = AlignmentMatrix::load(f.path()).unwrap();
        assert_eq!(back, m);
    }
}

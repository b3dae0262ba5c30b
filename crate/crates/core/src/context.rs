//! Mention context collection and the neural context encoders.
//!
//! A mention's context is gathered through a surface-match chain: every
//! token span whose normalized form equals the query surface or a
//! contiguous piece of it counts as an occurrence of the same entity
//! (a cheap stand-in for coreference resolution under one-link-per-entity).
//! The chain yields the sentence set and, per occurrence, left/right token
//! windows of up to [`CONTEXT_WINDOW`] tokens anchored on the mention head.
//!
//! Two encoders turn these into fixed vectors: a width-2 convolution with
//! tanh and mean pooling over all positions ([`encode_token_seqs`]), and a
//! fine-grained pathway running a forward LSTM over left windows and a
//! backward LSTM over right windows, pooled and combined by a bilinear
//! tensor layer ([`encode_fine_grained`]).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingTable;
use crate::error::Error;
use crate::kb::{normalize_surface, sentence_spans, tokenize};
use crate::tensor::{ParamId, ParamSet, SeededRng, Tape, Var};
use crate::Result;

/// Window length n for fine-grained contexts.
pub const CONTEXT_WINDOW: usize = 4;

/// On-disk query document record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawQueryDoc {
    pub doc_id: String,
    pub language: String,
    pub text: String,
    pub mentions: Vec<RawMention>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawMention {
    pub start_token: usize,
    pub end_token: usize,
    pub surface: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_title: Option<String>,
    pub query_id: String,
}

/// A tokenized query document.
#[derive(Debug, Clone)]
pub struct QueryDocument {
    pub doc_id: String,
    pub language: String,
    pub tokens: Vec<String>,
    pub sentences: Vec<(usize, usize)>,
    pub mentions: Vec<Mention>,
}

#[derive(Debug, Clone)]
pub struct Mention {
    pub start_token: usize,
    pub end_token: usize,
    pub surface: String,
    pub gold_title: Option<String>,
    pub query_id: String,
}

/// Parse a JSON-lines query file.
pub fn load_queries(path: &Path) -> Result<Vec<QueryDocument>> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut docs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawQueryDoc = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: display.clone(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let tokens = tokenize(&raw.text);
        for m in &raw.mentions {
            if m.start_token >= m.end_token || m.end_token > tokens.len() {
                return Err(Error::MalformedRecord {
                    path: display.clone(),
                    line: lineno + 1,
                    msg: format!(
                        "mention {} span {}..{} outside document of {} tokens",
                        m.query_id,
                        m.start_token,
                        m.end_token,
                        tokens.len()
                    ),
                });
            }
        }
        let sentences = sentence_spans(&tokens);
        docs.push(QueryDocument {
            doc_id: raw.doc_id,
            language: raw.language,
            sentences,
            mentions: raw
                .mentions
                .into_iter()
                .map(|m| Mention {
                    start_token: m.start_token,
                    end_token: m.end_token,
                    surface: m.surface,
                    gold_title: m.gold_title,
                    query_id: m.query_id,
                })
                .collect(),
            tokens,
        });
    }
    Ok(docs)
}

/// The gathered context for one query mention.
#[derive(Debug, Clone)]
pub struct MentionContext {
    pub mention_surface: String,
    /// Sentences touched by any chain occurrence, in document order.
    pub sentences: Vec<Vec<String>>,
    /// One window pair per occurrence; each window includes the mention
    /// head token and never crosses document boundaries.
    pub left_windows: Vec<Vec<String>>,
    pub right_windows: Vec<Vec<String>>,
}

/// Gather the chain, sentences, and window pairs for a mention.
pub fn collect_contexts(doc: &QueryDocument, mention: &Mention) -> MentionContext {
    let doc_norm: Vec<String> = doc.tokens.iter().map(|t| normalize_surface(t)).collect();
    let query_norm: Vec<String> = tokenize(&mention.surface)
        .iter()
        .map(|t| normalize_surface(t))
        .collect();

    let mut occurrences = chain_occurrences(&doc_norm, &query_norm);
    if occurrences.is_empty() {
        // A mention always matches itself.
        occurrences.push((mention.start_token, mention.end_token));
    }

    let mut sentence_ids = Vec::new();
    let mut left_windows = Vec::new();
    let mut right_windows = Vec::new();
    for &(start, end) in &occurrences {
        for (si, &(s, e)) in doc.sentences.iter().enumerate() {
            if start < e && end > s && !sentence_ids.contains(&si) {
                sentence_ids.push(si);
            }
        }
        let head = start;
        let lw_start = head.saturating_sub(CONTEXT_WINDOW - 1);
        left_windows.push(doc.tokens[lw_start..=head].to_vec());
        let rw_end = (head + CONTEXT_WINDOW).min(doc.tokens.len());
        right_windows.push(doc.tokens[head..rw_end].to_vec());
    }
    sentence_ids.sort_unstable();

    MentionContext {
        mention_surface: mention.surface.clone(),
        sentences: sentence_ids
            .into_iter()
            .map(|si| {
                let (s, e) = doc.sentences[si];
                doc.tokens[s..e].to_vec()
            })
            .collect(),
        left_windows,
        right_windows,
    }
}

/// Greedy longest-first scan for spans matching the query surface or any
/// contiguous sub-span of it. Pure-punctuation matches are skipped.
fn chain_occurrences(doc_norm: &[String], query_norm: &[String]) -> Vec<(usize, usize)> {
    let q = query_norm.len();
    if q == 0 {
        return Vec::new();
    }
    let matches_subspan = |span: &[String]| -> bool {
        query_norm
            .windows(span.len())
            .any(|w| w == span)
    };
    let has_word = |span: &[String]| span.iter().any(|t| t.chars().any(|c| c.is_alphanumeric()));

    let mut spans = Vec::new();
    let mut i = 0;
    while i < doc_norm.len() {
        let max_len = q.min(doc_norm.len() - i);
        let mut matched = 0;
        for len in (1..=max_len).rev() {
            let span = &doc_norm[i..i + len];
            if has_word(span) && matches_subspan(span) {
                matched = len;
                break;
            }
        }
        if matched > 0 {
            spans.push((i, i + matched));
            i += matched;
        } else {
            i += 1;
        }
    }
    spans
}

/// Pooling strategy for encoder outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

fn pool(tape: &mut Tape, parts: &[Var], pooling: Pooling) -> Var {
    match pooling {
        Pooling::Mean => tape.mean_stack(parts),
        Pooling::Max => tape.max_stack(parts),
    }
}

/// Embedding lookups as tape leaves, cached per distinct word. When
/// `track` is set, in-vocabulary leaves are recorded so a trainer can push
/// gradients back into the table.
pub struct WordVars<'a> {
    table: &'a EmbeddingTable,
    track: bool,
    cache: HashMap<String, Var>,
    tracked: Vec<(String, Var)>,
}

impl<'a> WordVars<'a> {
    pub fn new(table: &'a EmbeddingTable, track: bool) -> Self {
        WordVars {
            table,
            track,
            cache: HashMap::new(),
            tracked: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.table.dim
    }

    pub fn var(&mut self, tape: &mut Tape, word: &str) -> Var {
        if let Some(&v) = self.cache.get(word) {
            return v;
        }
        let in_vocab = self.table.lookup(word).is_some();
        let v = tape.leaf_vec(self.table.vector_or_zero(word));
        self.cache.insert(word.to_string(), v);
        if self.track && in_vocab {
            self.tracked.push((word.to_string(), v));
        }
        v
    }

    /// Words whose gradients should update the table after backward.
    pub fn tracked(&self) -> &[(String, Var)] {
        &self.tracked
    }
}

/// Convolutional encoder parameters: `out` filters of width `width` over
/// `dim`-dimensional word vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CnnParams {
    pub filters: ParamId,
    pub bias: ParamId,
    pub width: usize,
    pub out: usize,
}

impl CnnParams {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        dim: usize,
        width: usize,
        out: usize,
        rng: &mut SeededRng,
        l2: f64,
    ) -> Self {
        CnnParams {
            filters: params.add_matrix(format!("{prefix}.filters"), out, dim * width, rng, l2),
            bias: params.add_bias(format!("{prefix}.bias"), out, l2),
            width,
            out,
        }
    }
}

/// Convolve, tanh, and pool over every position of every sequence.
/// Sequences shorter than the filter width are padded with one zero vector.
pub fn encode_token_seqs(
    tape: &mut Tape,
    params: &ParamSet,
    cnn: &CnnParams,
    words: &mut WordVars,
    seqs: &[&[String]],
    pooling: Pooling,
) -> Var {
    assert!(!seqs.is_empty(), "encode_token_seqs needs at least one sequence");
    let v = tape.param(params, cnn.filters);
    let b = tape.param(params, cnn.bias);
    let dim = words.dim();

    let mut positions = Vec::new();
    for seq in seqs {
        let mut vecs: Vec<Var> = seq.iter().map(|t| words.var(tape, t)).collect();
        while vecs.len() < cnn.width {
            vecs.push(tape.leaf_vec(vec![0.0; dim]));
        }
        for t in 0..=vecs.len() - cnn.width {
            let window = tape.concat(&vecs[t..t + cnn.width]);
            let z = tape.matvec(v, window);
            let z = tape.add(z, b);
            positions.push(tape.tanh(z));
        }
    }
    pool(tape, &positions, pooling)
}

/// Encode the tokens before a page's first-paragraph boundary, split into
/// sentences, with the page-side CNN. Same machinery as
/// [`encode_token_seqs`]; the parameter set is the page encoder's own.
pub fn encode_first_paragraph(
    tape: &mut Tape,
    params: &ParamSet,
    cnn: &CnnParams,
    words: &mut WordVars,
    page: &crate::kb::WikiPage,
    pooling: Pooling,
) -> Var {
    let para = &page.tokens[..page.first_paragraph_end];
    let spans = sentence_spans(para);
    let seqs: Vec<&[String]> = spans.iter().map(|&(s, e)| &para[s..e]).collect();
    encode_token_seqs(tape, params, cnn, words, &seqs, pooling)
}

/// One LSTM direction: four gates with input, recurrent, and bias terms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmParams {
    pub hidden: usize,
    gates: [(ParamId, ParamId, ParamId); 4], // (W, U, b) for i, f, o, g
}

impl LstmParams {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut SeededRng,
        l2: f64,
    ) -> Self {
        let gate = |name: &str, params: &mut ParamSet, rng: &mut SeededRng| {
            (
                params.add_matrix(format!("{prefix}.w_{name}"), hidden, input, rng, l2),
                params.add_matrix(format!("{prefix}.u_{name}"), hidden, hidden, rng, l2),
                params.add_bias(format!("{prefix}.b_{name}"), hidden, l2),
            )
        };
        LstmParams {
            hidden,
            gates: [
                gate("i", params, rng),
                gate("f", params, rng),
                gate("o", params, rng),
                gate("g", params, rng),
            ],
        }
    }

    /// Hidden states for each input step.
    pub fn run(&self, tape: &mut Tape, params: &ParamSet, inputs: &[Var]) -> Vec<Var> {
        let weights: Vec<(Var, Var, Var)> = self
            .gates
            .iter()
            .map(|&(w, u, b)| (tape.param(params, w), tape.param(params, u), tape.param(params, b)))
            .collect();
        let mut h = tape.leaf_vec(vec![0.0; self.hidden]);
        let mut c = tape.leaf_vec(vec![0.0; self.hidden]);
        let mut states = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let pre = |tape: &mut Tape, gi: usize| {
                let (w, u, b) = weights[gi];
                let wx = tape.matvec(w, x);
                let uh = tape.matvec(u, h);
                let s = tape.add(wx, uh);
                tape.add(s, b)
            };
            let zi = pre(tape, 0);
            let i = tape.sigmoid(zi);
            let zf = pre(tape, 1);
            let f = tape.sigmoid(zf);
            let zo = pre(tape, 2);
            let o = tape.sigmoid(zo);
            let zg = pre(tape, 3);
            let g = tape.tanh(zg);
            let fc = tape.mul(f, c);
            let ig = tape.mul(i, g);
            c = tape.add(fc, ig);
            let tc = tape.tanh(c);
            h = tape.mul(o, tc);
            states.push(h);
        }
        states
    }
}

/// Fine-grained pathway parameters: the two LSTMs, the bilinear tensor
/// slices, and the output layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FineGrainedParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
    pub slices: Vec<ParamId>,
    pub out_weight: ParamId,
    pub out_bias: ParamId,
}

impl FineGrainedParams {
    pub fn init(
        params: &mut ParamSet,
        dim: usize,
        hidden: usize,
        slices: usize,
        out: usize,
        rng: &mut SeededRng,
        l2: f64,
    ) -> Self {
        let forward = LstmParams::init(params, "fine.fwd", dim, hidden, rng, l2);
        let backward = LstmParams::init(params, "fine.bwd", dim, hidden, rng, l2);
        let slice_ids = (0..slices)
            .map(|k| params.add_matrix(format!("fine.ntn.w{k}"), 2 * hidden, 2 * hidden, rng, l2))
            .collect();
        FineGrainedParams {
            forward,
            backward,
            slices: slice_ids,
            out_weight: params.add_matrix("fine.out.weight", out, slices, rng, l2),
            out_bias: params.add_bias("fine.out.bias", out, l2),
        }
    }
}

/// Multi-slice bilinear combination: `u_k = f(v^T W_k v)` for `v = [l; r]`
/// with sigmoid `f`.
pub fn ntn_combine(
    tape: &mut Tape,
    params: &ParamSet,
    slices: &[ParamId],
    left: Var,
    right: Var,
) -> Var {
    let v = tape.concat(&[left, right]);
    let scores: Vec<Var> = slices
        .iter()
        .map(|&w| {
            let wv = tape.param(params, w);
            let wvv = tape.matvec(wv, v);
            tape.dot(v, wvv)
        })
        .collect();
    let stacked = tape.concat(&scores);
    tape.sigmoid(stacked)
}

/// Run the fine-grained pathway over a mention's window pairs.
///
/// Per occurrence: forward LSTM over the left window and backward LSTM
/// over the reversed right window, each pooled over time steps; both sides
/// pooled across occurrences; combined by the tensor layer and mapped
/// through a sigmoid output layer.
pub fn encode_fine_grained(
    tape: &mut Tape,
    params: &ParamSet,
    fine: &FineGrainedParams,
    words: &mut WordVars,
    ctx: &MentionContext,
    pooling: Pooling,
) -> Var {
    assert!(
        !ctx.left_windows.is_empty() && ctx.left_windows.len() == ctx.right_windows.len(),
        "fine-grained encoding needs matching window pairs, got {} left / {} right",
        ctx.left_windows.len(),
        ctx.right_windows.len()
    );
    let hidden = fine.forward.hidden;

    let side = |tape: &mut Tape,
                words: &mut WordVars,
                lstm: &LstmParams,
                windows: &[Vec<String>],
                reverse: bool| {
        let per_occurrence: Vec<Var> = windows
            .iter()
            .map(|w| {
                let mut vars: Vec<Var> = w.iter().map(|t| words.var(tape, t)).collect();
                if reverse {
                    vars.reverse();
                }
                if vars.is_empty() {
                    return tape.leaf_vec(vec![0.0; hidden]);
                }
                let states = lstm.run(tape, params, &vars);
                pool(tape, &states, pooling)
            })
            .collect();
        pool(tape, &per_occurrence, pooling)
    };

    let left = side(tape, words, &fine.forward, &ctx.left_windows, false);
    let right = side(tape, words, &fine.backward, &ctx.right_windows, true);
    let ntn = ntn_combine(tape, params, &fine.slices, left, right);
    let w = tape.param(params, fine.out_weight);
    let b = tape.param(params, fine.out_bias);
    let z = tape.matvec(w, ntn);
    let z = tape.add(z, b);
    tape.sigmoid(z)
}

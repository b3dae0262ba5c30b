//! The feature abstraction layer: everything the classifier head sees.
//!
//! For one (mention, candidate) pair the layer assembles, in fixed order:
//!
//! 1. RBF-binned cosines between context encodings and page vectors
//!    (the multi-perspective binning layer, [`mpbl`]);
//! 2. within-language features: title-word overlap, outlink presence,
//!    the anchor prior, and an exact-title-match flag;
//! 3. the lexical decomposition/composition vector ([`ldc`]): per-word
//!    best-cosine matching, similar/dissimilar split, two-channel CNN
//!    with max pooling;
//! 4. multi-perspective weighted cosines ([`mpcm`]).
//!
//! Ablation flags replace a group with zeros without changing the vector
//! length, so one trained head shape serves every configuration.

use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingTable;
use crate::kb::{normalize_surface, tokenize};
use crate::tensor::{ParamId, ParamSet, SeededRng, Tape, Var};

/// Fixed Gaussian bins over [-1, 1]; the downstream head learns which
/// regions of the similarity scale matter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MpblParams {
    pub centers: Vec<f64>,
    pub sigma: f64,
}

impl MpblParams {
    /// `bins` centers uniformly spaced in [-1, 1], sigma defaulting to the
    /// center spacing. Centers are exactly symmetric around zero.
    pub fn new(bins: usize) -> Self {
        assert!(bins >= 2, "mpbl needs at least 2 bins, got {bins}");
        let spacing = 2.0 / (bins - 1) as f64;
        let mut centers: Vec<f64> = (0..bins).map(|j| -1.0 + spacing * j as f64).collect();
        for j in 0..bins / 2 {
            centers[j] = -centers[bins - 1 - j];
        }
        MpblParams {
            centers,
            sigma: spacing,
        }
    }
}

/// Expand a scalar similarity into smooth bin activations.
pub fn mpbl(tape: &mut Tape, x: Var, params: &MpblParams) -> Var {
    tape.rbf_expand(x, &params.centers, params.sigma)
}

/// Trainable per-dimension reweightings for cosine similarity, one row per
/// perspective. Rows are clamped non-negative at use.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MpcmParams {
    pub rows: Vec<ParamId>,
}

impl MpcmParams {
    pub fn init(
        params: &mut ParamSet,
        perspectives: usize,
        dim: usize,
        rng: &mut SeededRng,
        l2: f64,
    ) -> Self {
        // Initialized around 1 so early training starts near plain cosine.
        let rows = (0..perspectives)
            .map(|k| {
                let data: Vec<f64> = (0..dim).map(|_| rng.uniform(0.5, 1.5)).collect();
                params.add(
                    format!("mpcm.w{k}"),
                    crate::tensor::Tensor::vector(data),
                    true,
                    l2,
                )
            })
            .collect();
        MpcmParams { rows }
    }

    pub fn perspectives(&self) -> usize {
        self.rows.len()
    }
}

/// `u_k = cosine(w_k o v1, w_k o v2)` per perspective.
pub fn mpcm(tape: &mut Tape, params: &ParamSet, mp: &MpcmParams, v1: Var, v2: Var) -> Var {
    let scores: Vec<Var> = mp
        .rows
        .iter()
        .map(|&row| {
            let w = tape.param(params, row);
            let w = tape.clamp(w, 0.0, f64::INFINITY);
            let a = tape.mul(w, v1);
            let b = tape.mul(w, v2);
            tape.cosine(a, b)
        })
        .collect();
    tape.concat(&scores)
}

/// Which decomposition splits a word vector into its similar/dissimilar
/// components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LdcDecomposition {
    /// `(alpha s, (1 - alpha) s)`
    #[default]
    Linear,
    /// `(alpha s, sqrt(1 - alpha^2) s)`
    Sqrt,
}

/// Shared two-channel composition CNN: `filters_per_width` filters at each
/// width in {1, 2} over stacked (similar, dissimilar) channels, applied to
/// both sides and max-pooled. Output length is 4 x filters_per_width.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LdcParams {
    pub filters_per_width: usize,
    pub width1: (ParamId, ParamId),
    pub width2: (ParamId, ParamId),
    pub decomposition: LdcDecomposition,
}

impl LdcParams {
    pub fn init(
        params: &mut ParamSet,
        dim: usize,
        filters_per_width: usize,
        decomposition: LdcDecomposition,
        rng: &mut SeededRng,
        l2: f64,
    ) -> Self {
        let bank = |params: &mut ParamSet, rng: &mut SeededRng, w: usize| {
            (
                params.add_matrix(
                    format!("ldc.w{w}.filters"),
                    filters_per_width,
                    2 * w * dim,
                    rng,
                    l2,
                ),
                params.add_bias(format!("ldc.w{w}.bias"), filters_per_width, l2),
            )
        };
        LdcParams {
            filters_per_width,
            width1: bank(params, rng, 1),
            width2: bank(params, rng, 2),
            decomposition,
        }
    }

    pub fn out_len(&self) -> usize {
        4 * self.filters_per_width
    }
}

/// Lexical decomposition and composition between source-context tokens and
/// the candidate's paragraph tokens. The two sides may live in different
/// (aligned) tables. Either side empty after OOV filtering yields the zero
/// vector.
pub fn ldc(
    tape: &mut Tape,
    params: &ParamSet,
    lp: &LdcParams,
    source_table: &EmbeddingTable,
    source: &[String],
    target_table: &EmbeddingTable,
    target: &[String],
) -> Var {
    let s_vecs: Vec<&[f64]> = source.iter().filter_map(|t| source_table.lookup(t)).collect();
    let t_vecs: Vec<&[f64]> = target.iter().filter_map(|t| target_table.lookup(t)).collect();
    if s_vecs.is_empty() || t_vecs.is_empty() {
        log::debug!("ldc: empty side after vocabulary filtering");
        return tape.leaf_vec(vec![0.0; lp.out_len()]);
    }

    let s_channels = decompose_side(tape, lp, &s_vecs, &t_vecs);
    let t_channels = decompose_side(tape, lp, &t_vecs, &s_vecs);
    let s_out = compose_side(tape, params, lp, &s_channels);
    let t_out = compose_side(tape, params, lp, &t_channels);
    tape.concat(&[s_out, t_out])
}

/// Per word: find its best-cosine match on the other side, then split into
/// (similar, dissimilar) components.
fn decompose_side(
    tape: &mut Tape,
    lp: &LdcParams,
    side: &[&[f64]],
    other: &[&[f64]],
) -> Vec<(Var, Var)> {
    side.iter()
        .map(|vec| {
            let best = other
                .iter()
                .map(|o| raw_cosine(vec, o))
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .unwrap();
            let s = tape.leaf_vec(vec.to_vec());
            let m = tape.leaf_vec(other[best].to_vec());
            let alpha = tape.cosine(s, m);
            let alpha = tape.clamp(alpha, 0.0, 1.0);
            let plus = tape.vmul_scalar(s, alpha);
            let minus = match lp.decomposition {
                LdcDecomposition::Linear => {
                    let rest = tape.scale_add(alpha, -1.0, 1.0);
                    tape.vmul_scalar(s, rest)
                }
                LdcDecomposition::Sqrt => {
                    let sq = tape.mul(alpha, alpha);
                    let rest = tape.scale_add(sq, -1.0, 1.0);
                    let root = tape.sqrt_clamped(rest, 1e-12);
                    tape.vmul_scalar(s, root)
                }
            };
            (plus, minus)
        })
        .collect()
}

/// Two-channel convolution at widths 1 and 2 with tanh, max-pooled over
/// positions.
fn compose_side(
    tape: &mut Tape,
    params: &ParamSet,
    lp: &LdcParams,
    channels: &[(Var, Var)],
) -> Var {
    let run_width = |tape: &mut Tape, width: usize, bank: (ParamId, ParamId)| {
        let filters = tape.param(params, bank.0);
        let bias = tape.param(params, bank.1);
        let mut positions = Vec::new();
        if channels.len() >= width {
            for t in 0..=channels.len() - width {
                let mut parts = Vec::with_capacity(2 * width);
                for (p, _) in &channels[t..t + width] {
                    parts.push(*p);
                }
                for (_, m) in &channels[t..t + width] {
                    parts.push(*m);
                }
                let window = tape.concat(&parts);
                let z = tape.matvec(filters, window);
                let z = tape.add(z, bias);
                positions.push(tape.tanh(z));
            }
        } else {
            // One word against a width-2 filter: pad the missing slot with
            // zero channels.
            let dim = tape.value(channels[0].0).shape[0];
            let zero = tape.leaf_vec(vec![0.0; dim]);
            let mut parts = vec![channels[0].0, zero, channels[0].1, zero];
            parts.truncate(2 * width);
            let window = tape.concat(&parts);
            let z = tape.matvec(filters, window);
            let z = tape.add(z, bias);
            positions.push(tape.tanh(z));
        }
        tape.max_stack(&positions)
    };
    let w1 = run_width(tape, 1, lp.width1);
    let w2 = run_width(tape, 2, lp.width2);
    tape.concat(&[w1, w2])
}

fn raw_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// The three encoder/page cosines fed to the binning layer.
pub fn context_link_cosines(
    tape: &mut Tape,
    ctx_sent: Var,
    ctx_fine: Var,
    para: Var,
    page_projected: Var,
) -> (Var, Var, Var) {
    let cos1 = tape.cosine(ctx_sent, page_projected);
    let cos2 = tape.cosine(ctx_sent, para);
    let cos3 = tape.cosine(ctx_fine, page_projected);
    (cos1, cos2, cos3)
}

/// Within-language features for one (mention, candidate) pair:
/// `[title overlap, outlink presence, prior, exact match]`, all in [0, 1].
pub fn within_language_features(
    mention_surface: &str,
    doc_tokens: &[String],
    candidate_title: &str,
    candidate_outlinks: &[String],
    prior: f64,
) -> [f64; 4] {
    let mention_toks = word_tokens(mention_surface);
    let title_toks = word_tokens(&candidate_title.replace('_', " "));
    let overlap = if mention_toks.is_empty() {
        0.0
    } else {
        let hits = mention_toks.iter().filter(|t| title_toks.contains(t)).count();
        hits as f64 / mention_toks.len() as f64
    };

    let doc_norm: Vec<String> = doc_tokens.iter().map(|t| normalize_surface(t)).collect();
    let outlink_hits = candidate_outlinks
        .iter()
        .filter(|l| {
            let name = word_tokens(&l.replace('_', " "));
            !name.is_empty() && contains_subsequence(&doc_norm, &name)
        })
        .take(10)
        .count();
    let outlinks = outlink_hits as f64 / 10.0;

    let exact = normalize_surface(&candidate_title.replace('_', " "))
        == normalize_surface(mention_surface);

    [overlap, outlinks, prior, if exact { 1.0 } else { 0.0 }]
}

fn word_tokens(s: &str) -> Vec<String> {
    tokenize(s)
        .iter()
        .map(|t| normalize_surface(t))
        .filter(|t| t.chars().any(|c| c.is_alphanumeric()))
        .collect()
}

fn contains_subsequence(haystack: &[String], needle: &[String]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// Named feature groups that can be ablated independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub mpbl: bool,
    pub ctx_lstm: bool,
    pub within_lang: bool,
    pub ldc: bool,
    pub mpcm: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            mpbl: true,
            ctx_lstm: true,
            within_lang: true,
            ldc: true,
            mpcm: true,
        }
    }
}

/// Widths of each group in assembly order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub mpbl_bins: usize,
    pub within: usize,
    pub ldc: usize,
    pub mpcm: usize,
}

impl FeatureLayout {
    pub fn total(&self) -> usize {
        3 * self.mpbl_bins + self.within + self.ldc + self.mpcm
    }
}

/// The computed feature parts for one (mention, candidate) pair. `within`
/// already has the layout's within-group width (the raw cosines are folded
/// in there when configured).
pub struct FeatureParts {
    pub cos_sent_page: Var,
    pub cos_sent_para: Var,
    pub cos_fine_page: Var,
    pub within: Var,
    pub ldc: Var,
    pub mpcm: Var,
}

/// Fixed-order concatenation with ablation masking; the result length is
/// [`FeatureLayout::total`] regardless of flags.
pub fn assemble_features(
    tape: &mut Tape,
    parts: FeatureParts,
    bins: &MpblParams,
    layout: FeatureLayout,
    flags: AblationFlags,
) -> Var {
    let zeros = |tape: &mut Tape, n: usize| tape.leaf_vec(vec![0.0; n]);

    let binned = |tape: &mut Tape, cos: Var, enabled: bool| {
        if enabled {
            mpbl(tape, cos, bins)
        } else {
            zeros(tape, layout.mpbl_bins)
        }
    };
    let b1 = binned(tape, parts.cos_sent_page, flags.mpbl);
    let b2 = binned(tape, parts.cos_sent_para, flags.mpbl);
    let b3 = binned(tape, parts.cos_fine_page, flags.mpbl && flags.ctx_lstm);

    let within = if flags.within_lang {
        assert_eq!(
            tape.value(parts.within).shape[0],
            layout.within,
            "within group width {} does not match layout {}",
            tape.value(parts.within).shape[0],
            layout.within
        );
        parts.within
    } else {
        zeros(tape, layout.within)
    };
    let ldc_v = if flags.ldc {
        assert_eq!(
            tape.value(parts.ldc).shape[0],
            layout.ldc,
            "ldc group width {} does not match layout {}",
            tape.value(parts.ldc).shape[0],
            layout.ldc
        );
        parts.ldc
    } else {
        zeros(tape, layout.ldc)
    };
    let mpcm_v = if flags.mpcm {
        assert_eq!(
            tape.value(parts.mpcm).shape[0],
            layout.mpcm,
            "mpcm group width {} does not match layout {}",
            tape.value(parts.mpcm).shape[0],
            layout.mpcm
        );
        parts.mpcm
    } else {
        zeros(tape, layout.mpcm)
    };

    let out = tape.concat(&[b1, b2, b3, within, ldc_v, mpcm_v]);
    debug_assert_eq!(tape.value(out).shape[0], layout.total());
    out
}

//! The consistency classifier: training-set construction, the classifier
//! head, minibatch SGD training, and decode with NIL handling.
//!
//! A (mention, document, candidate) triple flows through the context
//! encoders and the feature layer into a two-layer head whose softmax
//! gives the probability that the pair is a correct link. Training pairs
//! come from fast-match candidates (the gold title as the positive, the
//! top-ranked non-gold candidates as negatives, capped by a ratio).
//! Decoding scores each fast-match candidate and keeps the argmax unless
//! it falls below the NIL threshold. Foreign-language documents go through
//! the identical path with an aligned embedding table and the merged
//! index; the model itself never changes at decode time.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Hyperparams, RunConfig};
use crate::context::{
    collect_contexts, encode_fine_grained, encode_first_paragraph, encode_token_seqs, CnnParams,
    FineGrainedParams, Mention, MentionContext, QueryDocument, WordVars,
};
use crate::embed::{embed_page, EmbeddingTable, PageProjection};
use crate::error::Error;
use crate::features::{
    assemble_features, context_link_cosines, ldc, mpcm, within_language_features, AblationFlags,
    FeatureLayout, FeatureParts, LdcParams, MpblParams, MpcmParams,
};
use crate::kb::{AnchorIndex, CorpusStats, WikiPage};
use crate::tensor::{sgd_step, ParamId, ParamSet, SeededRng, Tape, Tensor, Var};
use crate::Result;

/// Everything a trained model is decoded against: the page set, indices,
/// and embedding tables. Foreign tables must already be aligned.
pub struct Resources {
    pub pages: HashMap<String, WikiPage>,
    pub stats: CorpusStats,
    pub english_index: AnchorIndex,
    pub merged_indices: HashMap<String, AnchorIndex>,
    pub english_table: EmbeddingTable,
    pub foreign_tables: HashMap<String, EmbeddingTable>,
    /// Raw IDF-weighted page vectors, frozen for the lifetime of the run.
    pub page_vectors: HashMap<String, Vec<f64>>,
}

impl Resources {
    /// Bundle English-side data and precompute the frozen page vectors.
    pub fn new(
        pages: Vec<WikiPage>,
        stats: CorpusStats,
        english_index: AnchorIndex,
        english_table: EmbeddingTable,
    ) -> Resources {
        let mut page_map = HashMap::new();
        let mut page_vectors = HashMap::new();
        for page in pages {
            if page.language == "en" {
                let e = embed_page(&page, &english_table, &stats);
                page_vectors.insert(page.title.clone(), e.raw);
                page_map.insert(page.title.clone(), page);
            }
        }
        Resources {
            pages: page_map,
            stats,
            english_index,
            merged_indices: HashMap::new(),
            english_table,
            foreign_tables: HashMap::new(),
            page_vectors,
        }
    }

    pub fn add_merged_index(&mut self, index: AnchorIndex) {
        self.merged_indices.insert(index.language.clone(), index);
    }

    pub fn add_foreign_table(&mut self, table: EmbeddingTable) -> Result<()> {
        if !table.aligned {
            return Err(Error::NotAligned(table.language.clone()));
        }
        self.foreign_tables.insert(table.language.clone(), table);
        Ok(())
    }

    pub fn table_for(&self, language: &str) -> Result<&EmbeddingTable> {
        if language == "en" {
            return Ok(&self.english_table);
        }
        self.foreign_tables
            .get(language)
            .filter(|t| t.aligned)
            .ok_or_else(|| Error::NotAligned(language.to_string()))
    }

    /// Candidates for a surface: the target-language merged index first,
    /// falling back to the English index when it comes up empty.
    pub fn candidates(&self, language: &str, surface: &str, k: usize) -> Vec<(String, u64)> {
        if language != "en" {
            if let Some(index) = self.merged_indices.get(language) {
                let hits = index.fast_match(surface, k);
                if !hits.is_empty() {
                    return hits;
                }
            }
        }
        self.english_index.fast_match(surface, k)
    }

    /// Prior from whichever index produced the candidate list.
    pub fn prior(&self, language: &str, surface: &str, title: &str) -> f64 {
        if language != "en" {
            if let Some(index) = self.merged_indices.get(language) {
                if !index.fast_match(surface, 1).is_empty() {
                    return index.prior(surface, title);
                }
            }
        }
        self.english_index.prior(surface, title)
    }

    /// FNV-1a fingerprints of the loaded embedding tables.
    pub fn table_hashes(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        out.insert("en".to_string(), table_hash(&self.english_table));
        for (lang, t) in &self.foreign_tables {
            out.insert(lang.clone(), table_hash(t));
        }
        out
    }
}

fn table_hash(table: &EmbeddingTable) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    let mut words: Vec<&String> = table.vectors.keys().collect();
    words.sort();
    for w in words {
        eat(w.as_bytes());
        for v in &table.vectors[w] {
            eat(&v.to_le_bytes());
        }
    }
    h
}

/// All trainable state plus the configuration snapshot it was built with.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    #[serde(skip)]
    pub params: ParamSet,
    pub sent_cnn: CnnParams,
    pub para_cnn: CnnParams,
    pub fine: FineGrainedParams,
    pub projection: PageProjection,
    pub bins: MpblParams,
    pub mpcm: MpcmParams,
    pub ldc: LdcParams,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
    pub out_weight: ParamId,
    pub out_bias: ParamId,
    pub hyper: Hyperparams,
    pub ablation: AblationFlags,
    pub layout: FeatureLayout,
    pub embedding_dim: usize,
    /// Embedding-table fingerprints recorded at training time.
    pub provenance: BTreeMap<String, u64>,
}

impl Model {
    /// Feature widths induced by the hyperparameters.
    pub fn layout_for(hyper: &Hyperparams) -> FeatureLayout {
        FeatureLayout {
            mpbl_bins: hyper.mpbl_bins,
            within: 4 + if hyper.include_raw_cosines { 3 } else { 0 },
            ldc: 4 * hyper.ldc_filters_per_width,
            mpcm: hyper.mpcm_perspectives,
        }
    }

    /// Fresh model with seeded initialization.
    pub fn init(
        hyper: &Hyperparams,
        ablation: AblationFlags,
        embedding_dim: usize,
        provenance: BTreeMap<String, u64>,
        rng: &mut SeededRng,
    ) -> Model {
        let mut params = ParamSet::new();
        let l2 = hyper.l2;
        let sent_cnn = CnnParams::init(
            &mut params,
            "sent_cnn",
            embedding_dim,
            hyper.cnn_width,
            hyper.context_dim,
            rng,
            l2,
        );
        let para_cnn = CnnParams::init(
            &mut params,
            "para_cnn",
            embedding_dim,
            hyper.cnn_width,
            hyper.context_dim,
            rng,
            l2,
        );
        let fine = FineGrainedParams::init(
            &mut params,
            embedding_dim,
            hyper.lstm_hidden,
            hyper.ntn_slices,
            hyper.fine_out,
            rng,
            l2,
        );
        let projection =
            PageProjection::init(&mut params, embedding_dim, hyper.context_dim, rng, l2);
        let bins = MpblParams::new(hyper.mpbl_bins);
        let mpcm = MpcmParams::init(&mut params, hyper.mpcm_perspectives, hyper.context_dim, rng, l2);
        let ldc = LdcParams::init(
            &mut params,
            embedding_dim,
            hyper.ldc_filters_per_width,
            hyper.ldc_decomposition,
            rng,
            l2,
        );
        let layout = Self::layout_for(hyper);
        let head_weight = params.add_matrix("head.weight", hyper.hidden, layout.total(), rng, l2);
        let head_bias = params.add_bias("head.bias", hyper.hidden, l2);
        let out_weight = params.add_matrix("out.weight", 2, hyper.hidden, rng, l2);
        let out_bias = params.add_bias("out.bias", 2, l2);

        Model {
            params,
            sent_cnn,
            para_cnn,
            fine,
            projection,
            bins,
            mpcm,
            ldc,
            head_weight,
            head_bias,
            out_weight,
            out_bias,
            hyper: hyper.clone(),
            ablation,
            layout,
            embedding_dim,
            provenance,
        }
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    // ── Checkpoint IO ────────────────────────────────────────────────

    const MAGIC: &'static [u8; 4] = b"XELC";
    const VERSION: u32 = 1;

    pub fn save(&self, path: &Path) -> Result<()> {
        let display = path.display().to_string();
        let mut f = File::create(path).map_err(|e| Error::io(&display, e))?;
        let io = |e| Error::io(&display, e);
        f.write_all(Self::MAGIC).map_err(io)?;
        f.write_all(&Self::VERSION.to_le_bytes()).map_err(io)?;
        let meta = serde_json::to_vec(self).expect("model metadata serializes");
        f.write_all(&(meta.len() as u64).to_le_bytes()).map_err(io)?;
        f.write_all(&meta).map_err(io)?;
        f.write_all(&(self.params.params.len() as u32).to_le_bytes())
            .map_err(io)?;
        for p in &self.params.params {
            write_str(&mut f, &p.name).map_err(io)?;
            f.write_all(&(p.value.shape.len() as u32).to_le_bytes()).map_err(io)?;
            for &d in &p.value.shape {
                f.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
            }
            for v in &p.value.data {
                f.write_all(&v.to_le_bytes()).map_err(io)?;
            }
            f.write_all(&[u8::from(p.trainable)]).map_err(io)?;
            f.write_all(&p.l2.to_le_bytes()).map_err(io)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let display = path.display().to_string();
        let mut f = File::open(path).map_err(|e| Error::io(&display, e))?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic).map_err(|e| Error::io(&display, e))?;
        if &magic != Self::MAGIC {
            return Err(Error::BadFormat {
                path: display,
                msg: "bad checkpoint magic".to_string(),
            });
        }
        let version = read_u32(&mut f, &display)?;
        if version != Self::VERSION {
            return Err(Error::BadFormat {
                path: display,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let meta_len = read_u64(&mut f, &display)? as usize;
        let mut meta = vec![0u8; meta_len];
        f.read_exact(&mut meta).map_err(|e| Error::io(&display, e))?;
        let mut model: Model = serde_json::from_slice(&meta).map_err(|e| Error::BadFormat {
            path: display.clone(),
            msg: format!("metadata: {e}"),
        })?;
        let n = read_u32(&mut f, &display)? as usize;
        let mut params = ParamSet::new();
        for _ in 0..n {
            let name = read_str(&mut f, &display)?;
            let ndim = read_u32(&mut f, &display)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut f, &display)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(read_f64(&mut f, &display)?);
            }
            let mut flag = [0u8; 1];
            f.read_exact(&mut flag).map_err(|e| Error::io(&display, e))?;
            let l2 = read_f64(&mut f, &display)?;
            params.add(name, Tensor::new(shape, data), flag[0] != 0, l2);
        }
        model.params = params;
        Ok(model)
    }
}

/// Per-candidate data resolved from the knowledge base.
pub struct CandidateData<'a> {
    pub title: &'a str,
    pub prior: f64,
    pub page: &'a WikiPage,
    pub page_vector: &'a [f64],
}

/// Forward one (mention, candidate) pair to its 2-class softmax.
///
/// Mention-side text is embedded with `words` (the document language,
/// aligned into English space for foreign documents); candidate-page text
/// always goes through `page_words` over the English table.
#[allow(clippy::too_many_arguments)]
pub fn forward_pair(
    tape: &mut Tape,
    model: &Model,
    words: &mut WordVars,
    page_words: &mut WordVars,
    mention_table: &EmbeddingTable,
    english_table: &EmbeddingTable,
    ctx: &MentionContext,
    doc_tokens: &[String],
    cand: &CandidateData,
    train: bool,
    rng: &mut SeededRng,
) -> Var {
    let flags = model.ablation;
    let pooling = model.hyper.pooling;

    let sent_refs: Vec<&[String]> = ctx.sentences.iter().map(|s| s.as_slice()).collect();
    let ctx_sent = encode_token_seqs(tape, &model.params, &model.sent_cnn, words, &sent_refs, pooling);

    let para_tokens = &cand.page.tokens[..cand.page.first_paragraph_end];
    let para_vec =
        encode_first_paragraph(tape, &model.params, &model.para_cnn, page_words, cand.page, pooling);

    let raw = tape.leaf_vec(cand.page_vector.to_vec());
    let page_proj = model.projection.forward(tape, &model.params, raw);

    let ctx_fine = if flags.ctx_lstm {
        encode_fine_grained(tape, &model.params, &model.fine, words, ctx, pooling)
    } else {
        tape.leaf_vec(vec![0.0; model.hyper.fine_out])
    };
    // Page vectors and context encodings live in different widths only if
    // misconfigured; the cosine op rejects that with a shape diagnostic.
    let (cos1, cos2, cos3) = context_link_cosines(tape, ctx_sent, ctx_fine, para_vec, page_proj);

    let wl = within_language_features(
        &ctx.mention_surface,
        doc_tokens,
        cand.title,
        &cand.page.outlinks,
        cand.prior,
    );
    let within = if model.hyper.include_raw_cosines {
        let base = tape.leaf_vec(wl.to_vec());
        tape.concat(&[base, cos1, cos2, cos3])
    } else {
        tape.leaf_vec(wl.to_vec())
    };

    let ldc_v = if flags.ldc {
        let source: Vec<String> = ctx.sentences.iter().flatten().cloned().collect();
        ldc(
            tape,
            &model.params,
            &model.ldc,
            mention_table,
            &source,
            english_table,
            para_tokens,
        )
    } else {
        tape.leaf_vec(vec![0.0; model.layout.ldc])
    };
    let mpcm_v = if flags.mpcm {
        mpcm(tape, &model.params, &model.mpcm, ctx_sent, page_proj)
    } else {
        tape.leaf_vec(vec![0.0; model.layout.mpcm])
    };

    let features = assemble_features(
        tape,
        FeatureParts {
            cos_sent_page: cos1,
            cos_sent_para: cos2,
            cos_fine_page: cos3,
            within,
            ldc: ldc_v,
            mpcm: mpcm_v,
        },
        &model.bins,
        model.layout,
        flags,
    );
    head_forward(tape, model, features, train, rng)
}

/// The classifier head: `softmax(W_0 sigmoid(W_h S + b_h) + b_0)`, with
/// dropout on the hidden layer at train time.
pub fn head_forward(tape: &mut Tape, model: &Model, features: Var, train: bool, rng: &mut SeededRng) -> Var {
    let wh = tape.param(&model.params, model.head_weight);
    let bh = tape.param(&model.params, model.head_bias);
    let z = tape.matvec(wh, features);
    let z = tape.add(z, bh);
    let h = tape.sigmoid(z);
    let h = tape.dropout(h, model.hyper.dropout, train, rng);
    let wo = tape.param(&model.params, model.out_weight);
    let bo = tape.param(&model.params, model.out_bias);
    let logits = tape.matvec(wo, h);
    let logits = tape.add(logits, bo);
    tape.softmax(logits)
}

/// Probability of class 1 (consistent pair) for a ready feature vector.
pub fn score_pair(tape: &mut Tape, model: &Model, features: Var, train: bool, rng: &mut SeededRng) -> Var {
    let p = head_forward(tape, model, features, train, rng);
    tape.pick(p, 1)
}

/// One labeled training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub doc_idx: usize,
    pub mention_idx: usize,
    pub candidate: String,
    pub label: bool,
    /// True when fast match missed the gold and it was injected.
    pub gold_injected: bool,
}

/// Construction statistics, including fast-match gold recall.
#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainingSetReport {
    pub mentions: usize,
    pub positives: usize,
    pub negatives: usize,
    pub injected: usize,
    pub skipped_unknown_gold: usize,
    pub gold_recall: f64,
}

/// Per gold-labeled mention: one positive plus up to `ratio` top-ranked
/// non-gold candidates. Mentions whose gold page is missing from the KB
/// are skipped (they could never be scored).
pub fn build_training_set(
    docs: &[QueryDocument],
    resources: &Resources,
    k: usize,
    ratio: usize,
) -> (Vec<TrainingPair>, TrainingSetReport) {
    let mut pairs = Vec::new();
    let mut report = TrainingSetReport::default();
    let mut gold_hits = 0usize;
    for (doc_idx, doc) in docs.iter().enumerate() {
        for (mention_idx, mention) in doc.mentions.iter().enumerate() {
            let Some(gold) = mention.gold_title.as_deref() else {
                continue;
            };
            if gold == "NIL" {
                continue;
            }
            if !resources.pages.contains_key(gold) {
                report.skipped_unknown_gold += 1;
                continue;
            }
            report.mentions += 1;
            let candidates = resources.candidates(&doc.language, &mention.surface, k);
            let gold_found = candidates.iter().any(|(t, _)| t == gold);
            if gold_found {
                gold_hits += 1;
            }
            pairs.push(TrainingPair {
                doc_idx,
                mention_idx,
                candidate: gold.to_string(),
                label: true,
                gold_injected: !gold_found,
            });
            report.positives += 1;
            if !gold_found {
                report.injected += 1;
            }
            let mut negatives = 0;
            for (title, _) in &candidates {
                if negatives >= ratio {
                    break;
                }
                if title != gold && resources.pages.contains_key(title) {
                    pairs.push(TrainingPair {
                        doc_idx,
                        mention_idx,
                        candidate: title.clone(),
                        label: false,
                        gold_injected: false,
                    });
                    negatives += 1;
                }
            }
            report.negatives += negatives;
        }
    }
    report.gold_recall = if report.mentions == 0 {
        0.0
    } else {
        gold_hits as f64 / report.mentions as f64
    };
    (pairs, report)
}

/// Mean negative log-probability of the true class, with probabilities
/// clamped to [1e-12, 1 - 1e-12].
pub fn nll_of_true_probs(probs: &[f64]) -> f64 {
    assert!(!probs.is_empty(), "loss of an empty batch");
    let sum: f64 = probs
        .iter()
        .map(|p| p.clamp(1e-12, 1.0 - 1e-12).ln())
        .sum();
    -sum / probs.len() as f64
}

/// Loss and dev accuracy per epoch.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
}

/// Train a fresh model with shuffled minibatch SGD, retaining the
/// best-dev-accuracy parameters.
pub fn train(
    resources: &mut Resources,
    train_docs: &[QueryDocument],
    dev_docs: &[QueryDocument],
    cfg: &RunConfig,
) -> Result<(Model, Vec<EpochStats>, TrainingSetReport)> {
    let mut rng = SeededRng::new(cfg.seed);
    let hyper = &cfg.hyper;
    let mut model = Model::init(
        hyper,
        cfg.ablation,
        resources.english_table.dim,
        resources.table_hashes(),
        &mut rng,
    );

    let (pairs, report) = build_training_set(train_docs, resources, cfg.k, hyper.negative_ratio);
    log::info!(
        "training set: {} mentions, {} positives, {} negatives, gold recall {:.3}, {} injected",
        report.mentions,
        report.positives,
        report.negatives,
        report.gold_recall,
        report.injected
    );

    // Contexts depend only on (document, mention); compute them once.
    let contexts: Vec<Vec<MentionContext>> = train_docs
        .iter()
        .map(|d| d.mentions.iter().map(|m| collect_contexts(d, m)).collect())
        .collect();

    let raw_page_hash_before: Vec<u64> = frozen_page_fingerprint(resources);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut stats = Vec::new();
    let mut best: Option<(f64, ParamSet)> = None;

    for epoch in 1..=hyper.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for batch in order.chunks(hyper.batch_size) {
            let mut tape = Tape::new();
            let mut words = WordVars::new(&resources.english_table, hyper.update_word_embeddings);
            let mut page_words =
                WordVars::new(&resources.english_table, hyper.update_word_embeddings);
            let mut log_probs = Vec::with_capacity(batch.len());
            for &pi in batch {
                let pair = &pairs[pi];
                let doc = &train_docs[pair.doc_idx];
                let ctx = &contexts[pair.doc_idx][pair.mention_idx];
                let page = &resources.pages[&pair.candidate];
                let cand = CandidateData {
                    title: &pair.candidate,
                    prior: resources.prior(&doc.language, &ctx.mention_surface, &pair.candidate),
                    page,
                    page_vector: &resources.page_vectors[&pair.candidate],
                };
                let probs = forward_pair(
                    &mut tape,
                    &model,
                    &mut words,
                    &mut page_words,
                    &resources.english_table,
                    &resources.english_table,
                    ctx,
                    &doc.tokens,
                    &cand,
                    true,
                    &mut rng,
                );
                let true_class = usize::from(pair.label);
                let p_true = tape.pick(probs, true_class);
                log_probs.push(tape.log_clamped(p_true, 1e-12, 1.0 - 1e-12));
            }
            let mean_log = tape.mean_stack(&log_probs);
            let loss = tape.scale_add(mean_log, -1.0, 0.0);
            let loss_value = tape.data(loss)[0];
            if !loss_value.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += loss_value * batch.len() as f64;
            loss_count += batch.len();

            tape.backward(loss);
            tape.apply_grads(&mut model.params);
            let word_updates: Vec<(String, Vec<f64>)> = if hyper.update_word_embeddings {
                words
                    .tracked()
                    .iter()
                    .chain(page_words.tracked())
                    .map(|(w, v)| (w.clone(), tape.grad(*v).to_vec()))
                    .collect()
            } else {
                Vec::new()
            };
            drop(words);
            drop(page_words);
            for (word, grad) in word_updates {
                if let Some(v) = resources.english_table.vectors.get_mut(&word) {
                    for (x, g) in v.iter_mut().zip(&grad) {
                        *x -= hyper.lr * g;
                    }
                }
            }
            sgd_step(&mut model.params, hyper.lr);
        }

        let train_loss = loss_sum / loss_count.max(1) as f64;
        let dev_accuracy = dev_accuracy(&model, resources, dev_docs, cfg)?;
        log::info!("epoch {epoch}: train loss {train_loss:.4}, dev accuracy {dev_accuracy:.4}");
        stats.push(EpochStats {
            epoch,
            train_loss,
            dev_accuracy,
        });

        if best.as_ref().is_none_or(|(acc, _)| dev_accuracy > *acc) {
            best = Some((dev_accuracy, model.params.clone()));
        }
        if dev_accuracy >= hyper.early_stop_dev_acc {
            log::info!("early stop: dev accuracy {dev_accuracy:.4} at epoch {epoch}");
            break;
        }
    }

    if let Some((acc, params)) = best {
        log::info!("restoring best checkpoint (dev accuracy {acc:.4})");
        model.params = params;
    }
    debug_assert_eq!(
        frozen_page_fingerprint(resources),
        raw_page_hash_before,
        "page vectors must stay frozen during training"
    );
    Ok((model, stats, report))
}

fn frozen_page_fingerprint(resources: &Resources) -> Vec<u64> {
    let mut titles: Vec<&String> = resources.page_vectors.keys().collect();
    titles.sort();
    titles
        .iter()
        .map(|t| {
            let mut h: u64 = 0xcbf29ce484222325;
            for v in &resources.page_vectors[*t] {
                for &b in &v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
            h
        })
        .collect()
}

fn dev_accuracy(
    model: &Model,
    resources: &Resources,
    dev_docs: &[QueryDocument],
    cfg: &RunConfig,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for doc in dev_docs {
        for mention in &doc.mentions {
            let Some(gold) = mention.gold_title.as_deref() else {
                continue;
            };
            if gold == "NIL" {
                continue;
            }
            total += 1;
            let decision = link(doc, mention, model, resources, cfg.k, cfg.tau)?;
            if decision.predicted.as_deref() == Some(gold) {
                correct += 1;
            }
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    })
}

/// A scored candidate in a decision record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateScore {
    pub title: String,
    pub probability: f64,
    pub prior: f64,
}

/// The decode output for one query.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkDecision {
    pub query_id: String,
    /// `None` encodes NIL.
    pub predicted: Option<String>,
    pub score: f64,
    pub candidates: Vec<CandidateScore>,
}

/// Score fast-match candidates for one mention and pick the argmax, or NIL
/// when no candidate clears the threshold. Ties break by higher prior,
/// then lexicographically smaller title.
pub fn link(
    doc: &QueryDocument,
    mention: &Mention,
    model: &Model,
    resources: &Resources,
    k: usize,
    tau: f64,
) -> Result<LinkDecision> {
    assert!((0.0..=1.0).contains(&tau), "tau must lie in [0, 1], got {tau}");
    let table = resources.table_for(&doc.language)?;
    let ctx = collect_contexts(doc, mention);
    let mut rng = SeededRng::new(0); // inference records no dropout draws

    let mut scored = Vec::new();
    for (title, _) in resources.candidates(&doc.language, &mention.surface, k) {
        let Some(page) = resources.pages.get(&title) else {
            log::debug!("candidate {title:?} has no page in the knowledge base; skipping");
            continue;
        };
        let prior = resources.prior(&doc.language, &mention.surface, &title);
        let mut tape = Tape::new();
        let mut words = WordVars::new(table, false);
        let mut page_words = WordVars::new(&resources.english_table, false);
        let probs = forward_pair(
            &mut tape,
            model,
            &mut words,
            &mut page_words,
            table,
            &resources.english_table,
            &ctx,
            &doc.tokens,
            &CandidateData {
                title: &title,
                prior,
                page,
                page_vector: &resources.page_vectors[&title],
            },
            false,
            &mut rng,
        );
        let probability = tape.data(probs)[1];
        scored.push(CandidateScore {
            title,
            probability,
            prior,
        });
    }

    let (predicted, score) = match select_winner(&scored).cloned() {
        Some(best) if best.probability >= tau => (Some(best.title), best.probability),
        Some(best) => (None, best.probability),
        None => (None, 0.0),
    };
    Ok(LinkDecision {
        query_id: mention.query_id.clone(),
        predicted,
        score,
        candidates: scored,
    })
}

/// Highest probability wins; ties break by higher prior, then by
/// lexicographically smaller title.
pub fn select_winner(scored: &[CandidateScore]) -> Option<&CandidateScore> {
    scored.iter().max_by(|a, b| {
        a.probability
            .total_cmp(&b.probability)
            .then_with(|| a.prior.total_cmp(&b.prior))
            .then_with(|| b.title.cmp(&a.title))
    })
}

/// Decode a batch of documents; the model is read-only and its checksum is
/// verified unchanged.
pub fn decode(
    docs: &[QueryDocument],
    model: &Model,
    resources: &Resources,
    k: usize,
    tau: f64,
) -> Result<Vec<LinkDecision>> {
    let before = model.checksum();
    let mut out = Vec::new();
    for doc in docs {
        for mention in &doc.mentions {
            out.push(link(doc, mention, model, resources, k, tau)?);
        }
    }
    assert_eq!(
        model.checksum(),
        before,
        "decode must not mutate model parameters"
    );
    Ok(out)
}

/// Zero-shot decode of foreign-language documents: identical pipeline with
/// the aligned table and merged index.
pub fn decode_crosslingual(
    docs: &[QueryDocument],
    model: &Model,
    resources: &Resources,
    k: usize,
    tau: f64,
) -> Result<Vec<LinkDecision>> {
    for doc in docs {
        if doc.language != "en" {
            resources.table_for(&doc.language)?;
        }
    }
    decode(docs, model, resources, k, tau)
}

fn write_str<W: IoWrite>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: IoRead>(r: &mut R, path: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: IoRead>(r: &mut R, path: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: IoRead>(r: &mut R, path: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(f64::from_le_bytes(b))
}

fn read_str<R: IoRead>(r: &mut R, path: &str) -> Result<String> {
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
    use crate::tensor::grad_check;

    fn tiny_model(dim: usize) -> Model {
        let mut rng = SeededRng::new(77);
        let hyper = Hyperparams {
            context_dim: 6,
            lstm_hidden: 3,
            ntn_slices: 2,
            fine_out: 6,
            mpbl_bins: 5,
            mpcm_perspectives: 3,
            ldc_filters_per_width: 2,
            hidden: 8,
            dropout: 0.0,
            ..Default::default()
        };
        Model::init(&hyper, AblationFlags::default(), dim, BTreeMap::new(), &mut rng)
    }

    #[test]
    fn zero_output_layer_scores_half() {
        let mut model = tiny_model(4);
        // Zero the output layer: softmax of equal logits.
        for id in [model.out_weight, model.out_bias] {
            model.params.get_mut(id).value.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = SeededRng::new(1);
        let mut tape = Tape::new();
        let features = tape.leaf_vec(vec![0.3; model.layout.total()]);
        let p = score_pair(&mut tape, &model, features, false, &mut rng);
        assert_eq!(tape.data(p)[0], 0.5);
    }

    #[test]
    fn pair_probability_lies_strictly_inside_unit_interval() {
        let model = tiny_model(4);
        let mut rng = SeededRng::new(2);
        for _ in 0..5 {
            let f: Vec<f64> = (0..model.layout.total()).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let mut tape = Tape::new();
            let features = tape.leaf_vec(f);
            let p = score_pair(&mut tape, &model, features, false, &mut rng);
            let v = tape.data(p)[0];
            assert!(v > 0.0 && v < 1.0, "probability {v}");
        }
    }

    #[test]
    fn head_passes_fd_check() {
        let model = tiny_model(4);
        let mut rng = SeededRng::new(3);
        let f: Vec<f64> = (0..model.layout.total()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let err = grad_check(
            |t, ps| {
                let features = t.leaf_vec(f.clone());
                // Rebuild the head directly on the given parameter set so
                // the check perturbs what it differentiates.
                let wh = t.param(ps, model.head_weight);
                let bh = t.param(ps, model.head_bias);
                let z = t.matvec(wh, features);
                let z = t.add(z, bh);
                let h = t.sigmoid(z);
                let wo = t.param(ps, model.out_weight);
                let bo = t.param(ps, model.out_bias);
                let logits = t.matvec(wo, h);
                let logits = t.add(logits, bo);
                let p = t.softmax(logits);
                let p1 = t.pick(p, 1);
                t.log_clamped(p1, 1e-12, 1.0 - 1e-12)
            },
            &model.params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "head fd error {err}");
    }

    #[test]
    fn loss_of_certain_correct_predictions_is_negligible() {
        assert!(nll_of_true_probs(&[1.0, 1.0, 1.0]) < 1e-9);
    }

    #[test]
    fn loss_of_coin_flips_is_ln_two() {
        let l = nll_of_true_probs(&[0.5, 0.5]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn winner_prefers_probability_then_prior_then_title() {
        let c = |title: &str, probability: f64, prior: f64| CandidateScore {
            title: title.into(),
            probability,
            prior,
        };
        // Probability dominates.
        let s = vec![c("B", 0.9, 0.1), c("A", 0.8, 0.9)];
        assert_eq!(select_winner(&s).unwrap().title, "B");
        // Equal probabilities: higher prior wins.
        let s = vec![c("A", 0.5, 0.2), c("B", 0.5, 0.8)];
        assert_eq!(select_winner(&s).unwrap().title, "B");
        // Equal probabilities and priors: smaller title wins.
        let s = vec![c("B", 0.5, 0.4), c("A", 0.5, 0.4), c("C", 0.5, 0.4)];
        assert_eq!(select_winner(&s).unwrap().title, "A");
        assert!(select_winner(&[]).is_none());
    }

    #[test]
    fn loss_matches_hand_arithmetic() {
        let l = nll_of_true_probs(&[0.9, 0.8]);
        let want = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.1643).abs() < 1e-4);
    }
}

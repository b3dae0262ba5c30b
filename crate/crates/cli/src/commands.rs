//! The subcommand implementations.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use xlel_core::config::AlignmentMethod;
use xlel_core::context::{load_queries, QueryDocument};
use xlel_core::embed::{fit_ls_alignment, load_dictionary, load_embeddings, AlignmentMatrix};
use xlel_core::eval::{evaluate as score_decisions, gold_labels};
use xlel_core::kb::{ingest_corpus, AnchorIndex, InterLangMap, WikiPage};
use xlel_core::ranker::{self, LinkDecision, Model, Resources};
use xlel_core::RunConfig;

fn index_path(cfg: &RunConfig, lang: &str) -> PathBuf {
    cfg.paths.index_dir.join(format!("index.{lang}.bin"))
}

fn align_path(cfg: &RunConfig, lang: &str) -> PathBuf {
    cfg.paths.index_dir.join(format!("align.{lang}.bin"))
}

fn ensure_dir(path: &Path) -> anyhow::Result<()> {
    if !path.as_os_str().is_empty() {
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
    }
    Ok(())
}

/// Build and persist the English index and one merged index per foreign
/// language in the corpus. Output is deterministic: reruns are
/// byte-identical.
pub fn build_index(cfg: &RunConfig) -> anyhow::Result<()> {
    let (pages, _stats) = ingest_corpus(&cfg.paths.corpus)?;
    ensure_dir(&cfg.paths.index_dir)?;

    let english = AnchorIndex::build(&pages, "en");
    let en_path = index_path(cfg, "en");
    english.save(&en_path)?;
    export_text(&english, &en_path)?;
    log::info!(
        "en index: {} surfaces, {} anchor occurrences -> {}",
        english.entries.len(),
        english.total_count(),
        en_path.display()
    );

    let languages: BTreeSet<&str> = pages
        .iter()
        .map(|p| p.language.as_str())
        .filter(|l| *l != "en")
        .collect();
    if !languages.is_empty() {
        let english_titles: BTreeSet<String> = pages
            .iter()
            .filter(|p| p.language == "en")
            .map(|p| p.title.clone())
            .collect();
        let map = InterLangMap::load(&cfg.paths.interlang, Some(&english_titles))?;
        for lang in languages {
            let foreign = AnchorIndex::build(&pages, lang);
            let merged = foreign.merge_crosslingual(&map);
            let path = index_path(cfg, lang);
            merged.save(&path)?;
            export_text(&merged, &path)?;
            log::info!(
                "{lang} merged index: {} surfaces, {} occurrences -> {}",
                merged.entries.len(),
                merged.total_count(),
                path.display()
            );
        }
    }
    Ok(())
}

fn export_text(index: &AnchorIndex, bin_path: &Path) -> anyhow::Result<()> {
    let txt_path = bin_path.with_extension("tsv");
    let mut w = BufWriter::new(
        File::create(&txt_path).with_context(|| format!("creating {}", txt_path.display()))?,
    );
    index.export_text(&mut w)?;
    Ok(())
}

/// Fit W on the dictionary so `W x_foreign` lands in English space.
pub fn align_embeddings(cfg: &RunConfig, language: &str) -> anyhow::Result<()> {
    let en_path = embeddings_path(cfg, "en")?;
    let fo_path = embeddings_path(cfg, language)?;
    let english = load_embeddings(en_path, "en")?;
    let foreign = load_embeddings(fo_path, language)?;
    let dictionary = load_dictionary(&cfg.paths.dictionary)?;
    let matrix = fit_ls_alignment(&dictionary, &foreign, &english)?;
    ensure_dir(&cfg.paths.index_dir)?;
    let path = align_path(cfg, language);
    matrix.save(&path)?;
    log::info!(
        "alignment {language}->en: mean squared residual {:.3e} -> {}",
        matrix.residual,
        path.display()
    );
    Ok(())
}

fn embeddings_path<'a>(cfg: &'a RunConfig, language: &str) -> anyhow::Result<&'a Path> {
    cfg.paths
        .embeddings
        .get(language)
        .map(|p| p.as_path())
        .ok_or_else(|| {
            xlel_core::Error::Config(format!("no embeddings path configured for {language:?}"))
                .into()
        })
}

/// Write one JSON record per English page: `{"title": ..., "vector": [...]}`.
pub fn embed_pages(cfg: &RunConfig) -> anyhow::Result<()> {
    let (pages, stats) = ingest_corpus(&cfg.paths.corpus)?;
    let table = load_embeddings(embeddings_path(cfg, "en")?, "en")?;
    if let Some(parent) = cfg.paths.page_embeddings.parent() {
        ensure_dir(parent)?;
    }
    let mut w = BufWriter::new(File::create(&cfg.paths.page_embeddings).with_context(|| {
        format!("creating {}", cfg.paths.page_embeddings.display())
    })?);
    let mut english: Vec<&WikiPage> = pages.iter().filter(|p| p.language == "en").collect();
    english.sort_by(|a, b| a.title.cmp(&b.title));
    let mut flagged = 0usize;
    for page in &english {
        let e = xlel_core::embed::embed_page(page, &table, &stats);
        if e.empty {
            flagged += 1;
        }
        let record = serde_json::json!({ "title": e.title, "vector": e.raw });
        writeln!(w, "{record}")?;
    }
    log::info!(
        "wrote {} page vectors ({} empty) -> {}",
        english.len(),
        flagged,
        cfg.paths.page_embeddings.display()
    );
    Ok(())
}

fn load_resources(cfg: &RunConfig) -> anyhow::Result<Resources> {
    let (pages, stats) = ingest_corpus(&cfg.paths.corpus)?;
    let en_path = index_path(cfg, "en");
    if !en_path.exists() {
        bail!(
            "{}: English index missing; run `xlel build-index` first",
            en_path.display()
        );
    }
    let english_index = AnchorIndex::load(&en_path)?;
    let english_table = load_embeddings(embeddings_path(cfg, "en")?, "en")?;
    Ok(Resources::new(pages, stats, english_index, english_table))
}

/// Attach merged index and aligned table for one foreign language.
fn attach_language(cfg: &RunConfig, resources: &mut Resources, lang: &str) -> anyhow::Result<()> {
    let merged_path = index_path(cfg, lang);
    if !merged_path.exists() {
        bail!(
            "{}: merged index for {lang} missing; run `xlel build-index`",
            merged_path.display()
        );
    }
    resources.add_merged_index(AnchorIndex::load(&merged_path)?);

    let mut table = load_embeddings(embeddings_path(cfg, lang)?, lang)?;
    match cfg.alignment {
        AlignmentMethod::PreAligned => {
            table.aligned = true;
        }
        AlignmentMethod::Ls => {
            let path = align_path(cfg, lang);
            if !path.exists() {
                bail!(
                    "{}: alignment for {lang} missing; run `xlel align-embeddings --language {lang}`",
                    path.display()
                );
            }
            let matrix = AlignmentMatrix::load(&path)?;
            table = table.aligned_by(&matrix);
        }
    }
    resources.add_foreign_table(table)?;
    Ok(())
}

/// Train on English queries and save the checkpoint plus a per-epoch log.
pub fn train(cfg: &RunConfig) -> anyhow::Result<()> {
    let mut resources = load_resources(cfg)?;
    let train_docs = load_queries(&cfg.paths.train_queries)?;
    let dev_docs = load_queries(&cfg.paths.dev_queries)?;
    let (model, stats, report) = ranker::train(&mut resources, &train_docs, &dev_docs, cfg)?;

    if let Some(parent) = cfg.paths.checkpoint.parent() {
        ensure_dir(parent)?;
    }
    model.save(&cfg.paths.checkpoint)?;
    let log_path = cfg.paths.checkpoint.with_extension("epochs.tsv");
    let mut w = BufWriter::new(File::create(&log_path)?);
    writeln!(w, "epoch\ttrain_loss\tdev_accuracy")?;
    for s in &stats {
        writeln!(w, "{}\t{}\t{}", s.epoch, s.train_loss, s.dev_accuracy)?;
    }
    log::info!(
        "checkpoint -> {} (gold recall {:.3}, best dev {:.4})",
        cfg.paths.checkpoint.display(),
        report.gold_recall,
        stats
            .iter()
            .map(|s| s.dev_accuracy)
            .fold(0.0f64, f64::max)
    );
    Ok(())
}

/// Decode a query file into one decision record per mention. Per-document
/// failures become error records and the run continues.
pub fn link(cfg: &RunConfig, queries: Option<&Path>) -> anyhow::Result<()> {
    let mut resources = load_resources(cfg)?;
    let model = Model::load(&cfg.paths.checkpoint)?;
    for (lang, hash) in &model.provenance {
        if lang == "en" {
            let now = resources.table_hashes()["en"];
            if now != *hash {
                log::warn!(
                    "English embedding table differs from the one recorded at training time"
                );
            }
        }
    }

    let query_path = queries.unwrap_or(&cfg.paths.queries);
    let docs = load_queries(query_path)?;
    let languages: BTreeSet<String> = docs
        .iter()
        .map(|d| d.language.clone())
        .filter(|l| l != "en")
        .collect();
    // A language that cannot be attached poisons only its own queries.
    let mut failed_langs: std::collections::BTreeMap<String, String> = Default::default();
    for lang in &languages {
        if let Err(err) = attach_language(cfg, &mut resources, lang) {
            log::warn!("language {lang}: {err:#}");
            failed_langs.insert(lang.clone(), format!("{err:#}"));
        }
    }

    if let Some(parent) = cfg.paths.decisions.parent() {
        ensure_dir(parent)?;
    }
    let mut w = BufWriter::new(File::create(&cfg.paths.decisions).with_context(|| {
        format!("creating {}", cfg.paths.decisions.display())
    })?);
    let before = model.checksum();
    let mut errors = 0usize;
    let mut written = 0usize;
    for doc in &docs {
        for mention in &doc.mentions {
            if let Some(msg) = failed_langs.get(&doc.language) {
                let record = serde_json::json!({
                    "query_id": mention.query_id,
                    "error": "E_NOT_ALIGNED",
                    "message": msg,
                });
                writeln!(w, "{record}")?;
                errors += 1;
                continue;
            }
            match ranker::link(doc, mention, &model, &resources, cfg.k, cfg.tau) {
                Ok(decision) => {
                    writeln!(w, "{}", serde_json::to_string(&decision)?)?;
                    written += 1;
                }
                Err(err) => {
                    let record = serde_json::json!({
                        "query_id": mention.query_id,
                        "error": err.code(),
                        "message": err.to_string(),
                    });
                    writeln!(w, "{record}")?;
                    errors += 1;
                    log::warn!("query {}: {err}", mention.query_id);
                }
            }
        }
    }
    assert_eq!(model.checksum(), before, "decode must not mutate the model");
    log::info!(
        "wrote {written} decisions ({errors} errors) -> {}",
        cfg.paths.decisions.display()
    );
    Ok(())
}

/// Score decisions against gold labels; the report goes to `out` or stdout.
pub fn evaluate(
    cfg: &RunConfig,
    decisions: Option<&Path>,
    gold: Option<&Path>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let decisions_path = decisions.unwrap_or(&cfg.paths.decisions);
    let gold_path = gold.unwrap_or(&cfg.paths.queries);

    let parsed = read_decisions(decisions_path)?;
    let gold_docs: Vec<QueryDocument> = load_queries(gold_path)?;
    let labels = gold_labels(&gold_docs);
    let report = score_decisions(&parsed, &labels)?;
    log::info!(
        "in-KB accuracy {:.4}, overall {:.4}, gold recall {:.4} over {} queries",
        report.in_kb_accuracy,
        report.overall_accuracy,
        report.fast_match_gold_recall,
        report.n_scored
    );
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(path) => {
            fs::write(path, json).with_context(|| format!("writing {}", path.display()))?
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn read_decisions(path: &Path) -> anyhow::Result<Vec<LinkDecision>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LinkDecision>(&line) {
            Ok(d) => out.push(d),
            Err(_) => {
                // Error records from `link` are skipped but counted.
                log::warn!("{}:{}: skipping non-decision record", path.display(), lineno + 1);
            }
        }
    }
    Ok(out)
}

/// Run the gradient suite and print one line per node.
pub fn grad_check(seeds: u64) -> anyhow::Result<()> {
    let reports = xlel_core::gradsuite::run_suite(seeds)?;
    println!("node\tmax_rel_err\tseeds");
    let mut worst = 0.0f64;
    for r in &reports {
        println!("{}\t{:.3e}\t{seeds}", r.node, r.max_rel_err);
        worst = worst.max(r.max_rel_err);
    }
    if worst >= 1e-4 {
        bail!("gradient suite failed: max relative error {worst:.3e} >= 1e-4");
    }
    log::info!("gradient suite clean: max relative error {worst:.3e}");
    Ok(())
}

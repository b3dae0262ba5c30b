//! Shared helpers: materialize synthetic fixtures on disk and bundle them
//! into ranker resources.

// Each test target uses its own subset of these helpers.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use xlel_core::config::RunConfig;
use xlel_core::context::{load_queries, QueryDocument};
use xlel_core::embed::{fit_ls_alignment, load_dictionary, load_embeddings};
use xlel_core::kb::{ingest_corpus, AnchorIndex, InterLangMap};
use xlel_core::ranker::Resources;
use xlel_core::synth::{PseudoForeign, ToyData};

pub struct ToyWorld {
    pub dir: tempfile::TempDir,
    pub resources: Resources,
    pub train: Vec<QueryDocument>,
    pub dev: Vec<QueryDocument>,
    pub test: Vec<QueryDocument>,
}

pub fn write(dir: &Path, name: &str, content: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, content).unwrap();
    path
}

/// Write toy files and assemble English-side resources.
pub fn build_world(toy: &ToyData) -> ToyWorld {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write(dir.path(), "corpus.jsonl", &toy.corpus_jsonl);
    let emb = write(dir.path(), "embeddings.en.txt", &toy.embeddings_txt);
    let train = write(dir.path(), "train.jsonl", &toy.train_jsonl);
    let dev = write(dir.path(), "dev.jsonl", &toy.dev_jsonl);
    let test = write(dir.path(), "test.jsonl", &toy.test_jsonl);

    let (pages, stats) = ingest_corpus(&corpus).unwrap();
    let index = AnchorIndex::build(&pages, "en");
    let table = load_embeddings(&emb, "en").unwrap();
    let resources = Resources::new(pages, stats, index, table);

    ToyWorld {
        resources,
        train: load_queries(&train).unwrap(),
        dev: load_queries(&dev).unwrap(),
        test: load_queries(&test).unwrap(),
        dir,
    }
}

/// Wire a pseudo-foreign bundle into existing resources: merged index and
/// LS-aligned table.
pub fn attach_pseudo_foreign(world: &mut ToyWorld, pf: &PseudoForeign) -> Vec<QueryDocument> {
    let dir = world.dir.path();
    let corpus = write(dir, "corpus.xx.jsonl", &pf.corpus_jsonl);
    let emb = write(dir, "embeddings.xx.txt", &pf.embeddings_txt);
    let links = write(dir, "interlang.tsv", &pf.interlang_tsv);
    let dict = write(dir, "dictionary.tsv", &pf.dictionary_tsv);
    let queries = write(dir, "queries.xx.jsonl", &pf.queries_jsonl);

    let (pages, _) = ingest_corpus(&corpus).unwrap();
    let foreign_index = AnchorIndex::build(&pages, &pf.language);
    let english_titles: BTreeSet<String> = world.resources.pages.keys().cloned().collect();
    let map = InterLangMap::load(&links, Some(&english_titles)).unwrap();
    let merged = foreign_index.merge_crosslingual(&map);
    world.resources.add_merged_index(merged);

    let foreign_table = load_embeddings(&emb, &pf.language).unwrap();
    let dictionary = load_dictionary(&dict).unwrap();
    let matrix =
        fit_ls_alignment(&dictionary, &foreign_table, &world.resources.english_table).unwrap();
    world
        .resources
        .add_foreign_table(foreign_table.aligned_by(&matrix))
        .unwrap();

    load_queries(&queries).unwrap()
}

/// Small, fast hyperparameters for integration tests.
pub fn small_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        k: 10,
        tau: 0.2,
        ..Default::default()
    };
    cfg.hyper.context_dim = 24;
    cfg.hyper.lstm_hidden = 8;
    cfg.hyper.ntn_slices = 4;
    cfg.hyper.fine_out = 24;
    cfg.hyper.mpbl_bins = 20;
    cfg.hyper.mpcm_perspectives = 5;
    cfg.hyper.ldc_filters_per_width = 5;
    cfg.hyper.hidden = 64;
    cfg.hyper.dropout = 0.2;
    cfg.hyper.lr = 0.05;
    cfg.hyper.batch_size = 16;
    cfg.hyper.epochs = 8;
    cfg
}

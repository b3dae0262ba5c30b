//! The full gradient-check suite: every differentiable node family checked
//! against central finite differences on randomized small shapes.
//!
//! Shared by the `grad-check` CLI command and the acceptance tests.

use crate::context::{
    encode_fine_grained, encode_token_seqs, CnnParams, FineGrainedParams, LstmParams,
    MentionContext, Pooling, WordVars,
};
use crate::embed::{EmbeddingTable, PageProjection};
use crate::features::{ldc, mpcm, LdcDecomposition, LdcParams, MpcmParams};
use crate::tensor::{grad_check_guarded, ParamSet, SeededRng, Tape, Var};
use crate::Result;

/// Coordinates agreeing within this absolute bound count as matched;
/// central differences at eps = 1e-5 on unit-scale outputs carry an
/// irreducible noise floor around 1e-9, which would otherwise read as
/// large relative error wherever the true gradient is near zero.
pub const FD_ABS_FLOOR: f64 = 1e-7;

/// Step used for the central differences.
pub const FD_EPS: f64 = 1e-5;

/// Worst relative error seen for one node family.
#[derive(Debug, Clone)]
pub struct NodeReport {
    pub node: &'static str,
    pub max_rel_err: f64,
}

/// Run every node check over `seeds` seeds; dims stay at or below 8.
pub fn run_suite(seeds: u64) -> Result<Vec<NodeReport>> {
    let mut worst: Vec<NodeReport> = NODES
        .iter()
        .map(|(name, _)| NodeReport {
            node: name,
            max_rel_err: 0.0,
        })
        .collect();
    for seed in 0..seeds {
        let mut rng = SeededRng::new(1000 + seed);
        for (i, (_, check)) in NODES.iter().enumerate() {
            let err = check(&mut rng)?;
            worst[i].max_rel_err = worst[i].max_rel_err.max(err);
        }
    }
    Ok(worst)
}

type NodeCheck = fn(&mut SeededRng) -> Result<f64>;

const NODES: [(&str, NodeCheck); 7] = [
    ("sentence-cnn", check_cnn),
    ("lstm", check_lstm),
    ("ntn", check_ntn),
    ("page-projection", check_projection),
    ("mpcm", check_mpcm),
    ("ldc-composition-cnn", check_ldc),
    ("head", check_head),
];

fn rand_dims(rng: &mut SeededRng, lo: usize) -> usize {
    lo + rng.below(8 - lo + 1)
}

fn rand_table(rng: &mut SeededRng, dim: usize, n: usize) -> EmbeddingTable {
    let mut t = EmbeddingTable::new("en", dim);
    for i in 0..n {
        t.insert(
            &format!("w{i}"),
            (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        );
    }
    t
}

fn probe_dot(t: &mut Tape, out: Var, probe: &[f64]) -> Var {
    let p = t.leaf_vec(probe.to_vec());
    t.dot(p, out)
}

fn check_cnn(rng: &mut SeededRng) -> Result<f64> {
    let dim = rand_dims(rng, 2);
    let out = rand_dims(rng, 2);
    let table = rand_table(rng, dim, 6);
    let mut ps = ParamSet::new();
    let cnn = CnnParams::init(&mut ps, "cnn", dim, 2, out, rng, 0.0);
    let seq: Vec<String> = (0..4 + rng.below(3)).map(|i| format!("w{}", i % 6)).collect();
    let probe: Vec<f64> = (0..out).map(|_| rng.uniform(-1.0, 1.0)).collect();
    grad_check_guarded(
        |t, ps| {
            let mut words = WordVars::new(&table, false);
            let o = encode_token_seqs(t, ps, &cnn, &mut words, &[&seq], Pooling::Mean);
            probe_dot(t, o, &probe)
        },
        &ps,
        FD_EPS,
        FD_ABS_FLOOR,
    )
}

fn check_lstm(rng: &mut SeededRng) -> Result<f64> {
    let dim = rand_dims(rng, 2);
    let hidden = rand_dims(rng, 2).min(6);
    let mut ps = ParamSet::new();
    let lstm = LstmParams::init(&mut ps, "lstm", dim, hidden, rng, 0.0);
    let steps = 2 + rng.below(3);
    let inputs: Vec<Vec<f64>> = (0..steps)
        .map(|_| (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .collect();
    let probe: Vec<f64> = (0..hidden).map(|_| rng.uniform(-1.0, 1.0)).collect();
    grad_check_guarded(
        |t, ps| {
            let vars: Vec<_> = inputs.iter().map(|v| t.leaf_vec(v.clone())).collect();
            let states = lstm.run(t, ps, &vars);
            let pooled = t.mean_stack(&states);
            probe_dot(t, pooled, &probe)
        },
        &ps,
        FD_EPS,
        FD_ABS_FLOOR,
    )
}

fn check_ntn(rng: &mut SeededRng) -> Result<f64> {
    let dim = rand_dims(rng, 2);
    let hidden = (dim / 2).max(1);
    let slices = 1 + rng.below(3);
    let mut ps = ParamSet::new();
    let fine = FineGrainedParams::init(&mut ps, dim, hidden, slices, 3, rng, 0.0);
    let table = rand_table(rng, dim, 5);
    let ctx = MentionContext {
        mention_surface: "w0".into(),
        sentences: vec![vec!["w0".into()]],
        left_windows: vec![vec!["w1".into(), "w0".into()], vec!["w2".into()]],
        right_windows: vec![vec!["w0".into(), "w3".into()], vec!["w4".into(), "w0".into()]],
    };
    let probe: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
    grad_check_guarded(
        |t, ps| {
            let mut words = WordVars::new(&table, false);
            let o = encode_fine_grained(t, ps, &fine, &mut words, &ctx, Pooling::Mean);
            probe_dot(t, o, &probe)
        },
        &ps,
        FD_EPS,
        FD_ABS_FLOOR,
    )
}

fn check_projection(rng: &mut SeededRng) -> Result<f64> {
    let dim = rand_dims(rng, 2);
    let out = rand_dims(rng, 2);
    let mut ps = ParamSet::new();
    let proj = PageProjection::init(&mut ps, dim, out, rng, 0.0);
    let raw: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let probe: Vec<f64> = (0..out).map(|_| rng.uniform(-1.0, 1.0)).collect();
    grad_check_guarded(
        |t, ps| {
            let r = t.leaf_vec(raw.clone());
            let o = proj.forward(t, ps, r);
            probe_dot(t, o, &probe)
        },
        &ps,
        FD_EPS,
        FD_ABS_FLOOR,
    )
}

fn check_mpcm(rng: &mut SeededRng) -> Result<f64> {
    let dim = rand_dims(rng, 2);
    let perspectives = 1 + rng.below(4);
    let mut ps = ParamSet::new();
    let mp = MpcmParams::init(&mut ps, perspectives, dim, rng, 0.0);
    let a: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let b: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let probe: Vec<f64> = (0..perspectives).map(|_| rng.uniform(-1.0, 1.0)).collect();
    grad_check_guarded(
        |t, ps| {
            let av = t.leaf_vec(a.clone());
            let bv = t.leaf_vec(b.clone());
            let o = mpcm(t, ps, &mp, av, bv);
            probe_dot(t, o, &probe)
        },
        &ps,
        FD_EPS,
        FD_ABS_FLOOR,
    )
}

fn check_ldc(rng: &mut SeededRng) -> Result<f64> {
    let dim = rand_dims(rng, 2);
    let filters = 1 + rng.below(3);
    let table = rand_table(rng, dim, 6);
    let mut ps = ParamSet::new();
    let lp = LdcParams::init(&mut ps, dim, filters, LdcDecomposition::Linear, rng, 0.0);
    let source: Vec<String> = vec!["w0".into(), "w1".into(), "w2".into()];
    let target: Vec<String> = vec!["w3".into(), "w4".into()];
    let probe: Vec<f64> = (0..lp.out_len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
    grad_check_guarded(
        |t, ps| {
            let o = ldc(t, ps, &lp, &table, &source, &table, &target);
            probe_dot(t, o, &probe)
        },
        &ps,
        FD_EPS,
        FD_ABS_FLOOR,
    )
}

fn check_head(rng: &mut SeededRng) -> Result<f64> {
    let feat = 3 + rng.below(6);
    let hidden = 2 + rng.below(5);
    let mut ps = ParamSet::new();
    let wh = ps.add_matrix("wh", hidden, feat, rng, 0.0);
    let bh = ps.add_bias("bh", hidden, 0.0);
    let wo = ps.add_matrix("wo", 2, hidden, rng, 0.0);
    let bo = ps.add_bias("bo", 2, 0.0);
    let features: Vec<f64> = (0..feat).map(|_| rng.uniform(-1.0, 1.0)).collect();
    grad_check_guarded(
        |t, ps| {
            let f = t.leaf_vec(features.clone());
            let whv = t.param(ps, wh);
            let bhv = t.param(ps, bh);
            let z = t.matvec(whv, f);
            let z = t.add(z, bhv);
            let h = t.sigmoid(z);
            let wov = t.param(ps, wo);
            let bov = t.param(ps, bo);
            let logits = t.matvec(wov, h);
            let logits = t.add(logits, bov);
            let p = t.softmax(logits);
            let p1 = t.pick(p, 1);
            t.log_clamped(p1, 1e-12, 1.0 - 1e-12)
        },
        &ps,
        FD_EPS,
        FD_ABS_FLOOR,
    )
}

//! Independent reference implementations shared by the integration tests and
//! the acceptance binary. Each check returns a measurement or a message
//! describing the first mismatch.

use std::collections::HashMap;

use ndarray::Array2;
use qdst::analysis::{entropy, role_entropy, role_max_attention, top_attended_sentences, Source};
use qdst::attention::{dense_reference_attention, sparse_attention_forward, AttentionTrace, AttentionWeights, HeadConfig};
use qdst::model::{Model, ModelConfig, ModelParams};
use qdst::pattern::{build_layout, build_pattern, PatternConfig, Preset, SequenceLayout, TokenRole};
use qdst::pipeline::{evaluate, EvalOptions, Gain, Metric, Qrels, Run, RunList};
use qdst::tensor::{cast_matrix, max_abs_diff};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{random_layout, random_matrix, relative_error};

pub const ALL_PRESETS: [Preset; 6] =
    [Preset::Full, Preset::Local, Preset::LongformerQa, Preset::QdsQ, Preset::QdsS, Preset::Qds];

/// Entry-by-entry adjacency straight from the component definitions.
pub fn pattern_oracle(layout: &SequenceLayout, preset: Preset, window: usize) -> Vec<Vec<bool>> {
    let n = layout.n();
    let half = (window / 2) as isize;
    let roles = layout.roles();
    let first_sos = roles.iter().position(|&r| r == TokenRole::Sos);
    let active = |p: usize| roles[p] != TokenRole::Pad;
    let query = |p: usize| roles[p] == TokenRole::Query;
    let sos = |p: usize| roles[p] == TokenRole::Sos;
    let mut out = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            if !active(i) || !active(j) {
                continue;
            }
            let local = (i as isize - j as isize).abs() <= half;
            let with_q = query(i) || query(j);
            let with_s = sos(i) || sos(j);
            let with_cls = i == 0 || j == 0;
            out[i][j] = match preset {
                Preset::Full => true,
                Preset::Local => local,
                Preset::LongformerQa => {
                    let special = |p: usize| p == 0 || Some(p) == first_sos;
                    local || special(i) || special(j)
                }
                Preset::QdsQ => local || with_q || with_cls,
                Preset::QdsS => local || with_s || with_cls,
                Preset::Qds => local || with_q || with_s || with_cls,
            };
        }
    }
    out
}

/// Every n in `3..=max_n`, `per_n` random layouts (some padded), every preset
/// at a random even window. Returns the number of patterns compared.
pub fn check_patterns(max_n: usize, per_n: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut compared = 0;
    for n in 3..=max_n {
        for _ in 0..per_n {
            let pad = rng.random_range(0..=(n - 3).min(3));
            let layout = random_layout(&mut rng, n - pad, 6, 50, pad).with_padding(n).unwrap();
            for preset in ALL_PRESETS {
                let window = 2 * rng.random_range(0..=n + 1);
                let cfg = PatternConfig::new(preset, window).unwrap();
                let pattern = build_pattern(&layout, &cfg).map_err(|e| e.to_string())?;
                let expected = pattern_oracle(&layout, preset, window);
                let dense = pattern.to_dense();
                let mut count = 0;
                for i in 0..n {
                    for j in 0..n {
                        if pattern.contains(i, j) != expected[i][j] || (dense[i][j] == 1) != expected[i][j] {
                            return Err(format!("{} w={window} n={n}: entry ({i},{j}) differs", preset.name()));
                        }
                        count += expected[i][j] as usize;
                    }
                }
                if pattern.nonzeros() != count {
                    return Err(format!("{} w={window} n={n}: nonzeros {} != {count}", preset.name(), pattern.nonzeros()));
                }
                compared += 1;
            }
        }
    }
    Ok(compared)
}

#[derive(Debug, Clone, Copy)]
pub struct OracleSummary {
    pub cases: usize,
    pub worst_f64: f64,
    pub worst_f32: f64,
}

/// Sparse kernel against the dense `-inf`-masked reference on random inputs,
/// cycling through lengths and presets.
pub fn check_attention_oracle(cases: usize, seed: u64) -> OracleSummary {
    const LENGTHS: [usize; 4] = [17, 64, 257, 512];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = OracleSummary { cases: 0, worst_f64: 0.0, worst_f32: 0.0 };
    for case in 0..cases {
        let n = LENGTHS[case % LENGTHS.len()];
        let preset = ALL_PRESETS[(case / LENGTHS.len()) % ALL_PRESETS.len()];
        let pad = if case % 3 == 0 { rng.random_range(1..=4) } else { 0 };
        let layout = random_layout(&mut rng, n - pad, 12, 100, pad).with_padding(n).unwrap();
        let window = 2 * rng.random_range(0..=12);
        let pattern = build_pattern(&layout, &PatternConfig::new(preset, window).unwrap()).unwrap();
        let (dim, heads) = if case % 2 == 0 { (16, 2) } else { (12, 3) };
        let head_cfg = HeadConfig::for_model(dim, heads).unwrap();
        let weights = AttentionWeights::<f64>::random(&mut rng, dim, 0.4);
        let h = random_matrix(&mut rng, n, dim);
        // Dense oracle on the active prefix; PAD rows have no support.
        let active = layout.active_len();
        let mask: Vec<Vec<u8>> = pattern.to_dense().into_iter().take(active).map(|r| r[..active].to_vec()).collect();
        let h_active = h.slice(ndarray::s![..active, ..]).to_owned();

        let (sparse, _) = sparse_attention_forward(&h, &weights, &head_cfg, &pattern, false).unwrap();
        let dense = dense_reference_attention(&h_active, &weights, &head_cfg, &mask).unwrap();
        summary.worst_f64 = summary.worst_f64.max(active_diff(&sparse, &dense, active));

        let weights32 = AttentionWeights::<f32> {
            w_q: cast_matrix(&weights.w_q),
            w_k: cast_matrix(&weights.w_k),
            w_v: cast_matrix(&weights.w_v),
            w_f: cast_matrix(&weights.w_f),
        };
        let h32: Array2<f32> = cast_matrix(&h);
        let (sparse32, _) = sparse_attention_forward(&h32, &weights32, &head_cfg, &pattern, false).unwrap();
        let dense32 = dense_reference_attention(&cast_matrix(&h_active), &weights32, &head_cfg, &mask).unwrap();
        summary.worst_f32 = summary.worst_f32.max(active_diff(&sparse32, &dense32, active));
        summary.cases += 1;
    }
    summary
}

/// Active rows against the oracle; PAD rows of the sparse output must be 0.
fn active_diff<T: qdst::tensor::Real>(sparse: &Array2<T>, dense: &Array2<T>, active: usize) -> f64 {
    let s = sparse.slice(ndarray::s![..active, ..]).to_owned();
    let d = dense.clone();
    let pad_max = sparse
        .slice(ndarray::s![active.., ..])
        .iter()
        .fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
    max_abs_diff(&s, &d).max(pad_max)
}

/// Central differences on every scalar of every tensor; the worst relative
/// error per tensor.
pub fn model_gradient_errors(model: &mut Model<f64>, layout: &SequenceLayout, eps: f64) -> Vec<(String, f64)> {
    let (_, cache) = model.forward_for_training(layout, None).unwrap();
    let mut grads = ModelParams::zeros(&model.config);
    model.backward(&cache, 1.0, &mut grads).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grads.tensors().into_iter().map(|(n, t)| (n, t.to_vec())).collect();
    let mut out = Vec::new();
    for (t_idx, (name, g)) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for k in 0..g.len() {
            let orig = model.params.tensors()[t_idx].1[k];
            model.params.tensors_mut()[t_idx].1[k] = orig + eps;
            let up = model.score_layout(layout).unwrap();
            model.params.tensors_mut()[t_idx].1[k] = orig - eps;
            let down = model.score_layout(layout).unwrap();
            model.params.tensors_mut()[t_idx].1[k] = orig;
            worst = worst.max(relative_error((up - down) / (2.0 * eps), g[k]));
        }
        out.push((name.clone(), worst));
    }
    out
}

/// Encodes the same layout under FULL and under QDS with a window covering
/// every offset; returns the largest hidden-state difference.
pub fn saturation_gap(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = random_layout(&mut rng, n, 5, 40, 0);
    let config = |preset, window| {
        let mut c = ModelConfig::new(2, 16, 4, 40, PatternConfig::new(preset, window).unwrap());
        c.max_len = n;
        c.dropout_rate = 0.0;
        c
    };
    let full = Model::<f64>::init(config(Preset::Full, 0), seed).unwrap();
    let mut qds = Model::<f64>::init(config(Preset::Qds, 2 * (n - 1)), seed).unwrap();
    qds.params = full.params.clone();
    let a = full.encode(&layout, false).unwrap().hidden;
    let b = qds.encode(&layout, false).unwrap().hidden;
    max_abs_diff(&a, &b)
}

/// A random run/qrels pair with ties, unjudged documents and judged
/// documents missing from the run.
pub fn random_ranking_case(rng: &mut impl Rng) -> (Run, Qrels) {
    let mut run = Run::default();
    let mut qrels = Qrels::new();
    for q in 0..rng.random_range(1..=4) {
        let qid = format!("q{q}");
        let pool = rng.random_range(1..=16);
        let mut entries = Vec::new();
        for d in 0..pool {
            let doc = format!("d{d:02}");
            if rng.random_bool(0.8) {
                entries.push((doc.clone(), rng.random_range(0..8) as f64 * 0.5));
            }
            if rng.random_bool(0.7) {
                qrels.insert(&qid, &doc, rng.random_range(0..=4));
            }
        }
        if entries.is_empty() {
            entries.push(("d00".into(), 1.0));
        }
        run.insert(RunList::new(qid, entries).unwrap());
    }
    (run, qrels)
}

fn brute_order(entries: &[(String, f64)]) -> Vec<String> {
    let mut e = entries.to_vec();
    e.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    e.into_iter().map(|(d, _)| d).collect()
}

/// Per-query values by the textbook formulas; `None` when the query does not
/// contribute to the mean.
pub fn brute_metric(metric: Metric, ranked: &[String], judged: &HashMap<String, u32>, max_grade: u32, gain: Gain, threshold: u32) -> Option<f64> {
    let grade = |d: &String| judged.get(d).copied().unwrap_or(0);
    let g = |x: u32| match gain {
        Gain::Exp => 2f64.powf(x as f64) - 1.0,
        Gain::Linear => x as f64,
    };
    match metric {
        Metric::Ndcg(k) => {
            let dcg: f64 = (1..=k.min(ranked.len())).map(|r| g(grade(&ranked[r - 1])) / (r as f64 + 1.0).log2()).sum();
            let mut ideal: Vec<u32> = judged.values().copied().collect();
            ideal.sort_unstable_by(|a, b| b.cmp(a));
            let idcg: f64 = (1..=k.min(ideal.len())).map(|r| g(ideal[r - 1]) / (r as f64 + 1.0).log2()).sum();
            Some(if idcg == 0.0 { 0.0 } else { dcg / idcg })
        }
        Metric::Mrr(k) => Some(
            (1..=k.min(ranked.len()))
                .find(|&r| grade(&ranked[r - 1]) >= threshold)
                .map_or(0.0, |r| 1.0 / r as f64),
        ),
        Metric::Map => {
            let total = judged.values().filter(|&&x| x >= threshold).count();
            if total == 0 {
                return None;
            }
            let mut sum = 0.0;
            for r in 1..=ranked.len() {
                if grade(&ranked[r - 1]) >= threshold {
                    let hits = ranked[..r].iter().filter(|d| grade(d) >= threshold).count();
                    sum += hits as f64 / r as f64;
                }
            }
            Some(sum / total as f64)
        }
        Metric::Err(k) => {
            let p = |x: u32| (2f64.powf(x as f64) - 1.0) / 2f64.powf(max_grade as f64);
            let mut value = 0.0;
            for r in 1..=k.min(ranked.len()) {
                let cont: f64 = (1..r).map(|i| 1.0 - p(grade(&ranked[i - 1]))).product();
                value += cont * p(grade(&ranked[r - 1])) / r as f64;
            }
            Some(value)
        }
    }
}

/// Runs `cases` random instances through every metric; returns the largest
/// absolute difference seen (per query and in the mean).
pub fn check_metrics(cases: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let (run, qrels) = random_ranking_case(&mut rng);
        let k = rng.random_range(1..=20);
        let metric = [Metric::Ndcg(k), Metric::Mrr(k), Metric::Map, Metric::Err(k)][case % 4];
        let gain = if rng.random_bool(0.5) { Gain::Exp } else { Gain::Linear };
        let threshold = rng.random_range(1..=2);
        let report = evaluate(metric, &run, &qrels, EvalOptions { gain, positive_threshold: threshold }).map_err(|e| e.to_string())?;
        let mut expected = Vec::new();
        for (qid, list) in &run.lists {
            let Some(judged) = qrels.query(qid) else { continue };
            let ranked = brute_order(list.entries());
            if let Some(v) = brute_metric(metric, &ranked, judged, qrels.max_grade(), gain, threshold) {
                expected.push((qid.clone(), v));
            }
        }
        if expected.len() != report.per_query.len() {
            return Err(format!("case {case} {metric}: {} queries, expected {}", report.per_query.len(), expected.len()));
        }
        for ((qa, a), (qb, b)) in report.per_query.iter().zip(&expected) {
            if qa != qb {
                return Err(format!("case {case}: query order {qa} vs {qb}"));
            }
            worst = worst.max((a - b).abs());
        }
        let mean = if expected.is_empty() { 0.0 } else { expected.iter().map(|(_, v)| v).sum::<f64>() / expected.len() as f64 };
        worst = worst.max((report.mean - mean).abs());
    }
    Ok(worst)
}

/// The hand-computed metric fixtures: (name, computed, expected, tolerance).
pub fn metric_fixtures() -> Vec<(&'static str, f64, f64, f64)> {
    use qdst::pipeline::{average_precision_grades, err_grades, ndcg_grades, reciprocal_rank_grades};
    vec![
        ("ndcg (0,2)@2", ndcg_grades(&[0, 2], &[0, 2], 2, Gain::Exp).unwrap(), 0.6309, 1e-4),
        ("ndcg ideal", ndcg_grades(&[1], &[1], 10, Gain::Exp).unwrap(), 1.0, 0.0),
        ("err single g=4", err_grades(&[4], 10, 4), 0.9375, 0.0),
        ("err (4,4)@2", err_grades(&[4, 4], 2, 4), 0.9668, 1e-4),
        ("ap {1,3}", average_precision_grades(&[1, 0, 1], 2, 1).unwrap(), 0.8333, 1e-4),
        ("ap rank 2 of 2", average_precision_grades(&[0, 1], 1, 1).unwrap(), 0.5, 0.0),
        ("rr rank 3", reciprocal_rank_grades(&[0, 0, 1], 10, 1), 1.0 / 3.0, 0.0),
    ]
}

/// Dense weights that are uniform over each row's allowed columns.
pub fn uniform_trace(layout: &SequenceLayout, preset: Preset, window: usize, heads: usize) -> AttentionTrace {
    let pattern = build_pattern(layout, &PatternConfig::new(preset, window).unwrap()).unwrap();
    let n = layout.n();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let support = (0..n).filter(|&j| pattern.contains(i, j)).count();
            (0..n).map(|j| if pattern.contains(i, j) { 1.0 / support as f64 } else { 0.0 }).collect()
        })
        .collect();
    AttentionTrace::from_dense(&pattern, &vec![rows; heads]).unwrap()
}

/// The analysis fixtures; returns one description per satisfied check.
pub fn check_analysis_fixtures() -> Result<Vec<String>, String> {
    let fail = |what: &str| Err(what.to_string());
    let mut passed = Vec::new();

    let tiny = 1e-15;
    if (entropy(&[0.25; 4]) - 4f64.ln()).abs() > tiny {
        return fail("uniform entropy != ln m");
    }
    if entropy(&[0.0, 1.0, 0.0]) != 0.0 {
        return fail("one-hot entropy != 0");
    }
    if (entropy(&[0.5, 0.25, 0.25]) - 1.5 * 2f64.ln()).abs() > tiny || (entropy(&[0.5, 0.25, 0.25]) - 1.0397).abs() > 1e-4 {
        return fail("entropy [0.5,0.25,0.25] != 1.0397");
    }
    passed.push("entropy ln m / 0 / 1.0397".to_string());

    // [CLS] q q [SEP] [SOS] d d [SOS] d
    let layout = build_layout(&[10, 11], &[vec![20, 21], vec![22]], 64).unwrap();
    let n = layout.n() as f64;
    let uniform = uniform_trace(&layout, Preset::Full, 0, 2);
    let traces = vec![vec![uniform]];
    let layouts = vec![layout.clone()];
    let prof = role_max_attention(&traces, &layouts).map_err(|e| e.to_string())?;
    for role in [TokenRole::Cls, TokenRole::Query, TokenRole::Sos] {
        if prof.get(1, role).is_none_or(|v| (v - 1.0 / n).abs() > tiny) {
            return Err(format!("uniform role max for {} is {:?}", role.as_str(), prof.get(1, role)));
        }
    }
    let ent = role_entropy(&traces, &layouts).map_err(|e| e.to_string())?;
    if ent.rows().iter().any(|&(_, _, v)| (v - n.ln()).abs() > 1e-12) {
        return fail("uniform role entropy != ln n");
    }
    passed.push("uniform rows: role max 1/support, entropy ln n".into());

    let sos = layout.sentence_starts()[1];
    let pattern = build_pattern(&layout, &PatternConfig::new(Preset::Full, 0).unwrap()).unwrap();
    let one_hot: Vec<Vec<f64>> = (0..layout.n()).map(|_| (0..layout.n()).map(|j| (j == sos) as u8 as f64).collect()).collect();
    let hot = AttentionTrace::from_dense(&pattern, &[one_hot]).unwrap();
    let prof = role_max_attention(&[vec![hot.clone()]], &layouts).map_err(|e| e.to_string())?;
    if prof.get(1, TokenRole::Sos) != Some(1.0) {
        return fail("one-hot onto SOS does not give 1.0");
    }
    passed.push("one-hot onto SOS gives 1.0".into());

    let hits = top_attended_sentences(&[hot], &layout, Source::Cls, 1, true, 5).map_err(|e| e.to_string())?;
    if hits.first().map(|h| (h.sentence, h.weight)) != Some((1, 1.0)) || hits.len() != 2 {
        return Err(format!("top sentences for concentrated attention: {hits:?}"));
    }
    passed.push("concentrated attention ranks its sentence first".into());

    let bare = build_layout(&[10, 11], &[], 64).unwrap();
    let t = uniform_trace(&bare, Preset::Full, 0, 1);
    let prof = role_max_attention(&[vec![t]], &[bare]).map_err(|e| e.to_string())?;
    if prof.get(1, TokenRole::Sos).is_some() {
        return fail("SOS profile present for a layout without sentences");
    }
    passed.push("no sentences: SOS profile absent".into());
    Ok(passed)
}

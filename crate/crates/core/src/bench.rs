//! Wall-clock benchmarks of the encoder across pattern presets and lengths.
//!
//! "forward" times one scoring pass; "train" times forward plus backward
//! (the optimizer step is excluded).

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{csv_err, csv_writer};
use crate::attention::{flop_estimate, KernelOptions};
use crate::error::{QdstError, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::pattern::{build_layout, build_pattern, special, sparsity, PatternConfig, Preset, SequenceLayout};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSpec {
    pub presets: Vec<Preset>,
    pub lengths: Vec<usize>,
    pub windows: Vec<usize>,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
    pub query_len: usize,
    /// Mean sentence length; actual lengths vary by up to 20%.
    pub sentence_len: usize,
    pub vocab_size: usize,
    pub threads: usize,
    /// Run cells concurrently (smoke runs only, timings interfere).
    pub parallel: bool,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            presets: vec![Preset::Full, Preset::Local, Preset::LongformerQa, Preset::Qds],
            lengths: vec![512, 1024, 2048],
            windows: vec![128],
            dim: 256,
            heads: 4,
            layers: 4,
            repetitions: 3,
            warmup: 1,
            seed: 0,
            query_len: 10,
            sentence_len: 25,
            vocab_size: 1000,
            threads: 1,
            parallel: false,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 3 {
            return Err(QdstError::invalid(format!("repetitions must be >= 3, got {}", self.repetitions)));
        }
        if self.presets.is_empty() || self.lengths.is_empty() {
            return Err(QdstError::invalid("bench needs at least one preset and one length"));
        }
        if self.presets.iter().any(|p| *p != Preset::Full) && self.windows.is_empty() {
            return Err(QdstError::invalid("sparse presets need at least one window"));
        }
        for &w in &self.windows {
            PatternConfig::new(Preset::Qds, w)?;
        }
        if self.query_len == 0 || self.sentence_len == 0 {
            return Err(QdstError::invalid("query_len and sentence_len must be >= 1"));
        }
        if let Some(&n) = self.lengths.iter().find(|&&n| n < self.query_len + 4) {
            return Err(QdstError::invalid(format!(
                "length {n} cannot hold a query of {} plus one sentence",
                self.query_len
            )));
        }
        if self.vocab_size <= special::RESERVED as usize {
            return Err(QdstError::invalid("vocab_size must exceed the reserved ids"));
        }
        self.model_config(Preset::Full, 2).validate()
    }

    fn max_len(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }

    fn model_config(&self, preset: Preset, window: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(
            self.layers,
            self.dim,
            self.heads,
            self.vocab_size,
            PatternConfig {
                preset,
                window,
                symmetric_globals: true,
            },
        );
        cfg.max_len = self.max_len();
        cfg.dropout_rate = 0.0;
        cfg
    }

    /// `(preset, window)` pairs; FULL ignores the window and appears once.
    fn variants(&self) -> Vec<(Preset, Option<usize>)> {
        let mut out = Vec::new();
        for &p in &self.presets {
            if p == Preset::Full {
                out.push((p, None));
            } else {
                out.extend(self.windows.iter().map(|&w| (p, Some(w))));
            }
        }
        out
    }
}

/// A query of `query_len` tokens followed by sentences of roughly
/// `sentence_len` tokens, exactly `n` positions long (PAD-filled if the last
/// sentence could not be kept).
pub fn synthetic_layout(n: usize, query_len: usize, sentence_len: usize, vocab_size: usize, seed: u64) -> Result<SequenceLayout> {
    if vocab_size <= special::RESERVED as usize {
        return Err(QdstError::invalid("vocab_size must exceed the reserved ids"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut token = || rng.random_range(special::RESERVED..vocab_size as u32);
    let query: Vec<u32> = (0..query_len).map(|_| token()).collect();
    let spread = sentence_len / 5;
    let mut sentences = Vec::new();
    let mut used = query_len + 2;
    while used < n {
        let len = sentence_len - spread + (token() as usize % (2 * spread + 1));
        sentences.push((0..len.max(1)).map(|_| token()).collect::<Vec<u32>>());
        used += len.max(1) + 1;
    }
    build_layout(&query, &sentences, n)?.with_padding(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub preset: Preset,
    pub length: usize,
    pub window: Option<usize>,
    pub nonzeros: usize,
    pub sparsity: f64,
    pub forward_ms_mean: f64,
    pub forward_ms_std: f64,
    pub train_ms_mean: f64,
    pub train_ms_std: f64,
    pub flop_estimate: u64,
    /// Set when the cell failed; timing columns are then NaN.
    pub error: Option<String>,
}

impl BenchRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn time_cell<T: Real>(model: &Model<T>, layout: &SequenceLayout, spec: &BenchSpec) -> Result<((f64, f64), (f64, f64))> {
    let mut grads = ModelParams::<T>::zeros(&model.config);
    let mut forward = Vec::with_capacity(spec.repetitions);
    let mut train = Vec::with_capacity(spec.repetitions);
    for rep in 0..spec.warmup + spec.repetitions {
        let t = Instant::now();
        let s = model.score_layout(layout)?;
        let f_ms = elapsed_ms(t);
        std::hint::black_box(s);

        grads.scale(T::zero());
        let t = Instant::now();
        let (_, cache) = model.forward_for_training(layout, None)?;
        model.backward(&cache, T::one(), &mut grads)?;
        let t_ms = elapsed_ms(t);
        drop(cache);
        if rep >= spec.warmup {
            forward.push(f_ms);
            train.push(t_ms);
        }
    }
    Ok((mean_std(&forward), mean_std(&train)))
}

fn run_cell<T: Real>(spec: &BenchSpec, preset: Preset, window: Option<usize>, length: usize) -> BenchRecord {
    let w = window.unwrap_or(0);
    let layout = synthetic_layout(length, spec.query_len, spec.sentence_len, spec.vocab_size, spec.seed);
    let cfg = spec.model_config(preset, w);
    let (nonzeros, fraction, flops) = match layout.as_ref().map(|l| build_pattern(l, &cfg.pattern)) {
        Ok(Ok(p)) => {
            let l = layout.as_ref().expect("ok");
            let (q, s) = match preset {
                Preset::Full | Preset::Local => (0, 0),
                Preset::LongformerQa => (0, 1),
                Preset::QdsQ => (l.query_len(), 0),
                Preset::QdsS => (0, l.sentence_starts().len()),
                Preset::Qds => (l.query_len(), l.sentence_starts().len()),
            };
            let est = flop_estimate(length as u64, spec.dim as u64, w as u64, q as u64, s as u64, preset == Preset::Full);
            let st = sparsity(&p);
            (st.nonzeros, st.fraction, est.total * spec.layers as u64)
        }
        _ => (0, f64::NAN, 0),
    };
    let timed = catch_unwind(AssertUnwindSafe(|| -> Result<_> {
        let layout = layout?;
        let model = Model::<T>::init(cfg, spec.seed)?.with_kernel(KernelOptions {
            threads: spec.threads,
            ..KernelOptions::default()
        });
        time_cell(&model, &layout, spec)
    }));
    let (timing, error) = match timed {
        Ok(Ok(t)) => (t, None),
        Ok(Err(e)) => (((f64::NAN, f64::NAN), (f64::NAN, f64::NAN)), Some(e.to_string())),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            (((f64::NAN, f64::NAN), (f64::NAN, f64::NAN)), Some(msg))
        }
    };
    BenchRecord {
        preset,
        length,
        window,
        nonzeros,
        sparsity: fraction,
        forward_ms_mean: timing.0 .0,
        forward_ms_std: timing.0 .1,
        train_ms_mean: timing.1 .0,
        train_ms_std: timing.1 .1,
        flop_estimate: flops,
        error,
    }
}

/// Times every `(preset, window, length)` cell. A failing cell is recorded
/// with its error and the run continues.
pub fn run_bench<T: Real>(spec: &BenchSpec, mut on_record: impl FnMut(&BenchRecord)) -> Result<Vec<BenchRecord>> {
    spec.validate()?;
    let cells: Vec<(Preset, Option<usize>, usize)> = spec
        .variants()
        .into_iter()
        .flat_map(|(p, w)| spec.lengths.iter().map(move |&n| (p, w, n)))
        .collect();
    if spec.parallel {
        let records: Vec<BenchRecord> = std::thread::scope(|s| {
            let handles: Vec<_> = cells
                .iter()
                .map(|&(p, w, n)| s.spawn(move || run_cell::<T>(spec, p, w, n)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("cell panics are caught")).collect()
        });
        records.iter().for_each(&mut on_record);
        return Ok(records);
    }
    let mut out = Vec::with_capacity(cells.len());
    for (p, w, n) in cells {
        let rec = run_cell::<T>(spec, p, w, n);
        on_record(&rec);
        out.push(rec);
    }
    Ok(out)
}

/// Least-squares slope of `ln(time)` against `ln(n)`.
pub fn scaling_exponent(points: &[(usize, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(QdstError::invalid(format!("need at least 3 points, got {}", points.len())));
    }
    if let Some((n, t)) = points.iter().find(|(n, t)| *n == 0 || !(t.is_finite() && *t > 0.0)) {
        return Err(QdstError::invalid(format!("unusable point (n={n}, time={t})")));
    }
    let lo = points.iter().map(|p| p.0).min().expect("non-empty");
    let hi = points.iter().map(|p| p.0).max().expect("non-empty");
    if hi < 4 * lo {
        return Err(QdstError::invalid(format!("lengths must span at least 4x, got {lo}..{hi}")));
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timing {
    Forward,
    Train,
}

/// Scaling exponent of one `(preset, window)` series from bench records.
pub fn series_exponent(records: &[BenchRecord], preset: Preset, window: Option<usize>, timing: Timing) -> Result<f64> {
    let window = if preset == Preset::Full { None } else { window };
    let points: Vec<(usize, f64)> = records
        .iter()
        .filter(|r| r.preset == preset && r.window == window && r.ok())
        .map(|r| {
            let t = match timing {
                Timing::Forward => r.forward_ms_mean,
                Timing::Train => r.train_ms_mean,
            };
            (r.length, t)
        })
        .collect();
    scaling_exponent(&points)
}

pub fn write_bench_csv(records: &[BenchRecord], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "preset",
        "length",
        "window",
        "nonzeros",
        "sparsity",
        "forward_ms_mean",
        "forward_ms_std",
        "train_ms_mean",
        "train_ms_std",
        "flop_estimate",
        "error",
    ])
    .map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record([
            r.preset.name().to_string(),
            r.length.to_string(),
            r.window.map(|w| w.to_string()).unwrap_or_default(),
            r.nonzeros.to_string(),
            r.sparsity.to_string(),
            format!("{:.4}", r.forward_ms_mean),
            format!("{:.4}", r.forward_ms_std),
            format!("{:.4}", r.train_ms_mean),
            format!("{:.4}", r.train_ms_std),
            r.flop_estimate.to_string(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| QdstError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchMetadata {
    pub os: String,
    pub arch: String,
    pub available_cores: usize,
    pub threads: usize,
    pub precision: String,
    pub commit: String,
    pub timing_scope: String,
    pub spec: BenchSpec,
}

impl BenchMetadata {
    pub fn collect(spec: &BenchSpec, precision: &str) -> Self {
        let commit = std::process::Command::new("git")
            .args(["rev-parse", "HEAD"])
            .output()
            .ok()
            .filter(|o| o.status.success())
            .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
            .unwrap_or_else(|| "unknown".into());
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            available_cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
            threads: spec.threads,
            precision: precision.into(),
            commit,
            timing_scope: "forward = one scoring pass; train = forward + backward, optimizer step excluded".into(),
            spec: spec.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("metadata serialises");
        std::fs::write(path, json).map_err(|e| QdstError::io(path, e))
    }
}

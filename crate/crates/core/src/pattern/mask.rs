use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::layout::SequenceLayout;
use crate::error::{QdstError, Result};

/// Named attention variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Full,
    #[serde(alias = "local_only")]
    Local,
    LongformerQa,
    QdsQ,
    QdsS,
    Qds,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Full,
        Preset::Local,
        Preset::LongformerQa,
        Preset::QdsQ,
        Preset::QdsS,
        Preset::Qds,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Local => "local",
            Self::LongformerQa => "longformer_qa",
            Self::QdsQ => "qds_q",
            Self::QdsS => "qds_s",
            Self::Qds => "qds",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = QdstError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Self::Full),
            "local" | "local_only" | "sparse_transformer" => Ok(Self::Local),
            "longformer_qa" | "longformer" => Ok(Self::LongformerQa),
            "qds_q" => Ok(Self::QdsQ),
            "qds_s" => Ok(Self::QdsS),
            "qds" => Ok(Self::Qds),
            other => Err(QdstError::invalid(format!("unknown preset '{other}'"))),
        }
    }
}

/// Window size plus preset. The preset fixes which global components are on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternConfig {
    pub preset: Preset,
    /// Local window `w` in tokens; a token sees neighbours within `w/2`.
    pub window: usize,
    /// Global tokens get both their row and their column. When false, query
    /// positions only get rows and `[SOS]` positions only get columns.
    /// Experimental; no preset relies on it.
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    pub symmetric_globals: bool,
}

fn default_true() -> bool {
    true
}

fn is_true(v: &bool) -> bool {
    *v
}

impl PatternConfig {
    pub fn new(preset: Preset, window: usize) -> Result<Self> {
        let cfg = Self {
            preset,
            window,
            symmetric_globals: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.window.is_multiple_of(2) {
            return Err(QdstError::invalid(format!("window must be even, got {}", self.window)));
        }
        Ok(())
    }

    pub fn half_window(&self) -> usize {
        self.window / 2
    }

    pub fn query_global(&self) -> bool {
        matches!(self.preset, Preset::QdsQ | Preset::Qds)
    }

    pub fn sentence_global(&self) -> bool {
        matches!(self.preset, Preset::QdsS | Preset::Qds)
    }

    pub fn cls_global(&self) -> bool {
        matches!(self.preset, Preset::QdsQ | Preset::QdsS | Preset::Qds)
    }
}

/// Attention adjacency as a diagonal band plus global rows and columns.
///
/// `contains(i, j)` holds when both positions are active (non-PAD) and one of:
/// the pattern is full, `|i - j| <= half_window`, `i` is a global row, or `j`
/// is a global column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSparsePattern {
    n: usize,
    active: usize,
    half_window: Option<usize>,
    global_rows: Vec<usize>,
    global_cols: Vec<usize>,
    full: bool,
}

impl BlockSparsePattern {
    /// Pattern with no edges; combine with [`Self::with_globals`].
    pub fn empty(n: usize, active: usize) -> Self {
        Self {
            n,
            active,
            half_window: None,
            global_rows: Vec::new(),
            global_cols: Vec::new(),
            full: false,
        }
    }

    /// Full attention among the first `active` of `n` positions.
    pub fn full(n: usize, active: usize) -> Self {
        Self {
            full: true,
            ..Self::empty(n, active.min(n))
        }
    }

    /// Band-only pattern with an explicit half window.
    pub fn band(n: usize, active: usize, half_window: usize) -> Self {
        Self {
            half_window: Some(half_window),
            ..Self::empty(n, active.min(n))
        }
    }

    pub fn with_globals(mut self, rows: impl IntoIterator<Item = usize>, cols: impl IntoIterator<Item = usize>) -> Self {
        let active = self.active;
        self.global_rows.extend(rows.into_iter().filter(|&p| p < active));
        self.global_cols.extend(cols.into_iter().filter(|&p| p < active));
        normalize(&mut self.global_rows);
        normalize(&mut self.global_cols);
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of leading non-PAD positions.
    pub fn active(&self) -> usize {
        self.active
    }

    pub fn half_window(&self) -> Option<usize> {
        self.half_window
    }

    pub fn global_rows(&self) -> &[usize] {
        &self.global_rows
    }

    pub fn global_cols(&self) -> &[usize] {
        &self.global_cols
    }

    pub fn is_full(&self) -> bool {
        self.full
    }

    pub fn is_global_row(&self, i: usize) -> bool {
        self.global_rows.binary_search(&i).is_ok()
    }

    pub fn is_global_col(&self, j: usize) -> bool {
        self.global_cols.binary_search(&j).is_ok()
    }

    #[inline]
    pub fn in_band(&self, i: usize, j: usize) -> bool {
        self.half_window.is_some_and(|hw| i.abs_diff(j) <= hw)
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        if i >= self.active || j >= self.active {
            return false;
        }
        self.full || self.in_band(i, j) || self.is_global_row(i) || self.is_global_col(j)
    }

    /// Whether row `i` is dense: full pattern, global row, or a band wide enough.
    pub fn row_is_dense(&self, i: usize) -> bool {
        i < self.active
            && (self.full
                || self.is_global_row(i)
                || self.half_window.is_some_and(|hw| i <= hw && self.active - 1 - i <= hw))
    }

    /// Columns allowed in row `i`, ascending. Each column appears once.
    pub fn row_columns(&self, i: usize) -> Vec<usize> {
        let mut out = Vec::new();
        self.extend_row_columns(i, &mut out);
        out
    }

    pub(crate) fn extend_row_columns(&self, i: usize, out: &mut Vec<usize>) {
        if i >= self.active {
            return;
        }
        if self.row_is_dense(i) {
            out.extend(0..self.active);
            return;
        }
        let (lo, hi) = match self.half_window {
            Some(hw) => (i.saturating_sub(hw), (i + hw).min(self.active - 1) + 1),
            None => (0, 0),
        };
        let split = self.global_cols.partition_point(|&c| c < lo);
        out.extend_from_slice(&self.global_cols[..split]);
        out.extend(lo..hi);
        out.extend(self.global_cols[split..].iter().copied().filter(|&c| c >= hi));
    }

    /// Union of two patterns of the same length.
    pub fn union(&self, other: &Self) -> Result<Self> {
        if self.n != other.n || self.active != other.active {
            return Err(QdstError::invalid(format!(
                "cannot union patterns of shape ({}, active {}) and ({}, active {})",
                self.n, self.active, other.n, other.active
            )));
        }
        let half_window = match (self.half_window, other.half_window) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        let mut out = Self {
            n: self.n,
            active: self.active,
            half_window,
            global_rows: self.global_rows.iter().chain(&other.global_rows).copied().collect(),
            global_cols: self.global_cols.iter().chain(&other.global_cols).copied().collect(),
            full: self.full || other.full,
        };
        normalize(&mut out.global_rows);
        normalize(&mut out.global_cols);
        Ok(out)
    }

    /// Exact count of allowed pairs without enumerating all `n^2` cells.
    pub fn nonzeros(&self) -> usize {
        (0..self.active)
            .map(|i| {
                if self.row_is_dense(i) {
                    return self.active;
                }
                let band = match self.half_window {
                    Some(hw) => (i + hw).min(self.active - 1) + 1 - i.saturating_sub(hw),
                    None => 0,
                };
                let outside = self.global_cols.iter().filter(|&&c| !self.in_band(i, c)).count();
                band + outside
            })
            .sum()
    }

    /// Row-major 0/1 expansion; intended for small `n`.
    pub fn to_dense(&self) -> Vec<Vec<u8>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| u8::from(self.contains(i, j))).collect())
            .collect()
    }
}

fn normalize(v: &mut Vec<usize>) {
    v.sort_unstable();
    v.dedup();
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    pub nonzeros: usize,
    pub total: usize,
    pub fraction: f64,
}

pub fn sparsity(pattern: &BlockSparsePattern) -> SparsityStats {
    let nonzeros = pattern.nonzeros();
    let total = pattern.n() * pattern.n();
    SparsityStats {
        nonzeros,
        total,
        fraction: if total == 0 { 0.0 } else { nonzeros as f64 / total as f64 },
    }
}

/// Band pattern allowing `|i - j| <= w/2`.
pub fn local_mask(n: usize, window: usize) -> Result<BlockSparsePattern> {
    if n == 0 {
        return Err(QdstError::invalid("local mask needs n >= 1"));
    }
    if !window.is_multiple_of(2) {
        return Err(QdstError::invalid(format!("window must be even, got {window}")));
    }
    Ok(BlockSparsePattern::band(n, n, window / 2))
}

fn globals_only(layout: &SequenceLayout) -> BlockSparsePattern {
    BlockSparsePattern::empty(layout.n(), layout.active_len())
}

/// Every token attends every `[SOS]`, and every `[SOS]` attends everything.
pub fn sentence_mask(layout: &SequenceLayout) -> BlockSparsePattern {
    sentence_mask_with(layout, true)
}

fn sentence_mask_with(layout: &SequenceLayout, symmetric: bool) -> BlockSparsePattern {
    let starts = layout.sentence_starts().iter().copied();
    let rows: Vec<usize> = if symmetric { starts.clone().collect() } else { Vec::new() };
    globals_only(layout).with_globals(rows, starts)
}

/// Query tokens attend everything, and everything attends the query tokens.
pub fn query_mask(layout: &SequenceLayout) -> BlockSparsePattern {
    query_mask_with(layout, true)
}

fn query_mask_with(layout: &SequenceLayout, symmetric: bool) -> BlockSparsePattern {
    let span = layout.query_span();
    let cols = if symmetric { span.clone() } else { 0..0 };
    globals_only(layout).with_globals(span, cols)
}

/// Global row and column on `[CLS]`.
pub fn cls_mask(layout: &SequenceLayout) -> BlockSparsePattern {
    globals_only(layout).with_globals([0], [0])
}

/// Union of the components a preset enables. PAD positions get no edges.
pub fn build_pattern(layout: &SequenceLayout, config: &PatternConfig) -> Result<BlockSparsePattern> {
    config.validate()?;
    let n = layout.n();
    let active = layout.active_len();
    if config.preset == Preset::Full {
        return Ok(BlockSparsePattern::full(n, active));
    }
    let mut pattern = BlockSparsePattern::band(n, active, config.half_window());
    if config.preset == Preset::LongformerQa {
        let mut specials = vec![0];
        specials.extend(layout.sentence_starts().first().copied());
        return Ok(pattern.with_globals(specials.clone(), specials));
    }
    let symmetric = config.symmetric_globals;
    if config.query_global() {
        pattern = pattern.union(&query_mask_with(layout, symmetric))?;
    }
    if config.sentence_global() {
        pattern = pattern.union(&sentence_mask_with(layout, symmetric))?;
    }
    if config.cls_global() {
        pattern = pattern.union(&cls_mask(layout))?;
    }
    Ok(pattern)
}

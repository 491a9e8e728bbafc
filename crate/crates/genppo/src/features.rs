//! Weight-space features: per-layer statistics with exact vector-Jacobian
//! products, Pearson-based feature selection, the normalized weight image,
//! and the binary weight-snapshot file format.
//!
//! The statistics vector per layer is
//! `[mean, variance, p0, p25, p50, p75, p100]` with population variance and
//! linearly interpolated percentiles. These are the predictor's inputs, and
//! because the upgraded loss differentiates the predictor's score with
//! respect to the policy weights, every statistic here carries an exact
//! (sub)gradient.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Matrix;

/// Number of statistics per layer.
pub const STATS_PER_LAYER: usize = 7;
/// Feature names per layer, in vector order.
pub const STAT_NAMES: [&str; STATS_PER_LAYER] = ["mean", "var", "p0", "p25", "p50", "p75", "p100"];

/// Canonical policy-layer shapes (input x output): 147x64, 64x64, 64x7.
pub const CANONICAL_SHAPES: [(usize, usize); 3] = [(147, 64), (64, 64), (64, 7)];
/// Width of the weight image; one observation's worth of values per row.
pub const IMAGE_WIDTH: usize = 147;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("snapshot shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("zero variance: {0}")]
    ZeroVariance(&'static str),
    #[error("no feature passes the selection threshold {0}")]
    AllFiltered(f64),
    #[error("bad magic bytes (expected \"RLWB\")")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    VersionUnsupported(u16),
    #[error("weight file truncated")]
    TruncatedFile,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// The raw policy weight matrices of one agent, biases excluded. Layer
/// matrices are stored input x output, matching the order in which values
/// are concatenated for the weight image.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSnapshot {
    pub layers: Vec<Matrix>,
    pub agent_id: String,
    pub provenance: String,
}

impl WeightSnapshot {
    pub fn new(layers: Vec<Matrix>, agent_id: impl Into<String>) -> Self {
        WeightSnapshot { layers, agent_id: agent_id.into(), provenance: String::new() }
    }

    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(|m| m.data().len()).sum()
    }

    pub fn num_features(&self) -> usize {
        self.layers.len() * STATS_PER_LAYER
    }

    /// Checks the canonical 147x64 / 64x64 / 64x7 geometry used by the
    /// dataset pipeline.
    pub fn validate_canonical(&self) -> Result<(), FeatureError> {
        if self.layers.len() != CANONICAL_SHAPES.len() {
            return Err(FeatureError::ShapeMismatch(format!(
                "expected {} layers, got {}",
                CANONICAL_SHAPES.len(),
                self.layers.len()
            )));
        }
        for (m, (rows, cols)) in self.layers.iter().zip(CANONICAL_SHAPES) {
            if m.rows() != rows || m.cols() != cols {
                return Err(FeatureError::ShapeMismatch(format!(
                    "expected {}x{}, got {}x{}",
                    rows,
                    cols,
                    m.rows(),
                    m.cols()
                )));
            }
        }
        Ok(())
    }
}

/// Statistical abstraction of one layer's weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub mean: f64,
    pub variance: f64,
    pub p0: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p100: f64,
}

impl LayerStats {
    pub fn compute(values: &[f64]) -> LayerStats {
        assert!(!values.is_empty());
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let mut sorted = values.to_vec();
        sorted.sort_unstable_by(f64::total_cmp);
        LayerStats {
            mean,
            variance,
            p0: percentile(&sorted, 0.0),
            p25: percentile(&sorted, 25.0),
            p50: percentile(&sorted, 50.0),
            p75: percentile(&sorted, 75.0),
            p100: percentile(&sorted, 100.0),
        }
    }

    pub fn as_array(&self) -> [f64; STATS_PER_LAYER] {
        [self.mean, self.variance, self.p0, self.p25, self.p50, self.p75, self.p100]
    }
}

/// Linearly interpolated percentile of an already-sorted slice, using the
/// `q * (n - 1) / 100` index convention.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q / 100.0 * (n - 1) as f64;
    let k = pos.floor() as usize;
    let frac = pos - k as f64;
    if k + 1 < n {
        (1.0 - frac) * sorted[k] + frac * sorted[k + 1]
    } else {
        sorted[n - 1]
    }
}

/// All layer statistics concatenated layer-major; 7 entries per layer in
/// [`STAT_NAMES`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Extracts the per-layer statistics of a snapshot.
pub fn extract_stats(snapshot: &WeightSnapshot) -> FeatureVector {
    let mut values = Vec::with_capacity(snapshot.num_features());
    for layer in &snapshot.layers {
        values.extend_from_slice(&LayerStats::compute(layer.data()).as_array());
    }
    FeatureVector { values }
}

/// Vector-Jacobian product of [`extract_stats`]: given an upstream gradient
/// over the feature vector, returns the gradient over every weight, in
/// snapshot orientation.
///
/// Mean contributes `1/n` to each element, variance `2(x_i - mean)/n`, and a
/// percentile its interpolation weights `(1 - frac, frac)` on the two
/// bracketing order statistics. At ties the whole weight goes to the lowest
/// original index holding the tied value (a valid subgradient; finite
/// differences only apply where layer values are distinct).
pub fn stats_vjp(snapshot: &WeightSnapshot, upstream: &[f64]) -> Result<Vec<Matrix>, FeatureError> {
    if upstream.len() != snapshot.num_features() {
        return Err(FeatureError::ShapeMismatch(format!(
            "upstream length {} does not match {} features",
            upstream.len(),
            snapshot.num_features()
        )));
    }
    let mut grads = Vec::with_capacity(snapshot.layers.len());
    for (li, layer) in snapshot.layers.iter().enumerate() {
        let values = layer.data();
        let n = values.len();
        let u = &upstream[li * STATS_PER_LAYER..(li + 1) * STATS_PER_LAYER];
        let mean = values.iter().sum::<f64>() / n as f64;
        let mut grad = vec![0.0; n];

        if u[0] != 0.0 {
            let share = u[0] / n as f64;
            grad.iter_mut().for_each(|g| *g += share);
        }
        if u[1] != 0.0 {
            for (g, v) in grad.iter_mut().zip(values) {
                *g += u[1] * 2.0 * (v - mean) / n as f64;
            }
        }

        // Sorted (value, original index) pairs; stable in the original index
        // for equal values, so the first pair of a tie run has the lowest
        // original index.
        let mut order: Vec<(f64, usize)> = values.iter().cloned().zip(0..n).collect();
        order.sort_unstable_by(|a, b| f64::total_cmp(&a.0, &b.0).then(a.1.cmp(&b.1)));
        let lowest_tied = |k: usize| -> usize {
            let v = order[k].0;
            let first = order.partition_point(|p| p.0 < v);
            order[first].1
        };

        for (stat, &q) in [25.0f64, 50.0, 75.0].iter().enumerate().map(|(i, q)| (i + 3, q)) {
            let uq = u[stat];
            if uq == 0.0 {
                continue;
            }
            let pos = q / 100.0 * (n - 1) as f64;
            let k = pos.floor() as usize;
            let frac = pos - k as f64;
            grad[lowest_tied(k)] += uq * (1.0 - frac);
            if frac > 0.0 && k + 1 < n {
                grad[lowest_tied(k + 1)] += uq * frac;
            }
        }
        if u[2] != 0.0 {
            grad[lowest_tied(0)] += u[2]; // p0 = min
        }
        if u[6] != 0.0 {
            grad[lowest_tied(n - 1)] += u[6]; // p100 = max
        }

        grads.push(Matrix::from_vec(layer.rows(), layer.cols(), grad).expect("congruent"));
    }
    Ok(grads)
}

/// Sample Pearson correlation coefficient of two equal-length vectors.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, FeatureError> {
    assert_eq!(x.len(), y.len(), "pearson needs equal lengths");
    assert!(x.len() >= 2, "pearson needs at least two points");
    // Constancy is checked on the values themselves; a sum-of-squares test
    // would miss constants whose mean rounds away from them.
    if x.iter().all(|v| *v == x[0]) {
        return Err(FeatureError::ZeroVariance("first argument is constant"));
    }
    if y.iter().all(|v| *v == y[0]) {
        return Err(FeatureError::ZeroVariance("second argument is constant"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(FeatureError::ZeroVariance("degenerate spread"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Which features feed the predictor, with the per-feature Pearson scores
/// that justified the choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMask {
    pub selected: Vec<bool>,
    pub threshold: f64,
    pub scores: Vec<f64>,
}

impl FeatureMask {
    /// Keeps every feature of an n-feature vector; scores are set to 1.
    pub fn all(num_features: usize) -> FeatureMask {
        FeatureMask {
            selected: vec![true; num_features],
            threshold: 0.0,
            scores: vec![1.0; num_features],
        }
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn cardinality(&self) -> usize {
        self.selected.iter().filter(|s| **s).count()
    }

    /// Projects a full feature vector down to the selected components.
    pub fn apply(&self, features: &FeatureVector) -> Result<Vec<f64>, FeatureError> {
        if features.len() != self.selected.len() {
            return Err(FeatureError::ShapeMismatch(format!(
                "mask length {} vs feature length {}",
                self.selected.len(),
                features.len()
            )));
        }
        Ok(features
            .values
            .iter()
            .zip(&self.selected)
            .filter(|(_, keep)| **keep)
            .map(|(v, _)| *v)
            .collect())
    }

    /// Scatters a gradient over the selected components back to full width,
    /// zeros elsewhere.
    pub fn scatter(&self, selected_grad: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.selected.len()];
        let mut it = selected_grad.iter();
        for (slot, keep) in full.iter_mut().zip(&self.selected) {
            if *keep {
                *slot = *it.next().expect("gradient length matches cardinality");
            }
        }
        full
    }

    /// Human-readable names of the selected features.
    pub fn selected_names(&self) -> Vec<String> {
        self.selected
            .iter()
            .enumerate()
            .filter(|(_, keep)| **keep)
            .map(|(i, _)| feature_name(i))
            .collect()
    }
}

/// Name of feature `index` in a layer-major feature vector: `L1_mean`,
/// `L1_var`, ... layers are 1-based.
pub fn feature_name(index: usize) -> String {
    format!("L{}_{}", index / STATS_PER_LAYER + 1, STAT_NAMES[index % STATS_PER_LAYER])
}

/// Selects feature `j` iff `|pearson(column_j, labels)| >= threshold`.
/// Constant columns are excluded with a recorded score of 0.
pub fn select_features(
    feature_matrix: &[FeatureVector],
    labels: &[f64],
    threshold: f64,
) -> Result<FeatureMask, FeatureError> {
    assert!(feature_matrix.len() >= 2, "need at least two agents");
    assert_eq!(feature_matrix.len(), labels.len());
    let num_features = feature_matrix[0].len();
    let mut scores = Vec::with_capacity(num_features);
    let mut selected = Vec::with_capacity(num_features);
    for j in 0..num_features {
        let column: Vec<f64> = feature_matrix.iter().map(|f| f.values[j]).collect();
        let score = match pearson(&column, labels) {
            Ok(r) => r,
            Err(FeatureError::ZeroVariance(_)) => 0.0,
            Err(e) => return Err(e),
        };
        selected.push(score.abs() >= threshold && score != 0.0);
        scores.push(score);
    }
    if !selected.iter().any(|s| *s) {
        return Err(FeatureError::AllFiltered(threshold));
    }
    Ok(FeatureMask { selected, threshold, scores })
}

/// The min-max normalized, width-147 image of all policy weights
/// concatenated in layer order (row-major within each layer), zero-padded to
/// a whole number of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightImage {
    pub rows: usize,
    pub width: usize,
    /// Row-major, `rows * width` values in [0, 1].
    pub values: Vec<f64>,
}

/// Builds the weight image with global min-max normalization across all
/// layers. A snapshot whose weights are all equal maps to 0.5 everywhere.
pub fn build_weight_image(snapshot: &WeightSnapshot) -> WeightImage {
    let total = snapshot.num_weights();
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for layer in &snapshot.layers {
        for v in layer.iter() {
            min = min.min(*v);
            max = max.max(*v);
        }
    }
    let rows = total.div_ceil(IMAGE_WIDTH);
    let mut values = Vec::with_capacity(rows * IMAGE_WIDTH);
    let span = max - min;
    for layer in &snapshot.layers {
        for v in layer.iter() {
            values.push(if span == 0.0 { 0.5 } else { (v - min) / span });
        }
    }
    values.resize(rows * IMAGE_WIDTH, 0.0);
    WeightImage { rows, width: IMAGE_WIDTH, values }
}

const MAGIC: &[u8; 4] = b"RLWB";
const FORMAT_VERSION: u16 = 1;

/// Writes a snapshot in the binary weight format: magic `RLWB`, version u16,
/// layer count u8, then per layer rows u32, cols u32 and row-major 64-bit
/// little-endian reals.
pub fn save_snapshot(path: &Path, snapshot: &WeightSnapshot) -> Result<(), FeatureError> {
    let mut buf = Vec::with_capacity(7 + snapshot.num_weights() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(snapshot.layers.len() as u8);
    for layer in &snapshot.layers {
        buf.extend_from_slice(&(layer.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(layer.cols() as u32).to_le_bytes());
        for v in layer.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads a snapshot written by [`save_snapshot`]. The agent id is recovered
/// from the file stem; the format itself stores only the matrices.
pub fn load_snapshot(path: &Path) -> Result<WeightSnapshot, FeatureError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8], FeatureError> {
        if *cursor + n > bytes.len() {
            return Err(FeatureError::TruncatedFile);
        }
        let slice = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(slice)
    };

    if take(&mut cursor, 4)? != MAGIC {
        return Err(FeatureError::BadMagic);
    }
    let version = u16::from_le_bytes(take(&mut cursor, 2)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(FeatureError::VersionUnsupported(version));
    }
    let layer_count = take(&mut cursor, 1)?[0] as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let rows = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()));
        }
        layers.push(Matrix::from_vec(rows, cols, data).expect("sizes just read"));
    }
    let agent_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(WeightSnapshot { layers, agent_id, provenance: path.display().to_string() })
}

/// Writes a feature matrix as CSV with a header naming features `L{i}_{stat}`
/// plus leading `agent_id` and trailing `zeta` columns.
pub fn write_feature_csv(
    path: &Path,
    ids: &[String],
    features: &[FeatureVector],
    labels: &[f64],
) -> Result<(), FeatureError> {
    assert_eq!(ids.len(), features.len());
    assert_eq!(ids.len(), labels.len());
    let num_features = features.first().map(|f| f.len()).unwrap_or(0);
    let mut out = String::from("agent_id");
    for j in 0..num_features {
        out.push(',');
        out.push_str(&feature_name(j));
    }
    out.push_str(",zeta\n");
    for ((id, fv), label) in ids.iter().zip(features).zip(labels) {
        out.push_str(id);
        for v in &fv.values {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push(',');
        out.push_str(&label.to_string());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

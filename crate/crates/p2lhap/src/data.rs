//! Dataset ingestion, normalization, patching and synthetic streams.
//!
//! A [`SensorSequence`] is an L x M block of samples with one activity label
//! per row. Patching slices each channel independently into length-P pieces
//! (stride S) plus one trailing fill patch made of replicas of the last
//! sample; the patch count is always `N = (L - P) / S + 2`.

use std::fmt::Write as _;
use std::path::Path;

use crate::numerics::{SplitMix64, Tensor};

pub const NORM_EPS: f32 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("line {line}: {msg}")]
    MalformedRow { line: usize, msg: String },

    #[error("line {line}: unknown label {label:?}; known labels: {known}")]
    UnknownLabel { line: usize, label: String, known: String },

    #[error("descriptor: {0}")]
    Descriptor(String),

    #[error("patch length {p} exceeds sequence length {l}")]
    PatchTooLong { p: usize, l: usize },

    #[error("invalid patching parameters: P={p}, S={s}")]
    BadPatchParams { p: usize, s: usize },

    #[error("split fractions {0:?} must be positive and sum to 1")]
    BadSplit([f64; 3]),

    #[error("split {name} has {len} samples, below the window length {window}")]
    SplitTooShort { name: &'static str, len: usize, window: usize },

    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),

    #[error("need at least 1 channel, got {0}")]
    NoChannels(usize),
}

/// An L x M multichannel stream with per-sample activity labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSequence {
    /// Row-major L x M sample block.
    pub samples: Tensor,
    /// One class id per row, each in [0, C).
    pub labels: Vec<usize>,
    pub sample_rate_hz: f64,
    pub channel_names: Vec<String>,
    /// Class names; position fixes the class id.
    pub class_names: Vec<String>,
}

impl SensorSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    /// Contiguous sub-sequence [start, end).
    pub fn slice(&self, start: usize, end: usize) -> SensorSequence {
        let m = self.channels();
        SensorSequence {
            samples: Tensor::from_vec(
                &[end - start, m],
                self.samples.data()[start * m..end * m].to_vec(),
            )
            .expect("slice bounds"),
            labels: self.labels[start..end].to_vec(),
            sample_rate_hz: self.sample_rate_hz,
            channel_names: self.channel_names.clone(),
            class_names: self.class_names.clone(),
        }
    }
}

/// Per-channel normalization statistics of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    pub fn denormalize(&self, channel: usize, value: f32) -> f32 {
        value * (self.std[channel] + NORM_EPS) + self.mean[channel]
    }
}

/// Z-scores each channel over the whole sequence: (x - mean) / (std + 1e-5).
/// Population standard deviation; constant channels map to zero.
pub fn normalize_channels(seq: &SensorSequence) -> (SensorSequence, NormStats) {
    let l = seq.len();
    let m = seq.channels();
    let mut mean = vec![0.0f32; m];
    let mut std = vec![0.0f32; m];
    let data = seq.samples.data();
    for c in 0..m {
        let mut acc = 0.0f64;
        for r in 0..l {
            acc += data[r * m + c] as f64;
        }
        let mu = acc / l as f64;
        let mut var = 0.0f64;
        for r in 0..l {
            let d = data[r * m + c] as f64 - mu;
            var += d * d;
        }
        mean[c] = mu as f32;
        std[c] = (var / l as f64).sqrt() as f32;
    }
    let mut out = data.to_vec();
    for r in 0..l {
        for c in 0..m {
            out[r * m + c] = (out[r * m + c] - mean[c]) / (std[c] + NORM_EPS);
        }
    }
    let normalized = SensorSequence {
        samples: Tensor::from_vec(&[l, m], out).expect("same shape"),
        ..seq.clone()
    };
    (normalized, NormStats { mean, std })
}

/// Patch count for a sequence of length `l`: real patches at offsets
/// 0, S, 2S, ... plus the trailing fill patch.
pub fn patch_count(l: usize, p: usize, s: usize) -> usize {
    (l - p) / s + 2
}

/// Channel-independent patch tensor plus bookkeeping for one batch of
/// equally long sequences.
#[derive(Debug, Clone)]
pub struct PatchBatch {
    /// (B*M) x N x P; row blocks ordered (sequence, channel).
    pub patches: Tensor,
    /// B x N patch-level labels; the fill column carries the label of the
    /// final sample, which is what the fill patch replicates.
    pub patch_labels: Vec<usize>,
    pub b: usize,
    pub m: usize,
    pub l: usize,
    pub n: usize,
    pub p: usize,
    pub s: usize,
    /// Per-sequence normalization statistics, indexed by batch position.
    pub norm_stats: Vec<NormStats>,
}

/// Slice one normalized sequence into its (M, N, P) patch block.
///
/// Real patch k of channel c covers samples [k*S, k*S+P); the final patch
/// is P replicas of the channel's last sample.
pub fn make_patches(seq: &SensorSequence, p: usize, s: usize) -> Result<PatchBatch, DataError> {
    if p == 0 || s == 0 {
        return Err(DataError::BadPatchParams { p, s });
    }
    let l = seq.len();
    if p > l {
        return Err(DataError::PatchTooLong { p, l });
    }
    let (normalized, stats) = normalize_channels(seq);
    let m = seq.channels();
    let n = patch_count(l, p, s);
    let data = normalized.samples.data();
    let mut patches = vec![0.0f32; m * n * p];
    for c in 0..m {
        for k in 0..n - 1 {
            let base = (c * n + k) * p;
            for j in 0..p {
                patches[base + j] = data[(k * s + j) * m + c];
            }
        }
        let last = data[(l - 1) * m + c];
        let base = (c * n + n - 1) * p;
        patches[base..base + p].fill(last);
    }
    let mut patch_labels = derive_patch_labels(&seq.labels, p, s);
    patch_labels.push(seq.labels[l - 1]);
    Ok(PatchBatch {
        patches: Tensor::from_vec(&[m, n, p], patches).expect("patch layout"),
        patch_labels,
        b: 1,
        m,
        l,
        n,
        p,
        s,
        norm_stats: vec![stats],
    })
}

/// Stack per-sequence patch blocks into one (B*M) x N x P batch.
pub fn stack_batches(parts: Vec<PatchBatch>) -> PatchBatch {
    assert!(!parts.is_empty());
    let first = &parts[0];
    let (m, n, p, l, s) = (first.m, first.n, first.p, first.l, first.s);
    let b: usize = parts.iter().map(|x| x.b).sum();
    let mut data = Vec::with_capacity(b * m * n * p);
    let mut labels = Vec::with_capacity(b * n);
    let mut stats = Vec::with_capacity(b);
    for part in parts {
        assert_eq!((part.m, part.n, part.p), (m, n, p), "inhomogeneous batch");
        data.extend_from_slice(part.patches.data());
        labels.extend_from_slice(&part.patch_labels);
        stats.extend(part.norm_stats);
    }
    PatchBatch {
        patches: Tensor::from_vec(&[b * m, n, p], data).expect("stacked layout"),
        patch_labels: labels,
        b,
        m,
        l,
        n,
        p,
        s,
        norm_stats: stats,
    }
}

/// Majority label of each real patch; ties go to the class that appears
/// earliest within the patch. Output length is N-1 (the fill patch has no
/// samples of its own).
pub fn derive_patch_labels(labels: &[usize], p: usize, s: usize) -> Vec<usize> {
    let l = labels.len();
    let n = patch_count(l, p, s);
    let mut out = Vec::with_capacity(n - 1);
    for k in 0..n - 1 {
        out.push(majority_label(&labels[k * s..k * s + p]));
    }
    out
}

fn majority_label(window: &[usize]) -> usize {
    let max_class = window.iter().copied().max().unwrap_or(0);
    let mut count = vec![0usize; max_class + 1];
    let mut first_seen = vec![usize::MAX; max_class + 1];
    for (i, &c) in window.iter().enumerate() {
        count[c] += 1;
        if first_seen[c] == usize::MAX {
            first_seen[c] = i;
        }
    }
    let mut best = window[0];
    for c in 0..=max_class {
        if count[c] > count[best] || (count[c] == count[best] && first_seen[c] < first_seen[best]) {
            best = c;
        }
    }
    best
}

/// Train/validation/test fractions; must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train: 0.7, val: 0.1, test: 0.2 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fr = [self.train, self.val, self.test];
        let sum: f64 = fr.iter().sum();
        if fr.iter().any(|&f| f <= 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::BadSplit(fr));
        }
        Ok(())
    }
}

/// Contiguous, time-ordered partition: train first, then val, then test.
/// Boundaries use half-open intervals on floor(cumulative * L).
pub fn sequential_split(
    seq: &SensorSequence,
    spec: SplitSpec,
    min_len: usize,
) -> Result<(SensorSequence, SensorSequence, SensorSequence), DataError> {
    spec.validate()?;
    let l = seq.len();
    let train_end = (spec.train * l as f64).floor() as usize;
    let val_end = ((spec.train + spec.val) * l as f64).floor() as usize;
    let parts = [
        ("train", 0, train_end),
        ("val", train_end, val_end),
        ("test", val_end, l),
    ];
    for (name, a, b) in parts {
        if b - a < min_len {
            return Err(DataError::SplitTooShort { name, len: b - a, window: min_len });
        }
    }
    Ok((
        seq.slice(0, train_end),
        seq.slice(train_end, val_end),
        seq.slice(val_end, l),
    ))
}

// ── CSV ingestion ────────────────────────────────────────────────────

/// Column mapping for a delimited sensor file, parsed from a key=value
/// descriptor:
///
/// ```text
/// timestamp_col=0
/// channel_cols=1,2,3
/// label_col=4
/// delimiter=,
/// has_header=true
/// label_vocab=walking,jogging,sitting
/// sample_rate_hz=20
/// ```
///
/// The order of `label_vocab` fixes the class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FormatDescriptor {
    pub timestamp_col: usize,
    pub channel_cols: Vec<usize>,
    pub label_col: usize,
    pub delimiter: char,
    pub has_header: bool,
    pub label_vocab: Vec<String>,
    pub sample_rate_hz: f64,
}

impl FormatDescriptor {
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut timestamp_col = None;
        let mut channel_cols = None;
        let mut label_col = None;
        let mut delimiter = ',';
        let mut has_header = false;
        let mut label_vocab = None;
        let mut sample_rate_hz = 1.0;
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| DataError::Descriptor(format!("expected key=value, got {line:?}")))?;
            let value = value.trim();
            match key.trim() {
                "timestamp_col" => timestamp_col = Some(parse_usize(value, "timestamp_col")?),
                "label_col" => label_col = Some(parse_usize(value, "label_col")?),
                "channel_cols" => {
                    let cols: Result<Vec<usize>, _> = value
                        .split(',')
                        .map(|v| parse_usize(v.trim(), "channel_cols"))
                        .collect();
                    channel_cols = Some(cols?);
                }
                "delimiter" => {
                    delimiter = match value {
                        "\\t" => '\t',
                        v if v.chars().count() == 1 => v.chars().next().unwrap(),
                        v => return Err(DataError::Descriptor(format!("bad delimiter {v:?}"))),
                    };
                }
                "has_header" => {
                    has_header = value
                        .parse()
                        .map_err(|_| DataError::Descriptor(format!("bad has_header {value:?}")))?;
                }
                "label_vocab" => {
                    label_vocab =
                        Some(value.split(',').map(|v| v.trim().to_string()).collect::<Vec<_>>());
                }
                "sample_rate_hz" => {
                    sample_rate_hz = value
                        .parse()
                        .map_err(|_| DataError::Descriptor(format!("bad sample_rate_hz {value:?}")))?;
                }
                other => {
                    return Err(DataError::Descriptor(format!("unknown key {other:?}")));
                }
            }
        }
        Ok(Self {
            timestamp_col: timestamp_col
                .ok_or_else(|| DataError::Descriptor("missing timestamp_col".into()))?,
            channel_cols: channel_cols
                .ok_or_else(|| DataError::Descriptor("missing channel_cols".into()))?,
            label_col: label_col.ok_or_else(|| DataError::Descriptor("missing label_col".into()))?,
            delimiter,
            has_header,
            label_vocab: label_vocab
                .ok_or_else(|| DataError::Descriptor("missing label_vocab".into()))?,
            sample_rate_hz,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "timestamp_col={}", self.timestamp_col);
        let cols: Vec<String> = self.channel_cols.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(s, "channel_cols={}", cols.join(","));
        let _ = writeln!(s, "label_col={}", self.label_col);
        let delim = if self.delimiter == '\t' { "\\t".to_string() } else { self.delimiter.to_string() };
        let _ = writeln!(s, "delimiter={delim}");
        let _ = writeln!(s, "has_header={}", self.has_header);
        let _ = writeln!(s, "label_vocab={}", self.label_vocab.join(","));
        let _ = writeln!(s, "sample_rate_hz={}", self.sample_rate_hz);
        s
    }
}

fn parse_usize(value: &str, key: &str) -> Result<usize, DataError> {
    value
        .parse()
        .map_err(|_| DataError::Descriptor(format!("bad {key}: {value:?}")))
}

/// Load a delimited file under a [`FormatDescriptor`].
///
/// Empty or `NaN` channel cells are filled with the column mean over the
/// file. Unknown label strings and short rows are hard errors carrying the
/// 1-based line number.
pub fn load_csv(path: &Path, desc: &FormatDescriptor) -> Result<SensorSequence, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_csv_str(&text, desc)
}

pub fn load_csv_str(text: &str, desc: &FormatDescriptor) -> Result<SensorSequence, DataError> {
    let m = desc.channel_cols.len();
    let needed = desc
        .channel_cols
        .iter()
        .chain([&desc.timestamp_col, &desc.label_col])
        .max()
        .copied()
        .unwrap_or(0);
    let mut samples: Vec<f32> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut missing: Vec<(usize, usize)> = Vec::new(); // (row, channel)

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        if idx == 0 && desc.has_header {
            continue;
        }
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(desc.delimiter).collect();
        if fields.len() <= needed {
            return Err(DataError::MalformedRow {
                line: line_no,
                msg: format!("expected at least {} fields, got {}", needed + 1, fields.len()),
            });
        }
        let label_text = fields[desc.label_col].trim();
        let label = desc
            .label_vocab
            .iter()
            .position(|v| v == label_text)
            .ok_or_else(|| DataError::UnknownLabel {
                line: line_no,
                label: label_text.to_string(),
                known: desc.label_vocab.join(", "),
            })?;
        let row_idx = labels.len();
        for (c, &col) in desc.channel_cols.iter().enumerate() {
            // Trailing ';' shows up in some raw accelerometer dumps.
            let cell = fields[col].trim().trim_end_matches(';').trim();
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                samples.push(0.0);
                missing.push((row_idx, c));
            } else {
                let v: f32 = cell.parse().map_err(|_| DataError::MalformedRow {
                    line: line_no,
                    msg: format!("bad numeric value {cell:?} in column {col}"),
                })?;
                samples.push(v);
            }
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(DataError::MalformedRow { line: 0, msg: "file has no data rows".into() });
    }
    // Column-mean fill over present values.
    if !missing.is_empty() {
        let l = labels.len();
        let mut sums = vec![0.0f64; m];
        let mut counts = vec![0usize; m];
        let mut missing_mask = vec![false; l * m];
        for &(r, c) in &missing {
            missing_mask[r * m + c] = true;
        }
        for r in 0..l {
            for c in 0..m {
                if !missing_mask[r * m + c] {
                    sums[c] += samples[r * m + c] as f64;
                    counts[c] += 1;
                }
            }
        }
        for &(r, c) in &missing {
            let mean = if counts[c] > 0 { sums[c] / counts[c] as f64 } else { 0.0 };
            samples[r * m + c] = mean as f32;
        }
    }
    let l = labels.len();
    Ok(SensorSequence {
        samples: Tensor::from_vec(&[l, m], samples).expect("row-major parse"),
        labels,
        sample_rate_hz: desc.sample_rate_hz,
        channel_names: desc.channel_cols.iter().map(|c| format!("ch_{c}")).collect(),
        class_names: desc.label_vocab.clone(),
    })
}

/// Write a sequence in the same grammar the loader reads.
pub fn write_csv(seq: &SensorSequence) -> String {
    let m = seq.channels();
    let mut out = String::new();
    let mut header = String::from("timestamp");
    for name in &seq.channel_names {
        let _ = write!(header, ",{name}");
    }
    let _ = writeln!(out, "{header},label");
    let data = seq.samples.data();
    for r in 0..seq.len() {
        let t = r as f64 / seq.sample_rate_hz;
        let _ = write!(out, "{t:.6}");
        for c in 0..m {
            let _ = write!(out, ",{:.6}", data[r * m + c]);
        }
        let _ = writeln!(out, ",{}", seq.class_names[seq.labels[r]]);
    }
    out
}

/// Descriptor matching [`write_csv`] output.
pub fn synthetic_descriptor(m: usize, class_names: &[String], sample_rate_hz: f64) -> FormatDescriptor {
    FormatDescriptor {
        timestamp_col: 0,
        channel_cols: (1..=m).collect(),
        label_col: m + 1,
        delimiter: ',',
        has_header: true,
        label_vocab: class_names.to_vec(),
        sample_rate_hz,
    }
}

// ── synthetic stream ─────────────────────────────────────────────────

/// Parameters of the synthetic piecewise-stationary stream.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub channels: usize,
    pub segment_len: (usize, usize),
    pub n_segments: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { classes: 4, channels: 3, segment_len: (50, 100), n_segments: 60, seed: 7 }
    }
}

/// Deterministic labeled stream: segments cycle through the classes with
/// uniformly drawn lengths; class c emits a sinusoid of class-specific
/// frequency and amplitude per channel plus N(0, 0.1) noise.
///
/// Class frequencies are (c+1) Hz scaled per channel, so classes are
/// separable from short windows by construction.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SensorSequence, DataError> {
    if spec.classes < 2 {
        return Err(DataError::TooFewClasses(spec.classes));
    }
    if spec.channels == 0 {
        return Err(DataError::NoChannels(spec.channels));
    }
    let sample_rate_hz = 20.0;
    let mut rng = SplitMix64::new(spec.seed);
    let m = spec.channels;
    let mut samples: Vec<f32> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for seg in 0..spec.n_segments {
        let class = seg % spec.classes;
        let len = rng.int_in(spec.segment_len.0, spec.segment_len.1);
        let phase = rng.uniform(0.0, std::f64::consts::TAU);
        let freq = (class + 1) as f64;
        let amp = 1.0 + 0.25 * class as f64;
        for t in 0..len {
            for c in 0..m {
                let chan_freq = freq * (1.0 + 0.1 * c as f64);
                let chan_phase = phase + std::f64::consts::PI * c as f64 / m as f64;
                let x = amp
                    * (std::f64::consts::TAU * chan_freq * t as f64 / sample_rate_hz + chan_phase)
                        .sin()
                    + 0.1 * rng.normal();
                samples.push(x as f32);
            }
            labels.push(class);
        }
    }
    let l = labels.len();
    Ok(SensorSequence {
        samples: Tensor::from_vec(&[l, m], samples).expect("generator layout"),
        labels,
        sample_rate_hz,
        channel_names: (0..m).map(|c| format!("ch_{c}")).collect(),
        class_names: (0..spec.classes).map(|c| format!("class_{c}")).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_from(labels: Vec<usize>, m: usize, classes: usize) -> SensorSequence {
        let l = labels.len();
        let samples: Vec<f32> = (0..l * m).map(|i| i as f32).collect();
        SensorSequence {
            samples: Tensor::from_vec(&[l, m], samples).unwrap(),
            labels,
            sample_rate_hz: 20.0,
            channel_names: (0..m).map(|c| format!("ch_{c}")).collect(),
            class_names: (0..classes).map(|c| format!("class_{c}")).collect(),
        }
    }

    #[test]
    fn normalize_constant_channel_is_zero() {
        let mut seq = seq_from(vec![0; 3], 1, 2);
        seq.samples = Tensor::from_vec(&[3, 1], vec![5.0, 5.0, 5.0]).unwrap();
        let (norm, stats) = normalize_channels(&seq);
        assert_eq!(norm.samples.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(stats.mean[0], 5.0);
        assert_eq!(stats.std[0], 0.0);
    }

    #[test]
    fn normalize_two_point_channel() {
        let mut seq = seq_from(vec![0; 2], 1, 2);
        seq.samples = Tensor::from_vec(&[2, 1], vec![0.0, 2.0]).unwrap();
        let (norm, _) = normalize_channels(&seq);
        assert!((norm.samples.data()[0] + 1.0).abs() < 1e-4);
        assert!((norm.samples.data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn normalize_round_trips() {
        let spec = SyntheticSpec { n_segments: 4, ..Default::default() };
        let seq = generate_synthetic(&spec).unwrap();
        let (norm, stats) = normalize_channels(&seq);
        let m = seq.channels();
        for r in 0..seq.len() {
            for c in 0..m {
                let back = stats.denormalize(c, norm.samples.data()[r * m + c]);
                assert!((back - seq.samples.data()[r * m + c]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn normalize_is_idempotent() {
        let spec = SyntheticSpec { n_segments: 4, ..Default::default() };
        let seq = generate_synthetic(&spec).unwrap();
        let (once, _) = normalize_channels(&seq);
        let (twice, _) = normalize_channels(&once);
        for (a, b) in once.samples.data().iter().zip(twice.samples.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn patch_count_formula() {
        assert_eq!(patch_count(20, 5, 5), 5);
        assert_eq!(patch_count(10, 10, 10), 2);
        assert_eq!(patch_count(200, 10, 10), 21);
    }

    #[test]
    fn make_patches_basic_layout() {
        let seq = seq_from(vec![0; 20], 1, 2);
        let batch = make_patches(&seq, 5, 5).unwrap();
        assert_eq!(batch.n, 5);
        assert_eq!(batch.patches.shape(), &[1, 5, 5]);
        // Fill patch replicates the final normalized sample.
        let fill = &batch.patches.data()[4 * 5..5 * 5];
        assert!(fill.iter().all(|&v| v == fill[0]));
    }

    #[test]
    fn make_patches_single_patch_boundary() {
        let seq = seq_from(vec![0; 10], 1, 2);
        let batch = make_patches(&seq, 10, 10).unwrap();
        assert_eq!(batch.n, 2);
    }

    #[test]
    fn make_patches_rejects_long_patch() {
        let seq = seq_from(vec![0; 5], 1, 2);
        assert!(matches!(make_patches(&seq, 6, 6), Err(DataError::PatchTooLong { .. })));
    }

    #[test]
    fn stacked_batch_has_channel_rows() {
        let a = make_patches(&seq_from(vec![0; 20], 3, 2), 5, 5).unwrap();
        let b = make_patches(&seq_from(vec![1; 20], 3, 2), 5, 5).unwrap();
        let stacked = stack_batches(vec![a, b]);
        assert_eq!(stacked.b, 2);
        assert_eq!(stacked.patches.shape(), &[6, 5, 5]);
    }

    #[test]
    fn non_overlapping_patches_tile_the_stream() {
        // Every sample index below (N-1)*P appears in exactly one real patch.
        let l = 37;
        let p = 5;
        let n = patch_count(l, p, p);
        let mut covered = vec![0usize; l];
        for k in 0..n - 1 {
            for j in 0..p {
                covered[k * p + j] += 1;
            }
        }
        for (i, &c) in covered.iter().enumerate() {
            if i < (n - 1) * p {
                assert_eq!(c, 1, "sample {i}");
            } else {
                assert_eq!(c, 0, "sample {i}");
            }
        }
    }

    #[test]
    fn majority_labels() {
        assert_eq!(derive_patch_labels(&[2, 2, 2, 2], 4, 4), vec![2]);
        // Tie between classes 0 and 1; 0 appears first within the patch.
        assert_eq!(derive_patch_labels(&[0, 0, 1, 1], 4, 4), vec![0]);
        assert_eq!(derive_patch_labels(&[1, 0, 0, 0, 1], 5, 5), vec![0]);
        // Tie where the later id appears first.
        assert_eq!(derive_patch_labels(&[1, 1, 0, 0], 4, 4), vec![1]);
    }

    #[test]
    fn patch_label_length_invariant() {
        for l in [10usize, 23, 40] {
            for (p, s) in [(5, 5), (5, 3), (10, 10)] {
                if p > l {
                    continue;
                }
                let labels: Vec<usize> = (0..l).map(|i| i % 3).collect();
                let n = patch_count(l, p, s);
                assert_eq!(derive_patch_labels(&labels, p, s).len(), n - 1);
            }
        }
    }

    #[test]
    fn split_lengths_and_boundaries() {
        let seq = seq_from((0..100).map(|i| i % 2).collect(), 1, 2);
        let (train, val, test) = sequential_split(&seq, SplitSpec::default(), 1).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (70, 10, 20));
        // Sample 70 is the first element of val, not the last of train.
        assert_eq!(val.labels[0], seq.labels[70]);
        // Disjoint cover.
        let rebuilt: Vec<usize> = train
            .labels
            .iter()
            .chain(val.labels.iter())
            .chain(test.labels.iter())
            .copied()
            .collect();
        assert_eq!(rebuilt, seq.labels);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let seq = seq_from(vec![0; 100], 1, 2);
        let bad = SplitSpec { train: 0.5, val: 0.5, test: 0.1 };
        assert!(matches!(sequential_split(&seq, bad, 1), Err(DataError::BadSplit(_))));
    }

    #[test]
    fn split_rejects_short_partition() {
        let seq = seq_from(vec![0; 100], 1, 2);
        let err = sequential_split(&seq, SplitSpec::default(), 15).unwrap_err();
        assert!(err.to_string().contains("val"), "{err}");
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec { n_segments: 5, ..Default::default() };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(write_csv(&a), write_csv(&b));
    }

    #[test]
    fn synthetic_run_structure() {
        let spec = SyntheticSpec {
            n_segments: 3,
            segment_len: (50, 100),
            ..Default::default()
        };
        let seq = generate_synthetic(&spec).unwrap();
        let mut runs = 1;
        for w in seq.labels.windows(2) {
            if w[0] != w[1] {
                runs += 1;
            }
        }
        assert_eq!(runs, 3);
        for run in seq.labels.split(|&c| c != seq.labels[0]) {
            if !run.is_empty() {
                assert!(run.len() >= 50 && run.len() <= 100);
                break;
            }
        }
    }

    /// Naive DFT peak, the frequency oracle for the generator.
    fn dominant_freq_hz(samples: &[f32], rate: f64) -> f64 {
        let n = samples.len();
        let mean = samples.iter().sum::<f32>() / n as f32;
        let mut best = (0usize, 0.0f64);
        for k in 1..n / 2 {
            let mut re = 0.0f64;
            let mut im = 0.0f64;
            for (t, &x) in samples.iter().enumerate() {
                let ang = std::f64::consts::TAU * k as f64 * t as f64 / n as f64;
                re += (x - mean) as f64 * ang.cos();
                im -= (x - mean) as f64 * ang.sin();
            }
            let mag = re * re + im * im;
            if mag > best.1 {
                best = (k, mag);
            }
        }
        best.0 as f64 * rate / n as f64
    }

    #[test]
    fn classes_have_distinct_frequencies() {
        let spec = SyntheticSpec {
            n_segments: 8,
            segment_len: (100, 100),
            ..Default::default()
        };
        let seq = generate_synthetic(&spec).unwrap();
        let m = seq.channels();
        // Segments cycle 0,1,2,3,0,... with fixed length 100.
        let class0: Vec<f32> = (0..100).map(|r| seq.samples.data()[r * m]).collect();
        let class1: Vec<f32> = (100..200).map(|r| seq.samples.data()[r * m]).collect();
        let f0 = dominant_freq_hz(&class0, seq.sample_rate_hz);
        let f1 = dominant_freq_hz(&class1, seq.sample_rate_hz);
        assert!((f0 - 1.0).abs() < 0.3, "class0 peak {f0}");
        assert!((f1 - 2.0).abs() < 0.3, "class1 peak {f1}");
        assert!((f0 - f1).abs() > 0.5);
    }

    #[test]
    fn csv_round_trip_through_loader() {
        let spec = SyntheticSpec { n_segments: 4, ..Default::default() };
        let seq = generate_synthetic(&spec).unwrap();
        let text = write_csv(&seq);
        let desc = synthetic_descriptor(seq.channels(), &seq.class_names, seq.sample_rate_hz);
        let loaded = load_csv_str(&text, &desc).unwrap();
        assert_eq!(loaded.labels, seq.labels);
        assert_eq!(loaded.len(), seq.len());
        for (a, b) in loaded.samples.data().iter().zip(seq.samples.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn loader_parses_small_file() {
        let desc = FormatDescriptor::parse(
            "timestamp_col=0\nchannel_cols=1,2,3\nlabel_col=4\ndelimiter=,\nhas_header=false\nlabel_vocab=walk,run\nsample_rate_hz=20",
        )
        .unwrap();
        let seq = load_csv_str("0,0.1,0.2,0.3,walk\n1,0.4,0.5,0.6,walk\n2,0.7,0.8,0.9,run\n", &desc)
            .unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq.channels(), 3);
        assert_eq!(seq.labels, vec![0, 0, 1]);
    }

    #[test]
    fn loader_fills_missing_with_column_mean() {
        let desc = FormatDescriptor::parse(
            "timestamp_col=0\nchannel_cols=1,2\nlabel_col=3\ndelimiter=,\nhas_header=false\nlabel_vocab=a,b\nsample_rate_hz=20",
        )
        .unwrap();
        let seq = load_csv_str("0,1.0,5.0,a\n1,,6.0,a\n2,3.0,7.0,b\n", &desc).unwrap();
        // Column mean over present values: (1 + 3) / 2 = 2.
        assert_eq!(seq.samples.at2(1, 0), 2.0);
    }

    #[test]
    fn loader_rejects_unknown_label() {
        let desc = FormatDescriptor::parse(
            "timestamp_col=0\nchannel_cols=1\nlabel_col=2\ndelimiter=,\nhas_header=false\nlabel_vocab=a,b\nsample_rate_hz=20",
        )
        .unwrap();
        let err = load_csv_str("0,1.0,c\n", &desc).unwrap_err().to_string();
        assert!(err.contains("\"c\"") && err.contains("a, b"), "{err}");
    }

    #[test]
    fn loader_reports_line_numbers() {
        let desc = FormatDescriptor::parse(
            "timestamp_col=0\nchannel_cols=1\nlabel_col=2\ndelimiter=,\nhas_header=false\nlabel_vocab=a\nsample_rate_hz=20",
        )
        .unwrap();
        let err = load_csv_str("0,1.0,a\n1,zzz,a\n", &desc).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn descriptor_round_trip() {
        let desc = synthetic_descriptor(3, &["x".into(), "y".into()], 20.0);
        let parsed = FormatDescriptor::parse(&desc.to_text()).unwrap();
        assert_eq!(parsed, desc);
    }
}

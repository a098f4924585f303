//! Dataset container, preprocessing, stratified splits and the synthetic
//! planted-invariance generator.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{lowpass_taps, odd_length, SignalBatch, ZeroPhaseFir};
use crate::autodiff::Tensor;
use crate::rng::RandomStream;
use crate::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32le")]
    F32,
    #[serde(rename = "f64le")]
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub n_records: usize,
    pub channel_names: Vec<String>,
    pub sfreq: f64,
    pub n_times: usize,
    pub dtype: Dtype,
    pub label_map: BTreeMap<usize, String>,
    pub labels: Vec<usize>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != DATASET_FORMAT_VERSION {
            return Err(Error::invalid(
                "manifest.version",
                format!("unsupported version {} (expected {DATASET_FORMAT_VERSION})", self.version),
            ));
        }
        if !(self.sfreq > 0.0) || !self.sfreq.is_finite() {
            return Err(Error::invalid("manifest.sfreq", "sampling rate must be positive"));
        }
        if self.channel_names.is_empty() || self.n_times < 2 {
            return Err(Error::invalid("manifest", "need at least one channel and two samples"));
        }
        if self.labels.len() != self.n_records {
            return Err(Error::invalid(
                "manifest.labels",
                format!("{} labels for {} records", self.labels.len(), self.n_records),
            ));
        }
        if let Some(y) = self.labels.iter().find(|y| !self.label_map.contains_key(y)) {
            return Err(Error::invalid("manifest.labels", format!("label {y} missing from label_map")));
        }
        Ok(())
    }

    pub fn data_len(&self) -> usize {
        self.n_records * self.channel_names.len() * self.n_times * self.dtype.size()
    }
}

/// Windows plus the names that travel with them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub batch: SignalBatch,
    pub channel_names: Vec<String>,
    /// Indexed by class id.
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            batch: self.batch.select(indices),
            channel_names: self.channel_names.clone(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn manifest(&self, dtype: Dtype) -> DatasetManifest {
        DatasetManifest {
            version: DATASET_FORMAT_VERSION,
            n_records: self.batch.n_examples(),
            channel_names: self.channel_names.clone(),
            sfreq: self.batch.sfreq,
            n_times: self.batch.n_times(),
            dtype,
            label_map: self.class_names.iter().cloned().enumerate().collect(),
            labels: self.batch.labels.clone(),
        }
    }
}

pub fn write_dataset(dir: &Path, dataset: &Dataset, dtype: Dtype) -> Result<()> {
    dataset.batch.validate()?;
    if dataset.channel_names.len() != dataset.batch.n_channels() {
        return Err(Error::contract("channel names do not match the data"));
    }
    let manifest = dataset.manifest(dtype);
    manifest.validate()?;
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(manifest.data_len());
    for &v in dataset.batch.data.data() {
        match dtype {
            Dtype::F32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
        }
    }
    fs::write(dir.join(DATA_FILE), bytes)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)
        .map_err(|e| Error::Corrupt {
            path: manifest_path.clone(),
            message: e.to_string(),
        })?;
    manifest.validate()?;
    let data_path = dir.join(DATA_FILE);
    let bytes = fs::read(&data_path)?;
    if bytes.len() != manifest.data_len() {
        return Err(Error::Corrupt {
            path: data_path,
            message: format!("{} bytes, manifest implies {}", bytes.len(), manifest.data_len()),
        });
    }
    let data: Vec<f64> = match manifest.dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect(),
    };
    let n_classes = manifest.label_map.keys().max().map_or(0, |m| m + 1);
    let class_names = (0..n_classes)
        .map(|c| manifest.label_map.get(&c).cloned().unwrap_or_else(|| format!("class{c}")))
        .collect();
    let shape = vec![manifest.n_records, manifest.channel_names.len(), manifest.n_times];
    Ok(Dataset {
        batch: SignalBatch::new(Tensor::new(shape, data)?, manifest.sfreq, manifest.labels)?,
        channel_names: manifest.channel_names,
        class_names,
    })
}

/// Per record and channel: zero mean, unit (population) standard deviation.
pub fn standardize(batch: &SignalBatch) -> Result<SignalBatch> {
    let t = batch.n_times();
    let c = batch.n_channels();
    let mut out = batch.clone();
    for (row, x) in out.data.data_mut().chunks_mut(t).enumerate() {
        let mean = x.iter().sum::<f64>() / t as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
        let std = var.sqrt();
        if !(std > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::invalid(
                "standardize",
                format!("record {} channel {} is constant", row / c, row % c),
            ));
        }
        for v in x.iter_mut() {
            *v = (*v - mean) / std;
        }
    }
    Ok(out)
}

/// Zero-phase Hamming-windowed FIR lowpass. The passband edge sits at
/// `cutoff - transition/2` and the stopband edge at `cutoff + transition/2`.
pub fn lowpass(batch: &SignalBatch, cutoff_hz: f64, transition_hz: f64) -> Result<SignalBatch> {
    let nyq = batch.sfreq / 2.0;
    if !(cutoff_hz > 0.0 && transition_hz > 0.0 && cutoff_hz - transition_hz / 2.0 > 0.0) || cutoff_hz + transition_hz >= nyq {
        return Err(Error::contract(format!(
            "lowpass band {cutoff_hz} Hz (+-{transition_hz} Hz) invalid below Nyquist {nyq} Hz"
        )));
    }
    let fir = ZeroPhaseFir::new(lowpass_taps(cutoff_hz, batch.sfreq, odd_length(3.3 * batch.sfreq / transition_hz)));
    let t = batch.n_times();
    let mut out = batch.clone();
    for x in out.data.data_mut().chunks_mut(t) {
        let y = fir.apply(x);
        x.copy_from_slice(&y);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitPlan {
    /// Fraction of each class held out for testing.
    pub test_fraction: f64,
    /// Fraction of the remaining records used for validation.
    pub valid_fraction: f64,
    /// Keep `ceil(n_train / 2^k)` training records.
    pub subset_exponent: u32,
    pub seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            valid_fraction: 0.2,
            subset_exponent: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified, seed-deterministic split. Index lists come back sorted.
pub fn split(labels: &[usize], plan: &SplitPlan) -> Result<Splits> {
    let ok = |f: f64| (0.0..1.0).contains(&f);
    if !ok(plan.test_fraction) || !ok(plan.valid_fraction) || !(plan.valid_fraction > 0.0) {
        return Err(Error::invalid("split plan", "fractions must lie in [0, 1) and validation must be non-empty"));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = RandomStream::new(plan.seed, 0).derive_named("split");
    let mut out = Splits {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    let mut train_by_class = Vec::new();
    let mut too_small = Vec::new();
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        rng.shuffle(&mut idx);
        let n = idx.len();
        let n_test = (n as f64 * plan.test_fraction).round() as usize;
        let n_valid = ((n - n_test) as f64 * plan.valid_fraction).round() as usize;
        let n_train = n - n_test - n_valid;
        if n_train == 0 || n_valid == 0 || (plan.test_fraction > 0.0 && n_test == 0) {
            too_small.push(format!("{c} ({n} records)"));
            continue;
        }
        out.test.extend_from_slice(&idx[..n_test]);
        out.valid.extend_from_slice(&idx[n_test..n_test + n_valid]);
        train_by_class.push(idx[n_test + n_valid..].to_vec());
    }
    if !too_small.is_empty() {
        return Err(Error::invalid(
            "split",
            format!("classes too small to split: {}", too_small.join(", ")),
        ));
    }
    let kept = subset_counts(&train_by_class.iter().map(Vec::len).collect::<Vec<_>>(), plan.subset_exponent);
    for (idx, k) in train_by_class.iter().zip(kept) {
        out.train.extend_from_slice(&idx[..k]);
    }
    out.train.sort_unstable();
    out.valid.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Per-class counts summing to `ceil(total / 2^k)`, proportional to the
/// class sizes by largest remainder, at least one per class.
fn subset_counts(sizes: &[usize], k: u32) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let target = total.div_ceil(1usize << k.min(63)).max(sizes.len());
    if target >= total {
        return sizes.to_vec();
    }
    let exact: Vec<f64> = sizes.iter().map(|&s| s as f64 * target as f64 / total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| (e.floor() as usize).max(1)).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut i = 0;
    while counts.iter().sum::<usize>() < target {
        let c = order[i % order.len()];
        if counts[c] < sizes[c] {
            counts[c] += 1;
        }
        i += 1;
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// Symmetric waxing-waning oscillation.
    Spindle { freq_hz: f64, duration_s: f64 },
    /// Slow rise then fast fall; asymmetric in time.
    KComplex { duration_s: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    /// Each event flips sign with probability 1/2.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub template: Template,
    pub amplitude: f64,
    /// Events per window.
    pub count: usize,
    pub polarity: Polarity,
    /// Each event is time-reversed with probability 1/2.
    pub random_direction: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    /// `(frequency Hz, amplitude)` sinusoids with random phases.
    pub peaks: Vec<(f64, f64)>,
    pub events: Vec<EventSpec>,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: Vec<ClassSpec>,
    pub balance: Vec<f64>,
    pub channel_names: Vec<String>,
    pub n_times: usize,
    pub sfreq: f64,
}

impl Default for SyntheticSpec {
    /// Two classes sharing a background rhythm and spindles. Class 0 carries
    /// K-complexes of random sign and direction, so its distribution is
    /// invariant to sign flips and time reversal; class 1 carries upright
    /// forward K-complexes only.
    fn default() -> Self {
        let kc = |polarity, random_direction| EventSpec {
            template: Template::KComplex { duration_s: 0.75 },
            amplitude: 2.0,
            count: 3,
            polarity,
            random_direction,
        };
        let spindle = EventSpec {
            template: Template::Spindle {
                freq_hz: 13.0,
                duration_s: 1.0,
            },
            amplitude: 1.0,
            count: 1,
            polarity: Polarity::Random,
            random_direction: false,
        };
        let class = |name: &str, events| ClassSpec {
            name: name.into(),
            peaks: vec![(2.0, 0.5), (10.0, 0.5)],
            events,
            noise: 0.5,
        };
        Self {
            classes: vec![
                class("invariant", vec![spindle.clone(), kc(Polarity::Random, true)]),
                class("asymmetric", vec![spindle, kc(Polarity::Positive, false)]),
            ],
            balance: vec![0.5, 0.5],
            channel_names: vec!["C3".into(), "C4".into()],
            n_times: 1024,
            sfreq: 128.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.classes.len() != self.balance.len() {
            return Err(Error::invalid("synthetic spec", "one balance entry per class"));
        }
        if self.balance.iter().any(|b| !(*b >= 0.0)) || (self.balance.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("synthetic spec", "class balance must be non-negative and sum to 1"));
        }
        if self.channel_names.is_empty() || self.n_times < 2 || !(self.sfreq > 0.0) {
            return Err(Error::invalid("synthetic spec", "need channels, samples and a positive rate"));
        }
        let nyq = self.sfreq / 2.0;
        for c in &self.classes {
            let mut freqs: Vec<f64> = c.peaks.iter().map(|p| p.0).collect();
            for e in &c.events {
                let d = match e.template {
                    Template::Spindle { freq_hz, duration_s } => {
                        freqs.push(freq_hz);
                        duration_s
                    }
                    Template::KComplex { duration_s } => duration_s,
                };
                if !(d > 0.0) || (d * self.sfreq) as usize >= self.n_times {
                    return Err(Error::invalid("synthetic spec", format!("event of {d} s does not fit the window")));
                }
            }
            if let Some(f) = freqs.iter().find(|f| !(**f > 0.0 && **f < nyq)) {
                return Err(Error::invalid("synthetic spec", format!("{f} Hz is not below Nyquist {nyq} Hz")));
            }
            if !(c.noise >= 0.0) {
                return Err(Error::invalid("synthetic spec", "noise level must be non-negative"));
            }
        }
        Ok(())
    }
}

fn template_shape(template: Template, sfreq: f64) -> Vec<f64> {
    match template {
        Template::Spindle { freq_hz, duration_s } => {
            let n = (duration_s * sfreq).round() as usize;
            (0..n)
                .map(|i| {
                    let u = i as f64 / (n - 1).max(1) as f64;
                    let envelope = (PI * u).sin().powi(2);
                    envelope * (2.0 * PI * freq_hz * i as f64 / sfreq).cos()
                })
                .collect()
        }
        Template::KComplex { duration_s } => {
            let n = (duration_s * sfreq).round() as usize;
            let peak = 0.75;
            (0..n)
                .map(|i| {
                    let u = i as f64 / (n - 1).max(1) as f64;
                    if u <= peak {
                        u / peak
                    } else {
                        (1.0 - u) / (1.0 - peak)
                    }
                })
                .collect()
        }
    }
}

/// Exact class counts for `n` records by largest remainder.
pub fn allocate(balance: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = balance.iter().map(|b| b * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..balance.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut i = 0;
    while counts.iter().sum::<usize>() < n {
        counts[order[i % order.len()]] += 1;
        i += 1;
    }
    counts
}

pub fn generate_synthetic(spec: &SyntheticSpec, n: usize, rng: &RandomStream) -> Result<Dataset> {
    spec.validate()?;
    let (c, t, sfreq) = (spec.channel_names.len(), spec.n_times, spec.sfreq);
    let mut labels: Vec<usize> = allocate(&spec.balance, n)
        .iter()
        .enumerate()
        .flat_map(|(k, &m)| std::iter::repeat_n(k, m))
        .collect();
    rng.derive_named("labels").shuffle(&mut labels);
    let gains: Vec<f64> = (0..c).map(|ch| 1.0 - 0.3 * ch as f64 / c as f64).collect();
    let mut data = vec![0.0; n * c * t];
    for (r, &y) in labels.iter().enumerate() {
        let mut g = rng.derive(r as u64);
        let class = &spec.classes[y];
        let record = &mut data[r * c * t..(r + 1) * c * t];
        let mut common = vec![0.0; t];
        for &(f, a) in &class.peaks {
            let phase = 2.0 * PI * g.uniform();
            for (i, v) in common.iter_mut().enumerate() {
                *v += a * (2.0 * PI * f * i as f64 / sfreq + phase).sin();
            }
        }
        for e in &class.events {
            let shape = template_shape(e.template, sfreq);
            for _ in 0..e.count {
                let start = g.below(t - shape.len() + 1);
                let sign = match e.polarity {
                    Polarity::Positive => 1.0,
                    Polarity::Random => {
                        if g.uniform() < 0.5 {
                            -1.0
                        } else {
                            1.0
                        }
                    }
                };
                let reverse = e.random_direction && g.uniform() < 0.5;
                for (i, &s) in shape.iter().enumerate() {
                    let j = if reverse { start + shape.len() - 1 - i } else { start + i };
                    common[j] += sign * e.amplitude * s;
                }
            }
        }
        for ch in 0..c {
            for i in 0..t {
                record[ch * t + i] = gains[ch] * common[i] + class.noise * g.normal();
            }
        }
    }
    Ok(Dataset {
        batch: SignalBatch::new(Tensor::from_parts(vec![n, c, t], data), sfreq, labels)?,
        channel_names: spec.channel_names.clone(),
        class_names: spec.classes.iter().map(|k| k.name.clone()).collect(),
    })
}

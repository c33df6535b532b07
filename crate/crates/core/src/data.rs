//! Synthetic signal-plus-sparse-noise data.
//!
//! Each sample has `L` patches. Half of them carry the signal `y * mu` with
//! `mu = e_0`; the rest are `s`-sparse Gaussian noise vectors. Coordinate 0 is
//! the signal coordinate, so "orthogonal" datasets draw noise supports from
//! `1..d` only.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, substream, Stream};
use crate::sparse::SparseVec;

/// Default number of fresh samples used to estimate the test loss.
pub const DEFAULT_TEST_SIZE: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub d: usize,
    /// Nonzero coordinates per noise patch.
    pub s: usize,
    pub n: usize,
    /// Patches per sample.
    #[serde(rename = "L", alias = "context_len", default = "default_context_len")]
    pub context_len: usize,
    pub sigma_p: f64,
    #[serde(default = "default_true")]
    pub orthogonal: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_context_len() -> usize {
    2
}

fn default_true() -> bool {
    true
}

impl DataConfig {
    /// Row (a) of the reference experiment table for a given dimension:
    /// `n = 0.01 d`, `s = 0.04 d`, `sigma_p = 2 / sqrt(s)`, orthogonal noise.
    pub fn row_a(d: usize, seed: u64) -> Self {
        let s = d * 4 / 100;
        Self {
            d,
            s,
            n: d / 100,
            context_len: 2,
            sigma_p: 2.0 / (s as f64).sqrt(),
            orthogonal: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let max_s = if self.orthogonal { self.d.saturating_sub(1) } else { self.d };
        if self.s < 1 || self.s > max_s {
            return Err(Error::Config(format!(
                "s = {} must lie in [1, {}] for d = {} (orthogonal = {})",
                self.s, max_s, self.d, self.orthogonal
            )));
        }
        if self.n < 1 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if self.context_len < 2 || self.context_len % 2 != 0 {
            return Err(Error::Config(format!(
                "L = {} must be even and at least 2",
                self.context_len
            )));
        }
        if !(self.sigma_p > 0.0 && self.sigma_p.is_finite()) {
            return Err(Error::Config(format!("sigma_p = {} must be positive", self.sigma_p)));
        }
        Ok(())
    }

    /// Product `sigma_p * s`, the scale of every noise l1 norm.
    pub fn noise_scale(&self) -> f64 {
        self.sigma_p * self.s as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Columns of the `d x L` input matrix.
    pub patches: Vec<SparseVec>,
    pub y: i8,
    pub signal_positions: Vec<usize>,
    pub noise_positions: Vec<usize>,
}

impl Sample {
    /// Builds a sample from explicit noise vectors. The signal patches are
    /// placed at `signal_positions`; the noise vectors fill the remaining
    /// positions in order.
    pub fn new(d: usize, y: i8, signal_positions: Vec<usize>, noise: Vec<SparseVec>) -> Self {
        let len = signal_positions.len() + noise.len();
        let mut noise = noise.into_iter();
        let mut patches = Vec::with_capacity(len);
        let mut noise_positions = Vec::new();
        for pos in 0..len {
            if signal_positions.contains(&pos) {
                patches.push(SparseVec::basis(d, 0, f64::from(y)));
            } else {
                patches.push(noise.next().expect("one noise vector per free position"));
                noise_positions.push(pos);
            }
        }
        Self { patches, y, signal_positions, noise_positions }
    }

    pub fn label(&self) -> f64 {
        f64::from(self.y)
    }

    pub fn context_len(&self) -> usize {
        self.patches.len()
    }

    pub fn dim(&self) -> usize {
        self.patches[0].dim
    }

    pub fn noise_patches(&self) -> impl Iterator<Item = &SparseVec> + '_ {
        self.noise_positions.iter().map(|&p| &self.patches[p])
    }

    pub fn noise_supports(&self) -> Vec<&[usize]> {
        self.noise_patches().map(|p| p.indices.as_slice()).collect()
    }

    /// Position of the first signal patch.
    pub fn signal_position(&self) -> usize {
        self.signal_positions[0]
    }

    /// Position of the noise patch with the largest l1 norm (the only noise
    /// patch when `L = 2`).
    pub fn dominant_noise_position(&self) -> usize {
        self.noise_positions
            .iter()
            .copied()
            .max_by(|&a, &b| self.patches[a].l1().total_cmp(&self.patches[b].l1()).then(b.cmp(&a)))
            .expect("at least one noise patch")
    }

    pub fn dominant_noise(&self) -> &SparseVec {
        &self.patches[self.dominant_noise_position()]
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        self.patches.iter().map(SparseVec::to_dense).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: DataConfig,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The signal direction `mu`.
    pub fn signal(&self) -> SparseVec {
        SparseVec::basis(self.config.d, 0, 1.0)
    }

    pub fn signal_norm(&self) -> f64 {
        1.0
    }

    /// `||xi_i||_1` of each sample's dominant noise patch.
    pub fn noise_l1(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.dominant_noise().l1()).collect()
    }
}

fn generate_sample(config: &DataConfig, seed: u64, index: usize) -> Sample {
    let i = index as u64;
    let y: i8 = if substream(seed, Stream::Label, i, 0).random::<bool>() { 1 } else { -1 };

    let len = config.context_len;
    let mut positions: Vec<usize> = (0..len).collect();
    let mut layout = substream(seed, Stream::Layout, i, 0);
    let (chosen, _) = positions.partial_shuffle(&mut layout, len / 2);
    let mut signal_positions = chosen.to_vec();
    signal_positions.sort_unstable();

    let first = usize::from(config.orthogonal);
    let noise = (0..len - len / 2)
        .map(|k| {
            let mut rng = substream(seed, Stream::Noise, i, k as u64);
            let mut coords: Vec<usize> = (first..config.d).collect();
            let (support, _) = coords.partial_shuffle(&mut rng, config.s);
            let mut support = support.to_vec();
            support.sort_unstable();
            let values = support
                .iter()
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    config.sigma_p * z
                })
                .collect();
            SparseVec::new(config.d, support, values)
        })
        .collect();
    Sample::new(config.d, y, signal_positions, noise)
}

fn generate_with_seed(config: &DataConfig, n: usize, seed: u64) -> Vec<Sample> {
    (0..n).into_par_iter().map(|i| generate_sample(config, seed, i)).collect()
}

/// Draws `config.n` samples. Deterministic in `config`.
pub fn generate_dataset(config: &DataConfig) -> Result<Dataset> {
    config.validate()?;
    Ok(Dataset { config: config.clone(), samples: generate_with_seed(config, config.n, config.seed) })
}

/// Fresh samples from the same distribution, on a seed stream disjoint from
/// the training data.
pub fn generate_test_samples(config: &DataConfig, n_test: usize, seed: u64) -> Result<Vec<Sample>> {
    config.validate()?;
    let test_seed = derive_seed(seed, Stream::TestData, 0, 0);
    Ok(generate_with_seed(config, n_test, test_seed))
}

/// True iff no coordinate is shared by two noise patches anywhere in the dataset.
pub fn supports_disjoint(dataset: &Dataset) -> bool {
    let mut seen = HashSet::new();
    dataset
        .samples
        .iter()
        .flat_map(|s| s.noise_patches())
        .flat_map(|p| p.indices.iter())
        .all(|&c| seen.insert(c))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseNorms {
    pub sample: usize,
    pub position: usize,
    pub l1: f64,
    pub l2sq: f64,
}

pub fn noise_norm_stats(dataset: &Dataset) -> Vec<NoiseNorms> {
    dataset
        .samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.noise_positions.iter().map(move |&p| NoiseNorms {
                sample: i,
                position: p,
                l1: s.patches[p].l1(),
                l2sq: s.patches[p].l2sq(),
            })
        })
        .collect()
}

/// Whether every noise patch has a zero signal coordinate.
pub fn signal_orthogonal(dataset: &Dataset) -> bool {
    dataset.samples.iter().flat_map(|s| s.noise_patches()).all(|p| p.get(0) == 0.0)
}

/// Fraction of the generated datasets in which the signal is orthogonal to
/// every noise patch.
pub fn signal_orthogonality_rate(configs: &[DataConfig]) -> Result<f64> {
    if configs.is_empty() {
        return Ok(0.0);
    }
    let hits = configs
        .iter()
        .map(|c| generate_dataset(c).map(|ds| signal_orthogonal(&ds)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|&ok| ok)
        .count();
    Ok(hits as f64 / configs.len() as f64)
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    config: DataConfig,
}

#[derive(Serialize, Deserialize)]
struct NoiseRecord {
    position: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    y: i8,
    signal_positions: Vec<usize>,
    noise: Vec<NoiseRecord>,
}

const DATASET_FORMAT: &str = "signlab-dataset";

/// Writes the dataset as JSONL: a header line carrying the config, then one
/// line per sample with sparse `(index, value)` noise.
pub fn write_dataset<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: 1,
        config: dataset.config.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for sample in &dataset.samples {
        let record = SampleRecord {
            y: sample.y,
            signal_positions: sample.signal_positions.clone(),
            noise: sample
                .noise_positions
                .iter()
                .map(|&p| NoiseRecord {
                    position: p,
                    indices: sample.patches[p].indices.clone(),
                    values: sample.patches[p].values.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Dataset> {
    let mut lines = input.lines();
    let header: DatasetHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => return Err(Error::Parse("empty dataset file".into())),
    };
    if header.format != DATASET_FORMAT {
        return Err(Error::Parse(format!("unexpected format tag {:?}", header.format)));
    }
    let config = header.config;
    config.validate()?;
    let mut samples = Vec::with_capacity(config.n);
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))?;
        let mut noise: Vec<_> = record.noise;
        noise.sort_by_key(|r| r.position);
        let noise = noise
            .into_iter()
            .map(|r| SparseVec::new(config.d, r.indices, r.values))
            .collect();
        samples.push(Sample::new(config.d, record.y, record.signal_positions, noise));
    }
    if samples.len() != config.n {
        return Err(Error::Parse(format!(
            "header declares n = {} but file holds {} samples",
            config.n,
            samples.len()
        )));
    }
    Ok(Dataset { config, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(d: usize, s: usize, n: usize, seed: u64) -> DataConfig {
        DataConfig { d, s, n, context_len: 2, sigma_p: 1.0, orthogonal: true, seed }
    }

    fn hand_sample(y: i8, support: &[usize]) -> Sample {
        let noise = SparseVec::new(8, support.to_vec(), vec![1.0; support.len()]);
        Sample::new(8, y, vec![0], vec![noise])
    }

    fn hand_dataset(samples: Vec<Sample>) -> Dataset {
        Dataset { config: small(8, 2, samples.len(), 0), samples }
    }

    #[test]
    fn row_a_shape() {
        let config = DataConfig::row_a(2000, 1);
        assert_eq!((config.n, config.s), (20, 80));
        let ds = generate_dataset(&config).unwrap();
        assert_eq!(ds.len(), 20);
        for sample in &ds.samples {
            assert_eq!(sample.signal_positions.len(), 1);
            let noise = sample.dominant_noise();
            assert_eq!(noise.nnz(), 80);
            assert_eq!(noise.get(0), 0.0);
            let signal = &sample.patches[sample.signal_position()];
            assert_eq!(signal.to_dense()[0], sample.label());
        }
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut c = small(4, 0, 1, 0);
        assert!(matches!(generate_dataset(&c), Err(Error::Config(_))));
        c.s = 4;
        assert!(generate_dataset(&c).is_err());
        c.orthogonal = false;
        assert!(generate_dataset(&c).is_ok());
        c.context_len = 3;
        assert!(generate_dataset(&c).is_err());
    }

    #[test]
    fn forced_support() {
        let ds = generate_dataset(&small(4, 3, 5, 9)).unwrap();
        for sample in &ds.samples {
            assert_eq!(sample.noise_supports(), vec![&[1usize, 2, 3][..]]);
        }
    }

    #[test]
    fn deterministic_bytes() {
        let c = small(10, 3, 2, 42);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_dataset(&generate_dataset(&c).unwrap(), &mut a).unwrap();
        write_dataset(&generate_dataset(&c).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
        let other = DataConfig { seed: 43, ..c };
        let mut e = Vec::new();
        write_dataset(&generate_dataset(&other).unwrap(), &mut e).unwrap();
        assert_ne!(a, e);
    }

    #[test]
    fn disjointness_by_hand() {
        let disjoint = hand_dataset(vec![hand_sample(1, &[2, 3]), hand_sample(-1, &[4, 5])]);
        assert!(supports_disjoint(&disjoint));
        let shared = hand_dataset(vec![hand_sample(1, &[2, 3]), hand_sample(-1, &[3, 4])]);
        assert!(!supports_disjoint(&shared));
    }

    #[test]
    fn norms_by_hand() {
        let noise = SparseVec::from_dense(&[0.0, 1.0, -1.0, 0.0]);
        let sample = Sample::new(4, 1, vec![0], vec![noise]);
        let ds = Dataset { config: small(4, 2, 1, 0), samples: vec![sample] };
        let stats = noise_norm_stats(&ds);
        assert_eq!(stats.len(), 1);
        assert_eq!((stats[0].l1, stats[0].l2sq, stats[0].position), (2.0, 2.0, 1));
    }

    #[test]
    fn orthogonality_rate_edges() {
        let ortho: Vec<_> = (0..10).map(|seed| small(10, 3, 5, seed)).collect();
        assert_eq!(signal_orthogonality_rate(&ortho).unwrap(), 1.0);
        let full: Vec<_> = (0..10)
            .map(|seed| DataConfig { orthogonal: false, ..small(10, 10, 5, seed) })
            .collect();
        assert_eq!(signal_orthogonality_rate(&full).unwrap(), 0.0);
    }

    #[test]
    fn longer_context_layout() {
        let c = DataConfig { context_len: 10, ..small(500, 5, 8, 3) };
        let ds = generate_dataset(&c).unwrap();
        for sample in &ds.samples {
            assert_eq!(sample.signal_positions.len(), 5);
            assert_eq!(sample.noise_positions.len(), 5);
            for &p in &sample.signal_positions {
                assert_eq!(sample.patches[p].to_dense()[0], sample.label());
            }
            let mut all: Vec<_> =
                sample.signal_positions.iter().chain(&sample.noise_positions).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn file_round_trip() {
        let ds = generate_dataset(&DataConfig { context_len: 4, ..small(30, 4, 3, 5) }).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let ds = generate_dataset(&small(30, 4, 3, 5)).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(matches!(read_dataset(cut.as_bytes()), Err(Error::Parse(_))));
    }

    #[test]
    fn test_stream_is_disjoint_from_training() {
        let c = small(50, 4, 5, 11);
        let train = generate_dataset(&c).unwrap();
        let test = generate_test_samples(&c, 5, c.seed).unwrap();
        assert_ne!(train.samples, test);
    }
}

//! Synthetic Gaussian-blob classification data split non-IID across clients.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};

/// Smallest dataset a client may hold.
pub const MIN_DATASET: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    Client(usize),
    Pooled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub owner: Owner,
    pub feature_dim: usize,
    /// Row-major `len x feature_dim`.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn empty(owner: Owner, feature_dim: usize) -> Self {
        Self {
            owner,
            feature_dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.features[k * self.feature_dim..(k + 1) * self.feature_dim]
    }

    pub fn push(&mut self, x: &[f64], label: usize) {
        debug_assert_eq!(x.len(), self.feature_dim);
        self.features.extend_from_slice(x);
        self.labels.push(label);
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut c = vec![0; num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Concatenation of several datasets.
pub fn pooled(parts: &[Dataset]) -> Dataset {
    let dim = parts.first().map_or(0, |d| d.feature_dim);
    let mut out = Dataset::empty(Owner::Pooled, dim);
    for p in parts {
        out.features.extend_from_slice(&p.features);
        out.labels.extend_from_slice(&p.labels);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Distance of each class mean from the origin along its own axis.
    pub class_separation: f64,
}

impl BlobSpec {
    /// One sample of class `label`: unit-covariance Gaussian around `s e_label`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, label: usize, out: &mut Vec<f64>) {
        out.clear();
        for k in 0..self.feature_dim {
            let z: f64 = StandardNormal.sample(rng);
            let mean = if k == label % self.feature_dim { self.class_separation } else { 0.0 };
            out.push(mean + z);
        }
    }

    fn fill<R: Rng + ?Sized>(&self, rng: &mut R, ds: &mut Dataset, labels: &[usize]) {
        let mut x = Vec::with_capacity(self.feature_dim);
        for &l in labels {
            self.sample(rng, l, &mut x);
            ds.push(&x, l);
        }
    }

    /// `n` samples with classes as balanced as `n` allows.
    pub fn balanced<R: Rng + ?Sized>(&self, rng: &mut R, n: usize, owner: Owner) -> Dataset {
        let labels = balanced_labels(rng, n, self.num_classes);
        let mut ds = Dataset::empty(owner, self.feature_dim);
        self.fill(rng, &mut ds, &labels);
        ds
    }
}

fn balanced_labels<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let offset = rng.random_range(0..k);
    let mut labels: Vec<usize> = (0..n).map(|j| (offset + j) % k).collect();
    labels.shuffle(rng);
    labels
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub clients: Vec<Dataset>,
    /// Samples of each client drawn from its own class.
    pub particular: Vec<usize>,
}

impl Partition {
    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Dataset::len).collect()
    }

    /// Size-weighted mean of the per-client non-IID degrees.
    pub fn realized_degree(&self) -> f64 {
        let total: usize = self.clients.iter().map(Dataset::len).sum();
        self.particular.iter().sum::<usize>() as f64 / total as f64
    }
}

/// Client `i` gets `D_i ~ round(N(mean, sigma^2))` samples (at least
/// [`MIN_DATASET`]); `round(d D_i)` of them are from class `i`, the rest a
/// balanced mixture of all classes.
pub fn generate_non_iid_data<R: Rng + ?Sized>(
    rng: &mut R,
    num_clients: usize,
    mean_size: f64,
    sigma_size: f64,
    degree: f64,
    blobs: &BlobSpec,
) -> Result<Partition> {
    if !(0.0..=1.0).contains(&degree) {
        return Err(Error::InvalidDegree(degree));
    }
    if num_clients > blobs.num_classes {
        return Err(Error::TooManyClients {
            clients: num_clients,
            classes: blobs.num_classes,
        });
    }
    if mean_size <= 0.0 {
        return Err(Error::NonPositiveParameter("data.mean_size"));
    }
    let size_dist = Normal::new(mean_size, sigma_size.max(0.0)).map_err(|_| Error::NonPositiveParameter("data.sigma_size"))?;
    let sizes: Vec<usize> = (0..num_clients)
        .map(|_| (size_dist.sample(rng).round().max(MIN_DATASET as f64)) as usize)
        .collect();

    let mut clients = Vec::with_capacity(num_clients);
    let mut particular = Vec::with_capacity(num_clients);
    for (i, &d_i) in sizes.iter().enumerate() {
        let own = ((degree * d_i as f64).round() as usize).min(d_i);
        let mut labels = vec![i; own];
        labels.extend(balanced_labels(rng, d_i - own, blobs.num_classes));
        labels.shuffle(rng);
        let mut ds = Dataset::empty(Owner::Client(i), blobs.feature_dim);
        blobs.fill(rng, &mut ds, &labels);
        clients.push(ds);
        particular.push(own);
    }
    Ok(Partition { clients, particular })
}

/// Writes client datasets as text: one header line, then `label,x_1,...` rows.
pub fn write_datasets(path: impl AsRef<Path>, parts: &[Dataset], num_classes: usize) -> Result<()> {
    let dim = parts.first().map_or(0, |d| d.feature_dim);
    let mut offsets = vec![0usize];
    for p in parts {
        offsets.push(offsets.last().unwrap() + p.len());
    }
    let mut w = BufWriter::new(File::create(path)?);
    let offs: Vec<String> = offsets.iter().map(usize::to_string).collect();
    writeln!(w, "# feature_dim={dim} num_classes={num_classes} offsets={}", offs.join(","))?;
    let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    let mut row = Vec::with_capacity(dim + 1);
    for p in parts {
        for k in 0..p.len() {
            row.clear();
            row.push(p.labels[k].to_string());
            row.extend(p.row(k).iter().map(f64::to_string));
            csv.write_record(&row)?;
        }
    }
    csv.flush()?;
    Ok(())
}

/// Reads what [`write_datasets`] wrote; returns the client datasets and the class count.
pub fn read_datasets(path: impl AsRef<Path>) -> Result<(Vec<Dataset>, usize)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let field = |key: &str| -> Result<&str> {
        header
            .split_whitespace()
            .find_map(|t| t.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .ok_or_else(|| Error::DatasetFormat(format!("missing `{key}` in header")))
    };
    let bad = |what: &str| Error::DatasetFormat(format!("bad {what}"));
    let dim: usize = field("feature_dim")?.parse().map_err(|_| bad("feature_dim"))?;
    let classes: usize = field("num_classes")?.parse().map_err(|_| bad("num_classes"))?;
    let offsets: Vec<usize> = field("offsets")?
        .split(',')
        .map(|s| s.parse().map_err(|_| bad("offsets")))
        .collect::<Result<_>>()?;

    let mut all = Dataset::empty(Owner::Pooled, dim);
    let mut csv = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut x = Vec::with_capacity(dim);
    for rec in csv.records() {
        let rec = rec?;
        if rec.len() != dim + 1 {
            return Err(Error::DatasetFormat(format!("row with {} fields, expected {}", rec.len(), dim + 1)));
        }
        let label: usize = rec[0].parse().map_err(|_| bad("label"))?;
        if label >= classes {
            return Err(Error::DatasetFormat(format!("label {label} out of range")));
        }
        x.clear();
        for f in rec.iter().skip(1) {
            x.push(f.parse().map_err(|_| bad("feature"))?);
        }
        all.push(&x, label);
    }
    if offsets.last() != Some(&all.len()) || offsets.windows(2).any(|w| w[0] > w[1]) {
        return Err(bad("offsets"));
    }
    let parts = offsets
        .windows(2)
        .enumerate()
        .map(|(i, w)| Dataset {
            owner: Owner::Client(i),
            feature_dim: dim,
            features: all.features[w[0] * dim..w[1] * dim].to_vec(),
            labels: all.labels[w[0]..w[1]].to_vec(),
        })
        .collect();
    Ok((parts, classes))
}

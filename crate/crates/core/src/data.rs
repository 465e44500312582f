//! Datasets, holdout splits, arrival streams and mini-batch orders.
//!
//! Everything here is a pure function of its inputs and seed.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::input("dataset has no rows"));
        }
        if features.nrows() != labels.len() {
            return Err(Error::input(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::input(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("features contain non-finite values"));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    /// Feature rows and labels for `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let x = self.features.select(Axis(0), indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (features, labels) = self.gather(indices);
        Dataset {
            features,
            labels,
            num_classes: self.num_classes,
            name: self.name.clone(),
        }
    }

    /// Serialize as CSV without a header: features then the integer label.
    /// Floats use the shortest representation that parses back exactly.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        for (row, y) in self.features.outer_iter().zip(&self.labels) {
            for v in row {
                write!(out, "{v:?},").expect("writing to a String");
            }
            writeln!(out, "{y}").expect("writing to a String");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// One isotropic unit-variance Gaussian per class around a random mean.
    GaussianMixture,
    /// Interleaved spiral arms in the first two coordinates.
    Spirals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub label_noise: f64,
    /// Gaussian mixture: standard deviation of the class-mean coordinates.
    /// Spirals: radial jitter.
    #[serde(default = "SyntheticSpec::default_class_sep")]
    pub class_sep: f64,
    /// Added to every class mean; used to build related source/target tasks.
    #[serde(default)]
    pub mean_shift: f64,
    #[serde(default)]
    pub seed: u64,
    /// Seed for the per-sample draws; defaults to `seed`. Setting it keeps the
    /// class structure of `seed` while redrawing the samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_seed: Option<u64>,
}

impl SyntheticSpec {
    fn default_class_sep() -> f64 {
        0.5
    }

    pub fn gaussian_mixture(n: usize, d: usize, k: usize, label_noise: f64, seed: u64) -> Self {
        Self {
            kind: SyntheticKind::GaussianMixture,
            n,
            d,
            k,
            label_noise,
            class_sep: Self::default_class_sep(),
            mean_shift: 0.0,
            seed,
            sample_seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.k < 2 {
            return Err(Error::input(format!(
                "synthetic data needs n >= 1, d >= 1, k >= 2 (got n={}, d={}, k={})",
                self.n, self.d, self.k
            )));
        }
        if self.kind == SyntheticKind::Spirals && self.d < 2 {
            return Err(Error::input("spirals need at least 2 dimensions"));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::input(format!(
                "label noise must lie in [0, 0.5), got {}",
                self.label_noise
            )));
        }
        if !(self.class_sep >= 0.0 && self.class_sep.is_finite() && self.mean_shift.is_finite()) {
            return Err(Error::input("class separation must be finite and nonnegative"));
        }
        Ok(())
    }

    fn name(&self) -> String {
        match self.kind {
            SyntheticKind::GaussianMixture => format!("gaussian_mixture(k={},d={})", self.k, self.d),
            SyntheticKind::Spirals => format!("spirals(k={})", self.k),
        }
    }
}

/// Generate a labelled synthetic dataset. Classes are exactly balanced
/// before label noise; a `label_noise` fraction of rows then receive a
/// uniformly chosen different label.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let (n, d, k) = (spec.n, spec.d, spec.k);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(&mut seeds::rng(spec.seed, "synthetic/labels", 0));

    let mut rng = seeds::rng(spec.sample_seed.unwrap_or(spec.seed), "synthetic/samples", 0);
    let features = match spec.kind {
        SyntheticKind::GaussianMixture => {
            let mut mean_rng = seeds::rng(spec.seed, "synthetic/means", 0);
            let means = Array2::from_shape_fn((k, d), |_| {
                spec.class_sep * std_normal.sample(&mut mean_rng) + spec.mean_shift
            });
            let mut x = Array2::zeros((n, d));
            for (mut row, &y) in x.outer_iter_mut().zip(&labels) {
                for (v, m) in row.iter_mut().zip(means.row(y)) {
                    *v = m + std_normal.sample(&mut rng);
                }
            }
            x
        }
        SyntheticKind::Spirals => {
            let mut x = Array2::zeros((n, d));
            for (mut row, &y) in x.outer_iter_mut().zip(&labels) {
                let t: f64 = rng.random::<f64>();
                let radius = t + spec.class_sep * std_normal.sample(&mut rng);
                let angle = 2.0 * std::f64::consts::PI * (y as f64 / k as f64) + 3.0 * t * std::f64::consts::PI;
                row[0] = radius * angle.cos() + spec.mean_shift;
                row[1] = radius * angle.sin() + spec.mean_shift;
                for v in row.iter_mut().skip(2) {
                    *v = spec.class_sep * std_normal.sample(&mut rng);
                }
            }
            x
        }
    };

    if spec.label_noise > 0.0 {
        let mut rng = seeds::rng(spec.seed, "synthetic/label_noise", 0);
        for y in labels.iter_mut() {
            if rng.random::<f64>() < spec.label_noise {
                let shift = rng.random_range(1..k);
                *y = (*y + shift) % k;
            }
        }
    }

    Dataset::new(features, labels, k, spec.name())
}

/// Parse CSV text: feature columns followed by an integer label column.
pub fn parse_csv(text: &str, header: bool, source: &str) -> Result<Dataset> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() < 2 {
            return Err(parse_err(
                line,
                format!("expected at least one feature and a label, found {} field(s)", record.len()),
            ));
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(parse_err(line, format!("expected {w} fields, found {}", record.len())));
            }
            Some(_) => {}
        }
        let (label_field, feature_fields) = record
            .iter()
            .collect::<Vec<_>>()
            .split_last()
            .map(|(l, f)| (*l, f.to_vec()))
            .expect("at least two fields");
        for (col, field) in feature_fields.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("column {}: '{field}' is not a number", col + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column {}: non-finite value", col + 1)));
            }
            values.push(v);
        }
        let y: usize = label_field
            .parse()
            .map_err(|_| parse_err(line, format!("label '{label_field}' is not a nonnegative integer")))?;
        labels.push(y);
    }

    let Some(width) = width else {
        return Err(parse_err(0, "no rows".to_string()));
    };
    let features = Array2::from_shape_vec((labels.len(), width - 1), values)
        .expect("row widths checked while parsing");
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(features, labels, num_classes, source)
}

pub fn load_csv(path: impl AsRef<Path>, header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_csv(&text, header, &path.display().to_string())
}

/// Disjoint `(train, val)` index sets with `|val| = round(val_fraction * n)`.
pub fn holdout_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::input(format!(
            "validation fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let n_val = (val_fraction * n as f64).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::input(format!(
            "{n} rows cannot be split into nonempty parts at fraction {val_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::rng(seed, "holdout", 0));
    let mut val = order.split_off(n - n_val);
    order.sort_unstable();
    val.sort_unstable();
    Ok((order, val))
}

pub fn split_holdout(dataset: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, val) = holdout_indices(dataset.len(), val_fraction, seed)?;
    Ok((dataset.subset(&train), dataset.subset(&val)))
}

/// Arrival order of training samples, chunked into rounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSchedule {
    pub rounds: Vec<Vec<usize>>,
    pub round_size: usize,
}

impl StreamSchedule {
    pub fn num_rounds(&self) -> usize {
        self.rounds.len()
    }

    /// Union of rounds `0..=round`, in arrival order.
    pub fn accumulated(&self, round: usize) -> Vec<usize> {
        self.rounds[..=round].iter().flatten().copied().collect()
    }

    /// Number of rounds holding exactly `round_size` samples.
    pub fn full_rounds(&self) -> usize {
        self.rounds.iter().filter(|r| r.len() == self.round_size).count()
    }
}

/// Random permutation of `train` chunked into rounds of `round_size`; the
/// last round keeps the remainder.
pub fn make_stream(train: &[usize], round_size: usize, seed: u64) -> Result<StreamSchedule> {
    if round_size == 0 {
        return Err(Error::input("stream round size must be positive"));
    }
    if round_size > train.len() {
        return Err(Error::input(format!(
            "round size {round_size} exceeds the {} available training samples",
            train.len()
        )));
    }
    let mut order = train.to_vec();
    order.shuffle(&mut seeds::rng(seed, "stream", 0));
    Ok(StreamSchedule {
        rounds: order.chunks(round_size).map(<[usize]>::to_vec).collect(),
        round_size,
    })
}

/// Shuffled mini-batches for one epoch; the final short batch is kept.
pub fn minibatches(indices: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order = indices.to_vec();
    order.shuffle(&mut seeds::rng(seed, "minibatch", epoch));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let spec = SyntheticSpec::gaussian_mixture(1000, 8, 10, 0.0, 3);
        let a = gen_synthetic(&spec).unwrap();
        assert_eq!(a, gen_synthetic(&spec).unwrap());
        let mut counts = vec![0usize; 10];
        for &y in &a.labels {
            counts[y] += 1;
        }
        assert!(counts.iter().all(|&c| (90..=110).contains(&c)), "{counts:?}");

        let spirals = SyntheticSpec {
            kind: SyntheticKind::Spirals,
            ..SyntheticSpec::gaussian_mixture(300, 2, 3, 0.05, 1)
        };
        let s = gen_synthetic(&spirals).unwrap();
        assert_eq!(s.dim(), 2);
        assert_eq!(s.num_classes, 3);
    }

    #[test]
    fn label_noise_fraction() {
        let clean = gen_synthetic(&SyntheticSpec::gaussian_mixture(10_000, 4, 10, 0.0, 11)).unwrap();
        let noisy = gen_synthetic(&SyntheticSpec::gaussian_mixture(10_000, 4, 10, 0.1, 11)).unwrap();
        assert_eq!(clean.features, noisy.features);
        let flipped = clean.labels.iter().zip(&noisy.labels).filter(|(a, b)| a != b).count();
        let frac = flipped as f64 / 10_000.0;
        assert!((frac - 0.1).abs() < 0.02, "flipped fraction {frac}");
    }

    #[test]
    fn synthetic_validation() {
        let mut spec = SyntheticSpec::gaussian_mixture(10, 2, 2, 0.5, 0);
        assert!(gen_synthetic(&spec).is_err());
        spec.label_noise = 0.1;
        spec.k = 1;
        assert!(gen_synthetic(&spec).is_err());
    }

    #[test]
    fn csv_hand_written() {
        let text = "0.5,1.25,0\n-3,2e-3,2\n7,8,1\n";
        let d = parse_csv(text, false, "mem").unwrap();
        assert_eq!(d.features, ndarray::array![[0.5, 1.25], [-3.0, 0.002], [7.0, 8.0]]);
        assert_eq!(d.labels, vec![0, 2, 1]);
        assert_eq!(d.num_classes, 3);

        let with_header = parse_csv("a,b,label\n1,2,0\n", true, "mem").unwrap();
        assert_eq!(with_header.len(), 1);
    }

    #[test]
    fn csv_errors_name_the_line() {
        match parse_csv("", false, "mem") {
            Err(Error::Parse { message, .. }) => assert!(message.contains("no rows")),
            other => panic!("{other:?}"),
        }
        match parse_csv("1,2,0\n1,2\n", false, "mem") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_csv("1,2,0\n1,x,1\n", false, "mem") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_csv("1,2,0.5\n", false, "mem") {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 1);
                assert!(message.contains("label"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_round_trip_of_synthetic_data() {
        let d = gen_synthetic(&SyntheticSpec::gaussian_mixture(200, 5, 4, 0.1, 2)).unwrap();
        let back = parse_csv(&d.to_csv_string(), false, "mem").unwrap();
        assert_eq!(back.features, d.features);
        assert_eq!(back.labels, d.labels);
    }

    #[test]
    fn holdout_counts_and_partition() {
        let (train, val) = holdout_indices(9, 1.0 / 3.0, 0).unwrap();
        assert_eq!((train.len(), val.len()), (6, 3));
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
        assert!(holdout_indices(1, 1.0 / 3.0, 0).is_err());
        assert!(holdout_indices(10, 1.0, 0).is_err());
    }

    #[test]
    fn holdout_depends_on_seed() {
        let a = holdout_indices(100, 1.0 / 3.0, 1).unwrap();
        assert_eq!(a, holdout_indices(100, 1.0 / 3.0, 1).unwrap());
        let distinct = (2..12)
            .filter(|&s| holdout_indices(100, 1.0 / 3.0, s).unwrap() != a)
            .count();
        assert_eq!(distinct, 10);
    }

    #[test]
    fn stream_rounds() {
        let train: Vec<usize> = (0..10).collect();
        let s = make_stream(&train, 5, 0).unwrap();
        assert_eq!(s.rounds.len(), 2);
        let s = make_stream(&train, 4, 0).unwrap();
        assert_eq!(s.rounds.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(s.full_rounds(), 2);
        assert_eq!(s.accumulated(1).len(), 8);
        assert!(make_stream(&train, 0, 0).is_err());
        assert!(make_stream(&train, 11, 0).is_err());
    }

    #[test]
    fn first_round_inclusion_is_uniform() {
        // Chi-square on how often each index lands in round one.
        let n = 20;
        let train: Vec<usize> = (0..n).collect();
        let mut counts = vec![0f64; n];
        let seeds = 100;
        for seed in 0..seeds {
            for &i in &make_stream(&train, 5, seed).unwrap().rounds[0] {
                counts[i] += 1.0;
            }
        }
        let expected = seeds as f64 * 5.0 / n as f64;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // 99.9th percentile of chi-square with 19 degrees of freedom is about 43.8.
        assert!(chi2 < 43.8, "chi2 {chi2}");
    }

    #[test]
    fn minibatch_epochs() {
        let idx: Vec<usize> = (100..110).collect();
        let b = minibatches(&idx, 3, 1, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let seen: HashSet<usize> = b.iter().flatten().copied().collect();
        assert_eq!(seen, idx.iter().copied().collect());
        assert_eq!(b, minibatches(&idx, 3, 1, 0));
        let differing = (1..11).filter(|&e| minibatches(&idx, 3, 1, e) != b).count();
        assert!(differing >= 9);
    }
}

//! Synthetic sequence-classification data, CSV feature ingestion and padded
//! batching.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, ParseErrorKind, Result};
use crate::numeric::{RealArray, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    /// `L × C_in`.
    pub features: RealArray,
    pub label: usize,
    pub id: String,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

/// Zero-padded batch of utterances.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `B × L_max × C_in`.
    pub features: RealArray,
    pub valid_lengths: Vec<usize>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.features.dims()[1]
    }

    /// Each padded utterance as an `L_max × C_in` matrix.
    pub fn sequences(&self) -> Vec<RealArray> {
        let d = self.features.dims();
        let (l, c) = (d[1], d[2]);
        (0..d[0])
            .map(|b| RealArray::new(&[l, c], self.features.data()[b * l * c..(b + 1) * l * c].to_vec()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_per_class: usize,
    pub seed: u64,
    pub num_classes: usize,
    pub input_dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise: f64,
}

impl SyntheticSpec {
    pub fn new(num_per_class: usize, seed: u64) -> Self {
        Self { num_per_class, seed, num_classes: 4, input_dim: 16, min_len: 24, max_len: 40, noise: 0.1 }
    }
}

/// Class `k` follows `sin(2π(1+k)t/L + cπ/C_in)` plus Gaussian noise.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<Utterance>> {
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config(format!("bad length range [{}, {}]", spec.min_len, spec.max_len)));
    }
    let mut rng = Rng::new(spec.seed);
    let c_in = spec.input_dim;
    let mut out = Vec::with_capacity(spec.num_per_class * spec.num_classes);
    for k in 0..spec.num_classes {
        let f = (1 + k) as f64;
        for i in 0..spec.num_per_class {
            let l = rng.range_inclusive(spec.min_len, spec.max_len);
            let mut data = Vec::with_capacity(l * c_in);
            for t in 0..l {
                for c in 0..c_in {
                    let phase = 2.0 * std::f64::consts::PI * f * t as f64 / l as f64
                        + c as f64 * std::f64::consts::PI / c_in as f64;
                    data.push(phase.sin() + spec.noise * rng.normal());
                }
            }
            out.push(Utterance {
                features: RealArray::new(&[l, c_in], data),
                label: k,
                id: format!("s{}-c{}-{:04}", spec.seed, k, i),
            });
        }
    }
    Ok(out)
}

/// Train and test sets drawn from independent streams of one seed.
pub fn synthetic_split(train_per_class: usize, test_per_class: usize, seed: u64) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    let mut root = Rng::new(seed);
    let (a, b) = (root.next_u64(), root.next_u64());
    let train = gen_synthetic(&SyntheticSpec::new(train_per_class, a))?;
    let test = gen_synthetic(&SyntheticSpec::new(test_per_class, b))?;
    Ok((train, test))
}

const SPECTRUM_BINS: usize = 8;

/// Channel-averaged DFT magnitudes of bins `0..8` over the whole utterance.
pub fn mean_spectrum(u: &Utterance) -> Vec<f64> {
    let (l, c) = u.features.shape2();
    let mut spec = vec![0.0; SPECTRUM_BINS];
    for (k, s) in spec.iter_mut().enumerate() {
        for ch in 0..c {
            let (mut re, mut im) = (0.0, 0.0);
            for t in 0..l {
                let ang = 2.0 * std::f64::consts::PI * (k * t) as f64 / l as f64;
                let x = u.features.at(t, ch);
                re += x * ang.cos();
                im -= x * ang.sin();
            }
            *s += (re * re + im * im).sqrt() / l as f64;
        }
        *s /= c as f64;
    }
    spec
}

/// Accuracy of a nearest-centroid classifier on [`mean_spectrum`] features.
pub fn centroid_accuracy(train: &[Utterance], test: &[Utterance], num_classes: usize) -> f64 {
    let mut centroids = vec![vec![0.0; SPECTRUM_BINS]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for u in train {
        for (c, s) in centroids[u.label].iter_mut().zip(mean_spectrum(u)) {
            *c += s;
        }
        counts[u.label] += 1;
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        for v in c.iter_mut() {
            *v /= n.max(1) as f64;
        }
    }
    let correct = test
        .iter()
        .filter(|u| {
            let s = mean_spectrum(u);
            let dist = |c: &Vec<f64>| c.iter().zip(&s).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..num_classes).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])));
            best == Some(u.label)
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}

/// Writes `features` as CSV with 9 significant digits.
pub fn write_features_csv(path: &Path, features: &RealArray) -> Result<()> {
    let mut text = String::new();
    for r in 0..features.rows() {
        let row: Vec<String> = features.row(r).iter().map(|v| format!("{:.8e}", v)).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes every utterance to `<dir>/<id>.csv` plus `<dir>/manifest.csv`.
pub fn write_manifest(dir: &Path, utts: &[Utterance]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("manifest.csv");
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    writeln!(f, "# path,label").map_err(|e| Error::io(&manifest, e))?;
    for u in utts {
        let name = format!("{}.csv", u.id);
        write_features_csv(&dir.join(&name), &u.features)?;
        writeln!(f, "{},{}", name, u.label).map_err(|e| Error::io(&manifest, e))?;
    }
    Ok(manifest)
}

fn parse_err(path: &Path, line: usize, kind: ParseErrorKind) -> Error {
    Error::Parse { path: path.to_path_buf(), line, kind }
}

/// Reads an `L × C` CSV of decimal numbers.
pub fn load_features_csv(path: &Path) -> Result<RealArray> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                parse_err(path, 0, ParseErrorKind::MissingFile(path.to_path_buf()))
            }
            _ => parse_err(path, 0, ParseErrorKind::Malformed(e.to_string())),
        })?;
    let mut cols = None;
    let mut rows = 0;
    let mut data = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, ParseErrorKind::Malformed(e.to_string()))
        })?;
        let line = rec.position().map_or(rows + 1, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        let expected = *cols.get_or_insert(rec.len());
        if rec.len() != expected {
            return Err(parse_err(path, line, ParseErrorKind::RaggedRow { expected, found: rec.len() }));
        }
        for cell in rec.iter() {
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| parse_err(path, line, ParseErrorKind::NonNumeric(cell.to_string())))?;
            data.push(v);
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| parse_err(path, 0, ParseErrorKind::Empty))?;
    Ok(RealArray::new(&[rows, cols], data))
}

/// Parses a `path,label` manifest; relative paths resolve against its directory.
pub fn load_manifest(path: &Path, num_classes: usize) -> Result<Vec<Utterance>> {
    if !path.exists() {
        return Err(parse_err(path, 0, ParseErrorKind::MissingFile(path.to_path_buf())));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, 0, ParseErrorKind::Malformed(e.to_string())))?;
    let mut out: Vec<Utterance> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, ParseErrorKind::Malformed(e.to_string()))
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != 2 {
            return Err(parse_err(path, line, ParseErrorKind::RaggedRow { expected: 2, found: rec.len() }));
        }
        let label: usize = rec[1]
            .parse()
            .map_err(|_| parse_err(path, line, ParseErrorKind::NonNumeric(rec[1].to_string())))?;
        if label >= num_classes {
            return Err(parse_err(path, line, ParseErrorKind::LabelOutOfRange { label, num_classes }));
        }
        let feat_path = base.join(&rec[0]);
        if !feat_path.exists() {
            return Err(parse_err(path, line, ParseErrorKind::MissingFile(feat_path)));
        }
        let features = load_features_csv(&feat_path)?;
        if let Some(first) = out.first() {
            if first.features.cols() != features.cols() {
                return Err(parse_err(
                    path,
                    line,
                    ParseErrorKind::Malformed(format!(
                        "{} has {} columns, earlier files have {}",
                        feat_path.display(),
                        features.cols(),
                        first.features.cols()
                    )),
                ));
            }
        }
        let id = Path::new(&rec[0])
            .file_stem()
            .map_or_else(|| rec[0].to_string(), |s| s.to_string_lossy().into_owned());
        out.push(Utterance { features, label, id });
    }
    Ok(out)
}

/// Groups utterances into zero-padded batches, optionally shuffled first.
pub fn make_batches(utts: &[Utterance], batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Batch>> {
    if utts.is_empty() {
        return Err(Error::Precondition("no utterances to batch".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let c = utts[0].features.cols();
    if let Some(u) = utts.iter().find(|u| u.features.cols() != c || u.is_empty()) {
        return Err(Error::Dimension(format!("utterance {} is {:?}, expected L × {}", u.id, u.features.dims(), c)));
    }
    let mut order: Vec<usize> = (0..utts.len()).collect();
    if let Some(seed) = shuffle_seed {
        Rng::new(seed).shuffle(&mut order);
    }
    Ok(order
        .chunks(batch_size)
        .map(|idx| {
            let l_max = idx.iter().map(|&i| utts[i].len()).max().unwrap_or(0);
            let mut data = vec![0.0; idx.len() * l_max * c];
            for (b, &i) in idx.iter().enumerate() {
                let src = utts[i].features.data();
                data[b * l_max * c..b * l_max * c + src.len()].copy_from_slice(src);
            }
            Batch {
                features: RealArray::new(&[idx.len(), l_max, c], data),
                valid_lengths: idx.iter().map(|&i| utts[i].len()).collect(),
                labels: idx.iter().map(|&i| utts[i].label).collect(),
                ids: idx.iter().map(|&i| utts[i].id.clone()).collect(),
            }
        })
        .collect())
}

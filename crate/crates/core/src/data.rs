//! Synthetic two-modality data, file formats and train/test splitting.
//!
//! Two on-disk formats are supported. The line format holds one JSON object
//! per sample:
//!
//! ```text
//! {"eeg":{"shape":[8,128],"data":[...]},"om":{"shape":[4,128],"data":[...]},"label":1}
//! ```
//!
//! The matrix format is a directory with `eeg.csv`, `om.csv` and
//! `labels.csv` (one row per sample, matrices flattened row-major) next to a
//! `manifest.txt` of `key=value` lines naming the shapes and files.
//!
//! Numbers are written with 9 significant digits. Generated values are
//! rounded to that precision at creation, so a write/read round trip is
//! bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::model::{Matrix, ModalitySample};
use crate::random::{open_unit, standard_normal, stream, Stream};
use crate::Scalar;

pub const JSONL_FORMAT: &str = "dpmld-jsonl/1";
pub const CSV_FORMAT: &str = "dpmld-csv/1";
pub const MANIFEST: &str = "manifest.txt";
pub const JSONL_FILE: &str = "samples.jsonl";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: manifest: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("invalid generator configuration: {0}")]
    Config(String),
    #[error("cannot split: {0}")]
    Split(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n_samples: usize,
    pub eeg_channels: usize,
    pub om_dims: usize,
    pub timesteps: usize,
    pub class_balance: f64,
    /// Standard deviation of the background EEG noise; the OM random walk
    /// steps with a tenth of it.
    pub noise_sd: f64,
    /// Peak amplitude of the class-1 EEG burst at unit latent strength.
    pub burst_gain: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_samples: 3000,
            eeg_channels: 8,
            om_dims: 4,
            timesteps: 128,
            class_balance: 0.5,
            noise_sd: 0.5,
            burst_gain: 4.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.eeg_channels == 0 || self.om_dims == 0 || self.timesteps == 0
        {
            return Err(DataError::Config("counts must be positive".into()));
        }
        if !(self.class_balance > 0.0 && self.class_balance < 1.0) {
            return Err(DataError::Config(format!(
                "class balance {} is not in (0, 1)",
                self.class_balance
            )));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite())
            || !(self.burst_gain >= 0.0 && self.burst_gain.is_finite())
        {
            return Err(DataError::Config(
                "noise_sd and burst_gain must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Rounds to the 9 significant digits used on disk.
pub fn quantize(x: f64) -> f64 {
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// Draws the synthetic dataset described by `cfg`.
///
/// Per sample a label `z` and a latent strength `a ~ U(0.5, 1.5)` are drawn.
/// EEG channels carry AR(1) background noise; for `z = 1` a Gaussian-windowed
/// sinusoid of amplitude `a · burst_gain` is added to a random subset of
/// channels. OM rows are random walks; for `z = 1` white noise of standard
/// deviation `a / 2` is added, so the two modalities share `a`.
pub fn generate<T: Scalar>(cfg: &GeneratorConfig) -> Result<Vec<ModalitySample<T>>> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, Stream::Data);
    Ok((0..cfg.n_samples).map(|_| draw_sample(cfg, &mut rng)).collect())
}

fn draw_sample<T: Scalar, R: Rng>(cfg: &GeneratorConfig, rng: &mut R) -> ModalitySample<T> {
    let (c, t) = (cfg.eeg_channels, cfg.timesteps);
    let z = usize::from(open_unit::<f64, _>(rng) < cfg.class_balance);
    let a = 0.5 + open_unit::<f64, _>(rng);

    const PHI: f64 = 0.9;
    let innovation = cfg.noise_sd * (1.0 - PHI * PHI).sqrt();
    let mut eeg = Vec::with_capacity(c * t);
    for _ in 0..c {
        let mut x = cfg.noise_sd * standard_normal(rng);
        for _ in 0..t {
            eeg.push(x);
            x = PHI * x + innovation * standard_normal(rng);
        }
    }
    if z == 1 {
        let tf = t as f64;
        let centre = tf * (0.25 + 0.5 * open_unit::<f64, _>(rng));
        let width = tf / 8.0;
        let cycles = 6.0 + 4.0 * open_unit::<f64, _>(rng);
        let phase = std::f64::consts::TAU * open_unit::<f64, _>(rng);
        let mut active: Vec<bool> = (0..c).map(|_| rng.gen_bool(0.5)).collect();
        if !active.contains(&true) {
            active[rng.gen_range(0..c)] = true;
        }
        for (ch, on) in active.iter().enumerate() {
            if !on {
                continue;
            }
            for i in 0..t {
                let s = i as f64;
                let env = (-0.5 * ((s - centre) / width).powi(2)).exp();
                let wave = (std::f64::consts::TAU * cycles * s / tf + phase).sin();
                eeg[ch * t + i] += a * cfg.burst_gain * env * wave;
            }
        }
    }

    let step = 0.1 * cfg.noise_sd;
    let mut om = Vec::with_capacity(cfg.om_dims * t);
    for _ in 0..cfg.om_dims {
        let mut y = 0.0;
        for _ in 0..t {
            y += step * standard_normal(rng);
            let shift = if z == 1 {
                0.5 * a * standard_normal(rng)
            } else {
                0.0
            };
            om.push(y + shift);
        }
    }

    let conv = |v: Vec<f64>| v.into_iter().map(|x| T::of(quantize(x))).collect();
    ModalitySample {
        eeg: Matrix {
            rows: c,
            cols: t,
            data: conv(eeg),
        },
        om: Matrix {
            rows: cfg.om_dims,
            cols: t,
            data: conv(om),
        },
        label: z,
    }
}

/// Shuffled split with `round(n · train_frac)` training samples, stratified
/// by class so that each split sees every class present in the data.
pub fn split<T: Clone>(
    dataset: &[ModalitySample<T>],
    train_frac: f64,
    seed: u64,
) -> Result<(Vec<ModalitySample<T>>, Vec<ModalitySample<T>>)> {
    let (tr, te) = split_indices(dataset, train_frac, seed)?;
    Ok((
        tr.iter().map(|&i| dataset[i].clone()).collect(),
        te.iter().map(|&i| dataset[i].clone()).collect(),
    ))
}

/// Index form of [`split`].
pub fn split_indices<T>(
    dataset: &[ModalitySample<T>],
    train_frac: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(DataError::Split(format!(
            "train fraction {train_frac} is not in (0, 1)"
        )));
    }
    let n = dataset.len();
    if n < 2 {
        return Err(DataError::Split(format!("{n} samples")));
    }
    let n_train = ((n as f64 * train_frac).round() as usize).clamp(1, n - 1);

    let classes = dataset.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in dataset.iter().enumerate() {
        by_class[s.label].push(i);
    }
    by_class.retain(|v| !v.is_empty());
    if by_class.iter().any(|v| v.len() < 2) {
        return Err(DataError::Split(
            "a class has fewer than two samples and cannot appear in both splits".into(),
        ));
    }

    // largest-remainder allocation of the training quota across classes,
    // keeping at least one sample of each class on both sides
    let exact: Vec<f64> = by_class
        .iter()
        .map(|v| v.len() as f64 * n_train as f64 / n as f64)
        .collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut left = n_train - quota.iter().sum::<usize>();
    for &c in order.iter().cycle().take(order.len() * 2) {
        if left == 0 {
            break;
        }
        if quota[c] < by_class[c].len() - 1 {
            quota[c] += 1;
            left -= 1;
        }
    }
    for (c, q) in quota.iter_mut().enumerate() {
        *q = (*q).clamp(1, by_class[c].len() - 1);
    }

    let mut rng = stream(seed, Stream::Split);
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n - n_train);
    for (members, &q) in by_class.iter_mut().zip(&quota) {
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..q]);
        test.extend_from_slice(&members[q..]);
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok((train, test))
}

fn push_numbers<T: Scalar>(out: &mut String, values: &[T], sep: char) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(sep);
        }
        let _ = write!(out, "{:.8e}", v.to_f64_lossy());
    }
}

fn sample_line<T: Scalar>(s: &ModalitySample<T>) -> String {
    let mut out = String::with_capacity(16 * (s.eeg.data.len() + s.om.data.len()) + 64);
    let _ = write!(out, "{{\"eeg\":{{\"shape\":[{},{}],\"data\":[", s.eeg.rows, s.eeg.cols);
    push_numbers(&mut out, &s.eeg.data, ',');
    let _ = write!(out, "]}},\"om\":{{\"shape\":[{},{}],\"data\":[", s.om.rows, s.om.cols);
    push_numbers(&mut out, &s.om.data, ',');
    let _ = write!(out, "]}},\"label\":{}}}", s.label);
    out
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Scalar>(path: &Path, samples: &[ModalitySample<T>]) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        writeln!(w, "{}", sample_line(s)).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMatrix {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSample {
    eeg: RawMatrix,
    om: RawMatrix,
    label: i64,
}

fn to_matrix<T: Scalar>(raw: RawMatrix, what: &str) -> std::result::Result<Matrix<T>, String> {
    let [rows, cols] = raw.shape;
    if raw.data.len() != rows * cols {
        return Err(format!(
            "{what} has {} values but shape {rows}x{cols}",
            raw.data.len()
        ));
    }
    if rows == 0 || cols == 0 {
        return Err(format!("{what} is empty"));
    }
    Ok(Matrix {
        rows,
        cols,
        data: raw.data.into_iter().map(T::of).collect(),
    })
}

fn check_label(label: i64) -> std::result::Result<usize, String> {
    match label {
        0 | 1 => Ok(label as usize),
        other => Err(format!("label {other} is not 0 or 1")),
    }
}

/// Reads the line format; blank lines are skipped.
pub fn read_jsonl<T: Scalar>(path: &Path) -> Result<Vec<ModalitySample<T>>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut shapes: Option<([usize; 2], [usize; 2])> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |msg: String| DataError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let raw: RawSample = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        let shape = (raw.eeg.shape, raw.om.shape);
        match shapes {
            None => shapes = Some(shape),
            Some(first) if first != shape => {
                return Err(fail(format!(
                    "shapes {shape:?} differ from the first record's {first:?}"
                )))
            }
            _ => {}
        }
        let label = check_label(raw.label).map_err(fail)?;
        let eeg = to_matrix(raw.eeg, "eeg").map_err(fail)?;
        let om = to_matrix(raw.om, "om").map_err(fail)?;
        out.push(ModalitySample { eeg, om, label });
    }
    Ok(out)
}

/// `key=value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> std::result::Result<BTreeMap<String, String>, String> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value", i + 1))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn parse_shape(s: &str) -> Option<(usize, usize)> {
    let (r, c) = s.split_once('x')?;
    Some((r.trim().parse().ok()?, c.trim().parse().ok()?))
}

/// Writes the matrix format into directory `dir` (created if missing).
pub fn write_csv_dir<T: Scalar>(dir: &Path, samples: &[ModalitySample<T>]) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let first = samples.first();
    let shape = |m: Option<&Matrix<T>>| m.map_or((0, 0), |m| (m.rows, m.cols));
    let (er, ec) = shape(first.map(|s| &s.eeg));
    let (or, oc) = shape(first.map(|s| &s.om));
    let mut eeg = String::new();
    let mut om = String::new();
    let mut labels = String::new();
    for s in samples {
        if (s.eeg.rows, s.eeg.cols, s.om.rows, s.om.cols) != (er, ec, or, oc) {
            return Err(DataError::Config(
                "all samples in a matrix-format dataset must share shapes".into(),
            ));
        }
        push_numbers(&mut eeg, &s.eeg.data, ',');
        eeg.push('\n');
        push_numbers(&mut om, &s.om.data, ',');
        om.push('\n');
        let _ = writeln!(labels, "{}", s.label);
    }
    let manifest = format!(
        "format={CSV_FORMAT}\nsamples={}\neeg_shape={er}x{ec}\nom_shape={or}x{oc}\n\
         eeg_file=eeg.csv\nom_file=om.csv\nlabels_file=labels.csv\n",
        samples.len()
    );
    for (name, body) in [
        ("eeg.csv", eeg),
        ("om.csv", om),
        ("labels.csv", labels),
        (MANIFEST, manifest),
    ] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(io_err(&p))?;
    }
    Ok(())
}

fn read_rows<T: Scalar>(path: &Path, width: usize, expect: usize) -> Result<Vec<Vec<T>>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows = Vec::with_capacity(expect);
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |msg: String| DataError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let row = line
            .split(',')
            .enumerate()
            .map(|(j, f)| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .map(T::of)
                    .ok_or_else(|| fail(format!("field {} ({:?}) is not a finite number", j + 1, f)))
            })
            .collect::<Result<Vec<T>>>()?;
        if row.len() != width {
            return Err(fail(format!("{} fields, expected {width}", row.len())));
        }
        rows.push(row);
    }
    if rows.len() != expect {
        return Err(DataError::Manifest {
            path: path.to_path_buf(),
            msg: format!("{} rows, manifest says {expect}", rows.len()),
        });
    }
    Ok(rows)
}

/// Reads the matrix format from directory `dir`.
pub fn read_csv_dir<T: Scalar>(dir: &Path) -> Result<Vec<ModalitySample<T>>> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let bad = |msg: String| DataError::Manifest {
        path: mpath.clone(),
        msg,
    };
    let m = parse_key_values(&text).map_err(&bad)?;
    let get = |k: &str| m.get(k).ok_or_else(|| bad(format!("missing key {k}")));
    if get("format")? != CSV_FORMAT {
        return Err(bad(format!("format is not {CSV_FORMAT}")));
    }
    let n: usize = get("samples")?
        .parse()
        .map_err(|_| bad("samples is not a count".into()))?;
    let (er, ec) = parse_shape(get("eeg_shape")?).ok_or_else(|| bad("bad eeg_shape".into()))?;
    let (or, oc) = parse_shape(get("om_shape")?).ok_or_else(|| bad("bad om_shape".into()))?;
    let eeg = read_rows::<T>(&dir.join(get("eeg_file")?), er * ec, n)?;
    let om = read_rows::<T>(&dir.join(get("om_file")?), or * oc, n)?;
    let lpath = dir.join(get("labels_file")?);
    let ltext = fs::read_to_string(&lpath).map_err(io_err(&lpath))?;
    let mut labels = Vec::with_capacity(n);
    for (i, line) in ltext.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |msg: String| DataError::Parse {
            path: lpath.clone(),
            line: i + 1,
            msg,
        };
        let v: i64 = line
            .trim()
            .parse()
            .map_err(|_| fail(format!("{line:?} is not an integer label")))?;
        labels.push(check_label(v).map_err(fail)?);
    }
    if labels.len() != n {
        return Err(DataError::Manifest {
            path: lpath,
            msg: format!("{} labels, manifest says {n}", labels.len()),
        });
    }
    Ok(eeg
        .into_iter()
        .zip(om)
        .zip(labels)
        .map(|((e, o), label)| ModalitySample {
            eeg: Matrix {
                rows: er,
                cols: ec,
                data: e,
            },
            om: Matrix {
                rows: or,
                cols: oc,
                data: o,
            },
            label,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    Csv,
}

/// Writes a dataset directory: the samples in `format` plus a manifest.
/// Extra `key=value` pairs (e.g. the generator settings) go into the
/// manifest of the line format.
pub fn write_dataset<T: Scalar>(
    dir: &Path,
    samples: &[ModalitySample<T>],
    format: Format,
    extra: &[(String, String)],
) -> Result<()> {
    match format {
        Format::Csv => write_csv_dir(dir, samples),
        Format::Jsonl => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            write_jsonl(&dir.join(JSONL_FILE), samples)?;
            let mut manifest = format!(
                "format={JSONL_FORMAT}\nsamples={}\ndata_file={JSONL_FILE}\n",
                samples.len()
            );
            for (k, v) in extra {
                let _ = writeln!(manifest, "{k}={v}");
            }
            let p = dir.join(MANIFEST);
            fs::write(&p, manifest).map_err(io_err(&p))
        }
    }
}

/// Loads a dataset from a line-format file, or from a directory whose
/// manifest names either format.
pub fn load_external<T: Scalar>(path: &Path) -> Result<Vec<ModalitySample<T>>> {
    if !path.is_dir() {
        return read_jsonl(path);
    }
    let mpath = path.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let m = parse_key_values(&text).map_err(|msg| DataError::Manifest {
        path: mpath.clone(),
        msg,
    })?;
    match m.get("format").map(String::as_str) {
        Some(CSV_FORMAT) => read_csv_dir(path),
        Some(JSONL_FORMAT) => {
            let file = m.get("data_file").map_or(JSONL_FILE, String::as_str);
            let samples = read_jsonl(&path.join(file))?;
            if let Some(n) = m.get("samples").and_then(|s| s.parse::<usize>().ok()) {
                if n != samples.len() {
                    return Err(DataError::Manifest {
                        path: mpath,
                        msg: format!("{} samples on disk, manifest says {n}", samples.len()),
                    });
                }
            }
            Ok(samples)
        }
        other => Err(DataError::Manifest {
            path: mpath,
            msg: format!("unknown format {other:?}"),
        }),
    }
}

/// Loads a dataset whose format is given explicitly.
pub fn load_with_format<T: Scalar>(path: &Path, format: Format) -> Result<Vec<ModalitySample<T>>> {
    match format {
        Format::Csv => read_csv_dir(path),
        Format::Jsonl if path.is_dir() => read_jsonl(&path.join(JSONL_FILE)),
        Format::Jsonl => read_jsonl(path),
    }
}

//! Datasets, CSV ingestion and the synthetic generators.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::rng::{self, Rng};

/// Labels attached to a dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// Real-valued regression targets, one vector per input.
    Real(Vec<Vec<f64>>),
    /// Class indices.
    Class(Vec<usize>),
    /// Probability vectors, e.g. soft labels from a teacher.
    Soft(Vec<Vec<f64>>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(v) | Targets::Soft(v) => v.len(),
            Targets::Class(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Real(v) => Targets::Real(idx.iter().map(|&i| v[i].clone()).collect()),
            Targets::Soft(v) => Targets::Soft(idx.iter().map(|&i| v[i].clone()).collect()),
            Targets::Class(v) => Targets::Class(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Inputs `D_x` with labels `D_y`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(name: impl Into<String>, inputs: Vec<Vec<f64>>, targets: Targets) -> Result<Self> {
        ensure!(
            inputs.len() == targets.len(),
            "{} inputs but {} labels",
            inputs.len(),
            targets.len()
        );
        if let Some(first) = inputs.first() {
            ensure!(
                inputs.iter().all(|x| x.len() == first.len()),
                "inputs do not share one dimension"
            );
        }
        if let Targets::Real(ys) | Targets::Soft(ys) = &targets {
            if let Some(first) = ys.first() {
                ensure!(ys.iter().all(|y| y.len() == first.len()), "labels do not share one dimension");
            }
        }
        Ok(Dataset {
            name: name.into(),
            inputs,
            targets,
        })
    }

    pub fn empty(name: impl Into<String>) -> Self {
        Dataset {
            name: name.into(),
            inputs: vec![],
            targets: Targets::Real(vec![]),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.inputs.first().map(Vec::len)
    }

    /// Rows at `idx`, in order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: self.targets.select(idx),
        }
    }

    /// Shuffled train/test split with `test_fraction` of the rows held out.
    pub fn split(&self, test_fraction: f64, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
        ensure!(
            (0.0..1.0).contains(&test_fraction),
            "test fraction must be in [0,1), got {test_fraction}"
        );
        let n = self.len();
        let perm = rng::sample_indices(rng, n, n);
        let n_test = ((n as f64) * test_fraction).round() as usize;
        let (test, train) = perm.split_at(n_test);
        Ok((self.subset(train), self.subset(test)))
    }

    /// Writes the CSV form: `x0..x{d-1}` then `y0..` or `label`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let d = self.input_dim().unwrap_or(0);
        let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
        match &self.targets {
            Targets::Real(ys) => header.extend((0..ys.first().map_or(0, Vec::len)).map(|j| format!("y{j}"))),
            Targets::Class(_) => header.push("label".into()),
            Targets::Soft(ps) => header.extend((0..ps.first().map_or(0, Vec::len)).map(|j| format!("p{j}"))),
        }
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.inputs[i].iter().map(|v| format_float(*v)).collect();
            match &self.targets {
                Targets::Real(ys) | Targets::Soft(ys) => row.extend(ys[i].iter().map(|v| format_float(*v))),
                Targets::Class(cs) => row.push(cs[i].to_string()),
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    /// Reads the CSV form. A header row is required.
    pub fn read_csv<R: Read>(name: impl Into<String>, r: R) -> Result<Dataset> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r);
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let xs: Vec<usize> = column_indices(&header, "x");
        let ys: Vec<usize> = column_indices(&header, "y");
        let label = header.iter().position(|h| h == "label");
        if xs.is_empty() {
            return Err(Error::config("dataset CSV needs x0.. columns"));
        }
        if ys.is_empty() == label.is_none() {
            return Err(Error::config("dataset CSV needs either y0.. columns or a label column"));
        }
        let mut inputs = Vec::new();
        let mut reals = Vec::new();
        let mut classes = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .unwrap_or("")
                    .parse::<f64>()
                    .map_err(|e| Error::config(format!("row {}: column {}: {e}", line + 1, header[i])))
            };
            inputs.push(xs.iter().map(|&i| parse(i)).collect::<Result<Vec<_>>>()?);
            match label {
                Some(li) => {
                    let v = rec.get(li).unwrap_or("");
                    let c = v
                        .parse::<usize>()
                        .map_err(|e| Error::config(format!("row {}: label `{v}`: {e}", line + 1)))?;
                    classes.push(c);
                }
                None => reals.push(ys.iter().map(|&i| parse(i)).collect::<Result<Vec<_>>>()?),
            }
        }
        let targets = if label.is_some() {
            Targets::Class(classes)
        } else {
            Targets::Real(reals)
        };
        Dataset::new(name, inputs, targets)
    }

    pub fn read_csv_file(path: &Path) -> Result<Dataset> {
        let name = path.file_stem().map_or("dataset".into(), |s| s.to_string_lossy().into_owned());
        let f = std::fs::File::open(path)?;
        Dataset::read_csv(name, f)
    }

    /// Hex SHA-256 of the CSV form; identifies a dataset across runs.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv_string().as_bytes()))
    }

    /// Number of classes implied by the labels.
    pub fn n_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Class(c) => c.iter().max().map(|m| m + 1),
            Targets::Soft(p) => p.first().map(Vec::len),
            Targets::Real(_) => None,
        }
    }
}

fn column_indices(header: &[String], prefix: &str) -> Vec<usize> {
    let mut cols: Vec<(usize, usize)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix(prefix)?.parse::<usize>().ok().map(|k| (k, i)))
        .collect();
    cols.sort();
    cols.into_iter().map(|(_, i)| i).collect()
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// Synthetic dataset generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Generator {
    /// `y = sin(2πx) + N(0, noise²)`, `x ~ U(x_range)`.
    #[serde(rename = "sinusoid-1d")]
    Sinusoid1d {
        n: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default = "default_range")]
        x_range: [f64; 2],
    },
    /// Two interleaved half circles with Gaussian jitter; labels balanced.
    TwoMoons {
        n: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    /// `y = ±(1 + x/2) + N(0, noise²)` with the sign drawn per point, so
    /// every input has two plausible targets.
    BimodalRegression {
        n: usize,
        #[serde(default = "default_bimodal_noise")]
        noise: f64,
    },
}

fn default_noise() -> f64 {
    0.1
}

fn default_bimodal_noise() -> f64 {
    0.05
}

fn default_range() -> [f64; 2] {
    [-1.0, 1.0]
}

impl Generator {
    pub fn name(&self) -> &'static str {
        match self {
            Generator::Sinusoid1d { .. } => "sinusoid-1d",
            Generator::TwoMoons { .. } => "two-moons",
            Generator::BimodalRegression { .. } => "bimodal-regression",
        }
    }

    /// Draws the dataset; identical seeds give identical data.
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        let mut rng = rng::stream(seed, "data");
        match *self {
            Generator::Sinusoid1d { n, noise, x_range } => {
                ensure!(n >= 1, "n must be >= 1");
                ensure!(noise >= 0.0, "noise must be >= 0");
                ensure!(x_range[0] <= x_range[1], "x_range must be ordered");
                let mut xs = Vec::with_capacity(n);
                let mut ys = Vec::with_capacity(n);
                for _ in 0..n {
                    let x = x_range[0] + (x_range[1] - x_range[0]) * rng::uniform(&mut rng);
                    let eps = rng::standard_normal(&mut rng);
                    xs.push(vec![x]);
                    ys.push(vec![(2.0 * PI * x).sin() + noise * eps]);
                }
                Dataset::new(self.name(), xs, Targets::Real(ys))
            }
            Generator::TwoMoons { n, noise } => {
                ensure!(n >= 1, "n must be >= 1");
                let n_upper = n.div_ceil(2);
                let mut xs = Vec::with_capacity(n);
                let mut labels = Vec::with_capacity(n);
                for i in 0..n {
                    let t = PI * rng::uniform(&mut rng);
                    let (x, y, c) = if i < n_upper {
                        (t.cos(), t.sin(), 0)
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin(), 1)
                    };
                    let jx = noise * rng::standard_normal(&mut rng);
                    let jy = noise * rng::standard_normal(&mut rng);
                    xs.push(vec![x + jx, y + jy]);
                    labels.push(c);
                }
                Dataset::new(self.name(), xs, Targets::Class(labels))
            }
            Generator::BimodalRegression { n, noise } => {
                ensure!(n >= 1, "n must be >= 1");
                let mut xs = Vec::with_capacity(n);
                let mut ys = Vec::with_capacity(n);
                for _ in 0..n {
                    let x = -1.0 + 2.0 * rng::uniform(&mut rng);
                    let sign = if rng::uniform(&mut rng) < 0.5 { -1.0 } else { 1.0 };
                    let eps = rng::standard_normal(&mut rng);
                    xs.push(vec![x]);
                    ys.push(vec![sign * (1.0 + 0.5 * x) + noise * eps]);
                }
                Dataset::new(self.name(), xs, Targets::Real(ys))
            }
        }
    }
}

//! Result files: long-form and summary CSVs, config echo, P5 graymaps.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bicl_core::models::{SplitParams, Vae};
use bicl_core::rng::Rng;
use bicl_core::Tensor;
use rand_distr::{Distribution, StandardNormal};

use crate::experiment::{MetricKind, RunRecord};

pub const LONG_HEADER: [&str; 7] = ["method", "dataset", "memory", "seed", "trained_task", "eval_task", "accuracy"];
pub const LL_HEADER: [&str; 7] = ["method", "dataset", "memory", "seed", "trained_task", "eval_task", "test_ll"];
pub const SUMMARY_HEADER: [&str; 7] = ["method", "dataset", "memory", "seed", "LA", "RA", "BTI"];

pub const LONG_FILE: &str = "accuracy_long.csv";
pub const LL_FILE: &str = "test_ll_long.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONFIG_ECHO_FILE: &str = "config.txt";

/// Opens `path` for appending; writes `header` first when the file is new or empty.
fn append_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<File>> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let f = OpenOptions::new().create(true).append(true).open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
    if fresh {
        w.write_record(header)?;
    }
    Ok(w)
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

/// Summary row fields, as written.
pub fn summary_fields(r: &RunRecord) -> Vec<String> {
    vec![r.method.to_string(), r.dataset.clone(), r.memory.to_string(), r.seed.to_string(), fmt(r.la), fmt(r.ra), fmt(r.bti)]
}

/// Appends every record to the long-form and summary CSVs in `dir`.
/// Accuracy records go to the accuracy file, generative records to the test-LL file.
pub fn emit_results(records: &[RunRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let paths = [dir.join(LONG_FILE), dir.join(LL_FILE), dir.join(SUMMARY_FILE)];
    let mut long = append_writer(&paths[0], &LONG_HEADER)?;
    let mut ll = append_writer(&paths[1], &LL_HEADER)?;
    let mut summary = append_writer(&paths[2], &SUMMARY_HEADER)?;
    for r in records {
        let out = match r.metric {
            MetricKind::Accuracy => &mut long,
            MetricKind::TestLl => &mut ll,
        };
        for (t, row) in r.matrix.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                out.write_record([
                    r.method.to_string(),
                    r.dataset.clone(),
                    r.memory.to_string(),
                    r.seed.to_string(),
                    t.to_string(),
                    j.to_string(),
                    fmt(*v),
                ])?;
            }
        }
        summary.write_record(summary_fields(r))?;
    }
    long.flush()?;
    ll.flush()?;
    summary.flush()?;
    Ok(paths.to_vec())
}

/// Writes the canonical config text next to the results.
pub fn emit_config_echo(config_text: &str, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let p = dir.join(CONFIG_ECHO_FILE);
    std::fs::write(&p, config_text).with_context(|| format!("writing {}", p.display()))?;
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongRow {
    pub method: String,
    pub dataset: String,
    pub memory: usize,
    pub seed: u64,
    pub trained_task: usize,
    pub eval_task: usize,
    pub value: f64,
}

pub fn read_long_csv(path: &Path) -> Result<Vec<LongRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 7 {
            bail!("expected 7 fields, found {}", rec.len());
        }
        out.push(LongRow {
            method: rec[0].to_string(),
            dataset: rec[1].to_string(),
            memory: rec[2].parse()?,
            seed: rec[3].parse()?,
            trained_task: rec[4].parse()?,
            eval_task: rec[5].parse()?,
            value: rec[6].parse()?,
        });
    }
    Ok(out)
}

/// Rebuilds the lower-triangular matrix of one run from its long-form rows.
pub fn matrix_from_rows<'a>(rows: impl IntoIterator<Item = &'a LongRow>) -> Result<Vec<Vec<f64>>> {
    let mut m: Vec<Vec<f64>> = Vec::new();
    for r in rows {
        if r.trained_task >= m.len() {
            m.resize(r.trained_task + 1, Vec::new());
        }
        let row = &mut m[r.trained_task];
        if r.eval_task != row.len() {
            bail!("row {} out of order at column {}", r.trained_task, r.eval_task);
        }
        row.push(r.value);
    }
    Ok(m)
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.records().map(|rec| Ok(rec?.iter().map(|s| s.to_string()).collect())).collect()
}

/// 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut r = BufReader::new(bytes);
        let mut fields = Vec::new();
        let mut line = String::new();
        while fields.len() < 4 {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                bail!("truncated graymap header");
            }
            let content = line.split('#').next().unwrap_or("");
            fields.extend(content.split_whitespace().map(str::to_string));
        }
        if fields[0] != "P5" || fields.len() != 4 {
            bail!("not a binary graymap");
        }
        let (width, height, max): (usize, usize, u32) = (fields[1].parse()?, fields[2].parse()?, fields[3].parse()?);
        if max != 255 {
            bail!("unsupported maxval {max}");
        }
        let mut pixels = Vec::new();
        r.read_to_end(&mut pixels)?;
        if pixels.len() != width * height {
            bail!("graymap payload {} bytes, expected {}", pixels.len(), width * height);
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_pgm(&std::fs::read(path).with_context(|| format!("reading {}", path.display()))?)
    }
}

/// Decodes `rows × cols` prior draws `z ~ N(0, I)` and tiles the Bernoulli
/// means into one image; each tile is a square of side `sqrt(input_dim)`.
pub fn sample_grid(vae: &Vae, params: &SplitParams, rows: usize, cols: usize, rng: &mut Rng) -> Result<GrayImage> {
    let d = vae.input_dim();
    let side = (d as f64).sqrt().round() as usize;
    if side * side != d {
        bail!("input dimension {d} is not a square image");
    }
    let n = rows * cols;
    let k = vae.latent_dim();
    let z: Vec<f64> = (0..n * k).map(|_| StandardNormal.sample(rng)).collect();
    let means = vae.decode(params, &Tensor::matrix(n, k, z)?)?;
    let (width, height) = (cols * side, rows * side);
    let mut pixels = vec![0u8; width * height];
    for i in 0..n {
        let (tr, tc) = (i / cols, i % cols);
        for (p, &m) in means.row(i).iter().enumerate() {
            let (y, x) = (tr * side + p / side, tc * side + p % side);
            pixels[y * width + x] = (m.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(GrayImage { width, height, pixels })
}

pub fn emit_sample_grid(vae: &Vae, params: &SplitParams, rows: usize, cols: usize, path: &Path, rng: &mut Rng) -> Result<GrayImage> {
    let img = sample_grid(vae, params, rows, cols, rng)?;
    img.save(path)?;
    Ok(img)
}

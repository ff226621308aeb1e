//! CSV files: the training metrics log, latent embeddings, 2-D projections
//! and WBT grids.

use mmtvae_core::data::{Label, WbtRawGrid};
use mmtvae_core::loss::LossReport;
use mmtvae_core::Tensor;

use crate::error::{format_err, Result};

pub const METRICS_HEADER: [&str; 6] = ["epoch", "ssim", "bce", "kl", "triplet", "total"];

fn num(v: f64) -> String {
    format!("{v}")
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| format_err(format!("{what}: cannot parse {s:?} as a number")))
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| format_err(e.to_string()))
}

pub fn encode_metrics(rows: &[(usize, LossReport)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for (epoch, r) in rows {
        w.write_record([
            epoch.to_string(),
            num(r.ssim_loss),
            num(r.bce_loss),
            num(r.kl_loss),
            num(r.triplet_loss),
            num(r.total),
        ])?;
    }
    finish(w)
}

pub fn decode_metrics(bytes: &[u8]) -> Result<Vec<(usize, LossReport)>> {
    let mut r = csv::Reader::from_reader(bytes);
    if r.headers()?.iter().ne(METRICS_HEADER) {
        return Err(format_err("metrics log has an unexpected header"));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| parse_f64(&rec[i], METRICS_HEADER[i]);
        let epoch = rec[0].parse().map_err(|_| format_err(format!("bad epoch {:?}", &rec[0])))?;
        out.push((
            epoch,
            LossReport {
                ssim_loss: f(1)?,
                bce_loss: f(2)?,
                kl_loss: f(3)?,
                triplet_loss: f(4)?,
                total: f(5)?,
            },
        ));
    }
    Ok(out)
}

/// Labelled latent vectors, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub sample_ids: Vec<String>,
    pub labels: Vec<Label>,
    /// (n, d).
    pub points: Tensor,
}

impl Embeddings {
    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.index()).collect()
    }
}

pub fn encode_embeddings(e: &Embeddings) -> Result<Vec<u8>> {
    let (n, d) = e.points.dims2("embeddings")?;
    if e.sample_ids.len() != n || e.labels.len() != n {
        return Err(format_err("one id and label per embedding row required"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample_id".to_string(), "label".to_string()];
    header.extend((0..d).map(|k| format!("mu_{k}")));
    w.write_record(&header)?;
    for i in 0..n {
        let mut row = vec![e.sample_ids[i].clone(), e.labels[i].to_string()];
        row.extend(e.points.sample(i).iter().map(|&v| num(v)));
        w.write_record(&row)?;
    }
    finish(w)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Embeddings> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers()?.clone();
    if header.len() < 3 || &header[0] != "sample_id" || &header[1] != "label" {
        return Err(format_err("embedding CSV must start with sample_id,label followed by coordinates"));
    }
    let d = header.len() - 2;
    let (mut ids, mut labels, mut data) = (Vec::new(), Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec?;
        ids.push(rec[0].to_string());
        labels.push(rec[1].parse::<Label>()?);
        for k in 0..d {
            data.push(parse_f64(&rec[k + 2], &header[k + 2])?);
        }
    }
    let n = ids.len();
    Ok(Embeddings {
        sample_ids: ids,
        labels,
        points: Tensor::new([n, d], data)?,
    })
}

pub fn encode_projection(ids: &[String], labels: &[Label], coords: &Tensor) -> Result<Vec<u8>> {
    let (n, _) = coords.dims2("projection")?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sample_id", "label", "x", "y"])?;
    for i in 0..n {
        let c = coords.sample(i);
        w.write_record([ids[i].clone(), labels[i].to_string(), num(c[0]), num(c[1])])?;
    }
    finish(w)
}

/// A WBT grid as a matrix: the header row holds the frequencies (Hz) after a
/// `pressure_dapa` cell, each following row a pressure and its absorbances.
pub fn encode_wbt_matrix(pressures: &[f64], frequencies: &[f64], values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != pressures.len() * frequencies.len() {
        return Err(format_err("WBT matrix size does not match its axes"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["pressure_dapa".to_string()];
    header.extend(frequencies.iter().map(|&f| num(f)));
    w.write_record(&header)?;
    for (i, &p) in pressures.iter().enumerate() {
        let mut row = vec![num(p)];
        row.extend(values[i * frequencies.len()..(i + 1) * frequencies.len()].iter().map(|&v| num(v)));
        w.write_record(&row)?;
    }
    finish(w)
}

pub fn decode_wbt_matrix(bytes: &[u8]) -> Result<WbtRawGrid> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers()?.clone();
    if header.len() < 2 {
        return Err(format_err("WBT matrix needs at least one frequency column"));
    }
    let frequencies = header
        .iter()
        .skip(1)
        .map(|s| parse_f64(s, "frequency"))
        .collect::<Result<Vec<_>>>()?;
    let (mut pressures, mut values) = (Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec?;
        pressures.push(parse_f64(&rec[0], "pressure")?);
        for c in 1..rec.len() {
            values.push(parse_f64(&rec[c], "absorbance")?);
        }
    }
    Ok(WbtRawGrid::new(pressures, frequencies, values)?)
}

/// Generated grids in long form, one row per cell.
pub fn encode_wbt_long(pressures: &[f64], frequencies: &[f64], grids: &Tensor) -> Result<Vec<u8>> {
    let n = grids.shape().first().copied().unwrap_or(0);
    let cells = pressures.len() * frequencies.len();
    if grids.numel() != n * cells {
        return Err(format_err("generated grids do not match the WBT axes"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sample", "pressure_dapa", "frequency_hz", "absorbance"])?;
    for s in 0..n {
        let g = grids.sample(s);
        for (i, &p) in pressures.iter().enumerate() {
            for (j, &f) in frequencies.iter().enumerate() {
                w.write_record([s.to_string(), num(p), num(f), num(g[i * frequencies.len() + j])])?;
            }
        }
    }
    finish(w)
}

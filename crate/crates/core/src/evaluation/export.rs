//! Embedding export as tab-separated text.
//!
//! Line 1 is `# anomap-embeddings v1 dim=<d>`, line 2 the column header
//! `label source cell v0 .. v<d-1>`, then one row per exported cell.
//! Values are written in shortest round-trip form.

use std::fmt::Write as _;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::anchor_bank::AnchorBank;
use crate::config::RunConfig;
use crate::data_io::{ImageSample, TextureProvider};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::objectives::downsample_mask;
use crate::pieg::generate_cells;
use crate::pipeline::{to_working, Detector};
use crate::rng::stream;
use crate::synthesis::corrupt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingLabel {
    Normal,
    LocalSynthetic,
    Gpe,
    RealAnomalous,
    Anchor,
}

impl EmbeddingLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingLabel::Normal => "normal",
            EmbeddingLabel::LocalSynthetic => "local_synthetic",
            EmbeddingLabel::Gpe => "gpe",
            EmbeddingLabel::RealAnomalous => "real_anomalous",
            EmbeddingLabel::Anchor => "anchor",
        }
    }
}

impl FromStr for EmbeddingLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "normal" => EmbeddingLabel::Normal,
            "local_synthetic" => EmbeddingLabel::LocalSynthetic,
            "gpe" => EmbeddingLabel::Gpe,
            "real_anomalous" => EmbeddingLabel::RealAnomalous,
            "anchor" => EmbeddingLabel::Anchor,
            other => return Err(Error::Config(format!("unknown embedding label {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub label: EmbeddingLabel,
    pub source: String,
    pub cell: usize,
    pub values: Vec<f64>,
}

const MAGIC: &str = "# anomap-embeddings v1";

fn push_cells(
    rows: &mut Vec<EmbeddingRow>,
    label: EmbeddingLabel,
    source: &str,
    cells: ArrayView2<f64>,
    keep: impl Fn(usize) -> bool,
) {
    for (i, r) in cells.outer_iter().enumerate() {
        if keep(i) {
            rows.push(EmbeddingRow {
                label,
                source: source.to_string(),
                cell: i,
                values: r.to_vec(),
            });
        }
    }
}

/// Collect adapted embeddings of `samples` and the bank's anchors and write
/// them to `path`. Unlabelled or normal samples also yield a locally
/// corrupted view (masked cells only) and a synthetic global embedding;
/// samples with a mask split into real-anomalous and normal cells.
/// Returns the number of rows written.
pub fn export_embeddings(
    det: &Detector,
    bank: &AnchorBank,
    samples: &[ImageSample],
    cfg: &RunConfig,
    path: &Path,
) -> Result<usize> {
    let textures = TextureProvider::new(&cfg.texture);
    let pieg = cfg.effective_pieg();
    let mut rows = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let img = to_working(&s.pixels, det.working_size);
        let (nu, _) = det.embed(&img)?;
        let (lh, lw) = (nu.height(), nu.width());
        match &s.mask {
            Some(m) => {
                let work_mask = to_working(&m.mapv(|v| f32::from(u8::from(v))).insert_axis(ndarray::Axis(2)), det.working_size)
                    .index_axis(ndarray::Axis(2), 0)
                    .mapv(|v| v > 0.5);
                let down: Array1<bool> = downsample_mask(&work_mask, lh, lw, cfg.mask_overlap).into_iter().collect();
                push_cells(&mut rows, EmbeddingLabel::RealAnomalous, &s.id, nu.cells(), |c| down[c]);
                push_cells(&mut rows, EmbeddingLabel::Normal, &s.id, nu.cells(), |c| !down[c]);
            }
            None => {
                push_cells(&mut rows, EmbeddingLabel::Normal, &s.id, nu.cells(), |_| true);
                let mut rng = stream(cfg.seed, &[0xe7, i as u64]);
                let c = corrupt(&img, &textures, &cfg.anomaly, &mut rng);
                let (nu_p, _) = det.embed(&c.image)?;
                let down: Array1<bool> = downsample_mask(&c.mask, lh, lw, cfg.mask_overlap).into_iter().collect();
                push_cells(&mut rows, EmbeddingLabel::LocalSynthetic, &s.id, nu_p.cells(), |k| down[k]);
                let g = generate_cells(nu.cells(), &det.model.disc, bank, &cfg.loss, &pieg, &mut rng, Exec::Sequential)?;
                push_cells(&mut rows, EmbeddingLabel::Gpe, &s.id, g.gpe.view(), |_| true);
            }
        }
    }
    let anchors = bank.anchors_f64();
    push_cells(&mut rows, EmbeddingLabel::Anchor, "bank", anchors.view(), |_| true);
    write_rows(path, &rows, bank.dim())?;
    Ok(rows.len())
}

fn write_rows(path: &Path, rows: &[EmbeddingRow], dim: usize) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{MAGIC} dim={dim}")?;
    let mut header = String::from("label\tsource\tcell");
    for d in 0..dim {
        let _ = write!(header, "\tv{d}");
    }
    writeln!(w, "{header}")?;
    let mut line = String::new();
    for r in rows {
        line.clear();
        let _ = write!(line, "{}\t{}\t{}", r.label.as_str(), r.source, r.cell);
        for v in &r.values {
            let _ = write!(line, "\t{v}");
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let text = std::fs::read_to_string(path)?;
    let bad = |r: String| Error::format(path, r);
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let dim: usize = first
        .strip_prefix(MAGIC)
        .and_then(|r| r.trim().strip_prefix("dim="))
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| bad("missing embedding header".into()))?;
    lines.next().ok_or_else(|| bad("missing column header".into()))?;
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let mut parts = l.split('\t');
            let label = parts.next().unwrap_or_default().parse()?;
            let source = parts.next().ok_or_else(|| bad("missing source".into()))?.to_string();
            let cell = parts
                .next()
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| bad("bad cell index".into()))?;
            let values: Vec<f64> = parts
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("{e}")))?;
            if values.len() != dim {
                return Err(bad(format!("row has {} values, expected {dim}", values.len())));
            }
            Ok(EmbeddingRow {
                label,
                source,
                cell,
                values,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.tsv");
        let rows = vec![
            EmbeddingRow {
                label: EmbeddingLabel::Gpe,
                source: "good/a".into(),
                cell: 3,
                values: vec![0.1, -1e-300, std::f64::consts::PI],
            },
            EmbeddingRow {
                label: EmbeddingLabel::Anchor,
                source: "bank".into(),
                cell: 0,
                values: vec![1.0 / 3.0, 0.0, 7.5],
            },
        ];
        write_rows(&p, &rows, 3).unwrap();
        assert_eq!(read_embeddings(&p).unwrap(), rows);
    }

    #[test]
    fn labels_parse_back() {
        for l in [
            EmbeddingLabel::Normal,
            EmbeddingLabel::LocalSynthetic,
            EmbeddingLabel::Gpe,
            EmbeddingLabel::RealAnomalous,
            EmbeddingLabel::Anchor,
        ] {
            assert_eq!(l.as_str().parse::<EmbeddingLabel>().unwrap(), l);
        }
        assert!("tumour".parse::<EmbeddingLabel>().is_err());
    }
}

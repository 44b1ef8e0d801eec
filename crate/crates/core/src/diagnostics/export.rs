use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::attention::fold::source_at;
use crate::attention::{Layout, Source};
use crate::diagnostics::AttentionTrace;
use crate::error::{Error, Result};

pub const INNER_IMAGE_FILE: &str = "inner_images.csv";
pub const EXCITATION_FILE: &str = "excitation.csv";
pub const HEATMAP_FILE: &str = "heatmaps.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Before,
    After,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Before => "before",
            Phase::After => "after",
        }
    }
}

/// One sample's pair-view map with its simulated re-weighting.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerImage {
    pub block: usize,
    pub sample: usize,
    pub layout: Layout,
    pub excitation: Vec<f64>,
    pub before: Vec<f64>,
    /// Residual entries multiplied by their channel's excitation; identity entries copied.
    pub after: Vec<f64>,
}

impl InnerImage {
    pub fn rows(&self) -> usize {
        self.layout.extents().0
    }

    pub fn cols(&self) -> usize {
        self.layout.extents().1
    }
}

fn entry_source(layout: Layout, row: usize, col: usize) -> Result<(Source, usize)> {
    match layout {
        Layout::Stacked { .. } => Ok((
            if row == 0 {
                Source::Residual
            } else {
                Source::Identity
            },
            col,
        )),
        Layout::Folded { cols, .. } => Ok(source_at(row, col, cols)),
        Layout::Reimaged { .. } => Err(Error::Config(
            "re-imaged maps mix residual and identity entries and cannot be re-weighted".into(),
        )),
    }
}

/// Before/after maps for every block and sample of an inner-imaging trace.
pub fn inner_images(trace: &AttentionTrace) -> Result<Vec<InnerImage>> {
    let mut out = Vec::new();
    for b in &trace.blocks {
        let Some(map) = &b.map else { continue };
        let (rows, cols) = map.layout.extents();
        let size = rows * cols;
        for sample in 0..b.batch {
            let s = b.sample(sample);
            let before = map.values[sample * size..(sample + 1) * size].to_vec();
            let mut after = before.clone();
            for r in 0..rows {
                for c in 0..cols {
                    if let (Source::Residual, ch) = entry_source(map.layout, r, c)? {
                        after[r * cols + c] *= s[ch];
                    }
                }
            }
            out.push(InnerImage {
                block: b.meta.index,
                sample,
                layout: map.layout,
                excitation: s.to_vec(),
                before,
                after,
            });
        }
    }
    if out.is_empty() {
        let mode = trace.blocks.first().map_or("empty", |b| b.meta.mode.name());
        return Err(Error::Config(format!(
            "trace ({mode}) holds no inner-image maps; export needs a pair-view or folded mode"
        )));
    }
    Ok(out)
}

/// One line of the inner-image CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixRow {
    pub block: usize,
    pub sample: usize,
    pub phase: Phase,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse(format!("{}: {other:?}", path.display())),
    }
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn matrix_record(img: &InnerImage, phase: Phase) -> Vec<String> {
    let values = match phase {
        Phase::Before => &img.before,
        Phase::After => &img.after,
    };
    let mut r = vec![
        img.block.to_string(),
        img.sample.to_string(),
        phase.name().to_string(),
        img.rows().to_string(),
        img.cols().to_string(),
    ];
    r.extend(values.iter().map(|v| v.to_string()));
    r
}

/// Writes one excitation vector per block and sample.
pub fn write_excitations(trace: &AttentionTrace, path: &Path) -> Result<()> {
    let rows = trace.blocks.iter().flat_map(|b| {
        (0..b.batch).map(move |i| {
            let mut r = vec![
                b.meta.index.to_string(),
                i.to_string(),
                b.meta.channels.to_string(),
            ];
            r.extend(b.sample(i).iter().map(|v| v.to_string()));
            r
        })
    });
    write_rows(path, &["block", "sample", "channels", "values"], rows)
}

/// Writes the inner-image matrices, the excitation vectors and ASCII heatmaps into `dir`.
pub fn export_inner_images(trace: &AttentionTrace, dir: &Path) -> Result<Vec<PathBuf>> {
    let images = inner_images(trace)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let matrices = dir.join(INNER_IMAGE_FILE);
    write_rows(
        &matrices,
        &["block", "sample", "phase", "rows", "cols", "values"],
        images.iter().flat_map(|img| {
            [
                matrix_record(img, Phase::Before),
                matrix_record(img, Phase::After),
            ]
        }),
    )?;
    let excitation = dir.join(EXCITATION_FILE);
    write_excitations(trace, &excitation)?;

    let mut text = String::new();
    for img in &images {
        for (phase, values) in [(Phase::Before, &img.before), (Phase::After, &img.after)] {
            let _ = writeln!(
                text,
                "block {} sample {} {} {}x{} {}",
                img.block,
                img.sample,
                img.layout.tag(),
                img.rows(),
                img.cols(),
                phase.name()
            );
            text.push_str(&ascii_heatmap(img.rows(), img.cols(), values));
            text.push('\n');
        }
    }
    let heatmaps = dir.join(HEATMAP_FILE);
    fs::write(&heatmaps, text).map_err(|e| Error::io(&heatmaps, e))?;
    Ok(vec![matrices, excitation, heatmaps])
}

/// Reads matrices written by [`export_inner_images`].
pub fn read_inner_images(path: &Path) -> Result<Vec<MatrixRow>> {
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let bad = |line: usize, what: &str| {
        Error::Parse(format!("{}: record {line}: {what}", path.display()))
    };
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() < 5 {
            return Err(bad(line, "fewer than five fields"));
        }
        let int = |i: usize| {
            rec[i]
                .parse::<usize>()
                .map_err(|_| bad(line, "bad integer field"))
        };
        let phase = match &rec[2] {
            "before" => Phase::Before,
            "after" => Phase::After,
            _ => return Err(bad(line, "phase must be before or after")),
        };
        let (rows, cols) = (int(3)?, int(4)?);
        let values = rec
            .iter()
            .skip(5)
            .map(|v| v.parse::<f64>().map_err(|_| bad(line, "bad value")))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != rows * cols {
            return Err(bad(line, "value count differs from rows × cols"));
        }
        out.push(MatrixRow {
            block: int(0)?,
            sample: int(1)?,
            phase,
            rows,
            cols,
            values,
        });
    }
    Ok(out)
}

/// Text rendering of a matrix, darkest glyph for the smallest value.
pub fn ascii_heatmap(rows: usize, cols: usize, values: &[f64]) -> String {
    const RAMP: &[u8] = b" .:-=+*#%@";
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut s = String::with_capacity(rows * (cols + 1));
    for r in 0..rows {
        for c in 0..cols {
            let t = (values[r * cols + c] - lo) / span;
            let k = ((t * (RAMP.len() - 1) as f64).round() as usize).min(RAMP.len() - 1);
            s.push(RAMP[k] as char);
        }
        s.push('\n');
    }
    s
}

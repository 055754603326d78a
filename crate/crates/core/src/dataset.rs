//! Spatial multi-omics data model and its on-disk text formats.
//!
//! Expression matrices are read either from CSV (header row of feature names,
//! first column spot ids) or from a MatrixMarket coordinate file with two
//! sidecar name lists: `<stem>.rows.txt` (spot ids) and `<stem>.cols.txt`
//! (feature names). Coordinates are a CSV with columns `spot_id,x,y`. Every
//! matrix is re-ordered to follow the spot order of the coordinates file.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};

/// Spot coordinates plus RNA counts and optional protein counts.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialOmicsDataset {
    pub spot_ids: Vec<String>,
    /// N×2 spot positions in platform units.
    pub coords: Array2<f64>,
    /// N×G non-negative RNA counts.
    pub rna_counts: Array2<f64>,
    pub gene_names: Vec<String>,
    /// N×P non-negative protein counts, when measured.
    pub protein_counts: Option<Array2<f64>>,
    pub protein_names: Option<Vec<String>>,
}

impl SpatialOmicsDataset {
    /// Builds a dataset after checking every invariant.
    pub fn new(
        spot_ids: Vec<String>,
        coords: Array2<f64>,
        rna_counts: Array2<f64>,
        gene_names: Vec<String>,
        protein: Option<(Array2<f64>, Vec<String>)>,
    ) -> Result<Self> {
        let n = spot_ids.len();
        ensure_unique(&spot_ids)?;
        ensure_unique(&gene_names)?;
        if coords.dim() != (n, 2) {
            return Err(Error::DimensionMismatch(format!(
                "coords are {:?}, expected ({n}, 2)",
                coords.dim()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite coordinate".into()));
        }
        if rna_counts.dim() != (n, gene_names.len()) {
            return Err(Error::DimensionMismatch(format!(
                "RNA matrix is {:?}, expected ({n}, {})",
                rna_counts.dim(),
                gene_names.len()
            )));
        }
        check_counts(&rna_counts, "RNA")?;
        let (protein_counts, protein_names) = match protein {
            Some((counts, names)) => {
                ensure_unique(&names)?;
                if counts.dim() != (n, names.len()) {
                    return Err(Error::DimensionMismatch(format!(
                        "protein matrix is {:?}, expected ({n}, {})",
                        counts.dim(),
                        names.len()
                    )));
                }
                check_counts(&counts, "protein")?;
                (Some(counts), Some(names))
            }
            None => (None, None),
        };
        Ok(Self {
            spot_ids,
            coords,
            rna_counts,
            gene_names,
            protein_counts,
            protein_names,
        })
    }

    pub fn n_spots(&self) -> usize {
        self.spot_ids.len()
    }

    pub fn n_genes(&self) -> usize {
        self.gene_names.len()
    }

    pub fn n_proteins(&self) -> Option<usize> {
        self.protein_names.as_ref().map(Vec::len)
    }

    /// Returns the dataset with spots re-ordered so that row `i` of the
    /// result is row `order[i]` of `self`.
    pub fn permute_spots(&self, order: &[usize]) -> Self {
        let pick = |m: &Array2<f64>| m.select(ndarray::Axis(0), order);
        Self {
            spot_ids: order.iter().map(|&i| self.spot_ids[i].clone()).collect(),
            coords: pick(&self.coords),
            rna_counts: pick(&self.rna_counts),
            gene_names: self.gene_names.clone(),
            protein_counts: self.protein_counts.as_ref().map(pick),
            protein_names: self.protein_names.clone(),
        }
    }

    /// Drops the protein table, as for an RNA-only query dataset.
    pub fn without_protein(&self) -> Self {
        Self {
            protein_counts: None,
            protein_names: None,
            ..self.clone()
        }
    }
}

fn ensure_unique(names: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(names.len());
    for name in names {
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateId(name.clone()));
        }
    }
    Ok(())
}

fn check_counts(m: &Array2<f64>, what: &str) -> Result<()> {
    if let Some(bad) = m.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidValue(format!(
            "{what} counts must be finite and non-negative, found {bad}"
        )));
    }
    Ok(())
}

/// A matrix with its row and column labels, as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledMatrix {
    pub row_ids: Vec<String>,
    pub col_names: Vec<String>,
    pub values: Array2<f64>,
}

impl LabeledMatrix {
    /// Re-orders rows to follow `order`; every id must be present exactly once.
    /// `what` names the matrix in error messages.
    pub fn align_rows(self, order: &[String], what: &str) -> Result<Array2<f64>> {
        let index: HashMap<&str, usize> = self
            .row_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        if self.row_ids.len() != order.len() {
            return Err(Error::DimensionMismatch(format!(
                "{what} has {} spots but {} were expected",
                self.row_ids.len(),
                order.len()
            )));
        }
        let mut rows = Vec::with_capacity(order.len());
        for id in order {
            match index.get(id.as_str()) {
                Some(&i) => rows.push(i),
                None => {
                    return Err(Error::DimensionMismatch(format!(
                        "spot {id:?} is absent from {what}"
                    )))
                }
            }
        }
        Ok(self.values.select(ndarray::Axis(0), &rows))
    }
}

/// Loads and aligns a dataset. `protein_path` may be omitted for RNA-only data.
pub fn load_dataset(
    rna_path: &Path,
    coords_path: &Path,
    protein_path: Option<&Path>,
) -> Result<SpatialOmicsDataset> {
    let (spot_ids, coords) = read_coords(coords_path)?;
    ensure_unique(&spot_ids)?;
    let rna = read_matrix(rna_path)?;
    let gene_names = rna.col_names.clone();
    let rna_counts = rna.align_rows(&spot_ids, "RNA matrix")?;
    let protein = match protein_path {
        Some(path) => {
            let table = read_matrix(path)?;
            let names = table.col_names.clone();
            Some((table.align_rows(&spot_ids, "protein matrix")?, names))
        }
        None => None,
    };
    SpatialOmicsDataset::new(spot_ids, coords, rna_counts, gene_names, protein)
}

/// Reads a labelled matrix, choosing the format from the file extension.
pub fn read_matrix(path: &Path) -> Result<LabeledMatrix> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("mtx")) {
        let values = read_matrix_market(path)?;
        let row_ids = read_name_list(&sidecar_path(path, "rows"))?;
        let col_names = read_name_list(&sidecar_path(path, "cols"))?;
        if values.dim() != (row_ids.len(), col_names.len()) {
            return Err(Error::DimensionMismatch(format!(
                "{} is {:?} but sidecars name {} rows and {} columns",
                path.display(),
                values.dim(),
                row_ids.len(),
                col_names.len()
            )));
        }
        ensure_unique(&row_ids)?;
        ensure_unique(&col_names)?;
        Ok(LabeledMatrix {
            row_ids,
            col_names,
            values,
        })
    } else {
        read_matrix_csv(path)
    }
}

/// `<dir>/<stem>.<which>.txt` next to a MatrixMarket file.
pub fn sidecar_path(path: &Path, which: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{which}.txt"))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(open(path)?))
}

fn parse_cell(raw: &str, path: &Path, line: u64, column: usize) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| {
        Error::parse(
            format!("{} line {line} column {}", path.display(), column + 1),
            format!("cannot parse {raw:?} as a number"),
        )
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        },
        _ => Error::parse(path.display().to_string(), e.to_string()),
    }
}

/// Reads a CSV matrix: header = (id column, feature names...), one row per spot.
pub fn read_matrix_csv(path: &Path) -> Result<LabeledMatrix> {
    let mut reader = csv_reader(path)?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.len() < 2 {
        return Err(Error::parse(
            path.display().to_string(),
            "header needs an id column and at least one feature",
        ));
    }
    let col_names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_owned()).collect();
    ensure_unique(&col_names)?;
    let mut row_ids = Vec::new();
    let mut data = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let mut fields = record.iter();
        let id = fields.next().unwrap_or_default().trim().to_owned();
        row_ids.push(id);
        for (column, raw) in fields.enumerate() {
            data.push(parse_cell(raw, path, line, column + 1)?);
        }
    }
    ensure_unique(&row_ids)?;
    let values = Array2::from_shape_vec((row_ids.len(), col_names.len()), data)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    Ok(LabeledMatrix {
        row_ids,
        col_names,
        values,
    })
}

/// Reads a `spot_id,x,y` coordinates CSV.
pub fn read_coords(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let table = read_matrix_csv(path)?;
    if table.col_names.len() != 2 {
        return Err(Error::parse(
            path.display().to_string(),
            format!(
                "coordinates need exactly columns spot_id,x,y; found {} value columns",
                table.col_names.len()
            ),
        ));
    }
    Ok((table.row_ids, table.values))
}

fn read_name_list(path: &Path) -> Result<Vec<String>> {
    let reader = BufReader::new(open(path)?);
    let mut names = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let name = line.trim();
        if !name.is_empty() {
            names.push(name.to_owned());
        }
    }
    Ok(names)
}

/// Reads a `%%MatrixMarket matrix coordinate real general` file into a dense matrix.
pub fn read_matrix_market(path: &Path) -> Result<Array2<f64>> {
    let reader = BufReader::new(open(path)?);
    parse_matrix_market(reader, &path.display().to_string())
}

pub(crate) fn parse_matrix_market<R: BufRead>(reader: R, context: &str) -> Result<Array2<f64>> {
    let mut lines = reader.lines().enumerate();
    let banner = match lines.next() {
        Some((_, line)) => line.map_err(|e| Error::parse(context, e.to_string()))?,
        None => return Err(Error::parse(context, "empty file")),
    };
    let tokens: Vec<String> = banner.split_whitespace().map(str::to_ascii_lowercase).collect();
    let valid_banner = tokens.len() == 5
        && tokens[0] == "%%matrixmarket"
        && tokens[1] == "matrix"
        && tokens[2] == "coordinate"
        && (tokens[3] == "real" || tokens[3] == "integer")
        && tokens[4] == "general";
    if !valid_banner {
        return Err(Error::parse(
            context,
            format!("unsupported MatrixMarket header {banner:?}"),
        ));
    }

    let mut shape: Option<(usize, usize, usize)> = None;
    let mut values = Array2::zeros((0, 0));
    let mut seen = HashSet::new();
    for (index, line) in lines {
        let line = line.map_err(|e| Error::parse(context, e.to_string()))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        let lineno = index + 1;
        let parts: Vec<&str> = trimmed.split_whitespace().collect();
        let bad = |msg: &str| Error::parse(format!("{context} line {lineno}"), msg.to_owned());
        match shape {
            None => {
                if parts.len() != 3 {
                    return Err(bad("size line must be `rows cols nnz`"));
                }
                let dims: Vec<usize> = parts
                    .iter()
                    .map(|p| p.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("size line must hold integers"))?;
                shape = Some((dims[0], dims[1], dims[2]));
                values = Array2::zeros((dims[0], dims[1]));
            }
            Some((rows, cols, _)) => {
                if parts.len() != 3 {
                    return Err(bad("entry line must be `row col value`"));
                }
                let r: usize = parts[0].parse().map_err(|_| bad("bad row index"))?;
                let c: usize = parts[1].parse().map_err(|_| bad("bad column index"))?;
                let v: f64 = parts[2].parse().map_err(|_| bad("bad value"))?;
                if r == 0 || c == 0 || r > rows || c > cols {
                    return Err(bad("index out of range (indices are 1-based)"));
                }
                if !seen.insert((r, c)) {
                    return Err(bad("duplicate entry"));
                }
                values[[r - 1, c - 1]] = v;
            }
        }
    }
    match shape {
        Some((_, _, nnz)) if nnz == seen.len() => Ok(values),
        Some((_, _, nnz)) => Err(Error::parse(
            context,
            format!("size line announces {nnz} entries, found {}", seen.len()),
        )),
        None => Err(Error::parse(context, "missing size line")),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

/// Writes a labelled matrix as CSV. Floats use the shortest round-trip form.
pub fn write_matrix_csv(
    path: &Path,
    id_header: &str,
    row_ids: &[String],
    col_names: &[String],
    values: &Array2<f64>,
) -> Result<()> {
    if values.dim() != (row_ids.len(), col_names.len()) {
        return Err(Error::DimensionMismatch(format!(
            "cannot write {:?} matrix with {} row ids and {} column names",
            values.dim(),
            row_ids.len(),
            col_names.len()
        )));
    }
    let mut writer = csv::Writer::from_writer(create(path)?);
    let io = |e: csv::Error| csv_error(path, e);
    let mut header = Vec::with_capacity(col_names.len() + 1);
    header.push(id_header.to_owned());
    header.extend(col_names.iter().cloned());
    writer.write_record(&header).map_err(io)?;
    let mut record = Vec::with_capacity(col_names.len() + 1);
    for (id, row) in row_ids.iter().zip(values.rows()) {
        record.clear();
        record.push(id.clone());
        record.extend(row.iter().map(|v| v.to_string()));
        writer.write_record(&record).map_err(io)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn write_coords(path: &Path, spot_ids: &[String], coords: &Array2<f64>) -> Result<()> {
    write_matrix_csv(
        path,
        "spot_id",
        spot_ids,
        &["x".to_owned(), "y".to_owned()],
        coords,
    )
}

/// Writes a dense matrix as MatrixMarket coordinate data (zeros omitted) plus
/// its two sidecar name lists.
pub fn write_matrix_market(
    path: &Path,
    row_ids: &[String],
    col_names: &[String],
    values: &Array2<f64>,
) -> Result<()> {
    let nnz = values.iter().filter(|v| **v != 0.0).count();
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(out, "%%MatrixMarket matrix coordinate real general").map_err(io)?;
    writeln!(out, "{} {} {nnz}", values.nrows(), values.ncols()).map_err(io)?;
    for ((r, c), v) in values.indexed_iter() {
        if *v != 0.0 {
            writeln!(out, "{} {} {v}", r + 1, c + 1).map_err(io)?;
        }
    }
    out.flush().map_err(io)?;
    for (which, names) in [("rows", row_ids), ("cols", col_names)] {
        let side = sidecar_path(path, which);
        let mut w = create(&side)?;
        for name in names {
            writeln!(w, "{name}").map_err(|e| Error::io(&side, e))?;
        }
        w.flush().map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

/// Reads a `spot_id,label` CSV.
pub fn read_labels(path: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let mut reader = csv_reader(path)?;
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() < 2 {
            return Err(Error::parse(
                path.display().to_string(),
                "label rows need spot_id,label",
            ));
        }
        ids.push(record[0].trim().to_owned());
        labels.push(record[1].trim().to_owned());
    }
    ensure_unique(&ids)?;
    Ok((ids, labels))
}

pub fn write_labels(path: &Path, spot_ids: &[String], labels: &[usize]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(create(path)?);
    let io = |e: csv::Error| csv_error(path, e);
    writer.write_record(["spot_id", "label"]).map_err(io)?;
    for (id, label) in spot_ids.iter().zip(labels) {
        writer
            .write_record([id.as_str(), &label.to_string()])
            .map_err(io)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

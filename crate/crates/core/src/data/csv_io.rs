use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use super::{DataError, DataKind, GroundTruth, Result, TimeSeriesDataset, KNOCKOUT_PREFIX};
use crate::tensor::Tensor;

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn row_err(path: &Path, row: usize, detail: impl Into<String>) -> DataError {
    DataError::Row {
        path: path.display().to_string(),
        row,
        detail: detail.into(),
    }
}

fn open_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn parse_f64(path: &Path, row: usize, field: &str, what: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| row_err(path, row, format!("{what} `{field}` is not a number")))
}

fn parse_count(path: &Path, row: usize, field: &str) -> Result<f64> {
    let v = parse_f64(path, row, field, "count")?;
    if v < 0.0 || v.fract() != 0.0 || !v.is_finite() {
        return Err(row_err(path, row, format!("count `{field}` is not a non-negative integer")));
    }
    Ok(v)
}

fn create(path: &Path) -> Result<std::io::BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    File::create(path).map(std::io::BufWriter::new).map_err(|e| io_err(path, e))
}

/// Writes the long format `time,sample_id,<features>`. Knockout indicator
/// columns are recognised on load by their `ko:` name prefix.
pub fn save_dataset_csv(ds: &TimeSeriesDataset, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let werr = |e| io_err(path, e);
    let mut header = vec!["time".to_string(), "sample_id".to_string()];
    header.extend(ds.feature_names().iter().cloned());
    writeln!(w, "{}", header.join(",")).map_err(werr)?;
    for (t, &time) in ds.times().iter().enumerate() {
        let s = ds.samples(t);
        for r in 0..s.rows() {
            write!(w, "{time},{t}_{r}").map_err(werr)?;
            for v in s.row(r) {
                write!(w, ",{v}").map_err(werr)?;
            }
            writeln!(w).map_err(werr)?;
        }
    }
    w.flush().map_err(werr)
}

/// Reads the long format. Rows are grouped by their time value; within a
/// timestep, file order is kept.
pub fn load_dataset_csv(path: &Path, kind: DataKind) -> Result<TimeSeriesDataset> {
    let mut rdr = open_reader(path)?;
    let headers = rdr.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "time" || &headers[1] != "sample_id" {
        return Err(row_err(path, 1, "header must start with `time,sample_id` and name at least one feature"));
    }
    let names: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
    let ko = names.iter().rev().take_while(|n| n.starts_with(KNOCKOUT_PREFIX)).count();
    let d = names.len();
    let mut groups: BTreeMap<u64, (f64, Vec<Vec<f64>>)> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        if rec.len() != d + 2 {
            return Err(row_err(path, row, format!("expected {} fields, found {}", d + 2, rec.len())));
        }
        let time = parse_f64(path, row, &rec[0], "time")?;
        if !time.is_finite() {
            return Err(row_err(path, row, "time is not finite"));
        }
        let mut vals = Vec::with_capacity(d);
        for j in 0..d {
            vals.push(parse_f64(path, row, &rec[j + 2], "value")?);
        }
        // order-preserving key on the float bit pattern (times are finite)
        let key = ordered_key(time);
        groups.entry(key).or_insert_with(|| (time, Vec::new())).1.push(vals);
    }
    if groups.is_empty() {
        return Err(row_err(path, 1, "no data rows"));
    }
    let (times, rows): (Vec<f64>, Vec<Vec<Vec<f64>>>) = groups.into_values().unzip();
    let all_counts = rows
        .iter()
        .flatten()
        .all(|r| r[..d - ko].iter().all(|v| *v >= 0.0 && v.fract() == 0.0));
    let normalized = kind == DataKind::Expression && !all_counts;
    let mut samples = Vec::with_capacity(rows.len());
    for r in &rows {
        samples.push(Tensor::from_rows(r).map_err(|e| DataError::Invalid(e.to_string()))?);
    }
    let ds = TimeSeriesDataset {
        kind,
        normalized,
        times,
        samples,
        feature_names: names,
        knockout_columns: 0,
    };
    ds.with_flags(normalized, ko)
}

fn ordered_key(x: f64) -> u64 {
    let b = x.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

fn group_by_day(
    path: &Path,
    cells: Vec<(f64, String)>,
    genes: &[String],
    counts: &HashMap<(String, usize), f64>,
) -> Result<TimeSeriesDataset> {
    let gene_idx: HashMap<&str, usize> = genes.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();
    let mut days: BTreeMap<u64, (f64, Vec<Vec<f64>>)> = BTreeMap::new();
    for (day, cell) in cells {
        let row: Vec<f64> = genes
            .iter()
            .map(|g| counts.get(&(cell.clone(), gene_idx[g.as_str()])).copied().unwrap_or(0.0))
            .collect();
        days.entry(ordered_key(day)).or_insert_with(|| (day, Vec::new())).1.push(row);
    }
    if days.is_empty() {
        return Err(row_err(path, 1, "no cells"));
    }
    let (times, rows) = days.into_values().unzip();
    TimeSeriesDataset::from_rows(DataKind::Expression, times, rows, genes.to_vec())
}

/// Loads `gene,day,cell_id,count` rows. Missing (gene, cell) pairs are zero.
pub fn load_expression_csv(path: &Path) -> Result<TimeSeriesDataset> {
    let mut rdr = open_reader(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["gene", "day", "cell_id", "count"] {
        return Err(row_err(path, 1, "header must be `gene,day,cell_id,count`"));
    }
    let mut genes: Vec<String> = Vec::new();
    let mut gene_idx: HashMap<String, usize> = HashMap::new();
    let mut cells: Vec<(f64, String)> = Vec::new();
    let mut cell_day: HashMap<String, f64> = HashMap::new();
    let mut counts: HashMap<(String, usize), f64> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        if rec.len() != 4 {
            return Err(row_err(path, row, format!("expected 4 fields, found {}", rec.len())));
        }
        let gene = rec[0].to_string();
        let day = parse_f64(path, row, &rec[1], "day")?;
        let cell = rec[2].to_string();
        let count = parse_count(path, row, &rec[3])?;
        let g = *gene_idx.entry(gene.clone()).or_insert_with(|| {
            genes.push(gene);
            genes.len() - 1
        });
        match cell_day.get(&cell) {
            Some(&d) if d != day => {
                return Err(row_err(path, row, format!("cell `{cell}` appears on days {d} and {day}")));
            }
            Some(_) => {}
            None => {
                cell_day.insert(cell.clone(), day);
                cells.push((day, cell.clone()));
            }
        }
        if counts.insert((cell.clone(), g), count).is_some() {
            return Err(row_err(path, row, format!("duplicate entry for gene {} in cell `{cell}`", &rec[0])));
        }
    }
    group_by_day(path, cells, &genes, &counts)
}

/// Matrix form: `gene,<cell ids…>` rows of counts, plus a `cell_id,day`
/// sidecar. Every labelled cell must carry a day.
pub fn load_expression_matrix(matrix: &Path, labels: &Path) -> Result<TimeSeriesDataset> {
    let mut lab = open_reader(labels)?;
    let lh = lab.headers()?.clone();
    if lh.iter().collect::<Vec<_>>() != ["cell_id", "day"] {
        return Err(row_err(labels, 1, "header must be `cell_id,day`"));
    }
    let mut cells: Vec<(f64, String)> = Vec::new();
    let mut seen: HashMap<String, ()> = HashMap::new();
    for (i, rec) in lab.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        if rec.len() != 2 {
            return Err(row_err(labels, row, "expected 2 fields"));
        }
        if rec[1].is_empty() {
            return Err(row_err(labels, row, format!("cell `{}` has an empty day", &rec[0])));
        }
        let day = parse_f64(labels, row, &rec[1], "day")?;
        if seen.insert(rec[0].to_string(), ()).is_some() {
            return Err(row_err(labels, row, format!("duplicate cell `{}`", &rec[0])));
        }
        cells.push((day, rec[0].to_string()));
    }
    let mut mat = open_reader(matrix)?;
    let mh = mat.headers()?.clone();
    if mh.len() < 2 || &mh[0] != "gene" {
        return Err(row_err(matrix, 1, "header must be `gene,<cell ids>`"));
    }
    let cell_cols: Vec<String> = mh.iter().skip(1).map(str::to_string).collect();
    if let Some(c) = cell_cols.iter().find(|c| !seen.contains_key(*c)) {
        return Err(row_err(matrix, 1, format!("cell `{c}` has no day label")));
    }
    if cell_cols.len() != cells.len() {
        return Err(row_err(labels, 1, "labelled cells missing from the matrix"));
    }
    let mut genes = Vec::new();
    let mut counts = HashMap::new();
    for (i, rec) in mat.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        if rec.len() != cell_cols.len() + 1 {
            return Err(row_err(matrix, row, "row width does not match header"));
        }
        let g = genes.len();
        genes.push(rec[0].to_string());
        for (c, field) in cell_cols.iter().zip(rec.iter().skip(1)) {
            counts.insert((c.clone(), g), parse_count(matrix, row, field)?);
        }
    }
    group_by_day(matrix, cells, &genes, &counts)
}

/// Writes raw counts as `gene,day,cell_id,count`, one row per entry.
pub fn save_expression_csv(ds: &TimeSeriesDataset, path: &Path) -> Result<()> {
    if !ds.is_count_data() {
        return Err(DataError::Invalid("only raw expression counts use the gene/day/cell format".into()));
    }
    let mut w = create(path)?;
    let werr = |e| io_err(path, e);
    writeln!(w, "gene,day,cell_id,count").map_err(werr)?;
    for (t, &day) in ds.times().iter().enumerate() {
        let s = ds.samples(t);
        for r in 0..s.rows() {
            for (g, name) in ds.feature_names().iter().enumerate() {
                writeln!(w, "{name},{day},c{t}_{r},{}", s.at(r, g)).map_err(werr)?;
            }
        }
    }
    w.flush().map_err(werr)
}

/// `time,<features>` with the true λ or μ per timestep.
pub fn save_ground_truth_csv(gt: &GroundTruth, names: &[String], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let werr = |e| io_err(path, e);
    writeln!(w, "time,{}", names.join(",")).map_err(werr)?;
    for (t, row) in gt.times.iter().zip(&gt.params) {
        write!(w, "{t}").map_err(werr)?;
        for v in row {
            write!(w, ",{v}").map_err(werr)?;
        }
        writeln!(w).map_err(werr)?;
    }
    w.flush().map_err(werr)
}

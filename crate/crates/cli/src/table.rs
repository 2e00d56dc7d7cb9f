//! Contingency tables as CSV: a `class` column of row names, optional `x`
//! and `y` centroid columns, then one count column per condition.

use std::fmt::Write as _;
use std::path::Path;

use wttf_core::cluster::{merge_undersampled, ClusterModel, MergeEvent};
use wttf_core::data::Point2;
use wttf_core::stats::{ContingencyTable, MIN_EXPECTED};
use wttf_core::{Error, Result};

#[derive(Debug, Clone)]
pub struct NamedTable {
    pub classes: Vec<String>,
    pub conditions: Vec<String>,
    pub centroids: Option<Vec<Point2>>,
    pub table: ContingencyTable,
}

fn parse_err(path: &str, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

pub fn read_table(path: &Path) -> Result<NamedTable> {
    let name = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(&name, 1, format!("{other:?}")),
        })?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(&name, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.first().map(String::as_str) != Some("class") {
        return Err(parse_err(&name, 1, "first column must be `class`"));
    }
    let has_xy = header.get(1).map(String::as_str) == Some("x") && header.get(2).map(String::as_str) == Some("y");
    let first_count = if has_xy { 3 } else { 1 };
    let conditions = header[first_count..].to_vec();
    if conditions.len() < 2 {
        return Err(parse_err(&name, 1, "need at least 2 condition columns"));
    }
    let mut classes = Vec::new();
    let mut centroids = Vec::new();
    let mut counts = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| parse_err(&name, line, e.to_string()))?;
        if rec.len() != header.len() {
            return Err(parse_err(&name, line, format!("{} fields, expected {}", rec.len(), header.len())));
        }
        classes.push(rec[0].to_string());
        let num = |j: usize| -> Result<f64> {
            rec[j]
                .parse::<f64>()
                .map_err(|_| parse_err(&name, line, format!("`{}` is not a number", &rec[j])))
        };
        if has_xy {
            centroids.push(Point2::new(num(1)?, num(2)?));
        }
        let row = (first_count..rec.len())
            .map(|j| {
                rec[j]
                    .parse::<u64>()
                    .map_err(|_| parse_err(&name, line, format!("`{}` is not a count", &rec[j])))
            })
            .collect::<Result<Vec<u64>>>()?;
        counts.push(row);
    }
    let table = ContingencyTable::from_counts(counts).map_err(|e| parse_err(&name, 0, e.to_string()))?;
    Ok(NamedTable {
        classes,
        conditions,
        centroids: has_xy.then_some(centroids),
        table,
    })
}

pub fn write_table(t: &NamedTable, path: &Path) -> Result<()> {
    let mut out = String::from("class");
    if t.centroids.is_some() {
        out.push_str(",x,y");
    }
    for c in &t.conditions {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (i, row) in t.table.counts().iter().enumerate() {
        out.push_str(&t.classes[i]);
        if let Some(cs) = &t.centroids {
            let _ = write!(out, ",{},{}", cs[i].x, cs[i].y);
        }
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    wttf_core::pipeline::write_file(path, out.as_bytes())
}

/// Counts with row and column totals, followed by the smallest expected count.
pub fn render(t: &NamedTable) -> String {
    let tab = &t.table;
    let w0 = t.classes.iter().map(String::len).max().unwrap_or(5).max(5);
    let mut s = format!("{:w0$}", "");
    for c in &t.conditions {
        let _ = write!(s, " {c:>8}");
    }
    s.push_str("    Total\n");
    for (i, row) in tab.counts().iter().enumerate() {
        let _ = write!(s, "{:w0$}", t.classes[i]);
        for v in row {
            let _ = write!(s, " {v:>8}");
        }
        let _ = writeln!(s, " {:>8}", tab.row_totals()[i]);
    }
    let _ = write!(s, "{:w0$}", "Total");
    for v in tab.col_totals() {
        let _ = write!(s, " {v:>8}");
    }
    let _ = writeln!(s, " {:>8}", tab.total());
    let (r, c, e) = tab.min_expected();
    let verdict = if e >= MIN_EXPECTED { "satisfied" } else { "not satisfied" };
    let _ = writeln!(
        s,
        "min expected count: e[{}, {}] = {}*{}/{} = {e:.2} ({verdict}, threshold {MIN_EXPECTED})",
        t.classes[r],
        t.conditions[c],
        tab.row_totals()[r],
        tab.col_totals()[c],
        tab.total()
    );
    s
}

pub struct TableMerge {
    pub merged: NamedTable,
    pub events: Vec<MergeEvent>,
    pub merge_map: Vec<usize>,
}

/// Merges undersampled rows by centroid linkage. Merged rows keep the name of
/// the surviving row with the absorbed names appended.
pub fn merge(t: &NamedTable) -> Result<TableMerge> {
    let centroids = t
        .centroids
        .clone()
        .ok_or_else(|| Error::InvalidInput("merging needs `x` and `y` centroid columns".into()))?;
    let model = ClusterModel::new(centroids)?;
    let out = merge_undersampled(&model, &t.table)?;
    let map = out.model.merge_map().to_vec();
    let classes = out
        .model
        .survivors()
        .into_iter()
        .map(|s| {
            (0..map.len())
                .filter(|&i| map[i] == s)
                .map(|i| t.classes[i].as_str())
                .collect::<Vec<_>>()
                .join("+")
        })
        .collect();
    Ok(TableMerge {
        merged: NamedTable {
            classes,
            conditions: t.conditions.clone(),
            centroids: Some(out.model.centroids()),
            table: out.table,
        },
        events: out.events,
        merge_map: map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn read_write_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "class,x,y,A,B\nc1,0,0,10,20\nc2,5,0,30,40\nc3,5.5,0,1,2\n").unwrap();
        let t = read_table(&p).unwrap();
        assert_eq!(t.classes, ["c1", "c2", "c3"]);
        assert_eq!(t.table.counts()[1], vec![30, 40]);
        let q = dir.path().join("u.csv");
        write_table(&t, &q).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), std::fs::read_to_string(&q).unwrap());
        let m = merge(&t).unwrap();
        assert_eq!(m.merged.classes, ["c1", "c2+c3"]);
        assert_eq!(m.merge_map, vec![0, 1, 1]);
    }

    #[test]
    fn malformed_rows_report_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "class,A,B\nc1,1,2\nc2,3,x\n").unwrap();
        let e = read_table(&p).unwrap_err().to_string();
        assert!(e.contains(":3:"), "{e}");
        std::fs::write(&p, "name,A,B\nc1,1,2\n").unwrap();
        assert!(read_table(&p).is_err());
    }
}

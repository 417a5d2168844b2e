//! Delimited-text datasets, genotype files and JSON result files.
//!
//! Dataset columns: `id, L1, R1, L2, R2`, an optional `group` column
//! (`biv`, `m1`, `m2`), then covariates prefixed `z1_` (margin 1), `z2_`
//! (margin 2) or `zs_` (shared by both margins). `inf` marks right-censoring
//! and `L = 0` left-censoring. Margin `j` sees its own covariates followed by
//! the shared ones, in file order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::likelihood::{Dataset, MarginObs, SubjectRecord};
use crate::predict::PredictionGrid;
use crate::scoretest::{GenotypeMatrix, ScoreTestResult, SnpError};

fn parse_time(s: &str, line: usize, col: &str) -> Result<f64> {
    let s = s.trim();
    let v = match s.to_ascii_lowercase().as_str() {
        "inf" | "+inf" | "infinity" => f64::INFINITY,
        _ => s
            .parse::<f64>()
            .map_err(|_| Error::Parse { line, msg: format!("column {col}: cannot parse '{s}' as a number") })?,
    };
    if v.is_nan() {
        return Err(Error::Parse { line, msg: format!("column {col}: NaN is not allowed") });
    }
    Ok(v)
}

fn parse_value(s: &str, line: usize, col: &str) -> Result<f64> {
    let v = parse_time(s, line, col)?;
    if !v.is_finite() {
        return Err(Error::Parse { line, msg: format!("column {col}: covariates must be finite") });
    }
    Ok(v)
}

/// Reads a dataset, validating every record.
pub fn read_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| Error::Parse { line: 1, msg: format!("missing column '{name}'") });
    let (ci, cl1, cr1, cl2, cr2) = (need("id")?, need("L1")?, need("R1")?, need("L2")?, need("R2")?);
    let cgroup = col("group");
    let mut own: [Vec<(usize, String)>; 2] = [Vec::new(), Vec::new()];
    let mut shared: Vec<(usize, String)> = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if h.starts_with("z1_") {
            own[0].push((i, h.to_string()));
        } else if h.starts_with("z2_") {
            own[1].push((i, h.to_string()));
        } else if h.starts_with("zs_") {
            shared.push((i, h.to_string()));
        } else if !["id", "L1", "R1", "L2", "R2", "group"].contains(&h) {
            return Err(Error::Parse { line: 1, msg: format!("unknown column '{h}'") });
        }
    }
    let cols: [Vec<(usize, String)>; 2] = [0, 1].map(|j| own[j].iter().chain(&shared).cloned().collect());
    let names = cols.clone().map(|c| c.into_iter().map(|(_, n)| n).collect::<Vec<_>>());

    let mut records = Vec::new();
    for (k, row) in rdr.records().enumerate() {
        let row = row?;
        let line = row.position().map_or(k + 2, |p| p.line() as usize);
        let id = row.get(ci).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::Parse { line, msg: "empty id".into() });
        }
        let group = cgroup.map(|c| row.get(c).unwrap_or("").to_string()).unwrap_or_else(|| "biv".into());
        let present = match group.as_str() {
            "biv" | "" => [true, true],
            "m1" => [true, false],
            "m2" => [false, true],
            g => return Err(Error::Parse { line, msg: format!("unknown group '{g}'") }),
        };
        let mut margins = [None, None];
        for j in 0..2 {
            if !present[j] {
                continue;
            }
            let (cl, cr) = if j == 0 { (cl1, cr1) } else { (cl2, cr2) };
            let l = parse_time(row.get(cl).unwrap_or(""), line, if j == 0 { "L1" } else { "L2" })?;
            let r = parse_time(row.get(cr).unwrap_or(""), line, if j == 0 { "R1" } else { "R2" })?;
            let z = cols[j]
                .iter()
                .map(|(c, n)| parse_value(row.get(*c).unwrap_or(""), line, n))
                .collect::<Result<Vec<_>>>()?;
            margins[j] = Some(MarginObs::new(l, r, z));
        }
        records.push(SubjectRecord { id, margins });
    }
    Dataset::new(records, names)
}

pub fn read_dataset_file(path: &Path) -> Result<Dataset> {
    read_dataset(File::open(path)?)
}

fn fmt(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

/// Writes a dataset. Covariate names must carry a `z1_`/`z2_`/`zs_` prefix,
/// list each margin's own covariates before the shared ones, and shared
/// covariates must agree across margins of a bivariate record.
pub fn write_dataset<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let split = |j: usize| -> Result<(Vec<String>, Vec<String>)> {
        let prefix = if j == 0 { "z1_" } else { "z2_" };
        let names = &data.covariate_names[j];
        let n_own = names.iter().take_while(|n| n.starts_with(prefix)).count();
        let (own, shared) = names.split_at(n_own);
        if shared.iter().any(|n| !n.starts_with("zs_")) {
            return Err(Error::Config(format!(
                "margin {} covariates must be {prefix}* followed by zs_*, got {names:?}",
                j + 1
            )));
        }
        Ok((own.to_vec(), shared.to_vec()))
    };
    let (own1, shared1) = split(0)?;
    let (own2, shared2) = split(1)?;
    if shared1 != shared2 {
        return Err(Error::Config("shared covariates differ between margins".into()));
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["id", "L1", "R1", "L2", "R2", "group"].map(String::from).to_vec();
    header.extend(own1.iter().cloned());
    header.extend(own2.iter().cloned());
    header.extend(shared1.iter().cloned());
    w.write_record(&header)?;
    let (n1, n2, ns) = (own1.len(), own2.len(), shared1.len());
    for rec in &data.records {
        let group = match (&rec.margins[0], &rec.margins[1]) {
            (Some(_), Some(_)) => "biv",
            (Some(_), None) => "m1",
            (None, Some(_)) => "m2",
            (None, None) => return Err(Error::InvalidRecord { id: rec.id.clone(), reason: "no margin".into() }),
        };
        let mut row = vec![rec.id.clone()];
        for m in &rec.margins {
            match m {
                Some(m) => row.extend([fmt(m.l), fmt(m.r)]),
                None => row.extend([String::new(), String::new()]),
            }
        }
        row.push(group.into());
        let own = |j: usize, n: usize| match &rec.margins[j] {
            Some(m) => m.z[..n].iter().map(|&v| fmt(v)).collect(),
            None => vec![String::new(); n],
        };
        row.extend(own(0, n1));
        row.extend(own(1, n2));
        let s1 = rec.margins[0].as_ref().map(|m| &m.z[n1..]);
        let s2 = rec.margins[1].as_ref().map(|m| &m.z[n2..]);
        if let (Some(a), Some(b)) = (s1, s2) {
            if a != b {
                return Err(Error::InvalidRecord {
                    id: rec.id.clone(),
                    reason: "shared covariates differ between margins".into(),
                });
            }
        }
        let shared = s1.or(s2).unwrap_or(&[]);
        debug_assert_eq!(shared.len(), ns);
        row.extend(shared.iter().map(|&v| fmt(v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset_file(data: &Dataset, path: &Path) -> Result<()> {
    write_dataset(data, BufWriter::new(File::create(path)?))
}

/// Reads genotypes keyed by `id` and aligns them to the dataset's records.
/// Every record id must be present; extra ids are ignored.
pub fn read_genotypes<R: Read>(reader: R, data: &Dataset) -> Result<GenotypeMatrix> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("id") {
        return Err(Error::Parse { line: 1, msg: "first genotype column must be 'id'".into() });
    }
    let snps: Vec<String> = headers.iter().skip(1).map(String::from).collect();
    let mut by_id: HashMap<String, Vec<f64>> = HashMap::new();
    for (k, row) in rdr.records().enumerate() {
        let row = row?;
        let line = row.position().map_or(k + 2, |p| p.line() as usize);
        let id = row.get(0).unwrap_or("").to_string();
        let values = snps
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let cell = row.get(i + 1).unwrap_or("");
                let v = parse_value(cell, line, s)?;
                if ![0.0, 1.0, 2.0].contains(&v) {
                    return Err(Error::Parse { line, msg: format!("column {s}: dosage {v} not in {{0, 1, 2}}") });
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        if by_id.insert(id.clone(), values).is_some() {
            return Err(Error::Parse { line, msg: format!("duplicate id '{id}'") });
        }
    }
    let mut columns = vec![Vec::with_capacity(data.len()); snps.len()];
    for rec in &data.records {
        let row = by_id.get(&rec.id).ok_or_else(|| Error::InvalidRecord {
            id: rec.id.clone(),
            reason: "missing from genotype file".into(),
        })?;
        for (c, v) in columns.iter_mut().zip(row) {
            c.push(*v);
        }
    }
    Ok(GenotypeMatrix { snps, columns })
}

pub fn read_genotypes_file(path: &Path, data: &Dataset) -> Result<GenotypeMatrix> {
    read_genotypes(File::open(path)?, data)
}

pub fn write_genotypes<W: Write>(data: &Dataset, g: &GenotypeMatrix, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string()];
    header.extend(g.snps.iter().cloned());
    w.write_record(&header)?;
    for (i, rec) in data.records.iter().enumerate() {
        let mut row = vec![rec.id.clone()];
        row.extend(g.columns.iter().map(|c| fmt(c[i])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a TOML configuration; unknown or malformed keys are reported by name.
pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
}

/// Score-test results, one row per SNP in input order: `snp, statistic,
/// df, p_value, error`.
pub fn write_score_results<W: Write>(
    rows: &[std::result::Result<ScoreTestResult, SnpError>],
    df: usize,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["snp", "statistic", "df", "p_value", "error"])?;
    for row in rows {
        match row {
            Ok(r) => w.write_record([r.snp.clone(), fmt(r.statistic), r.df.to_string(), fmt(r.p_value), String::new()])?,
            Err(e) => w.write_record([e.snp.clone(), String::new(), df.to_string(), String::new(), e.reason.clone()])?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Long-format grid: `t1, t2, value`.
pub fn write_grid<W: Write>(grid: &PredictionGrid, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t1", "t2", "value"])?;
    for (i, &a) in grid.t1.iter().enumerate() {
        for (j, &b) in grid.t2.iter().enumerate() {
            w.write_record([fmt(a), fmt(b), fmt(grid.values[i][j])])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "id,L1,R1,L2,R2,group,z1_age,z2_age,zs_smoke\n\
        a,0,1.5,0.5,inf,biv,60,61,1\n\
        b,2,3,,,m1,55,,0\n\
        c,,,1,4.25,m2,,70,1\n";

    #[test]
    fn parses_sample() {
        let d = read_dataset(SAMPLE.as_bytes()).unwrap();
        assert_eq!(d.covariate_names[0], vec!["z1_age", "zs_smoke"]);
        assert_eq!(d.covariate_names[1], vec!["z2_age", "zs_smoke"]);
        assert_eq!(d.records[0].margins[1].as_ref().unwrap().r, f64::INFINITY);
        assert!(d.records[1].margins[1].is_none());
        assert_eq!(d.records[2].margins[1].as_ref().unwrap().z, vec![70.0, 1.0]);
    }

    #[test]
    fn round_trip() {
        let d = read_dataset(SAMPLE.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn errors_name_line_or_record() {
        let bad = "id,L1,R1,L2,R2\na,0,1,0,1\nb,0,x,0,1\n";
        match read_dataset(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let empty = "id,L1,R1,L2,R2\na,0,1,0,1\nbad,3,2,0,1\n";
        match read_dataset(empty.as_bytes()) {
            Err(Error::InvalidRecord { id, .. }) => assert_eq!(id, "bad"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn genotypes_align_by_id() {
        let d = read_dataset(SAMPLE.as_bytes()).unwrap();
        let g = read_genotypes("id,rs1,rs2\nc,2,0\na,0,1\nb,1,1\nextra,0,0\n".as_bytes(), &d).unwrap();
        assert_eq!(g.columns[0], vec![0.0, 1.0, 2.0]);
        assert_eq!(g.columns[1], vec![1.0, 1.0, 0.0]);
        let missing = read_genotypes("id,rs1\na,0\nb,1\n".as_bytes(), &d);
        assert!(matches!(missing, Err(Error::InvalidRecord { id, .. }) if id == "c"));
    }
}

//! CSV ingest and the per-unit predictions file.

use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{JomiError, Result};
use crate::unit::{Dataset, Unit};

fn data_err(row: usize, column: &str, message: impl Into<String>) -> JomiError {
    JomiError::Data {
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

#[derive(Default)]
struct Columns {
    id: Option<usize>,
    y: Option<usize>,
    c: Option<usize>,
    mu_hat: Option<usize>,
    q_lo: Option<usize>,
    q_hi: Option<usize>,
    sigma_hat: Option<usize>,
    sel_score: Option<usize>,
    cost: Option<usize>,
    /// `(class, column)` sorted by class.
    probs: Vec<(usize, usize)>,
}

impl Columns {
    fn from_header(header: &csv::StringRecord) -> Result<Self> {
        let mut c = Columns::default();
        for (k, name) in header.iter().enumerate() {
            let name = name.trim();
            let slot = match name {
                "id" => &mut c.id,
                "y" => &mut c.y,
                "c" => &mut c.c,
                "muhat" => &mut c.mu_hat,
                "q_lo" => &mut c.q_lo,
                "q_hi" => &mut c.q_hi,
                "sigma_hat" => &mut c.sigma_hat,
                "sel_score" => &mut c.sel_score,
                "cost" => &mut c.cost,
                _ => {
                    if let Some(class) = name.strip_prefix("prob_") {
                        let class: usize = class
                            .parse()
                            .map_err(|_| data_err(0, name, "unrecognized probability column"))?;
                        c.probs.push((class, k));
                    }
                    continue;
                }
            };
            if slot.replace(k).is_some() {
                return Err(data_err(0, name, "duplicate column"));
            }
        }
        c.probs.sort_unstable();
        for (expect, &(class, _)) in c.probs.iter().enumerate() {
            if class != expect {
                return Err(data_err(
                    0,
                    &format!("prob_{expect}"),
                    "probability columns must run prob_0..prob_k",
                ));
            }
        }
        Ok(c)
    }
}

fn cell(
    rec: &csv::StringRecord,
    col: Option<usize>,
    row: usize,
    name: &str,
) -> Result<Option<f64>> {
    let Some(k) = col else { return Ok(None) };
    let text = rec.get(k).unwrap_or("").trim();
    if text.is_empty() {
        return Ok(None);
    }
    text.parse::<f64>()
        .map(Some)
        .map_err(|_| data_err(row, name, format!("cannot parse `{text}` as a number")))
}

/// Reads units from CSV. `row` numbers in errors count data rows from 1.
/// Unrecognized columns are ignored; empty cells leave the field absent.
pub fn read_units<R: Read>(reader: R, require_y: bool) -> Result<Vec<Unit>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let cols = Columns::from_header(rdr.headers()?)?;
    let mut units = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = k + 1;
        let id = match cols.id {
            Some(c) => rec.get(c).unwrap_or("").trim().to_string(),
            None => row.to_string(),
        };
        let probs = if cols.probs.is_empty() {
            None
        } else {
            let mut p = Vec::with_capacity(cols.probs.len());
            for &(class, col) in &cols.probs {
                let name = format!("prob_{class}");
                p.push(
                    cell(&rec, Some(col), row, &name)?
                        .ok_or_else(|| data_err(row, &name, "missing probability"))?,
                );
            }
            Some(p)
        };
        let unit = Unit {
            id,
            y: cell(&rec, cols.y, row, "y")?,
            mu_hat: cell(&rec, cols.mu_hat, row, "muhat")?,
            q_lo: cell(&rec, cols.q_lo, row, "q_lo")?,
            q_hi: cell(&rec, cols.q_hi, row, "q_hi")?,
            sigma_hat: cell(&rec, cols.sigma_hat, row, "sigma_hat")?,
            class_probs: probs,
            threshold_c: cell(&rec, cols.c, row, "c")?,
            cost: cell(&rec, cols.cost, row, "cost")?,
            sel_score: cell(&rec, cols.sel_score, row, "sel_score")?,
        };
        if require_y && unit.y.is_none() {
            return Err(data_err(row, "y", "calibration row has no outcome"));
        }
        unit.validate()
            .map_err(|e| data_err(row, "", e.to_string()))?;
        units.push(unit);
    }
    Ok(units)
}

/// Loads a calibration file (outcomes required) and a test file.
pub fn read_dataset(calib_path: &Path, test_path: &Path) -> Result<Dataset> {
    let calib = read_units(std::fs::File::open(calib_path)?, true)?;
    let test = read_units(std::fs::File::open(test_path)?, false)?;
    Dataset::new(calib, test)
}

/// One row of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictRow {
    pub id: String,
    pub selected: bool,
    pub p_value: Option<f64>,
    /// Serialized set; empty for unselected units and for the empty set.
    pub set: String,
    pub n_segments: Option<usize>,
    pub ref_size: Option<usize>,
    pub ref_size_below: Option<usize>,
    pub ref_size_above: Option<usize>,
}

pub fn write_predictions<W: Write>(writer: W, rows: &[PredictRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_regression_columns() {
        let text = "id,muhat,y,extra\na,0.5,1.0,zz\nb,-1,,\n";
        let u = read_units(text.as_bytes(), false).unwrap();
        assert_eq!(u[0].mu_hat, Some(0.5));
        assert_eq!(u[0].y, Some(1.0));
        assert_eq!(u[1].y, None);
        assert!(matches!(
            read_units(text.as_bytes(), true),
            Err(JomiError::Data { row: 2, ref column, .. }) if column == "y"
        ));
    }

    #[test]
    fn bad_cells_name_row_and_column() {
        let text = "id,muhat\na,0.5\nb,x1\n";
        match read_units(text.as_bytes(), false) {
            Err(JomiError::Data { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "muhat");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn probabilities_must_sum_to_one() {
        let ok = "id,prob_1,prob_0,y\na,0.25,0.75,1\n";
        let u = read_units(ok.as_bytes(), true).unwrap();
        assert_eq!(u[0].class_probs, Some(vec![0.75, 0.25]));
        let bad = "id,prob_0,prob_1\na,0.5,0.5\nb,0.5,0.6\n";
        assert!(matches!(
            read_units(bad.as_bytes(), false),
            Err(JomiError::Data { row: 2, .. })
        ));
    }

    #[test]
    fn writes_empty_cells_for_absent_values() {
        let rows = [PredictRow {
            id: "a".into(),
            selected: false,
            p_value: None,
            set: String::new(),
            n_segments: None,
            ref_size: None,
            ref_size_below: None,
            ref_size_above: None,
        }];
        let mut out = Vec::new();
        write_predictions(&mut out, &rows).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "id,selected,p_value,set,n_segments,ref_size,ref_size_below,ref_size_above\na,false,,,,,,\n"
        );
    }
}

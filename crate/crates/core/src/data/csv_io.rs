use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{SampleRow, FEATURES};
use crate::error::{Error, Result};

const LABEL_COLUMNS: [&str; 3] = ["fault_type", "zone", "resistance_id"];

pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<SampleRow>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file)
}

/// Every column other than the label columns is a feature, in header order.
/// Row numbers in errors count data rows from 1.
pub fn read_csv<R: Read>(reader: R) -> Result<Vec<SampleRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let fault_col = find("fault_type").ok_or_else(|| Error::Data("missing column fault_type".into()))?;
    let zone_col = find("zone").ok_or_else(|| Error::Data("missing column zone".into()))?;
    let res_col = find("resistance_id");
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| !LABEL_COLUMNS.contains(&&headers[i]))
        .collect();
    if feature_cols.len() != FEATURES {
        return Err(Error::Data(format!(
            "expected {FEATURES} feature columns, header has {}",
            feature_cols.len()
        )));
    }
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| Error::DataRow { row, msg: e.to_string() })?;
        let cell = |i: usize| rec.get(i).unwrap_or("");
        let label = |i: usize, name: &str| -> Result<usize> {
            cell(i).parse::<usize>().map_err(|_| Error::DataRow {
                row,
                msg: format!("{name} value {:?} is not a non-negative integer", cell(i)),
            })
        };
        let mut features = Vec::with_capacity(FEATURES);
        for &i in &feature_cols {
            let v: f32 = cell(i).parse().map_err(|_| Error::DataRow {
                row,
                msg: format!("column {} value {:?} is not numeric", &headers[i], cell(i)),
            })?;
            if !v.is_finite() {
                return Err(Error::DataRow {
                    row,
                    msg: format!("column {} is not finite", &headers[i]),
                });
            }
            features.push(v);
        }
        let sample = SampleRow {
            features,
            fault_type: label(fault_col, "fault_type")?,
            zone: label(zone_col, "zone")?,
            resistance_id: match res_col {
                Some(i) => label(i, "resistance_id")?,
                None => 0,
            },
        };
        sample.validate().map_err(|e| Error::DataRow { row, msg: e.to_string() })?;
        rows.push(sample);
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[SampleRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (0..FEATURES).map(|j| format!("f{j}")).collect();
    header.extend(LABEL_COLUMNS.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for r in rows {
        let mut rec: Vec<String> = r.features.iter().map(|v| v.to_string()).collect();
        rec.push(r.fault_type.to_string());
        rec.push(r.zone.to_string());
        rec.push(r.resistance_id.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn save_csv(rows: &[SampleRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(rows, std::io::BufWriter::new(file))
}

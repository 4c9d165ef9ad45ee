//! Tab-separated warehouse export: `patients.tsv`, `events.tsv`,
//! `orders.tsv` and `results.tsv`, one header line each.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use deployr_core::time::{format_rfc3339, parse_date, parse_rfc3339};
use deployr_core::warehouse::{PatientRow, Warehouse};
use deployr_core::world::{ClinicalEvent, DiagnosticOrder, LabResult, Panel};

use crate::error::{Error, Result};

pub const PATIENTS_HEADER: &str = "patient_id\tbirth_date\tsex\trace\tunit_id";
pub const EVENTS_HEADER: &str = "patient_id\tkind\tcode\tnumeric_value\tabnormal\teffective_time";
pub const ORDERS_HEADER: &str = "order_id\tpatient_id\tpanel_code\torder_time";
pub const RESULTS_HEADER: &str = "order_id\tcomponent_code\tvalue\tref_low\tref_high\tabnormal\tresult_time";

pub const TABLES: [&str; 4] = ["patients.tsv", "events.tsv", "orders.tsv", "results.tsv"];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_table<T>(path: &Path, header: &str, rows: &[T], line: impl Fn(&T) -> String) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "{header}").map_err(io)?;
    for r in rows {
        writeln!(w, "{}", line(r)).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Write the four tables into `dir`, creating it if needed.
pub fn write_warehouse(dir: &Path, wh: &Warehouse) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_table(&dir.join(TABLES[0]), PATIENTS_HEADER, &wh.patients, |p| {
        format!("{}\t{}\t{}\t{}\t{}", p.patient_id, p.birth_date.format("%Y-%m-%d"), p.sex.as_str(), p.race.as_str(), p.unit_id)
    })?;
    write_table(&dir.join(TABLES[1]), EVENTS_HEADER, &wh.events, |e| {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            e.patient_id,
            e.kind.as_str(),
            e.code,
            opt(e.numeric_value),
            opt(e.abnormal),
            format_rfc3339(e.effective_time)
        )
    })?;
    write_table(&dir.join(TABLES[2]), ORDERS_HEADER, &wh.orders, |o| {
        format!("{}\t{}\t{}\t{}", o.order_id, o.patient_id, o.panel_code.as_str(), format_rfc3339(o.order_time))
    })?;
    write_table(&dir.join(TABLES[3]), RESULTS_HEADER, &wh.results, |r| {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.order_id,
            r.component_code,
            r.value,
            r.ref_low,
            r.ref_high,
            r.abnormal,
            format_rfc3339(r.result_time)
        )
    })
}

struct Reader {
    path: PathBuf,
    line: usize,
}

impl Reader {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Parse { path: self.path.clone(), line: self.line, reason: reason.into() }
    }

    fn parse<T: FromStr>(&self, field: &str, what: &str) -> Result<T> {
        field.parse().map_err(|_| self.err(format!("bad {what} `{field}`")))
    }

    fn opt<T: FromStr>(&self, field: &str, what: &str) -> Result<Option<T>> {
        if field.is_empty() {
            Ok(None)
        } else {
            self.parse(field, what).map(Some)
        }
    }

    fn core<T>(&self, r: deployr_core::Result<T>) -> Result<T> {
        r.map_err(|e| self.err(e.to_string()))
    }
}

fn read_table<T>(path: &Path, header: &str, mut row: impl FnMut(&Reader, &[&str]) -> Result<T>) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rd = Reader { path: path.to_path_buf(), line: 0 };
    let n_fields = header.split('\t').count();
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        rd.line += 1;
        if rd.line == 1 {
            if line != header {
                return Err(rd.err(format!("expected header `{header}`")));
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != n_fields {
            return Err(rd.err(format!("expected {n_fields} fields, found {}", fields.len())));
        }
        out.push(row(&rd, &fields)?);
    }
    if rd.line == 0 {
        return Err(rd.err("missing header"));
    }
    Ok(out)
}

pub fn read_warehouse(dir: &Path) -> Result<Warehouse> {
    let patients = read_table(&dir.join(TABLES[0]), PATIENTS_HEADER, |r, f| {
        Ok(PatientRow {
            patient_id: f[0].to_string(),
            birth_date: r.core(parse_date(f[1]))?,
            sex: r.core(f[2].parse())?,
            race: r.core(f[3].parse())?,
            unit_id: f[4].to_string(),
        })
    })?;
    let events = read_table(&dir.join(TABLES[1]), EVENTS_HEADER, |r, f| {
        Ok(ClinicalEvent {
            patient_id: f[0].to_string(),
            kind: r.core(f[1].parse())?,
            code: f[2].to_string(),
            numeric_value: r.opt(f[3], "numeric_value")?,
            abnormal: r.opt(f[4], "abnormal")?,
            effective_time: r.core(parse_rfc3339(f[5]))?,
        })
    })?;
    let orders = read_table(&dir.join(TABLES[2]), ORDERS_HEADER, |r, f| {
        let panel: Panel = r.core(f[2].parse())?;
        Ok(DiagnosticOrder {
            order_id: f[0].to_string(),
            patient_id: f[1].to_string(),
            panel_code: panel,
            component_codes: panel.components().iter().map(|c| c.to_string()).collect(),
            order_time: r.core(parse_rfc3339(f[3]))?,
        })
    })?;
    let results = read_table(&dir.join(TABLES[3]), RESULTS_HEADER, |r, f| {
        Ok(LabResult {
            order_id: f[0].to_string(),
            component_code: f[1].to_string(),
            value: r.parse(f[2], "value")?,
            ref_low: r.parse(f[3], "ref_low")?,
            ref_high: r.parse(f[4], "ref_high")?,
            abnormal: r.parse(f[5], "abnormal")?,
            result_time: r.core(parse_rfc3339(f[6]))?,
        })
    })?;
    Ok(Warehouse { patients, events, orders, results })
}

#[cfg(test)]
mod tests {
    use super::*;
    use deployr_core::world::{generate_world, WorldConfig};

    #[test]
    fn round_trip_is_exact() {
        let w = generate_world(&WorldConfig { n_patients: 30, n_units: 3, ..WorldConfig::default() }).unwrap();
        let wh = w.warehouse(w.config().end);
        let dir = tempfile::tempdir().unwrap();
        write_warehouse(dir.path(), &wh).unwrap();
        assert_eq!(read_warehouse(dir.path()).unwrap(), wh);
    }

    #[test]
    fn empty_export_has_headers_only() {
        let w = generate_world(&WorldConfig { n_patients: 5, n_units: 2, ..WorldConfig::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_warehouse(dir.path(), &w.warehouse(w.config().start)).unwrap();
        for (t, h) in TABLES.iter().zip([PATIENTS_HEADER, EVENTS_HEADER, ORDERS_HEADER, RESULTS_HEADER]) {
            assert_eq!(fs::read_to_string(dir.path().join(t)).unwrap(), format!("{h}\n"));
        }
    }

    #[test]
    fn bad_rows_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        write_warehouse(dir.path(), &Warehouse::default()).unwrap();
        fs::write(dir.path().join("orders.tsv"), format!("{ORDERS_HEADER}\nORD1\tPAT1\tXRAY\t2020-01-01T00:00:00Z\n")).unwrap();
        let err = read_warehouse(dir.path()).unwrap_err().to_string();
        assert!(err.contains("orders.tsv:2"), "{err}");
    }
}

//! Delimited-text cohort files.
//!
//! A cohort directory holds `stays.csv` (one row per stay) and
//! `measurements.csv` (one row per charted value), and optionally
//! `variables.csv`, the variable manifest. Empty fields mean missing.
//! Columns of `stays.csv` beyond the known ones are carried through as
//! numeric static extras.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::path::{Path, PathBuf};

use super::{Observation, PatientStay, VariableInfo, VariableManifest};
use crate::error::{Error, Result};

pub const STAYS_FILE: &str = "stays.csv";
pub const MEASUREMENTS_FILE: &str = "measurements.csv";
pub const VARIABLES_FILE: &str = "variables.csv";

const REQUIRED_STAY_COLUMNS: [&str; 8] = [
    "stay_id",
    "age",
    "sex",
    "ethnicity",
    "ventilated",
    "los_minutes",
    "died",
    "event_time_minutes",
];
const DIAGNOSES_COLUMN: &str = "diagnoses";
const MEASUREMENT_COLUMNS: [&str; 4] = ["stay_id", "variable_id", "time_offset_minutes", "value"];

fn open_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn open_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Schema {
            path: path.to_path_buf(),
            line,
            reason: format!("{other:?}"),
        },
    }
}

struct RowCtx<'a> {
    path: &'a Path,
    line: u64,
}

impl RowCtx<'_> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Schema {
            path: self.path.to_path_buf(),
            line: self.line,
            reason: reason.into(),
        }
    }

    fn real(&self, column: &str, raw: &str) -> Result<f64> {
        let x: f64 = raw
            .trim()
            .parse()
            .map_err(|_| self.err(format!("column `{column}`: `{raw}` is not a number")))?;
        if x.is_finite() {
            Ok(x)
        } else {
            Err(self.err(format!("column `{column}`: non-finite value")))
        }
    }

    fn minutes(&self, column: &str, raw: &str) -> Result<u32> {
        let x: i64 = raw
            .trim()
            .parse()
            .map_err(|_| self.err(format!("column `{column}`: `{raw}` is not an integer")))?;
        if x < 0 {
            return Err(self.err(format!("column `{column}`: negative value {x}")));
        }
        u32::try_from(x).map_err(|_| self.err(format!("column `{column}`: {x} out of range")))
    }

    fn flag(&self, column: &str, raw: &str) -> Result<bool> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "1" | "true" | "yes" => Ok(true),
            "0" | "false" | "no" => Ok(false),
            other => Err(self.err(format!("column `{column}`: `{other}` is not a boolean"))),
        }
    }

    fn required<'r>(&self, column: &str, raw: &'r str) -> Result<&'r str> {
        if raw.trim().is_empty() {
            Err(self.err(format!("column `{column}` is empty")))
        } else {
            Ok(raw)
        }
    }
}

fn header_index(path: &Path, headers: &csv::StringRecord, required: &[&str]) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        if index.insert(h.trim().to_string(), i).is_some() {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                line: 1,
                reason: format!("duplicate column `{h}`"),
            });
        }
    }
    let missing: Vec<&str> = required.iter().copied().filter(|c| !index.contains_key(*c)).collect();
    if !missing.is_empty() {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            line: 1,
            reason: format!("missing column(s): {}", missing.join(", ")),
        });
    }
    Ok(index)
}

/// Reads a cohort directory.
pub fn read_cohort(dir: &Path) -> Result<Vec<PatientStay>> {
    let mut stays = read_stays(&dir.join(STAYS_FILE))?;
    read_measurements(&dir.join(MEASUREMENTS_FILE), &mut stays)?;
    Ok(stays)
}

fn read_stays(path: &Path) -> Result<Vec<PatientStay>> {
    let mut rdr = open_reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let index = header_index(path, &headers, &REQUIRED_STAY_COLUMNS)?;
    let col = |name: &str| index[name];
    let extras: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| {
            let h = h.trim();
            !REQUIRED_STAY_COLUMNS.contains(&h) && h != DIAGNOSES_COLUMN
        })
        .map(|(i, h)| (i, h.trim().to_string()))
        .collect();

    let mut stays = Vec::new();
    let mut seen = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let ctx = RowCtx {
            path,
            line: record.position().map_or(0, |p| p.line()),
        };
        let field = |name: &str| record.get(col(name)).unwrap_or("");
        let stay_id = ctx.required("stay_id", field("stay_id"))?.trim().to_string();
        if let Some(prev) = seen.insert(stay_id.clone(), ctx.line) {
            return Err(ctx.err(format!("duplicate stay_id `{stay_id}` (first on line {prev})")));
        }
        let sex = ctx
            .required("sex", field("sex"))?
            .parse()
            .map_err(|e: String| ctx.err(e))?;
        let los = ctx.minutes("los_minutes", ctx.required("los_minutes", field("los_minutes"))?)?;
        let event_time = ctx.minutes(
            "event_time_minutes",
            ctx.required("event_time_minutes", field("event_time_minutes"))?,
        )?;
        if event_time > los {
            return Err(ctx.err(format!("event_time_minutes {event_time} exceeds los_minutes {los}")));
        }
        let admission_diagnoses = index
            .get(DIAGNOSES_COLUMN)
            .and_then(|&i| record.get(i))
            .map(|raw| {
                raw.split(';')
                    .map(str::trim)
                    .filter(|d| !d.is_empty())
                    .map(str::to_string)
                    .collect()
            })
            .unwrap_or_default();
        let mut static_extras = BTreeMap::new();
        for (i, name) in &extras {
            let raw = record.get(*i).unwrap_or("");
            if !raw.trim().is_empty() {
                static_extras.insert(name.clone(), ctx.real(name, raw)?);
            }
        }
        stays.push(PatientStay {
            stay_id,
            age: ctx.real("age", ctx.required("age", field("age"))?)?,
            sex,
            ethnicity: field("ethnicity").trim().to_string(),
            ventilated: ctx.flag("ventilated", field("ventilated"))?,
            admission_diagnoses,
            los,
            died: ctx.flag("died", field("died"))?,
            event_time,
            series: BTreeMap::new(),
            static_extras,
        });
    }
    Ok(stays)
}

fn read_measurements(path: &Path, stays: &mut [PatientStay]) -> Result<()> {
    let mut rdr = open_reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let index = header_index(path, &headers, &MEASUREMENT_COLUMNS)?;
    let by_id: HashMap<String, usize> = stays
        .iter()
        .enumerate()
        .map(|(i, s)| (s.stay_id.clone(), i))
        .collect();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let ctx = RowCtx {
            path,
            line: record.position().map_or(0, |p| p.line()),
        };
        let field = |name: &str| record.get(index[name]).unwrap_or("");
        let stay_id = ctx.required("stay_id", field("stay_id"))?.trim();
        let &si = by_id
            .get(stay_id)
            .ok_or_else(|| ctx.err(format!("unknown stay_id `{stay_id}`")))?;
        let variable = ctx.required("variable_id", field("variable_id"))?.trim().to_string();
        let t = ctx.minutes(
            "time_offset_minutes",
            ctx.required("time_offset_minutes", field("time_offset_minutes"))?,
        )?;
        let raw_value = field("value");
        if raw_value.trim().is_empty() {
            continue;
        }
        let value = ctx.real("value", raw_value)?;
        let stay = &mut stays[si];
        if t > stay.los {
            return Err(ctx.err(format!(
                "time_offset_minutes {t} beyond los_minutes {} of stay `{stay_id}`",
                stay.los
            )));
        }
        stay.series.entry(variable).or_default().push(Observation {
            time_offset: t,
            value,
        });
    }
    for stay in stays.iter_mut() {
        for obs in stay.series.values_mut() {
            obs.sort_by_key(|o| o.time_offset);
        }
    }
    Ok(())
}

/// Writes a cohort directory, creating it if needed.
pub fn write_cohort(cohort: &[PatientStay], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let extras: Vec<String> = cohort
        .iter()
        .flat_map(|s| s.static_extras.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();

    let path = dir.join(STAYS_FILE);
    let mut w = open_writer(&path)?;
    let mut header: Vec<&str> = REQUIRED_STAY_COLUMNS.to_vec();
    header.push(DIAGNOSES_COLUMN);
    header.extend(extras.iter().map(String::as_str));
    w.write_record(&header).map_err(|e| csv_err(&path, e))?;
    for s in cohort {
        let mut row = vec![
            s.stay_id.clone(),
            s.age.to_string(),
            s.sex.to_string(),
            s.ethnicity.clone(),
            u8::from(s.ventilated).to_string(),
            s.los.to_string(),
            u8::from(s.died).to_string(),
            s.event_time.to_string(),
            s.admission_diagnoses.iter().cloned().collect::<Vec<_>>().join(";"),
        ];
        row.extend(
            extras
                .iter()
                .map(|k| s.static_extras.get(k).map_or(String::new(), |x| x.to_string())),
        );
        w.write_record(&row).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(MEASUREMENTS_FILE);
    let mut w = open_writer(&path)?;
    w.write_record(MEASUREMENT_COLUMNS).map_err(|e| csv_err(&path, e))?;
    for s in cohort {
        for (var, obs) in &s.series {
            for o in obs {
                w.write_record([
                    s.stay_id.as_str(),
                    var.as_str(),
                    &o.time_offset.to_string(),
                    &o.value.to_string(),
                ])
                .map_err(|e| csv_err(&path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<VariableManifest> {
    let mut rdr = open_reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let index = header_index(path, &headers, &["variable_id", "class", "units"])?;
    let mut manifest = VariableManifest::default();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let ctx = RowCtx {
            path,
            line: record.position().map_or(0, |p| p.line()),
        };
        let field = |name: &str| record.get(index[name]).unwrap_or("").trim();
        let id = ctx.required("variable_id", field("variable_id"))?.to_string();
        let class = field("class").parse().map_err(|e: String| ctx.err(e))?;
        let info = VariableInfo {
            class,
            units: field("units").to_string(),
        };
        if manifest.entries.insert(id.clone(), info).is_some() {
            return Err(ctx.err(format!("duplicate variable_id `{id}`")));
        }
    }
    Ok(manifest)
}

pub fn write_manifest(manifest: &VariableManifest, path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record(["variable_id", "class", "units"])
        .map_err(|e| csv_err(path, e))?;
    for (id, info) in &manifest.entries {
        w.write_record([id.as_str(), info.class.as_str(), info.units.as_str()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Paths of the files a cohort directory is made of.
pub fn cohort_files(dir: &Path) -> [PathBuf; 2] {
    [dir.join(STAYS_FILE), dir.join(MEASUREMENTS_FILE)]
}

//! CSV input and output.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::config::Encoder;
use crate::design_glm::SurveyRecord;
use crate::error::{Error, Result};
use crate::reweight::OffenseRecord;
use crate::simgen::{DesignedSurvey, OffensePopulation};

/// Header plus string cells, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
    index: HashMap<String, usize>,
}

impl Table {
    pub fn from_reader<R: std::io::Read>(reader: R, label: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Schema(format!("{label}: {e}")))?
            .iter()
            .map(String::from)
            .collect();
        let mut index = HashMap::new();
        for (i, h) in headers.iter().enumerate() {
            if index.insert(h.clone(), i).is_some() {
                return Err(Error::Schema(format!("{label}: duplicate column `{h}`")));
            }
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Schema(format!("{label}: {e}")))?;
            rows.push(rec.iter().map(String::from).collect());
        }
        Ok(Table { headers, rows, index })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_reader(f, &path.display().to_string())
    }

    pub fn has(&self, column: &str) -> bool {
        self.index.contains_key(column)
    }

    pub fn require(&self, columns: &[&str], label: &str) -> Result<()> {
        for c in columns {
            if !self.has(c) {
                return Err(Error::Schema(format!("{label}: missing column `{c}`")));
            }
        }
        Ok(())
    }

    pub fn get<'a>(&'a self, row: usize, column: &str) -> Option<&'a str> {
        self.index.get(column).map(|&i| self.rows[row][i].as_str())
    }
}

fn parse_flag(v: &str, column: &str, row: usize) -> Result<bool> {
    match v {
        "1" | "true" | "TRUE" | "True" => Ok(true),
        "0" | "false" | "FALSE" | "False" => Ok(false),
        _ => Err(Error::Schema(format!("row {row}: `{column}` must be 0/1, found `{v}`"))),
    }
}

fn parse_number(v: &str, column: &str, row: usize) -> Result<f64> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::Schema(format!("row {row}: `{column}` must be a finite number, found `{v}`")))
}

/// Survey rows `stratum,psu,weight,r,<features>`; features pass through `encoder`.
pub fn survey_from_table(t: &Table, encoder: &Encoder, label: &str) -> Result<Vec<SurveyRecord>> {
    t.require(&["stratum", "psu", "weight", "r"], label)?;
    let cols: Vec<&str> = encoder.columns().collect();
    t.require(&cols, label)?;
    (0..t.rows.len())
        .map(|i| {
            let row = i + 1;
            Ok(SurveyRecord {
                z: encoder.encode(|c| t.get(i, c), row)?,
                r: parse_flag(t.get(i, "r").unwrap(), "r", row)?,
                weight: parse_number(t.get(i, "weight").unwrap(), "weight", row)?,
                stratum: t.get(i, "stratum").unwrap().to_string(),
                psu: t.get(i, "psu").unwrap().to_string(),
            })
        })
        .collect()
}

/// Offense rows `incident_id,offender_id,a,<z>,<x>[,pi_hat]`, plus the group
/// label of each row when `group_by` is non-empty (values joined by `|`).
pub fn offenses_from_table(
    t: &Table,
    z: &Encoder,
    x: &Encoder,
    group_by: &[String],
    label: &str,
) -> Result<(Vec<OffenseRecord>, Option<Vec<String>>)> {
    t.require(&["incident_id", "offender_id", "a"], label)?;
    let cols: Vec<&str> = z.columns().chain(x.columns()).collect();
    t.require(&cols, label)?;
    let groups: Vec<&str> = group_by.iter().map(String::as_str).collect();
    t.require(&groups, label)?;
    let has_pi = t.has("pi_hat");
    let mut records = Vec::with_capacity(t.rows.len());
    let mut keys = Vec::new();
    for i in 0..t.rows.len() {
        let row = i + 1;
        let pi_hat = if has_pi {
            let v = t.get(i, "pi_hat").unwrap();
            if v.is_empty() {
                None
            } else {
                Some(parse_number(v, "pi_hat", row)?)
            }
        } else {
            None
        };
        records.push(OffenseRecord {
            incident_id: t.get(i, "incident_id").unwrap().to_string(),
            offender_id: t.get(i, "offender_id").unwrap().to_string(),
            z: z.encode(|c| t.get(i, c), row)?,
            x: x.encode(|c| t.get(i, c), row)?,
            a: parse_flag(t.get(i, "a").unwrap(), "a", row)?,
            pi_hat,
        });
        if !groups.is_empty() {
            keys.push(groups.iter().map(|g| t.get(i, g).unwrap()).collect::<Vec<_>>().join("|"));
        }
    }
    Ok((records, (!groups.is_empty()).then_some(keys)))
}

/// External propensities `incident_id,pi_hat`, one per incident.
pub fn propensities_from_table(t: &Table, label: &str) -> Result<BTreeMap<String, f64>> {
    t.require(&["incident_id", "pi_hat"], label)?;
    let mut out = BTreeMap::new();
    for i in 0..t.rows.len() {
        let id = t.get(i, "incident_id").unwrap().to_string();
        let p = parse_number(t.get(i, "pi_hat").unwrap(), "pi_hat", i + 1)?;
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Schema(format!("{label}: row {}: pi_hat {p} outside (0, 1]", i + 1)));
        }
        if out.insert(id.clone(), p).is_some() {
            return Err(Error::Schema(format!("{label}: incident `{id}` listed twice")));
        }
    }
    Ok(out)
}

/// Full-precision CSV cell.
pub fn cell(x: f64) -> String {
    x.to_string()
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

pub fn survey_csv(s: &DesignedSurvey) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["stratum".to_string(), "psu".into(), "weight".into(), "r".into()];
    header.extend(s.feature_names[1..].iter().cloned());
    w.write_record(&header)?;
    for r in &s.records {
        let mut row = vec![r.stratum.clone(), r.psu.clone(), cell(r.weight), flag(r.r).into()];
        row.extend(r.z[1..].iter().map(|&v| cell(v)));
        w.write_record(&row)?;
    }
    finish(w)
}

/// Offender rows of reported incidents; `with_pi` adds the true propensity
/// as `pi_hat`.
pub fn offenses_csv(p: &OffensePopulation, with_pi: bool) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["incident_id".to_string(), "offender_id".into(), "a".into()];
    header.extend(p.z_names[1..].iter().cloned());
    header.extend(p.x_names[1..].iter().cloned());
    if with_pi {
        header.push("pi_hat".into());
    }
    w.write_record(&header)?;
    let records = p.reported_records();
    for r in &records {
        let mut row = vec![r.incident_id.clone(), r.offender_id.clone(), flag(r.a).into()];
        row.extend(r.z[1..].iter().map(|&v| cell(v)));
        row.extend(r.x[1..].iter().map(|&v| cell(v)));
        if with_pi {
            let i: usize = r.incident_id.parse().expect("generated incident ids are numeric");
            row.push(cell(p.incidents[i].pi));
        }
        w.write_record(&row)?;
    }
    finish(w)
}

pub(crate) fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

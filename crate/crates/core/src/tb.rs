//! Loading the tuberculosis notification data, deriving the analysis cohort
//! and attaching municipality centroids.
//!
//! Input is delimited UTF-8 text with a header; `,` and `;` are detected from
//! the header line, and with `;` a decimal comma is accepted in numbers.
//! Column names follow the SINAN notification dictionary by default and can be
//! remapped with [`ColumnMap`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;

/// Source column names for each field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub closure: String,
    pub dot: String,
    pub age: String,
    pub city: String,
    pub aids: String,
    pub alcoholism: String,
    pub diabetes: String,
    pub drug_use: String,
    pub homeless: String,
    pub sex: String,
    pub mental_illness: String,
    pub prison: String,
    pub smoker: String,
    pub tb_form: String,
    pub hdi: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        let s = |v: &str| v.to_string();
        Self {
            closure: s("SITUA_ENCE"),
            dot: s("TRATSUP_AT"),
            age: s("NU_IDADE_N"),
            city: s("ID_MN_RESI"),
            aids: s("AGRAVAIDS"),
            alcoholism: s("AGRAVALCOO"),
            diabetes: s("AGRAVDIABE"),
            drug_use: s("AGRAVDROGA"),
            homeless: s("POP_RUA"),
            sex: s("CS_SEXO"),
            mental_illness: s("AGRAVDOENC"),
            prison: s("POP_LIBER"),
            smoker: s("AGRAVTABAC"),
            tb_form: s("FORMA"),
            hdi: s("IDH"),
        }
    }
}

impl ColumnMap {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TbForm {
    Pulmonary,
    ExtraPulmonary,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTbRecord {
    /// Closure code, 1..10.
    pub closure: i64,
    pub dot: bool,
    pub age: f64,
    pub city: i64,
    pub aids: bool,
    pub alcoholism: bool,
    pub diabetes: bool,
    pub drug_use: bool,
    pub homeless: bool,
    pub male: bool,
    pub mental_illness: bool,
    pub prison: bool,
    pub smoker: bool,
    pub tb_form: TbForm,
    pub hdi: f64,
    /// Columns not used by the model, verbatim.
    pub extras: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub records: Vec<RawTbRecord>,
    pub rows_read: usize,
    /// Rows dropped because a required field was missing or unreadable,
    /// keyed by the first offending column.
    pub missing_required: BTreeMap<String, usize>,
}

pub fn detect_delimiter(header: &str) -> u8 {
    if header.matches(';').count() > header.matches(',').count() {
        b';'
    } else {
        b','
    }
}

fn parse_number(raw: &str, decimal_comma: bool) -> Option<f64> {
    let t = raw.trim();
    if t.is_empty() {
        return None;
    }
    let v = if decimal_comma {
        t.replace(',', ".").parse()
    } else {
        t.parse()
    };
    v.ok().filter(|x: &f64| x.is_finite())
}

fn parse_int(raw: &str) -> Option<i64> {
    let t = raw.trim();
    t.parse::<i64>().ok().or_else(|| {
        t.parse::<f64>()
            .ok()
            .filter(|v| v.fract() == 0.0)
            .map(|v| v as i64)
    })
}

/// 1 / yes → true; anything else (2 = no, 9 = unknown, blank) → false.
fn parse_flag(raw: &str) -> bool {
    matches!(
        raw.trim().to_ascii_lowercase().as_str(),
        "1" | "1.0" | "sim" | "s" | "yes" | "y" | "true"
    )
}

/// Exposure flag: unlike covariates an unknown value is missing.
fn parse_dot(raw: &str) -> Option<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "1" | "1.0" | "sim" | "s" | "yes" | "y" | "true" => Some(true),
        "0" | "2" | "2.0" | "0.0" | "nao" | "não" | "n" | "no" | "false" => Some(false),
        _ => None,
    }
}

/// Age in years from the notification encoding: `4xxx` years, `3xxx` months,
/// `2xxx` days, `1xxx` hours; values below 1000 are taken as years.
pub fn decode_age(v: f64) -> Option<f64> {
    if !(v >= 0.0) {
        return None;
    }
    let age = match v {
        v if v >= 4000.0 => v - 4000.0,
        v if v >= 3000.0 => (v - 3000.0) / 12.0,
        v if v >= 2000.0 => (v - 2000.0) / 365.25,
        v if v >= 1000.0 => (v - 1000.0) / (24.0 * 365.25),
        v => v,
    };
    Some(age)
}

fn parse_sex(raw: &str) -> bool {
    matches!(
        raw.trim().to_ascii_uppercase().as_str(),
        "M" | "1" | "MALE" | "MASCULINO"
    )
}

fn parse_form(raw: &str) -> Option<TbForm> {
    match parse_int(raw)? {
        1 => Some(TbForm::Pulmonary),
        2 => Some(TbForm::ExtraPulmonary),
        3 => Some(TbForm::Both),
        _ => None,
    }
}

/// Reads records from delimited text.
pub fn load_str(text: &str, map: &ColumnMap) -> Result<LoadReport> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let header_line = text
        .lines()
        .next()
        .ok_or_else(|| Error::Data("file has no header".into()))?;
    let delim = detect_delimiter(header_line);
    let decimal_comma = delim == b';';
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delim)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let index: HashMap<&str, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.as_str(), i))
        .collect();
    let required = [
        &map.closure,
        &map.dot,
        &map.age,
        &map.city,
        &map.aids,
        &map.alcoholism,
        &map.diabetes,
        &map.drug_use,
        &map.homeless,
        &map.sex,
        &map.mental_illness,
        &map.prison,
        &map.smoker,
        &map.tb_form,
        &map.hdi,
    ];
    let missing: Vec<&str> = required
        .iter()
        .filter(|c| !index.contains_key(c.as_str()))
        .map(|c| c.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "missing required columns: {}",
            missing.join(", ")
        )));
    }
    let used: BTreeSet<usize> = required.iter().map(|c| index[c.as_str()]).collect();
    let col = |name: &String| index[name.as_str()];

    let mut report = LoadReport {
        records: Vec::new(),
        rows_read: 0,
        missing_required: BTreeMap::new(),
    };
    for row in rdr.records() {
        let row = row?;
        report.rows_read += 1;
        let get = |name: &String| row.get(col(name)).unwrap_or("");
        let mut fail = |name: &String| {
            *report.missing_required.entry(name.clone()).or_insert(0) += 1;
        };
        let Some(closure) = parse_int(get(&map.closure)) else {
            fail(&map.closure);
            continue;
        };
        let Some(dot) = parse_dot(get(&map.dot)) else {
            fail(&map.dot);
            continue;
        };
        let Some(age) = parse_number(get(&map.age), decimal_comma).and_then(decode_age) else {
            fail(&map.age);
            continue;
        };
        let Some(city) = parse_int(get(&map.city)) else {
            fail(&map.city);
            continue;
        };
        let Some(tb_form) = parse_form(get(&map.tb_form)) else {
            fail(&map.tb_form);
            continue;
        };
        let Some(hdi) = parse_number(get(&map.hdi), decimal_comma) else {
            fail(&map.hdi);
            continue;
        };
        let extras = headers
            .iter()
            .enumerate()
            .filter(|(i, _)| !used.contains(i))
            .map(|(i, h)| (h.clone(), row.get(i).unwrap_or("").to_string()))
            .collect();
        report.records.push(RawTbRecord {
            closure,
            dot,
            age,
            city,
            aids: parse_flag(get(&map.aids)),
            alcoholism: parse_flag(get(&map.alcoholism)),
            diabetes: parse_flag(get(&map.diabetes)),
            drug_use: parse_flag(get(&map.drug_use)),
            homeless: parse_flag(get(&map.homeless)),
            male: parse_sex(get(&map.sex)),
            mental_illness: parse_flag(get(&map.mental_illness)),
            prison: parse_flag(get(&map.prison)),
            smoker: parse_flag(get(&map.smoker)),
            tb_form,
            hdi,
            extras,
        });
    }
    Ok(report)
}

pub fn load(path: &Path, map: &ColumnMap) -> Result<LoadReport> {
    let bytes = fs::read(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|e| Error::Data(format!("{}: not UTF-8 ({e})", path.display())))?;
    load_str(&text, map)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub min_age: u32,
    pub included_codes: BTreeSet<i64>,
    pub cure_codes: BTreeSet<i64>,
    /// Center and scale age and HDI.
    pub standardize: bool,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            min_age: 11,
            included_codes: [1, 2, 3, 4, 7, 8].into_iter().collect(),
            cure_codes: [1].into_iter().collect(),
            standardize: false,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.cure_codes.is_subset(&self.included_codes) {
            return Err(Error::invalid(
                "cure codes must be a subset of the included codes",
            ));
        }
        if self.cure_codes.is_empty() {
            return Err(Error::invalid("cure codes must be non-empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExclusionLedger {
    pub raw: usize,
    /// Dropped for a closure code outside the included set, by code.
    pub excluded_code: BTreeMap<i64, usize>,
    pub excluded_age: usize,
    pub retained: usize,
}

impl ExclusionLedger {
    pub fn excluded(&self) -> usize {
        self.excluded_code.values().sum::<usize>() + self.excluded_age
    }
}

/// Order-preserving cohort filter: closure code first, then age.
pub fn filter_records(
    records: &[RawTbRecord],
    spec: &CohortSpec,
) -> Result<(Vec<RawTbRecord>, ExclusionLedger)> {
    spec.validate()?;
    let mut ledger = ExclusionLedger {
        raw: records.len(),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for r in records {
        if !spec.included_codes.contains(&r.closure) {
            *ledger.excluded_code.entry(r.closure).or_insert(0) += 1;
        } else if r.age < f64::from(spec.min_age) {
            ledger.excluded_age += 1;
        } else {
            kept.push(r.clone());
        }
    }
    ledger.retained = kept.len();
    Ok((kept, ledger))
}

/// Column order of the analysis covariates.
pub const COVARIATES: [&str; 13] = [
    "AIDS",
    "Alcoholism",
    "Diabetes",
    "Drug Use",
    "Homelessness",
    "Male",
    "Mental Illness",
    "In prison",
    "Smoker",
    "TB-ExtPulm",
    "TB-Pulm",
    "Age",
    "HDI",
];

fn standardize_column(x: &mut DMatrix<f64>, c: usize) {
    let n = x.nrows() as f64;
    let mean = x.column(c).sum() / n;
    let sd = (x.column(c).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if sd > 0.0 {
        x.column_mut(c)
            .iter_mut()
            .for_each(|v| *v = (*v - mean) / sd);
    }
}

/// Filters the cohort and builds the analysis dataset: `Y = 1` for a cure
/// code, exposure = DOT, clusters = municipality of residence. TB form enters
/// as two indicators with "both" as the reference.
pub fn derive_cohort(
    records: &[RawTbRecord],
    spec: &CohortSpec,
) -> Result<(Dataset, ExclusionLedger)> {
    let (kept, ledger) = filter_records(records, spec)?;
    if kept.is_empty() {
        return Err(Error::Empty("cohort"));
    }
    let n = kept.len();
    let b = |v: bool| f64::from(u8::from(v));
    let mut x = DMatrix::zeros(n, COVARIATES.len());
    for (i, r) in kept.iter().enumerate() {
        let row = [
            b(r.aids),
            b(r.alcoholism),
            b(r.diabetes),
            b(r.drug_use),
            b(r.homeless),
            b(r.male),
            b(r.mental_illness),
            b(r.prison),
            b(r.smoker),
            b(r.tb_form == TbForm::ExtraPulmonary),
            b(r.tb_form == TbForm::Pulmonary),
            r.age,
            r.hdi,
        ];
        for (c, v) in row.into_iter().enumerate() {
            x[(i, c)] = v;
        }
    }
    if spec.standardize {
        standardize_column(&mut x, 11);
        standardize_column(&mut x, 12);
    }
    let y = kept
        .iter()
        .map(|r| b(spec.cure_codes.contains(&r.closure)))
        .collect();
    let z = kept.iter().map(|r| b(r.dot)).collect();
    let ids: Vec<i64> = kept.iter().map(|r| r.city).collect();
    let names = COVARIATES.iter().map(|s| s.to_string()).collect();
    Ok((Dataset::new(y, z, x, names, &ids)?, ledger))
}

/// Reads `city_id,x,y` (delimiter detected as for the data file).
pub fn load_centroids(path: &Path) -> Result<BTreeMap<i64, (f64, f64)>> {
    load_centroids_str(&fs::read_to_string(path)?)
}

pub fn load_centroids_str(text: &str) -> Result<BTreeMap<i64, (f64, f64)>> {
    let header = text
        .lines()
        .next()
        .ok_or_else(|| Error::Data("centroid file has no header".into()))?;
    let delim = detect_delimiter(header);
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delim)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();
    let pos = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("centroid file lacks column `{name}`")))
    };
    let (ci, xi, yi) = (pos("city_id")?, pos("x")?, pos("y")?);
    let mut out = BTreeMap::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row?;
        let bad = || Error::Data(format!("centroid row {}: unreadable", line + 2));
        let id = parse_int(row.get(ci).unwrap_or("")).ok_or_else(bad)?;
        let x = parse_number(row.get(xi).unwrap_or(""), delim == b';').ok_or_else(bad)?;
        let y = parse_number(row.get(yi).unwrap_or(""), delim == b';').ok_or_else(bad)?;
        out.insert(id, (x, y));
    }
    Ok(out)
}

/// Attaches an m×2 centroid matrix in cluster order.
pub fn attach_geography(ds: Dataset, centroids: &BTreeMap<i64, (f64, f64)>) -> Result<Dataset> {
    let labels = ds.clusters.labels().to_vec();
    let mut c = DMatrix::zeros(labels.len(), 2);
    for (j, id) in labels.iter().enumerate() {
        let (x, y) = centroids.get(id).ok_or(Error::MissingCentroid(*id))?;
        c[(j, 0)] = *x;
        c[(j, 1)] = *y;
    }
    ds.with_centroids(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{exponential_correlation, max_pairwise_distance};

    const HEADER: &str = "SITUA_ENCE,TRATSUP_AT,NU_IDADE_N,ID_MN_RESI,AGRAVAIDS,AGRAVALCOO,AGRAVDIABE,AGRAVDROGA,POP_RUA,CS_SEXO,AGRAVDOENC,POP_LIBER,AGRAVTABAC,FORMA,IDH,RACA";

    fn row(code: i64, dot: u8, age: u32, city: i64, form: u8) -> String {
        format!(
            "{code},{dot},{},{city},2,1,2,2,2,M,2,2,1,{form},0.75,1",
            4000 + age
        )
    }

    fn text(rows: &[String]) -> String {
        let mut s = HEADER.to_string();
        for r in rows {
            s.push('\n');
            s.push_str(r);
        }
        s
    }

    #[test]
    fn empty_file_with_header() {
        let r = load_str(HEADER, &ColumnMap::default()).unwrap();
        assert!(r.records.is_empty());
        assert_eq!(r.rows_read, 0);
        assert!(r.missing_required.is_empty());
    }

    #[test]
    fn missing_column_is_an_error() {
        let err = load_str("SITUA_ENCE,TRATSUP_AT\n1,1", &ColumnMap::default()).unwrap_err();
        assert!(err.to_string().contains("NU_IDADE_N"));
    }

    #[test]
    fn parses_fields_and_extras() {
        let r = load_str(&text(&[row(1, 1, 30, 355030, 1)]), &ColumnMap::default()).unwrap();
        let rec = &r.records[0];
        assert_eq!(rec.closure, 1);
        assert!(rec.dot && rec.alcoholism && rec.smoker && rec.male);
        assert!(!rec.aids && !rec.diabetes);
        assert_eq!(rec.age, 30.0);
        assert_eq!(rec.city, 355030);
        assert_eq!(rec.tb_form, TbForm::Pulmonary);
        assert_eq!(rec.extras.get("RACA").map(String::as_str), Some("1"));
    }

    #[test]
    fn semicolon_with_decimal_comma() {
        let t = text(&[row(1, 2, 40, 7, 3)])
            .replace(',', ";")
            .replace("0.75", "0,75");
        let r = load_str(&t, &ColumnMap::default()).unwrap();
        assert_eq!(r.records[0].hdi, 0.75);
        assert!(!r.records[0].dot);
        assert_eq!(r.records[0].tb_form, TbForm::Both);
    }

    #[test]
    fn rows_with_missing_required_fields_are_counted() {
        let mut bad = row(1, 1, 30, 5, 1);
        bad = bad.replacen("1,1,4030", "1,9,4030", 1);
        let r = load_str(&text(&[bad, row(1, 1, 30, 5, 1)]), &ColumnMap::default()).unwrap();
        assert_eq!(r.records.len(), 1);
        assert_eq!(r.missing_required.get("TRATSUP_AT"), Some(&1));
    }

    #[test]
    fn age_decoding() {
        assert_eq!(decode_age(4025.0), Some(25.0));
        assert_eq!(decode_age(3006.0), Some(0.5));
        assert_eq!(decode_age(33.0), Some(33.0));
        assert_eq!(decode_age(-1.0), None);
    }

    #[test]
    fn cohort_filter_and_outcome() {
        let rows = vec![
            row(1, 1, 30, 1, 1),
            row(2, 0, 30, 1, 2),
            row(6, 1, 30, 2, 1),
            row(10, 1, 30, 2, 1),
            row(3, 1, 10, 2, 3),
            row(8, 1, 50, 2, 3),
        ];
        let recs = load_str(&text(&rows), &ColumnMap::default())
            .unwrap()
            .records;
        let (ds, ledger) = derive_cohort(&recs, &CohortSpec::default()).unwrap();
        assert_eq!(ledger.raw, 6);
        assert_eq!(ledger.excluded_code.get(&6), Some(&1));
        assert_eq!(ledger.excluded_code.get(&10), Some(&1));
        assert_eq!(ledger.excluded_age, 1);
        assert_eq!(ledger.retained, 3);
        assert_eq!(ledger.excluded() + ledger.retained, ledger.raw);
        assert_eq!(ds.outcome, vec![1.0, 0.0, 0.0]);
        assert_eq!(ds.exposure, vec![1.0, 0.0, 1.0]);
        assert_eq!(ds.covariate("TB-Pulm").unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(ds.covariate("TB-ExtPulm").unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(ds.m(), 2);
    }

    #[test]
    fn filter_is_idempotent_and_order_preserving() {
        let rows: Vec<String> = (0..40)
            .map(|k| {
                row(
                    [1, 2, 5, 6, 7, 9, 10][k % 7],
                    (k % 2) as u8,
                    5 + (k as u32 * 7) % 60,
                    k as i64 % 4,
                    1,
                )
            })
            .collect();
        let recs = load_str(&text(&rows), &ColumnMap::default())
            .unwrap()
            .records;
        let spec = CohortSpec::default();
        let (once, l1) = filter_records(&recs, &spec).unwrap();
        let (twice, l2) = filter_records(&once, &spec).unwrap();
        assert_eq!(once, twice);
        assert_eq!(l2.excluded(), 0);
        assert_eq!(l1.excluded() + l1.retained, l1.raw);
        let idx: Vec<usize> = once
            .iter()
            .map(|r| recs.iter().position(|s| s == r).unwrap())
            .collect();
        assert!(idx.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn cure_codes_must_be_included() {
        let spec = CohortSpec {
            cure_codes: [6].into_iter().collect(),
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn geography_three_cities() {
        let recs = load_str(
            &text(&[
                row(1, 1, 30, 30, 1),
                row(1, 0, 30, 10, 1),
                row(2, 1, 30, 20, 1),
            ]),
            &ColumnMap::default(),
        )
        .unwrap()
        .records;
        let (ds, _) = derive_cohort(&recs, &CohortSpec::default()).unwrap();
        let cents = load_centroids_str("city_id,x,y\n10,0,0\n20,3,4\n30,-1,0\n").unwrap();
        let ds = attach_geography(ds, &cents).unwrap();
        let c = ds.centroids.as_ref().unwrap();
        assert_eq!(c.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
        assert_eq!(
            c.row(2).iter().copied().collect::<Vec<_>>(),
            vec![-1.0, 0.0]
        );
        let brute = [(0.0f64, 0.0f64), (3.0, 4.0), (-1.0, 0.0)];
        let mut best: f64 = 0.0;
        for a in &brute {
            for b in &brute {
                best = best.max(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt());
            }
        }
        assert_eq!(max_pairwise_distance(c), best);
        assert_eq!(ds.max_centroid_distance(), Some(best));
    }

    #[test]
    fn missing_centroid_is_reported() {
        let recs = load_str(
            &text(&[row(1, 1, 30, 30, 1), row(1, 0, 30, 10, 1)]),
            &ColumnMap::default(),
        )
        .unwrap()
        .records;
        let (ds, _) = derive_cohort(&recs, &CohortSpec::default()).unwrap();
        let cents = load_centroids_str("city_id,x,y\n10,0,0\n").unwrap();
        assert!(matches!(
            attach_geography(ds, &cents),
            Err(Error::MissingCentroid(30))
        ));
    }

    #[test]
    fn equal_centroids_give_all_ones_correlation() {
        let c = DMatrix::from_element(3, 2, 1.5);
        let r = exponential_correlation(&c, 0.7).unwrap();
        assert!(r.iter().all(|&v| v == 1.0));
    }
}

//! CSV ingestion and export of county panels.
//!
//! * static CSV: `fips,<feature1>,<feature2>,...`, one row per county.
//! * dynamic / target CSV: `fips,date,value` with the feature named after the
//!   file stem, or `fips,date,<feature1>,<feature2>,...` for several features
//!   in one file. Dates are ISO-8601.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;

use super::panel::{check_contiguous, Cube, FeaturePanel};
use super::split::DateRange;
use crate::error::{Error, Result};

/// Input files for [`load_panel`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanelSources {
    pub static_path: PathBuf,
    pub dynamic: Vec<PathBuf>,
    pub targets: Vec<PathBuf>,
}

impl PanelSources {
    /// Layout written by [`write_panel`]: `static.csv`, `dynamic/*.csv`,
    /// `targets/*.csv`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        Ok(PanelSources {
            static_path: dir.join("static.csv"),
            dynamic: csv_files(&dir.join("dynamic"))?,
            targets: csv_files(&dir.join("targets"))?,
        })
    }
}

/// Sorted `.csv` files of a directory.
pub fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    out.sort();
    Ok(out)
}

/// Per-feature counts of cells filled with 0.0 because they precede the
/// feature's first available date.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub filled: BTreeMap<String, usize>,
}

struct LongSeries {
    name: String,
    values: HashMap<(String, NaiveDate), f64>,
}

fn file_label(path: &Path) -> String {
    path.display().to_string()
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn malformed(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::MalformedRow {
        file: file_label(path),
        line,
        msg: msg.into(),
    }
}

fn parse_f64(path: &Path, line: u64, s: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| malformed(path, line, format!("`{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(malformed(path, line, format!("non-finite value `{s}`")));
    }
    Ok(v)
}

fn read_static(path: &Path) -> Result<(Vec<String>, Vec<String>, Vec<f64>)> {
    let mut rdr = open_csv(path)?;
    let header = rdr.headers().map_err(|e| malformed(path, 1, e.to_string()))?.clone();
    if header.get(0) != Some("fips") {
        return Err(malformed(path, 1, "static header must start with `fips`"));
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            malformed(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != names.len() + 1 {
            return Err(malformed(
                path,
                line,
                format!("expected {} fields, got {}", names.len() + 1, rec.len()),
            ));
        }
        let id = rec[0].to_string();
        if ids.contains(&id) {
            return Err(malformed(path, line, format!("duplicate county `{id}`")));
        }
        ids.push(id);
        for f in rec.iter().skip(1) {
            values.push(parse_f64(path, line, f)?);
        }
    }
    Ok((ids, names, values))
}

fn read_long(path: &Path, range: Option<DateRange>) -> Result<Vec<LongSeries>> {
    let mut rdr = open_csv(path)?;
    let header = rdr.headers().map_err(|e| malformed(path, 1, e.to_string()))?.clone();
    if header.len() < 3 || &header[0] != "fips" || &header[1] != "date" {
        return Err(malformed(
            path,
            1,
            "header must be `fips,date,value` or `fips,date,<features…>`",
        ));
    }
    let names: Vec<String> = if header.len() == 3 && &header[2] == "value" {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| malformed(path, 1, "cannot derive feature name from file name"))?;
        vec![stem]
    } else {
        header.iter().skip(2).map(str::to_string).collect()
    };
    let mut series: Vec<LongSeries> = names
        .into_iter()
        .map(|name| LongSeries {
            name,
            values: HashMap::new(),
        })
        .collect();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            malformed(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != series.len() + 2 {
            return Err(malformed(
                path,
                line,
                format!("expected {} fields, got {}", series.len() + 2, rec.len()),
            ));
        }
        let date = NaiveDate::parse_from_str(&rec[1], "%Y-%m-%d")
            .map_err(|_| malformed(path, line, format!("bad date `{}`", &rec[1])))?;
        if range.is_some_and(|r| !r.contains(date)) {
            continue;
        }
        for (s, field) in series.iter_mut().zip(rec.iter().skip(2)) {
            let v = parse_f64(path, line, field)?;
            if s.values.insert((rec[0].to_string(), date), v).is_some() {
                return Err(malformed(
                    path,
                    line,
                    format!("duplicate row for {} on {date}", &rec[0]),
                ));
            }
        }
    }
    Ok(series)
}

/// Reads static, dynamic and target CSVs into a panel restricted to
/// `date_range`. Dynamic cells before a feature's first available date
/// are filled with 0.0 and counted in the report; any other missing cell is
/// an error.
pub fn load_panel(sources: &PanelSources, date_range: Option<DateRange>) -> Result<(FeaturePanel, LoadReport)> {
    let (county_ids, static_names, statics) = read_static(&sources.static_path)?;
    if county_ids.is_empty() {
        return Err(Error::Empty(format!(
            "{} has no counties",
            file_label(&sources.static_path)
        )));
    }
    let mut dynamic = Vec::new();
    for p in &sources.dynamic {
        dynamic.extend(read_long(p, date_range)?);
    }
    let mut targets = Vec::new();
    for p in &sources.targets {
        targets.extend(read_long(p, date_range)?);
    }
    if targets.is_empty() {
        return Err(Error::Empty("no target series".into()));
    }

    let known: BTreeSet<&str> = county_ids.iter().map(String::as_str).collect();
    let unknown: BTreeSet<String> = dynamic
        .iter()
        .chain(&targets)
        .flat_map(|s| s.values.keys().map(|(id, _)| id))
        .filter(|id| !known.contains(id.as_str()))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownCounties(unknown.into_iter().collect()));
    }

    let dates: BTreeSet<NaiveDate> = dynamic
        .iter()
        .chain(&targets)
        .flat_map(|s| s.values.keys().map(|(_, d)| *d))
        .collect();
    let dates: Vec<NaiveDate> = dates.into_iter().collect();
    if dates.is_empty() {
        return Err(Error::Empty("no dated rows in the requested range".into()));
    }
    check_contiguous(&dates)?;

    let (c, t) = (county_ids.len(), dates.len());
    let mut report = LoadReport::default();
    let mut dyn_cube = Cube::zeros(c, t, dynamic.len());
    for (f, s) in dynamic.iter().enumerate() {
        let first = s.values.keys().map(|(_, d)| *d).min();
        let mut filled = 0;
        for (ci, id) in county_ids.iter().enumerate() {
            for (ti, &d) in dates.iter().enumerate() {
                match s.values.get(&(id.clone(), d)) {
                    Some(&v) => dyn_cube.set(ci, ti, f, v),
                    None if first.is_none_or(|fd| d < fd) => filled += 1,
                    None => {
                        return Err(Error::InvalidArgument(format!(
                            "feature `{}` has no value for county {id} on {d}",
                            s.name
                        )))
                    }
                }
            }
        }
        if filled > 0 {
            report.filled.insert(s.name.clone(), filled);
        }
    }
    let mut tgt_cube = Cube::zeros(c, t, targets.len());
    for (f, s) in targets.iter().enumerate() {
        for (ci, id) in county_ids.iter().enumerate() {
            for (ti, &d) in dates.iter().enumerate() {
                let v = s.values.get(&(id.clone(), d)).ok_or_else(|| {
                    Error::InvalidArgument(format!("target `{}` has no value for county {id} on {d}", s.name))
                })?;
                tgt_cube.set(ci, ti, f, *v);
            }
        }
    }
    let panel = FeaturePanel::new(
        county_ids,
        dates,
        dynamic.into_iter().map(|s| s.name).collect(),
        static_names,
        targets.into_iter().map(|s| s.name).collect(),
        dyn_cube,
        statics,
        tgt_cube,
    )?;
    Ok((panel, report))
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

fn write_series(path: &Path, panel: &FeaturePanel, cube: &Cube, f: usize) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "fips,date,value").map_err(io)?;
    for (c, id) in panel.county_ids.iter().enumerate() {
        for (t, d) in panel.dates.iter().enumerate() {
            writeln!(w, "{id},{d},{}", cube.get(c, t, f)).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Writes a panel in the layout read by [`PanelSources::from_dir`].
pub fn write_panel(dir: &Path, panel: &FeaturePanel) -> Result<PanelSources> {
    for sub in ["dynamic", "targets"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let static_path = dir.join("static.csv");
    {
        let mut w = create(&static_path)?;
        let io = |e| Error::io(&static_path, e);
        writeln!(w, "fips,{}", panel.static_names.join(",")).map_err(io)?;
        for (c, id) in panel.county_ids.iter().enumerate() {
            let vals: Vec<String> = panel.static_row(c).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{id},{}", vals.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)?;
    }
    let mut dynamic = Vec::new();
    for (f, name) in panel.observed_names.iter().enumerate() {
        let p = dir.join("dynamic").join(format!("{name}.csv"));
        write_series(&p, panel, &panel.dynamic, f)?;
        dynamic.push(p);
    }
    let mut targets = Vec::new();
    for (f, name) in panel.target_names.iter().enumerate() {
        let p = dir.join("targets").join(format!("{name}.csv"));
        write_series(&p, panel, &panel.targets, f)?;
        targets.push(p);
    }
    Ok(PanelSources {
        static_path,
        dynamic,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::panel::tests::tiny_panel;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn long_rows(ids: &[&str], days: std::ops::Range<u32>, f: impl Fn(&str, u32) -> f64) -> String {
        let mut s = String::from("fips,date,value\n");
        for id in ids {
            for d in days.clone() {
                s.push_str(&format!("{id},2020-03-{d:02},{}\n", f(id, d)));
            }
        }
        s
    }

    #[test]
    fn complete_files_load_with_expected_shape() {
        let dir = tempfile::tempdir().unwrap();
        let st = write(
            dir.path(),
            "static.csv",
            "fips,age,health\n01001,0.5,0.2\n01003,0.6,0.3\n",
        );
        let dynamic: Vec<PathBuf> = ["a", "b", "c", "d"]
            .iter()
            .map(|n| {
                write(
                    dir.path(),
                    &format!("{n}.csv"),
                    &long_rows(&["01001", "01003"], 1..11, |_, d| d as f64),
                )
            })
            .collect();
        let cases = write(
            dir.path(),
            "cases.csv",
            &long_rows(&["01001", "01003"], 1..11, |_, d| 2.0 * d as f64),
        );
        let src = PanelSources {
            static_path: st,
            dynamic,
            targets: vec![cases],
        };
        let (p, report) = load_panel(&src, None).unwrap();
        assert_eq!((p.num_counties(), p.num_days()), (2, 10));
        assert_eq!(p.observed_names, vec!["a", "b", "c", "d"]);
        assert_eq!(p.targets.get(1, 9, 0), 20.0);
        assert!(report.filled.is_empty());

        let r = DateRange::new(
            NaiveDate::from_ymd_opt(2020, 3, 3).unwrap(),
            NaiveDate::from_ymd_opt(2020, 3, 6).unwrap(),
        );
        let (p, _) = load_panel(&src, Some(r)).unwrap();
        assert_eq!(p.num_days(), 4);
        assert_eq!(p.dynamic.get(0, 0, 0), 3.0);
    }

    #[test]
    fn late_starting_feature_is_zero_filled_and_reported() {
        let dir = tempfile::tempdir().unwrap();
        let st = write(dir.path(), "static.csv", "fips,age\n1,0.5\n2,0.6\n");
        let vacc = write(
            dir.path(),
            "vaccination.csv",
            &long_rows(&["1", "2"], 5..11, |_, d| d as f64),
        );
        let cases = write(dir.path(), "cases.csv", &long_rows(&["1", "2"], 1..11, |_, _| 1.0));
        let src = PanelSources {
            static_path: st,
            dynamic: vec![vacc],
            targets: vec![cases],
        };
        let (p, report) = load_panel(&src, None).unwrap();
        assert_eq!(report.filled["vaccination"], 8);
        assert_eq!(p.dynamic.get(1, 3, 0), 0.0);
        assert_eq!(p.dynamic.get(1, 4, 0), 5.0);
    }

    #[test]
    fn date_gap_names_missing_date() {
        let dir = tempfile::tempdir().unwrap();
        let st = write(dir.path(), "static.csv", "fips,age\n1,0.5\n");
        let mut body = long_rows(&["1"], 1..4, |_, _| 1.0);
        body.push_str("1,2020-03-05,1.0\n");
        let cases = write(dir.path(), "cases.csv", &body);
        let src = PanelSources {
            static_path: st,
            dynamic: vec![],
            targets: vec![cases],
        };
        let err = load_panel(&src, None).unwrap_err();
        assert!(err.to_string().contains("2020-03-04"), "{err}");
    }

    #[test]
    fn unknown_county_and_malformed_row_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let st = write(dir.path(), "static.csv", "fips,age\n1,0.5\n");
        let cases = write(dir.path(), "cases.csv", &long_rows(&["1", "9"], 1..3, |_, _| 1.0));
        let src = PanelSources {
            static_path: st.clone(),
            dynamic: vec![],
            targets: vec![cases],
        };
        match load_panel(&src, None).unwrap_err() {
            Error::UnknownCounties(ids) => assert_eq!(ids, vec!["9".to_string()]),
            e => panic!("unexpected {e}"),
        }
        let bad = write(
            dir.path(),
            "deaths.csv",
            "fips,date,value\n1,2020-03-01,1\n1,2020-03-02,abc\n",
        );
        let src = PanelSources {
            static_path: st,
            dynamic: vec![],
            targets: vec![bad],
        };
        match load_panel(&src, None).unwrap_err() {
            Error::MalformedRow { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn written_panel_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let p = tiny_panel(3, 9);
        write_panel(dir.path(), &p).unwrap();
        let (q, _) = load_panel(&PanelSources::from_dir(dir.path()).unwrap(), None).unwrap();
        assert_eq!(q.county_ids, p.county_ids);
        assert_eq!(q.targets, p.targets);
        assert_eq!(q.statics, p.statics);
        // dynamic files come back in file-name order
        assert_eq!(q.observed_names, vec!["mobility", "vaccination"]);
        assert_eq!(q.dynamic.feature_values(0), p.dynamic.feature_values(1));
        assert_eq!(q.dynamic.feature_values(1), p.dynamic.feature_values(0));
    }
}

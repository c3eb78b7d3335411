//! UCR archive text format: one series per line, label first, then values.

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::series::{Dataset, LabeledSeries};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Field separator of a UCR file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Delimiter {
    Tab,
    Comma,
    /// Runs of spaces (older archive releases).
    Whitespace,
}

impl Delimiter {
    fn sniff(line: &str) -> Self {
        if line.contains('\t') {
            Delimiter::Tab
        } else if line.contains(',') {
            Delimiter::Comma
        } else {
            Delimiter::Whitespace
        }
    }

    fn split(self, line: &str) -> Vec<&str> {
        match self {
            Delimiter::Tab => line.split('\t').map(str::trim).collect(),
            Delimiter::Comma => line.split(',').map(str::trim).collect(),
            Delimiter::Whitespace => line.split_whitespace().collect(),
        }
    }
}

struct RawRow {
    label: String,
    values: Vec<f64>,
}

fn parse_file(path: &Path) -> Result<Vec<RawRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rows = Vec::new();
    let mut delimiter = None;
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let delim = *delimiter.get_or_insert_with(|| Delimiter::sniff(line));
        let tokens = delim.split(line.trim_end_matches('\r'));
        if tokens.len() < 2 {
            return Err(perr(lineno, "row needs a label and at least one value".into()));
        }
        match width {
            None => width = Some(tokens.len()),
            Some(w) if w != tokens.len() => {
                return Err(perr(lineno, format!("ragged row: {} fields, expected {w}", tokens.len())))
            }
            _ => {}
        }
        let mut values = Vec::with_capacity(tokens.len() - 1);
        for tok in &tokens[1..] {
            let v = if tok.eq_ignore_ascii_case("nan") || tok.is_empty() {
                f64::NAN
            } else {
                tok.parse::<f64>()
                    .map_err(|_| perr(lineno, format!("not a number: {tok:?}")))?
            };
            values.push(v);
        }
        let keep = values.iter().rposition(|v| !v.is_nan()).map(|p| p + 1).unwrap_or(0);
        if keep == 0 {
            return Err(perr(lineno, "row has no observed values".into()));
        }
        values.truncate(keep);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(perr(lineno, "missing value inside the series".into()));
        }
        rows.push(RawRow {
            label: tokens[0].to_string(),
            values,
        });
    }
    if rows.is_empty() {
        return Err(perr(0, "file holds no series".into()));
    }
    Ok(rows)
}

/// Numeric order when every label parses as a number, text order otherwise.
fn sort_labels(labels: &mut [String]) {
    let numeric = labels.iter().all(|l| l.parse::<f64>().is_ok());
    labels.sort_by(|a, b| {
        if numeric {
            let (x, y) = (a.parse::<f64>().unwrap(), b.parse::<f64>().unwrap());
            x.partial_cmp(&y).unwrap_or(Ordering::Equal).then_with(|| a.cmp(b))
        } else {
            a.cmp(b)
        }
    });
}

fn to_series<T: Scalar>(rows: Vec<RawRow>, label_map: &[String], path: &Path) -> Result<Vec<LabeledSeries<T>>> {
    rows.into_iter()
        .map(|r| {
            let label = label_map.iter().position(|l| *l == r.label).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("label {:?} does not occur in the training split", r.label),
            })?;
            let values = r.values.into_iter().map(T::lit).collect();
            LabeledSeries::new(values, 1, label, r.label)
        })
        .collect()
}

/// Parses a UCR train/test pair. Labels are remapped to `0..C` in sorted raw
/// order; trailing missing values shorten a series.
pub fn parse_ucr<T: Scalar>(train_path: &Path, test_path: &Path) -> Result<Dataset<T>> {
    let train_rows = parse_file(train_path)?;
    let test_rows = parse_file(test_path)?;
    let mut label_map: Vec<String> = train_rows.iter().map(|r| r.label.clone()).collect();
    sort_labels(&mut label_map);
    label_map.dedup();
    let train = to_series(train_rows, &label_map, train_path)?;
    let test = to_series(test_rows, &label_map, test_path)?;
    let name = dataset_name(train_path);
    Ok(Dataset {
        name,
        train,
        test,
        num_classes: label_map.len(),
        label_map,
    })
}

fn dataset_name(train_path: &Path) -> String {
    let stem = train_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset");
    stem.strip_suffix("_TRAIN").unwrap_or(stem).to_string()
}

/// Locates `<Name>_TRAIN` / `<Name>_TEST` in a directory (extensions
/// `.tsv`, `.txt`, `.csv` or none).
pub fn find_ucr_pair(dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    names.sort();
    let has_suffix = |p: &Path, suffix: &str| {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let ext_ok = matches!(
            p.extension().and_then(|e| e.to_str()),
            None | Some("tsv") | Some("txt") | Some("csv")
        );
        ext_ok && stem.ends_with(suffix)
    };
    let train = names.iter().find(|p| has_suffix(p, "_TRAIN"));
    let test = names.iter().find(|p| has_suffix(p, "_TEST"));
    match (train, test) {
        (Some(a), Some(b)) => Ok((a.clone(), b.clone())),
        _ => Err(Error::Argument(format!(
            "{} does not contain a <name>_TRAIN / <name>_TEST pair",
            dir.display()
        ))),
    }
}

pub fn load_ucr_dir<T: Scalar>(dir: &Path) -> Result<Dataset<T>> {
    let (train, test) = find_ucr_pair(dir)?;
    parse_ucr(&train, &test)
}

fn write_split<T: Scalar>(path: &Path, series: &[LabeledSeries<T>]) -> Result<()> {
    let width = series.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut out = String::new();
    for s in series {
        if s.dim() != 1 {
            return Err(Error::Argument("UCR text format holds univariate series only".into()));
        }
        out.push_str(&s.original_label);
        for v in s.values() {
            out.push('\t');
            out.push_str(&v.to_string());
        }
        for _ in s.len()..width {
            out.push_str("\tNaN");
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes `<dir>/<name>_TRAIN.tsv` and `<dir>/<name>_TEST.tsv`.
pub fn write_ucr<T: Scalar>(dataset: &Dataset<T>, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let train = dir.join(format!("{}_TRAIN.tsv", dataset.name));
    let test = dir.join(format!("{}_TEST.tsv", dataset.name));
    write_split(&train, &dataset.train)?;
    write_split(&test, &dataset.test)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(dir: &Path, train: &str, test: &str) -> (PathBuf, PathBuf) {
        let a = dir.join("Toy_TRAIN.tsv");
        let b = dir.join("Toy_TEST.tsv");
        fs::write(&a, train).unwrap();
        fs::write(&b, test).unwrap();
        (a, b)
    }

    #[test]
    fn two_row_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = pair(dir.path(), "1\t0.0\t1.0\n2\t1.0\t0.0\n", "2\t0.5\t0.5\n");
        let ds: Dataset<f64> = parse_ucr(&a, &b).unwrap();
        assert_eq!(ds.name, "Toy");
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.train[0].len(), 2);
        assert_eq!(ds.train.iter().map(|s| s.label).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(ds.test[0].label, 1);
    }

    #[test]
    fn trailing_missing_values_shorten_series() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = pair(dir.path(), "1 0.5 1.5 NaN NaN\n0 1 2 3 4\n", "1 1 2 3 4\n");
        let ds: Dataset<f64> = parse_ucr(&a, &b).unwrap();
        assert_eq!(ds.train[0].len(), 2);
        assert_eq!(ds.train[1].len(), 4);
        // numeric label order: "0" < "1"
        assert_eq!(ds.label_map, vec!["0", "1"]);
    }

    #[test]
    fn delimiter_variants_agree() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = pair(dir.path(), "1\t0.0\t1.0\n2\t1.0\t0.0\n", "2\t0.5\t0.5\n");
        let tab: Dataset<f64> = parse_ucr(&a, &b).unwrap();
        let (a, b) = pair(dir.path(), "1,0.0,1.0\n2,1.0,0.0\n", "2,0.5,0.5\n");
        let comma: Dataset<f64> = parse_ucr(&a, &b).unwrap();
        assert_eq!(tab, comma);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            ("1\t0\t1\n2\t1\n", "1\t0\t1\n"),
            ("1\t0\tNaN\t1\n", "1\t0\t1\t1\n"),
            ("1\t0\t1\n", "3\t0\t1\n"),
            ("1\t0\tx\n", "1\t0\t1\n"),
        ];
        for (train, test) in cases {
            let (a, b) = pair(dir.path(), train, test);
            assert!(parse_ucr::<f64>(&a, &b).is_err(), "accepted {train:?}/{test:?}");
        }
        assert!(matches!(
            parse_ucr::<f64>(&dir.path().join("missing"), &dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn label_map_ignores_row_order() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = pair(dir.path(), "b\t1\na\t2\nc\t3\n", "a\t1\n");
        let one: Dataset<f64> = parse_ucr(&a, &b).unwrap();
        let (a, b) = pair(dir.path(), "c\t3\na\t2\nb\t1\n", "a\t1\n");
        let two: Dataset<f64> = parse_ucr(&a, &b).unwrap();
        assert_eq!(one.label_map, two.label_map);
        assert_eq!(one.label_map, vec!["a", "b", "c"]);
    }

    #[test]
    fn directory_lookup() {
        let dir = tempfile::tempdir().unwrap();
        pair(dir.path(), "1\t0\t1\n", "1\t1\t0\n");
        let ds: Dataset<f64> = load_ucr_dir(dir.path()).unwrap();
        assert_eq!(ds.test.len(), 1);
        assert!(find_ucr_pair(&dir.path().join("nope")).is_err());
    }

    proptest! {
        #[test]
        fn write_then_parse_round_trips(
            rows in prop::collection::vec((0u8..3, prop::collection::vec(-1e3f64..1e3, 1..12)), 1..10)
        ) {
            let train: Vec<LabeledSeries<f64>> = rows
                .iter()
                .map(|(l, v)| LabeledSeries::new(v.clone(), 1, 0, l.to_string()).unwrap())
                .collect();
            let mut labels: Vec<String> = train.iter().map(|s| s.original_label.clone()).collect();
            sort_labels(&mut labels);
            labels.dedup();
            let train: Vec<LabeledSeries<f64>> = train
                .into_iter()
                .map(|mut s| { s.label = labels.iter().position(|l| *l == s.original_label).unwrap(); s })
                .collect();
            let ds = Dataset {
                name: "Round".to_string(),
                test: train.clone(),
                train,
                num_classes: labels.len(),
                label_map: labels,
            };
            let dir = tempfile::tempdir().unwrap();
            let (a, b) = write_ucr(&ds, dir.path()).unwrap();
            let back: Dataset<f64> = parse_ucr(&a, &b).unwrap();
            prop_assert_eq!(back.label_map.clone(), ds.label_map.clone());
            for (x, y) in back.train.iter().zip(&ds.train) {
                prop_assert_eq!(x.label, y.label);
                prop_assert_eq!(x.len(), y.len());
                for (p, q) in x.values().iter().zip(y.values()) {
                    prop_assert!((p - q).abs() <= 1e-12 * q.abs().max(1.0));
                }
            }
        }
    }
}

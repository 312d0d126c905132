//! CSV datasets: a header line, numeric feature columns, then an integer
//! `label` column where `-1` marks an unlabelled row.

use std::io::{Read, Write};
use std::path::Path;

use dcan_core::datasets::UNLABELED;
use dcan_core::{DomainDataset, Matrix};

use crate::error::{CliError, Result};

/// Reads a dataset. Without `class_count` the label space is
/// `0..=max label`.
pub fn read_csv<R: Read>(
    reader: R,
    name: &str,
    class_count: Option<usize>,
) -> Result<DomainDataset> {
    let path = Path::new(name);
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let parse_err = |line: u64, message: String| CliError::Parse {
        path: path.into(),
        line,
        message,
    };
    let header = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if header.len() < 2 || header.get(header.len() - 1).map(str::trim) != Some("label") {
        return Err(parse_err(
            1,
            "header must list feature columns followed by \"label\"".into(),
        ));
    }
    let dim = header.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 1 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", dim + 1, record.len()),
            ));
        }
        for field in record.iter().take(dim) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("invalid number {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite feature {field:?}")));
            }
            data.push(v);
        }
        let raw = &record[dim];
        let label: i64 = raw
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("invalid label {raw:?}")))?;
        if label < UNLABELED {
            return Err(parse_err(line, format!("label {label} below -1")));
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }
    let inferred = labels
        .iter()
        .copied()
        .max()
        .map_or(0, |m| (m + 1).max(1) as usize);
    let classes = class_count.unwrap_or(inferred);
    let x = Matrix::from_vec(labels.len(), dim, data)?;
    Ok(DomainDataset::new(x, labels, classes, name)?)
}

pub fn load_csv(path: &Path, class_count: Option<usize>) -> Result<DomainDataset> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_csv(
        std::io::BufReader::new(file),
        &path.display().to_string(),
        class_count,
    )
}

/// Writes `ds` with columns `x0, x1, …, label`. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_csv<W: Write>(ds: &DomainDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| CliError::Runtime(format!("writing CSV: {e}"));
    let mut header: Vec<String> = (0..ds.input_dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(to_err)?;
    for (row, label) in ds.x().row_iter().zip(ds.labels()) {
        let mut fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        fields.push(label.to_string());
        w.write_record(&fields).map_err(to_err)?;
    }
    w.flush()
        .map_err(|e| CliError::Runtime(format!("writing CSV: {e}")))
}

pub fn save_csv(ds: &DomainDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    write_csv(ds, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_line_round_trip() {
        let x = Matrix::from_rows(&[[0.1, -2.5e-7], [1.0 / 3.0, 4.0], [f64::MIN_POSITIVE, -0.0]]);
        let ds = DomainDataset::new(x, vec![0, -1, 2], 3, "t").unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), "t", None).unwrap();
        assert_eq!(back.labels(), ds.labels());
        assert_eq!(back.class_count(), 3);
        for (a, b) in back.x().as_slice().iter().zip(ds.x().as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "a,b,label\n1,2,0\n1,oops,1\n";
        match read_csv(text.as_bytes(), "bad.csv", None).unwrap_err() {
            CliError::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("oops"));
            }
            e => panic!("{e:?}"),
        }
        let ragged = "a,label\n1,0\n1,2,3\n";
        assert!(matches!(
            read_csv(ragged.as_bytes(), "r", None),
            Err(CliError::Parse { line: 3, .. })
        ));
        assert!(matches!(
            read_csv("a,b\n1,2\n".as_bytes(), "h", None),
            Err(CliError::Parse { line: 1, .. })
        ));
        assert!(read_csv("a,label\n".as_bytes(), "e", None).is_err());
        assert!(read_csv("a,label\n1,-2\n".as_bytes(), "l", None).is_err());
    }

    #[test]
    fn explicit_class_count_is_checked() {
        let text = "a,label\n1,4\n";
        assert!(read_csv(text.as_bytes(), "c", Some(3)).is_err());
        assert_eq!(
            read_csv(text.as_bytes(), "c", Some(6))
                .unwrap()
                .class_count(),
            6
        );
    }
}

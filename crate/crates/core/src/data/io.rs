use std::io::{Read, Write};
use std::path::Path;

use super::{Dataset, ItemKind, OutcomeSchema, Row};
use crate::{Error, Result};

/// Loads a header-labelled CSV file: `subject_id, group, <item names...>`.
pub fn load_dataset(path: impl AsRef<Path>, schema: &OutcomeSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(file, schema).map_err(|e| match e {
        Error::EmptyFile(_) => Error::EmptyFile(path.to_path_buf()),
        other => other,
    })
}

pub fn read_dataset<R: Read>(reader: R, schema: &OutcomeSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::EmptyFile("<input>".into()));
    }
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_col = find("subject_id")?;
    let group_col = find("group")?;
    let item_cols: Vec<usize> = schema
        .items()
        .iter()
        .map(|it| find(&it.name))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 1;
        let label = rec.get(group_col).unwrap_or_default();
        let group = schema.group_index(label).ok_or_else(|| Error::UnknownGroup {
            row: line,
            label: label.to_string(),
        })?;
        let mut y = Vec::with_capacity(item_cols.len());
        for (item, &c) in schema.items().iter().zip(&item_cols) {
            let raw = rec.get(c).unwrap_or_default();
            let v: f64 = raw.parse().map_err(|_| Error::InvalidValue {
                row: line,
                column: item.name.clone(),
                message: if raw.is_empty() {
                    "missing value".into()
                } else {
                    format!("cannot parse `{raw}` as a number")
                },
            })?;
            if item.kind == ItemKind::Binary && v != 0.0 && v != 1.0 {
                return Err(Error::InvalidValue {
                    row: line,
                    column: item.name.clone(),
                    message: format!("binary value must be 0 or 1, found {raw}"),
                });
            }
            y.push(v);
        }
        rows.push(Row {
            subject_id: rec.get(id_col).unwrap_or_default().to_string(),
            group,
            y,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyFile("<input>".into()));
    }
    Dataset::new(schema.clone(), rows)
}

pub fn write_dataset<W: Write>(writer: W, d: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["subject_id".to_string(), "group".to_string()];
    header.extend(d.schema().items().iter().map(|i| i.name.clone()));
    w.write_record(&header)?;
    for row in d.rows() {
        let mut rec = vec![
            row.subject_id.clone(),
            d.schema().group_labels()[row.group].clone(),
        ];
        for (item, v) in d.schema().items().iter().zip(&row.y) {
            rec.push(match item.kind {
                ItemKind::Binary => format!("{}", *v as u8),
                ItemKind::Continuous => format!("{v:?}"),
            });
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<output>", e))?;
    Ok(())
}

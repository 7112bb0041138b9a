//! CSV ingestion with label folding.

use std::io::Read;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::stream::{matrix_to_updates, StreamHeader, TurnstileUpdate};

/// Where the label lives in a CSV file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
    None,
}

/// Folds labels into the rows: `[X, -y]` for lp losses, `-y_i x_i` for the
/// classification losses (labels in {-1, +1}; 0 is read as -1).
pub fn fold_rows(x: &DMatrix<f64>, y: &[f64], loss: &LossKind) -> Result<DMatrix<f64>> {
    let (n, d) = x.shape();
    if y.len() != n {
        return Err(Error::Mismatch(format!("{} labels for {n} rows", y.len())));
    }
    match loss {
        LossKind::Lp { .. } => {
            let mut a = x.clone().resize_horizontally(d + 1, 0.0);
            for (i, v) in y.iter().enumerate() {
                a[(i, d)] = -v;
            }
            Ok(a)
        }
        _ => {
            let mut a = x.clone();
            for (i, &v) in y.iter().enumerate() {
                let s = match v {
                    v if v == 1.0 => 1.0,
                    v if v == -1.0 || v == 0.0 => -1.0,
                    other => {
                        return Err(Error::Csv {
                            record: i + 1,
                            column: 0,
                            msg: format!("label {other} is not one of -1, 0, 1"),
                        })
                    }
                };
                a.row_mut(i).scale_mut(-s);
            }
            Ok(a)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Ingested {
    pub header: StreamHeader,
    pub updates: Vec<TurnstileUpdate>,
    pub matrix: DMatrix<f64>,
    pub columns: Vec<String>,
}

/// Reads a numeric CSV, separates the label column and folds it in.
/// Without a fold the label column is dropped.
pub fn ingest_csv<R: Read>(r: R, has_headers: bool, label: &LabelColumn, fold: Option<&LossKind>) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(has_headers).trim(csv::Trim::All).from_reader(r);
    let names: Vec<String> = if has_headers {
        rdr.headers()
            .map_err(|e| Error::Csv { record: 0, column: 0, msg: e.to_string() })?
            .iter()
            .map(str::to_string)
            .collect()
    } else {
        Vec::new()
    };
    let label_idx = match label {
        LabelColumn::Index(i) => Some(*i),
        LabelColumn::None => None,
        LabelColumn::Name(name) => Some(
            names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Csv { record: 0, column: 0, msg: format!("no column named `{name}`") })?,
        ),
    };
    let mut feats: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<f64> = Vec::new();
    let mut width = None;
    for (rec_no, rec) in rdr.records().enumerate() {
        let record = rec_no + 1;
        let rec = rec.map_err(|e| Error::Csv { record, column: 0, msg: e.to_string() })?;
        if *width.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::Csv { record, column: rec.len(), msg: "ragged row".into() });
        }
        let mut row = Vec::with_capacity(rec.len());
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Csv {
                record,
                column: c + 1,
                msg: format!("non-numeric cell `{cell}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv { record, column: c + 1, msg: "non-finite cell".into() });
            }
            if Some(c) == label_idx {
                labels.push(v);
            } else {
                row.push(v);
            }
        }
        feats.push(row);
    }
    let width = width.ok_or_else(|| Error::Csv { record: 0, column: 0, msg: "no data rows".into() })?;
    if let Some(li) = label_idx {
        if li >= width {
            return Err(Error::Csv { record: 0, column: li + 1, msg: format!("label column beyond {width} columns") });
        }
    }
    let d = feats[0].len();
    if d == 0 {
        return Err(Error::Csv { record: 0, column: 0, msg: "no feature columns".into() });
    }
    let x = DMatrix::from_fn(feats.len(), d, |i, c| feats[i][c]);
    let matrix = match (fold, label_idx) {
        (Some(loss), Some(_)) => fold_rows(&x, &labels, loss)?,
        (Some(_), None) => return Err(Error::InvalidConfig("folding needs a label column".into())),
        (None, _) => x,
    };
    let mut columns: Vec<String> = if names.is_empty() {
        (0..d).map(|c| format!("x{c}")).collect()
    } else {
        names.iter().enumerate().filter(|(c, _)| Some(*c) != label_idx).map(|(_, s)| s.clone()).collect()
    };
    if matrix.ncols() > columns.len() {
        columns.push("neg_label".into());
    }
    let header = StreamHeader::new(matrix.nrows() as u64, matrix.ncols())?;
    Ok(Ingested { header, updates: matrix_to_updates(&matrix), matrix, columns })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::replay_dense;

    #[test]
    fn logistic_fold_negates_by_label() {
        let csv = "a,b,y\n1,2,1\n3,-4,-1\n";
        let ing = ingest_csv(csv.as_bytes(), true, &LabelColumn::Name("y".into()), Some(&LossKind::Logistic)).unwrap();
        assert_eq!(ing.matrix, DMatrix::from_row_slice(2, 2, &[-1.0, -2.0, 3.0, -4.0]));
        assert_eq!(replay_dense(&ing.header, &ing.updates), ing.matrix);
    }

    #[test]
    fn zero_column_emits_nothing() {
        let csv = "1,0,5\n2,0,6\n";
        let ing = ingest_csv(csv.as_bytes(), false, &LabelColumn::Index(2), Some(&LossKind::Lp { p: 1.0 })).unwrap();
        assert!(ing.updates.iter().all(|u| u.col != 1));
        assert_eq!(ing.matrix, DMatrix::from_row_slice(2, 3, &[1.0, 0.0, -5.0, 2.0, 0.0, -6.0]));
    }

    #[test]
    fn bad_cell_is_located() {
        let err = ingest_csv("1,2\n3,x\n".as_bytes(), false, &LabelColumn::None, None).unwrap_err();
        assert!(matches!(err, Error::Csv { record: 2, column: 2, .. }), "{err}");
    }
}

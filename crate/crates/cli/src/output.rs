//! Row emitters for the table, JSON-lines and CSV formats.

use std::io::Write;

use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Table,
    Json,
    Csv,
}

/// Flattens nested objects and arrays into dotted keys, keeping field order.
pub fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(m) => m.iter().for_each(|(k, v)| flatten(&key(k), v, out)),
        Value::Array(a) => a.iter().enumerate().for_each(|(i, v)| flatten(&key(&i.to_string()), v, out)),
        leaf => out.push((prefix.to_string(), leaf.clone())),
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn write_json<T: Serialize>(w: &mut dyn Write, rows: &[T]) -> std::io::Result<()> {
    for r in rows {
        serde_json::to_writer(&mut *w, r)?;
        writeln!(w)?;
    }
    Ok(())
}

/// One column per flattened key, in first-seen order; rows lacking a key
/// leave the cell empty.
pub fn write_csv<T: Serialize>(w: &mut dyn Write, rows: &[T]) -> std::io::Result<()> {
    let flat: Vec<Vec<(String, Value)>> = rows
        .iter()
        .map(|r| {
            let mut f = Vec::new();
            flatten("", &serde_json::to_value(r).expect("rows serialize"), &mut f);
            f
        })
        .collect();
    let mut header: Vec<String> = Vec::new();
    for (k, _) in flat.iter().flatten() {
        if !header.contains(k) {
            header.push(k.clone());
        }
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(&header)?;
    for f in &flat {
        out.write_record(header.iter().map(|h| f.iter().find(|(k, _)| k == h).map(|(_, v)| cell(v)).unwrap_or_default()))?;
    }
    out.flush()
}

/// Left-aligned text table.
pub fn write_table(w: &mut dyn Write, header: &[&str], rows: &[Vec<String>]) -> std::io::Result<()> {
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (wd, c) in width.iter_mut().zip(r) {
            *wd = (*wd).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells.iter().zip(&width).map(|(c, wd)| format!("{c:<wd$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
    };
    writeln!(w, "{}", line(header.to_vec()))?;
    for r in rows {
        writeln!(w, "{}", line(r.iter().map(String::as_str).collect()))?;
    }
    Ok(())
}

/// Writes rows in `format`; `table` renders one row for the text table.
pub fn emit<T: Serialize>(
    w: &mut dyn Write,
    format: Format,
    rows: &[T],
    header: &[&str],
    table: impl Fn(&T) -> Vec<String>,
) -> std::io::Result<()> {
    match format {
        Format::Json => write_json(w, rows),
        Format::Csv => write_csv(w, rows),
        Format::Table => write_table(w, header, &rows.iter().map(table).collect::<Vec<_>>()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        z: u32,
        a: Option<f64>,
        nest: std::collections::BTreeMap<String, u32>,
        pair: [u8; 2],
    }

    fn rows() -> Vec<Row> {
        vec![
            Row { z: 1, a: Some(0.5), nest: [("x".to_string(), 3)].into(), pair: [1, 2] },
            Row { z: 2, a: None, nest: [("y".to_string(), 4)].into(), pair: [3, 4] },
        ]
    }

    #[test]
    fn csv_keeps_field_order_and_unions_keys() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows()).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "z,a,nest.x,pair.0,pair.1,nest.y\n1,0.5,3,1,2,\n2,,,3,4,4\n");
    }

    #[test]
    fn json_lines() {
        let mut buf = Vec::new();
        write_json(&mut buf, &rows()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"z":1,"a":0.5,"nest":{"x":3},"pair":[1,2]}"#);
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn table_alignment() {
        let mut buf = Vec::new();
        write_table(&mut buf, &["a", "bb"], &[vec!["xyz".into(), "1".into()]]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "a    bb\nxyz  1\n");
    }
}

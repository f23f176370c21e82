//! One impression per line, tab-separated, with a header. List columns are
//! comma-joined; an empty list is an empty cell.
//!
//! Columns: `user_id day scenario context item_id item_cat profile_0 ..
//! profile_{P-1} hist_item_ids hist_item_cats hist_days label`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub user_id: u64,
    pub day: i64,
    pub scenario: u64,
    pub context: u64,
    pub item_id: u64,
    pub item_cat: u64,
    pub profile: Vec<u64>,
    /// Oldest first.
    pub hist_items: Vec<u64>,
    pub hist_cats: Vec<u64>,
    pub hist_days: Vec<i64>,
    pub label: u8,
}

impl Record {
    pub fn is_cold(&self) -> bool {
        self.hist_items.is_empty()
    }
}

const LEAD: [&str; 6] = ["user_id", "day", "scenario", "context", "item_id", "item_cat"];
const TAIL: [&str; 4] = ["hist_item_ids", "hist_item_cats", "hist_days", "label"];

fn header(profiles: usize) -> Vec<String> {
    LEAD.iter()
        .map(|s| s.to_string())
        .chain((0..profiles).map(|k| format!("profile_{k}")))
        .chain(TAIL.iter().map(|s| s.to_string()))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub fn write_records_to<W: Write>(out: W, records: &[Record]) -> Result<()> {
    let profiles = records.first().map_or(0, |r| r.profile.len());
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(header(profiles)).map_err(csv_err)?;
    for r in records {
        if r.profile.len() != profiles {
            return Err(Error::InvalidArgument("records disagree on the number of profile fields".into()));
        }
        let mut row = vec![
            r.user_id.to_string(),
            r.day.to_string(),
            r.scenario.to_string(),
            r.context.to_string(),
            r.item_id.to_string(),
            r.item_cat.to_string(),
        ];
        row.extend(r.profile.iter().map(u64::to_string));
        row.extend([join(&r.hist_items), join(&r.hist_cats), join(&r.hist_days), r.label.to_string()]);
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    write_records_to(BufWriter::new(File::create(path)?), records)
}

fn parse<T: FromStr>(cell: &str, column: &str, line: u64) -> Result<T> {
    cell.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("column `{column}`: cannot parse `{cell}`"),
    })
}

fn parse_list<T: FromStr>(cell: &str, column: &str, line: u64) -> Result<Vec<T>> {
    if cell.is_empty() {
        return Ok(Vec::new());
    }
    cell.split(',').map(|c| parse(c, column, line)).collect()
}

pub fn read_records_from<R: Read>(input: R) -> Result<Vec<Record>> {
    let mut rd = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut rows = rd.records();
    let head = match rows.next() {
        None => return Err(Error::Parse { line: 1, msg: "empty file".into() }),
        Some(h) => h.map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?,
    };
    let cols: Vec<&str> = head.iter().collect();
    let profiles = cols.len().checked_sub(LEAD.len() + TAIL.len()).ok_or_else(|| Error::Parse {
        line: 1,
        msg: format!("header has {} columns, expected at least {}", cols.len(), LEAD.len() + TAIL.len()),
    })?;
    let expected = header(profiles);
    if let Some((got, want)) = cols.iter().zip(&expected).find(|(g, w)| *g != w) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unexpected column `{got}` where `{want}` belongs"),
        });
    }
    let mut out = Vec::new();
    for row in rows {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != expected.len() {
            return Err(Error::Parse {
                line,
                msg: format!("{} fields, expected {}", row.len(), expected.len()),
            });
        }
        let cell = |i: usize| &row[i];
        let t = LEAD.len() + profiles;
        let rec = Record {
            user_id: parse(cell(0), LEAD[0], line)?,
            day: parse(cell(1), LEAD[1], line)?,
            scenario: parse(cell(2), LEAD[2], line)?,
            context: parse(cell(3), LEAD[3], line)?,
            item_id: parse(cell(4), LEAD[4], line)?,
            item_cat: parse(cell(5), LEAD[5], line)?,
            profile: (0..profiles)
                .map(|k| parse(cell(LEAD.len() + k), &expected[LEAD.len() + k], line))
                .collect::<Result<_>>()?,
            hist_items: parse_list(cell(t), TAIL[0], line)?,
            hist_cats: parse_list(cell(t + 1), TAIL[1], line)?,
            hist_days: parse_list(cell(t + 2), TAIL[2], line)?,
            label: parse(cell(t + 3), TAIL[3], line)?,
        };
        if rec.hist_cats.len() != rec.hist_items.len() || rec.hist_days.len() != rec.hist_items.len() {
            return Err(Error::Parse {
                line,
                msg: "history columns have different lengths".into(),
            });
        }
        if rec.label > 1 {
            return Err(Error::Parse {
                line,
                msg: format!("label {} is not 0 or 1", rec.label),
            });
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Parse {
            line: 2,
            msg: "no records after the header".into(),
        });
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    read_records_from(BufReader::new(File::open(path)?))
}

//! Dataset text format.
//!
//! ```text
//! #megp-dataset 1
//! #spec {"generator":"synthetic",...}
//! #dim 1
//! #columns task,label,noise,split,x0,y,truth
//! 0,0,,train,-3.25,0.41,0.38
//! ```
//!
//! One row per point; `split` is `train` or `test`. Empty `label`/`noise`
//! cells mean "unknown"/"shared", an empty `truth` cell means NaN. Floats
//! are printed with the shortest representation that parses back to the
//! same bits, so a write/read round trip is lossless. Task ids must be
//! `0..M` and every task needs at least one row.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use super::{DataTask, Dataset, Points};
use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "#megp-dataset";
pub const FORMAT_VERSION: &str = "1";

fn float(out: &mut String, v: f64) {
    if !v.is_nan() {
        write!(out, "{v}").unwrap();
    }
}

pub fn to_text(d: &Dataset) -> String {
    let mut s = String::new();
    writeln!(s, "{FORMAT_TAG} {FORMAT_VERSION}").unwrap();
    writeln!(s, "#spec {}", d.spec).unwrap();
    writeln!(s, "#dim {}", d.dim).unwrap();
    let xs: Vec<String> = (0..d.dim).map(|i| format!("x{i}")).collect();
    writeln!(
        s,
        "#columns task,label,noise,split,{},y,truth",
        xs.join(",")
    )
    .unwrap();
    for (j, t) in d.tasks.iter().enumerate() {
        for (split, pts) in [("train", &t.train), ("test", &t.test)] {
            for i in 0..pts.len() {
                write!(s, "{j},").unwrap();
                if let Some(l) = t.label {
                    write!(s, "{l}").unwrap();
                }
                s.push(',');
                if let Some(n) = t.noise {
                    float(&mut s, n);
                }
                write!(s, ",{split}").unwrap();
                for c in 0..d.dim {
                    s.push(',');
                    float(&mut s, pts.x[(i, c)]);
                }
                s.push(',');
                float(&mut s, pts.y[i]);
                s.push(',');
                float(&mut s, pts.truth[i]);
                s.push('\n');
            }
        }
    }
    s
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse(format!("line {line}: {}", msg.into()))
}

fn parse_f64(cell: &str, line: usize) -> Result<f64> {
    if cell.is_empty() {
        return Ok(f64::NAN);
    }
    cell.parse()
        .map_err(|_| parse_err(line, format!("bad number {cell:?}")))
}

#[derive(Default)]
struct Builder {
    label: Option<usize>,
    noise: Option<f64>,
    x: [Vec<f64>; 2],
    y: [Vec<f64>; 2],
    truth: [Vec<f64>; 2],
}

pub fn from_text(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut header = |prefix: &str| -> Result<String> {
        let (n, l) = lines
            .next()
            .ok_or_else(|| Error::Parse("truncated header".into()))?;
        l.strip_prefix(prefix)
            .map(|r| r.trim_start().to_string())
            .ok_or_else(|| parse_err(n, format!("expected {prefix:?}")))
    };
    let version = header(FORMAT_TAG)?;
    if version != FORMAT_VERSION {
        return Err(Error::SchemaVersion {
            found: version,
            expected: FORMAT_VERSION.into(),
        });
    }
    let spec: serde_json::Value = serde_json::from_str(&header("#spec")?)?;
    let dim: usize = header("#dim")?
        .parse()
        .map_err(|_| Error::Parse("bad #dim".into()))?;
    header("#columns")?;
    let width = 6 + dim;

    let mut tasks: Vec<Builder> = Vec::new();
    for (n, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width {
            return Err(parse_err(
                n,
                format!("expected {width} cells, got {}", cells.len()),
            ));
        }
        let j: usize = cells[0].parse().map_err(|_| parse_err(n, "bad task id"))?;
        if j > tasks.len() {
            return Err(parse_err(n, format!("task {j} out of order")));
        }
        if j == tasks.len() {
            let label = match cells[1] {
                "" => None,
                c => Some(c.parse().map_err(|_| parse_err(n, "bad label"))?),
            };
            let noise = match cells[2] {
                "" => None,
                c => Some(parse_f64(c, n)?),
            };
            tasks.push(Builder {
                label,
                noise,
                ..Default::default()
            });
        }
        let b = &mut tasks[j];
        let s = match cells[3] {
            "train" => 0,
            "test" => 1,
            other => return Err(parse_err(n, format!("unknown split {other:?}"))),
        };
        for c in &cells[4..4 + dim] {
            b.x[s].push(parse_f64(c, n)?);
        }
        b.y[s].push(parse_f64(cells[4 + dim], n)?);
        b.truth[s].push(parse_f64(cells[5 + dim], n)?);
    }

    let tasks = tasks
        .into_iter()
        .map(|b| {
            let Builder {
                label,
                noise,
                x,
                y,
                truth,
            } = b;
            let [xtr, xte] = x;
            let [ytr, yte] = y;
            let [ttr, tte] = truth;
            let pts = |x: Vec<f64>, y: Vec<f64>, truth: Vec<f64>| Points {
                x: DMatrix::from_row_slice(y.len(), dim, &x),
                y,
                truth,
            };
            DataTask {
                label,
                noise,
                train: pts(xtr, ytr, ttr),
                test: pts(xte, yte, tte),
            }
        })
        .collect();
    Ok(Dataset { spec, dim, tasks })
}

pub fn write_dataset(d: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, to_text(d))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    from_text(&fs::read_to_string(path)?)
}

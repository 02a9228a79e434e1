//! `globe-sample v1` text format.
//!
//! ```text
//! globe-sample v1 d=2
//! [boundary bc=no_slip]
//! f cx cy nx ny area        # or tri / seg records
//! [globals]
//! scalar Re 1e6
//! vector U_dir 1 0
//! [scales]
//! 1 0.01
//! [queries]
//! x y
//! [targets scalars=Cp,Cpt vectors=dU]
//! one row per query, scalars then vector components
//! [mask]
//! one 0/1 per field per query
//! [surface]
//! one 0/1 per query
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use super::{FieldSchema, FieldSet, Sample};
use crate::error::{Error, Result};
use crate::geometry::{header_value, parse_dim, parse_floats, strip_comment, write_face_records, FaceRecords};

fn write_row<'a>(out: &mut String, values: impl IntoIterator<Item = &'a f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        let _ = write!(out, "{v:?}");
        first = false;
    }
    out.push('\n');
}

fn write_flags<'a>(out: &mut String, flags: impl IntoIterator<Item = &'a bool>) {
    let s: Vec<&str> = flags.into_iter().map(|&b| if b { "1" } else { "0" }).collect();
    out.push_str(&s.join(" "));
    out.push('\n');
}

pub fn write_sample_string(sample: &Sample) -> String {
    let mut out = format!("globe-sample v1 d={}\n", sample.dim);
    for (bc, mesh) in &sample.boundaries {
        let _ = writeln!(out, "[boundary bc={bc}]");
        write_face_records(mesh, &mut out);
    }
    if !sample.global_scalars.is_empty() || !sample.global_vectors.is_empty() {
        out.push_str("[globals]\n");
        for (name, v) in &sample.global_scalars {
            let _ = writeln!(out, "scalar {name} {v:?}");
        }
        for (name, v) in &sample.global_vectors {
            let _ = write!(out, "vector {name} ");
            write_row(&mut out, v);
        }
    }
    out.push_str("[scales]\n");
    write_row(&mut out, &sample.reference_lengths);
    out.push_str("[queries]\n");
    for row in sample.queries.rows() {
        write_row(&mut out, row);
    }
    if let Some(t) = &sample.targets {
        let _ = writeln!(
            out,
            "[targets scalars={} vectors={}]",
            t.schema.scalars.join(","),
            t.schema.vectors.join(",")
        );
        for row in t.values.rows() {
            write_row(&mut out, row);
        }
    }
    if let Some(m) = &sample.mask {
        out.push_str("[mask]\n");
        for row in m.rows() {
            write_flags(&mut out, row);
        }
    }
    if sample.surface.iter().any(|&b| b) {
        out.push_str("[surface]\n");
        write_flags(&mut out, &sample.surface);
    }
    out
}

pub fn write_sample(sample: &Sample, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_sample_string(sample)).map_err(|e| Error::io(path, e))
}

pub fn read_sample(path: impl AsRef<Path>) -> Result<Sample> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sample(&text)
}

enum Section {
    None,
    Boundary,
    Globals,
    Scales,
    Queries,
    Targets,
    Mask,
    Surface,
}

fn parse_flags(fields: &[&str], line: usize) -> Result<Vec<bool>> {
    fields
        .iter()
        .map(|s| match *s {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(Error::Parse {
                line,
                msg: format!("expected 0 or 1, got {other:?}"),
            }),
        })
        .collect()
}

fn split_names(v: Option<&str>) -> Vec<String> {
    v.unwrap_or("")
        .split(',')
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn parse_sample(text: &str) -> Result<Sample> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, strip_comment(l)))
        .filter(|(_, l)| !l.is_empty());
    let (hline, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty sample file".into(),
    })?;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.len() < 2 || tokens[0] != "globe-sample" || tokens[1] != "v1" {
        return Err(Error::Parse {
            line: hline,
            msg: format!("expected `globe-sample v1` header, got {header:?}"),
        });
    }
    let dim = parse_dim(&tokens, hline)?;

    let mut section = Section::None;
    let mut records: Vec<(String, FaceRecords)> = Vec::new();
    let mut global_scalars = Vec::new();
    let mut global_vectors = Vec::new();
    let mut scales: Vec<f64> = Vec::new();
    let mut queries: Vec<f64> = Vec::new();
    let mut schema: Option<FieldSchema> = None;
    let mut targets: Vec<f64> = Vec::new();
    let mut mask: Vec<bool> = Vec::new();
    let mut mask_rows = 0usize;
    let mut have_mask = false;
    let mut surface: Vec<bool> = Vec::new();

    for (ln, l) in lines {
        let bad = |msg: String| Error::Parse { line: ln, msg };
        if let Some(inner) = l.strip_prefix('[') {
            let inner = inner
                .strip_suffix(']')
                .ok_or_else(|| bad("unterminated section header".into()))?;
            let t: Vec<&str> = inner.split_whitespace().collect();
            section = match t.first().copied() {
                Some("boundary") => {
                    let bc = header_value(&t, "bc").ok_or_else(|| bad("boundary section needs bc=<label>".into()))?;
                    records.push((bc.to_string(), FaceRecords::new(dim)));
                    Section::Boundary
                }
                Some("globals") => Section::Globals,
                Some("scales") => Section::Scales,
                Some("queries") => Section::Queries,
                Some("targets") => {
                    schema = Some(FieldSchema::new(
                        split_names(header_value(&t, "scalars")),
                        split_names(header_value(&t, "vectors")),
                    ));
                    Section::Targets
                }
                Some("mask") => {
                    have_mask = true;
                    Section::Mask
                }
                Some("surface") => Section::Surface,
                other => return Err(bad(format!("unknown section {other:?}"))),
            };
            continue;
        }
        let fields: Vec<&str> = l.split_whitespace().collect();
        match &section {
            Section::None => return Err(bad("record before any section".into())),
            Section::Boundary => records.last_mut().expect("boundary section").1.push_line(l, ln)?,
            Section::Globals => match fields.as_slice() {
                ["scalar", name, v] => global_scalars.push((name.to_string(), parse_floats(&[v], ln)?[0])),
                ["vector", name, rest @ ..] => {
                    let v = parse_floats(rest, ln)?;
                    if v.len() != dim {
                        return Err(bad(format!("vector {name} needs {dim} components")));
                    }
                    global_vectors.push((name.to_string(), v));
                }
                _ => return Err(bad(format!("expected `scalar <name> <v>` or `vector <name> ...`, got {l:?}"))),
            },
            Section::Scales => scales.extend(parse_floats(&fields, ln)?),
            Section::Queries => {
                let v = parse_floats(&fields, ln)?;
                if v.len() != dim {
                    return Err(bad(format!("query needs {dim} coordinates, got {}", v.len())));
                }
                queries.extend(v);
            }
            Section::Targets => {
                let width = schema.as_ref().expect("targets section").width(dim);
                let v = parse_floats(&fields, ln)?;
                if v.len() != width {
                    return Err(bad(format!("target row needs {width} values, got {}", v.len())));
                }
                targets.extend(v);
            }
            Section::Mask => {
                mask.extend(parse_flags(&fields, ln)?);
                mask_rows += 1;
            }
            Section::Surface => surface.extend(parse_flags(&fields, ln)?),
        }
    }

    let mut boundaries = BTreeMap::new();
    for (bc, rec) in records {
        let mesh = rec.finish(&bc)?;
        if boundaries.insert(bc.clone(), mesh).is_some() {
            return Err(Error::Parse {
                line: hline,
                msg: format!("boundary {bc:?} appears twice"),
            });
        }
    }
    let n = queries.len() / dim;
    let queries = Array2::from_shape_vec((n, dim), queries).map_err(|e| Error::Shape(e.to_string()))?;
    let targets = match schema {
        Some(schema) => {
            let w = schema.width(dim);
            if targets.len() != n * w {
                return Err(Error::Shape(format!("{} target rows for {n} queries", targets.len() / w.max(1))));
            }
            let values = Array2::from_shape_vec((n, w), targets).map_err(|e| Error::Shape(e.to_string()))?;
            Some(FieldSet::new(dim, schema, values)?)
        }
        None => None,
    };
    let mask = if have_mask {
        let nf = targets.as_ref().map_or(0, |t| t.schema.n_fields());
        if mask_rows != n || mask.len() != n * nf {
            return Err(Error::Shape("mask does not match queries and fields".into()));
        }
        Some(Array2::from_shape_vec((n, nf), mask).map_err(|e| Error::Shape(e.to_string()))?)
    } else {
        None
    };
    let surface = if surface.is_empty() { vec![false; n] } else { surface };
    let sample = Sample {
        dim,
        boundaries,
        global_scalars,
        global_vectors,
        reference_lengths: if scales.is_empty() { vec![1.0] } else { scales },
        queries,
        targets,
        mask,
        surface,
    };
    sample.validate()?;
    Ok(sample)
}

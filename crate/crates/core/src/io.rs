//! Text formats for clouds and fields.
//!
//! Cloud files start with
//! `#cloud v1 seed=<u64> gamma=<f64> window=<cx> <cy> <w> <h> [angle=<a>]`, then a
//! `#rng <algorithm>` line naming the stream generator, may carry `#transform <json>`
//! lines, and then list `id x y` per line with ascending ids. Other `#` lines are skipped.
//! Field files start with `#field v1 n=<count>` followed by `id value` lines.
//! Every real is written with 17 significant digits, so reading back is bit-exact.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::sync::Arc;

use thiserror::Error;

use crate::model::{
    CloudMeta, ModelError, Point, PointCloud, PointId, RandomStream, ScalarField, TransformRecord,
    Window,
};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn parse_err(line: usize, message: impl Into<String>) -> IoError {
    IoError::Parse {
        line,
        message: message.into(),
    }
}

/// A real with 17 significant digits.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn cloud_to_string(cloud: &PointCloud) -> String {
    let w = cloud.window();
    let meta = cloud.meta();
    let mut s = format!(
        "#cloud v1 seed={} gamma={} window={} {} {} {}",
        meta.seed,
        fmt_real(meta.gamma),
        fmt_real(w.center.x),
        fmt_real(w.center.y),
        fmt_real(w.width),
        fmt_real(w.height)
    );
    if w.angle != 0.0 {
        let _ = write!(s, " angle={}", fmt_real(w.angle));
    }
    s.push('\n');
    let _ = writeln!(s, "#rng {}", RandomStream::ALGORITHM);
    for t in &meta.transforms {
        let _ = writeln!(
            s,
            "#transform {}",
            serde_json::to_string(t).expect("plain data")
        );
    }
    for (p, id) in cloud.points().iter().zip(cloud.ids()) {
        let _ = writeln!(s, "{} {} {}", id.0, fmt_real(p.x), fmt_real(p.y));
    }
    s
}

pub fn write_cloud(cloud: &PointCloud, out: &mut impl Write) -> Result<(), IoError> {
    out.write_all(cloud_to_string(cloud).as_bytes())?;
    Ok(())
}

fn real(tok: &str, line: usize, what: &str) -> Result<f64, IoError> {
    tok.parse::<f64>()
        .map_err(|_| parse_err(line, format!("bad {what} `{tok}`")))
}

fn header_value<'a>(tok: Option<&'a str>, key: &str, line: usize) -> Result<&'a str, IoError> {
    tok.and_then(|t| t.strip_prefix(key))
        .and_then(|t| t.strip_prefix('='))
        .ok_or_else(|| parse_err(line, format!("expected `{key}=`")))
}

pub fn read_cloud(input: impl BufRead) -> Result<PointCloud, IoError> {
    let mut lines = input.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty cloud file"))?;
    let header = header?;
    let mut tok = header.split_whitespace();
    if tok.next() != Some("#cloud") || tok.next() != Some("v1") {
        return Err(parse_err(1, "expected `#cloud v1` header"));
    }
    let seed = header_value(tok.next(), "seed", 1)?
        .parse::<u64>()
        .map_err(|_| parse_err(1, "bad seed"))?;
    let gamma = real(header_value(tok.next(), "gamma", 1)?, 1, "gamma")?;
    let cx = real(header_value(tok.next(), "window", 1)?, 1, "window")?;
    let mut rest = [0.0; 3];
    for r in rest.iter_mut() {
        *r = real(
            tok.next()
                .ok_or_else(|| parse_err(1, "window needs 4 numbers"))?,
            1,
            "window",
        )?;
    }
    let angle = match tok.next() {
        Some(t) => real(header_value(Some(t), "angle", 1)?, 1, "angle")?,
        None => 0.0,
    };
    let window = Window::rotated(Point::new(cx, rest[0]), rest[1], rest[2], angle)?;

    let mut transforms = Vec::new();
    let mut points = Vec::new();
    let mut ids = Vec::new();
    for (k, l) in lines {
        let l = l?;
        let line = k + 1;
        let t = l.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(json) = t.strip_prefix("#transform ") {
            let rec: TransformRecord = serde_json::from_str(json)
                .map_err(|e| parse_err(line, format!("bad transform: {e}")))?;
            transforms.push(rec);
            continue;
        }
        if t.starts_with('#') {
            continue;
        }
        let mut f = t.split_whitespace();
        let (Some(a), Some(b), Some(c), None) = (f.next(), f.next(), f.next(), f.next()) else {
            return Err(parse_err(line, "expected `id x y`"));
        };
        let id = a
            .parse::<u64>()
            .map_err(|_| parse_err(line, format!("bad id `{a}`")))?;
        ids.push(PointId(id));
        points.push(Point::new(real(b, line, "x")?, real(c, line, "y")?));
    }
    Ok(PointCloud::new(
        points,
        ids,
        window,
        CloudMeta {
            seed,
            gamma,
            transforms,
        },
    )?)
}

pub fn field_to_string(u: &ScalarField) -> String {
    let mut s = format!("#field v1 n={}\n", u.values().len());
    for (id, v) in u.cloud().ids().iter().zip(u.values()) {
        let _ = writeln!(s, "{} {}", id.0, fmt_real(*v));
    }
    s
}

pub fn write_field(u: &ScalarField, out: &mut impl Write) -> Result<(), IoError> {
    out.write_all(field_to_string(u).as_bytes())?;
    Ok(())
}

/// Reads `id value` lines and binds them to `cloud`; every id must appear once.
pub fn read_field(input: impl BufRead, cloud: &Arc<PointCloud>) -> Result<ScalarField, IoError> {
    let mut pairs = Vec::new();
    for (k, l) in input.lines().enumerate() {
        let l = l?;
        let line = k + 1;
        let t = l.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let mut f = t.split_whitespace();
        let (Some(a), Some(b), None) = (f.next(), f.next(), f.next()) else {
            return Err(parse_err(line, "expected `id value`"));
        };
        let id = a
            .parse::<u64>()
            .map_err(|_| parse_err(line, format!("bad id `{a}`")))?;
        pairs.push((PointId(id), real(b, line, "value")?));
    }
    Ok(ScalarField::from_pairs(cloud, pairs)?)
}

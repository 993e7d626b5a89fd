use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

/// Reads an ASCII XYZ file (`x y z [label]` per line) or an ASCII PLY file
/// with `x`, `y`, `z` and an optional integer `label` vertex property. PLY is
/// detected by its `ply` magic line. Loaded clouds carry a constant-1
/// feature.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    if text.lines().next().map(str::trim) == Some("ply") {
        parse_ply(&text, path)
    } else {
        parse_xyz(&text, path)
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn finish(path: &Path, points: Vec<Point3>, labels: Vec<usize>) -> Result<PointCloud> {
    if points.is_empty() {
        return Err(parse_err(path, 0, "no points"));
    }
    let labels = if labels.is_empty() {
        None
    } else if labels.len() == points.len() {
        Some(labels)
    } else {
        return Err(parse_err(path, 0, "labels given for only some points"));
    };
    let n = points.len();
    PointCloud::new(points, Tensor::filled(n, 1, 1.0), labels)
}

pub fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 && toks.len() != 4 {
            return Err(parse_err(path, line_no, format!("expected 3 or 4 values, found {}", toks.len())));
        }
        let mut xyz = [0.0; 3];
        for (v, t) in xyz.iter_mut().zip(&toks) {
            *v = t
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("`{t}` is not a number")))?;
        }
        points.push(Point3::from(xyz));
        if let Some(t) = toks.get(3) {
            labels.push(
                t.parse()
                    .map_err(|_| parse_err(path, line_no, format!("`{t}` is not a label")))?,
            );
        }
    }
    finish(path, points, labels)
}

fn parse_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    let mut vertex_count = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    let mut header_done = false;
    for (i, line) in lines.by_ref() {
        let line_no = i + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["ply"] | [] => {}
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(parse_err(path, line_no, format!("unsupported PLY format `{other}`"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                vertex_count = Some(
                    n.parse::<usize>()
                        .map_err(|_| parse_err(path, line_no, "bad vertex count"))?,
                );
                in_vertex = true;
            }
            ["element", name, n] => {
                if n.parse::<usize>().ok() != Some(0) {
                    return Err(parse_err(path, line_no, format!("unsupported PLY element `{name}`")));
                }
                in_vertex = false;
            }
            ["property", "list", ..] if in_vertex => {
                return Err(parse_err(path, line_no, "list properties on vertices are not supported"))
            }
            ["property", _, name] if in_vertex => props.push(name.to_string()),
            ["property", ..] => {}
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(parse_err(path, line_no, format!("unexpected header line `{line}`"))),
        }
    }
    if !header_done {
        return Err(parse_err(path, 0, "missing end_header"));
    }
    let n = vertex_count.ok_or_else(|| parse_err(path, 0, "no vertex element"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (x, y, z) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(parse_err(path, 0, "vertex element lacks x/y/z")),
    };
    let label = col("label");
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::new();
    for (i, line) in lines {
        if points.len() == n {
            break;
        }
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != props.len() {
            return Err(parse_err(
                path,
                line_no,
                format!("expected {} values, found {}", props.len(), toks.len()),
            ));
        }
        let num = |c: usize| -> Result<f64> {
            toks[c]
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("`{}` is not a number", toks[c])))
        };
        points.push(Point3::new(num(x)?, num(y)?, num(z)?));
        if let Some(l) = label {
            labels.push(
                toks[l]
                    .parse()
                    .map_err(|_| parse_err(path, line_no, format!("`{}` is not a label", toks[l])))?,
            );
        }
    }
    if points.len() != n {
        return Err(parse_err(path, 0, format!("expected {n} vertices, found {}", points.len())));
    }
    finish(path, points, labels)
}

fn fmt_point(s: &mut String, p: &Point3) {
    write!(s, "{:?} {:?} {:?}", p.x, p.y, p.z).expect("writing to a string");
}

pub fn save_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut s = String::new();
    for (i, p) in cloud.points().iter().enumerate() {
        fmt_point(&mut s, p);
        if let Some(l) = cloud.labels() {
            write!(s, " {}", l[i]).expect("writing to a string");
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn save_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n",
        cloud.len()
    );
    if cloud.labels().is_some() {
        s.push_str("property int label\n");
    }
    s.push_str("end_header\n");
    for (i, p) in cloud.points().iter().enumerate() {
        fmt_point(&mut s, p);
        if let Some(l) = cloud.labels() {
            write!(s, " {}", l[i]).expect("writing to a string");
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Reads a manifest of `path label` lines; relative paths are resolved
/// against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<(PathBuf, usize)>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (file, label) = line
            .rsplit_once(char::is_whitespace)
            .ok_or_else(|| parse_err(path, i + 1, "expected `path label`"))?;
        let label = label
            .parse()
            .map_err(|_| parse_err(path, i + 1, format!("`{label}` is not a label")))?;
        out.push((base.join(file.trim()), label));
    }
    Ok(out)
}

pub fn save_manifest(entries: &[(PathBuf, usize)], path: &Path) -> Result<()> {
    let mut s = String::new();
    for (p, l) in entries {
        writeln!(s, "{} {l}", p.display()).expect("writing to a string");
    }
    fs::write(path, s)?;
    Ok(())
}

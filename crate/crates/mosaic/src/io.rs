//! ASCII PLY point clouds and the line-oriented pose-graph format.
//!
//! Graph files hold three record kinds, whitespace-delimited, one per line:
//!
//! ```text
//! VERTEX <id> <tx> <ty> <tz> <r00> <r01> ... <r22>
//! EDGE <i> <j> <tx> <ty> <tz> <r00> ... <r22> <inliers> <weight> <overlap>
//! CORR <i> <j> <xi> <yi> <zi> <xj> <yj> <zj> [<label>]
//! ```
//!
//! `CORR` lines belong to the `EDGE` line above them. Rotations are row-major.
//! Lines starting with `#` are comments. Floats are written with 17
//! significant digits so a write/read round trip is exact.

use std::fmt::Write as _;
use std::path::Path;

use mosaic_core::geometry::{Mat3, RigidTransform, Rotation, Vec3};
use mosaic_core::graph::{CorrespondenceSet, Edge, PoseGraph, Vertex};

use crate::error::{Error, Result};

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

const PLY_SCALARS: &[&str] = &[
    "char", "uchar", "short", "ushort", "int", "uint", "float", "double", "int8", "uint8", "int16",
    "uint16", "int32", "uint32", "float32", "float64",
];

/// Parses an ASCII PLY file with a single `vertex` element.
///
/// Extra scalar vertex properties are ignored. Binary formats, list
/// properties and other elements with a non-zero count are rejected.
pub fn parse_ply(text: &str) -> Result<Vec<Vec3>> {
    let mut lines = text.lines().enumerate().map(|(k, l)| (k + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(Error::parse(1, "missing `ply` magic")),
    }
    let mut ascii = false;
    let mut count: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    let mut header_done = false;
    for (ln, line) in lines.by_ref() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => ascii = true,
            ["format", other, ..] => {
                return Err(Error::parse(
                    ln,
                    format!("unsupported PLY format `{other}`"),
                ))
            }
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(Error::parse(ln, "duplicate vertex element"));
                }
                count = Some(
                    n.parse()
                        .map_err(|_| Error::parse(ln, format!("bad vertex count `{n}`")))?,
                );
                in_vertex = true;
            }
            ["element", name, n] => {
                if *n != "0" {
                    return Err(Error::parse(ln, format!("unsupported element `{name}`")));
                }
                in_vertex = false;
            }
            ["property", "list", ..] => {
                return Err(Error::parse(ln, "list properties are not supported"))
            }
            ["property", ty, name] => {
                if !PLY_SCALARS.contains(ty) {
                    return Err(Error::parse(ln, format!("unknown property type `{ty}`")));
                }
                if in_vertex {
                    props.push((*name).to_string());
                }
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => {
                return Err(Error::parse(
                    ln,
                    format!("unrecognized header line `{line}`"),
                ))
            }
        }
    }
    if !header_done {
        return Err(Error::parse(0, "missing `end_header`"));
    }
    if !ascii {
        return Err(Error::parse(0, "missing `format ascii 1.0`"));
    }
    let count = count.ok_or_else(|| Error::parse(0, "no vertex element"))?;
    let axis = |name: &str| {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| Error::parse(0, format!("vertex property `{name}` missing")))
    };
    let (ix, iy, iz) = (axis("x")?, axis("y")?, axis("z")?);
    let mut points = Vec::with_capacity(count);
    for (ln, line) in lines {
        if line.is_empty() {
            continue;
        }
        if points.len() == count {
            return Err(Error::parse(ln, "more vertex rows than declared"));
        }
        let values = line
            .split_whitespace()
            .map(|t| parse_f64(t, ln))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != props.len() {
            return Err(Error::parse(
                ln,
                format!("expected {} values, found {}", props.len(), values.len()),
            ));
        }
        points.push(Vec3::new(values[ix], values[iy], values[iz]));
    }
    if points.len() != count {
        return Err(Error::parse(
            0,
            format!("declared {count} vertices, found {}", points.len()),
        ));
    }
    Ok(points)
}

pub fn format_ply(points: &[Vec3]) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", points.len());
    s.push_str("property double x\nproperty double y\nproperty double z\nend_header\n");
    for p in points {
        let _ = writeln!(s, "{} {} {}", num(p.x), num(p.y), num(p.z));
    }
    s
}

pub fn read_ply(path: &Path) -> Result<Vec<Vec3>> {
    parse_ply(&read_text(path)?).map_err(|e| with_path(e, path))
}

pub fn write_ply(path: &Path, points: &[Vec3]) -> Result<()> {
    write_text(path, &format_ply(points))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

/// 17 significant digits.
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::parse(line, format!("bad number `{tok}`")))?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("non-finite value `{tok}`")));
    }
    Ok(v)
}

fn parse_usize(tok: &str, line: usize) -> Result<usize> {
    tok.parse()
        .map_err(|_| Error::parse(line, format!("bad integer `{tok}`")))
}

fn parse_pose(tok: &[&str], line: usize) -> Result<RigidTransform> {
    let v = tok
        .iter()
        .map(|t| parse_f64(t, line))
        .collect::<Result<Vec<f64>>>()?;
    let t = Vec3::new(v[0], v[1], v[2]);
    let m = Mat3::from_row_slice(&v[3..12]);
    let r = Rotation::from_matrix(m)
        .map_err(|_| Error::parse(line, "matrix is not a proper rotation"))?;
    Ok(RigidTransform::new(r, t))
}

fn push_pose(s: &mut String, p: &RigidTransform) {
    let t = p.translation;
    let _ = write!(s, " {} {} {}", num(t.x), num(t.y), num(t.z));
    let m = p.rotation.matrix();
    for r in 0..3 {
        for c in 0..3 {
            let _ = write!(s, " {}", num(m[(r, c)]));
        }
    }
}

/// Serializes `graph`; each entry of `header` becomes a `#` comment line.
pub fn format_graph(graph: &PoseGraph, header: &[String]) -> String {
    let mut s = String::new();
    for h in header {
        for line in h.lines() {
            let _ = writeln!(s, "# {line}");
        }
    }
    for v in &graph.vertices {
        let _ = write!(s, "VERTEX {}", v.id);
        push_pose(&mut s, &v.pose);
        s.push('\n');
    }
    for e in &graph.edges {
        let _ = write!(s, "EDGE {} {}", e.i, e.j);
        push_pose(&mut s, &e.relative);
        let _ = writeln!(
            s,
            " {} {} {}",
            e.inlier_count,
            num(e.weight),
            num(e.overlap_score)
        );
        let labels = e.correspondences.truth_labels.as_deref();
        for (k, (a, b)) in e.correspondences.pairs.iter().enumerate() {
            let _ = write!(
                s,
                "CORR {} {} {} {} {} {} {} {}",
                e.i,
                e.j,
                num(a.x),
                num(a.y),
                num(a.z),
                num(b.x),
                num(b.y),
                num(b.z)
            );
            if let Some(l) = labels {
                let _ = write!(s, " {}", u8::from(l[k]));
            }
            s.push('\n');
        }
    }
    s
}

struct PendingEdge {
    edge: Edge,
    pairs: Vec<(Vec3, Vec3)>,
    labels: Vec<bool>,
    line: usize,
}

impl PendingEdge {
    fn finish(self) -> Result<Edge> {
        let mut edge = self.edge;
        edge.correspondences = if self.labels.is_empty() {
            CorrespondenceSet::new(self.pairs)
        } else if self.labels.len() == self.pairs.len() {
            CorrespondenceSet::with_labels(self.pairs, self.labels)
        } else {
            return Err(Error::parse(
                self.line,
                "either all or none of an edge's CORR lines may carry labels",
            ));
        };
        Ok(edge)
    }
}

/// Parses the graph format. Vertex 0 becomes the anchor; ids must be dense.
pub fn parse_graph(text: &str) -> Result<PoseGraph> {
    let mut vertices: Vec<Vertex> = Vec::new();
    let mut edges: Vec<Edge> = Vec::new();
    let mut pending: Option<PendingEdge> = None;
    for (k, raw) in text.lines().enumerate() {
        let ln = k + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok[0] {
            "VERTEX" => {
                if tok.len() != 14 {
                    return Err(Error::parse(ln, "VERTEX takes an id and 12 numbers"));
                }
                vertices.push(Vertex {
                    id: parse_usize(tok[1], ln)?,
                    pose: parse_pose(&tok[2..14], ln)?,
                    fixed: false,
                });
            }
            "EDGE" => {
                if tok.len() != 18 {
                    return Err(Error::parse(
                        ln,
                        "EDGE takes two ids, 12 numbers, inliers, weight and overlap",
                    ));
                }
                if let Some(p) = pending.take() {
                    edges.push(p.finish()?);
                }
                let weight = parse_f64(tok[16], ln)?;
                let overlap = parse_f64(tok[17], ln)?;
                if weight < 0.0 {
                    return Err(Error::parse(ln, "negative edge weight"));
                }
                if !(0.0..=1.0).contains(&overlap) {
                    return Err(Error::parse(ln, "overlap score outside [0, 1]"));
                }
                pending = Some(PendingEdge {
                    edge: Edge {
                        i: parse_usize(tok[1], ln)?,
                        j: parse_usize(tok[2], ln)?,
                        relative: parse_pose(&tok[3..15], ln)?,
                        correspondences: CorrespondenceSet::default(),
                        inlier_count: parse_usize(tok[15], ln)?,
                        weight,
                        overlap_score: overlap,
                    },
                    pairs: Vec::new(),
                    labels: Vec::new(),
                    line: ln,
                });
            }
            "CORR" => {
                if tok.len() != 9 && tok.len() != 10 {
                    return Err(Error::parse(
                        ln,
                        "CORR takes two ids, 6 numbers and an optional label",
                    ));
                }
                let p = pending
                    .as_mut()
                    .ok_or_else(|| Error::parse(ln, "CORR before any EDGE"))?;
                let (i, j) = (parse_usize(tok[1], ln)?, parse_usize(tok[2], ln)?);
                if (i, j) != (p.edge.i, p.edge.j) {
                    return Err(Error::parse(
                        ln,
                        format!("CORR {i} {j} does not follow its EDGE"),
                    ));
                }
                let v = tok[3..9]
                    .iter()
                    .map(|t| parse_f64(t, ln))
                    .collect::<Result<Vec<f64>>>()?;
                p.pairs
                    .push((Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5])));
                if let Some(l) = tok.get(9) {
                    p.labels.push(match *l {
                        "0" => false,
                        "1" => true,
                        other => return Err(Error::parse(ln, format!("bad label `{other}`"))),
                    });
                }
            }
            other => return Err(Error::parse(ln, format!("unknown record `{other}`"))),
        }
    }
    if let Some(p) = pending.take() {
        edges.push(p.finish()?);
    }
    vertices.sort_by_key(|v| v.id);
    for (k, v) in vertices.iter_mut().enumerate() {
        if v.id != k {
            return Err(Error::parse(
                0,
                format!("vertex ids are not dense at {}", v.id),
            ));
        }
        v.fixed = k == 0;
    }
    let n = vertices.len();
    for e in &edges {
        if e.i >= n || e.j >= n {
            return Err(Error::parse(
                0,
                format!("edge ({}, {}) references a missing vertex", e.i, e.j),
            ));
        }
        if e.inlier_count > e.correspondences.len() && !e.correspondences.is_empty() {
            return Err(Error::parse(
                0,
                format!(
                    "edge ({}, {}) has more inliers than correspondences",
                    e.i, e.j
                ),
            ));
        }
    }
    Ok(PoseGraph { vertices, edges })
}

pub fn read_graph(path: &Path) -> Result<PoseGraph> {
    parse_graph(&read_text(path)?).map_err(|e| with_path(e, path))
}

pub fn write_graph(path: &Path, graph: &PoseGraph, header: &[String]) -> Result<()> {
    write_text(path, &format_graph(graph, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mosaic_core::frontend::generate_scene;
    use mosaic_core::geometry::AxisAngle;

    #[test]
    fn ply_round_trip() {
        let pts = vec![
            Vec3::new(0.1, -2.5, 3.0),
            Vec3::new(1.0 / 3.0, 1e-300, -0.0),
        ];
        assert_eq!(parse_ply(&format_ply(&pts)).unwrap(), pts);
    }

    #[test]
    fn ply_extra_properties_and_empty_faces() {
        let text = "ply\nformat ascii 1.0\ncomment x\nelement vertex 2\nproperty float nx\n\
                    property float x\nproperty float y\nproperty float z\nelement face 0\n\
                    property list uchar int vertex_indices\nend_header\n9 1 2 3\n9 4 5 6\n";
        // List properties are rejected even on empty elements.
        assert!(parse_ply(text).is_err());
        let text = text.replace("property list uchar int vertex_indices\n", "");
        let pts = parse_ply(&text).unwrap();
        assert_eq!(
            pts,
            vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.0, 5.0, 6.0)]
        );
    }

    #[test]
    fn ply_rejects_malformed() {
        let ok = format_ply(&[Vec3::new(1.0, 2.0, 3.0)]);
        assert!(parse_ply(&ok.replace("ascii", "binary_little_endian")).is_err());
        assert!(parse_ply(&ok.replace("element vertex 1", "element vertex 2")).is_err());
        assert!(parse_ply(&ok.replace("property double z\n", "")).is_err());
        assert!(parse_ply(&ok.replace("end_header\n", "")).is_err());
        assert!(parse_ply(&format!("{ok}7 8 9\n")).is_err());
        assert!(parse_ply(&ok.replace("ply\n", "")).is_err());
    }

    #[test]
    fn graph_round_trip_is_exact() {
        let scene = generate_scene(4, 60, 0.5, 0.01, 0.3, 11).unwrap();
        let mut g = scene.truth_graph();
        for (k, e) in g.edges.iter_mut().enumerate() {
            e.weight = 1.0 / (k as f64 + 3.0);
            e.overlap_score = 0.1 * k as f64 % 1.0;
        }
        g.edges[1].correspondences.truth_labels = None;
        let text = format_graph(&g, &["seed = 11".into(), "two\nlines".into()]);
        assert!(text.starts_with("# seed = 11\n# two\n# lines\n"));
        let back = parse_graph(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(format_graph(&back, &[]), format_graph(&g, &[]));
    }

    #[test]
    fn graph_rejects_malformed() {
        let g = PoseGraph {
            vertices: (0..2)
                .map(|id| Vertex {
                    id,
                    pose: RigidTransform::new(
                        AxisAngle(Vec3::new(0.1, 0.2, 0.3 * id as f64)).exp(),
                        Vec3::new(1.0, 2.0, 3.0),
                    ),
                    fixed: id == 0,
                })
                .collect(),
            edges: vec![Edge {
                i: 0,
                j: 1,
                relative: RigidTransform::identity(),
                correspondences: CorrespondenceSet::new(vec![(Vec3::zeros(), Vec3::zeros())]),
                inlier_count: 1,
                weight: 1.0,
                overlap_score: 0.5,
            }],
        };
        let ok = format_graph(&g, &[]);
        assert_eq!(parse_graph(&ok).unwrap(), g);
        assert!(parse_graph(&format!("{ok}POINT 1 2 3\n")).is_err());
        assert!(parse_graph(&ok.replace("CORR 0 1", "CORR 1 0")).is_err());
        assert!(parse_graph(&ok.replace("VERTEX 1", "VERTEX 2")).is_err());
        assert!(
            parse_graph(&ok.replace(" 1 1.0000000000000000e0 5", " 2 1.0000000000000000e0 5"))
                .is_err()
        );
        let corr_first: String = ok
            .lines()
            .filter(|l| l.starts_with("CORR"))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(parse_graph(&corr_first).is_err());
        assert!(parse_graph(&format!("{ok}CORR 0 1 0 0 0 0 0 0 1\n")).is_err());
        assert!(parse_graph(&ok.replace("VERTEX 0 1.0", "VERTEX 0 nan")).is_err());
    }
}

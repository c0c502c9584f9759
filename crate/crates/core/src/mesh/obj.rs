use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::Mesh;
use crate::error::{Error, Result};

pub fn load_obj(path: impl AsRef<Path>) -> Result<Mesh> {
    let text = fs::read_to_string(path)?;
    parse_obj(&text)
}

/// Parse ASCII OBJ `v` and `f` records. Polygons are fan-triangulated;
/// texture/normal sub-indices and all other record types are ignored.
pub fn parse_obj(text: &str) -> Result<Mesh> {
    let mut vertices = Vec::new();
    // (line, absolute 0-based index or unresolved negative index)
    let mut polygons: Vec<(usize, Vec<usize>)> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut fields = content.split_whitespace();
        match fields.next() {
            Some("v") => {
                let coords: Vec<f64> = fields
                    .take(3)
                    .map(|s| {
                        s.parse::<f64>().map_err(|_| Error::Parse {
                            line,
                            msg: format!("bad coordinate '{s}'"),
                        })
                    })
                    .collect::<Result<_>>()?;
                if coords.len() != 3 {
                    return Err(Error::Parse {
                        line,
                        msg: "vertex needs three coordinates".into(),
                    });
                }
                vertices.push([coords[0], coords[1], coords[2]]);
            }
            Some("f") => {
                let mut idx = Vec::new();
                for field in fields {
                    let head = field.split('/').next().unwrap_or("");
                    let raw: i64 = head.parse().map_err(|_| Error::Parse {
                        line,
                        msg: format!("bad face index '{field}'"),
                    })?;
                    let resolved = match raw {
                        0 => {
                            return Err(Error::Parse {
                                line,
                                msg: "face index 0 is invalid".into(),
                            })
                        }
                        r if r > 0 => (r - 1) as usize,
                        r => {
                            let back = r.unsigned_abs() as usize;
                            if back > vertices.len() {
                                return Err(Error::Parse {
                                    line,
                                    msg: format!("relative index {r} before any such vertex"),
                                });
                            }
                            vertices.len() - back
                        }
                    };
                    idx.push(resolved);
                }
                if idx.len() < 3 {
                    return Err(Error::Parse {
                        line,
                        msg: "face needs at least three vertices".into(),
                    });
                }
                polygons.push((line, idx));
            }
            _ => {}
        }
    }

    let n = vertices.len();
    let mut faces = Vec::new();
    for (line, poly) in polygons {
        if let Some(&bad) = poly.iter().find(|&&i| i >= n) {
            return Err(Error::Parse {
                line,
                msg: format!("vertex index {} out of range (have {n})", bad + 1),
            });
        }
        for k in 1..poly.len() - 1 {
            faces.push([poly[0], poly[k], poly[k + 1]]);
        }
    }
    Ok(Mesh { vertices, faces })
}

/// Render a mesh as OBJ text; coordinates use shortest round-trip formatting.
pub fn write_obj(mesh: &Mesh) -> String {
    let mut out = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
    }
    for f in &mesh.faces {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

pub fn save_obj(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_obj(mesh))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_triangle() {
        let m = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3").unwrap();
        assert_eq!(m.vertices.len(), 3);
        assert_eq!(m.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn out_of_range_reports_line() {
        let err = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
    }

    #[test]
    fn quad_is_fan_triangulated() {
        let m = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn negative_and_slashed_indices() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvn 0 0 1\nf -3/1/1 -2//1 -1/1\n";
        let m = parse_obj(text).unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn malformed_vertex() {
        assert!(matches!(
            parse_obj("v 0 zero 0"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn single_triangle_file_layout() {
        let m = Mesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let text = write_obj(&m);
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 3);
        assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), 1);
    }

    #[test]
    fn empty_mesh_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.obj");
        save_obj(&Mesh::default(), &path).unwrap();
        assert_eq!(load_obj(&path).unwrap(), Mesh::default());
    }
}

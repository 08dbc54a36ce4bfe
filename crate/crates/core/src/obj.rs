//! Wavefront OBJ export and a minimal parser.
//!
//! Vertex colors use the common `v x y z r g b` extension.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::imaging::Rgb;
use crate::model::{Mesh, Triangle};

/// Serializes a mesh as OBJ text with 1-based face indices.
pub fn export_mesh(mesh: &Mesh, colors: Option<&[Rgb]>) -> Result<String> {
    if let Some(c) = colors {
        Error::check_dim("vertex colors", mesh.vertices.len(), c.len())?;
    }
    let mut out = String::with_capacity(mesh.vertices.len() * 40 + mesh.triangles.len() * 20);
    for (i, v) in mesh.vertices.iter().enumerate() {
        match colors {
            Some(c) => {
                let [r, g, b] = c[i];
                writeln!(
                    out,
                    "v {:.7} {:.7} {:.7} {:.5} {:.5} {:.5}",
                    v.x, v.y, v.z, r, g, b
                )
            }
            None => writeln!(out, "v {:.7} {:.7} {:.7}", v.x, v.y, v.z),
        }
        .expect("writing to a String cannot fail");
    }
    for t in mesh.triangles.iter() {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)
            .expect("writing to a String cannot fail");
    }
    Ok(out)
}

pub fn save_mesh(path: impl AsRef<Path>, mesh: &Mesh, colors: Option<&[Rgb]>) -> Result<()> {
    let path = path.as_ref();
    let text = export_mesh(mesh, colors)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parsed OBJ content.
#[derive(Clone, Debug, Default)]
pub struct ObjData {
    pub vertices: Vec<Vector3<f64>>,
    pub colors: Option<Vec<Rgb>>,
    pub triangles: Vec<Triangle>,
}

impl ObjData {
    pub fn into_mesh(self) -> Mesh {
        Mesh::from_parts(self.vertices, self.triangles)
    }
}

/// Parses `v` and `f` records. Polygons are fan-triangulated; texture and
/// normal indices (`f 1/2/3 ...`) are ignored; negative indices are relative.
pub fn parse_obj(text: &str) -> Result<ObjData> {
    let bad = |line: usize, msg: &str| Error::Format {
        kind: "obj",
        message: format!("line {line}: {msg}"),
    };
    let mut data = ObjData::default();
    let mut colors = Vec::new();
    let mut colored = None;
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let mut it = raw.split_whitespace();
        match it.next() {
            Some("v") => {
                let nums: Vec<f64> = it
                    .map(|s| s.parse::<f64>().map_err(|_| bad(line, "bad number")))
                    .collect::<Result<_>>()?;
                let has_color = match nums.len() {
                    3 => false,
                    6 => true,
                    _ => return Err(bad(line, "vertex needs 3 or 6 values")),
                };
                if *colored.get_or_insert(has_color) != has_color {
                    return Err(bad(line, "mixed colored and uncolored vertices"));
                }
                data.vertices.push(Vector3::new(nums[0], nums[1], nums[2]));
                if has_color {
                    colors.push([nums[3], nums[4], nums[5]]);
                }
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|tok| {
                        let first = tok.split('/').next().unwrap_or("");
                        let i: i64 = first.parse().map_err(|_| bad(line, "bad index"))?;
                        let nv = data.vertices.len() as i64;
                        let resolved = if i < 0 { nv + i } else { i - 1 };
                        if resolved < 0 || resolved >= nv {
                            return Err(bad(line, "index out of range"));
                        }
                        Ok(resolved as usize)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(bad(line, "face needs at least 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    data.triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    if colored == Some(true) {
        data.colors = Some(colors);
    }
    Ok(data)
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<ObjData> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text).map_err(|e| match e {
        Error::Format { kind, message } => Error::Format {
            kind,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

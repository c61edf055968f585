//! File formats: ASCII OBJ surfaces, versioned JSON documents and CSV tables.
//!
//! Floats are written in Rust's shortest round-trip representation and read
//! back with correctly rounded parsing, so write→read reproduces every
//! coordinate bit-for-bit.
//!
//! JSON documents carry a `"schema"` tag:
//!
//! * `hexhierarchy-v1`: `levels` (each `vertices`, `cells` as 8-tuples in
//!   bit-ordered reference-cube order, `boundary_faces` with `vertices` and
//!   `patch`), `parent_maps` (child cell → parent cell, one per refined
//!   level) and `boundary_flags`. Level `k` vertices prefix level `k + 1`.
//! * `centerline-v1`: `points` and `radii`.
//! * `field-v1`: `mesh` (`kind`, `vertex_count`, optional `id`), `units`
//!   (`m/s`, `Pa`, `mm`, `1`) and `values` (`{"kind": "scalar"|"vector", "data": [...]}`).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{CenterlineEncoding, HexHierarchy, HexMesh, NodalField, Patch, SurfaceMesh, Vec3};
use crate::error::{Error, Result};

/// A JSON document type with a fixed schema tag.
pub trait Document: Serialize + DeserializeOwned {
    const SCHEMA: &'static str;

    fn validate_doc(&self) -> Result<()> {
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct HexHierarchyDoc {
    levels: Vec<HexMesh>,
    parent_maps: Vec<Vec<usize>>,
    boundary_flags: Vec<Vec<bool>>,
}

impl Serialize for HexHierarchy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        HexHierarchyDoc {
            levels: self.levels.clone(),
            parent_maps: self.parent_maps.clone(),
            boundary_flags: self.boundary_flags.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for HexHierarchy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = HexHierarchyDoc::deserialize(d)?;
        Ok(HexHierarchy { levels: doc.levels, parent_maps: doc.parent_maps, boundary_flags: doc.boundary_flags })
    }
}

impl Document for HexHierarchy {
    const SCHEMA: &'static str = "hexhierarchy-v1";

    fn validate_doc(&self) -> Result<()> {
        self.validate()
    }
}

impl Document for CenterlineEncoding {
    const SCHEMA: &'static str = "centerline-v1";

    fn validate_doc(&self) -> Result<()> {
        self.validate()
    }
}

impl Document for NodalField {
    const SCHEMA: &'static str = "field-v1";

    fn validate_doc(&self) -> Result<()> {
        if self.values.len() != self.mesh.vertex_count {
            return Err(Error::Schema("field value count differs from mesh vertex count".into()));
        }
        Ok(())
    }
}

pub fn to_json_string<T: Document>(doc: &T) -> Result<String> {
    let mut value = serde_json::to_value(doc).map_err(|e| Error::Schema(e.to_string()))?;
    match &mut value {
        Value::Object(map) => {
            map.insert("schema".into(), Value::String(T::SCHEMA.into()));
        }
        _ => return Err(Error::Schema("document must serialize to an object".into())),
    }
    serde_json::to_string(&value).map_err(|e| Error::Schema(e.to_string()))
}

pub fn from_json_str<T: Document>(text: &str) -> Result<T> {
    let mut value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: format!("{e}"),
    })?;
    let found = value
        .get("schema")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Schema("missing \"schema\" tag".into()))?
        .to_string();
    if found != T::SCHEMA {
        return Err(Error::SchemaVersion { expected: T::SCHEMA.into(), found });
    }
    if let Value::Object(map) = &mut value {
        map.remove("schema");
    }
    let doc: T = serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
    doc.validate_doc()?;
    Ok(doc)
}

pub fn write_json<T: Document>(path: impl AsRef<Path>, doc: &T) -> Result<()> {
    fs::write(path, to_json_string(doc)?)?;
    Ok(())
}

pub fn read_json<T: Document>(path: impl AsRef<Path>) -> Result<T> {
    from_json_str(&fs::read_to_string(path)?)
}

/// OBJ text with `v`, optional `vn`, `g <patch>` groups and `f` triangles.
pub fn obj_to_string(mesh: &SurfaceMesh) -> String {
    let mut out = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
    }
    if let Some(normals) = &mesh.normals {
        for n in normals {
            let _ = writeln!(out, "vn {} {} {}", n.x, n.y, n.z);
        }
    }
    let mut current: Option<&Patch> = None;
    for (tri, patch) in mesh.triangles.iter().zip(&mesh.patches) {
        if current != Some(patch) {
            let _ = writeln!(out, "g {patch}");
            current = Some(patch);
        }
        let _ = writeln!(out, "f {} {} {}", tri[0] + 1, tri[1] + 1, tri[2] + 1);
    }
    out
}

pub fn obj_from_str(text: &str) -> Result<SurfaceMesh> {
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut triangles = Vec::new();
    let mut patches = Vec::new();
    let mut patch = Patch::Wall;
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let err = |msg: String| Error::Parse { line, msg };
        let mut tok = raw.split_whitespace();
        match tok.next() {
            Some("v") | Some("vn") => {
                let xyz: Vec<f64> = tok
                    .take(3)
                    .map(|t| t.parse::<f64>().map_err(|e| err(format!("bad coordinate \"{t}\": {e}"))))
                    .collect::<Result<_>>()?;
                if xyz.len() != 3 {
                    return Err(err("expected three coordinates".into()));
                }
                let p = Vec3::new(xyz[0], xyz[1], xyz[2]);
                if raw.trim_start().starts_with("vn") {
                    normals.push(p);
                } else {
                    vertices.push(p);
                }
            }
            Some("f") => {
                let idx: Vec<usize> = tok
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        let i: i64 = head.parse().map_err(|_| err(format!("bad face index \"{t}\"")))?;
                        let n = vertices.len() as i64;
                        let zero_based = if i < 0 { n + i } else { i - 1 };
                        if zero_based < 0 || zero_based >= n {
                            return Err(err(format!("face index {i} out of range")));
                        }
                        Ok(zero_based as usize)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(err(format!("triangles only (face has {} vertices)", idx.len())));
                }
                triangles.push([idx[0], idx[1], idx[2]]);
                patches.push(patch.clone());
            }
            Some("g") => {
                let name = tok.next().ok_or_else(|| err("group without name".into()))?;
                patch = name.parse().map_err(|e: Error| err(e.to_string()))?;
            }
            _ => {}
        }
    }
    let mut mesh = SurfaceMesh { vertices, triangles, patches, normals: None };
    if !normals.is_empty() {
        mesh.normals = Some(normals);
    }
    mesh.validate()?;
    Ok(mesh)
}

pub fn write_obj(path: impl AsRef<Path>, mesh: &SurfaceMesh) -> Result<()> {
    fs::write(path, obj_to_string(mesh))?;
    Ok(())
}

pub fn read_obj(path: impl AsRef<Path>) -> Result<SurfaceMesh> {
    obj_from_str(&fs::read_to_string(path)?)
}

/// Writes a CSV table with a header row (RFC 4180 quoting).
pub fn write_csv<I, R, S>(path: impl AsRef<Path>, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV table: header and string records.
pub fn read_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((header, rows))
}

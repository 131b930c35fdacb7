//! OBJ and PLY reading and writing, plus the small text formats used by the
//! command line (landmarks, flows, masks).
//!
//! Meshes without faces are loaded as point clouds connected to their
//! [`DEFAULT_KNN`] nearest neighbours. Coordinates are written so that a save
//! followed by a load reproduces them bit for bit: OBJ uses Rust's shortest
//! round-trip decimal formatting and PLY is written as binary little-endian
//! doubles.
//!
//! A per-vertex scalar is stored as the PLY vertex property `quality`, or as
//! OBJ vertex colours `v x y z r g b` through a blue-to-red ramp
//! (see [`colormap`]) normalized by the largest scalar.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Surface, DEFAULT_KNN};
use crate::metrics::{parse_flows, Flow};
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Obj,
    Ply,
}

impl Format {
    pub fn from_path(path: &Path) -> Result<Format> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("obj") => Ok(Format::Obj),
            Some("ply") => Ok(Format::Ply),
            _ => Err(Error::InvalidInput(format!(
                "{}: unsupported mesh format (expected .obj or .ply)",
                path.display()
            ))),
        }
    }
}

/// Raw mesh data before edges are derived.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MeshData {
    pub points: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl MeshData {
    pub fn into_surface(self) -> Result<Surface> {
        if self.points.is_empty() {
            return Err(Error::Empty("mesh has no vertices"));
        }
        if self.faces.is_empty() {
            Surface::from_point_cloud(self.points, DEFAULT_KNN)
        } else {
            Surface::from_mesh(self.points, self.faces)
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_surface(path: &Path) -> Result<Surface> {
    let bytes = read_bytes(path)?;
    let data = match Format::from_path(path)? {
        Format::Obj => parse_obj(&bytes, path)?,
        Format::Ply => parse_ply(&bytes, path)?,
    };
    data.into_surface()
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Fan-triangulates a polygon.
fn push_polygon(faces: &mut Vec<[usize; 3]>, poly: &[usize]) {
    for k in 1..poly.len().saturating_sub(1) {
        faces.push([poly[0], poly[k], poly[k + 1]]);
    }
}

pub fn parse_obj(bytes: &[u8], path: &Path) -> Result<MeshData> {
    let text = std::str::from_utf8(bytes).map_err(|e| parse_err(path, 0, format!("not UTF-8: {e}")))?;
    let mut data = MeshData::default();
    let mut polys: Vec<(usize, Vec<i64>)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut fields = content.split_whitespace();
        match fields.next() {
            Some("v") => {
                let mut c = [0.0f64; 3];
                for slot in &mut c {
                    let tok = fields.next().ok_or_else(|| parse_err(path, line, "vertex needs 3 coordinates"))?;
                    *slot = tok
                        .parse()
                        .map_err(|e| parse_err(path, line, format!("bad coordinate `{tok}`: {e}")))?;
                    if !slot.is_finite() {
                        return Err(parse_err(path, line, format!("non-finite coordinate `{tok}`")));
                    }
                }
                data.points.push(Vec3::from(c));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in fields {
                    let head = tok.split('/').next().unwrap_or("");
                    let i: i64 = head
                        .parse()
                        .map_err(|e| parse_err(path, line, format!("bad face index `{tok}`: {e}")))?;
                    idx.push(i);
                }
                if idx.len() < 3 {
                    return Err(parse_err(path, line, "face needs at least 3 vertices"));
                }
                polys.push((line, idx));
            }
            _ => {}
        }
    }
    let n = data.points.len() as i64;
    for (line, idx) in polys {
        let mut poly = Vec::with_capacity(idx.len());
        for i in idx {
            // 1-based, negative indices count back from the last vertex read
            let resolved = if i > 0 { i - 1 } else { n + i };
            if i == 0 || resolved < 0 || resolved >= n {
                return Err(parse_err(path, line, format!("face index {i} out of range ({n} vertices)")));
            }
            poly.push(resolved as usize);
        }
        push_polygon(&mut data.faces, &poly);
    }
    Ok(data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Scalar> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyEncoding {
    Ascii,
    BinaryLe,
}

struct PlyHeader {
    encoding: PlyEncoding,
    elements: Vec<Element>,
    body_offset: usize,
    header_lines: usize,
}

fn parse_ply_header(bytes: &[u8], path: &Path) -> Result<PlyHeader> {
    let mut offset = 0;
    let mut line_no = 0;
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let end = bytes[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err(path, line_no + 1, "unterminated PLY header"))?;
        let raw = &bytes[offset..offset + end];
        offset += end + 1;
        line_no += 1;
        let line = std::str::from_utf8(raw)
            .map_err(|_| parse_err(path, line_no, "header is not ASCII"))?
            .trim();
        let fields: Vec<&str> = line.split_whitespace().collect();
        if line_no == 1 {
            if line != "ply" {
                return Err(parse_err(path, 1, "missing `ply` magic"));
            }
            continue;
        }
        match fields.first().copied() {
            Some("format") => {
                encoding = Some(match fields.get(1).copied() {
                    Some("ascii") => PlyEncoding::Ascii,
                    Some("binary_little_endian") => PlyEncoding::BinaryLe,
                    other => {
                        return Err(parse_err(
                            path,
                            line_no,
                            format!("unsupported PLY format {}", other.unwrap_or("(none)")),
                        ))
                    }
                });
            }
            Some("element") => {
                if fields.len() != 3 {
                    return Err(parse_err(path, line_no, "expected `element <name> <count>`"));
                }
                let count = fields[2]
                    .parse()
                    .map_err(|e| parse_err(path, line_no, format!("bad element count: {e}")))?;
                elements.push(Element {
                    name: fields[1].to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, line_no, "property before any element"))?;
                let ty = |s: &str| {
                    Scalar::parse(s).ok_or_else(|| parse_err(path, line_no, format!("unknown property type `{s}`")))
                };
                let prop = match fields.as_slice() {
                    ["property", "list", c, i, name] => Property::List {
                        name: name.to_string(),
                        count: ty(c)?,
                        item: ty(i)?,
                    },
                    ["property", t, name] => Property::Scalar {
                        name: name.to_string(),
                        ty: ty(t)?,
                    },
                    _ => return Err(parse_err(path, line_no, "malformed property line")),
                };
                el.properties.push(prop);
            }
            Some("end_header") => break,
            Some("comment") | Some("obj_info") | None => {}
            Some(other) => return Err(parse_err(path, line_no, format!("unexpected header keyword `{other}`"))),
        }
    }
    Ok(PlyHeader {
        encoding: encoding.ok_or_else(|| parse_err(path, line_no, "missing format line"))?,
        elements,
        body_offset: offset,
        header_lines: line_no,
    })
}

/// One element record: scalar values in property order, lists separately.
struct Record {
    scalars: Vec<f64>,
    lists: Vec<Vec<f64>>,
}

pub fn parse_ply(bytes: &[u8], path: &Path) -> Result<MeshData> {
    let header = parse_ply_header(bytes, path)?;
    let body = &bytes[header.body_offset..];
    let mut data = MeshData::default();

    let mut ascii_lines = match header.encoding {
        PlyEncoding::Ascii => Some(
            std::str::from_utf8(body)
                .map_err(|_| parse_err(path, header.header_lines + 1, "body is not ASCII"))?
                .lines()
                .enumerate()
                .map(|(i, l)| (header.header_lines + 1 + i, l))
                .filter(|(_, l)| !l.trim().is_empty()),
        ),
        PlyEncoding::BinaryLe => None,
    };
    let mut cursor = 0usize;

    for el in &header.elements {
        let xyz = if el.name == "vertex" {
            let pos = |axis: &str| {
                el.properties
                    .iter()
                    .filter(|p| matches!(p, Property::Scalar { .. }))
                    .position(|p| matches!(p, Property::Scalar { name, .. } if name == axis))
            };
            match (pos("x"), pos("y"), pos("z")) {
                (Some(x), Some(y), Some(z)) => Some([x, y, z]),
                _ => return Err(parse_err(path, header.header_lines, "vertex element lacks x, y, z")),
            }
        } else {
            None
        };
        let face_list = if el.name == "face" {
            el.properties
                .iter()
                .filter(|p| matches!(p, Property::List { .. }))
                .position(|p| matches!(p, Property::List { name, .. } if name == "vertex_indices" || name == "vertex_index"))
        } else {
            None
        };

        for _ in 0..el.count {
            let (record, line) = match ascii_lines.as_mut() {
                Some(lines) => {
                    let (line, text) = lines
                        .next()
                        .ok_or_else(|| parse_err(path, 0, format!("unexpected end of file in element `{}`", el.name)))?;
                    (read_ascii_record(el, text, line, path)?, Some(line))
                }
                None => (read_binary_record(el, body, &mut cursor, header.body_offset, path)?, None),
            };
            let fail = |msg: String| match line {
                Some(l) => parse_err(path, l, msg),
                None => Error::BinaryParse {
                    path: path.to_path_buf(),
                    offset: header.body_offset + cursor,
                    message: msg,
                },
            };
            if let Some([x, y, z]) = xyz {
                let p = Vec3::new(record.scalars[x], record.scalars[y], record.scalars[z]);
                if !p.iter().all(|v| v.is_finite()) {
                    return Err(fail("non-finite vertex coordinate".into()));
                }
                data.points.push(p);
            }
            if let Some(k) = face_list {
                let list = &record.lists[k];
                if list.len() < 3 {
                    return Err(fail("face needs at least 3 vertices".into()));
                }
                let poly: Vec<usize> = list.iter().map(|&v| v as usize).collect();
                if list.iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
                    return Err(fail("face index is not a non-negative integer".into()));
                }
                push_polygon(&mut data.faces, &poly);
            }
        }
    }
    let n = data.points.len();
    if let Some(bad) = data.faces.iter().flatten().find(|&&i| i >= n) {
        return Err(parse_err(path, 0, format!("face index {bad} out of range ({n} vertices)")));
    }
    Ok(data)
}

fn read_ascii_record(el: &Element, text: &str, line: usize, path: &Path) -> Result<Record> {
    let mut tokens = text.split_whitespace();
    let mut next = |what: &str| -> Result<f64> {
        let tok = tokens
            .next()
            .ok_or_else(|| parse_err(path, line, format!("missing value for `{what}`")))?;
        tok.parse()
            .map_err(|e| parse_err(path, line, format!("bad value `{tok}` for `{what}`: {e}")))
    };
    let mut record = Record {
        scalars: Vec::new(),
        lists: Vec::new(),
    };
    for p in &el.properties {
        match p {
            Property::Scalar { name, .. } => record.scalars.push(next(name)?),
            Property::List { name, .. } => {
                let count = next(name)?;
                if count < 0.0 || count.fract() != 0.0 {
                    return Err(parse_err(path, line, format!("bad list length {count}")));
                }
                let items = (0..count as usize).map(|_| next(name)).collect::<Result<Vec<_>>>()?;
                record.lists.push(items);
            }
        }
    }
    Ok(record)
}

fn read_binary_record(el: &Element, body: &[u8], cursor: &mut usize, base: usize, path: &Path) -> Result<Record> {
    let mut take = |ty: Scalar| -> Result<f64> {
        let end = *cursor + ty.size();
        if end > body.len() {
            return Err(Error::BinaryParse {
                path: path.to_path_buf(),
                offset: base + *cursor,
                message: format!("unexpected end of file in element `{}`", el.name),
            });
        }
        let v = ty.read_le(&body[*cursor..end]);
        *cursor = end;
        Ok(v)
    };
    let mut record = Record {
        scalars: Vec::new(),
        lists: Vec::new(),
    };
    for p in &el.properties {
        match *p {
            Property::Scalar { ty, .. } => record.scalars.push(take(ty)?),
            Property::List { count, item, .. } => {
                let n = take(count)?;
                if n < 0.0 {
                    return Err(Error::BinaryParse {
                        path: path.to_path_buf(),
                        offset: base + *cursor,
                        message: format!("negative list length {n}"),
                    });
                }
                let items = (0..n as usize).map(|_| take(item)).collect::<Result<Vec<_>>>()?;
                record.lists.push(items);
            }
        }
    }
    Ok(record)
}

/// Blue (0) through green to red (1); inputs are clamped to `[0, 1]`.
pub fn colormap(t: f64) -> [f64; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 1.0 };
    if t < 0.5 {
        let s = 2.0 * t;
        [0.0, s, 1.0 - s]
    } else {
        let s = 2.0 * t - 1.0;
        [s, 1.0 - s, 0.0]
    }
}

pub fn save_surface(surface: &Surface, path: &Path, scalar: Option<&[f64]>) -> Result<()> {
    if let Some(s) = scalar {
        if s.len() != surface.len() {
            return Err(Error::DimensionMismatch {
                what: "per-vertex scalar",
                expected: surface.len(),
                actual: s.len(),
            });
        }
    }
    let bytes = match Format::from_path(path)? {
        Format::Obj => encode_obj(surface, scalar),
        Format::Ply => encode_ply(surface, scalar),
    };
    write_file(path, &bytes)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_obj(surface: &Surface, scalar: Option<&[f64]>) -> Vec<u8> {
    let mut out = Vec::new();
    let max = scalar
        .map(|s| s.iter().cloned().fold(0.0, f64::max))
        .unwrap_or(0.0);
    for (i, p) in surface.points().iter().enumerate() {
        write!(out, "v {} {} {}", p.x, p.y, p.z).unwrap();
        if let Some(s) = scalar {
            let c = colormap(if max > 0.0 { s[i] / max } else { 0.0 });
            write!(out, " {} {} {}", c[0], c[1], c[2]).unwrap();
        }
        out.push(b'\n');
    }
    for f in surface.faces().unwrap_or(&[]) {
        writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
    }
    out
}

pub fn encode_ply(surface: &Surface, scalar: Option<&[f64]>) -> Vec<u8> {
    let faces = surface.faces().unwrap_or(&[]);
    let mut out = Vec::new();
    writeln!(out, "ply\nformat binary_little_endian 1.0").unwrap();
    writeln!(out, "element vertex {}", surface.len()).unwrap();
    writeln!(out, "property double x\nproperty double y\nproperty double z").unwrap();
    if scalar.is_some() {
        writeln!(out, "property double quality").unwrap();
    }
    if !faces.is_empty() {
        writeln!(out, "element face {}\nproperty list uchar int vertex_indices", faces.len()).unwrap();
    }
    writeln!(out, "end_header").unwrap();
    for (i, p) in surface.points().iter().enumerate() {
        for v in p.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(s) = scalar {
            out.extend_from_slice(&s[i].to_le_bytes());
        }
    }
    for f in faces {
        out.push(3);
        for &v in f {
            out.extend_from_slice(&(v as i32).to_le_bytes());
        }
    }
    out
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// `src_index tgt_index` pairs, one per line.
pub fn load_landmarks(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| parse_err(path, n + 1, format!("bad index `{s}`: {e}")))
        };
        if f.len() != 2 {
            return Err(parse_err(path, n + 1, "expected `src_index tgt_index`"));
        }
        out.push((parse(f[0])?, parse(f[1])?));
    }
    Ok(out)
}

pub fn load_flows(path: &Path) -> Result<Vec<Flow>> {
    let text = read_text(path)?;
    parse_flows(&text).map_err(|(line, message)| parse_err(path, line, message))
}

/// Writes one `index flag` line per entry, `flag` being 0 or 1.
pub fn save_mask(path: &Path, mask: &[bool]) -> Result<()> {
    let mut out = String::with_capacity(mask.len() * 8);
    for (i, &m) in mask.iter().enumerate() {
        out.push_str(&format!("{i} {}\n", m as u8));
    }
    write_file(path, out.as_bytes())
}

pub fn load_mask(path: &Path) -> Result<Vec<bool>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let ok = f.len() == 2 && f[0].parse::<usize>().ok() == Some(out.len());
        let flag = match f.get(1).copied() {
            Some("0") => false,
            Some("1") => true,
            _ => return Err(parse_err(path, n + 1, "expected `index 0|1`")),
        };
        if !ok {
            return Err(parse_err(path, n + 1, format!("expected index {}", out.len())));
        }
        out.push(flag);
    }
    Ok(out)
}

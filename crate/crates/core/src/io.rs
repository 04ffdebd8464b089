//! Point-cloud files and case manifests.
//!
//! Clouds are read from whitespace-separated XYZ text or binary little-endian
//! PLY (vertex positions). A case manifest is a JSON document mapping FDI
//! labels to cloud files, optionally with a target cloud and a ground-truth
//! motion `{q: [w,x,y,z], t: [x,y,z], c: [x,y,z]}` per tooth.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geometry::{Dentition, PointCloud, RigidMotion, Tooth, ToothLabel, Vec3};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    Ply,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> CloudFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("ply") => CloudFormat::Ply,
            _ => CloudFormat::Xyz,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            CloudFormat::Xyz => "xyz",
            CloudFormat::Ply => "ply",
        }
    }
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    match CloudFormat::from_path(path) {
        CloudFormat::Xyz => read_xyz(path),
        CloudFormat::Ply => read_ply(path),
    }
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    match CloudFormat::from_path(path) {
        CloudFormat::Xyz => write_xyz(path, cloud),
        CloudFormat::Ply => write_ply(path, cloud),
    }
}

pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, format!("line {}: {e}", lineno + 1)))?;
        if vals.len() != 3 {
            return Err(Error::parse(path, format!("line {}: expected 3 coordinates", lineno + 1)));
        }
        points.push(Vec3::new(vals[0], vals[1], vals[2]));
    }
    PointCloud::new(points).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in cloud.points() {
        writeln!(w, "{} {} {}", p.x, p.y, p.z).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy)]
enum PlyScalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyScalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => PlyScalar::I8,
            "uchar" | "uint8" => PlyScalar::U8,
            "short" | "int16" => PlyScalar::I16,
            "ushort" | "uint16" => PlyScalar::U16,
            "int" | "int32" => PlyScalar::I32,
            "uint" | "uint32" => PlyScalar::U32,
            "float" | "float32" => PlyScalar::F32,
            "double" | "float64" => PlyScalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyScalar::I8 | PlyScalar::U8 => 1,
            PlyScalar::I16 | PlyScalar::U16 => 2,
            PlyScalar::I32 | PlyScalar::U32 | PlyScalar::F32 => 4,
            PlyScalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            PlyScalar::I8 => b[0] as i8 as f64,
            PlyScalar::U8 => b[0] as f64,
            PlyScalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            PlyScalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            PlyScalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyScalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyScalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyScalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

/// Reads the `vertex` element of a binary little-endian PLY file. Vertex
/// properties other than x/y/z are skipped; elements after `vertex` are ignored.
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = &bytes[..];
    let header_line = |r: &mut &[u8]| -> Result<String> {
        let end = r
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(path, "truncated header"))?;
        let line = String::from_utf8_lossy(&r[..end]).trim().to_string();
        *r = &r[end + 1..];
        Ok(line)
    };
    if header_line(&mut reader)? != "ply" {
        return Err(Error::parse(path, "missing 'ply' magic"));
    }
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut seen_vertex = false;
    let mut props: Vec<(String, PlyScalar)> = Vec::new();
    loop {
        let line = header_line(&mut reader)?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(Error::parse(path, format!("unsupported PLY format {fmt}")));
                }
            }
            ["element", name, count] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    if seen_vertex {
                        return Err(Error::parse(path, "duplicate vertex element"));
                    }
                    seen_vertex = true;
                    vertex_count = Some(
                        count
                            .parse::<usize>()
                            .map_err(|e| Error::parse(path, format!("vertex count: {e}")))?,
                    );
                } else if !seen_vertex {
                    return Err(Error::parse(path, "elements before 'vertex' are not supported"));
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(Error::parse(path, "list properties on vertices are not supported"));
            }
            ["property", ty, name] if in_vertex => {
                let scalar =
                    PlyScalar::parse(ty).ok_or_else(|| Error::parse(path, format!("unknown PLY type {ty}")))?;
                props.push((name.to_string(), scalar));
            }
            ["end_header"] => break,
            _ => {}
        }
    }
    let count = vertex_count.ok_or_else(|| Error::parse(path, "no vertex element"))?;
    let index_of = |n: &str| {
        props
            .iter()
            .position(|(p, _)| p == n)
            .ok_or_else(|| Error::parse(path, format!("vertex property '{n}' missing")))
    };
    let (ix, iy, iz) = (index_of("x")?, index_of("y")?, index_of("z")?);
    let mut offsets = Vec::with_capacity(props.len());
    let mut stride = 0;
    for (_, s) in &props {
        offsets.push(stride);
        stride += s.size();
    }
    let mut body = Vec::new();
    reader.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() < count * stride {
        return Err(Error::parse(path, "truncated vertex data"));
    }
    let mut points = Vec::with_capacity(count);
    for k in 0..count {
        let rec = &body[k * stride..(k + 1) * stride];
        let get = |i: usize| props[i].1.read(&rec[offsets[i]..]);
        points.push(Vec3::new(get(ix), get(iy), get(iz)));
    }
    PointCloud::new(points).map_err(|e| Error::parse(path, e.to_string()))
}

/// Writes vertex positions as `double` properties (lossless).
pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        cloud.len()
    )
    .map_err(io)?;
    for p in cloud.points() {
        for v in [p.x, p.y, p.z] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Initial (input) cloud, relative to the manifest's directory.
    pub cloud: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion: Option<RigidMotion>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub teeth: BTreeMap<ToothLabel, ManifestEntry>,
}

/// A case read back from its manifest.
#[derive(Clone, Debug)]
pub struct LoadedCase {
    pub initial: Dentition,
    pub target: Option<Dentition>,
    pub motions: Option<BTreeMap<ToothLabel, RigidMotion>>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn load_case(manifest_path: &Path) -> Result<LoadedCase> {
    let manifest: CaseManifest = read_json(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut initial = Vec::new();
    let mut target = Vec::new();
    let mut motions = BTreeMap::new();
    for (&label, entry) in &manifest.teeth {
        initial.push(Tooth::new(label, read_cloud(&dir.join(&entry.cloud))?)?);
        if let Some(t) = &entry.target {
            target.push(Tooth::new(label, read_cloud(&dir.join(t))?)?);
        }
        if let Some(m) = entry.motion {
            m.validate().map_err(|e| Error::parse(manifest_path, format!("tooth {label}: {e}")))?;
            motions.insert(label, m);
        }
    }
    let n = manifest.teeth.len();
    Ok(LoadedCase {
        initial: Dentition::new(initial)?,
        target: if target.len() == n && n > 0 {
            Some(Dentition::new(target)?)
        } else {
            None
        },
        motions: if motions.len() == n && n > 0 { Some(motions) } else { None },
    })
}

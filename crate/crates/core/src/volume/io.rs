//! Mesh (OBJ, binary PLY) and volume (`VXL1`) serialization.
//!
//! `VXL1` layout, all little-endian:
//!
//! ```text
//! magic      b"VXL1"
//! resolution u32
//! channels   u32
//! extent     f32 min, f32 max
//! tau        f32
//! truncation f32
//! kind       u8   (0 = dense, 1 = sparse)
//! dense:  resolution^3 * channels f32, channel-planar, x fastest
//! sparse: count u32, count * 3 u16 voxel coordinates (i, j, k),
//!         then count * channels f32 values (voxel-major)
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Vec3;

use super::grid::{DenseVolume, SparseVolume, VolumeSpec, Voxel};
use super::mesh::{TriMesh, EXTENT_HALF};

const VXL_MAGIC: &[u8; 4] = b"VXL1";

/// A deserialized `VXL1` volume.
#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    Dense(DenseVolume),
    Sparse(SparseVolume),
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    let mut buf = Vec::new();
    encode_volume(vol, &mut buf)?;
    let mut w = create(path)?;
    w.write_all(&buf)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let mut bytes = Vec::new();
    open(path)?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes).map_err(|m| Error::format(path, m))
}

pub fn encode_volume(vol: &Volume, out: &mut Vec<u8>) -> Result<()> {
    let (spec, channels, kind) = match vol {
        Volume::Dense(d) => (d.spec, d.channels, 0u8),
        Volume::Sparse(s) => (s.spec, s.width, 1u8),
    };
    out.extend_from_slice(VXL_MAGIC);
    out.extend_from_slice(&(spec.resolution as u32).to_le_bytes());
    out.extend_from_slice(&(channels as u32).to_le_bytes());
    out.extend_from_slice(&(-EXTENT_HALF as f32).to_le_bytes());
    out.extend_from_slice(&(EXTENT_HALF as f32).to_le_bytes());
    out.extend_from_slice(&spec.tau.to_le_bytes());
    out.extend_from_slice(&spec.truncation.to_le_bytes());
    out.push(kind);
    match vol {
        Volume::Dense(d) => {
            for v in &d.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Volume::Sparse(s) => {
            if spec.resolution > u16::MAX as usize + 1 {
                return Err(Error::InvalidArgument(
                    "sparse VXL1 stores 16-bit coordinates".into(),
                ));
            }
            out.extend_from_slice(&(s.indices.len() as u32).to_le_bytes());
            for v in &s.indices {
                for c in v {
                    out.extend_from_slice(&(*c as u16).to_le_bytes());
                }
            }
            for v in &s.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> std::result::Result<f32, String> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
}

pub fn decode_volume(bytes: &[u8]) -> std::result::Result<Volume, String> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != VXL_MAGIC {
        return Err("bad magic, expected VXL1".into());
    }
    let resolution = c.u32()? as usize;
    let channels = c.u32()? as usize;
    let (lo, hi) = (c.f32()?, c.f32()?);
    if lo != -EXTENT_HALF as f32 || hi != EXTENT_HALF as f32 {
        return Err(format!("unsupported extent [{lo}, {hi}]"));
    }
    let tau = c.f32()?;
    let truncation = c.f32()?;
    let spec = VolumeSpec::with_thresholds(resolution, tau, truncation).map_err(|e| e.to_string())?;
    let kind = c.take(1)?[0];
    let vol = match kind {
        0 => {
            let n = spec.num_cells() * channels;
            let data = (0..n).map(|_| c.f32()).collect::<std::result::Result<_, _>>()?;
            Volume::Dense(DenseVolume::from_data(spec, channels, data).map_err(|e| e.to_string())?)
        }
        1 => {
            let count = c.u32()? as usize;
            let mut indices: Vec<Voxel> = Vec::with_capacity(count);
            for _ in 0..count {
                indices.push([c.u16()? as u32, c.u16()? as u32, c.u16()? as u32]);
            }
            let values = (0..count * channels)
                .map(|_| c.f32())
                .collect::<std::result::Result<_, _>>()?;
            Volume::Sparse(
                SparseVolume::new(spec, indices, channels, values).map_err(|e| e.to_string())?,
            )
        }
        k => return Err(format!("unknown volume kind {k}")),
    };
    if c.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - c.pos));
    }
    Ok(vol)
}

fn to_u8(c: f32) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// OBJ with colors as `v x y z r g b`.
pub fn write_obj(path: &Path, mesh: &TriMesh) -> Result<()> {
    let mut w = create(path)?;
    let mut body = String::new();
    for (i, v) in mesh.vertices.iter().enumerate() {
        match &mesh.colors {
            Some(c) => body.push_str(&format!(
                "v {} {} {} {} {} {}\n",
                v.x, v.y, v.z, c[i][0], c[i][1], c[i][2]
            )),
            None => body.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z)),
        }
    }
    for t in &mesh.triangles {
        body.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
    }
    w.write_all(body.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_obj(path: &Path) -> Result<TriMesh> {
    let r = open(path)?;
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let mut triangles = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::format(path, format!("line {}: {m}", n + 1));
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let nums: Vec<f64> = parts
                    .map(|s| s.parse::<f64>().map_err(|_| bad("bad number")))
                    .collect::<Result<_>>()?;
                match nums.len() {
                    3 => vertices.push(Vec3::new(nums[0], nums[1], nums[2])),
                    6 => {
                        vertices.push(Vec3::new(nums[0], nums[1], nums[2]));
                        colors.push([nums[3] as f32, nums[4] as f32, nums[5] as f32]);
                    }
                    _ => return Err(bad("vertex needs 3 or 6 numbers")),
                }
            }
            Some("f") => {
                let idx: Vec<u32> = parts
                    .map(|s| {
                        let first = s.split('/').next().unwrap_or("");
                        first
                            .parse::<u32>()
                            .ok()
                            .and_then(|i| i.checked_sub(1))
                            .ok_or_else(|| bad("bad face index"))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(bad("face needs 3 indices"));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    let mut mesh = TriMesh::new(vertices, triangles);
    if !colors.is_empty() {
        if colors.len() != mesh.vertices.len() {
            return Err(Error::format(path, "colors given for only some vertices"));
        }
        mesh.colors = Some(colors);
    }
    mesh.validate()?;
    Ok(mesh)
}

/// Binary little-endian PLY: `double x y z`, `uchar red green blue` when
/// colored, faces as `uchar` count + `int` indices.
pub fn write_ply(path: &Path, mesh: &TriMesh) -> Result<()> {
    let mut out = Vec::new();
    encode_ply(mesh, &mut out);
    let mut w = create(path)?;
    w.write_all(&out)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn encode_ply(mesh: &TriMesh, out: &mut Vec<u8>) {
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", mesh.vertices.len()));
    header.push_str("property double x\nproperty double y\nproperty double z\n");
    if mesh.colors.is_some() {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    header.push_str(&format!("element face {}\n", mesh.triangles.len()));
    header.push_str("property list uchar int vertex_indices\nend_header\n");
    out.extend_from_slice(header.as_bytes());
    for (i, v) in mesh.vertices.iter().enumerate() {
        for c in v.to_array() {
            out.extend_from_slice(&c.to_le_bytes());
        }
        if let Some(colors) = &mesh.colors {
            out.extend(colors[i].map(to_u8));
        }
    }
    for t in &mesh.triangles {
        out.push(3);
        for &i in t {
            out.extend_from_slice(&(i as i32).to_le_bytes());
        }
    }
}

/// Reads the binary PLY layout written by [`write_ply`] (float or double
/// positions, optional uchar colors).
pub fn read_ply(path: &Path) -> Result<TriMesh> {
    let mut bytes = Vec::new();
    open(path)?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode_ply(&bytes).map_err(|m| Error::format(path, m))
}

pub fn decode_ply(bytes: &[u8]) -> std::result::Result<TriMesh, String> {
    const END: &[u8] = b"end_header\n";
    let header_end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or("missing end_header")?
        + END.len();
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| "non-utf8 header")?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err("not a PLY file".into());
    }
    let (mut nv, mut nf) = (0usize, 0usize);
    let mut element = "";
    let mut pos_size = 0usize;
    let mut vertex_props: Vec<String> = Vec::new();
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", fmt, _] if *fmt != "binary_little_endian" => {
                return Err(format!("unsupported PLY format {fmt}"))
            }
            ["element", "vertex", n] => {
                element = "vertex";
                nv = n.parse().map_err(|_| "bad vertex count")?;
            }
            ["element", "face", n] => {
                element = "face";
                nf = n.parse().map_err(|_| "bad face count")?;
            }
            ["property", ty, name] if element == "vertex" => {
                if ["x", "y", "z"].contains(name) {
                    pos_size = match *ty {
                        "double" => 8,
                        "float" => 4,
                        _ => return Err(format!("unsupported position type {ty}")),
                    };
                } else if *ty != "uchar" {
                    return Err(format!("unsupported vertex property {ty} {name}"));
                }
                vertex_props.push(name.to_string());
            }
            ["property", "list", "uchar", "int", _] if element == "face" => {}
            ["property", ..] if element == "face" => return Err("unsupported face list type".into()),
            _ => {}
        }
    }
    let has_color = vertex_props.iter().any(|p| p == "red");
    let expected: Vec<&str> = if has_color {
        vec!["x", "y", "z", "red", "green", "blue"]
    } else {
        vec!["x", "y", "z"]
    };
    if vertex_props != expected {
        return Err(format!("unsupported vertex layout {vertex_props:?}"));
    }
    let mut c = Cursor {
        bytes,
        pos: header_end,
    };
    let mut vertices = Vec::with_capacity(nv);
    let mut colors = Vec::with_capacity(if has_color { nv } else { 0 });
    for _ in 0..nv {
        let mut p = [0.0; 3];
        for v in &mut p {
            *v = if pos_size == 8 {
                f64::from_le_bytes(c.take(8)?.try_into().unwrap())
            } else {
                f32::from_le_bytes(c.take(4)?.try_into().unwrap()) as f64
            };
        }
        vertices.push(Vec3::from_array(p));
        if has_color {
            let rgb = c.take(3)?;
            colors.push([rgb[0], rgb[1], rgb[2]].map(|b| b as f32 / 255.0));
        }
    }
    let mut triangles = Vec::with_capacity(nf);
    for _ in 0..nf {
        let k = c.take(1)?[0] as usize;
        let idx: Vec<u32> = (0..k)
            .map(|_| c.take(4).map(|b| i32::from_le_bytes(b.try_into().unwrap()) as u32))
            .collect::<std::result::Result<_, _>>()?;
        if k < 3 {
            return Err("face with fewer than 3 vertices".into());
        }
        for j in 1..k - 1 {
            triangles.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    let mut mesh = TriMesh::new(vertices, triangles);
    if has_color {
        mesh.colors = Some(colors);
    }
    mesh.validate().map_err(|e| e.to_string())?;
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::mesh::box_mesh;

    fn quantized_box() -> TriMesh {
        let m = box_mesh(Vec3::new(-0.1, -0.2, -0.3), Vec3::new(0.3, 0.2, 0.1));
        let colors = (0..8).map(|i| [i as f32 / 255.0, 1.0, 128.0 / 255.0]).collect();
        m.with_colors(colors)
    }

    #[test]
    fn ply_roundtrip_is_exact_for_quantized_colors() {
        let m = quantized_box();
        let mut buf = Vec::new();
        encode_ply(&m, &mut buf);
        assert_eq!(decode_ply(&buf).unwrap(), m);
    }

    #[test]
    fn obj_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.obj");
        let m = quantized_box();
        write_obj(&p, &m).unwrap();
        assert_eq!(read_obj(&p).unwrap(), m);
    }

    #[test]
    fn vxl_roundtrip_dense_and_sparse() {
        let spec = VolumeSpec::new(4).unwrap();
        let dense = DenseVolume::from_data(spec, 2, (0..128).map(|i| i as f32 * 0.25).collect()).unwrap();
        let sparse = SparseVolume::new(spec, vec![[0, 1, 2], [3, 3, 3]], 4, (0..8).map(|i| i as f32).collect()).unwrap();
        for vol in [Volume::Dense(dense), Volume::Sparse(sparse)] {
            let mut buf = Vec::new();
            encode_volume(&vol, &mut buf).unwrap();
            assert_eq!(&buf[..4], b"VXL1");
            assert_eq!(decode_volume(&buf).unwrap(), vol);
        }
    }

    #[test]
    fn vxl_header_layout() {
        let spec = VolumeSpec::new(2).unwrap();
        let vol = Volume::Dense(DenseVolume::zeros(spec, 1));
        let mut buf = Vec::new();
        encode_volume(&vol, &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 * 6 + 1 + 8 * 4);
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 2);
        assert_eq!(buf[28], 0);
    }

    #[test]
    fn vxl_rejects_bad_magic_and_truncation() {
        let spec = VolumeSpec::new(2).unwrap();
        let mut buf = Vec::new();
        encode_volume(&Volume::Dense(DenseVolume::zeros(spec, 1)), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(decode_volume(&bad).is_err());
        assert!(decode_volume(&buf[..buf.len() - 1]).is_err());
    }
}

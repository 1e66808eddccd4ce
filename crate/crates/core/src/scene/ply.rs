use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{
    sh_degree_from_rest_count, sh_rest_per_channel, GaussianGeometry, GaussianScene, ShColors,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn read(self, bytes: &[u8]) -> f32 {
        match self {
            ScalarType::I8 => bytes[0] as i8 as f32,
            ScalarType::U8 => bytes[0] as f32,
            ScalarType::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f32,
            ScalarType::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f32,
            ScalarType::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f32,
            ScalarType::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f32,
            ScalarType::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()),
            ScalarType::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()) as f32,
        }
    }
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<(String, ScalarType)>,
}

impl Element {
    fn row_size(&self) -> usize {
        self.properties.iter().map(|(_, t)| t.size()).sum()
    }
}

fn read_header(reader: &mut impl BufRead) -> Result<Vec<Element>> {
    let mut line = String::new();
    let mut next_line = |reader: &mut dyn BufRead| -> Result<String> {
        line.clear();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| Error::Format(format!("unreadable PLY header: {e}")))?;
        if n == 0 {
            return Err(Error::Format("PLY header ended before end_header".into()));
        }
        Ok(line.trim().to_string())
    };

    if next_line(reader)? != "ply" {
        return Err(Error::Format("missing `ply` magic".into()));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut saw_format = false;
    loop {
        let line = next_line(reader)?;
        let mut words = line.split_whitespace();
        match words.next() {
            Some("format") => {
                let fmt = words.next().unwrap_or_default();
                if fmt != "binary_little_endian" {
                    return Err(Error::Format(format!(
                        "unsupported PLY format `{fmt}`, expected binary_little_endian"
                    )));
                }
                saw_format = true;
            }
            Some("element") => {
                let name = words.next().unwrap_or_default().to_string();
                let count = words
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad element line `{line}`")))?;
                elements.push(Element {
                    name,
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let ty = words.next().unwrap_or_default();
                if ty == "list" {
                    return Err(Error::Format("list properties are not supported".into()));
                }
                let ty = ScalarType::parse(ty)
                    .ok_or_else(|| Error::Format(format!("unknown property type `{ty}`")))?;
                let name = words
                    .next()
                    .ok_or_else(|| Error::Format(format!("bad property line `{line}`")))?;
                let element = elements
                    .last_mut()
                    .ok_or_else(|| Error::Format("property before any element".into()))?;
                element.properties.push((name.to_string(), ty));
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("end_header") => break,
            Some(other) => {
                return Err(Error::Format(format!("unexpected PLY header keyword `{other}`")))
            }
        }
    }
    if !saw_format {
        return Err(Error::Format("PLY header has no format line".into()));
    }
    Ok(elements)
}

/// Reads a binary little-endian PLY in the standard 3DGS checkpoint layout.
pub fn load_scene(path: impl AsRef<Path>) -> Result<GaussianScene> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let elements = read_header(&mut reader)?;

    let mut vertex = None;
    for element in &elements {
        if element.name == "vertex" {
            vertex = Some(element);
            break;
        }
        let mut skip = vec![0u8; element.row_size() * element.count];
        reader
            .read_exact(&mut skip)
            .map_err(|e| Error::io(path, e))?;
    }
    let vertex = vertex.ok_or_else(|| Error::Format("PLY has no vertex element".into()))?;
    if vertex.count == 0 {
        return Err(Error::EmptyScene);
    }

    let mut offsets = std::collections::HashMap::new();
    let mut offset = 0;
    for (name, ty) in &vertex.properties {
        offsets.insert(name.as_str(), (offset, *ty));
        offset += ty.size();
    }
    let row_size = offset;
    let lookup = |name: &str| -> Result<(usize, ScalarType)> {
        offsets
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingField(name.to_string()))
    };

    let fields = |names: &[&str]| -> Result<Vec<(usize, ScalarType)>> {
        names.iter().map(|n| lookup(n)).collect()
    };
    let pos = fields(&["x", "y", "z"])?;
    let dc = fields(&["f_dc_0", "f_dc_1", "f_dc_2"])?;
    let opacity = lookup("opacity")?;
    let scale = fields(&["scale_0", "scale_1", "scale_2"])?;
    let rot = fields(&["rot_0", "rot_1", "rot_2", "rot_3"])?;

    let rest_count = vertex
        .properties
        .iter()
        .filter(|(n, _)| n.starts_with("f_rest_"))
        .count();
    let degree = sh_degree_from_rest_count(rest_count).ok_or_else(|| {
        Error::Format(format!(
            "{rest_count} f_rest properties do not correspond to any SH degree"
        ))
    })?;
    let rest_names: Vec<String> = (0..rest_count).map(|i| format!("f_rest_{i}")).collect();
    let rest_refs: Vec<&str> = rest_names.iter().map(String::as_str).collect();
    let rest = fields(&rest_refs)?;

    let m = vertex.count;
    let mut geometry = GaussianGeometry {
        positions: Vec::with_capacity(m),
        rotations: Vec::with_capacity(m),
        log_scales: Vec::with_capacity(m),
        opacity_logits: Vec::with_capacity(m),
    };
    let mut colors = ShColors {
        degree,
        dc: Vec::with_capacity(m),
        rest: Vec::with_capacity(m * rest_count),
    };

    let mut row = vec![0u8; row_size];
    let get = |row: &[u8], (off, ty): (usize, ScalarType)| ty.read(&row[off..off + ty.size()]);
    for _ in 0..m {
        reader
            .read_exact(&mut row)
            .map_err(|e| Error::Format(format!("truncated vertex data: {e}")))?;
        geometry
            .positions
            .push([get(&row, pos[0]), get(&row, pos[1]), get(&row, pos[2])]);
        geometry.rotations.push([
            get(&row, rot[0]),
            get(&row, rot[1]),
            get(&row, rot[2]),
            get(&row, rot[3]),
        ]);
        geometry
            .log_scales
            .push([get(&row, scale[0]), get(&row, scale[1]), get(&row, scale[2])]);
        geometry.opacity_logits.push(get(&row, opacity));
        colors
            .dc
            .push([get(&row, dc[0]), get(&row, dc[1]), get(&row, dc[2])]);
        colors.rest.extend(rest.iter().map(|&f| get(&row, f)));
    }

    GaussianScene::new(geometry, colors)
}

/// Writes a scene as binary little-endian PLY. Normals are written as zero.
pub fn save_scene(scene: &GaussianScene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let rest_count = 3 * sh_rest_per_channel(scene.colors.degree);

    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", scene.len()));
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..rest_count).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    for name in &names {
        header.push_str(&format!("property float {name}\n"));
    }
    header.push_str("end_header\n");

    let write_err = |e| Error::io(path, e);
    out.write_all(header.as_bytes()).map_err(write_err)?;

    let g = &scene.geometry;
    let c = &scene.colors;
    let mut row: Vec<f32> = Vec::with_capacity(names.len());
    for i in 0..scene.len() {
        row.clear();
        row.extend_from_slice(&g.positions[i]);
        row.extend_from_slice(&[0.0; 3]);
        row.extend_from_slice(&c.dc[i]);
        row.extend_from_slice(c.rest_of(i));
        row.push(g.opacity_logits[i]);
        row.extend_from_slice(&g.log_scales[i]);
        row.extend_from_slice(&g.rotations[i]);
        for v in &row {
            out.write_all(&v.to_le_bytes()).map_err(write_err)?;
        }
    }
    out.flush().map_err(write_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_scene(count: usize, degree: usize, seed: u64) -> GaussianScene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = || rng.gen_range(-2.0f32..2.0);
        let geometry = GaussianGeometry {
            positions: (0..count).map(|_| [r(), r(), r()]).collect(),
            rotations: (0..count).map(|_| [r(), r(), r(), r()]).collect(),
            log_scales: (0..count).map(|_| [r(), r(), r()]).collect(),
            opacity_logits: (0..count).map(|_| r()).collect(),
        };
        let stride = 3 * sh_rest_per_channel(degree);
        let colors = ShColors {
            degree,
            dc: (0..count).map(|_| [r(), r(), r()]).collect(),
            rest: (0..count * stride).map(|_| r()).collect(),
        };
        GaussianScene::new(geometry, colors).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for degree in 0..=3 {
            let scene = random_scene(100, degree, degree as u64);
            let path = dir.path().join(format!("s{degree}.ply"));
            save_scene(&scene, &path).unwrap();
            let loaded = load_scene(&path).unwrap();
            assert_eq!(loaded.sh_degree(), degree);
            assert_eq!(loaded, scene);
        }
    }

    #[test]
    fn degree_zero_has_no_rest_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d0.ply");
        save_scene(&random_scene(4, 0, 9), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = String::from_utf8_lossy(&bytes[..400]);
        assert!(!header.contains("f_rest"));
        assert_eq!(load_scene(&path).unwrap().sh_degree(), 0);
    }

    #[test]
    fn forty_five_rest_fields_mean_degree_three() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d3.ply");
        save_scene(&random_scene(2, 3, 1), &path).unwrap();
        let header = std::fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&header[..2000]);
        assert_eq!(text.matches("property float f_rest_").count(), 45);
        assert_eq!(load_scene(&path).unwrap().sh_degree(), 3);
    }

    fn write_raw(path: &Path, props: &[&str], rows: usize) {
        let mut text = format!("ply\nformat binary_little_endian 1.0\nelement vertex {rows}\n");
        for p in props {
            text.push_str(&format!("property float {p}\n"));
        }
        text.push_str("end_header\n");
        let mut bytes = text.into_bytes();
        for _ in 0..rows * props.len() {
            bytes.extend_from_slice(&0.5f32.to_le_bytes());
        }
        std::fs::write(path, bytes).unwrap();
    }

    #[test]
    fn missing_property_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        write_raw(
            &path,
            &[
                "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "scale_0", "scale_1", "scale_2",
                "rot_0", "rot_1", "rot_2", "rot_3",
            ],
            3,
        );
        match load_scene(&path) {
            Err(Error::MissingField(name)) => assert_eq!(name, "opacity"),
            other => panic!("expected missing field, got {other:?}"),
        }
    }

    #[test]
    fn zero_vertices_is_empty_scene() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ply");
        write_raw(&path, &["x", "y", "z"], 0);
        assert!(matches!(load_scene(&path), Err(Error::EmptyScene)));
    }

    #[test]
    fn ascii_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ascii.ply");
        std::fs::write(&path, "ply\nformat ascii 1.0\nelement vertex 1\nend_header\n").unwrap();
        assert!(matches!(load_scene(&path), Err(Error::Format(_))));
    }

    #[test]
    fn unwritable_path_errors() {
        let scene = random_scene(1, 0, 2);
        let err = save_scene(&scene, "/nonexistent-dir/x/scene.ply").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}

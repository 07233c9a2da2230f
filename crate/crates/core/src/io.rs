//! File formats: MVOL volumes and masks, atlas directories, skeleton
//! templates.
//!
//! MVOL layout:
//!
//! ```text
//! MVOL 1
//! dims <nx> <ny> <nz>
//! spacing <sx> <sy> <sz>
//! origin <ox> <oy> <oz>
//! dtype int16le|uint8
//! END
//! <raw payload, x-fastest>
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::anatomy::SkeletonTemplate;
use crate::atlas::{LiverShapeType, LiverTemplate, TemplateAtlas, CANONICAL_SPACING_MM};
use crate::error::{Error, Result};
use crate::volume::{BinaryMask, CtVolume, VoxelGrid};

pub const MVOL_MAGIC: &str = "MVOL 1";
pub const ATLAS_MANIFEST: &str = "atlas.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Int16Le,
    Uint8,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::Int16Le => "int16le",
            Dtype::Uint8 => "uint8",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::Int16Le => 2,
            Dtype::Uint8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MvolHeader {
    pub grid: VoxelGrid,
    pub dtype: Dtype,
}

fn header_text(grid: &VoxelGrid, dtype: Dtype) -> String {
    let [nx, ny, nz] = grid.dims();
    let [sx, sy, sz] = grid.spacing();
    let [ox, oy, oz] = grid.origin();
    let mut s = String::new();
    // Display for f64 prints the shortest text that parses back exactly.
    let _ = write!(
        s,
        "{MVOL_MAGIC}\ndims {nx} {ny} {nz}\nspacing {sx} {sy} {sz}\norigin {ox} {oy} {oz}\ndtype {}\nEND\n",
        dtype.name()
    );
    s
}

fn parse_triple<T: std::str::FromStr>(line: &str, field: &str) -> Result<[T; 3]> {
    let mut parts = line.split(' ');
    if parts.next() != Some(field) {
        return Err(Error::format(field, format!("expected `{field}` line, got {line:?}")));
    }
    let vals: Vec<T> = parts
        .map(|p| p.parse::<T>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(field, format!("unparsable values in {line:?}")))?;
    <[T; 3]>::try_from(vals)
        .map_err(|_| Error::format(field, format!("expected three values in {line:?}")))
}

/// Parse the header and return it with the payload slice.
pub fn parse_mvol(bytes: &[u8]) -> Result<(MvolHeader, &[u8])> {
    let mut lines = Vec::with_capacity(6);
    let mut pos = 0;
    while lines.len() < 6 {
        let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            let field = ["magic", "dims", "spacing", "origin", "dtype", "END"][lines.len()];
            return Err(Error::format(field, "header truncated"));
        };
        let line = std::str::from_utf8(&bytes[pos..pos + nl])
            .map_err(|_| Error::format("header", "header is not ASCII"))?;
        lines.push(line);
        pos += nl + 1;
    }
    if lines[0] != MVOL_MAGIC {
        return Err(Error::format("magic", format!("expected {MVOL_MAGIC:?}, got {:?}", lines[0])));
    }
    let dims: [usize; 3] = parse_triple(lines[1], "dims")?;
    if dims.contains(&0) {
        return Err(Error::format("dims", format!("dims must be positive, got {dims:?}")));
    }
    let spacing: [f64; 3] = parse_triple(lines[2], "spacing")?;
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::format("spacing", format!("spacing must be positive, got {spacing:?}")));
    }
    let origin: [f64; 3] = parse_triple(lines[3], "origin")?;
    let dtype = match lines[4] {
        "dtype int16le" => Dtype::Int16Le,
        "dtype uint8" => Dtype::Uint8,
        other => return Err(Error::format("dtype", format!("unknown dtype line {other:?}"))),
    };
    if lines[5] != "END" {
        return Err(Error::format("END", format!("expected END, got {:?}", lines[5])));
    }
    let grid = VoxelGrid::new(dims, spacing, origin).map_err(|e| Error::format("dims", e.to_string()))?;
    let payload = &bytes[pos..];
    let expected = grid.len() * dtype.size();
    if payload.len() != expected {
        return Err(Error::format(
            "payload",
            format!("expected {expected} bytes, found {}", payload.len()),
        ));
    }
    Ok((MvolHeader { grid, dtype }, payload))
}

pub fn encode_volume(vol: &CtVolume) -> Vec<u8> {
    let header = header_text(vol.grid(), Dtype::Int16Le);
    let mut out = Vec::with_capacity(header.len() + 2 * vol.values().len());
    out.extend_from_slice(header.as_bytes());
    for v in vol.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<CtVolume> {
    let (header, payload) = parse_mvol(bytes)?;
    if header.dtype != Dtype::Int16Le {
        return Err(Error::format("dtype", "volume files must be int16le"));
    }
    let values: Vec<i16> = payload
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    CtVolume::new(header.grid, values).map_err(|e| Error::format("payload", e.to_string()))
}

pub fn encode_mask(mask: &BinaryMask) -> Vec<u8> {
    let header = header_text(mask.grid(), Dtype::Uint8);
    let mut out = Vec::with_capacity(header.len() + mask.bits().len());
    out.extend_from_slice(header.as_bytes());
    out.extend(mask.bits().iter().map(|&b| u8::from(b)));
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask> {
    let (header, payload) = parse_mvol(bytes)?;
    if header.dtype != Dtype::Uint8 {
        return Err(Error::format("dtype", "mask files must be uint8"));
    }
    if let Some(pos) = payload.iter().position(|&b| b > 1) {
        return Err(Error::format(
            "payload",
            format!("mask byte {} at offset {pos} is not 0 or 1", payload[pos]),
        ));
    }
    BinaryMask::new(header.grid, payload.iter().map(|&b| b == 1).collect())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<CtVolume> {
    decode_volume(&read_bytes(path.as_ref())?)
}

pub fn write_volume(vol: &CtVolume, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_volume(vol))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    decode_mask(&read_bytes(path.as_ref())?)
}

pub fn write_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_mask(mask))
}

/// Write every template as `<id>.mvol` plus the `atlas.txt` manifest.
pub fn write_atlas(atlas: &TemplateAtlas, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("# id shape_type cc_extent_mm mask_file\n");
    for t in atlas.templates() {
        let file = format!("{}.mvol", t.id());
        write_mask(t.mask(), dir.join(&file))?;
        let _ = writeln!(manifest, "{} {} {} {}", t.id(), t.shape_type(), t.cc_extent_mm(), file);
    }
    write_bytes(&dir.join(ATLAS_MANIFEST), manifest.as_bytes())
}

pub fn read_atlas(dir: impl AsRef<Path>) -> Result<TemplateAtlas> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(ATLAS_MANIFEST);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Atlas(format!("{}: {e}", manifest_path.display())))?;
    let mut templates = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, shape, cc, file] = fields[..] else {
            return Err(Error::Atlas(format!(
                "line {}: expected `id shape_type cc_extent_mm mask_file`",
                lineno + 1
            )));
        };
        let shape_type: LiverShapeType = shape
            .parse()
            .map_err(|_| Error::Atlas(format!("line {}: unknown shape type {shape:?}", lineno + 1)))?;
        let cc: f64 = cc
            .parse()
            .map_err(|_| Error::Atlas(format!("line {}: bad cc_extent_mm {cc:?}", lineno + 1)))?;
        let mask = read_mask(dir.join(file))?;
        if mask
            .grid()
            .spacing()
            .iter()
            .any(|&s| (s - CANONICAL_SPACING_MM).abs() > 1e-9)
        {
            return Err(Error::Atlas(format!(
                "template {id}: spacing {:?} differs from the canonical {CANONICAL_SPACING_MM} mm",
                mask.grid().spacing()
            )));
        }
        let t = LiverTemplate::new(id.to_string(), shape_type, mask, cc)
            .map_err(|e| Error::Atlas(format!("template {id}: {e}")))?;
        templates.push(t);
    }
    TemplateAtlas::new(templates).map_err(|e| match e {
        Error::Atlas(m) => Error::Atlas(m),
        other => Error::Atlas(other.to_string()),
    })
}

pub fn encode_skeleton(t: &SkeletonTemplate) -> String {
    let (lo, hi) = t.liver_interval();
    let mut s = format!("SKEL 1\nliver {lo} {hi}\n");
    for a in t.bone_profile() {
        let _ = writeln!(s, "{a}");
    }
    s
}

pub fn decode_skeleton(text: &str) -> Result<SkeletonTemplate> {
    let mut lines = text.lines();
    if lines.next() != Some("SKEL 1") {
        return Err(Error::format("magic", "expected `SKEL 1`"));
    }
    let liver = lines.next().unwrap_or_default();
    let parts: Vec<&str> = liver.split(' ').collect();
    let (lo, hi) = match parts[..] {
        ["liver", lo, hi] => (
            lo.parse::<f64>().map_err(|_| Error::format("liver", "bad z_lo"))?,
            hi.parse::<f64>().map_err(|_| Error::format("liver", "bad z_hi"))?,
        ),
        _ => return Err(Error::format("liver", format!("expected `liver <z_lo> <z_hi>`, got {liver:?}"))),
    };
    let profile = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::format("profile", "unparsable area value"))?;
    SkeletonTemplate::new(profile, (lo, hi)).map_err(|e| Error::format("profile", e.to_string()))
}

pub fn read_skeleton(path: impl AsRef<Path>) -> Result<SkeletonTemplate> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_skeleton(&text)
}

pub fn write_skeleton(t: &SkeletonTemplate, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), encode_skeleton(t).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dims: [usize; 3]) -> VoxelGrid {
        VoxelGrid::new(dims, [0.7, 0.7, 2.5], [-12.5, 3.25, 100.0]).unwrap()
    }

    fn field_of(err: Error) -> String {
        match err {
            Error::Format { field, .. } => field,
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn little_endian_payload() {
        let g = VoxelGrid::new([2, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let v = CtVolume::new(g, vec![-1000, 500]).unwrap();
        let bytes = encode_volume(&v);
        let header = "MVOL 1\ndims 2 1 1\nspacing 1 1 1\norigin 0 0 0\ndtype int16le\nEND\n";
        assert_eq!(&bytes[..header.len()], header.as_bytes());
        assert_eq!(&bytes[header.len()..], &[0x18, 0xFC, 0xF4, 0x01]);
    }

    #[test]
    fn zero_dims_names_field() {
        let text = b"MVOL 1\ndims 0 4 4\nspacing 1 1 1\norigin 0 0 0\ndtype int16le\nEND\n";
        assert_eq!(field_of(decode_volume(text).unwrap_err()), "dims");
    }

    #[test]
    fn header_errors_name_fields() {
        let cases: [(&[u8], &str); 6] = [
            (b"MVOL 2\ndims 1 1 1\nspacing 1 1 1\norigin 0 0 0\ndtype int16le\nEND\n\0\0", "magic"),
            (b"MVOL 1\ndims 1 1 1\nspacing 1 -1 1\norigin 0 0 0\ndtype int16le\nEND\n\0\0", "spacing"),
            (b"MVOL 1\ndims 1 1 1\nspacing 1 1 1\norigin 0 x 0\ndtype int16le\nEND\n\0\0", "origin"),
            (b"MVOL 1\ndims 1 1 1\nspacing 1 1 1\norigin 0 0 0\ndtype f32\nEND\n\0\0", "dtype"),
            (b"MVOL 1\ndims 2 1 1\nspacing 1 1 1\norigin 0 0 0\ndtype int16le\nEND\n\0\0", "payload"),
            (b"MVOL 1\ndims 1 1 1\nspacing 1 1 1\n", "origin"),
        ];
        for (bytes, field) in cases {
            assert_eq!(field_of(decode_volume(bytes).unwrap_err()), field);
        }
    }

    #[test]
    fn volume_rewrite_is_byte_identical() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let g = grid([8, 8, 8]);
        let values = (0..g.len()).map(|_| rng.random_range(-1024..=3071)).collect();
        let v = CtVolume::new(g, values).unwrap();
        let bytes = encode_volume(&v);
        let back = decode_volume(&bytes).unwrap();
        assert_eq!(back, v);
        assert_eq!(encode_volume(&back), bytes);
    }

    #[test]
    fn mask_encoding_and_errors() {
        let g = VoxelGrid::new([3, 3, 3], [1.0; 3], [0.0; 3]).unwrap();
        let m = BinaryMask::full(g);
        let bytes = encode_mask(&m);
        let payload = &bytes[bytes.len() - 27..];
        assert!(payload.iter().all(|&b| b == 1));
        assert_eq!(decode_mask(&bytes).unwrap(), m);

        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() = 2;
        assert_eq!(field_of(decode_mask(&bad).unwrap_err()), "payload");
        // A mask file is not a volume.
        assert_eq!(field_of(decode_volume(&bytes).unwrap_err()), "dtype");
    }

    #[test]
    fn volume_payload_out_of_range_rejected() {
        let g = VoxelGrid::new([1, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let mut bytes = header_text(&g, Dtype::Int16Le).into_bytes();
        bytes.extend_from_slice(&4000i16.to_le_bytes());
        assert_eq!(field_of(decode_volume(&bytes).unwrap_err()), "payload");
    }

    #[test]
    fn skeleton_round_trip() {
        let t = SkeletonTemplate::new(vec![0.0, 12.5, 300.25, 7.0], (1.0, 3.0)).unwrap();
        let text = encode_skeleton(&t);
        assert!(text.starts_with("SKEL 1\nliver 1 3\n"));
        assert_eq!(decode_skeleton(&text).unwrap(), t);
        assert!(decode_skeleton("SKEL 2\n").is_err());
        assert!(decode_skeleton("SKEL 1\nliver 3 1\n1\n2\n3\n4\n").is_err());
    }
}

//! Point-cloud input/output: ASCII PLY, voxelization onto an integer grid,
//! synthetic dense training data and raw block files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::blocks::VoxelBlock;
use crate::error::{Error, Result};

/// Largest coordinate magnitude accepted from files.
pub const MAX_COORDINATE: f64 = (1u64 << 30) as f64;
const MAX_PRECISION: u8 = 31;

/// Deduplicated integer points `(x, y, z)` on a `2^n` grid, kept sorted in
/// raster order (z, then y, then x).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointCloud {
    precision_bits: u8,
    points: Vec<[u32; 3]>,
}

fn raster_key(p: &[u32; 3]) -> (u32, u32, u32) {
    (p[2], p[1], p[0])
}

impl PointCloud {
    pub fn new(precision_bits: u8, points: impl IntoIterator<Item = [u32; 3]>) -> Result<Self> {
        if precision_bits == 0 || precision_bits > MAX_PRECISION {
            return Err(Error::InvalidPrecision(precision_bits as u32));
        }
        let limit = 1u64 << precision_bits;
        let mut points: Vec<[u32; 3]> = points.into_iter().collect();
        if let Some(bad) = points.iter().flatten().find(|&&c| c as u64 >= limit) {
            return Err(Error::CoordinateOutOfRange(*bad as f64));
        }
        points.sort_unstable_by_key(raster_key);
        points.dedup();
        Ok(Self {
            precision_bits,
            points,
        })
    }

    pub fn precision_bits(&self) -> u8 {
        self.precision_bits
    }

    pub fn points(&self) -> &[[u32; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Smallest `n >= 1` with `2^n > max_coordinate`.
pub fn required_precision(max_coordinate: u64) -> u8 {
    let bits = (u64::BITS - max_coordinate.leading_zeros()) as u8;
    bits.max(1)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PlyOptions {
    /// Overrides both the `precision_bits` header comment and inference.
    pub precision: Option<u8>,
}

/// Vertices read from a PLY file before any integer check.
#[derive(Clone, Debug, PartialEq)]
pub struct PlyVertices {
    pub points: Vec<[f64; 3]>,
    pub declared_precision: Option<u8>,
}

const PLY_SCALARS: &[&str] = &[
    "char", "uchar", "short", "ushort", "int", "uint", "float", "double", "int8", "uint8", "int16",
    "uint16", "int32", "uint32", "float32", "float64",
];

struct ElementDecl {
    name: String,
    count: usize,
    props: Vec<String>,
    has_list: bool,
}

/// Reads the `x`, `y`, `z` properties of every vertex of an ASCII PLY.
pub fn parse_ply_vertices(bytes: &[u8]) -> Result<PlyVertices> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::MalformedPly("file is not UTF-8 text".into()))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::MalformedPly("missing 'ply' magic line".into()));
    }
    let mut elements: Vec<ElementDecl> = Vec::new();
    let mut declared_precision = None;
    let mut format_seen = false;
    let mut header_done = false;
    for line in lines.by_ref() {
        let mut tok = line.split_whitespace();
        match tok.next() {
            None => continue,
            Some("format") => {
                match tok.next() {
                    Some("ascii") => {}
                    Some(f) if f.starts_with("binary") => return Err(Error::BinaryPly),
                    other => return Err(Error::MalformedPly(format!("unknown format {other:?}"))),
                }
                format_seen = true;
            }
            Some("comment") => {
                if tok.next() == Some("precision_bits") {
                    let n = tok
                        .next()
                        .and_then(|v| v.parse::<u8>().ok())
                        .ok_or_else(|| Error::MalformedPly("bad precision_bits comment".into()))?;
                    declared_precision = Some(n);
                }
            }
            Some("obj_info") => {}
            Some("element") => {
                let name = tok
                    .next()
                    .ok_or_else(|| Error::MalformedPly("element without name".into()))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::MalformedPly(format!("element {name} without count")))?;
                elements.push(ElementDecl {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                    has_list: false,
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::MalformedPly("property before element".into()))?;
                let ty = tok
                    .next()
                    .ok_or_else(|| Error::MalformedPly("property without type".into()))?;
                if ty == "list" {
                    el.has_list = true;
                    let _ = (tok.next(), tok.next());
                } else if !PLY_SCALARS.contains(&ty) {
                    return Err(Error::MalformedPly(format!("unknown property type {ty}")));
                }
                let name = tok
                    .next()
                    .ok_or_else(|| Error::MalformedPly("property without name".into()))?;
                el.props.push(name.to_string());
            }
            Some("end_header") => {
                header_done = true;
                break;
            }
            Some(other) => {
                return Err(Error::MalformedPly(format!(
                    "unexpected header keyword {other}"
                )))
            }
        }
    }
    if !header_done {
        return Err(Error::MalformedPly("missing end_header".into()));
    }
    if !format_seen {
        return Err(Error::MalformedPly("missing format line".into()));
    }
    let vi = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::MalformedPly("no vertex element".into()))?;
    let vertex = &elements[vi];
    if vertex.has_list {
        return Err(Error::MalformedPly(
            "list property in vertex element".into(),
        ));
    }
    let find = |axis: &str| {
        vertex
            .props
            .iter()
            .position(|p| p == axis)
            .ok_or_else(|| Error::MalformedPly(format!("vertex has no {axis} property")))
    };
    let axes = [find("x")?, find("y")?, find("z")?];
    let skip: usize = elements[..vi].iter().map(|e| e.count).sum();

    let mut body = lines.filter(|l| !l.trim().is_empty()).skip(skip);
    let mut points = Vec::with_capacity(vertex.count);
    for row in 0..vertex.count {
        let line = body.next().ok_or_else(|| {
            Error::MalformedPly(format!("expected {} vertices, got {row}", vertex.count))
        })?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < vertex.props.len() {
            return Err(Error::MalformedPly(format!(
                "vertex {row} has too few fields"
            )));
        }
        let mut p = [0.0; 3];
        for (slot, &col) in p.iter_mut().zip(&axes) {
            let v: f64 = fields[col].parse().map_err(|_| {
                Error::MalformedPly(format!("vertex {row}: bad number {:?}", fields[col]))
            })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteCoordinate);
            }
            if v.abs() > MAX_COORDINATE {
                return Err(Error::CoordinateOutOfRange(v));
            }
            *slot = v;
        }
        points.push(p);
    }
    Ok(PlyVertices {
        points,
        declared_precision,
    })
}

/// Parses an ASCII PLY whose coordinates are non-negative integers.
pub fn parse_ply(bytes: &[u8], opts: &PlyOptions) -> Result<PointCloud> {
    let verts = parse_ply_vertices(bytes)?;
    let mut points = Vec::with_capacity(verts.points.len());
    let mut max = 0u64;
    for p in &verts.points {
        let mut q = [0u32; 3];
        for (slot, &v) in q.iter_mut().zip(p) {
            if v.fract() != 0.0 {
                return Err(Error::NonIntegerCoordinate(v));
            }
            if v < 0.0 {
                return Err(Error::CoordinateOutOfRange(v));
            }
            *slot = v as u32;
            max = max.max(v as u64);
        }
        points.push(q);
    }
    let needed = required_precision(max);
    let n = match opts.precision.or(verts.declared_precision) {
        Some(n) if n < needed && !points.is_empty() => {
            return Err(Error::CoordinateOutOfRange(max as f64))
        }
        Some(n) => n,
        None => needed,
    };
    PointCloud::new(n, points)
}

/// ASCII PLY with integer coordinates in raster order. The grid precision is
/// recorded in a `comment precision_bits` line.
pub fn write_ply(pc: &PointCloud) -> Vec<u8> {
    let mut out = String::with_capacity(64 + pc.len() * 16);
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "comment precision_bits {}", pc.precision_bits);
    let _ = writeln!(out, "element vertex {}", pc.len());
    out.push_str("property int x\nproperty int y\nproperty int z\nend_header\n");
    for [x, y, z] in &pc.points {
        let _ = writeln!(out, "{x} {y} {z}");
    }
    out.into_bytes()
}

/// Uniformly scales real points so the largest axis extent spans
/// `[0, 2^n - 1]`, rounds half-up and deduplicates.
pub fn voxelize(points: &[[f64; 3]], n: u8) -> Result<PointCloud> {
    if !(1..=16).contains(&n) {
        return Err(Error::InvalidPrecision(n as u32));
    }
    if points.is_empty() {
        return Err(Error::EmptyPointCloud);
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteCoordinate);
    }
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
    }
    let extent = (0..3).map(|a| max[a] - min[a]).fold(0.0, f64::max);
    if extent == 0.0 {
        return PointCloud::new(n, [[0, 0, 0]]);
    }
    let top = ((1u32 << n) - 1) as f64;
    let scale = top / extent;
    let quantized = points.iter().map(|p| {
        let mut q = [0u32; 3];
        for a in 0..3 {
            q[a] = ((p[a] - min[a]) * scale + 0.5).floor().clamp(0.0, top) as u32;
        }
        q
    });
    PointCloud::new(n, quantized)
}

/// Analytic shapes rasterized onto integer voxel centres `(x, y, z)`; a
/// voxel is the unit cube around its centre.
#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    /// Voxels whose cube meets the plane `normal · p = offset`.
    Plane {
        normal: [f64; 3],
        offset: f64,
    },
    /// Voxels whose cube meets the sphere surface.
    SphereShell {
        center: [f64; 3],
        radius: f64,
    },
    /// Boundary voxels of an inclusive integer box.
    BoxShell {
        min: [i64; 3],
        max: [i64; 3],
    },
    Union(Vec<Shape>),
}

impl Shape {
    pub fn contains(&self, p: [i64; 3]) -> bool {
        match self {
            Shape::Plane { normal, offset } => {
                let d: f64 = (0..3).map(|a| normal[a] * p[a] as f64).sum::<f64>() - offset;
                let half = 0.5 * normal.iter().map(|v| v.abs()).sum::<f64>();
                -half <= d && d < half
            }
            Shape::SphereShell { center, radius } => {
                let (mut lo, mut hi) = (0.0, 0.0);
                for a in 0..3 {
                    let d = (center[a] - p[a] as f64).abs();
                    lo += (d - 0.5).max(0.0).powi(2);
                    hi += (d + 0.5).powi(2);
                }
                let r2 = radius * radius;
                lo <= r2 && r2 <= hi
            }
            Shape::BoxShell { min, max } => {
                let inside = (0..3).all(|a| min[a] <= p[a] && p[a] <= max[a]);
                inside && (0..3).any(|a| p[a] == min[a] || p[a] == max[a])
            }
            Shape::Union(parts) => parts.iter().any(|s| s.contains(p)),
        }
    }

    /// Occupancy of the cube `[0, edge)³`, block voxel `(z, y, x)` holding
    /// point `(x, y, z)`.
    pub fn rasterize(&self, edge: usize) -> Result<VoxelBlock> {
        let mut block = VoxelBlock::new(edge)?;
        for z in 0..edge {
            for y in 0..edge {
                for x in 0..edge {
                    if self.contains([x as i64, y as i64, z as i64]) {
                        block.set(z, y, x, true);
                    }
                }
            }
        }
        Ok(block)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Plane,
    SphereShell,
    BoxShell,
    Union,
}

impl ShapeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::Plane => "plane",
            ShapeKind::SphereShell => "sphere-shell",
            ShapeKind::BoxShell => "box-shell",
            ShapeKind::Union => "union",
        }
    }
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plane" => Ok(ShapeKind::Plane),
            "sphere-shell" | "sphere" => Ok(ShapeKind::SphereShell),
            "box-shell" | "box" => Ok(ShapeKind::BoxShell),
            "union" => Ok(ShapeKind::Union),
            other => Err(Error::InvalidSynthSpec(format!(
                "unknown shape kind {other}"
            ))),
        }
    }
}

/// Recipe for a deterministic synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub kind: ShapeKind,
    /// Block edge for [`synth_blocks`]; region size for [`synth_cloud`].
    pub edge: usize,
    /// Grid precision of clouds from [`synth_cloud`].
    pub precision_bits: u8,
    pub seed: u64,
    pub count: usize,
}

impl SynthSpec {
    pub fn new(kind: ShapeKind, edge: usize, seed: u64, count: usize) -> Self {
        Self {
            kind,
            edge,
            precision_bits: 10,
            seed,
            count,
        }
    }

    /// Reads `key=value` lines (`#` starts a comment).
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut spec = SynthSpec::new(ShapeKind::Plane, 64, 0, 1);
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidSynthSpec(format!("expected key=value, got {line:?}"))
            })?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |_| Error::InvalidSynthSpec(format!("bad value for {k}: {v:?}"));
            match k {
                "kind" => spec.kind = v.parse()?,
                "edge" => spec.edge = v.parse().map_err(bad)?,
                "precision_bits" => spec.precision_bits = v.parse().map_err(bad)?,
                "seed" => spec.seed = v.parse().map_err(bad)?,
                "count" => spec.count = v.parse().map_err(bad)?,
                other => return Err(Error::InvalidSynthSpec(format!("unknown key {other}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "kind={}\nedge={}\nprecision_bits={}\nseed={}\ncount={}\n",
            self.kind.as_str(),
            self.edge,
            self.precision_bits,
            self.seed,
            self.count
        )
    }

    fn validate(&self) -> Result<()> {
        if !self.edge.is_power_of_two() && self.kind != ShapeKind::Union && self.edge < 2 {
            return Err(Error::InvalidSynthSpec(format!("edge {}", self.edge)));
        }
        if self.edge < 2 {
            return Err(Error::InvalidSynthSpec(format!("edge {}", self.edge)));
        }
        if !(1..=MAX_PRECISION).contains(&self.precision_bits) {
            return Err(Error::InvalidPrecision(self.precision_bits as u32));
        }
        Ok(())
    }
}

const SYNTH_ATTEMPTS: usize = 64;

fn random_shape(kind: ShapeKind, edge: f64, rng: &mut ChaCha8Rng) -> Shape {
    match kind {
        ShapeKind::Plane => {
            let mut n = [0.0f64; 3];
            loop {
                for v in &mut n {
                    *v = rng.sample(StandardNormal);
                }
                let norm = n.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    n.iter_mut().for_each(|v| *v /= norm);
                    break;
                }
            }
            let anchor: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75) * edge);
            let offset = (0..3).map(|a| n[a] * anchor[a]).sum();
            Shape::Plane { normal: n, offset }
        }
        ShapeKind::SphereShell => Shape::SphereShell {
            center: std::array::from_fn(|_| rng.random_range(0.0..edge)),
            radius: rng.random_range(0.15..0.9) * edge,
        },
        ShapeKind::BoxShell => {
            let lo: [i64; 3] =
                std::array::from_fn(|_| rng.random_range(-(edge as i64) / 4..=(edge as i64) / 2));
            let hi = std::array::from_fn(|a| {
                lo[a] + rng.random_range((edge as i64 / 4).max(1)..=(edge as i64).max(2))
            });
            Shape::BoxShell { min: lo, max: hi }
        }
        ShapeKind::Union => {
            let parts = rng.random_range(2..=3);
            let kinds = [
                ShapeKind::Plane,
                ShapeKind::SphereShell,
                ShapeKind::BoxShell,
            ];
            Shape::Union(
                (0..parts)
                    .map(|_| {
                        let k = kinds[rng.random_range(0..kinds.len())];
                        random_shape(k, edge, rng)
                    })
                    .collect(),
            )
        }
    }
}

/// `count` non-empty blocks of the requested shape family. Each block's
/// shape parameters are redrawn until it is non-empty.
pub fn synth_blocks(spec: &SynthSpec) -> Result<Vec<VoxelBlock>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let mut block = None;
        for _ in 0..SYNTH_ATTEMPTS {
            let b = random_shape(spec.kind, spec.edge as f64, &mut rng).rasterize(spec.edge)?;
            if b.occupied() > 0 {
                block = Some(b);
                break;
            }
        }
        out.push(block.ok_or(Error::SynthExhausted(SYNTH_ATTEMPTS))?);
    }
    Ok(out)
}

/// A cloud on a `2^precision_bits` grid holding one random shape drawn
/// inside an `edge³` region at a random position. `count` is ignored.
pub fn synth_cloud(spec: &SynthSpec) -> Result<PointCloud> {
    spec.validate()?;
    let grid = 1u64 << spec.precision_bits;
    let edge = (spec.edge as u64).min(grid);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..SYNTH_ATTEMPTS {
        let origin: [u64; 3] = std::array::from_fn(|_| rng.random_range(0..=grid - edge));
        let shape = random_shape(spec.kind, edge as f64, &mut rng);
        let mut points = Vec::new();
        for z in 0..edge {
            for y in 0..edge {
                for x in 0..edge {
                    if shape.contains([x as i64, y as i64, z as i64]) {
                        points.push([
                            (origin[0] + x) as u32,
                            (origin[1] + y) as u32,
                            (origin[2] + z) as u32,
                        ]);
                    }
                }
            }
        }
        if !points.is_empty() {
            return PointCloud::new(spec.precision_bits, points);
        }
    }
    Err(Error::SynthExhausted(SYNTH_ATTEMPTS))
}

const BLOCK_MAGIC: &str = "MSVBLK";

/// Raw block file: a text line `MSVBLK <edge>` followed by `edge³` bits,
/// packed least-significant bit first in raster order.
pub fn encode_block_file(block: &VoxelBlock) -> Vec<u8> {
    let mut out = format!("{BLOCK_MAGIC} {}\n", block.edge()).into_bytes();
    let mut packed = vec![0u8; block.len().div_ceil(8)];
    for (i, &b) in block.bits().iter().enumerate() {
        packed[i / 8] |= b << (i % 8);
    }
    out.extend_from_slice(&packed);
    out
}

pub fn decode_block_file(bytes: &[u8]) -> Result<VoxelBlock> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedBlockFile("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::MalformedBlockFile("header is not text".into()))?;
    let edge: usize = header
        .strip_prefix(BLOCK_MAGIC)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| Error::MalformedBlockFile(format!("bad header {header:?}")))?;
    let mut block = VoxelBlock::new(edge)?;
    let payload = &bytes[nl + 1..];
    if payload.len() != block.len().div_ceil(8) {
        return Err(Error::MalformedBlockFile(format!(
            "expected {} payload bytes, got {}",
            block.len().div_ceil(8),
            payload.len()
        )));
    }
    for i in 0..block.len() {
        block.set_index(i, (payload[i / 8] >> (i % 8)) & 1 == 1);
    }
    Ok(block)
}

/// All `*.blk` files of a directory, in file-name order.
pub fn read_block_dir(dir: &Path) -> Result<Vec<VoxelBlock>> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "blk") {
            files.insert(path.file_name().map(|n| n.to_os_string()), path);
        }
    }
    files
        .values()
        .map(|path| decode_block_file(&fs::read(path)?))
        .collect()
}

pub fn write_block_dir(dir: &Path, blocks: &[VoxelBlock]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, b) in blocks.iter().enumerate() {
        fs::write(dir.join(format!("block_{i:05}.blk")), encode_block_file(b))?;
    }
    Ok(())
}

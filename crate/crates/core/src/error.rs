use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    // point-cloud input
    #[error("malformed PLY: {0}")]
    MalformedPly(String),
    #[error("binary PLY is not supported; convert to ASCII first")]
    BinaryPly,
    #[error("non-finite coordinate in input")]
    NonFiniteCoordinate,
    #[error("coordinate {0} outside the supported range [0, 2^30]")]
    CoordinateOutOfRange(f64),
    #[error("coordinate {0} is not an integer; voxelize the cloud first")]
    NonIntegerCoordinate(f64),
    #[error("invalid precision {0} bits")]
    InvalidPrecision(u32),
    #[error("point cloud is empty")]
    EmptyPointCloud,
    #[error("invalid synthetic-data spec: {0}")]
    InvalidSynthSpec(String),
    #[error("could not generate a non-empty block after {0} attempts")]
    SynthExhausted(usize),
    #[error("malformed block file: {0}")]
    MalformedBlockFile(String),

    // geometry
    #[error("invalid block edge {0}")]
    InvalidEdge(usize),
    #[error("index ({z}, {y}, {x}) out of range for dims {dims:?}")]
    IndexOutOfRange {
        z: usize,
        y: usize,
        x: usize,
        dims: [usize; 3],
    },
    #[error("raster position {index} out of range for {len} voxels")]
    PositionOutOfRange { index: usize, len: usize },
    #[error("group id {0} out of range 1..=8")]
    InvalidGroup(u8),
    #[error("pyramid mismatch: {0}")]
    PyramidMismatch(String),
    #[error("dimension {dim} not divisible by patch count {patches}")]
    IndivisiblePatches { dim: usize, patches: usize },

    // octree
    #[error("octree stream truncated")]
    TruncatedOctree,
    #[error("octree node with no children at byte {0}")]
    EmptyOctreeNode(usize),
    #[error("octree/block mismatch: {0}")]
    OctreeBlockMismatch(String),

    // tensors
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid convolution: {0}")]
    InvalidConv(String),
    #[error("loss is not finite")]
    NonFiniteLoss,

    // models
    #[error("invalid model bundle: {0}")]
    InvalidBundle(String),
    #[error("bundle checksum mismatch")]
    BundleChecksum,
    #[error("unsupported bundle version {0}")]
    BundleVersion(u32),
    #[error("training data is empty")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    // entropy coding and bitstream
    #[error("arithmetic-coded stream exhausted")]
    StreamExhausted,
    #[error("invalid bitstream: {0}")]
    InvalidBitstream(String),
    #[error("unsupported bitstream version {0}")]
    BitstreamVersion(u8),
    #[error(
        "bundle fingerprint {found:016x} does not match bitstream fingerprint {expected:016x}"
    )]
    FingerprintMismatch { expected: u64, found: u64 },
}

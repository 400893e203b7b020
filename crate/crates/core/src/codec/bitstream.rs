//! Container layout of a coded point cloud (integers little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "MSVX"
//!      4     1  version
//!      5     1  flags (bit 0: children of empty parents are skipped)
//!      6     1  grid precision n (bits per coordinate)
//!      7     1  base edge
//!      8     1  number of scales
//!      9     8  model bundle fingerprint
//!     17     4  octree length L
//!     21     L  octree bytes
//!   21+L     4  payload length P
//!   25+L     P  arithmetic-coded payload
//! ```

use crate::error::{Error, Result};

pub const BITSTREAM_MAGIC: &[u8; 4] = b"MSVX";
pub const BITSTREAM_VERSION: u8 = 1;
/// Bytes of fixed fields, including both length prefixes.
pub const HEADER_BYTES: usize = 25;
pub const FLAG_PRUNE_EMPTY_PARENTS: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub version: u8,
    pub flags: u8,
    pub precision_bits: u8,
    pub base_edge: u8,
    pub num_scales: u8,
    pub fingerprint: u64,
}

impl BitstreamHeader {
    pub fn prune_empty_parents(&self) -> bool {
        self.flags & FLAG_PRUNE_EMPTY_PARENTS != 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: BitstreamHeader,
    pub octree: Vec<u8>,
    pub payload: Vec<u8>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_BYTES + self.octree.len() + self.payload.len());
        out.extend_from_slice(BITSTREAM_MAGIC);
        out.extend_from_slice(&[
            h.version,
            h.flags,
            h.precision_bits,
            h.base_edge,
            h.num_scales,
        ]);
        out.extend_from_slice(&h.fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.octree.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.octree);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != BITSTREAM_MAGIC {
            return Err(Error::InvalidBitstream("bad magic".into()));
        }
        let truncated = || Error::InvalidBitstream("truncated".into());
        if bytes.len() < 21 {
            return Err(truncated());
        }
        let header = BitstreamHeader {
            version: bytes[4],
            flags: bytes[5],
            precision_bits: bytes[6],
            base_edge: bytes[7],
            num_scales: bytes[8],
            fingerprint: u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes")),
        };
        if header.version != BITSTREAM_VERSION {
            return Err(Error::BitstreamVersion(header.version));
        }
        if header.flags & !FLAG_PRUNE_EMPTY_PARENTS != 0 {
            return Err(Error::InvalidBitstream(format!(
                "unknown flags {:#04x}",
                header.flags
            )));
        }
        let read_len = |at: usize| -> Result<usize> {
            let b = bytes.get(at..at + 4).ok_or_else(truncated)?;
            Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        };
        let octree_len = read_len(17)?;
        let octree = bytes
            .get(21..21 + octree_len)
            .ok_or_else(truncated)?
            .to_vec();
        let payload_at = 21 + octree_len;
        let payload_len = read_len(payload_at)?;
        let payload = bytes
            .get(payload_at + 4..payload_at + 4 + payload_len)
            .ok_or_else(truncated)?
            .to_vec();
        if payload_at + 4 + payload_len != bytes.len() {
            return Err(Error::InvalidBitstream("trailing bytes".into()));
        }
        Ok(Self {
            header,
            octree,
            payload,
        })
    }

    /// Sizes in bytes of the header, octree and payload segments; they add
    /// up to the file size.
    pub fn segment_bytes(&self) -> [usize; 3] {
        [HEADER_BYTES, self.octree.len(), self.payload.len()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bitstream {
        Bitstream {
            header: BitstreamHeader {
                version: BITSTREAM_VERSION,
                flags: 0,
                precision_bits: 9,
                base_edge: 8,
                num_scales: 3,
                fingerprint: 0x0123_4567_89ab_cdef,
            },
            octree: vec![0x81, 0x01, 0x80],
            payload: vec![1, 2, 3, 4, 5],
        }
    }

    #[test]
    fn layout_and_round_trip() {
        let s = sample();
        let bytes = s.to_bytes();
        assert_eq!(bytes.len(), HEADER_BYTES + 3 + 5);
        assert_eq!(&bytes[..4], b"MSVX");
        assert_eq!(bytes[6], 9);
        assert_eq!(&bytes[9..17], &0x0123_4567_89ab_cdefu64.to_le_bytes());
        assert_eq!(&bytes[17..21], &[3, 0, 0, 0]);
        assert_eq!(Bitstream::from_bytes(&bytes).unwrap(), s);
        assert_eq!(s.segment_bytes().iter().sum::<usize>(), bytes.len());
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes();
        let mut magic = bytes.clone();
        magic[1] = b'X';
        assert!(matches!(
            Bitstream::from_bytes(&magic),
            Err(Error::InvalidBitstream(_))
        ));
        let mut version = bytes.clone();
        version[4] = 2;
        assert!(matches!(
            Bitstream::from_bytes(&version),
            Err(Error::BitstreamVersion(2))
        ));
        assert!(Bitstream::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Bitstream::from_bytes(&longer).is_err());
        let mut flags = bytes;
        flags[5] = 0x80;
        assert!(Bitstream::from_bytes(&flags).is_err());
    }
}

//! The model bundle: every network the codec needs plus the configuration
//! they were built for, in one checksummed file.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! "MSVB" | version u32 | config_len u32 | config (UTF-8 key=value lines)
//! | model_count u32 | per model: name_len u16, name, tensor_count u32,
//!   per tensor: name_len u16, name, ndim u8, dims u32 × ndim, f32 data
//! | SHA-256 of everything before it (32 bytes)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{parse_kv, ArchConfig, BaseVoxelDnn, CodecConfig, GroupPredictor, LayerStack};

pub const BUNDLE_MAGIC: &[u8; 4] = b"MSVB";
pub const BUNDLE_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const META_PREFIX: &str = "train.";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub arch: ArchConfig,
    pub codec: CodecConfig,
    /// Free-form training record (seed, learning rate, final loss, ...).
    pub meta: BTreeMap<String, String>,
    base: BaseVoxelDnn,
    /// Indexed by `(scale - 1) * 8 + (group - 1)`.
    groups: Vec<GroupPredictor>,
}

impl ModelBundle {
    /// Freshly initialized networks for every model slot.
    pub fn new_random(arch: ArchConfig, codec: CodecConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        codec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = BaseVoxelDnn::new(&arch, codec.base_edge, &mut rng)?;
        let mut groups = Vec::with_capacity(8 * codec.num_scales);
        for scale in 1..=codec.num_scales {
            for g in 1..=8 {
                groups.push(GroupPredictor::new(
                    &arch,
                    codec.scale_edge(scale - 1),
                    g,
                    &mut rng,
                )?);
            }
        }
        Ok(Self {
            arch,
            codec,
            meta: BTreeMap::new(),
            base,
            groups,
        })
    }

    pub fn base(&self) -> &BaseVoxelDnn {
        &self.base
    }

    pub fn base_mut(&mut self) -> &mut BaseVoxelDnn {
        &mut self.base
    }

    fn slot(&self, scale: usize, group: u8) -> Result<usize> {
        if scale == 0 || scale > self.codec.num_scales {
            return Err(Error::InvalidConfig(format!(
                "scale {scale} outside 1..={}",
                self.codec.num_scales
            )));
        }
        if !(1..=8).contains(&group) {
            return Err(Error::InvalidGroup(group));
        }
        Ok((scale - 1) * 8 + group as usize - 1)
    }

    /// Predictor for group `group` of pyramid level `scale` (1 = first level
    /// above the base).
    pub fn group(&self, scale: usize, group: u8) -> Result<&GroupPredictor> {
        Ok(&self.groups[self.slot(scale, group)?])
    }

    pub fn group_mut(&mut self, scale: usize, group: u8) -> Result<&mut GroupPredictor> {
        let i = self.slot(scale, group)?;
        Ok(&mut self.groups[i])
    }

    pub fn model_count(&self) -> usize {
        1 + self.groups.len()
    }

    /// Model names in file order: `base`, then `scale{s}.group{g}`.
    pub fn model_names(&self) -> Vec<String> {
        let mut names = vec!["base".to_string()];
        for scale in 1..=self.codec.num_scales {
            for g in 1..=8 {
                names.push(format!("scale{scale}.group{g}"));
            }
        }
        names
    }

    pub(crate) fn stacks(&self) -> Vec<&dyn LayerStack> {
        let mut out: Vec<&dyn LayerStack> = vec![&self.base];
        out.extend(self.groups.iter().map(|g| g as &dyn LayerStack));
        out
    }

    pub(crate) fn stacks_mut(&mut self) -> Vec<&mut dyn LayerStack> {
        let mut out: Vec<&mut dyn LayerStack> = vec![&mut self.base];
        out.extend(self.groups.iter_mut().map(|g| g as &mut dyn LayerStack));
        out
    }

    pub fn param_count(&self) -> usize {
        self.stacks().iter().map(|s| s.param_count()).sum()
    }

    pub fn config_text(&self) -> String {
        let mut text = self.arch.to_kv();
        text.push_str(&format!(
            "base_edge={}\nnum_scales={}\ngroup_order=corner-raster\n",
            self.codec.base_edge, self.codec.num_scales
        ));
        for (k, v) in &self.meta {
            text.push_str(&format!("{META_PREFIX}{k}={v}\n"));
        }
        text
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        let config = self.config_text();
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&(self.model_count() as u32).to_le_bytes());
        for (name, stack) in self.model_names().iter().zip(self.stacks()) {
            put_name(&mut out, name);
            let convs = stack.convs();
            out.extend_from_slice(&(2 * convs.len() as u32).to_le_bytes());
            for (layer, conv) in convs {
                for (suffix, t) in [("weight", &conv.weight), ("bias", &conv.bias)] {
                    put_name(&mut out, &format!("{layer}.{suffix}"));
                    out.push(t.shape().len() as u8);
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u32).to_le_bytes());
                    }
                    for &v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != BUNDLE_MAGIC {
            return Err(Error::InvalidBundle("bad magic".into()));
        }
        if bytes.len() < 8 + DIGEST_LEN {
            return Err(Error::BundleChecksum);
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::BundleChecksum);
        }
        let mut r = Reader {
            bytes: body,
            pos: 4,
        };
        let version = r.u32()?;
        if version != BUNDLE_VERSION {
            return Err(Error::BundleVersion(version));
        }
        let config_len = r.u32()? as usize;
        let config = std::str::from_utf8(r.take(config_len)?)
            .map_err(|_| Error::InvalidBundle("config is not UTF-8".into()))?;
        let map = parse_kv(config)?;
        let mut arch = ArchConfig::desk();
        arch.apply_kv(&map)?;
        let mut codec = CodecConfig::default();
        codec.apply_kv(&map)?;
        if map.get("group_order").map(String::as_str) != Some("corner-raster") {
            return Err(Error::InvalidBundle("unknown group order".into()));
        }
        let meta = map
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(META_PREFIX)
                    .map(|k| (k.to_string(), v.clone()))
            })
            .collect();

        let mut bundle = ModelBundle::new_random(arch, codec, 0)?;
        bundle.meta = meta;
        let names = bundle.model_names();
        let count = r.u32()? as usize;
        if count != names.len() {
            return Err(Error::InvalidBundle(format!(
                "{count} models stored, configuration needs {}",
                names.len()
            )));
        }
        for (name, stack) in names.iter().zip(bundle.stacks_mut()) {
            let stored = r.name()?;
            if &stored != name {
                return Err(Error::InvalidBundle(format!(
                    "expected model {name}, found {stored}"
                )));
            }
            let expected: Vec<String> = stack
                .convs()
                .iter()
                .flat_map(|(l, _)| [format!("{l}.weight"), format!("{l}.bias")])
                .collect();
            let tensors = r.u32()? as usize;
            if tensors != expected.len() {
                return Err(Error::InvalidBundle(format!(
                    "model {name}: {tensors} tensors, expected {}",
                    expected.len()
                )));
            }
            for (want, slot) in expected.iter().zip(stack.params_mut()) {
                let tname = r.name()?;
                if &tname != want {
                    return Err(Error::InvalidBundle(format!(
                        "{name}: expected {want}, found {tname}"
                    )));
                }
                let ndim = r.take(1)?[0] as usize;
                let dims = (0..ndim)
                    .map(|_| r.u32().map(|d| d as usize))
                    .collect::<Result<Vec<_>>>()?;
                if dims != slot.shape() {
                    return Err(Error::InvalidBundle(format!(
                        "{name}.{tname}: stored shape {dims:?}, configuration needs {:?}",
                        slot.shape()
                    )));
                }
                let raw = r.take(slot.len() * 4)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                *slot = Tensor::from_vec(&dims, data)?;
            }
        }
        if r.pos != body.len() {
            return Err(Error::InvalidBundle("trailing bytes".into()));
        }
        Ok(bundle)
    }

    /// First eight bytes of the file checksum, read little-endian. Bitstreams
    /// record it so they are only decoded with the bundle that wrote them.
    pub fn fingerprint(&self) -> u64 {
        fingerprint_of(&self.to_bytes())
    }
}

fn fingerprint_of(bytes: &[u8]) -> u64 {
    let digest = &bytes[bytes.len() - DIGEST_LEN..];
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::InvalidBundle("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn name(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::InvalidBundle("name is not UTF-8".into()))
    }
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    std::fs::write(path, bundle.to_bytes())?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    ModelBundle::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::VoxelBlock;

    fn small() -> ModelBundle {
        let arch = ArchConfig {
            group_features: 4,
            group_hidden: 2,
            base_features: 4,
            base_hidden: 2,
            ..ArchConfig::desk()
        };
        ModelBundle::new_random(arch, CodecConfig::new(4, 2).unwrap(), 5).unwrap()
    }

    #[test]
    fn default_bundle_has_25_models() {
        let b = ModelBundle::new_random(ArchConfig::desk(), CodecConfig::default(), 1).unwrap();
        assert_eq!(b.model_count(), 25);
        assert_eq!(b.model_names()[24], "scale3.group8");
        assert_eq!(b.group(3, 8).unwrap().context_edge(), 32);
        assert!(b.group(4, 1).is_err());
        assert!(b.group(1, 0).is_err());
    }

    #[test]
    fn round_trip_is_exact() {
        let mut b = small();
        b.meta.insert("seed".into(), "5".into());
        let bytes = b.to_bytes();
        let back = ModelBundle::from_bytes(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.fingerprint(), b.fingerprint());
        let mut block = VoxelBlock::new(4).unwrap();
        block.set(1, 2, 3, true);
        let a = b.base().forward_full(&block).unwrap();
        let c = back.base().forward_full(&block).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = small().to_bytes();
        assert!(matches!(
            ModelBundle::from_bytes(&bytes[..bytes.len() - 10]),
            Err(Error::BundleChecksum)
        ));
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(
            ModelBundle::from_bytes(&flipped),
            Err(Error::BundleChecksum)
        ));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(
            ModelBundle::from_bytes(&magic),
            Err(Error::InvalidBundle(_))
        ));
        let mut version = bytes[..bytes.len() - DIGEST_LEN].to_vec();
        version[4] = 9;
        let digest = Sha256::digest(&version);
        version.extend_from_slice(&digest);
        assert!(matches!(
            ModelBundle::from_bytes(&version),
            Err(Error::BundleVersion(9))
        ));
    }

    #[test]
    fn different_weights_change_fingerprint() {
        let a = small();
        let mut b = a.clone();
        *b.group_mut(1, 1).unwrap().output_bias_mut() = 0.25;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}

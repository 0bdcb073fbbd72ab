//! Binary checkpoint format for [`PolicyParameters`].
//!
//! All integers are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"BCRCKPT\0"
//! 8       4     u32    format version (currently 1)
//! 12      ...   arch   actor arch descriptor
//! ..      ...   arch   critic arch descriptor
//! ..      8     u64    actor parameter count  (A)
//! ..      8     u64    critic parameter count (C)
//! ..      8*A   f64    actor parameters
//! ..      8*C   f64    critic parameters
//!
//! arch descriptor:
//!   u32 input size
//!   u32 layer count L
//!   L x { u32 layer size, u8 activation (0 linear, 1 tanh, 2 relu) }
//! ```
//!
//! Parameters inside each block follow [`Arch`]'s layer order: the row-major
//! `input×output` weight matrix followed by the bias vector.

use std::path::Path;

use super::network::{Activation, Arch, LayerSpec, PolicyParameters};
use super::NnError;

pub const MAGIC: &[u8; 8] = b"BCRCKPT\0";
pub const VERSION: u32 = 1;

pub fn encode(params: &PolicyParameters) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * (params.actor_weights.len() + params.critic_weights.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    write_arch(&mut out, &params.actor_arch);
    write_arch(&mut out, &params.critic_arch);
    out.extend_from_slice(&(params.actor_weights.len() as u64).to_le_bytes());
    out.extend_from_slice(&(params.critic_weights.len() as u64).to_le_bytes());
    for w in params.actor_weights.iter().chain(&params.critic_weights) {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<PolicyParameters, NnError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let actor_arch = read_arch(&mut r)?;
    let critic_arch = read_arch(&mut r)?;
    let a = r.u64()? as usize;
    let c = r.u64()? as usize;
    if a != actor_arch.param_count() || c != critic_arch.param_count() {
        return Err(NnError::Checkpoint("parameter count does not match arch".into()));
    }
    let actor_weights = (0..a).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    let critic_weights = (0..c).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    if r.pos != bytes.len() {
        return Err(NnError::Checkpoint("trailing bytes".into()));
    }
    Ok(PolicyParameters {
        actor_weights,
        critic_weights,
        actor_arch,
        critic_arch,
        version,
    })
}

pub fn save(params: &PolicyParameters, path: &Path) -> Result<(), NnError> {
    std::fs::write(path, encode(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PolicyParameters, NnError> {
    decode(&std::fs::read(path)?)
}

fn write_arch(out: &mut Vec<u8>, arch: &Arch) {
    out.extend_from_slice(&(arch.input as u32).to_le_bytes());
    out.extend_from_slice(&(arch.layers.len() as u32).to_le_bytes());
    for layer in &arch.layers {
        out.extend_from_slice(&(layer.size as u32).to_le_bytes());
        out.push(layer.activation.tag());
    }
}

fn read_arch(r: &mut Reader<'_>) -> Result<Arch, NnError> {
    let input = r.u32()? as usize;
    let n = r.u32()? as usize;
    if n > 1024 {
        return Err(NnError::Checkpoint(format!("implausible layer count {n}")));
    }
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let size = r.u32()? as usize;
        let tag = r.take(1)?[0];
        let activation = Activation::from_tag(tag)
            .ok_or_else(|| NnError::Checkpoint(format!("unknown activation tag {tag}")))?;
        layers.push(LayerSpec { size, activation });
    }
    Ok(Arch { input, layers })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NnError::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, NnError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkConfig;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn header_layout_is_stable() {
        let p = PolicyParameters::zeros(2, 3, &[4]);
        let bytes = encode(&p);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        // actor input size
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        let header = 12 + 2 * (8 + 2 * 5) + 16;
        assert_eq!(bytes.len(), header + 8 * (p.actor_weights.len() + p.critic_weights.len()));
    }

    #[test]
    fn truncated_or_corrupt_input_is_rejected() {
        let p = PolicyParameters::zeros(2, 3, &[4]);
        let bytes = encode(&p);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(seed in any::<u64>(), input in 1usize..20, actions in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = NetworkConfig { hidden: vec![5, 3], ..NetworkConfig::default() };
            let p = PolicyParameters::new(input, actions, &cfg, &mut rng);
            let back = decode(&encode(&p)).unwrap();
            prop_assert_eq!(
                back.actor_weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>(),
                p.actor_weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>()
            );
            prop_assert_eq!(back, p);
        }
    }
}

//! Container layout, all integers little-endian:
//!
//! ```text
//! "HEMP" | version u8 | order u8 | layer count u16
//! per layer:
//!   name length u16 | name (UTF-8) | rank u8 | dims u32 × rank
//!   N u16 | levels f32 × N | payload length u32 | payload
//! CRC-32 (IEEE) of every preceding byte, u32
//! ```
//!
//! Payloads are independent range-coded streams whose context is the
//! previous `order − 1` symbols of the layer plus the symbol's position in
//! its n-tuple of the global parameter stream. Contexts restart at every
//! layer.

use crate::lloyd::{Codebook, IndexMap};
use crate::param_store::ParamStore;

use super::range_coder::{decode_stream_in, encode_stream_in, TupleLayout};
use super::CodecError;

pub const MAGIC: [u8; 4] = *b"HEMP";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub name: String,
    pub shape: Vec<usize>,
    pub codebook: Codebook,
    pub indices: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    /// Entropy order `n`; payloads use `n − 1` symbols of context.
    pub order: usize,
    pub layers: Vec<QuantizedLayer>,
}

impl QuantizedModel {
    pub fn from_store(store: &ParamStore, codebooks: &[Codebook], indices: &IndexMap, order: usize) -> Result<Self, CodecError> {
        if codebooks.len() != store.layers().len() || indices.layers.len() != store.layers().len() {
            return Err(CodecError::Unencodable("store, codebooks and indices disagree on layer count".into()));
        }
        let layers = store
            .layers()
            .iter()
            .zip(codebooks)
            .zip(&indices.layers)
            .map(|((l, cb), q)| QuantizedLayer {
                name: l.name.clone(),
                shape: l.shape.clone(),
                codebook: cb.clone(),
                indices: q.clone(),
            })
            .collect();
        Ok(QuantizedModel { order, layers })
    }

    pub fn index_map(&self) -> IndexMap {
        IndexMap {
            layers: self.layers.iter().map(|l| l.indices.clone()).collect(),
        }
    }

    pub fn codebooks(&self) -> Vec<Codebook> {
        self.layers.iter().map(|l| l.codebook.clone()).collect()
    }

    /// Dequantized parameters as a store.
    pub fn to_store(&self) -> crate::Result<ParamStore> {
        let mut store = ParamStore::new();
        for l in &self.layers {
            let values = crate::lloyd::reconstruct(&l.indices, &l.codebook)?;
            store.push_layer(l.name.clone(), l.shape.clone(), values)?;
        }
        Ok(store)
    }
}

fn put_u16(out: &mut Vec<u8>, v: usize, what: &str) -> Result<(), CodecError> {
    let v = u16::try_from(v).map_err(|_| CodecError::Unencodable(format!("{what} {v} exceeds u16")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<(), CodecError> {
    let v = u32::try_from(v).map_err(|_| CodecError::Unencodable(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(model: &QuantizedModel) -> Result<Vec<u8>, CodecError> {
    if model.order == 0 || model.order > 8 {
        return Err(CodecError::Unencodable(format!("order {}", model.order)));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(FORMAT_VERSION);
    out.push(model.order as u8);
    put_u16(&mut out, model.layers.len(), "layer count")?;
    let mut offset = 0usize;
    for layer in &model.layers {
        let count: usize = layer.shape.iter().product();
        if count != layer.indices.len() {
            return Err(CodecError::Unencodable(format!(
                "layer {}: shape {:?} vs {} indices",
                layer.name,
                layer.shape,
                layer.indices.len()
            )));
        }
        put_u16(&mut out, layer.name.len(), "name length")?;
        out.extend_from_slice(layer.name.as_bytes());
        let rank = u8::try_from(layer.shape.len()).map_err(|_| CodecError::Unencodable("rank exceeds 255".into()))?;
        out.push(rank);
        for &d in &layer.shape {
            put_u32(&mut out, d, "dimension")?;
        }
        let levels = layer.codebook.levels();
        put_u16(&mut out, levels.len(), "level count")?;
        for &r in levels {
            out.extend_from_slice(&(r as f32).to_le_bytes());
        }
        let layout = TupleLayout::new(model.order, offset);
        offset += count;
        let payload = encode_stream_in(&layer.indices, levels.len(), model.order - 1, layout)?;
        put_u32(&mut out, payload.len(), "payload length")?;
        out.extend_from_slice(&payload);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CodecError::Truncated {
            offset: self.pos,
            needed: n,
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<usize, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize)
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

struct RawLayer<'a> {
    name: String,
    shape: Vec<usize>,
    levels: Vec<f64>,
    payload: &'a [u8],
}

pub fn decode(bytes: &[u8]) -> Result<QuantizedModel, CodecError> {
    if bytes.len() < 4 {
        return Err(CodecError::Truncated { offset: 0, needed: 4 });
    }
    if bytes[..4] != MAGIC {
        return Err(CodecError::BadMagic(bytes[..4].try_into().unwrap()));
    }
    // the checksum trails the body; parse the body alone so a short file
    // reports truncation rather than a checksum mismatch
    let body_len = bytes.len().saturating_sub(4);
    let mut r = Reader {
        bytes: &bytes[..body_len],
        pos: 4,
    };
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(CodecError::UnsupportedVersion(version));
    }
    let order = r.u8()? as usize;
    if order == 0 || order > 8 {
        return Err(CodecError::Malformed(format!("order {order}")));
    }
    let layer_count = r.u16()?;
    let mut raw = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let name_len = r.u16()?;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CodecError::Malformed("layer name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = r.u16()?;
        let levels = (0..n)
            .map(|_| r.u32().map(|b| f32::from_bits(b) as f64))
            .collect::<Result<Vec<_>, _>>()?;
        let payload_len = r.u32()? as usize;
        let payload = r.take(payload_len)?;
        raw.push(RawLayer {
            name,
            shape,
            levels,
            payload,
        });
    }
    if bytes.len() < r.pos + 4 {
        return Err(CodecError::Truncated { offset: r.pos, needed: 4 });
    }
    if r.pos != body_len {
        return Err(CodecError::Malformed(format!("{} trailing bytes", body_len - r.pos)));
    }
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_len]);
    if stored != computed {
        return Err(CodecError::BadChecksum { stored, computed });
    }

    let mut offset = 0usize;
    let layers = raw
        .into_iter()
        .enumerate()
        .map(|(id, l)| {
            let codebook = Codebook::new(id, l.levels).map_err(|e| CodecError::Malformed(format!("layer {}: {e}", l.name)))?;
            if l.shape.is_empty() || l.shape.contains(&0) {
                return Err(CodecError::Malformed(format!("layer {}: shape {:?}", l.name, l.shape)));
            }
            let count = l
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CodecError::Malformed(format!("layer {}: shape overflows", l.name)))?;
            let layout = TupleLayout::new(order, offset);
            offset += count;
            let indices = decode_stream_in(l.payload, count, codebook.level_count(), order - 1, layout)?;
            Ok(QuantizedLayer {
                name: l.name,
                shape: l.shape,
                codebook,
                indices,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(QuantizedModel { order, layers })
}

/// One byte per symbol (`index − 1`), layers concatenated in order.
pub fn export_raw_indices(indices: &IndexMap, codebooks: &[Codebook]) -> Result<Vec<u8>, CodecError> {
    if let Some(cb) = codebooks.iter().find(|cb| cb.level_count() > 256) {
        return Err(CodecError::Unencodable(format!(
            "layer {} has {} levels; raw export needs N <= 256",
            cb.layer_id,
            cb.level_count()
        )));
    }
    indices
        .layers
        .iter()
        .flatten()
        .map(|&q| {
            u8::try_from(q.wrapping_sub(1)).map_err(|_| CodecError::Unencodable(format!("index {q}")))
        })
        .collect()
}

/// Byte offset at which each layer starts in the raw export.
pub fn raw_layer_offsets(indices: &IndexMap) -> Vec<usize> {
    let mut acc = 0;
    indices
        .layers
        .iter()
        .map(|l| {
            let start = acc;
            acc += l.len();
            start
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(seed: u64) -> QuantizedModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let order = rng.gen_range(1..=3);
        let layers = (0..rng.gen_range(1..4))
            .map(|i| {
                let shape: Vec<usize> = (0..rng.gen_range(1..3)).map(|_| rng.gen_range(1..20)).collect();
                let n = rng.gen_range(2..10);
                let mut levels: Vec<f64> = (0..n).map(|k| (k as f32 * 0.5 + rng.gen_range(0.0f32..0.4)) as f64).collect();
                levels.sort_by(f64::total_cmp);
                let count: usize = shape.iter().product();
                QuantizedLayer {
                    name: format!("layer{i}.weight"),
                    shape,
                    codebook: Codebook::new(i, levels).unwrap(),
                    indices: (0..count).map(|_| rng.gen_range(1..=n as u32)).collect(),
                }
            })
            .collect();
        QuantizedModel { order, layers }
    }

    #[test]
    fn layout_header() {
        let m = random_model(1);
        let bytes = encode(&m).unwrap();
        assert_eq!(&bytes[..4], b"HEMP");
        assert_eq!(bytes[4], FORMAT_VERSION);
        assert_eq!(bytes[5] as usize, m.order);
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]) as usize, m.layers.len());
        let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        assert_eq!(crc, crc32fast::hash(&bytes[..bytes.len() - 4]));
    }

    #[test]
    fn deterministic_encoding() {
        let m = random_model(2);
        assert_eq!(encode(&m).unwrap(), encode(&m).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let m = random_model(3);
        let bytes = encode(&m).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(CodecError::BadMagic(_))));

        // last payload byte sits just before the checksum
        let mut flipped = bytes.clone();
        let at = bytes.len() - 5;
        flipped[at] ^= 0x40;
        assert!(matches!(decode(&flipped), Err(CodecError::BadChecksum { .. })));

        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(CodecError::Truncated { .. })), "cut {cut}");
        }

        let mut v = bytes.clone();
        v[4] = 9;
        assert_eq!(decode(&v), Err(CodecError::UnsupportedVersion(9)));
    }

    #[test]
    fn raw_export() {
        let idx = IndexMap {
            layers: vec![vec![1, 2], vec![3, 1]],
        };
        let cbs = vec![
            Codebook::new(0, vec![0.0, 1.0]).unwrap(),
            Codebook::new(1, vec![0.0, 1.0, 2.0]).unwrap(),
        ];
        assert_eq!(export_raw_indices(&idx, &cbs).unwrap(), vec![0, 1, 2, 0]);
        assert_eq!(raw_layer_offsets(&idx), vec![0, 2]);
        let big = vec![Codebook::new(0, (0..300).map(f64::from).collect()).unwrap()];
        let idx = IndexMap { layers: vec![vec![1]] };
        assert!(export_raw_indices(&idx, &big).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(seed in any::<u64>()) {
            let m = random_model(seed);
            let bytes = encode(&m).unwrap();
            prop_assert_eq!(decode(&bytes).unwrap(), m);
        }
    }
}

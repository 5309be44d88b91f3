//! Named-array container used for backbones, trained models and states.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"DMEM"
//! u8     format version (1)
//! u32    entry count
//! entry* u16 name length, name (UTF-8)
//!        u8  dtype: 0 = f32, 1 = f64, 2 = u64, 3 = raw bytes
//!        u8  ndim, then ndim x u32 extents
//!        data, product(extents) elements
//! ```
//!
//! Raw-byte entries carry JSON metadata such as model configs.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::model::{DeltaMem, LayerMemory, MemoryConfig};
use crate::numerics::{DType, Scalar, Tensor};
use crate::osam::{MemoryState, OnlineState};
use crate::params::Parameters;
use crate::projections::MemoryProjections;
use crate::steering::SteeringParams;

pub const MAGIC: &[u8; 4] = b"DMEM";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F32(Vec<usize>, Vec<f32>),
    F64(Vec<usize>, Vec<f64>),
    U64(Vec<usize>, Vec<u64>),
    Bytes(Vec<u8>),
}

impl Entry {
    pub fn tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => Entry::F32(t.shape().to_vec(), t.data().iter().map(|x| x.as_f64() as f32).collect()),
            DType::F64 => Entry::F64(t.shape().to_vec(), t.data().iter().map(|x| x.as_f64()).collect()),
        }
    }

    /// Reads a float entry into `T`; f32 and f64 entries are both accepted.
    pub fn to_tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        match self {
            Entry::F32(s, d) => Tensor::new(s.clone(), d.iter().map(|&x| T::of(x as f64)).collect()),
            Entry::F64(s, d) => Tensor::new(s.clone(), d.iter().map(|&x| T::of(x)).collect()),
            _ => Err(Error::Format(format!("`{name}` is not a float tensor"))),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            Entry::F32(..) => 0,
            Entry::F64(..) => 1,
            Entry::U64(..) => 2,
            Entry::Bytes(..) => 3,
        }
    }

    fn shape(&self) -> Vec<usize> {
        match self {
            Entry::F32(s, _) | Entry::F64(s, _) | Entry::U64(s, _) => s.clone(),
            Entry::Bytes(b) => vec![b.len()],
        }
    }
}

/// Ordered set of named entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub entries: Vec<(String, Entry)>,
}

impl Container {
    pub fn push(&mut self, name: impl Into<String>, e: Entry) {
        self.entries.push((name.into(), e));
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name)?.to_tensor(name)
    }

    pub fn json<V: serde::de::DeserializeOwned>(&self, name: &str) -> Result<V> {
        match self.get(name)? {
            Entry::Bytes(b) => Ok(serde_json::from_slice(b)?),
            _ => Err(Error::Format(format!("`{name}` is not a metadata entry"))),
        }
    }

    pub fn push_json<V: serde::Serialize>(&mut self, name: &str, v: &V) -> Result<()> {
        self.push(name, Entry::Bytes(serde_json::to_vec(v)?));
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&u32::try_from(self.entries.len()).map_err(|_| fmt("too many entries"))?.to_le_bytes());
        for (name, e) in &self.entries {
            let n = u16::try_from(name.len()).map_err(|_| fmt("name too long"))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(e.dtype());
            let shape = e.shape();
            out.push(u8::try_from(shape.len()).map_err(|_| fmt("too many dimensions"))?);
            for s in &shape {
                out.extend_from_slice(&u32::try_from(*s).map_err(|_| fmt("extent too large"))?.to_le_bytes());
            }
            match e {
                Entry::F32(s, d) => {
                    check_len(name, s, d.len())?;
                    d.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                Entry::F64(s, d) => {
                    check_len(name, s, d.len())?;
                    d.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                Entry::U64(s, d) => {
                    check_len(name, s, d.len())?;
                    d.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                Entry::Bytes(b) => out.extend_from_slice(b),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = r.take(1)?[0];
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| fmt("name is not UTF-8"))?;
            let dtype = r.take(1)?[0];
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|x| x as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let e = match dtype {
                0 => Entry::F32(
                    shape,
                    r.take(numel * 4)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                1 => Entry::F64(
                    shape,
                    r.take(numel * 8)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                2 => Entry::U64(
                    shape,
                    r.take(numel * 8)?
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                3 if ndim == 1 => Entry::Bytes(r.take(numel)?.to_vec()),
                _ => return Err(Error::Format(format!("unknown dtype {dtype} for `{name}`"))),
            };
            entries.push((name, e));
        }
        if r.pos != bytes.len() {
            return Err(fmt("trailing bytes"));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn fmt(msg: &str) -> Error {
    Error::Format(msg.to_string())
}

fn check_len(name: &str, shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().product::<usize>() != len {
        return Err(Error::Format(format!("`{name}`: shape {shape:?} but {len} values")));
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| fmt("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn push_params<T: Scalar>(c: &mut Container, p: &dyn Parameters<T>) {
    p.visit(&mut |name, t| c.push(name, Entry::tensor(t)));
}

fn fill_params<T: Scalar>(c: &Container, p: &mut dyn Parameters<T>) -> Result<()> {
    let mut err = None;
    p.visit_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match c.tensor::<T>(name) {
            Ok(v) if v.shape() == t.shape() => {
                let grad = t.requires_grad;
                *t = v.with_grad(grad);
            }
            Ok(v) => err = Some(Error::Format(format!("`{name}`: shape {:?}, expected {:?}", v.shape(), t.shape()))),
            Err(e) => err = Some(e),
        }
    });
    err.map_or(Ok(()), Err)
}

pub fn backbone_container<T: Scalar>(b: &Backbone<T>) -> Result<Container> {
    let mut c = Container::default();
    c.push_json("meta.backbone", &b.config)?;
    push_params(&mut c, b);
    Ok(c)
}

pub fn backbone_from_container<T: Scalar>(c: &Container) -> Result<Backbone<T>> {
    let config: BackboneConfig = c.json("meta.backbone")?;
    config.validate()?;
    // Any initializer works: every tensor is overwritten below.
    let mut b = Backbone::<T>::init(config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
    fill_params(c, &mut b)?;
    Ok(b)
}

pub fn save_backbone<T: Scalar>(b: &Backbone<T>, path: &Path) -> Result<()> {
    backbone_container(b)?.save(path)
}

/// Loads a backbone frozen.
pub fn load_backbone<T: Scalar>(path: &Path) -> Result<Backbone<T>> {
    let mut b = backbone_from_container(&Container::load(path)?)?;
    b.set_trainable(false);
    Ok(b)
}

pub fn model_container<T: Scalar>(m: &DeltaMem<T>) -> Result<Container> {
    let mut c = backbone_container(&m.backbone)?;
    c.push_json("meta.memory", &m.memory)?;
    push_params(&mut c, m);
    Ok(c)
}

pub fn model_from_container<T: Scalar>(c: &Container) -> Result<DeltaMem<T>> {
    let mut backbone = backbone_from_container::<T>(c)?;
    backbone.set_trainable(false);
    let memory: MemoryConfig = c.json("meta.memory")?;
    memory.validate(backbone.config.max_seq_len)?;
    let d = backbone.config.d_model;
    let n = memory.states_per_layer()?;
    let layers = memory
        .layers
        .resolve(backbone.config.n_layers)?
        .into_iter()
        .map(|layer| {
            let projections = (0..n)
                .map(|i| {
                    let name = |f: &str| format!("projections.layer{layer}.state{i}.{f}");
                    let p = MemoryProjections {
                        wq: c.tensor(&name("wq"))?.with_grad(true),
                        wk: c.tensor(&name("wk"))?.with_grad(true),
                        wv: c.tensor(&name("wv"))?.with_grad(true),
                        wbeta: c.tensor(&name("wbeta"))?.with_grad(true),
                        b: c.tensor(&name("b"))?.with_grad(true),
                    };
                    if p.d_model() != d || p.rank() != memory.rank {
                        return Err(Error::Format(format!("{} has the wrong shape", name("wq"))));
                    }
                    p.validate()?;
                    Ok(p)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut steering = SteeringParams::zeros(memory.branches, d, n * memory.rank, memory.alpha, memory.rank);
            for (f, t) in steering.fields_mut() {
                let v: Tensor<T> = c.tensor(&format!("steering.layer{layer}.{f}"))?;
                if v.shape() != t.shape() {
                    return Err(Error::Format(format!("steering.layer{layer}.{f} has shape {:?}", v.shape())));
                }
                *t = v.with_grad(true);
            }
            Ok(LayerMemory {
                layer,
                projections,
                steering,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DeltaMem {
        backbone,
        memory,
        layers,
    })
}

pub fn save_model<T: Scalar>(m: &DeltaMem<T>, path: &Path) -> Result<()> {
    model_container(m)?.save(path)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<DeltaMem<T>> {
    model_from_container(&Container::load(path)?)
}

pub fn state_container<T: Scalar>(s: &MemoryState<T>) -> Container {
    let mut c = Container::default();
    for (layer, st) in &s.layers {
        for (i, t) in st.states().iter().enumerate() {
            c.push(format!("state.layer{layer}.state{i}"), Entry::tensor(t));
        }
        c.push(format!("state.layer{layer}.step"), Entry::U64(vec![1], vec![st.step()]));
    }
    c
}

pub fn state_from_container<T: Scalar>(c: &Container) -> Result<MemoryState<T>> {
    let mut grouped: BTreeMap<usize, (Vec<(usize, Tensor<T>)>, u64)> = BTreeMap::new();
    for (name, e) in &c.entries {
        let rest = name
            .strip_prefix("state.layer")
            .ok_or_else(|| Error::Format(format!("unexpected entry `{name}`")))?;
        let (layer, field) = rest.split_once('.').ok_or_else(|| Error::Format(format!("bad name `{name}`")))?;
        let layer: usize = layer.parse().map_err(|_| Error::Format(format!("bad layer in `{name}`")))?;
        let slot = grouped.entry(layer).or_default();
        if field == "step" {
            match e {
                Entry::U64(_, v) if v.len() == 1 => slot.1 = v[0],
                _ => return Err(Error::Format(format!("`{name}` must hold one u64"))),
            }
        } else {
            let i: usize = field
                .strip_prefix("state")
                .and_then(|x| x.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad sub-state in `{name}`")))?;
            slot.0.push((i, e.to_tensor(name)?));
        }
    }
    let mut layers = Vec::with_capacity(grouped.len());
    for (layer, (mut subs, step)) in grouped {
        subs.sort_by_key(|(i, _)| *i);
        if subs.iter().enumerate().any(|(k, (i, _))| k != *i) {
            return Err(Error::Format(format!("layer {layer}: sub-states are not contiguous")));
        }
        let rank = subs.first().map(|(_, t)| t.shape()[0]).ok_or_else(|| fmt("layer without sub-states"))?;
        let states = subs.into_iter().map(|(_, t)| t).collect();
        layers.push((layer, OnlineState::from_parts(rank, states, step)?));
    }
    Ok(MemoryState { layers })
}

pub fn save_state<T: Scalar>(s: &MemoryState<T>, path: &Path) -> Result<()> {
    state_container(s).save(path)
}

pub fn load_state<T: Scalar>(path: &Path) -> Result<MemoryState<T>> {
    state_from_container(&Container::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn container_round_trip() {
        let mut c = Container::default();
        c.push("a", Entry::F32(vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]));
        c.push("b", Entry::F64(vec![1], vec![std::f64::consts::PI]));
        c.push("c", Entry::U64(vec![2], vec![0, u64::MAX]));
        c.push("d", Entry::Bytes(b"{}".to_vec()));
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(bytes[4], FORMAT_VERSION);
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn corrupt_input_rejected() {
        let mut c = Container::default();
        c.push("a", Entry::F32(vec![2], vec![1.0, 2.0]));
        let bytes = c.to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Container::from_bytes(&bad).is_err());
        assert!(Container::from_bytes(b"NOPE").is_err());
        assert!(matches!(c.get("zzz"), Err(Error::MissingTensor(_))));
    }

    #[test]
    fn model_and_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = BackboneConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            head_dim: 4,
            vocab_size: 10,
            max_seq_len: 16,
        };
        let backbone = Backbone::<f32>::init(cfg, &mut rng).unwrap();
        let memory = MemoryConfig {
            rank: 2,
            branches: "qkvo".parse().unwrap(),
            strategy: crate::write_policy::Strategy::Msw,
            n_states: 2,
            backbone_len: 16,
            ..MemoryConfig::default()
        };
        let mut m = DeltaMem::new(backbone, memory, &mut rng).unwrap();
        for l in &mut m.layers {
            for (_, t) in l.steering.fields_mut() {
                *t = Tensor::uniform(t.shape().to_vec(), 0.3, &mut rng).with_grad(true);
            }
        }
        let back: DeltaMem<f32> = model_from_container(&Container::from_bytes(&model_container(&m).unwrap().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.layers, m.layers);
        assert_eq!(back.backbone.checksum(), m.backbone.checksum());
        assert!(back.backbone.is_frozen());

        let mut s = m.zero_state();
        m.ingest(&[1, 2, 3, 4], None, &mut s).unwrap();
        let c = state_container(&s);
        let s2: MemoryState<f32> = state_from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert!(s.bit_eq(&s2));
        assert_eq!(s, s2);
        let a = m.logits(&[5, 6], &s).unwrap();
        let b = back.logits(&[5, 6], &s2).unwrap();
        assert_eq!(a, b);
    }
}

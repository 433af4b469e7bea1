//! Binary checkpoint files.
//!
//! Layout (little-endian):
//! `"VPCK"`, `u16` version, `u32` text length, UTF-8 `key=value` lines describing
//! the network and free-form metadata, `u32` tensor count, then per tensor:
//! `u16` name length, name, `u32` rank, `u32` dims, `f32` values.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::network::{HeadKind, Model, NetworkConfig};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VPCK";
const VERSION: u16 = 1;
const META_PREFIX: &str = "meta.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub head: HeadKind,
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Snapshot of a model's parameters; extra named tensors may be appended.
    pub fn from_model<T: Scalar>(model: &Model<T>) -> Self {
        Self {
            config: model.config().clone(),
            head: model.head(),
            metadata: BTreeMap::new(),
            tensors: model
                .names()
                .iter()
                .cloned()
                .zip(model.params().iter().map(|p| p.cast::<f32>()))
                .collect(),
        }
    }

    /// Rebuilds the model from the network tensors, ignoring extra tensors.
    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>> {
        let wanted = self.config.param_shapes(self.head);
        let mut named = Vec::with_capacity(wanted.len());
        for (name, _) in &wanted {
            let t = self
                .tensor(name)
                .ok_or_else(|| Error::Parse(format!("checkpoint is missing parameter {name}")))?;
            named.push((name.clone(), t.cast::<T>()));
        }
        Model::from_parts(self.config.clone(), self.head, named)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn set_tensor(&mut self, name: &str, t: Tensor<f32>) {
        match self.tensors.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = t,
            None => self.tensors.push((name.to_string(), t)),
        }
    }

    fn header_text(&self) -> Result<String> {
        let c = &self.config;
        let blocks: Vec<String> = c.blocks.iter().map(|(n, ch)| format!("{n}x{ch}")).collect();
        let mut text = String::new();
        text.push_str(&format!("blocks={}\n", blocks.join(",")));
        text.push_str(&format!("in_channels={}\n", c.in_channels));
        text.push_str(&format!("hidden_dim={}\n", c.hidden_dim));
        text.push_str(&format!("dropout_p={}\n", c.dropout_p));
        text.push_str(&format!("embedding_dim={}\n", c.embedding_dim));
        text.push_str(&format!("num_classes={}\n", c.num_classes));
        text.push_str(&format!("head={}\n", self.head));
        for (k, v) in &self.metadata {
            if k.contains('=') || k.contains('\n') || v.contains('\n') {
                return Err(Error::Argument(format!("metadata entry {k:?} cannot be stored as key=value text")));
            }
            text.push_str(&format!("{META_PREFIX}{k}={v}\n"));
        }
        Ok(text)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let text = self.header_text()?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u16(r)?;
        if version != VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        let text_len = read_u32(r)? as usize;
        let mut text = vec![0u8; text_len];
        r.read_exact(&mut text)?;
        let text = String::from_utf8(text).map_err(|_| Error::Parse("checkpoint header is not UTF-8".into()))?;
        let (config, head, metadata) = parse_header(&text)?;

        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u16(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Parse("tensor name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Self { config, head, metadata, tensors })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read(&mut &bytes[..])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn parse_header(text: &str) -> Result<(NetworkConfig, HeadKind, BTreeMap<String, String>)> {
    let mut fields = BTreeMap::new();
    let mut metadata = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("checkpoint header line {line:?} is not key=value")))?;
        match k.strip_prefix(META_PREFIX) {
            Some(meta) => metadata.insert(meta.to_string(), v.to_string()),
            None => fields.insert(k.to_string(), v.to_string()),
        };
    }
    let get = |k: &str| fields.get(k).ok_or_else(|| Error::Parse(format!("checkpoint header lacks {k}")));
    let num = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::Parse(format!("checkpoint field {k} is not an integer")))
    };
    let blocks = get("blocks")?
        .split(',')
        .map(|b| {
            let (n, c) = b.split_once('x').ok_or_else(|| Error::Parse(format!("bad block spec {b:?}")))?;
            Ok((
                n.parse().map_err(|_| Error::Parse(format!("bad block spec {b:?}")))?,
                c.parse().map_err(|_| Error::Parse(format!("bad block spec {b:?}")))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let config = NetworkConfig {
        blocks,
        in_channels: num("in_channels")?,
        hidden_dim: num("hidden_dim")?,
        dropout_p: get("dropout_p")?
            .parse()
            .map_err(|_| Error::Parse("checkpoint field dropout_p is not a number".into()))?,
        embedding_dim: num("embedding_dim")?,
        num_classes: num("num_classes")?,
    };
    config.validate()?;
    let head = get("head")?.parse()?;
    Ok((config, head, metadata))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_survives_checkpoint() {
        let model = Model::<f32>::init(NetworkConfig::tiny(5), HeadKind::Cosine, 9).unwrap();
        let mut ck = Checkpoint::from_model(&model);
        ck.metadata.insert("classes".into(), "a,b,c,d,e".into());
        ck.set_tensor("enroll.centroids", Tensor::zeros(&[5, 256]));
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"VPCK");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.to_model::<f32>().unwrap(), model);
    }

    #[test]
    fn rejects_corruption() {
        let model = Model::<f32>::init(NetworkConfig::tiny(2), HeadKind::Dense, 1).unwrap();
        let bytes = Checkpoint::from_model(&model).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}

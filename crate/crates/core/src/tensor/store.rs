//! Named parameter sets and the `WCCG` checkpoint container.
//!
//! Container layout (all little-endian): magic `WCCG`, version u32, entry
//! count u32, then per entry: name length u32 + UTF-8 name, shape as 4 x u32,
//! f32 payload of shape.len() values.

use std::io::{Read, Write};
use std::path::Path;

use super::{Adam, AdamState, NodeId, Shape, Tape, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"WCCG";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Long-lived named tensors with their optimizer state.
#[derive(Debug, Default, Clone)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    states: Vec<AdamState>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        self.states.push(AdamState::default());
        ParamId(self.names.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    /// Binds every parameter onto `tape` as a leaf; `trainable` controls
    /// whether gradients are accumulated for them.
    pub fn bind_all(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let nodes = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t, trainable))
            .collect();
        Bound { nodes }
    }

    /// Applies one optimizer step from the gradients accumulated on `tape`.
    pub fn apply_grads(&mut self, tape: &Tape, bound: &Bound, adam: &Adam) {
        for (i, node) in bound.nodes.iter().enumerate() {
            if let Some(g) = tape.grad(*node) {
                adam.step(&mut self.tensors[i], g, &mut self.states[i]);
            }
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.names.len() as u32).to_le_bytes())?;
        for (name, t) in self.entries() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let s = t.shape();
            for dim in [s.b, s.c, s.h, s.w] {
                w.write_all(&(dim as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Data("bad checkpoint magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(r)? as usize;
        let mut params = Params::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Data("checkpoint name is not utf-8".into()))?;
            let dims: Vec<usize> = (0..4)
                .map(|_| read_u32(r).map(|v| v as usize))
                .collect::<Result<_>>()?;
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let mut data = vec![0.0f64; shape.len()];
            let mut buf = [0u8; 4];
            for v in data.iter_mut() {
                r.read_exact(&mut buf)?;
                *v = f32::from_le_bytes(buf) as f64;
            }
            params.add(name, Tensor::from_vec(shape, data)?);
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Params::read_from(&mut f)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }
}

/// Parameter-to-node mapping for one tape.
pub struct Bound {
    nodes: Vec<NodeId>,
}

impl Bound {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trips_names_shapes_values() {
        let mut p = Params::new();
        p.add("enc.w", Tensor::filled(Shape::new(4, 2, 3, 3), 0.25));
        p.add("enc.b", Tensor::filled(Shape::new(1, 4, 1, 1), -1.5));
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"WCCG");

        let q = Params::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(q.len(), 2);
        let names: Vec<_> = q.entries().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, vec!["enc.w", "enc.b"]);
        for ((_, a), (_, b)) in p.entries().zip(q.entries()) {
            assert_eq!(a.shape(), b.shape());
            assert_eq!(a.data(), b.data()); // exact: values chosen f32-representable
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let buf = b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00".to_vec();
        assert!(Params::read_from(&mut buf.as_slice()).is_err());
    }
}

//! Versioned little-endian binary dump of a fitted predictor.
//!
//! ```text
//! magic "SQNPRED\0" | version u32 | kind u8 (0 gbdt, 1 mlp)
//! layout_fp (u32 len + utf8) | n_features u32 | members u32
//! gbdt member: init f64 | trees u32 | per tree: nodes u32, per node
//!     tag u8 (0 leaf: value f64; 1 split: feature u32, left u32, right u32)
//! mlp member:  layers u32 | dims u32.. | params u32 | params f64..
//! ```

use std::io::{self, Read, Write};

use super::gbdt::{Node, Tree};
use super::{LadBooster, Members, Mlp, PredictorModel};

const MAGIC: &[u8; 8] = b"SQNPRED\0";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a predictor checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(&'static str),
}

fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64(w: &mut impl Write, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f64(r: &mut impl Read) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn get_u8(r: &mut impl Read) -> io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

impl PredictorModel {
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        let kind = match self.members {
            Members::Gbdt(_) => 0u8,
            Members::Mlp(_) => 1u8,
        };
        w.write_all(&[kind])?;
        put_u32(w, self.layout_fp.len() as u32)?;
        w.write_all(self.layout_fp.as_bytes())?;
        put_u32(w, self.n_features as u32)?;
        put_u32(w, self.member_count() as u32)?;
        match &self.members {
            Members::Gbdt(ms) => {
                for m in ms {
                    put_f64(w, m.init)?;
                    put_u32(w, m.trees.len() as u32)?;
                    for t in &m.trees {
                        put_u32(w, t.nodes.len() as u32)?;
                        for node in &t.nodes {
                            match *node {
                                Node::Leaf(v) => {
                                    w.write_all(&[0])?;
                                    put_f64(w, v)?;
                                }
                                Node::Split { feature, left, right } => {
                                    w.write_all(&[1])?;
                                    put_u32(w, feature)?;
                                    put_u32(w, left)?;
                                    put_u32(w, right)?;
                                }
                            }
                        }
                    }
                }
            }
            Members::Mlp(ms) => {
                for m in ms {
                    put_u32(w, m.dims.len() as u32)?;
                    for &d in &m.dims {
                        put_u32(w, d as u32)?;
                    }
                    put_u32(w, m.params.len() as u32)?;
                    for &p in &m.params {
                        put_f64(w, p)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let kind = get_u8(r)?;
        let fp_len = get_u32(r)? as usize;
        let mut fp = vec![0u8; fp_len];
        r.read_exact(&mut fp)?;
        let layout_fp = String::from_utf8(fp).map_err(|_| CheckpointError::Corrupt("layout fingerprint"))?;
        let n_features = get_u32(r)? as usize;
        let count = get_u32(r)? as usize;
        let members = match kind {
            0 => {
                let mut ms = Vec::with_capacity(count);
                for _ in 0..count {
                    let init = get_f64(r)?;
                    let n_trees = get_u32(r)? as usize;
                    let mut trees = Vec::with_capacity(n_trees);
                    for _ in 0..n_trees {
                        let n_nodes = get_u32(r)? as usize;
                        let mut nodes = Vec::with_capacity(n_nodes);
                        for _ in 0..n_nodes {
                            nodes.push(match get_u8(r)? {
                                0 => Node::Leaf(get_f64(r)?),
                                1 => {
                                    let feature = get_u32(r)?;
                                    let left = get_u32(r)?;
                                    let right = get_u32(r)?;
                                    if feature as usize >= n_features
                                        || left as usize >= n_nodes
                                        || right as usize >= n_nodes
                                    {
                                        return Err(CheckpointError::Corrupt("split out of range"));
                                    }
                                    Node::Split { feature, left, right }
                                }
                                _ => return Err(CheckpointError::Corrupt("node tag")),
                            });
                        }
                        if nodes.is_empty() {
                            return Err(CheckpointError::Corrupt("empty tree"));
                        }
                        trees.push(Tree { nodes });
                    }
                    ms.push(LadBooster { init, trees });
                }
                Members::Gbdt(ms)
            }
            1 => {
                let mut ms = Vec::with_capacity(count);
                for _ in 0..count {
                    let n_dims = get_u32(r)? as usize;
                    let dims = (0..n_dims).map(|_| get_u32(r).map(|d| d as usize)).collect::<io::Result<Vec<_>>>()?;
                    let n_params = get_u32(r)? as usize;
                    let expected: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
                    if dims.len() < 2 || dims[0] != n_features || n_params != expected {
                        return Err(CheckpointError::Corrupt("mlp shape"));
                    }
                    let params = (0..n_params).map(|_| get_f64(r)).collect::<io::Result<Vec<_>>>()?;
                    ms.push(Mlp { dims, params });
                }
                Members::Mlp(ms)
            }
            _ => return Err(CheckpointError::Corrupt("member kind")),
        };
        Ok(PredictorModel { layout_fp, n_features, members })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, CheckpointError> {
        let model = Self::read_from(&mut bytes)?;
        if !bytes.is_empty() {
            return Err(CheckpointError::Corrupt("trailing bytes"));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use crate::surrogate::{fit, FeatureMatrix, MlpParams, PredictorConfig, PredictorKind, PredictorModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = FeatureMatrix::new("layout", 9);
        let mut y = Vec::new();
        for _ in 0..50 {
            let row: Vec<u8> = (0..9).map(|_| rng.random_range(0..2)).collect();
            y.push(rng.random::<f64>());
            x.push(&row).unwrap();
        }
        for kind in [PredictorKind::GbdtBag, PredictorKind::MlpEnsemble] {
            let cfg = PredictorConfig {
                kind,
                mlp: MlpParams { hidden: vec![5], epochs: 3, members: 3, ..Default::default() },
                ..Default::default()
            };
            let model = fit(&x, &y, &cfg, &mut rng).unwrap();
            let bytes = model.to_bytes();
            let back = PredictorModel::from_bytes(&bytes).unwrap();
            assert_eq!(back, model);
            assert_eq!(back.to_bytes(), bytes);
            assert!(PredictorModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        }
        assert!(PredictorModel::from_bytes(b"garbage!garbage!").is_err());
    }
}

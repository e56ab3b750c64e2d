//! Binary checkpoints.
//!
//! Layout (little-endian): magic `SPECREG1`, u32 version, length-prefixed
//! architecture descriptor, length-prefixed config snapshot, u64 epoch,
//! optional normalization statistics, then tensor records of
//! (name, ndims, dims, 32-bit reals). Optimizer momentum buffers are stored
//! as records named `optim.<parameter>`.

use std::collections::HashMap;
use std::path::Path;

use crate::data::ChannelStats;
use crate::network::model::{build_network, MaskSettings, ModelSpec, Network, ParamValue};
use crate::network::optim::OptimizerState;
use crate::{Error, Real, Result};

pub const MAGIC: &[u8; 8] = b"SPECREG1";
pub const VERSION: u32 = 1;
const OPTIM_PREFIX: &str = "optim.";

/// Everything restored from a checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: Network,
    pub optimizer: OptimizerState,
    pub config: String,
    pub epoch: u64,
    pub stats: Option<ChannelStats>,
}

impl Checkpoint {
    pub fn spec(&self) -> &ModelSpec {
        self.net.spec().expect("checkpoints always carry a spec")
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} too large")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_record(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[Real]) -> Result<()> {
    put_str(out, name)?;
    put_u32(out, dims.len())?;
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

/// Serialize a network, its optimizer state and run metadata.
pub fn encode_checkpoint(
    net: &mut Network,
    optimizer: &OptimizerState,
    config: &str,
    epoch: u64,
    stats: Option<ChannelStats>,
) -> Result<Vec<u8>> {
    let spec = net
        .spec()
        .ok_or_else(|| Error::Checkpoint("only built architectures can be checkpointed".into()))?
        .to_string();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &spec)?;
    put_str(&mut out, config)?;
    out.extend_from_slice(&epoch.to_le_bytes());
    match stats {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            for v in s.mean.iter().chain(&s.std) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut records = Vec::new();
    let mut count = 0usize;
    let mut err = Ok(());
    net.visit_tensors(&mut |name, dims, data| {
        if err.is_ok() {
            err = put_record(&mut records, name, dims, data);
            count += 1;
        }
    });
    err?;
    for (name, buf) in optimizer.buffers() {
        put_record(&mut records, &format!("{OPTIM_PREFIX}{name}"), &[buf.len()], buf)?;
        count += 1;
    }
    put_u32(&mut out, count)?;
    out.extend(records);
    Ok(out)
}

pub fn save_checkpoint(
    path: &Path,
    net: &mut Network,
    optimizer: &OptimizerState,
    config: &str,
    epoch: u64,
    stats: Option<ChannelStats>,
) -> Result<()> {
    let bytes = encode_checkpoint(net, optimizer, config, epoch, stats)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

struct Record {
    dims: Vec<usize>,
    data: Vec<Real>,
}

/// Parse and validate a checkpoint. Nothing is returned unless every
/// record matches the architecture it describes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 8] = match bytes.get(..8) {
        Some(m) => m.try_into().expect("8 bytes"),
        None => return Err(Error::Checkpoint("truncated before magic".into())),
    };
    if &magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    r.pos = 8;
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let spec: ModelSpec = r.string("architecture descriptor")?.parse()?;
    let config = r.string("config snapshot")?;
    let epoch = r.u64("epoch")?;
    let stats = match r.take(1, "statistics flag")?[0] {
        0 => None,
        1 => {
            let mut v = [0.0; 6];
            for x in &mut v {
                *x = r.f64("normalization statistics")?;
            }
            Some(ChannelStats {
                mean: [v[0], v[1], v[2]],
                std: [v[3], v[4], v[5]],
            })
        }
        f => return Err(Error::Checkpoint(format!("bad statistics flag {f}"))),
    };
    let count = r.u32("record count")?;
    let mut records: HashMap<String, Record> = HashMap::with_capacity(count);
    for i in 0..count {
        let name = r.string("record name")?;
        let ndims = r.u32("record rank")?;
        let mut dims = Vec::with_capacity(ndims.min(8));
        for _ in 0..ndims {
            dims.push(r.u64("record dims")? as usize);
        }
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Checkpoint(format!("record {i} `{name}` has absurd dims {dims:?}")))?;
        let raw = r.take(len * 4, &format!("record `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as Real)
            .collect();
        if records.insert(name.clone(), Record { dims, data }).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last record",
            bytes.len() - r.pos
        )));
    }

    let mut net = build_network(&spec, MaskSettings::default(), 0)
        .map_err(|e| Error::Checkpoint(format!("descriptor `{spec}` does not build: {e}")))?;

    // validate every expected tensor before writing any of them
    let mut problem: Option<String> = None;
    net.visit_tensors(&mut |name, dims, _| {
        if problem.is_some() {
            return;
        }
        match records.get(name) {
            None => problem = Some(format!("missing tensor `{name}`")),
            Some(rec) if rec.dims != dims => {
                problem = Some(format!(
                    "tensor `{name}` has shape {:?}, architecture expects {dims:?}",
                    rec.dims
                ))
            }
            Some(_) => {}
        }
    });
    let mut plain: HashMap<String, usize> = HashMap::new();
    net.visit_params(&mut |slot| {
        if let ParamValue::Plain(v) = slot.value {
            plain.insert(slot.name, v.len());
        }
    });
    let mut optimizer = OptimizerState::new();
    let mut expected = 0usize;
    net.visit_tensors(&mut |_, _, _| expected += 1);
    for (name, rec) in &records {
        if let Some(param) = name.strip_prefix(OPTIM_PREFIX) {
            match plain.get(param) {
                Some(&n) if rec.dims == [n] => optimizer.insert(param.to_string(), rec.data.clone()),
                Some(&n) => {
                    problem.get_or_insert(format!(
                        "optimizer buffer `{param}` has dims {:?}, expected [{n}]",
                        rec.dims
                    ));
                }
                None => {
                    problem.get_or_insert(format!("optimizer buffer for unknown parameter `{param}`"));
                }
            }
        }
    }
    let tensor_records = records.keys().filter(|k| !k.starts_with(OPTIM_PREFIX)).count();
    if tensor_records != expected {
        problem.get_or_insert(format!("{tensor_records} tensor records, architecture has {expected}"));
    }
    if let Some(p) = problem {
        return Err(Error::Checkpoint(p));
    }

    net.visit_tensors(&mut |name, _, data| {
        data.copy_from_slice(&records[name].data);
    });
    Ok(Checkpoint {
        net,
        optimizer,
        config,
        epoch,
        stats,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::model::Arch;

    fn small_net() -> Network {
        let spec = ModelSpec::cifar(
            Arch::ResNet {
                stages: 2,
                blocks: 1,
                widths: vec![4, 8],
            },
            true,
        );
        build_network(&spec, MaskSettings::default(), 5).unwrap()
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let mut net = small_net();
        let mut opt = OptimizerState::new();
        opt.insert("fc.bias".into(), vec![0.5; 10]);
        let stats = ChannelStats {
            mean: [0.1, 0.2, 0.3],
            std: [0.4, 0.5, 0.6],
        };
        let a = encode_checkpoint(&mut net, &opt, "lr = 0.01\n", 7, Some(stats)).unwrap();
        let mut ck = decode_checkpoint(&a).unwrap();
        assert_eq!(ck.epoch, 7);
        assert_eq!(ck.stats, Some(stats));
        assert_eq!(ck.optimizer, opt);
        let b = encode_checkpoint(&mut ck.net, &ck.optimizer, &ck.config, ck.epoch, ck.stats).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut net = small_net();
        let mut bytes = encode_checkpoint(&mut net, &OptimizerState::new(), "", 0, None).unwrap();
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Checkpoint(_))),
                "{cut}"
            );
        }
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::BadMagic(_))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut net = small_net();
        let bytes = encode_checkpoint(&mut net, &OptimizerState::new(), "", 0, None).unwrap();
        // swap the descriptor for one with a wider second stage
        let text = net.spec().unwrap().to_string();
        let other = text.replace("widths=4,8", "widths=4,9");
        assert_eq!(text.len(), other.len());
        let mut patched = bytes.clone();
        let at = bytes.windows(text.len()).position(|w| w == text.as_bytes()).unwrap();
        patched[at..at + text.len()].copy_from_slice(other.as_bytes());
        let err = decode_checkpoint(&patched).unwrap_err().to_string();
        assert!(err.contains("shape"), "{err}");
    }
}

//! Checkpoint files.
//!
//! ```text
//! "HDMCKPT1" | u32 LE header length | UTF-8 header | f32 LE payload
//! ```
//!
//! The header is line oriented:
//!
//! ```text
//! kind denoiser
//! frozen 0
//! meta in_channels 1
//! meta widths 16,32,32
//! tensor enc0.conv.weight 16,16,3,3 param
//! tensor enc0.norm.running_mean 16 buffer
//! payload_bytes 123456
//! ```
//!
//! Tensor values follow in header order.

use std::path::Path;

use crate::denoiser::{Architecture, DenoiserParams, NamedTensor};
use crate::error::{HdmError, Result};

pub const MAGIC: &[u8; 8] = b"HDMCKPT1";

/// In-memory form of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub frozen: bool,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| HdmError::format(format!("checkpoint header lacks `{key}`")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta(key)?
            .parse()
            .map_err(|_| HdmError::format(format!("`{key}` is not an integer")))
    }

    pub fn meta_list(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.meta(key)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| s.parse().map_err(|_| HdmError::format(format!("bad list entry in `{key}`"))))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload_len: usize = self.tensors.iter().map(|t| t.values.len() * 4).sum();
        let mut header = format!("kind {}\nfrozen {}\n", self.kind, u8::from(self.frozen));
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for t in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            let role = if t.trainable { "param" } else { "buffer" };
            header.push_str(&format!("tensor {} {} {role}\n", t.name, dims.join(",")));
        }
        header.push_str(&format!("payload_bytes {payload_len}\n"));
        let mut out = Vec::with_capacity(12 + header.len() + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for t in &self.tensors {
            for v in &t.values {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(HdmError::format("bad checkpoint magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| HdmError::format("truncated checkpoint header"))?;
        let header = std::str::from_utf8(header).map_err(|_| HdmError::format("header is not UTF-8"))?;
        let payload = &bytes[12 + hlen..];

        let mut kind = None;
        let mut frozen = None;
        let mut meta = Vec::new();
        let mut specs: Vec<(String, Vec<usize>, bool)> = Vec::new();
        let mut declared = None;
        for line in header.lines() {
            let mut parts = line.splitn(2, ' ');
            let key = parts.next().unwrap_or_default();
            let rest = parts.next().unwrap_or_default();
            match key {
                "kind" => kind = Some(rest.to_string()),
                "frozen" => {
                    frozen = Some(match rest {
                        "0" => false,
                        "1" => true,
                        _ => return Err(HdmError::format("frozen must be 0 or 1")),
                    })
                }
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.push((k.to_string(), v.to_string()));
                }
                "tensor" => {
                    let fields: Vec<&str> = rest.split(' ').collect();
                    if fields.len() != 3 {
                        return Err(HdmError::format(format!("malformed tensor line `{line}`")));
                    }
                    let shape = fields[1]
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| HdmError::format(format!("bad shape in `{line}`")))?;
                    let trainable = match fields[2] {
                        "param" => true,
                        "buffer" => false,
                        _ => return Err(HdmError::format(format!("bad tensor role in `{line}`"))),
                    };
                    specs.push((fields[0].to_string(), shape, trainable));
                }
                "payload_bytes" => {
                    declared = Some(rest.parse::<usize>().map_err(|_| HdmError::format("bad payload_bytes"))?)
                }
                "" => {}
                other => return Err(HdmError::format(format!("unknown header key `{other}`"))),
            }
        }
        let kind = kind.ok_or_else(|| HdmError::format("header lacks kind"))?;
        let frozen = frozen.ok_or_else(|| HdmError::format("header lacks frozen"))?;
        let declared = declared.ok_or_else(|| HdmError::format("header lacks payload_bytes"))?;
        let expected: usize = specs.iter().map(|(_, s, _)| s.iter().product::<usize>() * 4).sum();
        if declared != expected || payload.len() != declared {
            return Err(HdmError::format(format!(
                "payload is {} bytes, header declares {declared} and tensors need {expected}",
                payload.len()
            )));
        }
        let mut offset = 0;
        let tensors = specs
            .into_iter()
            .map(|(name, shape, trainable)| {
                let n: usize = shape.iter().product();
                let values = payload[offset..offset + 4 * n]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect();
                offset += 4 * n;
                NamedTensor {
                    name,
                    shape,
                    values,
                    trainable,
                }
            })
            .collect();
        Ok(Checkpoint {
            kind,
            frozen,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl From<&DenoiserParams> for Checkpoint {
    fn from(p: &DenoiserParams) -> Self {
        let a = &p.arch;
        Checkpoint {
            kind: "denoiser".into(),
            frozen: p.frozen,
            meta: vec![
                ("in_channels".into(), a.in_channels.to_string()),
                ("height".into(), a.height.to_string()),
                ("width".into(), a.width.to_string()),
                ("widths".into(), join(&a.widths)),
                ("taps".into(), a.taps.to_string()),
                ("time_dim".into(), a.time_dim.to_string()),
            ],
            tensors: p.tensors.clone(),
        }
    }
}

impl TryFrom<Checkpoint> for DenoiserParams {
    type Error = HdmError;

    fn try_from(c: Checkpoint) -> Result<Self> {
        if c.kind != "denoiser" {
            return Err(HdmError::format(format!("expected a denoiser checkpoint, found `{}`", c.kind)));
        }
        let arch = Architecture {
            in_channels: c.meta_usize("in_channels")?,
            height: c.meta_usize("height")?,
            width: c.meta_usize("width")?,
            widths: c.meta_list("widths")?,
            taps: c.meta_usize("taps")?,
            time_dim: c.meta_usize("time_dim")?,
        };
        let p = DenoiserParams {
            arch,
            tensors: c.tensors,
            frozen: c.frozen,
        };
        p.validate().map_err(|e| HdmError::format(e.to_string()))?;
        Ok(p)
    }
}

pub fn save_checkpoint(params: &DenoiserParams, path: &Path) -> Result<()> {
    Checkpoint::from(params).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserParams> {
    DenoiserParams::try_from(Checkpoint::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> DenoiserParams {
        let arch = Architecture {
            in_channels: 1,
            height: 4,
            width: 4,
            widths: vec![2, 3],
            taps: 2,
            time_dim: 4,
        };
        DenoiserParams::init(&arch, 7).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = params().freeze();
        let bytes = Checkpoint::from(&p).to_bytes();
        let back = DenoiserParams::try_from(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn declared_length_matches_payload() {
        let bytes = Checkpoint::from(&params()).to_bytes();
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[12..12 + hlen]).unwrap();
        let declared: usize = header
            .lines()
            .find_map(|l| l.strip_prefix("payload_bytes "))
            .unwrap()
            .parse()
            .unwrap();
        assert_eq!(declared, bytes.len() - 12 - hlen);
    }

    #[test]
    fn truncated_and_corrupt_files_fail() {
        let bytes = Checkpoint::from(&params()).to_bytes();
        for cut in [0, 5, 11, 40, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(HdmError::Format(_))));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn shape_mismatch_against_descriptor_fails() {
        let mut c = Checkpoint::from(&params());
        c.meta.iter_mut().find(|(k, _)| k == "widths").unwrap().1 = "2,4".into();
        let bytes = c.to_bytes();
        let parsed = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(matches!(DenoiserParams::try_from(parsed), Err(HdmError::Format(_))));
    }
}

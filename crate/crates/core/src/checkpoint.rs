//! Encoder checkpoints in the tensor-file container.
//!
//! Layout: a tensor header with `n = 1, H = 1, W = <total parameters>, C = 1`
//! and no labels, the f32 payload holding every query block followed by every
//! key block, then the index trailer
//!
//! ```text
//! b"CLIMIDX1" | u32 index length | UTF-8 index
//! ```
//!
//! The index is line-based and tab-separated:
//!
//! ```text
//! dims          <EncoderDims as JSON>
//! key_momentum  <f64>
//! epoch         <usize>
//! block         <q.|k.><block name>  <offset>  <len>  <rows>  <cols>
//! ```
//!
//! Tensor readers ignore the trailer, so a checkpoint is also a valid tensor file.

use std::fs;
use std::path::Path;

use crate::dataset::{TensorHeader, TENSOR_HEADER_LEN};
use crate::encoder::{EncoderDims, EncoderParams, KeyEncoder, BLOCK_NAMES};
use crate::error::{ClimError, Result};

pub const INDEX_MAGIC: &[u8; 8] = b"CLIMIDX1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub query: EncoderParams,
    pub key: KeyEncoder,
    pub epoch: usize,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch}.clim")
}

fn bad(reason: impl Into<String>) -> ClimError {
    ClimError::Malformed {
        path: Default::default(),
        reason: reason.into(),
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let q = &ck.query;
    let k = &ck.key.params;
    if !q.same_shape(k) {
        return Err(ClimError::ShapeMismatch("query and key encoders differ in shape".into()));
    }
    let total = q.param_count() + k.param_count();
    let width = u32::try_from(total).map_err(|_| ClimError::DimOverflow)?;
    let header = TensorHeader {
        n: 1,
        height: 1,
        width,
        channels: 1,
        has_labels: false,
    };
    let mut out = Vec::with_capacity(TENSOR_HEADER_LEN + 4 * total + 1024);
    header.write(&mut out);

    let dims_json = serde_json::to_string(q.dims()).map_err(|e| bad(e.to_string()))?;
    let mut index = format!("dims\t{dims_json}\nkey_momentum\t{}\nepoch\t{}\n", ck.key.momentum, ck.epoch);
    let mut offset = 0usize;
    for (prefix, params) in [("q", q), ("k", k)] {
        for ((name, block), (rows, cols)) in BLOCK_NAMES.iter().zip(params.blocks()).zip(params.block_shapes()) {
            index.push_str(&format!("block\t{prefix}.{name}\t{offset}\t{}\t{rows}\t{cols}\n", block.len()));
            for &v in block {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            offset += block.len();
        }
    }
    out.extend_from_slice(INDEX_MAGIC);
    out.extend_from_slice(&(index.len() as u32).to_le_bytes());
    out.extend_from_slice(index.as_bytes());
    Ok(out)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let header = TensorHeader::parse(buf)?;
    if header.n != 1 || header.height != 1 || header.channels != 1 || header.has_labels {
        return Err(bad("not a checkpoint: expected a single 1 x W x 1 tensor without labels"));
    }
    let total = header.width as usize;
    let payload_end = TENSOR_HEADER_LEN + 4 * total;
    let trailer = &buf[payload_end..];
    if trailer.len() < 12 || &trailer[..8] != INDEX_MAGIC {
        return Err(bad("checkpoint index missing"));
    }
    let len = u32::from_le_bytes(trailer[8..12].try_into().expect("4 bytes")) as usize;
    let text = trailer
        .get(12..12 + len)
        .ok_or(ClimError::Truncated {
            expected: (payload_end + 12 + len) as u64,
            found: buf.len() as u64,
        })?;
    let text = std::str::from_utf8(text).map_err(|_| bad("checkpoint index is not UTF-8"))?;

    let value = |i: usize| f32::from_le_bytes(buf[TENSOR_HEADER_LEN + 4 * i..TENSOR_HEADER_LEN + 4 * i + 4].try_into().expect("4 bytes")) as f64;
    let mut dims: Option<EncoderDims> = None;
    let mut momentum = None;
    let mut epoch = None;
    let mut q_blocks: Vec<Option<Vec<f64>>> = vec![None; 8];
    let mut k_blocks: Vec<Option<Vec<f64>>> = vec![None; 8];
    for line in text.lines().filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        match fields[0] {
            "dims" if fields.len() == 2 => {
                dims = Some(serde_json::from_str(fields[1]).map_err(|e| bad(format!("dims: {e}")))?);
            }
            "key_momentum" if fields.len() == 2 => {
                momentum = Some(fields[1].parse::<f64>().map_err(|e| bad(format!("key_momentum: {e}")))?);
            }
            "epoch" if fields.len() == 2 => {
                epoch = Some(fields[1].parse::<usize>().map_err(|e| bad(format!("epoch: {e}")))?);
            }
            "block" if fields.len() == 6 => {
                let (side, name) = fields[1].split_once('.').ok_or_else(|| bad(format!("block name {}", fields[1])))?;
                let slot = BLOCK_NAMES
                    .iter()
                    .position(|n| *n == name)
                    .ok_or_else(|| bad(format!("unknown block {name}")))?;
                let offset: usize = fields[2].parse().map_err(|_| bad("block offset"))?;
                let n: usize = fields[3].parse().map_err(|_| bad("block length"))?;
                if offset.checked_add(n).is_none_or(|end| end > total) {
                    return Err(bad(format!("block {} exceeds the payload", fields[1])));
                }
                let data: Vec<f64> = (offset..offset + n).map(value).collect();
                match side {
                    "q" => q_blocks[slot] = Some(data),
                    "k" => k_blocks[slot] = Some(data),
                    other => return Err(bad(format!("block prefix {other}"))),
                }
            }
            _ => return Err(bad(format!("index line {line:?}"))),
        }
    }
    let dims = dims.ok_or_else(|| bad("index lacks dims"))?;
    let collect = |blocks: Vec<Option<Vec<f64>>>, which: &str| -> Result<EncoderParams> {
        let blocks: Option<Vec<Vec<f64>>> = blocks.into_iter().collect();
        EncoderParams::from_blocks(&dims, &blocks.ok_or_else(|| bad(format!("{which} blocks incomplete")))?)
    };
    let query = collect(q_blocks, "query")?;
    let key_params = collect(k_blocks, "key")?;
    let key = KeyEncoder {
        params: key_params,
        momentum: momentum.ok_or_else(|| bad("index lacks key_momentum"))?,
    };
    Ok(Checkpoint {
        query,
        key,
        epoch: epoch.ok_or_else(|| bad("index lacks epoch"))?,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ck)?).map_err(|e| ClimError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| ClimError::io(path, e))?;
    decode_checkpoint(&buf).map_err(|e| match e {
        ClimError::Malformed { reason, .. } => ClimError::Malformed {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

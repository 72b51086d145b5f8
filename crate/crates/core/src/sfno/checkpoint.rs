//! Parameter checkpoint file.
//!
//! ```text
//! "SFNP"            4 bytes
//! version           u32 LE
//! header length     u32 LE
//! header            JSON: operator config, normalization bounds, training info
//! tensors           f64 LE, declaration order (see OperatorParams::layout)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OperatorConfig, OperatorParams};
use crate::error::{Error, Result};
use crate::training::NormBounds;

pub const MAGIC: &[u8; 4] = b"SFNP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub operator: OperatorConfig,
    pub bounds: Option<NormBounds>,
    /// Epoch the parameters were taken from, when produced by training.
    #[serde(default)]
    pub epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: OperatorParams,
}

impl Checkpoint {
    pub fn new(operator: OperatorConfig, bounds: Option<NormBounds>, params: OperatorParams) -> Self {
        Self {
            header: CheckpointHeader {
                operator,
                bounds,
                epoch: None,
            },
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let flat = self.params.to_flat();
        let mut out = Vec::with_capacity(12 + header.len() + 8 * flat.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in flat {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::format(bytes.len() as u64, "truncated checkpoint header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::format(0, "bad magic, expected \"SFNP\""));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = 12 + hlen;
        if bytes.len() < body {
            return Err(Error::format(12, format!("header of {hlen} bytes runs past end of file")));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[12..body])
            .map_err(|e| Error::format(12, format!("header: {e}")))?;
        header.operator.validate()?;
        let mut params = OperatorParams::zeros(&header.operator);
        let n = params.num_scalars();
        let expected = body + 8 * n;
        if bytes.len() != expected {
            return Err(Error::format(
                body as u64,
                format!("payload is {} bytes, config needs {}", bytes.len() - body, 8 * n),
            ));
        }
        let flat: Vec<f64> = bytes[body..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.load_flat(&flat)?;
        Ok(Self { header, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::network::{AdapterSpec, DiscriminatorSpec, Model};

const MAGIC: &[u8; 8] = b"ANMCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    adapter: AdapterSpec,
    discriminator: DiscriminatorSpec,
    bank_path: Option<PathBuf>,
    bank_len: usize,
    n_params: usize,
}

/// Trained adapter and discriminator plus the configuration that produced
/// them. The backbone is rebuilt from `config.backbone`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config: RunConfig,
    pub bank_path: Option<PathBuf>,
    pub bank_len: usize,
}

impl Checkpoint {
    /// Layout: magic, `u32` version, `u32` header length, JSON header,
    /// then every parameter as little-endian `f64`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            adapter: self.model.adapter.spec(),
            discriminator: self.model.disc.spec(),
            bank_path: self.bank_path.clone(),
            bank_len: self.bank_len,
            n_params: self.model.n_params(),
        };
        let json = serde_json::to_vec(&header)?;
        let params = self.model.flat_params();
        let mut buf = Vec::with_capacity(16 + json.len() + params.len() * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for p in params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let bad = |r: &str| Error::format(path, r);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        let rest = &bytes[16 + hlen..];
        if rest.len() != header.n_params * 8 {
            return Err(bad(&format!(
                "expected {} parameter bytes, found {}",
                header.n_params * 8,
                rest.len()
            )));
        }
        let params: Vec<f64> = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut model = Model::zeros(header.adapter, header.discriminator)?;
        model.set_flat_params(&params).map_err(|e| bad(&e.to_string()))?;
        header.config.validate()?;
        Ok(Checkpoint {
            model,
            config: header.config,
            bank_path: header.bank_path,
            bank_len: header.bank_len,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::rng::stream;

    fn sample() -> Checkpoint {
        let model = Model::init(
            6,
            &NetworkConfig {
                disc_hidden: 5,
                adapter_init_noise: 0.3,
                ..Default::default()
            },
            &mut stream(1, &[]),
        )
        .unwrap();
        Checkpoint {
            model,
            config: RunConfig::default(),
            bank_path: Some("bank.bin".into()),
            bank_len: 12,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let c = sample();
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        sample().save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Format { .. })));
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        std::fs::write(&p, &wrong).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Format { .. })));
    }
}

//! Model checkpoints. A file is a short text header, one blank line, then
//! the raw parameter payload: every tensor in header order as
//! little-endian f32. The header pins everything needed to rebuild the
//! model:
//!
//! ```text
//! BPVAE1
//! kind bpvae
//! arch 32 64 32 64 4
//! prior basic 1
//! prior simple 0.1
//! param enc.conv1.w 32 1 4 4
//! ...
//! ```
//!
//! The arch line is `input_hw latent_dim channels[0] channels[1] kernel`.
//! Sigmas print with the shortest round-tripping decimal form, so a
//! save/load cycle reproduces the model bit for bit. Saves go through a
//! sibling temp file and a rename, so a crash never leaves a half-written
//! checkpoint behind.

use std::fs;
use std::path::{Path, PathBuf};

use crate::eval::Scorer;
use crate::models::{
    Architecture, BpvaeModel, ModelError, PriorSpec, VaeModel, VaeNet,
};
use crate::tensor::{Param, Tensor};

pub const CHECKPOINT_MAGIC: &str = "BPVAE1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A checkpoint restores to whichever model kind it was saved from.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Vae(VaeModel),
    Bpvae(BpvaeModel),
}

impl LoadedModel {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LoadedModel::Vae(_) => "vae",
            LoadedModel::Bpvae(_) => "bpvae",
        }
    }

    pub fn net(&self) -> &VaeNet {
        match self {
            LoadedModel::Vae(m) => m.net(),
            LoadedModel::Bpvae(m) => m.net(),
        }
    }

    pub fn scorer(&self) -> &dyn Scorer {
        match self {
            LoadedModel::Vae(m) => m,
            LoadedModel::Bpvae(m) => m,
        }
    }
}

pub fn save_vae(path: &Path, model: &VaeModel) -> Result<(), CheckpointError> {
    write_checkpoint(path, "vae", model.net(), model.prior(), &[])
}

pub fn save_bpvae(path: &Path, model: &BpvaeModel) -> Result<(), CheckpointError> {
    write_checkpoint(
        path,
        "bpvae",
        model.net(),
        model.basic_prior(),
        model.simple_priors(),
    )
}

fn write_checkpoint(
    path: &Path,
    kind: &str,
    net: &VaeNet,
    basic: &PriorSpec,
    simples: &[PriorSpec],
) -> Result<(), CheckpointError> {
    let arch = net.arch();
    let mut header = String::new();
    header.push_str(CHECKPOINT_MAGIC);
    header.push('\n');
    header.push_str(&format!("kind {kind}\n"));
    header.push_str(&format!(
        "arch {} {} {} {} {}\n",
        arch.input_hw, arch.latent_dim, arch.channels[0], arch.channels[1], arch.kernel
    ));
    header.push_str(&format!("prior basic {}\n", basic.sigma()));
    for p in simples {
        header.push_str(&format!("prior simple {}\n", p.sigma()));
    }
    for p in net.params() {
        header.push_str(&format!("param {}", p.name));
        for d in p.value.shape() {
            header.push_str(&format!(" {d}"));
        }
        header.push('\n');
    }
    header.push('\n');

    let payload_len: usize = net.params().iter().map(|p| p.value.data().len() * 4).sum();
    let mut bytes = Vec::with_capacity(header.len() + payload_len);
    bytes.extend_from_slice(header.as_bytes());
    for p in net.params() {
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let tmp = match path.file_name() {
        Some(name) => path.with_file_name(format!("{}.tmp", name.to_string_lossy())),
        None => {
            return Err(CheckpointError::Format {
                path: path.to_path_buf(),
                reason: "path has no file name".to_string(),
            })
        }
    };
    fs::write(&tmp, &bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_model(path: &Path) -> Result<LoadedModel, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |reason: String| CheckpointError::Format {
        path: path.to_path_buf(),
        reason,
    };

    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| bad("no blank line after the header".to_string()))?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| bad("header is not UTF-8".to_string()))?;
    let payload = &bytes[split + 2..];

    let mut lines = header.lines();
    match lines.next() {
        Some(CHECKPOINT_MAGIC) => {}
        _ => return Err(bad(format!("not a {CHECKPOINT_MAGIC} checkpoint"))),
    }

    let mut kind = None;
    let mut arch = None;
    let mut basic_sigma: Option<f32> = None;
    let mut simple_sigmas: Vec<f32> = Vec::new();
    let mut param_specs: Vec<(String, Vec<usize>)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let mut words = line.split_whitespace();
        let tag = words.next().unwrap_or("");
        let rest: Vec<&str> = words.collect();
        let ctx = |what: &str| format!("header line {}: {what}", lineno + 2);
        match tag {
            "kind" => match rest.as_slice() {
                ["vae"] => kind = Some("vae"),
                ["bpvae"] => kind = Some("bpvae"),
                _ => return Err(bad(ctx("unknown model kind"))),
            },
            "arch" => {
                let dims: Vec<usize> = rest
                    .iter()
                    .map(|w| w.parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad(ctx("arch wants five integers")))?;
                if dims.len() != 5 {
                    return Err(bad(ctx("arch wants five integers")));
                }
                arch = Some(Architecture {
                    input_hw: dims[0],
                    latent_dim: dims[1],
                    channels: [dims[2], dims[3]],
                    kernel: dims[4],
                });
            }
            "prior" => {
                let (role, sigma) = match rest.as_slice() {
                    [role, sigma] => (*role, *sigma),
                    _ => return Err(bad(ctx("prior wants a role and a sigma"))),
                };
                let sigma: f32 = sigma
                    .parse()
                    .map_err(|_| bad(ctx("sigma is not a number")))?;
                match role {
                    "basic" if basic_sigma.is_none() => basic_sigma = Some(sigma),
                    "basic" => return Err(bad(ctx("second basic prior"))),
                    "simple" => simple_sigmas.push(sigma),
                    _ => return Err(bad(ctx("unknown prior role"))),
                }
            }
            "param" => {
                let name = rest
                    .first()
                    .ok_or_else(|| bad(ctx("param wants a name and a shape")))?;
                let shape: Vec<usize> = rest[1..]
                    .iter()
                    .map(|w| w.parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad(ctx("bad shape entry")))?;
                if shape.is_empty() {
                    return Err(bad(ctx("param wants a name and a shape")));
                }
                param_specs.push((name.to_string(), shape));
            }
            _ => return Err(bad(ctx("unknown header tag"))),
        }
    }

    let kind = kind.ok_or_else(|| bad("missing kind line".to_string()))?;
    let arch = arch.ok_or_else(|| bad("missing arch line".to_string()))?;
    let basic_sigma = basic_sigma.ok_or_else(|| bad("missing basic prior".to_string()))?;
    if param_specs.is_empty() {
        return Err(bad("no parameters listed".to_string()));
    }

    let expected: usize = param_specs
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>() * 4)
        .sum();
    if payload.len() != expected {
        return Err(bad(format!(
            "payload holds {} bytes, header promises {expected}",
            payload.len()
        )));
    }

    let mut params = Vec::with_capacity(param_specs.len());
    let mut offset = 0;
    for (name, shape) in param_specs {
        let count = shape.iter().product::<usize>();
        let data: Vec<f32> = payload[offset..offset + count * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        offset += count * 4;
        let value = Tensor::from_vec(&shape, data).map_err(ModelError::from)?;
        params.push(Param { name, value });
    }

    let net = VaeNet::from_params(arch, params)?;
    let basic = PriorSpec::basic(basic_sigma)?;
    match kind {
        "vae" => {
            if !simple_sigmas.is_empty() {
                return Err(bad("a plain VAE checkpoint lists simple priors".to_string()));
            }
            Ok(LoadedModel::Vae(VaeModel::from_parts(net, basic)?))
        }
        _ => {
            let simples = simple_sigmas
                .iter()
                .map(|&s| PriorSpec::simple(s))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(LoadedModel::Bpvae(BpvaeModel::from_parts(net, basic, simples)?))
        }
    }
}

//! Self-describing binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SDCS"  u32 version=1  u32 tensor_count
//! repeated: u16 name_len, name (UTF-8), u8 ndim, u64 dims[ndim], f64 data[prod(dims)]
//! metadata: UTF-8 "key=value" lines up to end of file
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cs::{BlockGeometry, InitMatrix, Ratio, SamplingMatrix};
use crate::error::{Error, Result};
use crate::models::{ModelSpec, Reconstructor};
use crate::optim::AdamState;
use crate::pipeline::{ScalableModel, INIT_NAME, SAMPLING_NAME};
use crate::tensor::Tensor;
use crate::wire::Reader;

pub const MAGIC: &[u8; 4] = b"SDCS";
pub const VERSION: u32 = 1;

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ScalableModel,
    pub optimizer: Option<AdamState>,
    pub epoch: usize,
    pub best_mean_psnr: f64,
    /// Extra provenance (seed, strategy, ...), written verbatim.
    pub extra: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: ScalableModel) -> Self {
        Checkpoint {
            model,
            optimizer: None,
            epoch: 0,
            best_mean_psnr: f64::NEG_INFINITY,
            extra: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, &Tensor)> = self.model.named_tensors();
        if let Some(opt) = &self.optimizer {
            for (name, m) in opt.names.iter().zip(&opt.first_moment) {
                tensors.push((format!("{ADAM_M}{name}"), m));
            }
            for (name, v) in opt.names.iter().zip(&opt.second_moment) {
                tensors.push((format!("{ADAM_V}{name}"), v));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for (k, v) in self.metadata() {
            out.extend_from_slice(format!("{k}={v}\n").as_bytes());
        }
        Ok(out)
    }

    fn metadata(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let mut meta = vec![
            ("geometry".to_string(), m.geometry.to_string()),
            ("max_ratio".to_string(), m.max_ratio.to_string()),
            ("family".to_string(), m.recon.spec().family_name().to_string()),
        ];
        match m.recon.spec() {
            ModelSpec::Mlp { hidden } => {
                let h: Vec<String> = hidden.iter().map(|w| w.to_string()).collect();
                meta.push(("hidden".into(), h.join(",")));
            }
            ModelSpec::Unfolded { phases } => meta.push(("phases".into(), phases.to_string())),
        }
        meta.push(("epoch".into(), self.epoch.to_string()));
        meta.push(("best_mean_psnr".into(), self.best_mean_psnr.to_string()));
        if let Some(opt) = &self.optimizer {
            meta.push(("adam_step".into(), opt.step.to_string()));
            meta.push(("adam_beta1".into(), opt.beta1.to_string()));
            meta.push(("adam_beta2".into(), opt.beta2.to_string()));
            meta.push(("adam_eps".into(), opt.eps.to_string()));
        }
        for (k, v) in &self.extra {
            meta.push((format!("extra.{k}"), v.clone()));
        }
        meta
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader::new(bytes);
        if rd.take(4)? != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                msg: "not an SDCS checkpoint (bad magic)".into(),
            });
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(Error::Parse {
                offset: 4,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let count = rd.u32()? as usize;
        let mut tensors = BTreeMap::new();
        let mut order = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = rd.u16()? as usize;
            let at = rd.pos;
            let name = std::str::from_utf8(rd.take(name_len)?)
                .map_err(|_| Error::Parse {
                    offset: at,
                    msg: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let ndim = rd.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(rd.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = rd.f64s(numel)?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor '{name}': {e}")))?;
            order.push(name.clone());
            tensors.insert(name, t);
        }
        let meta_at = rd.pos;
        let text = std::str::from_utf8(rd.remaining()).map_err(|_| Error::Parse {
            offset: meta_at,
            msg: "metadata block is not UTF-8".into(),
        })?;
        let meta: BTreeMap<&str, &str> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .filter_map(|l| l.split_once('='))
            .collect();
        build(tensors, &order, &meta)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn build(mut tensors: BTreeMap<String, Tensor>, order: &[String], meta: &BTreeMap<&str, &str>) -> Result<Checkpoint> {
    let get = |k: &str| -> Result<&str> {
        meta.get(k)
            .copied()
            .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks '{k}'")))
    };
    let num = |k: &str| -> Result<f64> {
        get(k)?
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::Format(format!("metadata '{k}': {e}")))
    };
    let int = |k: &str| -> Result<usize> {
        get(k)?
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::Format(format!("metadata '{k}': {e}")))
    };

    let (gh, gw) = get("geometry")?
        .split_once('x')
        .ok_or_else(|| Error::Format("geometry must look like HxL".into()))?;
    let parse_dim = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|e| Error::Format(format!("geometry: {e}")))
    };
    let geometry = BlockGeometry::new(parse_dim(gh)?, parse_dim(gw)?)?;
    let max_ratio = Ratio::new(num("max_ratio")?)?;
    let spec = match get("family")? {
        "mlp" => ModelSpec::Mlp {
            hidden: get("hidden")?
                .split(',')
                .map(|w| w.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("hidden widths: {e}")))?,
        },
        "unfolded" => ModelSpec::Unfolded {
            phases: int("phases")?,
        },
        other => return Err(Error::Format(format!("unknown model family '{other}'"))),
    };

    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor '{name}'")))
    };
    let sampling = SamplingMatrix::new(take(SAMPLING_NAME)?, geometry, max_ratio)?;
    let init = InitMatrix::new(take(INIT_NAME)?, geometry, max_ratio)?;
    // Structure only; every parameter is overwritten below.
    let mut recon = Reconstructor::new(&spec, geometry.n(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let names: Vec<String> = recon.param_list().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(recon.params_mut()) {
        let t = take(name)?;
        if t.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    let model = ScalableModel {
        geometry,
        max_ratio,
        sampling,
        init,
        recon,
    };

    let optimizer = if meta.contains_key("adam_step") {
        let param_names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for name in &param_names {
            first.push(take(&format!("{ADAM_M}{name}"))?);
            second.push(take(&format!("{ADAM_V}{name}"))?);
        }
        Some(AdamState {
            names: param_names,
            first_moment: first,
            second_moment: second,
            step: int("adam_step")? as u64,
            beta1: num("adam_beta1")?,
            beta2: num("adam_beta2")?,
            eps: num("adam_eps")?,
        })
    } else {
        None
    };
    if let Some(extra) = order.iter().find(|n| tensors.contains_key(*n)) {
        return Err(Error::Format(format!("unexpected tensor '{extra}' in checkpoint")));
    }

    let extra = meta
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("extra.").map(|k| (k.to_string(), v.to_string())))
        .collect();
    Ok(Checkpoint {
        model,
        optimizer,
        epoch: int("epoch")?,
        best_mean_psnr: num("best_mean_psnr")?,
        extra,
    })
}

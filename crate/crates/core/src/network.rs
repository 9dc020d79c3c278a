//! Full two-branch forward pass and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian `u32`):
//!
//! ```text
//! "IGN1" | version = 1 | json_len | config JSON (UTF-8)
//! tensor_count
//! per tensor: name_len | name (UTF-8) | rank | dims[rank] | f32 LE data
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::backbone::{self, BranchFeatures};
use crate::config::FusionConfig;
use crate::error::{Error, Result};
use crate::gim::{self, GimOutput};
use crate::params::{Modality, NetworkParams, ParamVars, SpecList};
use crate::loss;
use crate::tensor::{gradient_check, GradCheckOptions, InputCheck, Scalar, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IGN1";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) fn push_head_specs(config: &FusionConfig, specs: &mut SpecList) {
    let c = config.channels;
    specs.conv("head.conv1", c, 2 * c, 3);
    specs.conv("head.conv2", 1, c, 3);
}

/// Closed-form parameter count for a configuration.
pub fn expected_param_count(config: &FusionConfig) -> usize {
    let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k + cout;
    let (c, cn, n, l) = (config.channels, config.node_channels, config.nodes, config.loops);
    let hidden = c / config.reduction;

    let ssm = conv(c, c, 3) + (hidden * c + hidden) + (c * hidden + c);
    let branch = conv(c, 1, 3) + conv(c, c, 3) + if config.modules.ssm { ssm } else { 0 };

    let mut graph = 0;
    if config.modules.gim {
        let intra = if n > 1 { conv(cn, cn, 3) } else { 0 };
        let inter = conv(cn, cn, 3);
        let per_modality_loop = n * conv(cn, c, 1) + conv(cn, cn, 3) + conv(cn, n * cn, 1);
        let edges = if config.share_edge_params {
            2 * intra + inter
        } else {
            l * (2 * intra + inter)
        };
        let deliveries = if config.modules.leader {
            2 * (l - 1) * n * conv(cn, cn, 3)
        } else {
            0
        };
        graph = 2 * l * per_modality_loop + edges + deliveries + 2 * conv(c, l * cn, 1);
    }
    let head = conv(c, 2 * c, 3) + conv(1, c, 3);
    2 * branch + graph + head
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub fused: Var,
    pub ir: BranchFeatures,
    pub vis: BranchFeatures,
    pub g_ir: Var,
    pub g_vis: Var,
    pub gim: Option<GimOutput>,
}

/// Builds the fused image on `tape` from two `N×1×H×W` inputs.
pub fn forward<T: Scalar>(tape: &mut Tape<T>, ir: Var, vis: Var, params: &ParamVars, config: &FusionConfig) -> Result<ForwardOutput> {
    let (si, sv) = (tape.shape(ir).to_vec(), tape.shape(vis).to_vec());
    if si != sv {
        let axis = si.iter().zip(&sv).position(|(a, b)| a != b).unwrap_or(0);
        return Err(Error::shape(
            "forward",
            format!("infrared vs visible axis {axis}"),
            si.get(axis).copied().unwrap_or(0),
            sv.get(axis).copied().unwrap_or(0),
        ));
    }
    let fir = backbone::extract(tape, ir, params, config, Modality::Infrared)?;
    let fvis = backbone::extract(tape, vis, params, config, Modality::Visible)?;
    let (g_ir, g_vis, gim) = if config.modules.gim {
        let out = gim::run_gim(tape, &fir, &fvis, params, config)?;
        (out.g_ir, out.g_vis, Some(out))
    } else {
        (fir.f3, fvis.f3, None)
    };
    let joined = tape.concat_channels(&[g_ir, g_vis])?;
    let hidden = params.conv3(tape, "head.conv1", joined)?;
    let hidden = tape.relu(hidden);
    let logits = params.conv3(tape, "head.conv2", hidden)?;
    let fused = tape.sigmoid(logits);
    Ok(ForwardOutput {
        fused,
        ir: fir,
        vis: fvis,
        g_ir,
        g_vis,
        gim,
    })
}

/// Inference without gradient tracking.
pub fn fuse(params: &NetworkParams, config: &FusionConfig, ir: &Tensor, vis: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape, false);
    let ir = tape.constant(ir.clone());
    let vis = tape.constant(vis.clone());
    let out = forward(&mut tape, ir, vis, &pv, config)?;
    Ok(tape.value(out.fused).clone())
}

/// Finite-difference check of `loss_total` with respect to every parameter,
/// evaluated in double precision. Returns the worst element per parameter.
pub fn check_gradients(
    params: &NetworkParams,
    config: &FusionConfig,
    ir: &Tensor,
    vis: &Tensor,
    opts: GradCheckOptions,
) -> Result<Vec<(String, InputCheck)>> {
    let names: Vec<String> = params.names().map(String::from).collect();
    let inputs: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.cast()).collect();
    let (ir, vis): (Tensor<f64>, Tensor<f64>) = (ir.cast(), vis.cast());
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        let pv = ParamVars::from_pairs(names.iter().map(String::as_str).zip(vars.iter().copied()));
        let a = tape.constant(ir.clone());
        let b = tape.constant(vis.clone());
        let out = forward(tape, a, b, &pv, config)?;
        Ok(loss::loss_total(tape, a, b, out.fused, &config.loss)?.total)
    };
    let report = gradient_check(f, &inputs, opts)?;
    Ok(names.into_iter().zip(report.inputs).collect())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(params: &NetworkParams, config: &FusionConfig) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let mut stored = config.clone();
    stored.seed = params.seed();
    let json = stored.to_json()?;
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(json.as_bytes());
    put_u32(&mut out, params.len())?;
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)?;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

/// Parses a checkpoint without checking it against any configuration.
pub fn decode_checkpoint_raw(bytes: &[u8]) -> Result<(FusionConfig, IndexMap<String, Tensor>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Checkpoint(format!(
            "version mismatch: expected {CHECKPOINT_VERSION}, found {version}"
        )));
    }
    let json = r.string("config")?;
    let config = FusionConfig::from_json_str(&json)?;
    let count = r.u32("tensor count")?;
    let mut tensors = IndexMap::with_capacity(count);
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u32("rank")?;
        let dims = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * 4, &format!("data of `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.insert(name, Tensor::new(dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((config, tensors))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(NetworkParams, FusionConfig)> {
    let (config, tensors) = decode_checkpoint_raw(bytes)?;
    let params = NetworkParams::from_tensors(&config, tensors, config.seed)?;
    Ok((params, config))
}

pub fn save_checkpoint(params: &NetworkParams, config: &FusionConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params, config)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(NetworkParams, FusionConfig)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint's tensors into the shapes `config` expects.
pub fn load_checkpoint_into(path: impl AsRef<Path>, config: &FusionConfig) -> Result<NetworkParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (stored, tensors) = decode_checkpoint_raw(&bytes)?;
    NetworkParams::from_tensors(config, tensors, stored.seed)
}

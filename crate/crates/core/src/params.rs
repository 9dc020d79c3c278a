//! Named parameter registry and its binding onto a tape.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::FusionConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Infrared,
    Visible,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Infrared, Modality::Visible];

    pub fn prefix(self) -> &'static str {
        match self {
            Modality::Infrared => "ir",
            Modality::Visible => "vis",
        }
    }

    pub fn other(self) -> Self {
        match self {
            Modality::Infrared => Modality::Visible,
            Modality::Visible => Modality::Infrared,
        }
    }
}

/// Shape of one learnable tensor. Weights carry their fan-in; biases have
/// none and start at zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: Option<usize>,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Default)]
pub(crate) struct SpecList(pub Vec<ParamSpec>);

impl SpecList {
    pub fn conv(&mut self, prefix: &str, cout: usize, cin: usize, k: usize) {
        self.0.push(ParamSpec {
            name: format!("{prefix}.weight"),
            shape: vec![cout, cin, k, k],
            fan_in: Some(cin * k * k),
        });
        self.0.push(ParamSpec {
            name: format!("{prefix}.bias"),
            shape: vec![cout],
            fan_in: None,
        });
    }

    pub fn linear(&mut self, prefix: &str, fout: usize, fin: usize) {
        self.0.push(ParamSpec {
            name: format!("{prefix}.weight"),
            shape: vec![fout, fin],
            fan_in: Some(fin),
        });
        self.0.push(ParamSpec {
            name: format!("{prefix}.bias"),
            shape: vec![fout],
            fan_in: None,
        });
    }
}

/// Every parameter the configuration needs, in construction order.
pub fn param_specs(config: &FusionConfig) -> Vec<ParamSpec> {
    let mut specs = SpecList::default();
    for m in Modality::BOTH {
        crate::backbone::push_specs(config, m, &mut specs);
    }
    if config.modules.gim {
        crate::gim::push_specs(config, &mut specs);
    }
    crate::network::push_head_specs(config, &mut specs);
    specs.0
}

/// Ordered name → tensor map of all learnable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    tensors: IndexMap<String, Tensor>,
    seed: u64,
}

impl NetworkParams {
    /// Kernels ~ N(0, 2 / fan_in), biases zero, drawn in declaration order from a
    /// ChaCha8 stream seeded with `seed`.
    pub fn init(config: &FusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = IndexMap::new();
        for spec in param_specs(config) {
            let tensor = match spec.fan_in {
                Some(fan_in) => {
                    let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt())
                        .map_err(|e| Error::Config(e.to_string()))?;
                    Tensor::from_fn(spec.shape.clone(), |_| normal.sample(&mut rng))
                }
                None => Tensor::zeros(spec.shape.clone()),
            };
            tensors.insert(spec.name, tensor);
        }
        Ok(Self { tensors, seed })
    }

    /// Wraps already-shaped tensors, checking them against `config`.
    pub fn from_tensors(config: &FusionConfig, tensors: IndexMap<String, Tensor>, seed: u64) -> Result<Self> {
        let specs = param_specs(config);
        for spec in &specs {
            let t = tensors.get(&spec.name).ok_or_else(|| Error::Parameter {
                name: spec.name.clone(),
                message: "missing".into(),
            })?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Parameter {
                    name: spec.name.clone(),
                    message: format!("shape mismatch: expected {:?}, found {:?}", spec.shape, t.shape()),
                });
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !specs.iter().any(|s| &s.name == *k)) {
            return Err(Error::Parameter {
                name: extra.clone(),
                message: "not used by this configuration".into(),
            });
        }
        // reorder to construction order
        let mut tensors = tensors;
        let ordered = specs
            .iter()
            .map(|s| {
                let t = tensors.swap_remove(&s.name).expect("checked above");
                (s.name.clone(), t)
            })
            .collect();
        Ok(Self { tensors: ordered, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Puts every parameter on `tape` as a leaf.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, requires_grad: bool) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.leaf(t.cast(), requires_grad)))
                .collect(),
        }
    }

    /// Copies each `vis.*` parameter from its `ir.*` counterpart (where one
    /// exists), giving both branches identical weights.
    pub fn mirror_infrared_into_visible(&mut self) {
        let pairs: Vec<(String, Tensor)> = self
            .tensors
            .iter()
            .filter_map(|(name, t)| mirrored_name(name).map(|n| (n, t.clone())))
            .collect();
        for (name, t) in pairs {
            if let Some(slot) = self.tensors.get_mut(&name) {
                if slot.shape() == t.shape() {
                    *slot = t;
                }
            }
        }
    }
}

fn mirrored_name(name: &str) -> Option<String> {
    if let Some(rest) = name.strip_prefix("ir.") {
        return Some(format!("vis.{rest}"));
    }
    if name.contains(".ir.") {
        return Some(name.replacen(".ir.", ".vis.", 1));
    }
    None
}

/// Parameters bound to a tape, looked up by name.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    /// Names paired with tape variables, e.g. from a gradient check.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Parameter {
            name: name.to_string(),
            message: "missing from parameter set".into(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Stride-1 convolution with `{prefix}.weight` / `{prefix}.bias`.
    pub fn conv<T: Scalar>(&self, tape: &mut Tape<T>, prefix: &str, input: Var, padding: usize) -> Result<Var> {
        let w = self.get(&format!("{prefix}.weight"))?;
        let b = self.get(&format!("{prefix}.bias"))?;
        tape.conv2d(input, w, b, 1, padding)
    }

    /// 3×3 convolution with same-size zero padding.
    pub fn conv3<T: Scalar>(&self, tape: &mut Tape<T>, prefix: &str, input: Var) -> Result<Var> {
        self.conv(tape, prefix, input, 1)
    }

    pub fn linear<T: Scalar>(&self, tape: &mut Tape<T>, prefix: &str, input: Var) -> Result<Var> {
        let w = self.get(&format!("{prefix}.weight"))?;
        let b = self.get(&format!("{prefix}.bias"))?;
        tape.linear(input, w, b)
    }
}

//! Named parameter sets.
//!
//! Parameter names follow a dotted path grammar:
//!
//! ```text
//! name    := segment ("." segment)*
//! segment := [a-z] [a-z0-9_]*
//! ```
//!
//! The final segment is the tensor role: `w` (weight), `b` (bias), `gamma`
//! and `beta` (layer-norm affine), or `pos` (positional table). Preceding
//! segments locate the layer, for example `sb.conv1.w`,
//! `subnet2.tm1.mhsa.q.w` or `subnet3.itm2.tm.cfe.fc1.b`. The name set is a
//! pure function of [`ModelConfig`].

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `±1/sqrt(fan_in)` (Kaiming-uniform with `a = sqrt(5)`).
    Kaiming { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Checks a name against the path grammar.
pub fn is_valid_param_name(name: &str) -> bool {
    let segs: Vec<&str> = name.split('.').collect();
    let seg_ok = |s: &str| {
        let mut chars = s.chars();
        matches!(chars.next(), Some(c) if c.is_ascii_lowercase())
            && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
    };
    segs.len() >= 2
        && segs.iter().all(|s| seg_ok(s))
        && matches!(*segs.last().unwrap(), "w" | "b" | "gamma" | "beta" | "pos")
}

struct Layout<'a> {
    cfg: &'a ModelConfig,
    specs: Vec<ParamSpec>,
}

impl Layout<'_> {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.specs.push(ParamSpec { name, shape, init });
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize) {
        self.push(format!("{name}.w"), vec![cout, cin, 3, 3], Init::Kaiming { fan_in: cin * 9 });
        self.push(format!("{name}.b"), vec![cout], Init::Zeros);
    }

    fn fcl(&mut self, name: &str, din: usize, dout: usize) {
        self.push(format!("{name}.w"), vec![dout, din], Init::Kaiming { fan_in: din });
        self.push(format!("{name}.b"), vec![dout], Init::Zeros);
    }

    fn ln(&mut self, name: &str, d: usize) {
        self.push(format!("{name}.gamma"), vec![d], Init::Ones);
        self.push(format!("{name}.beta"), vec![d], Init::Zeros);
    }

    fn tm(&mut self, p: &str) {
        let (d, t, hid) = (self.cfg.embed_dim(), self.cfg.tokens_per_window(), self.cfg.cfe_hidden());
        self.push(format!("{p}.pos"), vec![t, d], Init::Zeros);
        self.ln(&format!("{p}.mhsa.ln"), d);
        for proj in ["q", "k", "v", "proj"] {
            self.fcl(&format!("{p}.mhsa.{proj}"), d, d);
        }
        self.ln(&format!("{p}.cfe.ln"), d);
        self.fcl(&format!("{p}.cfe.fc1"), d, hid);
        self.fcl(&format!("{p}.cfe.fc2"), hid, d);
    }

    fn itm(&mut self, p: &str) {
        let d = self.cfg.embed_dim();
        self.fcl(&format!("{p}.fc_in"), d, d);
        self.tm(&format!("{p}.tm"));
        self.fcl(&format!("{p}.fc_mid"), d, d);
        self.fcl(&format!("{p}.fc_out"), d, d);
    }

    fn fm(&mut self, p: &str, inputs: usize) {
        let (c, cc) = (self.cfg.width, self.cfg.width * inputs);
        self.push(format!("{p}.dw.w"), vec![cc, 1, 3, 3], Init::Kaiming { fan_in: 9 });
        self.push(format!("{p}.pw.w"), vec![c, cc, 1, 1], Init::Kaiming { fan_in: cc });
        self.push(format!("{p}.pw.b"), vec![c], Init::Zeros);
    }
}

/// Every parameter the configured network owns, in canonical order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (c, ic, ab) = (cfg.width, cfg.image_channels, &cfg.ablation);
    let mut l = Layout { cfg, specs: Vec::new() };

    l.conv("sb.conv1", ic, c);
    if !ab.sb_single_conv {
        l.conv("sb.conv2", c, c);
        l.conv("sb.conv3", c, c);
        if ab.sb_tm() {
            l.tm("sb.tm");
        }
    }

    if ab.subnets() {
        for i in 1..=5 {
            l.conv(&format!("subnet1.conv{i}"), c, c);
        }
        l.tm("subnet1.tm");

        for i in 1..=4 {
            l.conv(&format!("subnet2.conv{i}"), c, c);
        }
        for i in 1..=3 {
            l.tm(&format!("subnet2.tm{i}"));
        }
        if !ab.no_subnet2_fusion {
            l.fm("subnet2.fm1", 2);
            l.fm("subnet2.fm2", 2);
        }
    }

    if ab.subnet3() {
        l.conv("subnet3.conv1", c, c);
        l.conv("subnet3.conv2", c, c);
        for i in 1..=4 {
            l.tm(&format!("subnet3.tm{i}"));
        }
        l.fm("subnet3.fm1", 2);
        l.fm("subnet3.fm2", 2);
        l.fm("subnet3.fm3", 3);
        if !ab.no_itm {
            l.itm("subnet3.itm1");
            l.itm("subnet3.itm2");
        }
    }

    l.conv("rb.conv", c, ic);
    l.specs
}

/// The learnable parameter set of a network, keyed by canonical name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    /// Random initialization, deterministic in `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_specs(param_specs(cfg), |spec| match spec.init {
            Init::Kaiming { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_fn(spec.shape.clone(), |_| rng.random_range(-bound..bound))
            }
            Init::Zeros => Tensor::zeros(spec.shape.clone()),
            Init::Ones => Tensor::ones(spec.shape.clone()),
        })
    }

    /// Every weight, bias and positional table zero; layer-norm scales one.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::from_specs(param_specs(cfg), |spec| match spec.init {
            Init::Ones => Tensor::ones(spec.shape.clone()),
            _ => Tensor::zeros(spec.shape.clone()),
        })
    }

    fn from_specs(specs: Vec<ParamSpec>, mut make: impl FnMut(&ParamSpec) -> Tensor) -> Self {
        let entries: Vec<(String, Tensor)> = specs
            .iter()
            .map(|s| {
                let t = make(s);
                (s.name.clone(), t)
            })
            .collect();
        Self::from_entries(entries).expect("layout names are unique")
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (name, _)) in entries.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
            }
        }
        Ok(ModelParams { entries, index })
    }

    /// Reorders `entries` to the canonical layout of `cfg`, failing with the
    /// missing and unexpected names when the sets differ.
    pub fn from_named(cfg: &ModelConfig, mut named: HashMap<String, Tensor>) -> Result<Self, NameMismatch> {
        let specs = param_specs(cfg);
        let mut missing = Vec::new();
        let mut entries = Vec::with_capacity(specs.len());
        let mut bad_shape = Vec::new();
        for spec in &specs {
            match named.remove(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => entries.push((spec.name.clone(), t)),
                Some(t) => bad_shape.push(format!("{} {:?} (expected {:?})", spec.name, t.shape(), spec.shape)),
                None => missing.push(spec.name.clone()),
            }
        }
        let mut extra: Vec<String> = named.into_keys().collect();
        extra.sort();
        if missing.is_empty() && extra.is_empty() && bad_shape.is_empty() {
            Ok(Self::from_entries(entries).expect("layout names are unique"))
        } else {
            Err(NameMismatch { missing, extra, bad_shape })
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Places every parameter on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> BoundParams {
        let vars = self.entries.iter().map(|(n, t)| (n.clone(), g.leaf(t.clone(), requires_grad))).collect();
        BoundParams { vars }
    }
}

/// Parameter leaves on a graph.
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    /// Binds externally created leaves, e.g. the perturbation points of a
    /// finite-difference check.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        BoundParams { vars: vars.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars.get(name).ok_or_else(|| Error::Contract(format!("parameter `{name}` is not bound")))
    }

    /// Gradients of every bound parameter, zeros where none flowed.
    pub fn grads(&self, g: &Graph, params: &ModelParams) -> Vec<(String, Tensor)> {
        params
            .names()
            .map(|n| {
                let v = &self.vars[n];
                (n.to_string(), g.grad(v).unwrap_or_else(|| Tensor::zeros(v.shape())))
            })
            .collect()
    }
}

/// Difference between a stored name set and the one a configuration expects.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NameMismatch {
    pub missing: Vec<String>,
    pub extra: Vec<String>,
    pub bad_shape: Vec<String>,
}

impl std::fmt::Display for NameMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "parameter set does not match the configuration")?;
        if !self.missing.is_empty() {
            write!(f, "; missing: {}", self.missing.join(", "))?;
        }
        if !self.extra.is_empty() {
            write!(f, "; unexpected: {}", self.extra.join(", "))?;
        }
        if !self.bad_shape.is_empty() {
            write!(f, "; wrong shape: {}", self.bad_shape.join(", "))?;
        }
        Ok(())
    }
}

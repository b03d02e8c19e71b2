//! The network's building blocks and their wiring.
//!
//! Symbols follow the block diagram: `C` is a 3x3 convolution, `CR` a
//! convolution followed by ReLU, `TM` the transformer mechanism (MHSA then
//! CFE, each with a residual), `ITM` the improved transformer mechanism and
//! `FM` the fusion mechanism (channel concatenation then a depthwise
//! separable convolution back to the base width).

use super::config::{ModelConfig, SbResidual};
use super::params::BoundParams;
use super::trace::ActivationTrace;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Graph, Tensor, Var};

const WINDOW_PERM: [usize; 8] = [0, 2, 5, 3, 6, 1, 4, 7];

/// Splits `[N, C, H, W]` into non-overlapping windows of `window x window`
/// tokens, each token a `patch x patch` pixel block:
/// `[N * windows, window^2, C * patch^2]`.
pub fn tokenize(g: &mut Graph, x: &Var, window: usize, patch: usize) -> Result<Var> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let side = window * patch;
    if s.len() != 4 || h % side != 0 || w % side != 0 {
        return Err(Error::shape(format!("tokenize: {s:?} is not a multiple of {side}")));
    }
    let (nh, nw) = (h / side, w / side);
    let r = g.reshape(x, &[n, c, nh, window, patch, nw, window, patch])?;
    let p = g.permute(&r, &WINDOW_PERM)?;
    g.reshape(&p, &[n * nh * nw, window * window, c * patch * patch])
}

/// Inverse of [`tokenize`] for a map of shape `[n, c, h, w]`.
pub fn detokenize(g: &mut Graph, t: &Var, map: [usize; 4], window: usize, patch: usize) -> Result<Var> {
    let [n, c, h, w] = map;
    let side = window * patch;
    if h % side != 0 || w % side != 0 || t.shape() != [n * (h / side) * (w / side), window * window, c * patch * patch]
    {
        return Err(Error::shape(format!("detokenize: tokens {:?} do not tile {map:?}", t.shape())));
    }
    let (nh, nw) = (h / side, w / side);
    let r = g.reshape(t, &[n, nh, nw, window, window, c, patch, patch])?;
    let p = g.permute(&r, &kernels::inverse_perm(&WINDOW_PERM))?;
    g.reshape(&p, &[n, c, h, w])
}

fn tokens_to_map(t: &Tensor, map: [usize; 4], window: usize, patch: usize) -> Tensor {
    let [n, c, h, w] = map;
    let (nh, nw) = (h / (window * patch), w / (window * patch));
    let (data, _) = kernels::permute(
        t.data(),
        &[n, nh, nw, window, window, c, patch, patch],
        &kernels::inverse_perm(&WINDOW_PERM),
    );
    Tensor::new(map, data).expect("token layout")
}

/// Outputs of SubNet1 consumed by the other sub-networks.
pub struct Subnet1Out {
    pub o_subnet1: Var,
    pub o_it: Var,
    pub tm_o_it: Var,
}

pub struct Subnet2Out {
    pub o_subnet2: Var,
    /// Fused result fed to SubNet2's last transformer (`O_It2`).
    pub o_it2: Var,
    /// First SubNet1/SubNet2 interaction (`O_It3`).
    pub o_it3: Var,
}

/// One forward pass over bound parameters.
pub struct Forward<'a> {
    g: &'a mut Graph,
    params: &'a BoundParams,
    cfg: &'a ModelConfig,
    trace: Option<ActivationTrace>,
    map: [usize; 4],
}

impl<'a> Forward<'a> {
    pub fn new(g: &'a mut Graph, params: &'a BoundParams, cfg: &'a ModelConfig, tracing: bool) -> Self {
        Forward { g, params, cfg, trace: tracing.then(ActivationTrace::new), map: [0; 4] }
    }

    pub fn graph(&mut self) -> &mut Graph {
        self.g
    }

    pub fn into_trace(self) -> Option<ActivationTrace> {
        self.trace
    }

    fn p(&self, name: &str) -> Result<&'a Var> {
        self.params.get(name)
    }

    fn check(name: &str, v: &Tensor) -> Result<()> {
        if v.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric { layer: name.to_string() })
        }
    }

    fn record(&mut self, name: &str, v: &Var) -> Result<()> {
        Self::check(name, v.value())?;
        if let Some(t) = self.trace.as_mut() {
            t.push(name.to_string(), v.value().clone());
        }
        Ok(())
    }

    fn record_tokens(&mut self, name: &str, v: &Var) -> Result<()> {
        Self::check(name, v.value())?;
        if let Some(t) = self.trace.as_mut() {
            let m = [self.map[0], self.cfg.width, self.map[2], self.map[3]];
            t.push(name.to_string(), tokens_to_map(v.value(), m, self.cfg.window, self.cfg.token_patch));
        }
        Ok(())
    }

    fn set_map(&mut self, x: &Var) {
        let s = x.shape();
        self.map = [s[0], s[1], s[2], s[3]];
    }

    fn conv(&mut self, name: &str, x: &Var, relu: bool) -> Result<Var> {
        let (w, b) = (self.p(&format!("{name}.w"))?, self.p(&format!("{name}.b"))?);
        let y = self.g.conv2d(x, w, b)?;
        let y = if relu { self.g.relu(&y) } else { y };
        self.record(name, &y)?;
        Ok(y)
    }

    fn fcl(&mut self, name: &str, x: &Var) -> Result<Var> {
        let (w, b) = (self.p(&format!("{name}.w"))?, self.p(&format!("{name}.b"))?);
        self.g.linear(x, w, b)
    }

    fn ln(&mut self, name: &str, x: &Var) -> Result<Var> {
        let (gm, bt) = (self.p(&format!("{name}.gamma"))?, self.p(&format!("{name}.beta"))?);
        self.g.layer_norm(x, gm, bt, self.cfg.ln_eps)
    }

    fn split_heads(&mut self, x: &Var) -> Result<Var> {
        let s = x.shape();
        let (groups, t, d, h) = (s[0], s[1], s[2], self.cfg.heads);
        let r = self.g.reshape(x, &[groups, t, h, d / h])?;
        let p = self.g.permute(&r, &[0, 2, 1, 3])?;
        self.g.reshape(&p, &[groups * h, t, d / h])
    }

    fn merge_heads(&mut self, x: &Var, groups: usize) -> Result<Var> {
        let s = x.shape();
        let (t, dh, h) = (s[1], s[2], self.cfg.heads);
        let r = self.g.reshape(x, &[groups, h, t, dh])?;
        let p = self.g.permute(&r, &[0, 2, 1, 3])?;
        self.g.reshape(&p, &[groups, t, h * dh])
    }

    /// `FCL(softmax(Q K^T / d) V)` with `Q, K, V = FCL(LN(t))`, per head.
    pub fn mhsa(&mut self, prefix: &str, t: &Var) -> Result<Var> {
        let groups = t.shape()[0];
        let n = self.ln(&format!("{prefix}.ln"), t)?;
        let q = self.fcl(&format!("{prefix}.q"), &n)?;
        let k = self.fcl(&format!("{prefix}.k"), &n)?;
        let v = self.fcl(&format!("{prefix}.v"), &n)?;
        let (q, k, v) = (self.split_heads(&q)?, self.split_heads(&k)?, self.split_heads(&v)?);
        let kt = self.g.permute(&k, &[0, 2, 1])?;
        let scores = self.g.matmul(&q, &kt)?;
        let scores = self.g.scale(&scores, 1.0 / self.cfg.scale());
        let attn = self.g.softmax(&scores);
        let mixed = self.g.matmul(&attn, &v)?;
        let merged = self.merge_heads(&mixed, groups)?;
        self.fcl(&format!("{prefix}.proj"), &merged)
    }

    /// `FCL(FCLR(LN(x))) + x`.
    pub fn cfe(&mut self, prefix: &str, x: &Var) -> Result<Var> {
        let n = self.ln(&format!("{prefix}.ln"), x)?;
        let h = self.fcl(&format!("{prefix}.fc1"), &n)?;
        let h = self.g.relu(&h);
        let y = self.fcl(&format!("{prefix}.fc2"), &h)?;
        self.g.add(&y, x)
    }

    /// Transformer mechanism on tokens: `CFE(MHSA(t + p) + (t + p))`.
    pub fn tm_tokens(&mut self, prefix: &str, t: &Var) -> Result<Var> {
        let pos = self.p(&format!("{prefix}.pos"))?;
        let t_in = self.g.add_broadcast(t, pos)?;
        let o_mhsa = self.mhsa(&format!("{prefix}.mhsa"), &t_in)?;
        self.record_tokens(&format!("{prefix}.O_MHSA"), &o_mhsa)?;
        let o_in_cfe = self.g.add(&o_mhsa, &t_in)?;
        self.record_tokens(&format!("{prefix}.O_IN_CFE"), &o_in_cfe)?;
        let out = self.cfe(&format!("{prefix}.cfe"), &o_in_cfe)?;
        self.record_tokens(prefix, &out)?;
        Ok(out)
    }

    fn tokens(&mut self, x: &Var) -> Result<Var> {
        tokenize(self.g, x, self.cfg.window, self.cfg.token_patch)
    }

    fn untokens(&mut self, t: &Var) -> Result<Var> {
        let m = [self.map[0], self.cfg.width, self.map[2], self.map[3]];
        detokenize(self.g, t, m, self.cfg.window, self.cfg.token_patch)
    }

    /// Transformer mechanism on a `[N, C, H, W]` feature map.
    pub fn tm(&mut self, prefix: &str, x: &Var) -> Result<Var> {
        self.set_map(x);
        let t = self.tokens(x)?;
        let y = self.tm_tokens(prefix, &t)?;
        self.untokens(&y)
    }

    /// Improved transformer mechanism:
    /// `y1 = FCL(x) + x`, `y2 = TM(y1)`, `y3 = FCL(FCLR(y2)) + y2`.
    pub fn itm(&mut self, prefix: &str, x: &Var) -> Result<Var> {
        self.set_map(x);
        let t = self.tokens(x)?;
        let a = self.fcl(&format!("{prefix}.fc_in"), &t)?;
        let y1 = self.g.add(&a, &t)?;
        self.record_tokens(&format!("{prefix}.O_FCL"), &y1)?;
        let y2 = self.tm_tokens(&format!("{prefix}.tm"), &y1)?;
        let m = self.fcl(&format!("{prefix}.fc_mid"), &y2)?;
        let m = self.g.relu(&m);
        let o = self.fcl(&format!("{prefix}.fc_out"), &m)?;
        let y3 = self.g.add(&o, &y2)?;
        self.record_tokens(prefix, &y3)?;
        self.untokens(&y3)
    }

    /// Fusion mechanism: concatenate along channels, depthwise 3x3, pointwise 1x1.
    pub fn fm(&mut self, prefix: &str, inputs: &[&Var]) -> Result<Var> {
        if !(2..=3).contains(&inputs.len()) || inputs.iter().any(|x| x.shape() != inputs[0].shape()) {
            return Err(Error::shape(format!(
                "{prefix}: fusion needs 2 or 3 equally shaped maps, got {:?}",
                inputs.iter().map(|x| x.shape().to_vec()).collect::<Vec<_>>()
            )));
        }
        let cat = self.g.concat_channels(inputs)?;
        let zero_bias = self.g.constant(Tensor::zeros([cat.shape()[1]]));
        let dw = self.g.depthwise_conv2d(&cat, self.p(&format!("{prefix}.dw.w"))?, &zero_bias)?;
        let (pw, pb) = (self.p(&format!("{prefix}.pw.w"))?, self.p(&format!("{prefix}.pw.b"))?);
        let y = self.g.pointwise_conv2d(&dw, pw, pb)?;
        self.record(prefix, &y)?;
        Ok(y)
    }

    /// Serial block: `TM(C(CR(C(I_N))) + C(I_N))`.
    pub fn sb(&mut self, i_n: &Var) -> Result<Var> {
        let ab = self.cfg.ablation;
        let c1 = self.conv("sb.conv1", i_n, false)?;
        let o_sb = if ab.sb_single_conv {
            c1
        } else {
            let c2 = self.conv("sb.conv2", &c1, true)?;
            let c3 = self.conv("sb.conv3", &c2, false)?;
            let skip = match self.cfg.sb_residual {
                SbResidual::FirstConv => &c1,
                SbResidual::SecondConv => &c2,
            };
            let o_in_tm = self.g.add(&c3, skip)?;
            self.record("O_IN_TM", &o_in_tm)?;
            if ab.sb_tm() {
                self.tm("sb.tm", &o_in_tm)?
            } else {
                o_in_tm
            }
        };
        self.record("O_SB", &o_sb)?;
        Ok(o_sb)
    }

    /// SubNet1: `O_It = CR(C(CR(O_SB))) + O_SB`,
    /// `O_SubNet1 = TM(O_It) + C(CR(TM(O_It)))`.
    pub fn subnet1(&mut self, o_sb: &Var) -> Result<Subnet1Out> {
        let a = self.conv("subnet1.conv1", o_sb, true)?;
        let a = self.conv("subnet1.conv2", &a, false)?;
        let a = self.conv("subnet1.conv3", &a, true)?;
        let o_it = self.g.add(&a, o_sb)?;
        self.record("O_It", &o_it)?;
        let tm_o_it = self.tm("subnet1.tm", &o_it)?;
        let b = self.conv("subnet1.conv4", &tm_o_it, true)?;
        let b = self.conv("subnet1.conv5", &b, false)?;
        let o_subnet1 = self.g.add(&tm_o_it, &b)?;
        self.record("O_SubNet1", &o_subnet1)?;
        Ok(Subnet1Out { o_subnet1, o_it, tm_o_it })
    }

    /// SubNet2:
    /// `O_It3 = FM(TM1(C(CR(O_SB)) + O_SB), O_It)`,
    /// `O_It2 = FM(TM2(C(CR(O_It3)) + O_It3), O_SubNet1)`,
    /// `O_SubNet2 = TM3(O_It2)`.
    pub fn subnet2(&mut self, o_sb: &Var, s1: &Subnet1Out) -> Result<Subnet2Out> {
        let fuse = !self.cfg.ablation.no_subnet2_fusion;
        let a = self.conv("subnet2.conv1", o_sb, true)?;
        let a = self.conv("subnet2.conv2", &a, false)?;
        let r1 = self.g.add(&a, o_sb)?;
        self.record("subnet2.res1", &r1)?;
        let t1 = self.tm("subnet2.tm1", &r1)?;
        let o_it3 = if fuse {
            let f = self.fm("subnet2.fm1", &[&t1, &s1.o_it])?;
            self.record("O_It3", &f)?;
            f
        } else {
            t1
        };
        let b = self.conv("subnet2.conv3", &o_it3, true)?;
        let b = self.conv("subnet2.conv4", &b, false)?;
        let r2 = self.g.add(&b, &o_it3)?;
        self.record("subnet2.res2", &r2)?;
        let t2 = self.tm("subnet2.tm2", &r2)?;
        let o_it2 = if fuse {
            let f = self.fm("subnet2.fm2", &[&t2, &s1.o_subnet1])?;
            self.record("O_It2", &f)?;
            f
        } else {
            t2
        };
        let o_subnet2 = self.tm("subnet2.tm3", &o_it2)?;
        self.record("O_SubNet2", &o_subnet2)?;
        Ok(Subnet2Out { o_subnet2, o_it2, o_it3 })
    }

    /// SubNet3: `CR -> TM -> TM -> FM(., O_It2) -> CR -> TM -> TM ->
    /// FM(., O_SubNet2) -> ITM -> FM(., O_SubNet1, O_SubNet2) -> ITM`.
    pub fn subnet3(&mut self, o_sb: &Var, o_it2: &Var, o_subnet1: &Var, o_subnet2: &Var) -> Result<Var> {
        let itm = !self.cfg.ablation.no_itm;
        let a = self.conv("subnet3.conv1", o_sb, true)?;
        let a = self.tm("subnet3.tm1", &a)?;
        let a = self.tm("subnet3.tm2", &a)?;
        let a = self.fm("subnet3.fm1", &[&a, o_it2])?;
        let a = self.conv("subnet3.conv2", &a, true)?;
        let a = self.tm("subnet3.tm3", &a)?;
        let a = self.tm("subnet3.tm4", &a)?;
        let a = self.fm("subnet3.fm2", &[&a, o_subnet2])?;
        let a = if itm { self.itm("subnet3.itm1", &a)? } else { a };
        let a = self.fm("subnet3.fm3", &[&a, o_subnet1, o_subnet2])?;
        let o_pb = if itm { self.itm("subnet3.itm2", &a)? } else { a };
        Ok(o_pb)
    }

    /// Parallel block over the serial block's output.
    pub fn pb(&mut self, o_sb: &Var) -> Result<Var> {
        let ab = self.cfg.ablation;
        let o_pb = if !ab.subnets() {
            o_sb.clone()
        } else {
            let s1 = self.subnet1(o_sb)?;
            let s2 = self.subnet2(o_sb, &s1)?;
            if ab.subnet3() {
                self.subnet3(o_sb, &s2.o_it2, &s1.o_subnet1, &s2.o_subnet2)?
            } else {
                s2.o_subnet2
            }
        };
        self.record("O_PB", &o_pb)?;
        Ok(o_pb)
    }

    /// Residual block: `I_C = I_N - C(O_PB)`.
    pub fn rb(&mut self, i_n: &Var, o_pb: &Var) -> Result<Var> {
        let r = self.conv("rb.conv", o_pb, false)?;
        self.g.sub(i_n, &r)
    }

    /// Full network on an input whose sides are multiples of
    /// [`ModelConfig::spatial_multiple`].
    pub fn ctnet(&mut self, i_n: &Var) -> Result<Var> {
        let o_sb = self.sb(i_n)?;
        let o_pb = self.pb(&o_sb)?;
        self.rb(i_n, &o_pb)
    }
}

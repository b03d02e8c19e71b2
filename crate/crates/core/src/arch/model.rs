use super::blocks::Forward;
use super::config::ModelConfig;
use super::params::{BoundParams, ModelParams};
use super::trace::ActivationTrace;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Runs the network on `[N, C, H, W]` inputs of any spatial size.
///
/// Inputs are mirror-padded on the bottom and right up to a multiple of the
/// attention tile, and the output is cropped back to `H x W`.
pub fn ctnet_forward_graph(
    g: &mut Graph,
    params: &BoundParams,
    cfg: &ModelConfig,
    i_n: &Var,
    tracing: bool,
) -> Result<(Var, Option<ActivationTrace>)> {
    let s = i_n.shape();
    if s.len() != 4 || s[1] != cfg.image_channels {
        return Err(Error::shape(format!(
            "expected [N, {}, H, W] input, got {s:?}",
            cfg.image_channels
        )));
    }
    if !i_n.value().is_finite() {
        return Err(Error::Numeric { layer: "I_N".into() });
    }
    let (h, w) = (s[2], s[3]);
    let m = cfg.spatial_multiple();
    let (ph, pw) = (h.div_ceil(m) * m - h, w.div_ceil(m) * m - w);
    let padded = if ph + pw > 0 { g.reflect_pad(i_n, [0, ph, 0, pw])? } else { i_n.clone() };

    let mut fwd = Forward::new(g, params, cfg, tracing);
    let out = fwd.ctnet(&padded)?;
    let mut trace = fwd.into_trace();
    let out = if ph + pw > 0 { g.crop(&out, 0, 0, h, w)? } else { out };
    if !out.value().is_finite() {
        return Err(Error::Numeric { layer: "I_C".into() });
    }
    if let Some(t) = trace.as_mut() {
        t.push("I_C".into(), out.value().clone());
    }
    Ok((out, trace))
}

/// Forward-only convenience wrapper.
pub fn ctnet_forward(
    i_n: &Tensor,
    params: &ModelParams,
    cfg: &ModelConfig,
    tracing: bool,
) -> Result<(Tensor, Option<ActivationTrace>)> {
    cfg.validate()?;
    let mut g = Graph::no_grad();
    let bound = params.bind(&mut g, false);
    let x = g.constant(i_n.clone());
    let (y, trace) = ctnet_forward_graph(&mut g, &bound, cfg, &x, tracing)?;
    Ok((y.value().clone(), trace))
}

/// Trace entry names a traced forward emits for `cfg`, in emission order.
pub fn trace_names(cfg: &ModelConfig) -> Vec<String> {
    let ab = &cfg.ablation;
    let mut v: Vec<String> = Vec::new();
    let mut push = |s: &str| v.push(s.to_string());
    fn tm(p: &str) -> [String; 3] {
        [format!("{p}.O_MHSA"), format!("{p}.O_IN_CFE"), p.to_string()]
    }
    fn itm(p: &str) -> Vec<String> {
        let mut v = vec![format!("{p}.O_FCL")];
        v.extend(tm(&format!("{p}.tm")));
        v.push(p.to_string());
        v
    }

    push("sb.conv1");
    if !ab.sb_single_conv {
        push("sb.conv2");
        push("sb.conv3");
        push("O_IN_TM");
        if ab.sb_tm() {
            tm("sb.tm").iter().for_each(|s| push(s));
        }
    }
    push("O_SB");
    if ab.subnets() {
        for s in ["subnet1.conv1", "subnet1.conv2", "subnet1.conv3", "O_It"] {
            push(s);
        }
        tm("subnet1.tm").iter().for_each(|s| push(s));
        for s in ["subnet1.conv4", "subnet1.conv5", "O_SubNet1"] {
            push(s);
        }
        for s in ["subnet2.conv1", "subnet2.conv2", "subnet2.res1"] {
            push(s);
        }
        tm("subnet2.tm1").iter().for_each(|s| push(s));
        if !ab.no_subnet2_fusion {
            push("subnet2.fm1");
            push("O_It3");
        }
        for s in ["subnet2.conv3", "subnet2.conv4", "subnet2.res2"] {
            push(s);
        }
        tm("subnet2.tm2").iter().for_each(|s| push(s));
        if !ab.no_subnet2_fusion {
            push("subnet2.fm2");
            push("O_It2");
        }
        tm("subnet2.tm3").iter().for_each(|s| push(s));
        push("O_SubNet2");
    }
    if ab.subnet3() {
        push("subnet3.conv1");
        tm("subnet3.tm1").iter().for_each(|s| push(s));
        tm("subnet3.tm2").iter().for_each(|s| push(s));
        push("subnet3.fm1");
        push("subnet3.conv2");
        tm("subnet3.tm3").iter().for_each(|s| push(s));
        tm("subnet3.tm4").iter().for_each(|s| push(s));
        push("subnet3.fm2");
        if !ab.no_itm {
            itm("subnet3.itm1").iter().for_each(|s| push(s));
        }
        push("subnet3.fm3");
        if !ab.no_itm {
            itm("subnet3.itm2").iter().for_each(|s| push(s));
        }
    }
    push("O_PB");
    push("rb.conv");
    push("I_C");
    v
}

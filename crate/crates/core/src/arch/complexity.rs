//! Closed-form parameter and operation counts.
//!
//! Multiply-adds count as two operations. Convolutions, fully connected
//! layers and the two attention products (`Q K^T` and `A V`) are counted;
//! biases, normalization, softmax, activations and residual additions are not.

use serde::Serialize;

use super::config::ModelConfig;

fn conv_params(cin: u64, cout: u64) -> u64 {
    9 * cin * cout + cout
}

fn fcl_params(din: u64, dout: u64) -> u64 {
    din * dout + dout
}

fn tm_params(cfg: &ModelConfig) -> u64 {
    let (d, t, hid) = (cfg.embed_dim() as u64, cfg.tokens_per_window() as u64, cfg.cfe_hidden() as u64);
    t * d + 2 * (2 * d) + 4 * fcl_params(d, d) + fcl_params(d, hid) + fcl_params(hid, d)
}

fn itm_params(cfg: &ModelConfig) -> u64 {
    let d = cfg.embed_dim() as u64;
    3 * fcl_params(d, d) + tm_params(cfg)
}

fn fm_params(cfg: &ModelConfig, inputs: u64) -> u64 {
    let c = cfg.width as u64;
    9 * inputs * c + inputs * c * c + c
}

/// Per-block parameter counts, in network order.
#[derive(Clone, Debug, Serialize)]
pub struct BlockCount {
    pub block: &'static str,
    pub params: u64,
    pub flops: u64,
}

pub fn count_parameters(cfg: &ModelConfig) -> u64 {
    block_breakdown(cfg, cfg.spatial_multiple(), cfg.spatial_multiple()).iter().map(|b| b.params).sum()
}

/// Forward operation count for one `h x w` image.
pub fn estimate_flops(cfg: &ModelConfig, h: usize, w: usize) -> u64 {
    block_breakdown(cfg, h, w).iter().map(|b| b.flops).sum()
}

pub fn block_breakdown(cfg: &ModelConfig, h: usize, w: usize) -> Vec<BlockCount> {
    let m = cfg.spatial_multiple();
    let (h, w) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let hw = (h * w) as u64;
    let c = cfg.width as u64;
    let ic = cfg.image_channels as u64;
    let d = cfg.embed_dim() as u64;
    let t = cfg.tokens_per_window() as u64;
    let hid = cfg.cfe_hidden() as u64;
    let tokens = hw / (cfg.token_patch * cfg.token_patch) as u64;
    let ab = &cfg.ablation;

    let conv_f = |cin: u64, cout: u64| 2 * 9 * cin * cout * hw;
    let fcl_f = |din: u64, dout: u64| 2 * tokens * din * dout;
    let tm_f = 4 * fcl_f(d, d) + fcl_f(d, hid) + fcl_f(hid, d) + 2 * (2 * tokens * t * d);
    let itm_f = 3 * fcl_f(d, d) + tm_f;
    let fm_f = |k: u64| 2 * 9 * k * c * hw + 2 * k * c * c * hw;
    let cc_p = conv_params(c, c);
    let cc_f = conv_f(c, c);

    let mut out = Vec::new();

    let (mut sp, mut sf) = (conv_params(ic, c), conv_f(ic, c));
    if !ab.sb_single_conv {
        sp += 2 * cc_p;
        sf += 2 * cc_f;
        if ab.sb_tm() {
            sp += tm_params(cfg);
            sf += tm_f;
        }
    }
    out.push(BlockCount { block: "sb", params: sp, flops: sf });

    if ab.subnets() {
        out.push(BlockCount { block: "subnet1", params: 5 * cc_p + tm_params(cfg), flops: 5 * cc_f + tm_f });
        let (mut p2, mut f2) = (4 * cc_p + 3 * tm_params(cfg), 4 * cc_f + 3 * tm_f);
        if !ab.no_subnet2_fusion {
            p2 += 2 * fm_params(cfg, 2);
            f2 += 2 * fm_f(2);
        }
        out.push(BlockCount { block: "subnet2", params: p2, flops: f2 });
    }
    if ab.subnet3() {
        let (mut p3, mut f3) = (
            2 * cc_p + 4 * tm_params(cfg) + 2 * fm_params(cfg, 2) + fm_params(cfg, 3),
            2 * cc_f + 4 * tm_f + 2 * fm_f(2) + fm_f(3),
        );
        if !ab.no_itm {
            p3 += 2 * itm_params(cfg);
            f3 += 2 * itm_f;
        }
        out.push(BlockCount { block: "subnet3", params: p3, flops: f3 });
    }
    out.push(BlockCount { block: "rb", params: conv_params(c, ic), flops: conv_f(c, ic) });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_conv_count() {
        assert_eq!(conv_params(64, 64), 36_928);
    }

    #[test]
    fn flops_scale_with_area() {
        let cfg = ModelConfig::tiny(1);
        assert_eq!(estimate_flops(&cfg, 32, 32), 4 * estimate_flops(&cfg, 16, 16));
        // sizes round up to the attention tile
        assert_eq!(estimate_flops(&cfg, 13, 15), estimate_flops(&cfg, 16, 16));
    }
}

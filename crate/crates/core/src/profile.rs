//! Closed-form complexity accounting: parameters, FLOPs (one fused
//! multiply-accumulate per weight application), and memory access cost in
//! bytes (4-byte elements), plus the grouped-filter MAC lower bound.

use crate::error::{Error, Result};
use crate::net::{Filter, SmallDepthModel, Subgraph};
use crate::scalar::Scalar;
use crate::tensor::ConvSpec;

/// Weight parameter count of a filter site (bias excluded; reported apart).
pub fn layer_param(spec: &ConvSpec) -> Result<u64> {
    spec.validate()?;
    Ok((spec.c_in / spec.groups * spec.c_out * spec.k_h * spec.k_w) as u64)
}

/// Multiply-accumulate count at the given output size.
pub fn layer_flops(spec: &ConvSpec, out_h: usize, out_w: usize) -> Result<u64> {
    Ok(layer_param(spec)? * (out_h as u64) * (out_w as u64))
}

/// Bytes moved for inputs, weights, and outputs.
pub fn layer_mac(spec: &ConvSpec, in_hw: (usize, usize), out_hw: (usize, usize)) -> Result<u64> {
    let act_in = (in_hw.0 * in_hw.1 * spec.c_in) as u64;
    let act_out = (out_hw.0 * out_hw.1 * spec.c_out) as u64;
    Ok((act_in + layer_param(spec)? + act_out) * 4)
}

fn isqrt(v: u128) -> u128 {
    if v == 0 {
        return 0;
    }
    let mut x = (v as f64).sqrt() as u128;
    while (x + 1) * (x + 1) <= v {
        x += 1;
    }
    while x * x > v {
        x -= 1;
    }
    x
}

/// Lower bound on the memory access cost of any layer with the given
/// parameter budget, groups, and kernel extent at spatial size `h*w`
/// (rounded down when the channel product is not a perfect square). Equality
/// holds exactly at c_in = c_out when input and output sizes agree.
pub fn mac_lower_bound(param: u64, g: usize, k_h: usize, k_w: usize, h: usize, w: usize) -> u64 {
    // param * g / (k_h * k_w) = c_in * c_out exactly for any valid spec
    let prod = (param as u128) * (g as u128) / ((k_h * k_w) as u128);
    let hw = (h * w) as u128;
    (4 * (2 * hw * isqrt(prod) + param as u128)) as u64
}

/// Exact integer check that the bound never exceeds the true cost:
/// (2*ho*wo)^2 * c_in * c_out <= (hi*wi*c_in + ho*wo*c_out)^2.
pub fn mac_bound_holds(spec: &ConvSpec, in_hw: (usize, usize), out_hw: (usize, usize)) -> bool {
    let ci = spec.c_in as u128;
    let co = spec.c_out as u128;
    let a = (in_hw.0 * in_hw.1) as u128 * ci;
    let b = (out_hw.0 * out_hw.1) as u128 * co;
    let lhs = 4 * ((out_hw.0 * out_hw.1) as u128).pow(2) * ci * co;
    lhs <= (a + b).pow(2)
}

/// One profiled filter site.
#[derive(Clone, Debug)]
pub struct SiteRow {
    pub name: String,
    pub subgraph: Subgraph,
    pub spec: ConvSpec,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub param: u64,
    pub bias_param: u64,
    pub flops: u64,
    pub mac_bytes: u64,
    /// Learnable weight elements of the train-form bank, when the site is one.
    pub train_param: Option<u64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Totals {
    pub param: u64,
    pub bias_param: u64,
    pub flops: u64,
    pub mac_bytes: u64,
}

/// Per-site complexity rows plus subgraph totals.
#[derive(Clone, Debug)]
pub struct ComplexityReport {
    pub input_hw: (usize, usize),
    pub rows: Vec<SiteRow>,
}

impl ComplexityReport {
    pub fn totals(&self, subgraph: Option<Subgraph>) -> Totals {
        let mut t = Totals::default();
        for r in &self.rows {
            if subgraph.map(|s| s == r.subgraph).unwrap_or(true) {
                t.param += r.param;
                t.bias_param += r.bias_param;
                t.flops += r.flops;
                t.mac_bytes += r.mac_bytes;
            }
        }
        t
    }

    /// Decoder-side totals as split in the published budget (decoder + heads).
    pub fn decoder_totals(&self) -> Totals {
        let d = self.totals(Some(Subgraph::Decoder));
        let h = self.totals(Some(Subgraph::Heads));
        Totals {
            param: d.param + h.param,
            bias_param: d.bias_param + h.bias_param,
            flops: d.flops + h.flops,
            mac_bytes: d.mac_bytes + h.mac_bytes,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "name,subgraph,c_in,c_out,k_h,k_w,groups,stride,dilation,in_h,in_w,out_h,out_w,param,bias_param,flops,mac_bytes,train_param\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:?},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.name,
                r.subgraph,
                r.spec.c_in,
                r.spec.c_out,
                r.spec.k_h,
                r.spec.k_w,
                r.spec.groups,
                r.spec.stride.0,
                r.spec.dilation.0,
                r.in_hw.0,
                r.in_hw.1,
                r.out_hw.0,
                r.out_hw.1,
                r.param,
                r.bias_param,
                r.flops,
                r.mac_bytes,
                r.train_param.map(|v| v.to_string()).unwrap_or_default(),
            ));
        }
        s
    }

    pub fn render_table(&self) -> String {
        let mut s = format!(
            "{:<22} {:>10} {:>14} {:>14}  shape\n",
            "site", "Param", "FLOPs", "MAC(B)"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<22} {:>10} {:>14} {:>14}  {}x{} k{}x{} g{} s{} d{} @{}x{}->{}x{}\n",
                r.name,
                r.param,
                r.flops,
                r.mac_bytes,
                r.spec.c_in,
                r.spec.c_out,
                r.spec.k_h,
                r.spec.k_w,
                r.spec.groups,
                r.spec.stride.0,
                r.spec.dilation.0,
                r.in_hw.0,
                r.in_hw.1,
                r.out_hw.0,
                r.out_hw.1
            ));
        }
        let enc = self.totals(Some(Subgraph::Encoder));
        let dec = self.decoder_totals();
        let all = self.totals(None);
        for (label, t) in [("encoder", enc), ("decoder+heads", dec), ("total", all)] {
            s.push_str(&format!(
                "{:<22} {:>10} {:>14} {:>14}  ({:.3} M / {:.3} G / {:.2} MB)\n",
                label,
                t.param,
                t.flops,
                t.mac_bytes,
                t.param as f64 / 1e6,
                t.flops as f64 / 1e9,
                t.mac_bytes as f64 / 1e6
            ));
        }
        s
    }
}

/// Profile every filter site of a model at the given input size. Shape
/// propagation follows the forward pass exactly.
pub fn profile_model<T: Scalar>(model: &SmallDepthModel<T>, input_hw: (usize, usize)) -> Result<ComplexityReport> {
    let (h, w) = input_hw;
    if h == 0 || w == 0 {
        return Err(Error::invalid("input dims must be positive"));
    }
    let mut rows = Vec::new();
    let mut push = |name: &str, sub: Subgraph, spec: &ConvSpec, in_hw: (usize, usize), train_param: Option<u64>| -> Result<(usize, usize)> {
        let out_hw = spec.out_hw(in_hw.0, in_hw.1)?;
        rows.push(SiteRow {
            name: name.to_string(),
            subgraph: sub,
            spec: *spec,
            in_hw,
            out_hw,
            param: layer_param(spec)?,
            bias_param: if spec.has_bias { spec.c_out as u64 } else { 0 },
            flops: layer_flops(spec, out_hw.0, out_hw.1)?,
            mac_bytes: layer_mac(spec, in_hw, out_hw)?,
            train_param,
        });
        Ok(out_hw)
    };
    let train_count = |u: &crate::net::ConvUnit<T>| -> Option<u64> {
        match &u.filter {
            Filter::Bank(b) => Some(b.train_param_count()),
            Filter::Single(_) => None,
        }
    };

    // encoder levels
    let mut level_hw = Vec::new();
    let hw0 = push("stem", Subgraph::Encoder, &model.stem.spec, (h, w), None)?;
    level_hw.push(hw0);
    for (i, stage) in model.stages.iter().enumerate() {
        let prev = level_hw[i];
        let hw = push(&stage.context.name, Subgraph::Encoder, &stage.context.spec, prev, train_count(&stage.context))?;
        let hw2 = push(&stage.channel.name, Subgraph::Encoder, &stage.channel.spec, prev, train_count(&stage.channel))?;
        if hw != hw2 {
            return Err(Error::shape(format!(
                "downsample paths disagree: {:?} vs {:?}",
                hw, hw2
            )));
        }
        for b in &stage.blocks {
            for u in [&b.expand, &b.sc, &b.spc, &b.contract] {
                push(&u.name, Subgraph::Encoder, &u.spec, hw, train_count(u))?;
            }
        }
        level_hw.push(hw);
    }

    // decoder: upsample into level k reads level k+1 and doubles after sc1
    for (k, u) in model.ups.iter().enumerate() {
        let lo = level_hw[k + 1];
        let hi = (lo.0 * 2, lo.1 * 2);
        push(&u.ct.name, Subgraph::Decoder, &u.ct.spec, lo, train_count(&u.ct))?;
        push(&u.sc1.name, Subgraph::Decoder, &u.sc1.spec, lo, train_count(&u.sc1))?;
        push(&u.chs.name, Subgraph::Decoder, &u.chs.spec, hi, train_count(&u.chs))?;
        push(&u.sc2.name, Subgraph::Decoder, &u.sc2.spec, hi, train_count(&u.sc2))?;
        if hi != level_hw[k] {
            return Err(Error::shape(format!(
                "decoder level {k}: upsampled {:?} does not match skip {:?}",
                hi, level_hw[k]
            )));
        }
    }
    for (k, head) in model.heads.iter().enumerate() {
        let hw = level_hw[k];
        push(&head.d1.name, Subgraph::Heads, &head.d1.spec, hw, train_count(&head.d1))?;
        push(&head.d2.name, Subgraph::Heads, &head.d2.spec, hw, train_count(&head.d2))?;
    }

    Ok(ComplexityReport { input_hw, rows })
}

/// Brute-force parameter oracle: total elements of every stored weight
/// tensor (the fused/single inference form).
pub fn brute_force_param_count<T: Scalar>(model: &SmallDepthModel<T>) -> u64 {
    model
        .units()
        .iter()
        .map(|(_, u)| match &u.filter {
            Filter::Single(w) => w.numel() as u64,
            Filter::Bank(b) => {
                // inference form of a bank is its fused single filter
                let d = b.spec.weight_dims();
                (d[0] * d[1] * d[2] * d[3]) as u64
            }
        })
        .sum()
}

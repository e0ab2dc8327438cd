//! The SmallDepth network: strided stem, sparse downsampling, double-scale
//! sparse residual blocks, sparse upsampling, skip-connected decoder, and
//! paired dilated disparity heads.
//!
//! Five encoder maps at strides {2,4,8,16,32}; four decoded maps; disparity
//! at four scales in (0,1). All stochastic paths are inactive at inference.

use crate::drop::{drop_batch, Mode};
use crate::error::{Error, Result};
use crate::etm::{self, EtmBank};
use crate::rng::Rng;
use crate::scalar::{lit, Scalar};
use crate::tape::{GradTape, NodeId};
use crate::tensor::{add, bilinear_resize, conv2d, sigmoid, ConvSpec, Tensor4};

/// Per-stage structure: width, residual block count, expansion ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageConfig {
    pub width: usize,
    pub blocks: usize,
    pub expansion: usize,
}

/// Whole-model configuration. The defaults are the calibrated widths whose
/// complexity report lands on the published budget.
#[derive(Clone, Debug, PartialEq)]
pub struct SmallDepthConfig {
    /// c_0..c_4: stem width plus the four stage widths.
    pub widths: [usize; 5],
    /// Residual blocks per stage 1..4.
    pub blocks: [usize; 4],
    /// Expansion ratio per stage 1..4.
    pub expansion: [usize; 4],
    pub etm: bool,
    pub pb_dsr: f64,
    pub pb_sd: f64,
    pub pb_t: f64,
    pub r1: f64,
    pub r2: f64,
}

impl Default for SmallDepthConfig {
    fn default() -> Self {
        SmallDepthConfig {
            widths: [80, 80, 80, 240, 480],
            blocks: [1, 1, 2, 2],
            expansion: [1, 1, 1, 2],
            etm: false,
            pb_dsr: 0.9,
            pb_sd: 0.5,
            pb_t: 0.1,
            r1: 0.1,
            r2: 0.5,
        }
    }
}

impl SmallDepthConfig {
    pub fn validate(&self) -> Result<()> {
        for k in 1..5 {
            if self.widths[k] < self.widths[k - 1] {
                return Err(Error::Config("widths must be non-decreasing".into()));
            }
            if !self.widths[k].is_multiple_of(self.widths[k - 1]) {
                return Err(Error::Config(format!(
                    "width {} must be a multiple of {} (grouped downsample)",
                    self.widths[k],
                    self.widths[k - 1]
                )));
            }
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("widths must be positive".into()));
        }
        if self.blocks.contains(&0) || self.expansion.contains(&0) {
            return Err(Error::Config("blocks and expansion must be positive".into()));
        }
        for rate in [self.pb_dsr, self.pb_sd] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("drop rate {rate} out of [0,1)")));
            }
        }
        Ok(())
    }

    pub fn stage(&self, k: usize) -> StageConfig {
        StageConfig {
            width: self.widths[k],
            blocks: self.blocks[k - 1],
            expansion: self.expansion[k - 1],
        }
    }
}

/// One filter site: either a single weight tensor or a train-time branch bank.
#[derive(Clone, Debug)]
pub enum Filter<T> {
    Single(Tensor4<T>),
    Bank(EtmBank<T>),
}

/// A named convolution site.
#[derive(Clone, Debug)]
pub struct ConvUnit<T> {
    pub name: String,
    pub spec: ConvSpec,
    pub filter: Filter<T>,
    pub fused: bool,
}

impl<T: Scalar> ConvUnit<T> {
    fn single(name: String, spec: ConvSpec, rng: &mut Rng) -> Self {
        let w = fan_in_init(&spec, rng);
        ConvUnit {
            name,
            spec,
            filter: Filter::Single(w),
            fused: false,
        }
    }

    /// Wrap a freshly initialized single filter into a branch bank whose
    /// standard branch carries the weight.
    fn into_bank(mut self, cfg: &SmallDepthConfig) -> Result<Self> {
        let Filter::Single(w) = &self.filter else {
            return Ok(self);
        };
        let mut bank = etm::enumerate_branches::<T>(self.spec.k_h, self.spec.k_w, &self.spec)?;
        bank.pb_t = cfg.pb_t;
        bank.r1 = cfg.r1;
        bank.r2 = cfg.r2;
        let last = bank.branches.len() - 1;
        bank.branches[last].weights = w.clone();
        self.filter = Filter::Bank(bank);
        Ok(self)
    }

    /// Deterministic forward: single filters convolve directly, banks run
    /// their drop-free composite with frozen statistics.
    pub fn forward_infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        match &self.filter {
            Filter::Single(w) => conv2d(x, &self.spec, w, None),
            Filter::Bank(bank) => etm::forward_drop_free(x, bank),
        }
    }

    /// Training forward: banks sample their internal drops (and refresh
    /// statistics when asked); single filters are unaffected.
    pub fn forward_train(&mut self, x: &Tensor4<T>, rng: &mut Rng, update_stats: bool) -> Result<Tensor4<T>> {
        match &mut self.filter {
            Filter::Single(w) => conv2d(x, &self.spec, w, None),
            Filter::Bank(bank) => etm::forward_train(x, bank, rng, update_stats),
        }
    }

    /// Inference parameter count (single-filter form).
    pub fn param_count(&self) -> u64 {
        let [a, b, c, d] = self.spec.weight_dims();
        (a * b * c * d) as u64
    }

    /// Name under which the weight container stores this unit.
    pub fn storage_name(&self) -> String {
        if self.fused {
            format!("{}.fused", self.name)
        } else {
            self.name.clone()
        }
    }
}

fn fan_in_init<T: Scalar>(spec: &ConvSpec, rng: &mut Rng) -> Tensor4<T> {
    let fan_in = (spec.c_in / spec.groups * spec.k_h * spec.k_w) as f64;
    let limit = 1.0 / fan_in.sqrt();
    Tensor4::from_fn(spec.weight_dims(), |_, _, _, _| lit::<T>(rng.uniform(-limit, limit)))
}

#[derive(Clone, Debug)]
pub struct DsrBlock<T> {
    pub expand: ConvUnit<T>,
    pub sc: ConvUnit<T>,
    pub spc: ConvUnit<T>,
    pub contract: ConvUnit<T>,
}

impl<T: Scalar> DsrBlock<T> {
    pub fn forward_infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mid = self.expand.forward_infer(x)?;
        let sc = self.sc.forward_infer(&mid)?;
        let spc = self.spc.forward_infer(&mid)?;
        let sum = add(&add(&sc, &spc)?, &mid)?;
        add(&self.contract.forward_infer(&sum)?, x)
    }

    pub fn forward_train(
        &mut self,
        x: &Tensor4<T>,
        pb_dsr: f64,
        rng: &mut Rng,
        update_stats: bool,
    ) -> Result<Tensor4<T>> {
        let mid = self.expand.forward_train(x, rng, update_stats)?;
        let sc = self.sc.forward_train(&mid, rng, update_stats)?;
        let spc = self.spc.forward_train(&mid, rng, update_stats)?;
        let sc = drop_batch(&sc, pb_dsr, rng, Mode::Train)?;
        let spc = drop_batch(&spc, pb_dsr, rng, Mode::Train)?;
        let sum = add(&add(&sc, &spc)?, &mid)?;
        add(&self.contract.forward_train(&sum, rng, update_stats)?, x)
    }
}

#[derive(Clone, Debug)]
pub struct Stage<T> {
    pub context: ConvUnit<T>,
    pub channel: ConvUnit<T>,
    pub blocks: Vec<DsrBlock<T>>,
}

impl<T: Scalar> Stage<T> {
    /// Downsample only: grouped context path plus the channel-mixing path.
    pub fn downsample_infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let ctx = self.context.forward_infer(x)?;
        let chn = self.channel.forward_infer(x)?;
        add(&ctx, &chn)
    }

    pub fn downsample_train(
        &mut self,
        x: &Tensor4<T>,
        pb_sd: f64,
        rng: &mut Rng,
        update_stats: bool,
    ) -> Result<Tensor4<T>> {
        let ctx = self.context.forward_train(x, rng, update_stats)?;
        let chn = self.channel.forward_train(x, rng, update_stats)?;
        let chn = drop_batch(&chn, pb_sd, rng, Mode::Train)?;
        add(&ctx, &chn)
    }
}

#[derive(Clone, Debug)]
pub struct UpsampleUnit<T> {
    pub ct: ConvUnit<T>,
    pub sc1: ConvUnit<T>,
    pub chs: ConvUnit<T>,
    pub sc2: ConvUnit<T>,
}

impl<T: Scalar> UpsampleUnit<T> {
    /// Channel transform, depthwise refine, bilinear x2, channel mix,
    /// depthwise refine. Spatial dims double, channels go to the target width.
    pub fn forward_infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let y = self.ct.forward_infer(x)?;
        let y = self.sc1.forward_infer(&y)?;
        let [_, _, h, w] = y.dims();
        let y = bilinear_resize(&y, 2 * h, 2 * w)?;
        let y = self.chs.forward_infer(&y)?;
        self.sc2.forward_infer(&y)
    }

    pub fn forward_train(
        &mut self,
        x: &Tensor4<T>,
        rng: &mut Rng,
        update_stats: bool,
    ) -> Result<Tensor4<T>> {
        let y = self.ct.forward_train(x, rng, update_stats)?;
        let y = self.sc1.forward_train(&y, rng, update_stats)?;
        let [_, _, h, w] = y.dims();
        let y = bilinear_resize(&y, 2 * h, 2 * w)?;
        let y = self.chs.forward_train(&y, rng, update_stats)?;
        self.sc2.forward_train(&y, rng, update_stats)
    }
}

/// Standalone sparse-downsample operation with an explicit mode switch.
pub fn sparse_downsample<T: Scalar>(
    x: &Tensor4<T>,
    stage: &mut Stage<T>,
    pb_sd: f64,
    rng: &mut Rng,
    mode: Mode,
) -> Result<Tensor4<T>> {
    match mode {
        Mode::Infer => stage.downsample_infer(x),
        Mode::Train => stage.downsample_train(x, pb_sd, rng, false),
    }
}

/// Standalone double-scale sparse residual forward with an explicit mode.
pub fn dsr_forward<T: Scalar>(
    x: &Tensor4<T>,
    block: &mut DsrBlock<T>,
    pb_dsr: f64,
    rng: &mut Rng,
    mode: Mode,
) -> Result<Tensor4<T>> {
    if block.expand.spec.c_in != block.contract.spec.c_out {
        return Err(Error::shape("residual block requires c_in = c_out"));
    }
    match mode {
        Mode::Infer => block.forward_infer(x),
        Mode::Train => block.forward_train(x, pb_dsr, rng, false),
    }
}

/// Standalone sparse-upsample operation (no stochastic path).
pub fn sparse_upsample<T: Scalar>(x: &Tensor4<T>, unit: &UpsampleUnit<T>) -> Result<Tensor4<T>> {
    unit.forward_infer(x)
}

#[derive(Clone, Debug)]
pub struct HeadPair<T> {
    pub d1: ConvUnit<T>,
    pub d2: ConvUnit<T>,
}

/// Encoder, decoder, and disparity maps of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardMaps<T> {
    pub enc: Vec<Tensor4<T>>,
    pub dec: Vec<Tensor4<T>>,
    pub disp: Vec<Tensor4<T>>,
}

/// The assembled model.
#[derive(Clone, Debug)]
pub struct SmallDepthModel<T> {
    pub config: SmallDepthConfig,
    pub stem: ConvUnit<T>,
    pub stages: Vec<Stage<T>>,
    /// Upsample units keyed by target level k = 0..3 (consuming level k+1).
    pub ups: Vec<UpsampleUnit<T>>,
    pub heads: Vec<HeadPair<T>>,
}

/// Construct the full graph with seeded initialization. With `config.etm`,
/// every stride-1 filter site becomes a branch bank; strided sites keep their
/// single form.
pub fn build_smalldepth<T: Scalar>(config: &SmallDepthConfig, rng: &mut Rng) -> Result<SmallDepthModel<T>> {
    config.validate()?;
    let c = config.widths;
    let stem_spec = ConvSpec::new(3, c[0], 3, 3).with_stride(2).with_same_padding();
    let stem = ConvUnit::single("stem".into(), stem_spec, rng);

    let wrap = |unit: ConvUnit<T>| -> Result<ConvUnit<T>> {
        if config.etm && unit.spec.stride == (1, 1) {
            unit.into_bank(config)
        } else {
            Ok(unit)
        }
    };

    let mut stages = Vec::new();
    for k in 1..5 {
        let (ci, co) = (c[k - 1], c[k]);
        let context = ConvUnit::single(
            format!("enc{k}.sd.context"),
            ConvSpec::new(ci, co, 3, 3).with_groups(ci).with_stride(2).with_same_padding(),
            rng,
        );
        let channel = ConvUnit::single(
            format!("enc{k}.sd.channel"),
            ConvSpec::new(ci, co, 1, 1).with_stride(2),
            rng,
        );
        let stage_cfg = config.stage(k);
        let rc = stage_cfg.expansion * co;
        let mut blocks = Vec::new();
        for j in 0..stage_cfg.blocks {
            blocks.push(DsrBlock {
                expand: wrap(ConvUnit::single(
                    format!("enc{k}.dsr{j}.expand"),
                    ConvSpec::new(co, rc, 1, 1),
                    rng,
                ))?,
                sc: wrap(ConvUnit::single(
                    format!("enc{k}.dsr{j}.sc"),
                    ConvSpec::new(rc, rc, 3, 3).with_groups(rc).with_same_padding(),
                    rng,
                ))?,
                spc: wrap(ConvUnit::single(
                    format!("enc{k}.dsr{j}.spc"),
                    ConvSpec::new(rc, rc, 3, 3).with_groups(rc).with_dilation(2).with_same_padding(),
                    rng,
                ))?,
                contract: wrap(ConvUnit::single(
                    format!("enc{k}.dsr{j}.contract"),
                    ConvSpec::new(rc, co, 1, 1),
                    rng,
                ))?,
            });
        }
        stages.push(Stage {
            context,
            channel,
            blocks,
        });
    }

    let mut ups = Vec::new();
    for k in 0..4 {
        let (ci, co) = (c[k + 1], c[k]);
        ups.push(UpsampleUnit {
            ct: wrap(ConvUnit::single(
                format!("dec{k}.up.ct"),
                ConvSpec::new(ci, co, 1, 1),
                rng,
            ))?,
            sc1: wrap(ConvUnit::single(
                format!("dec{k}.up.sc1"),
                ConvSpec::new(co, co, 3, 3).with_groups(co).with_same_padding(),
                rng,
            ))?,
            chs: wrap(ConvUnit::single(
                format!("dec{k}.up.chs"),
                ConvSpec::new(co, co, 1, 1),
                rng,
            ))?,
            sc2: wrap(ConvUnit::single(
                format!("dec{k}.up.sc2"),
                ConvSpec::new(co, co, 3, 3).with_groups(co).with_same_padding(),
                rng,
            ))?,
        });
    }

    let mut heads = Vec::new();
    for (k, &ck) in c.iter().enumerate().take(4) {
        heads.push(HeadPair {
            d1: wrap(ConvUnit::single(
                format!("head{k}.d1"),
                ConvSpec::new(ck, 1, 3, 3).with_same_padding(),
                rng,
            ))?,
            d2: wrap(ConvUnit::single(
                format!("head{k}.d2"),
                ConvSpec::new(ck, 1, 3, 3).with_dilation(2).with_same_padding(),
                rng,
            ))?,
        });
    }

    Ok(SmallDepthModel {
        config: config.clone(),
        stem,
        stages,
        ups,
        heads,
    })
}

/// Elementwise depth conversion: D = 1 / (10*disp + 0.01).
pub fn disp_to_depth<T: Scalar>(disp: &Tensor4<T>) -> Tensor4<T> {
    let ten = lit::<T>(10.0);
    let eps = lit::<T>(0.01);
    disp.map(|d| T::one() / (ten * d + eps))
}

/// Subgraph membership for complexity accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subgraph {
    Encoder,
    Decoder,
    Heads,
}

impl<T: Scalar> SmallDepthModel<T> {
    /// Every unit in canonical order, tagged with its subgraph.
    pub fn units(&self) -> Vec<(Subgraph, &ConvUnit<T>)> {
        let mut out: Vec<(Subgraph, &ConvUnit<T>)> = vec![(Subgraph::Encoder, &self.stem)];
        for s in &self.stages {
            out.push((Subgraph::Encoder, &s.context));
            out.push((Subgraph::Encoder, &s.channel));
            for b in &s.blocks {
                for u in [&b.expand, &b.sc, &b.spc, &b.contract] {
                    out.push((Subgraph::Encoder, u));
                }
            }
        }
        for u in &self.ups {
            for v in [&u.ct, &u.sc1, &u.chs, &u.sc2] {
                out.push((Subgraph::Decoder, v));
            }
        }
        for h in &self.heads {
            out.push((Subgraph::Heads, &h.d1));
            out.push((Subgraph::Heads, &h.d2));
        }
        out
    }

    pub fn units_mut(&mut self) -> Vec<&mut ConvUnit<T>> {
        let mut out: Vec<&mut ConvUnit<T>> = vec![&mut self.stem];
        for s in &mut self.stages {
            out.push(&mut s.context);
            out.push(&mut s.channel);
            for b in &mut s.blocks {
                out.push(&mut b.expand);
                out.push(&mut b.sc);
                out.push(&mut b.spc);
                out.push(&mut b.contract);
            }
        }
        for u in &mut self.ups {
            out.push(&mut u.ct);
            out.push(&mut u.sc1);
            out.push(&mut u.chs);
            out.push(&mut u.sc2);
        }
        for h in &mut self.heads {
            out.push(&mut h.d1);
            out.push(&mut h.d2);
        }
        out
    }

    /// Inference parameter count over all sites (single-filter form).
    pub fn param_count(&self) -> u64 {
        self.units().iter().map(|(_, u)| u.param_count()).sum()
    }

    fn check_input(img: &Tensor4<T>) -> Result<()> {
        let [_, c, h, w] = img.dims();
        if c != 3 {
            return Err(Error::shape(format!("expected 3 input channels, got {c}")));
        }
        if h < 32 || w < 32 {
            return Err(Error::shape(format!("spatial dims {h}x{w} below 32")));
        }
        Ok(())
    }

    /// Deterministic encoder: all drop paths inactive.
    pub fn encoder_infer(&self, img: &Tensor4<T>) -> Result<Vec<Tensor4<T>>> {
        Self::check_input(img)?;
        let mut enc = vec![self.stem.forward_infer(img)?];
        for stage in &self.stages {
            let mut x = stage.downsample_infer(enc.last().unwrap())?;
            for b in &stage.blocks {
                x = b.forward_infer(&x)?;
            }
            enc.push(x);
        }
        Ok(enc)
    }

    /// Training encoder: batch drops on the channel-mixing downsample path
    /// and on both residual branches; bank drops inside wrapped sites.
    pub fn encoder_train(
        &mut self,
        img: &Tensor4<T>,
        rng: &mut Rng,
        update_stats: bool,
    ) -> Result<Vec<Tensor4<T>>> {
        Self::check_input(img)?;
        let pb_sd = self.config.pb_sd;
        let pb_dsr = self.config.pb_dsr;
        let mut enc = vec![self.stem.forward_train(img, rng, update_stats)?];
        for stage in &mut self.stages {
            let prev = enc.last().unwrap().clone();
            let mut x = stage.downsample_train(&prev, pb_sd, rng, update_stats)?;
            for b in &mut stage.blocks {
                x = b.forward_train(&x, pb_dsr, rng, update_stats)?;
            }
            enc.push(x);
        }
        Ok(enc)
    }

    fn skip_add(skip: &Tensor4<T>, up: &Tensor4<T>) -> Result<Tensor4<T>> {
        if skip.dims() != up.dims() {
            return Err(Error::shape(format!(
                "skip {:?} vs upsample {:?}: resolutions must agree exactly",
                skip.dims(),
                up.dims()
            )));
        }
        add(skip, up)
    }

    /// Deterministic decoder over precomputed encoder maps.
    pub fn decoder_infer(&self, enc: &[Tensor4<T>]) -> Result<Vec<Tensor4<T>>> {
        let mut dec_rev = vec![Self::skip_add(&enc[3], &self.ups[3].forward_infer(&enc[4])?)?];
        for k in (0..3).rev() {
            let up = self.ups[k].forward_infer(dec_rev.last().unwrap())?;
            dec_rev.push(Self::skip_add(&enc[k], &up)?);
        }
        dec_rev.reverse();
        Ok(dec_rev)
    }

    pub fn decoder_train(
        &mut self,
        enc: &[Tensor4<T>],
        rng: &mut Rng,
        update_stats: bool,
    ) -> Result<Vec<Tensor4<T>>> {
        let first = self.ups[3].forward_train(&enc[4].clone(), rng, update_stats)?;
        let mut dec_rev = vec![Self::skip_add(&enc[3], &first)?];
        for k in (0..3).rev() {
            let prev = dec_rev.last().unwrap().clone();
            let up = self.ups[k].forward_train(&prev, rng, update_stats)?;
            dec_rev.push(Self::skip_add(&enc[k], &up)?);
        }
        dec_rev.reverse();
        Ok(dec_rev)
    }

    /// Disparity at each scale: mean of the two sigmoid head branches.
    pub fn disparity_heads(&self, dec: &[Tensor4<T>]) -> Result<Vec<Tensor4<T>>> {
        let half = lit::<T>(0.5);
        let mut disp = Vec::new();
        for (k, h) in self.heads.iter().enumerate() {
            let a = sigmoid(&h.d1.forward_infer(&dec[k])?);
            let b = sigmoid(&h.d2.forward_infer(&dec[k])?);
            disp.push(add(&a, &b)?.scale(half));
        }
        Ok(disp)
    }

    fn disparity_heads_train(
        &mut self,
        dec: &[Tensor4<T>],
        rng: &mut Rng,
        update_stats: bool,
    ) -> Result<Vec<Tensor4<T>>> {
        let half = lit::<T>(0.5);
        let mut disp = Vec::new();
        for (h, d) in self.heads.iter_mut().zip(dec.iter()) {
            let a = sigmoid(&h.d1.forward_train(d, rng, update_stats)?);
            let b = sigmoid(&h.d2.forward_train(d, rng, update_stats)?);
            disp.push(add(&a, &b)?.scale(half));
        }
        Ok(disp)
    }

    /// Full deterministic forward.
    pub fn infer(&self, img: &Tensor4<T>) -> Result<ForwardMaps<T>> {
        let enc = self.encoder_infer(img)?;
        let dec = self.decoder_infer(&enc)?;
        let disp = self.disparity_heads(&dec)?;
        Ok(ForwardMaps { enc, dec, disp })
    }

    /// Full training forward with all drops active.
    pub fn train_forward(
        &mut self,
        img: &Tensor4<T>,
        rng: &mut Rng,
        update_stats: bool,
    ) -> Result<ForwardMaps<T>> {
        let enc = self.encoder_train(img, rng, update_stats)?;
        let dec = self.decoder_train(&enc, rng, update_stats)?;
        let disp = self.disparity_heads_train(&dec, rng, update_stats)?;
        Ok(ForwardMaps { enc, dec, disp })
    }

    /// Replace every bank by its fused single filter. Parameter layout then
    /// matches the etm=off build exactly.
    pub fn fuse_all(&self) -> Result<SmallDepthModel<T>> {
        let mut fused = self.clone();
        for unit in fused.units_mut() {
            if let Filter::Bank(bank) = &unit.filter {
                let f = etm::fuse(bank)?;
                unit.filter = Filter::Single(f.weights);
                unit.fused = true;
            }
        }
        fused.config.etm = false;
        Ok(fused)
    }

    /// Record the deterministic forward on a tape; every single-filter site
    /// becomes a leaf named after the unit. Bank sites are rejected (fuse
    /// first). Returns (enc, dec, disp) node ids.
    pub fn forward_on_tape(
        &self,
        tape: &mut GradTape<T>,
        img: &Tensor4<T>,
    ) -> Result<(Vec<NodeId>, Vec<NodeId>, Vec<NodeId>)> {
        Self::check_input(img)?;
        let get = |tape: &mut GradTape<T>, u: &ConvUnit<T>| -> Result<NodeId> {
            match &u.filter {
                Filter::Single(w) => tape.leaf(u.name.clone(), w.clone()),
                Filter::Bank(_) => Err(Error::Tape(format!(
                    "unit {} is a branch bank; tape forward needs single filters",
                    u.name
                ))),
            }
        };
        let x0 = tape.constant(img.clone());
        let stem_w = get(tape, &self.stem)?;
        let mut enc = vec![tape.conv2d(x0, self.stem.spec, stem_w)?];
        for stage in &self.stages {
            let prev = *enc.last().unwrap();
            let wc = get(tape, &stage.context)?;
            let ctx = tape.conv2d(prev, stage.context.spec, wc)?;
            let wn = get(tape, &stage.channel)?;
            let chn = tape.conv2d(prev, stage.channel.spec, wn)?;
            let mut x = tape.add(ctx, chn)?;
            for b in &stage.blocks {
                let we = get(tape, &b.expand)?;
                let mid = tape.conv2d(x, b.expand.spec, we)?;
                let ws = get(tape, &b.sc)?;
                let sc = tape.conv2d(mid, b.sc.spec, ws)?;
                let wp = get(tape, &b.spc)?;
                let spc = tape.conv2d(mid, b.spc.spec, wp)?;
                let s = tape.add(sc, spc)?;
                let s = tape.add(s, mid)?;
                let wk = get(tape, &b.contract)?;
                let con = tape.conv2d(s, b.contract.spec, wk)?;
                x = tape.add(con, x)?;
            }
            enc.push(x);
        }

        let up_on_tape = |tape: &mut GradTape<T>, k: usize, x: NodeId| -> Result<NodeId> {
            let u = &self.ups[k];
            let w = get(tape, &u.ct)?;
            let y = tape.conv2d(x, u.ct.spec, w)?;
            let w = get(tape, &u.sc1)?;
            let y = tape.conv2d(y, u.sc1.spec, w)?;
            let [_, _, h, ww] = tape.value(y).dims();
            let y = tape.bilinear(y, 2 * h, 2 * ww)?;
            let w = get(tape, &u.chs)?;
            let y = tape.conv2d(y, u.chs.spec, w)?;
            let w = get(tape, &u.sc2)?;
            tape.conv2d(y, u.sc2.spec, w)
        };

        let mut dec_rev = Vec::new();
        let up3 = up_on_tape(tape, 3, enc[4])?;
        dec_rev.push(tape.add(enc[3], up3)?);
        for k in (0..3).rev() {
            let up = up_on_tape(tape, k, *dec_rev.last().unwrap())?;
            dec_rev.push(tape.add(enc[k], up)?);
        }
        dec_rev.reverse();
        let dec = dec_rev;

        let mut disp = Vec::new();
        for (k, h) in self.heads.iter().enumerate() {
            let w = get(tape, &h.d1)?;
            let a = tape.conv2d(dec[k], h.d1.spec, w)?;
            let a = tape.sigmoid(a);
            let w = get(tape, &h.d2)?;
            let b = tape.conv2d(dec[k], h.d2.spec, w)?;
            let b = tape.sigmoid(b);
            let s = tape.add(a, b)?;
            disp.push(tape.scale(s, lit::<T>(0.5)));
        }
        Ok((enc, dec, disp))
    }

    /// Serialize every site into the weight container. Single filters store
    /// under the unit name (plus `.fused` once fused); banks store aligned
    /// branch weights and their scalar statistics.
    pub fn to_store(&self) -> Result<crate::io::WeightStore> {
        let mut store = crate::io::WeightStore::new();
        for (_, unit) in self.units() {
            match &unit.filter {
                Filter::Single(w) => store.insert_tensor(unit.storage_name(), w)?,
                Filter::Bank(bank) => {
                    for b in &bank.branches {
                        let t = b.shape_id;
                        if b.learnable {
                            store.insert_tensor(format!("{}.etm{t}.w", unit.name), &b.weights)?;
                        }
                        store.insert(
                            format!("{}.etm{t}.p", unit.name),
                            vec![1],
                            vec![b.scale.to_f32().unwrap()],
                        )?;
                        store.insert(
                            format!("{}.etm{t}.var", unit.name),
                            vec![1],
                            vec![b.var.to_f32().unwrap()],
                        )?;
                    }
                }
            }
        }
        Ok(store)
    }

    /// Rebuild a model of this config from stored weights. Single sites also
    /// accept their `.fused` entry; bank sites require bank entries.
    pub fn from_store(config: &SmallDepthConfig, store: &crate::io::WeightStore) -> Result<Self> {
        let mut rng = Rng::new(0);
        let mut model = build_smalldepth::<T>(config, &mut rng)?;
        for unit in model.units_mut() {
            match &mut unit.filter {
                Filter::Single(w) => {
                    let loaded = if store.get(&unit.name).is_some() {
                        store.tensor::<T>(&unit.name)?
                    } else if store.get(&format!("{}.fused", unit.name)).is_some() {
                        unit.fused = true;
                        store.tensor::<T>(&format!("{}.fused", unit.name))?
                    } else {
                        return Err(Error::Store(format!("missing weights for {}", unit.name)));
                    };
                    if loaded.dims() != w.dims() {
                        return Err(Error::Store(format!(
                            "{}: stored dims {:?} != {:?}",
                            unit.name,
                            loaded.dims(),
                            w.dims()
                        )));
                    }
                    *w = loaded;
                }
                Filter::Bank(bank) => {
                    for b in bank.branches.iter_mut() {
                        let t = b.shape_id;
                        if b.learnable {
                            let key = format!("{}.etm{t}.w", unit.name);
                            if store.get(&key).is_none() && store.get(&format!("{}.fused", unit.name)).is_some() {
                                return Err(Error::Store(format!(
                                    "{} holds fused weights; load with etm = off",
                                    unit.name
                                )));
                            }
                            let loaded = store.tensor::<T>(&key)?;
                            if loaded.dims() != b.weights.dims() {
                                return Err(Error::Store(format!("{key}: dims mismatch")));
                            }
                            b.weights = loaded;
                        }
                        b.scale = T::from_f32(store.scalar(&format!("{}.etm{t}.p", unit.name))?).unwrap();
                        b.var = T::from_f32(store.scalar(&format!("{}.etm{t}.var", unit.name))?).unwrap();
                    }
                }
            }
        }
        Ok(model)
    }

    /// Hand updated weights back from a gradient step (tape leaf names).
    pub fn apply_weights(&mut self, weights: &std::collections::HashMap<String, Tensor4<T>>) -> Result<()> {
        for unit in self.units_mut() {
            if let Some(w) = weights.get(&unit.name) {
                match &mut unit.filter {
                    Filter::Single(old) => {
                        if old.dims() != w.dims() {
                            return Err(Error::shape(format!("weight dims for {}", unit.name)));
                        }
                        *old = w.clone();
                    }
                    Filter::Bank(_) => {
                        return Err(Error::invalid(format!(
                            "cannot overwrite bank unit {} from flat weights",
                            unit.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_img(rng: &mut Rng, h: usize, w: usize) -> Tensor4<f32> {
        Tensor4::from_fn([1, 3, h, w], |_, _, _, _| rng.uniform(0.0, 1.0) as f32)
    }

    fn small_config() -> SmallDepthConfig {
        SmallDepthConfig {
            widths: [8, 8, 8, 16, 32],
            blocks: [1, 1, 2, 2],
            expansion: [1, 1, 1, 2],
            ..Default::default()
        }
    }

    #[test]
    fn encoder_pyramid_dims_128x416() {
        let mut rng = Rng::new(1);
        let model = build_smalldepth::<f32>(&small_config(), &mut rng).unwrap();
        let img = rand_img(&mut rng, 128, 416);
        let enc = model.encoder_infer(&img).unwrap();
        let dims: Vec<(usize, usize)> = enc.iter().map(|e| (e.dims()[2], e.dims()[3])).collect();
        assert_eq!(dims, vec![(64, 208), (32, 104), (16, 52), (8, 26), (4, 13)]);
    }

    #[test]
    fn zero_weights_give_zero_features_and_half_disparity() {
        let mut rng = Rng::new(2);
        let mut model = build_smalldepth::<f32>(&small_config(), &mut rng).unwrap();
        for unit in model.units_mut() {
            if let Filter::Single(w) = &mut unit.filter {
                *w = Tensor4::zeros(w.dims());
            }
        }
        let img = Tensor4::zeros([1, 3, 32, 64]);
        let maps = model.infer(&img).unwrap();
        for e in &maps.enc {
            assert!(e.data().iter().all(|&v| v == 0.0));
        }
        for d in &maps.disp {
            assert!(d.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
        }
    }

    #[test]
    fn inference_is_deterministic_across_seeds() {
        let mut rng = Rng::new(3);
        let model = build_smalldepth::<f32>(&small_config(), &mut rng).unwrap();
        let img = rand_img(&mut rng, 32, 64);
        let a = model.infer(&img).unwrap();
        let b = model.infer(&img).unwrap();
        for (x, y) in a.disp.iter().zip(b.disp.iter()) {
            assert_eq!(x, y); // bitwise
        }
    }

    #[test]
    fn dsr_zero_contract_is_identity() {
        let mut rng = Rng::new(4);
        let mut model = build_smalldepth::<f32>(&small_config(), &mut rng).unwrap();
        for unit in model.units_mut() {
            if unit.name.contains(".contract") {
                if let Filter::Single(w) = &mut unit.filter {
                    *w = Tensor4::zeros(w.dims());
                }
            }
        }
        let img = rand_img(&mut rng, 32, 64);
        // with contract weights zero, each DSR block adds nothing: encoder
        // equals downsample-only forward
        let enc = model.encoder_infer(&img).unwrap();
        let mut x = model.stem.forward_infer(&img).unwrap();
        for stage in &model.stages {
            let ctx = stage.context.forward_infer(&x).unwrap();
            let chn = stage.channel.forward_infer(&x).unwrap();
            x = add(&ctx, &chn).unwrap();
        }
        assert!(enc[4].max_abs_diff(&x).unwrap() < 1e-6);
    }

    #[test]
    fn disparity_in_unit_interval_and_pyramid() {
        let mut rng = Rng::new(5);
        let model = build_smalldepth::<f64>(&small_config(), &mut rng).unwrap();
        let img = Tensor4::from_fn([1, 3, 64, 96], |_, _, _, _| rng.uniform(0.0, 1.0));
        let maps = model.infer(&img).unwrap();
        for d in &maps.disp {
            assert!(d.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        for k in 0..3 {
            assert_eq!(maps.disp[k].dims()[2], 2 * maps.disp[k + 1].dims()[2]);
            assert_eq!(maps.disp[k].dims()[3], 2 * maps.disp[k + 1].dims()[3]);
        }
    }

    #[test]
    fn disp_to_depth_range() {
        let d = Tensor4::new([1, 1, 1, 3], vec![0.0f64, 1.0, 0.5]).unwrap();
        let depth = disp_to_depth(&d);
        assert!((depth.at(0, 0, 0, 0) - 100.0).abs() < 1e-12);
        assert!((depth.at(0, 0, 0, 1) - 1.0 / 10.01).abs() < 1e-12);
        assert!((depth.at(0, 0, 0, 2) - 1.0 / 5.01).abs() < 1e-12);
    }

    #[test]
    fn train_without_drops_equals_infer() {
        let mut rng = Rng::new(6);
        let mut cfg = small_config();
        cfg.pb_dsr = 0.0;
        cfg.pb_sd = 0.0;
        let mut model = build_smalldepth::<f32>(&cfg, &mut rng).unwrap();
        let img = rand_img(&mut rng, 32, 64);
        let a = model.infer(&img).unwrap();
        let mut r2 = Rng::new(999);
        let b = model.train_forward(&img, &mut r2, false).unwrap();
        for (x, y) in a.disp.iter().zip(b.disp.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn etm_model_fuses_to_matching_param_count() {
        let mut rng = Rng::new(7);
        let mut cfg = small_config();
        cfg.etm = true;
        let model = build_smalldepth::<f32>(&cfg, &mut rng).unwrap();
        let fused = model.fuse_all().unwrap();
        let mut cfg_off = cfg.clone();
        cfg_off.etm = false;
        let mut rng2 = Rng::new(7);
        let plain = build_smalldepth::<f32>(&cfg_off, &mut rng2).unwrap();
        assert_eq!(fused.param_count(), plain.param_count());
        // fused units carry the .fused storage suffix
        assert!(fused.units().iter().any(|(_, u)| u.fused));
        let f = fused.units().iter().find(|(_, u)| u.fused).unwrap().1.storage_name();
        assert!(f.ends_with(".fused"));
    }

    #[test]
    fn fused_forward_matches_etm_drop_free() {
        let mut rng = Rng::new(8);
        let mut cfg = small_config();
        cfg.etm = true;
        let mut model = build_smalldepth::<f32>(&cfg, &mut rng).unwrap();
        // make banks non-trivial
        for unit in model.units_mut() {
            if let Filter::Bank(bank) = &mut unit.filter {
                let mut r = Rng::new(42);
                etm::randomize_bank(bank, &mut r);
            }
        }
        let fused = model.fuse_all().unwrap();
        let img = rand_img(&mut rng, 32, 64);
        let a = model.infer(&img).unwrap();
        let b = fused.infer(&img).unwrap();
        for (x, y) in a.disp.iter().zip(b.disp.iter()) {
            assert!(x.max_abs_diff(y).unwrap() < 1e-4);
        }
    }

    #[test]
    fn tape_forward_matches_infer() {
        let mut rng = Rng::new(9);
        let model = build_smalldepth::<f32>(&small_config(), &mut rng).unwrap();
        let img = rand_img(&mut rng, 32, 64);
        let maps = model.infer(&img).unwrap();
        let mut tape = GradTape::<f32>::new();
        let (_, _, disp) = model.forward_on_tape(&mut tape, &img).unwrap();
        for (k, d) in disp.iter().enumerate() {
            assert_eq!(tape.value(*d), &maps.disp[k]);
        }
    }

    #[test]
    fn sparse_downsample_constructed_weights_subsample() {
        // context path = per-group delta at the kernel center, channel path
        // zero: the output is the strided subsample of the input
        let mut rng = Rng::new(20);
        let mut model = build_smalldepth::<f64>(&small_config(), &mut rng).unwrap();
        let stage = &mut model.stages[0]; // 8 -> 8 channels
        stage.context.filter = Filter::Single(crate::tensor::delta_kernel(8, 8, 3, 3).unwrap());
        stage.channel.filter = Filter::Single(Tensor4::zeros(stage.channel.spec.weight_dims()));
        let x = Tensor4::from_fn([1, 8, 10, 12], |_, c, h, w| (c * 1000 + h * 12 + w) as f64);
        let y = sparse_downsample(&x, stage, 0.0, &mut rng, Mode::Train).unwrap();
        assert_eq!(y.dims(), [1, 8, 5, 6]);
        for c in 0..8 {
            for h in 0..5 {
                for w in 0..6 {
                    assert_eq!(y.at(0, c, h, w), x.at(0, c, 2 * h, 2 * w));
                }
            }
        }
        // infer mode ignores the drop rate entirely
        let a = sparse_downsample(&x, stage, 0.99, &mut rng, Mode::Infer).unwrap();
        let b = sparse_downsample(&x, stage, 0.0, &mut rng, Mode::Infer).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dsr_zero_weights_is_pure_residual_and_full_drop_keeps_mid() {
        let mut rng = Rng::new(21);
        let mut model = build_smalldepth::<f64>(&small_config(), &mut rng).unwrap();
        let block = &mut model.stages[0].blocks[0];
        for u in [&mut block.expand, &mut block.sc, &mut block.spc, &mut block.contract] {
            u.filter = Filter::Single(Tensor4::zeros(u.spec.weight_dims()));
        }
        let x = Tensor4::from_fn([1, 8, 6, 6], |_, _, _, _| rng.uniform(-1.0, 1.0));
        let y = dsr_forward(&x, block, 0.0, &mut rng, Mode::Train).unwrap();
        assert_eq!(y, x);

        // pb_dsr -> 1: both depthwise branches are zeroed, leaving
        // contract(mid) + x (checked against a direct evaluation)
        let mut rng2 = Rng::new(7);
        let mut model2 = build_smalldepth::<f64>(&small_config(), &mut rng2).unwrap();
        let block2 = &mut model2.stages[0].blocks[0];
        let mut r = Rng::new(3);
        let y = dsr_forward(&x, block2, 1.0 - 1e-12, &mut r, Mode::Train).unwrap();
        let mid = block2.expand.forward_infer(&x).unwrap();
        let want = add(&block2.contract.forward_infer(&mid).unwrap(), &x).unwrap();
        assert!(y.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn sparse_upsample_shape_and_delta_composition() {
        let mut rng = Rng::new(22);
        let model = build_smalldepth::<f64>(&small_config(), &mut rng).unwrap();
        let x = Tensor4::from_fn([1, 32, 3, 4], |_, _, _, _| rng.uniform(-1.0, 1.0));
        let y = sparse_upsample(&x, &model.ups[3]).unwrap();
        assert_eq!(y.dims(), [1, 16, 6, 8]);

        // identity depthwise/channel filters reduce the unit to
        // bilinear x2 of the channel-transformed input
        let mut unit = model.ups[3].clone();
        unit.sc1.filter = Filter::Single(crate::tensor::delta_kernel(16, 16, 3, 3).unwrap());
        unit.sc2.filter = Filter::Single(crate::tensor::delta_kernel(16, 16, 3, 3).unwrap());
        unit.chs.filter = Filter::Single(crate::tensor::delta_kernel(16, 1, 1, 1).unwrap());
        let y = sparse_upsample(&x, &unit).unwrap();
        let ct = unit.ct.forward_infer(&x).unwrap();
        let want = bilinear_resize(&ct, 6, 8).unwrap();
        assert_eq!(y, want);
    }

    #[test]
    fn store_round_trip_bitwise_for_single_and_bank() {
        let mut rng = Rng::new(10);
        let mut cfg = small_config();
        cfg.etm = true;
        let mut model = build_smalldepth::<f32>(&cfg, &mut rng).unwrap();
        for unit in model.units_mut() {
            if let Filter::Bank(bank) = &mut unit.filter {
                etm::randomize_bank(bank, &mut rng);
            }
        }
        let store = model.to_store().unwrap();
        let back = SmallDepthModel::<f32>::from_store(&cfg, &store).unwrap();
        let img = rand_img(&mut rng, 32, 64);
        let a = model.infer(&img).unwrap();
        let b = back.infer(&img).unwrap();
        for (x, y) in a.disp.iter().zip(b.disp.iter()) {
            assert_eq!(x, y); // bitwise through the f32 container
        }

        // fused store loads under etm = off and refuses etm = on
        let fused = model.fuse_all().unwrap();
        let fstore = fused.to_store().unwrap();
        let mut cfg_off = cfg.clone();
        cfg_off.etm = false;
        let back = SmallDepthModel::<f32>::from_store(&cfg_off, &fstore).unwrap();
        let c = back.infer(&img).unwrap();
        for (x, y) in fused.infer(&img).unwrap().disp.iter().zip(c.disp.iter()) {
            assert_eq!(x, y);
        }
        assert!(SmallDepthModel::<f32>::from_store(&cfg, &fstore).is_err());
    }

    #[test]
    fn bank_training_updates_stats_and_is_seed_deterministic() {
        let mut rng = Rng::new(40);
        let mut cfg = small_config();
        cfg.etm = true;
        let mut model = build_smalldepth::<f32>(&cfg, &mut rng).unwrap();
        let img = rand_img(&mut rng, 32, 64);

        // identical seeds reproduce the stochastic forward bitwise
        let mut m1 = model.clone();
        let mut m2 = model.clone();
        let a = m1.train_forward(&img, &mut Rng::new(9), false).unwrap();
        let b = m2.train_forward(&img, &mut Rng::new(9), false).unwrap();
        for (x, y) in a.disp.iter().zip(b.disp.iter()) {
            assert_eq!(x, y);
        }

        // update_stats moves at least the stem-adjacent bank variances
        let vars_before: Vec<f32> = model
            .units()
            .iter()
            .filter_map(|(_, u)| match &u.filter {
                Filter::Bank(b) => Some(b.branches.last().unwrap().var),
                _ => None,
            })
            .collect();
        model.train_forward(&img, &mut Rng::new(1), true).unwrap();
        let vars_after: Vec<f32> = model
            .units()
            .iter()
            .filter_map(|(_, u)| match &u.filter {
                Filter::Bank(b) => Some(b.branches.last().unwrap().var),
                _ => None,
            })
            .collect();
        assert!(vars_before.iter().zip(vars_after.iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn encoder_rejects_tiny_and_non_rgb_inputs() {
        let mut rng = Rng::new(30);
        let model = build_smalldepth::<f32>(&small_config(), &mut rng).unwrap();
        assert!(model.encoder_infer(&Tensor4::zeros([1, 3, 16, 64])).is_err());
        assert!(model.encoder_infer(&Tensor4::zeros([1, 3, 64, 24])).is_err());
        assert!(model.encoder_infer(&Tensor4::zeros([1, 1, 64, 64])).is_err());
        assert!(model.encoder_infer(&Tensor4::zeros([1, 3, 32, 32])).is_ok());
    }

    #[test]
    fn decoder_rejects_skip_resolution_mismatch() {
        // 80 is not a multiple of 32: the encoder pads through, but the
        // upsampled map can no longer match the skip exactly
        let mut rng = Rng::new(33);
        let model = build_smalldepth::<f32>(&small_config(), &mut rng).unwrap();
        let img = rand_img(&mut rng, 96, 80);
        let enc = model.encoder_infer(&img).unwrap();
        assert_eq!(enc[3].dims()[3], 5);
        assert_eq!(enc[4].dims()[3], 3);
        let err = model.decoder_infer(&enc);
        assert!(err.is_err());
        assert!(err.unwrap_err().to_string().contains("agree exactly"));
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config();
        cfg.widths = [8, 12, 8, 16, 32]; // 12 not a multiple of 8 and decreasing later
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.pb_dsr = 1.0;
        assert!(cfg.validate().is_err());
        assert!(SmallDepthConfig::default().validate().is_ok());
    }
}

//! Full-resolution residual network: a full-resolution residual stream `z`
//! and a pooled stream `y` exchanged inside every FRRU.

use std::fmt::Write as _;

use rand::Rng;

use crate::layers::{
    concat_channels, split_channels, upsample_add, upsample_nearest, upsample_nearest_backward, BatchNorm2d, Conv2d, MaxPool, Mode,
    Relu,
};
use crate::param::{Module, Param};
use crate::tensor::{expect_same, Tensor};
use crate::{Error, Result};

/// conv (no bias) + batch norm + optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    relu: Option<Relu>,
}

impl ConvUnit {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        relu: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&format!("{name}.conv"), in_ch, out_ch, kernel, false, rng)?,
            bn: BatchNorm2d::new(&format!("{name}.bn"), out_ch),
            relu: relu.then(Relu::default),
        })
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode, record: bool) -> Result<Tensor> {
        let h = self.conv.forward(x, record)?;
        if mode == Mode::Eval && !record {
            let mut h = h;
            self.bn.infer_in_place(&mut h, self.relu.is_some());
            return Ok(h);
        }
        let h = self.bn.forward(&h, mode, record)?;
        Ok(match &mut self.relu {
            Some(r) => r.forward(h, record),
            None => h,
        })
    }

    pub fn backward(&mut self, grad: Tensor) -> Result<Tensor> {
        let g = match &mut self.relu {
            Some(r) => r.backward(grad)?,
            None => grad,
        };
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }
}

impl Module for ConvUnit {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }

    fn visit_ref(&self, f: &mut dyn FnMut(&Param)) {
        self.conv.visit_ref(f);
        self.bn.visit_ref(f);
    }
}

/// `x + BN(conv(ReLU(BN(conv(x)))))`.
#[derive(Debug, Clone)]
pub struct ResidualUnit {
    pub first: ConvUnit,
    pub second: ConvUnit,
}

impl ResidualUnit {
    pub fn new<R: Rng + ?Sized>(name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            first: ConvUnit::new(&format!("{name}.0"), channels, channels, 3, true, rng)?,
            second: ConvUnit::new(&format!("{name}.1"), channels, channels, 3, false, rng)?,
        })
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode, record: bool) -> Result<Tensor> {
        let h = self.first.forward(x, mode, record)?;
        let mut h = self.second.forward(&h, mode, record)?;
        h.add_assign(x)?;
        Ok(h)
    }

    pub fn backward(&mut self, grad: Tensor) -> Result<Tensor> {
        let g = self.second.backward(grad.clone())?;
        let mut g = self.first.backward(g)?;
        g.add_assign(&grad)?;
        Ok(g)
    }
}

impl Module for ResidualUnit {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.first.visit(f);
        self.second.visit(f);
    }

    fn visit_ref(&self, f: &mut dyn FnMut(&Param)) {
        self.first.visit_ref(f);
        self.second.visit_ref(f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrruSpec {
    /// Channels of the incoming pooled stream.
    pub in_pooled: usize,
    pub pooled_channels: usize,
    pub residual_channels: usize,
    pub pooling_factor: usize,
}

/// Full-resolution residual unit.
#[derive(Debug, Clone)]
pub struct Frru {
    pub spec: FrruSpec,
    pool: MaxPool,
    pub unit_a: ConvUnit,
    pub unit_b: ConvUnit,
    pub to_residual: Conv2d,
}

impl Frru {
    pub fn new<R: Rng + ?Sized>(name: &str, spec: FrruSpec, rng: &mut R) -> Result<Self> {
        if spec.pooling_factor < 2 || !spec.pooling_factor.is_power_of_two() {
            return Err(Error::Config(format!("{name}: pooling factor {} must be a power of two ≥ 2", spec.pooling_factor)));
        }
        Ok(Self {
            spec,
            pool: MaxPool::new(spec.pooling_factor),
            unit_a: ConvUnit::new(&format!("{name}.a"), spec.in_pooled + spec.residual_channels, spec.pooled_channels, 3, true, rng)?,
            unit_b: ConvUnit::new(&format!("{name}.b"), spec.pooled_channels, spec.pooled_channels, 3, true, rng)?,
            to_residual: Conv2d::new(&format!("{name}.res"), spec.pooled_channels, spec.residual_channels, 1, true, rng)?,
        })
    }

    pub fn forward(&mut self, z: &Tensor, y: &Tensor, mode: Mode, record: bool) -> Result<(Tensor, Tensor)> {
        let f = self.spec.pooling_factor;
        let [n, _, h, w] = z.shape();
        if y.batch() != n || y.height() * f != h || y.width() * f != w {
            return Err(Error::Shape(format!(
                "FRRU x{f}: residual stream {:?} and pooled stream {:?} disagree",
                z.shape(),
                y.shape()
            )));
        }
        let pooled = self.pool.forward(z, record)?;
        let joined = concat_channels(&pooled, y)?;
        let y_next = self.unit_a.forward(&joined, mode, record)?;
        let y_next = self.unit_b.forward(&y_next, mode, record)?;
        let r = self.to_residual.forward(&y_next, record)?;
        Ok((upsample_add(z, &r, f)?, y_next))
    }

    /// Returns gradients with respect to `(z, y)`.
    pub fn backward(&mut self, grad_z: &Tensor, grad_y: &Tensor) -> Result<(Tensor, Tensor)> {
        let gr = upsample_nearest_backward(grad_z, self.spec.pooling_factor)?;
        let mut gy = self.to_residual.backward(&gr)?;
        gy.add_assign(grad_y)?;
        let g = self.unit_b.backward(gy)?;
        let g = self.unit_a.backward(g)?;
        let (g_pooled, g_y) = split_channels(&g, self.spec.residual_channels)?;
        let mut g_z = self.pool.backward(&g_pooled)?;
        g_z.add_assign(grad_z)?;
        Ok((g_z, g_y))
    }
}

impl Module for Frru {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.unit_a.visit(f);
        self.unit_b.visit(f);
        self.to_residual.visit(f);
    }

    fn visit_ref(&self, f: &mut dyn FnMut(&Param)) {
        self.unit_a.visit_ref(f);
        self.unit_b.visit_ref(f);
        self.to_residual.visit_ref(f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrrnConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub head_channels: usize,
    pub residual_channels: usize,
    /// Pooled-stream width per encoder depth (factor 2, 4, 8, ...); the last
    /// entry repeats for deeper levels.
    pub pooled_channels: Vec<usize>,
    pub blocks: usize,
    pub units_per_block: usize,
    pub head_units: usize,
    pub tail_units: usize,
    /// Start the output convolution at zero so the network initially
    /// predicts 0 dB everywhere.
    pub zero_init_output: bool,
}

impl FrrnConfig {
    /// FRRN-A style widths: 32-channel residual stream, pooled stream
    /// doubling 48 → 96 → 192.
    pub fn frrn_a(out_channels: usize) -> Self {
        Self {
            in_channels: 1,
            out_channels,
            head_channels: 48,
            residual_channels: 32,
            pooled_channels: vec![48, 96, 192],
            blocks: 9,
            units_per_block: 3,
            head_units: 3,
            tail_units: 3,
            zero_init_output: false,
        }
    }

    /// Narrow 27-FRRU model that trains on one CPU core in hours.
    pub fn desk(out_channels: usize) -> Self {
        Self {
            head_channels: 16,
            residual_channels: 16,
            pooled_channels: vec![16, 32, 48],
            head_units: 1,
            tail_units: 1,
            ..Self::frrn_a(out_channels)
        }
    }

    /// Three-block model for tests.
    pub fn tiny(out_channels: usize) -> Self {
        Self {
            head_channels: 4,
            residual_channels: 4,
            pooled_channels: vec![4, 8],
            blocks: 3,
            head_units: 1,
            tail_units: 1,
            ..Self::frrn_a(out_channels)
        }
    }

    pub fn encoder_blocks(&self) -> usize {
        self.blocks.div_ceil(2)
    }

    pub fn max_pooling_factor(&self) -> usize {
        1 << self.encoder_blocks()
    }

    /// Pooling factor of every block in order.
    pub fn block_factors(&self) -> Vec<usize> {
        let enc = self.encoder_blocks();
        let mut factors: Vec<usize> = (1..=enc).map(|d| 1 << d).collect();
        factors.extend((1..=self.blocks - enc).map(|d| 1 << (enc - d)));
        factors
    }

    pub fn pooled_width(&self, factor: usize) -> usize {
        let depth = factor.trailing_zeros() as usize - 1;
        self.pooled_channels[depth.min(self.pooled_channels.len() - 1)]
    }

    pub fn frru_count(&self) -> usize {
        self.blocks * self.units_per_block
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.blocks < 3 || self.blocks % 2 == 0 {
            return fail("block count must be odd and at least 3");
        }
        if self.units_per_block == 0 {
            return fail("blocks need at least one FRRU");
        }
        if self.pooled_channels.is_empty() || self.pooled_channels.contains(&0) {
            return fail("pooled channel widths must be positive");
        }
        if [self.in_channels, self.out_channels, self.head_channels, self.residual_channels].contains(&0) {
            return fail("channel counts must be positive");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let widths: Vec<String> = self.pooled_channels.iter().map(|c| c.to_string()).collect();
        let mut s = String::new();
        let _ = writeln!(s, "in_channels = {}", self.in_channels);
        let _ = writeln!(s, "out_channels = {}", self.out_channels);
        let _ = writeln!(s, "head_channels = {}", self.head_channels);
        let _ = writeln!(s, "residual_channels = {}", self.residual_channels);
        let _ = writeln!(s, "pooled_channels = {}", widths.join(","));
        let _ = writeln!(s, "blocks = {}", self.blocks);
        let _ = writeln!(s, "units_per_block = {}", self.units_per_block);
        let _ = writeln!(s, "head_units = {}", self.head_units);
        let _ = writeln!(s, "tail_units = {}", self.tail_units);
        let _ = writeln!(s, "zero_init_output = {}", self.zero_init_output);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::desk(1);
        let bad = |k: &str, v: &str| Error::Config(format!("model config: bad value {v:?} for {k}"));
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("model config: malformed line {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = || v.parse::<usize>().map_err(|_| bad(k, v));
            match k {
                "in_channels" => cfg.in_channels = num()?,
                "out_channels" => cfg.out_channels = num()?,
                "head_channels" => cfg.head_channels = num()?,
                "residual_channels" => cfg.residual_channels = num()?,
                "pooled_channels" => {
                    cfg.pooled_channels = v
                        .split(',')
                        .map(|c| c.trim().parse::<usize>().map_err(|_| bad(k, v)))
                        .collect::<Result<_>>()?
                }
                "blocks" => cfg.blocks = num()?,
                "units_per_block" => cfg.units_per_block = num()?,
                "head_units" => cfg.head_units = num()?,
                "tail_units" => cfg.tail_units = num()?,
                "zero_init_output" => cfg.zero_init_output = v.parse().map_err(|_| bad(k, v))?,
                _ => return Err(Error::Config(format!("model config: unknown key {k:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
struct Block {
    factor: usize,
    units: Vec<Frru>,
    /// Resampling applied to `y` before entering this block.
    entry: Transition,
}

#[derive(Debug, Clone)]
enum Transition {
    Down(MaxPool),
    Up,
}

#[derive(Debug, Clone)]
pub struct Frrn {
    pub config: FrrnConfig,
    head: ConvUnit,
    head_units: Vec<ResidualUnit>,
    split: Conv2d,
    blocks: Vec<Block>,
    merge: ConvUnit,
    tail_units: Vec<ResidualUnit>,
    output: Conv2d,
    /// Channel count of the upsampled pooled stream at the merge.
    merge_pooled: usize,
}

impl Frrn {
    pub fn new<R: Rng + ?Sized>(config: FrrnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let hc = config.head_channels;
        let rc = config.residual_channels;
        let head = ConvUnit::new("head", config.in_channels, hc, 3, true, rng)?;
        let head_units =
            (0..config.head_units).map(|i| ResidualUnit::new(&format!("head.ru{i}"), hc, rng)).collect::<Result<_>>()?;
        let split = Conv2d::new("split", hc, rc, 1, true, rng)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        let mut y_channels = hc;
        let mut prev_factor = 1;
        for (b, factor) in config.block_factors().into_iter().enumerate() {
            let width = config.pooled_width(factor);
            let mut units = Vec::with_capacity(config.units_per_block);
            for u in 0..config.units_per_block {
                let spec = FrruSpec {
                    in_pooled: y_channels,
                    pooled_channels: width,
                    residual_channels: rc,
                    pooling_factor: factor,
                };
                units.push(Frru::new(&format!("block{b}.frru{u}"), spec, rng)?);
                y_channels = width;
            }
            let entry = if factor > prev_factor { Transition::Down(MaxPool::new(2)) } else { Transition::Up };
            blocks.push(Block { factor, units, entry });
            prev_factor = factor;
        }
        let merge = ConvUnit::new("merge", y_channels + rc, hc, 1, true, rng)?;
        let tail_units =
            (0..config.tail_units).map(|i| ResidualUnit::new(&format!("tail.ru{i}"), hc, rng)).collect::<Result<_>>()?;
        let mut output = Conv2d::new("output", hc, config.out_channels, 1, true, rng)?;
        if config.zero_init_output {
            output.zero_parameters();
        }
        Ok(Self { config, head, head_units, split, blocks, merge, tail_units, output, merge_pooled: y_channels })
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode, record: bool) -> Result<Tensor> {
        let [_, c, h, w] = x.shape();
        let m = self.config.max_pooling_factor();
        if c != self.config.in_channels {
            return Err(Error::Shape(format!("FRRN expects {} input channels, got {c}", self.config.in_channels)));
        }
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("FRRN input {h}x{w} not divisible by pooling factor {m}")));
        }
        let mut t = self.head.forward(x, mode, record)?;
        for ru in &mut self.head_units {
            t = ru.forward(&t, mode, record)?;
        }
        let mut z = self.split.forward(&t, record)?;
        let mut y = t;
        for block in &mut self.blocks {
            y = match &mut block.entry {
                Transition::Down(pool) => pool.forward(&y, record)?,
                Transition::Up => upsample_nearest(&y, 2),
            };
            for unit in &mut block.units {
                (z, y) = unit.forward(&z, &y, mode, record)?;
            }
        }
        let y = upsample_nearest(&y, 2);
        let joined = concat_channels(&y, &z)?;
        let mut t = self.merge.forward(&joined, mode, record)?;
        for ru in &mut self.tail_units {
            t = ru.forward(&t, mode, record)?;
        }
        let out = self.output.forward(&t, record)?;
        if !out.is_finite() {
            return Err(Error::NonFinite("FRRN forward output".into()));
        }
        Ok(out)
    }

    /// Eval-mode forward pass that records nothing.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        self.forward(x, Mode::Eval, false)
    }

    /// Back-propagates from the output gradient; returns the input gradient.
    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mut g = self.output.backward(grad)?;
        for ru in self.tail_units.iter_mut().rev() {
            g = ru.backward(g)?;
        }
        let g = self.merge.backward(g)?;
        let (gy, mut gz) = split_channels(&g, self.merge_pooled)?;
        let mut gy = upsample_nearest_backward(&gy, 2)?;
        for block in self.blocks.iter_mut().rev() {
            for unit in block.units.iter_mut().rev() {
                (gz, gy) = unit.backward(&gz, &gy)?;
            }
            gy = match &mut block.entry {
                Transition::Down(pool) => pool.backward(&gy)?,
                Transition::Up => upsample_nearest_backward(&gy, 2)?,
            };
        }
        let mut gt = self.split.backward(&gz)?;
        gt.add_assign(&gy)?;
        for ru in self.head_units.iter_mut().rev() {
            gt = ru.backward(gt)?;
        }
        self.head.backward(gt)
    }

    pub fn block_factors(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.factor).collect()
    }

    pub fn frrus_mut(&mut self) -> impl Iterator<Item = &mut Frru> {
        self.blocks.iter_mut().flat_map(|b| b.units.iter_mut())
    }
}

impl Module for Frrn {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.head.visit(f);
        self.head_units.iter_mut().for_each(|m| m.visit(f));
        self.split.visit(f);
        for b in &mut self.blocks {
            b.units.iter_mut().for_each(|m| m.visit(f));
        }
        self.merge.visit(f);
        self.tail_units.iter_mut().for_each(|m| m.visit(f));
        self.output.visit(f);
    }

    fn visit_ref(&self, f: &mut dyn FnMut(&Param)) {
        self.head.visit_ref(f);
        self.head_units.iter().for_each(|m| m.visit_ref(f));
        self.split.visit_ref(f);
        for b in &self.blocks {
            b.units.iter().for_each(|m| m.visit_ref(f));
        }
        self.merge.visit_ref(f);
        self.tail_units.iter().for_each(|m| m.visit_ref(f));
        self.output.visit_ref(f);
    }
}

/// Mean squared error over every element and its gradient. With a mask
/// (1 = counted), the mean runs over counted elements only.
pub fn mse_loss(pred: &Tensor, target: &Tensor, mask: Option<&Tensor>) -> Result<(f64, Tensor)> {
    expect_same(pred, target, "mse")?;
    if let Some(m) = mask {
        expect_same(pred, m, "mse mask")?;
    }
    let weight = |i: usize| mask.map_or(1.0, |m| m.data()[i] as f64);
    let count: f64 = (0..pred.len()).map(weight).sum();
    if count == 0.0 {
        return Err(Error::Shape("mse over zero elements".into()));
    }
    let mut grad = Tensor::zeros(pred.shape());
    let mut sum = 0.0f64;
    for (i, ((g, &p), &t)) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()).enumerate() {
        let d = (p as f64 - t as f64) * weight(i);
        sum += d * (p as f64 - t as f64);
        *g = (2.0 * d / count) as f32;
    }
    Ok((sum / count, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_layout() {
        let c = FrrnConfig::desk(2);
        assert_eq!(c.block_factors(), vec![2, 4, 8, 16, 32, 16, 8, 4, 2]);
        assert_eq!(c.frru_count(), 27);
        assert_eq!(FrrnConfig::tiny(2).block_factors(), vec![2, 4, 2]);
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = FrrnConfig::frrn_a(4);
        c.zero_init_output = true;
        assert_eq!(FrrnConfig::from_text(&c.to_text()).unwrap(), c);
        assert!(FrrnConfig::from_text("blocks = 4").is_err());
    }

    #[test]
    fn zero_init_predicts_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cfg = FrrnConfig::tiny(2);
        cfg.zero_init_output = true;
        let mut net = Frrn::new(cfg, &mut rng).unwrap();
        let y = net.predict(&Tensor::full([1, 1, 16, 16], 1.0)).unwrap();
        assert_eq!(y.shape(), [1, 2, 16, 16]);
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Frrn::new(FrrnConfig::tiny(1), &mut rng).unwrap();
        assert!(net.predict(&Tensor::zeros([1, 1, 10, 10])).is_err());
    }

    #[test]
    fn mse_matches_definition() {
        let p = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let t = Tensor::from_vec([1, 1, 1, 2], vec![0.0, 0.0]).unwrap();
        let (l, g) = mse_loss(&p, &t, None).unwrap();
        assert_eq!(l, 5.0);
        assert_eq!(g.data(), &[1.0, 3.0]);
        let m = Tensor::from_vec([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(mse_loss(&p, &t, Some(&m)).unwrap().0, 9.0);
    }
}

//! Parameter layout and batched forward passes of F, SCS, G, E and the D head.

use rand_chacha::ChaCha8Rng;

use crate::model::layers::{normal, EqConv, EqLinear, Init, Pass};
use crate::model::{GrowthState, ModelConfig};
use crate::tensor::{self, ParamGroup, ParamStore, Var, ADAIN_EPS};

const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;
const MAPPING_LR_MUL: f64 = 0.1;
const PIXEL_NORM_EPS: f64 = 1e-8;

/// Style affine plus population 1×1 convolution feeding one AdaIN site.
#[derive(Clone, Debug)]
pub(crate) struct Modulation {
    style: EqLinear,
    pop: EqConv,
    channels: usize,
}

#[derive(Clone, Debug)]
struct GenLevel {
    conv0: EqConv,
    mod0: Modulation,
    conv1: EqConv,
    mod1: Modulation,
    to_rgb: EqConv,
}

#[derive(Clone, Debug)]
struct EncLevel {
    from_rgb: EqConv,
    conv0: EqConv,
    proj0: EqLinear,
    conv1: EqConv,
    proj1: EqLinear,
}

#[derive(Clone, Debug)]
struct EncBase {
    from_rgb: EqConv,
    conv0: EqConv,
    proj0: EqLinear,
    dense: EqLinear,
}

#[derive(Clone, Debug)]
pub(crate) struct Networks {
    slope: f64,
    base: usize,
    mapping: Vec<EqLinear>,
    constant: tensor::ParamId,
    gen: Vec<GenLevel>,
    enc_base: EncBase,
    enc: Vec<EncLevel>,
    head: Vec<EqLinear>,
}

/// Normalized population at every level resolution up to a stage, as graph constants.
pub(crate) struct PopInputs {
    pub levels: Vec<Var>,
}

impl Networks {
    /// Registers every parameter in a fixed order; the order defines checkpoint layout.
    pub fn build(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        use ParamGroup::*;
        let ch = &cfg.channels_per_stage;
        let w = cfg.w_dim;

        let mapping = (0..cfg.mapping_layers)
            .map(|i| {
                let fan_in = if i == 0 { cfg.z_dim } else { w };
                let name = format!("mapping.{i}");
                EqLinear::new(store, rng, &name, Mapping, fan_in, w, LRELU_GAIN, MAPPING_LR_MUL, Init::Normal)
            })
            .collect();

        let b = cfg.base_resolution;
        let constant = store.add("synthesis.const", Synthesis, normal(rng, &[1, ch[0], b, b], 1.0));
        let modulation = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: String, c: usize| Modulation {
            style: EqLinear::new(store, rng, &format!("{name}.style"), Scs, w, 2 * c, 1.0, 1.0, Init::Normal),
            pop: EqConv::new(store, rng, &format!("{name}.pop"), Scs, 1, 2 * c, 1, 1.0, Init::Zero),
            channels: c,
        };
        let gen = (0..=cfg.max_stage)
            .map(|l| {
                let cin = if l == 0 { ch[0] } else { ch[l - 1] };
                let c = ch[l];
                let p = format!("synthesis.{l}");
                GenLevel {
                    conv0: EqConv::new(store, rng, &format!("{p}.conv0"), Synthesis, cin, c, 3, LRELU_GAIN, Init::Normal),
                    mod0: modulation(store, rng, format!("scs.{l}.0"), c),
                    conv1: EqConv::new(store, rng, &format!("{p}.conv1"), Synthesis, c, c, 3, LRELU_GAIN, Init::Normal),
                    mod1: modulation(store, rng, format!("scs.{l}.1"), c),
                    to_rgb: EqConv::new(store, rng, &format!("{p}.to_rgb"), Synthesis, c, 3, 1, 1.0, Init::Normal),
                }
            })
            .collect();

        let from_rgb = |store: &mut ParamStore, rng: &mut ChaCha8Rng, l: usize| {
            EqConv::new(store, rng, &format!("encoder.{l}.from_rgb"), Encoder, 4, ch[l], 1, LRELU_GAIN, Init::Normal)
        };
        let enc_base = EncBase {
            from_rgb: from_rgb(store, rng, 0),
            conv0: EqConv::new(store, rng, "encoder.0.conv0", Encoder, ch[0], ch[0], 3, LRELU_GAIN, Init::Normal),
            proj0: EqLinear::new(store, rng, "encoder.0.proj0", Encoder, ch[0], w, 1.0, 1.0, Init::Normal),
            dense: EqLinear::new(store, rng, "encoder.0.dense", Encoder, ch[0] * b * b, w, 1.0, 1.0, Init::Normal),
        };
        let enc = (1..=cfg.max_stage)
            .map(|l| {
                let p = format!("encoder.{l}");
                EncLevel {
                    from_rgb: from_rgb(store, rng, l),
                    conv0: EqConv::new(store, rng, &format!("{p}.conv0"), Encoder, ch[l], ch[l], 3, LRELU_GAIN, Init::Normal),
                    proj0: EqLinear::new(store, rng, &format!("{p}.proj0"), Encoder, ch[l], w, 1.0, 1.0, Init::Normal),
                    conv1: EqConv::new(store, rng, &format!("{p}.conv1"), Encoder, ch[l], ch[l - 1], 3, LRELU_GAIN, Init::Normal),
                    proj1: EqLinear::new(store, rng, &format!("{p}.proj1"), Encoder, ch[l - 1], w, 1.0, 1.0, Init::Normal),
                }
            })
            .collect();

        let head = (0..3)
            .map(|i| {
                let (out, gain, init) = if i == 2 { (1, 1.0, Init::Zero) } else { (w, LRELU_GAIN, Init::Normal) };
                EqLinear::new(store, rng, &format!("head.{i}"), DiscHead, w, out, gain, 1.0, init)
            })
            .collect();

        Self {
            slope: cfg.leaky_slope,
            base: b,
            mapping,
            constant,
            gen,
            enc_base,
            enc,
            head,
        }
    }

    pub fn encoder_input_channels(&self, store: &ParamStore) -> usize {
        store.get(self.enc_base.from_rgb.weight).value.shape()[1]
    }

    fn act(&self, p: &mut Pass, x: Var) -> Var {
        p.g.leaky_relu(x, self.slope)
    }

    /// `z: [N, z_dim]` → `w: [N, w_dim]`.
    pub fn map(&self, p: &mut Pass, z: Var) -> tensor::Result<Var> {
        let mut h = p.g.pixel_norm(z, PIXEL_NORM_EPS)?;
        for layer in &self.mapping {
            h = p.linear(layer, h)?;
            h = self.act(p, h);
        }
        Ok(h)
    }

    /// Scale and bias maps `[N, C, H, W]` for modulation site `site` (0 or 1) of `level`.
    pub fn modulation(&self, p: &mut Pass, w: Var, pop: Var, level: usize, site: usize) -> tensor::Result<(Var, Var)> {
        let m = if site == 0 { &self.gen[level].mod0 } else { &self.gen[level].mod1 };
        let ps = p.g.shape(pop).to_vec();
        let (n, h, wd) = (ps[0], ps[2], ps[3]);
        let c2 = 2 * m.channels;
        let s = p.linear(&m.style, w)?;
        let s = p.g.reshape(s, &[n, c2, 1, 1])?;
        let s = p.g.broadcast_to(s, &[n, c2, h, wd])?;
        let q = p.conv(&m.pop, pop)?;
        let both = p.g.add(s, q)?;
        let scale = p.g.narrow(both, 1, 0, m.channels)?;
        let bias = p.g.narrow(both, 1, m.channels, m.channels)?;
        Ok((scale, bias))
    }

    fn modulated(&self, p: &mut Pass, conv: &EqConv, x: Var, w: Var, pop: Var, level: usize, site: usize) -> tensor::Result<Var> {
        let h = p.conv(conv, x)?;
        let h = self.act(p, h);
        let (s, b) = self.modulation(p, w, pop, level, site)?;
        p.g.adain(h, s, b)
    }

    /// `w: [N, w_dim]` → image `[N, 3, R, R]` at the growth stage resolution.
    pub fn synthesize(&self, p: &mut Pass, w: Var, pops: &PopInputs, growth: GrowthState) -> tensor::Result<Var> {
        let n = p.g.shape(w)[0];
        let k = p.params.var(&mut p.g, self.constant);
        let c0 = p.g.shape(k)[1];
        let mut x = p.g.broadcast_to(k, &[n, c0, self.base, self.base])?;
        let mut prev = None;
        for l in 0..=growth.stage {
            if l > 0 {
                prev = Some(x);
                x = p.g.upsample(x, 2)?;
            }
            let lv = &self.gen[l];
            x = self.modulated(p, &lv.conv0, x, w, pops.levels[l], l, 0)?;
            x = self.modulated(p, &lv.conv1, x, w, pops.levels[l], l, 1)?;
        }
        let rgb = p.conv(&self.gen[growth.stage].to_rgb, x)?;
        match prev {
            Some(h) if growth.alpha < 1.0 => {
                let old = p.conv(&self.gen[growth.stage - 1].to_rgb, h)?;
                let old = p.g.upsample(old, 2)?;
                p.g.lerp(old, rgb, growth.alpha)
            }
            _ => Ok(rgb),
        }
    }

    fn spatial_mean(p: &mut Pass, x: Var) -> tensor::Result<Var> {
        let s = p.g.shape(x).to_vec();
        let sum = p.g.sum_to(x, &[s[0], s[1], 1, 1])?;
        let mean = p.g.scale(sum, 1.0 / (s[2] * s[3]) as f64);
        p.g.reshape(mean, &[s[0], s[1]])
    }

    fn enc_level(&self, p: &mut Pass, l: usize, h: Var) -> tensor::Result<(Var, Var)> {
        let lv = &self.enc[l - 1];
        let a = p.conv(&lv.conv0, h)?;
        let a = self.act(p, a);
        let m = Self::spatial_mean(p, a)?;
        let c0 = p.linear(&lv.proj0, m)?;
        let a = p.g.instance_norm(a, ADAIN_EPS)?;
        let b = p.conv(&lv.conv1, a)?;
        let b = self.act(p, b);
        let m = Self::spatial_mean(p, b)?;
        let c1 = p.linear(&lv.proj1, m)?;
        let b = p.g.instance_norm(b, ADAIN_EPS)?;
        let h = p.g.avg_pool(b, 2)?;
        Ok((h, p.g.add(c0, c1)?))
    }

    fn from_rgb(&self, p: &mut Pass, l: usize, input: Var) -> tensor::Result<Var> {
        let layer = if l == 0 { &self.enc_base.from_rgb } else { &self.enc[l - 1].from_rgb };
        let h = p.conv(layer, input)?;
        Ok(self.act(p, h))
    }

    /// `x: [N, 3, R, R]` with the stage population → `w: [N, w_dim]`.
    pub fn encode(&self, p: &mut Pass, x: Var, pops: &PopInputs, growth: GrowthState) -> tensor::Result<Var> {
        let s = growth.stage;
        let input = p.g.concat(&[x, pops.levels[s]], 1)?;
        let mut h = self.from_rgb(p, s, input)?;
        let mut acc: Option<Var> = None;
        for l in (1..=s).rev() {
            let (next, mut contrib) = self.enc_level(p, l, h)?;
            h = next;
            if l == s && growth.alpha < 1.0 {
                let down = p.g.avg_pool(input, 2)?;
                let skip = self.from_rgb(p, s - 1, down)?;
                h = p.g.lerp(skip, h, growth.alpha)?;
                contrib = p.g.scale(contrib, growth.alpha);
            }
            acc = Some(match acc {
                None => contrib,
                Some(a) => p.g.add(a, contrib)?,
            });
        }
        let eb = &self.enc_base;
        let a = p.conv(&eb.conv0, h)?;
        let a = self.act(p, a);
        let m = Self::spatial_mean(p, a)?;
        let c0 = p.linear(&eb.proj0, m)?;
        let a = p.g.instance_norm(a, ADAIN_EPS)?;
        let shape = p.g.shape(a).to_vec();
        let flat = p.g.reshape(a, &[shape[0], shape[1] * shape[2] * shape[3]])?;
        let d = p.linear(&eb.dense, flat)?;
        let mut out = p.g.add(c0, d)?;
        if let Some(a) = acc {
            out = p.g.add(a, out)?;
        }
        Ok(out)
    }

    /// `w: [N, w_dim]` → logits `[N, 1]`.
    pub fn head(&self, p: &mut Pass, w: Var) -> tensor::Result<Var> {
        let mut h = w;
        for (i, layer) in self.head.iter().enumerate() {
            h = p.linear(layer, h)?;
            if i + 1 < self.head.len() {
                h = self.act(p, h);
            }
        }
        Ok(h)
    }
}

//! U-Net auto-encoder with CBAM attention at every scale.
//!
//! The encoder and decoder halves own separate [`WeightSet`]s so that the
//! teacher can share the student encoder while keeping its own decoder.
//! Each level adds its CBAM output back onto its features (`f + cbam(f)`), and
//! the conv blocks use leaky ReLU. The decoder records that attended map at each
//! level (coarse → fine).

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IamlError, Result};
use crate::graph::{Graph, Var};
use crate::mirror::FeaturePyramid;
use crate::tensor::Tensor;

/// Negative slope of the conv-block activations.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub cbam_reduction: usize,
    pub cbam_spatial_kernel: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 32,
            cbam_reduction: 16,
            cbam_spatial_kernel: 7,
        }
    }
}

impl BackboneConfig {
    /// Small network used by tests and toy-scale runs.
    pub fn tiny() -> Self {
        Self {
            depth: 2,
            base_channels: 4,
            cbam_reduction: 16,
            cbam_spatial_kernel: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.cbam_reduction == 0 {
            return Err(IamlError::InvalidConfig(
                "depth, base_channels and cbam_reduction must be >= 1".into(),
            ));
        }
        if self.cbam_spatial_kernel.is_multiple_of(2) {
            return Err(IamlError::InvalidConfig(format!(
                "cbam_spatial_kernel must be odd, got {}",
                self.cbam_spatial_kernel
            )));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let f = self.divisor();
        if !h.is_multiple_of(f) || !w.is_multiple_of(f) || h == 0 || w == 0 {
            return Err(IamlError::IndivisibleDims {
                height: h,
                width: w,
                factor: f,
            });
        }
        Ok(())
    }

    fn hidden(&self, c: usize) -> usize {
        (c / self.cbam_reduction).max(1)
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct WeightSet {
    entries: Vec<(String, Tensor)>,
}

impl WeightSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Same names, order and shapes.
    pub fn same_layout(&self, other: &WeightSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    pub fn max_abs_diff(&self, other: &WeightSet) -> f64 {
        assert!(self.same_layout(other), "weight layouts differ");
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|((_, a), (_, b))| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// Places every tensor in `g`, as parameters when `trainable`, otherwise as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let mut vars = HashMap::with_capacity(self.entries.len());
        let mut order = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            let v = if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            };
            vars.insert(name.clone(), v);
            order.push(v);
        }
        Bound { vars, order }
    }
}

/// A [`WeightSet`] placed in a graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: HashMap<String, Var>,
    order: Vec<Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| IamlError::ConfigMismatch(format!("missing weight `{name}`")))
    }

    /// Vars in the owning set's order.
    pub fn vars(&self) -> &[Var] {
        &self.order
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub bottleneck: Var,
    /// Fine → coarse.
    pub skips: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub image: Var,
    /// Coarse → fine, one entry per decoder level.
    pub pyramid: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub config: BackboneConfig,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

fn push_conv(
    set: &mut WeightSet,
    rng: &mut impl Rng,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
) {
    let fan_in = (cin * k * k) as f64;
    set.push(
        format!("{name}.w"),
        uniform(rng, &[cout, cin, k, k], (6.0 / fan_in).sqrt()),
    );
    set.push(format!("{name}.b"), Tensor::zeros(&[cout]));
}

fn push_cbam(set: &mut WeightSet, rng: &mut impl Rng, cfg: &BackboneConfig, name: &str, c: usize) {
    let hidden = cfg.hidden(c);
    push_conv(set, rng, &format!("{name}.cbam.fc1"), hidden, c, 1);
    push_conv(set, rng, &format!("{name}.cbam.fc2"), c, hidden, 1);
    let k = cfg.cbam_spatial_kernel;
    push_conv(set, rng, &format!("{name}.cbam.spatial"), 1, 2, k);
}

impl UNet {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Fan-in scaled uniform initialization of `(encoder, decoder)` weights.
    pub fn init_weights(&self, rng: &mut impl Rng) -> (WeightSet, WeightSet) {
        let cfg = &self.config;
        let mut enc = WeightSet::new();
        let mut cin = 3;
        for l in 0..cfg.depth {
            let c = cfg.channels(l);
            push_conv(&mut enc, rng, &format!("enc{l}.conv1"), c, cin, 3);
            push_conv(&mut enc, rng, &format!("enc{l}.conv2"), c, c, 3);
            push_cbam(&mut enc, rng, cfg, &format!("enc{l}"), c);
            cin = c;
        }
        let cb = cfg.channels(cfg.depth);
        push_conv(&mut enc, rng, "bottleneck.conv1", cb, cin, 3);
        push_conv(&mut enc, rng, "bottleneck.conv2", cb, cb, 3);

        let mut dec = WeightSet::new();
        for i in 1..=cfg.depth {
            let l = cfg.depth - i;
            let (c_in, c) = (cfg.channels(l + 1), cfg.channels(l));
            let bound = (6.0 / (c_in * 4) as f64).sqrt();
            dec.push(
                format!("dec{i}.up.w"),
                uniform(rng, &[c_in, c, 2, 2], bound),
            );
            dec.push(format!("dec{i}.up.b"), Tensor::zeros(&[c]));
            push_conv(&mut dec, rng, &format!("dec{i}.conv1"), c, 2 * c, 3);
            push_conv(&mut dec, rng, &format!("dec{i}.conv2"), c, c, 3);
            push_cbam(&mut dec, rng, cfg, &format!("dec{i}"), c);
        }
        push_conv(&mut dec, rng, "head", 3, cfg.channels(0), 1);
        (enc, dec)
    }

    /// Number of scalar parameters, walked from the layer structure without allocating.
    pub fn param_count(&self) -> usize {
        let cfg = &self.config;
        let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k + cout;
        let cbam = |c: usize| {
            let h = cfg.hidden(c);
            conv(h, c, 1) + conv(c, h, 1) + conv(1, 2, cfg.cbam_spatial_kernel)
        };
        let mut total = 0;
        let mut cin = 3;
        for l in 0..cfg.depth {
            let c = cfg.channels(l);
            total += conv(c, cin, 3) + conv(c, c, 3) + cbam(c);
            cin = c;
        }
        let cb = cfg.channels(cfg.depth);
        total += conv(cb, cin, 3) + conv(cb, cb, 3);
        for l in (0..cfg.depth).rev() {
            let (c_in, c) = (cfg.channels(l + 1), cfg.channels(l));
            total += c_in * c * 4 + c;
            total += conv(c, 2 * c, 3) + conv(c, c, 3) + cbam(c);
        }
        total + conv(3, cfg.channels(0), 1)
    }

    fn conv(&self, g: &mut Graph, w: &Bound, name: &str, x: Var, pad: usize) -> Result<Var> {
        let wv = w.var(&format!("{name}.w"))?;
        let bv = w.var(&format!("{name}.b"))?;
        Ok(g.conv2d(x, wv, Some(bv), pad))
    }

    fn conv_act(&self, g: &mut Graph, w: &Bound, name: &str, x: Var) -> Result<Var> {
        let y = self.conv(g, w, name, x, 1)?;
        Ok(g.leaky_relu(y, LEAKY_SLOPE))
    }

    /// Channel gate then spatial gate, both multiplicative with sigmoid outputs.
    pub fn cbam(&self, g: &mut Graph, w: &Bound, name: &str, f: Var) -> Result<Var> {
        const SPATIAL: [bool; 4] = [false, false, true, true];
        const CHANNEL: [bool; 4] = [false, true, false, false];
        let avg = g.mean_axes(f, SPATIAL);
        let max = g.max_axes(f, SPATIAL);
        let mut gate_logits = Vec::with_capacity(2);
        for pooled in [avg, max] {
            let h = self.conv(g, w, &format!("{name}.cbam.fc1"), pooled, 0)?;
            let h = g.relu(h);
            gate_logits.push(self.conv(g, w, &format!("{name}.cbam.fc2"), h, 0)?);
        }
        let logits = g.add(gate_logits[0], gate_logits[1]);
        let channel_gate = g.sigmoid(logits);
        let f1 = g.mul(f, channel_gate);

        let avg_c = g.mean_axes(f1, CHANNEL);
        let max_c = g.max_axes(f1, CHANNEL);
        let stacked = g.concat_channels(&[avg_c, max_c]);
        let pad = self.config.cbam_spatial_kernel / 2;
        let s = self.conv(g, w, &format!("{name}.cbam.spatial"), stacked, pad)?;
        let spatial_gate = g.sigmoid(s);
        Ok(g.mul(f1, spatial_gate))
    }

    fn attend(&self, g: &mut Graph, w: &Bound, name: &str, f: Var) -> Result<Var> {
        let a = self.cbam(g, w, name, f)?;
        Ok(g.add(f, a))
    }

    pub fn encode(&self, g: &mut Graph, enc: &Bound, image: Var) -> Result<EncoderOutput> {
        let shape = g.value(image).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(IamlError::ChannelCount(shape.get(1).copied().unwrap_or(0)));
        }
        self.config.check_dims(shape[2], shape[3])?;
        let mut x = image;
        let mut skips = Vec::with_capacity(self.config.depth);
        for l in 0..self.config.depth {
            x = self.conv_act(g, enc, &format!("enc{l}.conv1"), x)?;
            x = self.conv_act(g, enc, &format!("enc{l}.conv2"), x)?;
            x = self.attend(g, enc, &format!("enc{l}"), x)?;
            skips.push(x);
            x = g.max_pool2(x);
        }
        x = self.conv_act(g, enc, "bottleneck.conv1", x)?;
        x = self.conv_act(g, enc, "bottleneck.conv2", x)?;
        Ok(EncoderOutput {
            bottleneck: x,
            skips,
        })
    }

    pub fn decode(&self, g: &mut Graph, dec: &Bound, enc: &EncoderOutput) -> Result<DecoderOutput> {
        let depth = self.config.depth;
        if enc.skips.len() != depth {
            return Err(IamlError::ConfigMismatch(format!(
                "encoder produced {} skips, decoder expects {depth}",
                enc.skips.len()
            )));
        }
        let expected = self.config.channels(depth);
        let got = g.value(enc.bottleneck).shape()[1];
        if got != expected {
            return Err(IamlError::ConfigMismatch(format!(
                "bottleneck has {got} channels, decoder expects {expected}"
            )));
        }
        let mut x = enc.bottleneck;
        let mut pyramid = Vec::with_capacity(depth);
        for i in 1..=depth {
            let skip = enc.skips[depth - i];
            let (uw, ub) = (
                dec.var(&format!("dec{i}.up.w"))?,
                dec.var(&format!("dec{i}.up.b"))?,
            );
            let up = g.conv_transpose2(x, uw, Some(ub));
            let cat = g.concat_channels(&[up, skip]);
            x = self.conv_act(g, dec, &format!("dec{i}.conv1"), cat)?;
            x = self.conv_act(g, dec, &format!("dec{i}.conv2"), x)?;
            x = self.attend(g, dec, &format!("dec{i}"), x)?;
            pyramid.push(x);
        }
        let logits = self.conv(g, dec, "head", x, 0)?;
        Ok(DecoderOutput {
            image: g.sigmoid(logits),
            pyramid,
        })
    }

    /// Gradient-enabled student path: `decode(encode(image))`.
    pub fn forward(
        &self,
        g: &mut Graph,
        enc: &Bound,
        dec: &Bound,
        image: Var,
    ) -> Result<DecoderOutput> {
        let e = self.encode(g, enc, image)?;
        self.decode(g, dec, &e)
    }

    /// Inference without gradient bookkeeping.
    pub fn forward_value(
        &self,
        enc: &WeightSet,
        dec: &WeightSet,
        image: &Tensor,
    ) -> Result<(Tensor, FeaturePyramid)> {
        let mut g = Graph::new();
        let eb = enc.bind(&mut g, false);
        let db = dec.bind(&mut g, false);
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, &eb, &db, x)?;
        let pyramid = FeaturePyramid {
            levels: out.pyramid.iter().map(|&v| g.value(v).clone()).collect(),
        };
        Ok((g.value(out.image).clone(), pyramid))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_image(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    fn tiny() -> (UNet, WeightSet, WeightSet) {
        let net = UNet::new(BackboneConfig::tiny()).unwrap();
        let (e, d) = net.init_weights(&mut ChaCha8Rng::seed_from_u64(0));
        (net, e, d)
    }

    #[test]
    fn pyramid_shapes_double_per_level() {
        let (net, e, d) = tiny();
        let (img, pyr) = net
            .forward_value(&e, &d, &rand_image(&[2, 3, 16, 12], 1))
            .unwrap();
        assert_eq!(img.shape(), &[2, 3, 16, 12]);
        assert_eq!(pyr.depth(), 2);
        assert_eq!(pyr.levels[0].shape(), &[2, 8, 8, 6]);
        assert_eq!(pyr.levels[1].shape(), &[2, 4, 16, 12]);
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn default_config_shapes_at_256() {
        let net = UNet::new(BackboneConfig::default()).unwrap();
        let (e, _) = net.init_weights(&mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let eb = e.bind(&mut g, false);
        let x = g.constant(Tensor::full(&[1, 3, 256, 256], 0.5));
        let out = net.encode(&mut g, &eb, x).unwrap();
        assert_eq!(g.value(out.bottleneck).shape(), &[1, 512, 16, 16]);
        assert_eq!(out.skips.len(), 4);
    }

    #[test]
    fn rejects_indivisible_dims() {
        let (net, e, d) = tiny();
        let err = net.forward_value(&e, &d, &rand_image(&[1, 3, 10, 16], 2));
        assert!(matches!(
            err,
            Err(IamlError::IndivisibleDims { factor: 4, .. })
        ));
    }

    #[test]
    fn param_count_matches_weights() {
        for cfg in [BackboneConfig::tiny(), BackboneConfig::default()] {
            let net = UNet::new(cfg).unwrap();
            let (e, d) = net.init_weights(&mut ChaCha8Rng::seed_from_u64(3));
            assert_eq!(e.num_params() + d.num_params(), net.param_count());
        }
        assert_eq!(
            UNet::new(BackboneConfig::tiny()).unwrap().param_count(),
            7951
        );
    }

    #[test]
    fn cbam_gates_shrink_and_preserve_zero() {
        let (net, e, _) = tiny();
        let mut g = Graph::new();
        let eb = e.bind(&mut g, false);
        let f = rand_image(&[1, 4, 5, 7], 4).map(|v| v - 0.5);
        let fv = g.constant(f.clone());
        let out = net.cbam(&mut g, &eb, "enc0", fv).unwrap();
        let o = g.value(out);
        assert_eq!(o.shape(), f.shape());
        for (a, b) in o.data().iter().zip(f.data()) {
            assert!(a.abs() <= b.abs());
        }
        let z = g.constant(Tensor::zeros(&[1, 4, 5, 7]));
        let zo = net.cbam(&mut g, &eb, "enc0", z).unwrap();
        assert!(g.value(zo).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let (net, e, d) = tiny();
        let x = rand_image(&[1, 3, 8, 8], 5);
        let a = net.forward_value(&e, &d, &x).unwrap();
        let b = net.forward_value(&e, &d, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_encoder_gets_no_gradient() {
        let (net, e, d) = tiny();
        let mut g = Graph::new();
        let eb = e.bind(&mut g, false);
        let db = d.bind(&mut g, true);
        let x = g.constant(rand_image(&[1, 3, 8, 8], 6));
        let out = net.forward(&mut g, &eb, &db, x).unwrap();
        let l = g.mean_all(out.image);
        let grads = g.backward(l);
        assert!(eb.vars().iter().all(|&v| grads.get(v).is_none()));
        assert!(db.vars().iter().any(|&v| grads.get(v).is_some()));
    }
}

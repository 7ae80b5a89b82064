//! U-shaped encoder-decoder with skip connections and a sigmoid head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv, ConvKind, ConvUnit, MaxPool2, Param};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub in_channels: usize,
    /// Number of 2x2 poolings; patch sides must be divisible by `2^depth`.
    pub depth: usize,
    /// Channels at full resolution; doubled at every level.
    pub base_channels: usize,
    pub kernel: usize,
    pub convs_per_block: usize,
    /// Negative slope of the leaky rectifier.
    pub alpha: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            depth: 3,
            base_channels: 8,
            kernel: 5,
            convs_per_block: 2,
            alpha: 0.1,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.in_channels == 0 || self.base_channels == 0 || self.convs_per_block == 0 {
            return bad(format!(
                "channel and block counts must be positive: {self:?}"
            ));
        }
        if self.depth == 0 || self.depth > 8 {
            return bad(format!("depth must be in 1..=8, got {}", self.depth));
        }
        if self.kernel < 3 || self.kernel.is_multiple_of(2) {
            return bad(format!("kernel must be odd and >= 3, got {}", self.kernel));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("leaky slope must be in [0, 1), got {}", self.alpha));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0 && self.bn_eps > 0.0) {
            return bad("batch-norm momentum must be in (0, 1] and eps > 0".into());
        }
        Ok(())
    }

    /// Required divisor of the patch side.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

type Block<T> = Vec<ConvUnit<T>>;

#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: NetworkSpec,
    encoders: Vec<Block<T>>,
    pools: Vec<MaxPool2>,
    bottleneck: Block<T>,
    /// Decoder stages ordered from the deepest level up.
    ups: Vec<ConvUnit<T>>,
    decoders: Vec<Block<T>>,
    head: Conv<T>,
    /// Output shape `(n, h, w)` and raw sigmoid outputs of the last training forward.
    head_out: Option<((usize, usize, usize), Vec<T>)>,
}

fn block<T: Scalar, R: Rng>(spec: &NetworkSpec, cin: usize, cout: usize, rng: &mut R) -> Block<T> {
    (0..spec.convs_per_block)
        .map(|i| {
            let c_in = if i == 0 { cin } else { cout };
            ConvUnit::new(
                ConvKind::Same,
                c_in,
                cout,
                spec.kernel,
                spec.alpha,
                spec.bn_momentum,
                spec.bn_eps,
                rng,
            )
        })
        .collect()
}

fn block_forward<T: Scalar>(b: &mut Block<T>, mut x: Tensor<T>, train: bool) -> Tensor<T> {
    for unit in b.iter_mut() {
        x = unit.forward(x, train);
    }
    x
}

fn block_backward<T: Scalar>(b: &mut Block<T>, dy: Tensor<T>) -> Result<Tensor<T>> {
    let mut d = dy;
    for unit in b.iter_mut().rev() {
        d = unit.backward(&d)?;
    }
    Ok(d)
}

/// Parameter gradients in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T>(pub Vec<Vec<T>>);

impl<T: Scalar> Gradients<T> {
    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().all(|g| g.is_finite())
    }
}

impl<T: Scalar> Network<T> {
    pub fn new<R: Rng>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut encoders = Vec::with_capacity(spec.depth);
        let mut cin = spec.in_channels;
        for level in 0..spec.depth {
            encoders.push(block(&spec, cin, spec.channels(level), rng));
            cin = spec.channels(level);
        }
        let bottleneck = block(&spec, cin, spec.channels(spec.depth), rng);
        let mut ups = Vec::with_capacity(spec.depth);
        let mut decoders = Vec::with_capacity(spec.depth);
        for level in (0..spec.depth).rev() {
            let c = spec.channels(level);
            ups.push(ConvUnit::new(
                ConvKind::Up,
                spec.channels(level + 1),
                c,
                spec.kernel,
                spec.alpha,
                spec.bn_momentum,
                spec.bn_eps,
                rng,
            ));
            decoders.push(block(&spec, 2 * c, c, rng));
        }
        let head = Conv::new(ConvKind::Same, spec.base_channels, 1, 1, true, 1.0, rng);
        Ok(Self {
            spec,
            encoders,
            pools: vec![MaxPool2::default(); spec.depth],
            bottleneck,
            ups,
            decoders,
            head,
            head_out: None,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Sets the output layer to zero so every prediction is exactly 0.5.
    pub fn zero_head(&mut self) {
        for p in self.head.params_mut() {
            p.value.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.c != self.spec.in_channels {
            return Err(Error::Dimensions(format!(
                "network expects {} input channels, got {}",
                self.spec.in_channels, x.c
            )));
        }
        let m = self.spec.size_multiple();
        if x.n == 0 || x.h == 0 || x.w == 0 || !x.h.is_multiple_of(m) || !x.w.is_multiple_of(m) {
            return Err(Error::Dimensions(format!(
                "input {}x{} (batch {}) must be non-empty with sides divisible by {m}",
                x.h, x.w, x.n
            )));
        }
        Ok(())
    }

    /// Per-pixel probabilities, shape `N x 1 x H x W`, strictly inside (0, 1).
    ///
    /// Training mode normalizes with batch statistics, updates the running
    /// statistics and caches activations for [`Network::backward`].
    pub fn forward(&mut self, input: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let mut x = input.clone();
        let mut skips = Vec::with_capacity(self.spec.depth);
        for (enc, pool) in self.encoders.iter_mut().zip(self.pools.iter_mut()) {
            x = block_forward(enc, x, train);
            let down = pool.forward(&x, train);
            skips.push(x);
            x = down;
        }
        x = block_forward(&mut self.bottleneck, x, train);
        for (up, dec) in self.ups.iter_mut().zip(self.decoders.iter_mut()) {
            let u = up.forward(x, train);
            let skip = skips.pop().expect("one skip per level");
            x = block_forward(dec, Tensor::concat_channels(&u, &skip), train);
        }
        let mut out = self.head.forward(x, train);
        out.data.iter_mut().for_each(|z| *z = sigmoid(*z));
        if train {
            self.head_out = Some(((out.n, out.h, out.w), out.data.clone()));
        }
        let (lo, hi) = (T::epsilon(), T::one() - T::epsilon());
        out.data.iter_mut().for_each(|p| *p = p.max(lo).min(hi));
        Ok(out)
    }

    /// Back-propagates `dL/dprob` through the cached training forward.
    pub fn backward(&mut self, loss_grad: &[T]) -> Result<Gradients<T>> {
        let (shape, probs) = self
            .head_out
            .take()
            .ok_or_else(|| Error::State("backward called without a training forward".into()))?;
        if loss_grad.len() != probs.len() {
            return Err(Error::Dimensions(format!(
                "loss gradient has {} values, forward produced {}",
                loss_grad.len(),
                probs.len()
            )));
        }
        for p in self.params_mut() {
            p.zero_grad();
        }
        let dz: Vec<T> = loss_grad
            .iter()
            .zip(&probs)
            .map(|(&g, &p)| g * p * (T::one() - p))
            .collect();
        let mut d = self
            .head
            .backward(&Tensor::from_vec(shape.0, 1, shape.1, shape.2, dz)?)?;
        let mut dskips = Vec::with_capacity(self.spec.depth);
        for (up, dec) in self.ups.iter_mut().zip(self.decoders.iter_mut()).rev() {
            let dcat = block_backward(dec, d)?;
            let (du, dskip) = dcat.split_channels(up.conv.cout);
            dskips.push(dskip);
            d = up.backward(&du)?;
        }
        d = block_backward(&mut self.bottleneck, d)?;
        for (enc, pool) in self.encoders.iter_mut().zip(self.pools.iter_mut()).rev() {
            let mut dx = pool.backward(&d)?;
            let dskip = dskips.pop().expect("one skip gradient per level");
            for (a, &b) in dx.data.iter_mut().zip(&dskip.data) {
                *a += b;
            }
            d = block_backward(enc, dx)?;
        }
        Ok(Gradients(
            self.params().iter().map(|p| p.grad.clone()).collect(),
        ))
    }

    /// Trainable parameters in declaration order.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for b in &self.encoders {
            b.iter().for_each(|u| out.extend(u.params()));
        }
        self.bottleneck.iter().for_each(|u| out.extend(u.params()));
        for (up, dec) in self.ups.iter().zip(&self.decoders) {
            out.extend(up.params());
            dec.iter().for_each(|u| out.extend(u.params()));
        }
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for b in &mut self.encoders {
            b.iter_mut().for_each(|u| out.extend(u.params_mut()));
        }
        self.bottleneck
            .iter_mut()
            .for_each(|u| out.extend(u.params_mut()));
        for (up, dec) in self.ups.iter_mut().zip(self.decoders.iter_mut()) {
            out.extend(up.params_mut());
            dec.iter_mut().for_each(|u| out.extend(u.params_mut()));
        }
        out.extend(self.head.params_mut());
        out
    }

    /// Batch-norm running statistics in declaration order.
    pub fn buffers(&self) -> Vec<&Vec<T>> {
        self.units().flat_map(|u| u.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for b in &mut self.encoders {
            b.iter_mut().for_each(|u| out.extend(u.buffers_mut()));
        }
        self.bottleneck
            .iter_mut()
            .for_each(|u| out.extend(u.buffers_mut()));
        for (up, dec) in self.ups.iter_mut().zip(self.decoders.iter_mut()) {
            out.extend(up.buffers_mut());
            dec.iter_mut().for_each(|u| out.extend(u.buffers_mut()));
        }
        out
    }

    fn units(&self) -> impl Iterator<Item = &ConvUnit<T>> {
        let enc = self.encoders.iter().flatten();
        let mid = self.bottleneck.iter();
        let dec = self
            .ups
            .iter()
            .zip(&self.decoders)
            .flat_map(|(up, dec)| std::iter::once(up).chain(dec.iter()));
        enc.chain(mid).chain(dec)
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Copies parameter values and running statistics from `other`.
    pub fn load_state_from(&mut self, other: &Network<T>) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::State("network specs differ".into()));
        }
        for (dst, src) in self.params_mut().into_iter().zip(other.params()) {
            dst.value.copy_from_slice(&src.value);
        }
        for (dst, src) in self.buffers_mut().into_iter().zip(other.buffers()) {
            dst.copy_from_slice(src);
        }
        Ok(())
    }
}

//! Named parameters and the visitor trait every parameterized block implements.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A trainable tensor with a stable hierarchical name such as
/// `ddf1.branch.OCC.scfu_rgb.sae.weight`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    name: String,
    value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    /// Gaussian init with standard deviation `gain / sqrt(fan_in)`.
    pub fn normal(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let std = gain / (fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        Self::new(name, Tensor::from_fn(shape, |_| dist.sample(rng)))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn set(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::Param(format!(
                "{}: expected shape {:?}, got {:?}",
                self.name,
                self.value.shape(),
                value.shape()
            )));
        }
        self.value = value;
        Ok(())
    }

    pub fn bind<'g>(&self, g: &'g Graph) -> Var<'g> {
        g.param(self)
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn named_params(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit(&mut |p| {
            out.insert(p.name().to_string(), p.value().clone());
        });
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value().len());
        n
    }

    /// Overwrite every parameter present in `values`; the rest are left as is.
    fn load_params(&mut self, values: &BTreeMap<String, Tensor>) -> Result<usize> {
        let mut loaded = 0;
        let mut err = None;
        self.visit_mut(&mut |p| {
            if let Some(v) = values.get(p.name()) {
                match p.set(v.clone()) {
                    Ok(()) => loaded += 1,
                    Err(e) => err = Some(e),
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(loaded),
        }
    }

    /// Scale every parameter in place; used to construct special cases
    /// such as zeroed routers.
    fn fill(&mut self, value: f64) {
        self.visit_mut(&mut |p| p.value_mut().data_mut().fill(value));
    }
}

/// Fully connected layer, weight `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(prefix: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::normal(format!("{prefix}.weight"), &[output, input], input, 1.0, rng),
            bias: Param::zeros(format!("{prefix}.bias"), &[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value().dim(1)
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value().dim(0)
    }

    pub fn forward<'g>(&self, x: Var<'g>) -> Var<'g> {
        let g = x.graph();
        x.linear(self.weight.bind(g), Some(self.bias.bind(g)))
    }
}

impl Module for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Square-kernel convolution, weight `(out, in, k, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        prefix: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = input * kernel * kernel;
        Self {
            weight: Param::normal(
                format!("{prefix}.weight"),
                &[output, input, kernel, kernel],
                fan_in,
                1.0,
                rng,
            ),
            bias: Param::zeros(format!("{prefix}.bias"), &[output]),
            stride,
            padding: kernel / 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value().dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().dim(0)
    }

    pub fn forward<'g>(&self, x: Var<'g>) -> Var<'g> {
        let g = x.graph();
        x.conv2d(
            self.weight.bind(g),
            Some(self.bias.bind(g)),
            self.stride,
            self.padding,
        )
    }
}

impl Module for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

//! Late-fusion network: `x -> backbone -> representation`, then
//! `concat(representation, z) -> dense -> softmax over classes`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Activation, ForwardCache, GradAt, LayerSpec, Mlp};
use crate::error::{check_dim, config, Result};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionArch {
    pub x_dim: usize,
    /// Zero means the head sees only the representation.
    pub z_dim: usize,
    pub rep_dim: usize,
    pub backbone_activation: Activation,
    pub classes: usize,
}

impl FusionArch {
    fn backbone(&self) -> Result<Mlp> {
        if self.backbone_activation == Activation::Softmax {
            return Err(config("backbone activation cannot be softmax"));
        }
        Mlp::new(vec![LayerSpec::new(self.x_dim, self.rep_dim, self.backbone_activation)])
    }

    fn head(&self) -> Result<Mlp> {
        if self.classes < 2 {
            return Err(config("need at least two classes"));
        }
        Mlp::new(vec![LayerSpec::new(
            self.rep_dim + self.z_dim,
            self.classes,
            Activation::Softmax,
        )])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FusionRepr", into = "FusionRepr")]
pub struct FusionNet {
    arch: FusionArch,
    backbone: Mlp,
    head: Mlp,
    pub params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FusionRepr {
    arch: FusionArch,
    params: Vec<f64>,
}

impl TryFrom<FusionRepr> for FusionNet {
    type Error = crate::Error;

    fn try_from(r: FusionRepr) -> Result<Self> {
        FusionNet::with_params(r.arch, r.params)
    }
}

impl From<FusionNet> for FusionRepr {
    fn from(n: FusionNet) -> Self {
        FusionRepr {
            arch: n.arch,
            params: n.params,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionCache {
    pub backbone: ForwardCache,
    pub head: ForwardCache,
}

impl FusionCache {
    /// Softmax outputs, row-major `n x classes`.
    pub fn probs(&self) -> &[f64] {
        self.head.output()
    }
}

impl FusionNet {
    pub fn new(arch: FusionArch, seed: u64) -> Result<Self> {
        let backbone = arch.backbone()?;
        let head = arch.head()?;
        let mut rng = rng::derived_rng(seed, &[tag::INIT]);
        let mut params = backbone.init(&mut rng);
        params.extend(head.init(&mut rng));
        Ok(Self {
            arch,
            backbone,
            head,
            params,
        })
    }

    pub fn with_params(arch: FusionArch, params: Vec<f64>) -> Result<Self> {
        let backbone = arch.backbone()?;
        let head = arch.head()?;
        check_dim("fusion parameters", backbone.num_params() + head.num_params(), params.len())?;
        Ok(Self {
            arch,
            backbone,
            head,
            params,
        })
    }

    pub fn arch(&self) -> &FusionArch {
        &self.arch
    }

    pub fn backbone(&self) -> &Mlp {
        &self.backbone
    }

    pub fn head(&self) -> &Mlp {
        &self.head
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    fn split(&self) -> (&[f64], &[f64]) {
        self.params.split_at(self.backbone.num_params())
    }

    /// Forward pass on a batch; `x` is `n x x_dim`, `z` is `n x z_dim`.
    pub fn forward(&self, x: &[f64], z: &[f64], n: usize) -> Result<FusionCache> {
        check_dim("fusion z batch", n * self.arch.z_dim, z.len())?;
        let (pb, ph) = self.split();
        let backbone = self.backbone.forward(pb, x, n)?;
        let rep = backbone.output();
        let r = self.arch.rep_dim;
        let zd = self.arch.z_dim;
        let mut fused = Vec::with_capacity(n * (r + zd));
        for i in 0..n {
            fused.extend_from_slice(&rep[i * r..(i + 1) * r]);
            fused.extend_from_slice(&z[i * zd..(i + 1) * zd]);
        }
        let head = self.head.forward(ph, &fused, n)?;
        Ok(FusionCache { backbone, head })
    }

    /// Accumulates into `grads` the parameter gradient given the gradient
    /// with respect to the head logits.
    pub fn backward(&self, cache: &FusionCache, grad_logits: &[f64], grads: &mut [f64]) -> Result<()> {
        check_dim("fusion gradient buffer", self.params.len(), grads.len())?;
        let (pb, ph) = self.split();
        let (gb, gh) = grads.split_at_mut(self.backbone.num_params());
        let d_fused = self.head.backward(ph, &cache.head, grad_logits, GradAt::Logits, gh)?;
        let n = cache.head.n;
        let r = self.arch.rep_dim;
        let w = r + self.arch.z_dim;
        let mut d_rep = vec![0.0; n * r];
        for i in 0..n {
            d_rep[i * r..(i + 1) * r].copy_from_slice(&d_fused[i * w..i * w + r]);
        }
        self.backbone
            .backward(pb, &cache.backbone, &d_rep, GradAt::Output, gb)?;
        Ok(())
    }

    /// Softmax output for one `(x, z)`.
    pub fn probs(&self, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x, z, 1)?.probs().to_vec())
    }
}

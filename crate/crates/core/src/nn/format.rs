//! Portable parameter format: a versioned flat list of named arrays.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{FusionArch, FusionNet, Mlp, MlpParams};
use crate::error::{config, Result};

pub const PARAM_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub version: u32,
    pub arrays: Vec<NamedArray>,
}

fn push_mlp(out: &mut Vec<NamedArray>, prefix: &str, arch: &Mlp, params: &[f64]) {
    for (l, spec) in arch.layers().iter().enumerate() {
        let (w, b) = arch.layer_params(params, l);
        out.push(NamedArray {
            name: alloc::format!("{prefix}.{l}.weight"),
            shape: alloc::vec![spec.out_dim, spec.in_dim],
            data: w.to_vec(),
        });
        out.push(NamedArray {
            name: alloc::format!("{prefix}.{l}.bias"),
            shape: alloc::vec![spec.out_dim],
            data: b.to_vec(),
        });
    }
}

fn take_mlp(set: &ParamSet, prefix: &str, arch: &Mlp, out: &mut Vec<f64>) -> Result<()> {
    for (l, spec) in arch.layers().iter().enumerate() {
        for (suffix, shape) in [
            ("weight", alloc::vec![spec.out_dim, spec.in_dim]),
            ("bias", alloc::vec![spec.out_dim]),
        ] {
            let name = alloc::format!("{prefix}.{l}.{suffix}");
            let a = set
                .arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| config(alloc::format!("missing array `{name}`")))?;
            if a.shape != shape || a.data.len() != shape.iter().product::<usize>() {
                return Err(config(alloc::format!("array `{name}` has the wrong shape")));
            }
            out.extend_from_slice(&a.data);
        }
    }
    Ok(())
}

impl ParamSet {
    fn check_version(&self) -> Result<()> {
        if self.version != PARAM_FORMAT_VERSION {
            return Err(config(alloc::format!("unsupported parameter format version {}", self.version)));
        }
        Ok(())
    }

    pub fn from_mlp(p: &MlpParams) -> Self {
        let mut arrays = Vec::new();
        push_mlp(&mut arrays, "mlp", &p.arch, &p.values);
        Self {
            version: PARAM_FORMAT_VERSION,
            arrays,
        }
    }

    pub fn to_mlp(&self, arch: Mlp) -> Result<MlpParams> {
        self.check_version()?;
        let mut values = Vec::with_capacity(arch.num_params());
        take_mlp(self, "mlp", &arch, &mut values)?;
        Ok(MlpParams { arch, values })
    }

    pub fn from_fusion(net: &FusionNet) -> Self {
        let mut arrays = Vec::new();
        let nb = net.backbone().num_params();
        push_mlp(&mut arrays, "backbone", net.backbone(), &net.params[..nb]);
        push_mlp(&mut arrays, "head", net.head(), &net.params[nb..]);
        Self {
            version: PARAM_FORMAT_VERSION,
            arrays,
        }
    }

    pub fn to_fusion(&self, arch: FusionArch) -> Result<FusionNet> {
        self.check_version()?;
        let shell = FusionNet::new(arch, 0)?;
        let mut values = Vec::with_capacity(shell.num_params());
        take_mlp(self, "backbone", shell.backbone(), &mut values)?;
        take_mlp(self, "head", shell.head(), &mut values)?;
        FusionNet::with_params(arch, values)
    }
}

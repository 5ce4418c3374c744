//! Low-rank adapters: `h = W₀x + s·B(Ax)` on frozen linear layers.

use std::collections::BTreeMap;

use rand::Rng;

use super::ModelConfig;
use crate::error::{ensure, Error, Result};
use crate::numerics::{gemm, MatRef, Tensor};

/// Projection kinds that carry an adapter in every block.
pub const SITE_KINDS: [&str; 6] = ["q", "k", "v", "o", "ff1", "ff2"];

/// `(site id, d_in, d_out)` for every adapted projection of a model.
pub fn lora_sites(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let (d, ff) = (cfg.hidden_dim, cfg.ff_dim());
    let mut out = Vec::with_capacity(cfg.num_layers * SITE_KINDS.len());
    for layer in 0..cfg.num_layers {
        for kind in SITE_KINDS {
            let (din, dout) = match kind {
                "ff1" => (d, ff),
                "ff2" => (ff, d),
                _ => (d, d),
            };
            out.push((format!("blocks.{layer}.{kind}"), din, dout));
        }
    }
    out
}

/// Factor pair of one site: `A` is `r×d_in`, `B` is `d_out×r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraPair {
    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    fn check(&self, site: &str) -> Result<()> {
        let (sa, sb) = (self.a.shape(), self.b.shape());
        ensure!(sa.len() == 2 && sb.len() == 2, "site {site}: factors must be matrices");
        if sa[0] != sb[1] {
            return Err(Error::Contract(format!(
                "site {site}: rank of A ({}) and B ({}) disagree",
                sa[0], sb[1]
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub task: String,
    pub rank: usize,
    pub scale: f32,
    pub sites: BTreeMap<String, LoraPair>,
}

impl LoraAdapter {
    /// Fresh adapter with Gaussian `A` and zero `B`, so it starts as the identity edit.
    pub fn new(task: impl Into<String>, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let r = cfg.lora_rank;
        let sites = lora_sites(cfg)
            .into_iter()
            .map(|(site, din, dout)| {
                let a = Tensor::randn([r, din], 1.0 / (din as f32).sqrt(), rng);
                let b = Tensor::zeros([dout, r]);
                (site, LoraPair { a, b })
            })
            .collect();
        Self {
            task: task.into(),
            rank: r,
            scale: cfg.lora_scale,
            sites,
        }
    }

    pub fn from_sites(task: impl Into<String>, scale: f32, sites: BTreeMap<String, LoraPair>) -> Result<Self> {
        ensure!(!sites.is_empty(), "adapter without sites");
        for (name, pair) in &sites {
            pair.check(name)?;
        }
        let rank = sites.values().next().map(LoraPair::rank).unwrap_or(0);
        Ok(Self {
            task: task.into(),
            rank,
            scale,
            sites,
        })
    }

    pub fn num_params(&self) -> usize {
        self.sites.values().map(|p| p.a.numel() + p.b.numel()).sum()
    }

    /// Checks that every site exists in `cfg` with matching dimensions.
    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        let expected: BTreeMap<String, (usize, usize)> =
            lora_sites(cfg).into_iter().map(|(s, i, o)| (s, (i, o))).collect();
        if expected.len() != self.sites.len() || !expected.keys().eq(self.sites.keys()) {
            return Err(Error::dimension(format!(
                "adapter '{}' targets {} sites, model has {}",
                self.task,
                self.sites.len(),
                expected.len()
            )));
        }
        for (site, pair) in &self.sites {
            pair.check(site)?;
            let (din, dout) = expected[site];
            if pair.d_in() != din || pair.d_out() != dout {
                return Err(Error::dimension(format!(
                    "site {site}: adapter is {}→{}, model is {din}→{dout}",
                    pair.d_in(),
                    pair.d_out()
                )));
            }
        }
        Ok(())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (String, &mut Tensor)> {
        self.sites.iter_mut().flat_map(|(site, pair)| {
            [
                (format!("lora.{site}.a"), &mut pair.a),
                (format!("lora.{site}.b"), &mut pair.b),
            ]
        })
    }

    pub fn tensors(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.sites.iter().flat_map(|(site, pair)| {
            [(format!("lora.{site}.a"), &pair.a), (format!("lora.{site}.b"), &pair.b)]
        })
    }

    pub fn set_trainable(&mut self, on: bool) {
        for (_, t) in self.tensors_mut() {
            t.set_requires_grad(on);
        }
    }
}

/// Several adapters folded into one: factors are stacked along the rank axis
/// so that `B_cat·A_cat·x = Σᵢ sᵢ·Bᵢ·Aᵢ·x`.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedAdapter {
    adapter: LoraAdapter,
    pub sources: Vec<String>,
}

impl MergedAdapter {
    pub fn as_adapter(&self) -> &LoraAdapter {
        &self.adapter
    }

    pub fn into_adapter(self) -> LoraAdapter {
        self.adapter
    }
}

pub fn lora_merge(adapters: &[LoraAdapter]) -> Result<MergedAdapter> {
    ensure!(!adapters.is_empty(), "nothing to merge");
    let first = &adapters[0];
    for other in &adapters[1..] {
        if !first.sites.keys().eq(other.sites.keys()) {
            return Err(Error::Contract(format!(
                "adapters '{}' and '{}' target different sites",
                first.task, other.task
            )));
        }
    }
    // With a common scale the factors are stacked unchanged; otherwise each
    // scale is folded into its A.
    let common = adapters.iter().all(|a| a.scale == first.scale);
    let mut sites = BTreeMap::new();
    for site in first.sites.keys() {
        let pairs: Vec<(&LoraPair, f32)> = adapters.iter().map(|a| (&a.sites[site], a.scale)).collect();
        let (din, dout) = (pairs[0].0.d_in(), pairs[0].0.d_out());
        for (p, _) in &pairs {
            p.check(site)?;
            if p.d_in() != din || p.d_out() != dout {
                return Err(Error::Contract(format!("site {site}: adapter dimensions disagree")));
            }
        }
        let total: usize = pairs.iter().map(|(p, _)| p.rank()).sum();
        let mut a = Vec::with_capacity(total * din);
        for (p, s) in &pairs {
            if common {
                a.extend_from_slice(p.a.data());
            } else {
                a.extend(p.a.data().iter().map(|v| v * s));
            }
        }
        let mut b = vec![0.0; dout * total];
        let mut offset = 0;
        for (p, _) in &pairs {
            let r = p.rank();
            for row in 0..dout {
                b[row * total + offset..row * total + offset + r].copy_from_slice(&p.b.data()[row * r..(row + 1) * r]);
            }
            offset += r;
        }
        sites.insert(
            site.clone(),
            LoraPair {
                a: Tensor::new([total, din], a)?,
                b: Tensor::new([dout, total], b)?,
            },
        );
    }
    let task = adapters.iter().map(|a| a.task.as_str()).collect::<Vec<_>>().join("+");
    let scale = if common { first.scale } else { 1.0 };
    Ok(MergedAdapter {
        adapter: LoraAdapter {
            task,
            rank: adapters.iter().map(|a| a.rank).sum(),
            scale,
            sites,
        },
        sources: adapters.iter().map(|a| a.task.clone()).collect(),
    })
}

/// `h = W₀x + scale·B(Ax)` for a batch of row vectors `x` (`[n, d_in]`),
/// with `W₀` stored `d_out×d_in`.
pub fn lora_apply(x: &[f32], w0: &Tensor, pair: &LoraPair, scale: f32) -> Result<Vec<f32>> {
    pair.check("lora_apply")?;
    let ws = w0.shape();
    ensure!(ws.len() == 2, "W₀ must be a matrix");
    let (dout, din) = (ws[0], ws[1]);
    if pair.d_in() != din || pair.d_out() != dout {
        return Err(Error::dimension(format!(
            "W₀ is {din}→{dout}, adapter is {}→{}",
            pair.d_in(),
            pair.d_out()
        )));
    }
    ensure!(pair.rank() <= din.min(dout), "rank {} exceeds layer width", pair.rank());
    ensure!(x.len() % din == 0, "input length {} is not a multiple of {din}", x.len());
    let n = x.len() / din;
    let r = pair.rank();
    let mut h = vec![0.0; n * dout];
    gemm(MatRef::new(x, n, din, false), MatRef::new(w0.data(), dout, din, true), &mut h, false);
    let mut ax = vec![0.0; n * r];
    gemm(MatRef::new(x, n, din, false), MatRef::new(pair.a.data(), r, din, true), &mut ax, false);
    let mut bax = vec![0.0; n * dout];
    gemm(MatRef::new(&ax, n, r, false), MatRef::new(pair.b.data(), dout, r, true), &mut bax, false);
    for (o, d) in h.iter_mut().zip(&bax) {
        *o += scale * d;
    }
    Ok(h)
}

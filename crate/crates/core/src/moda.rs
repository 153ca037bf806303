//! Modality-gated mixtures of low-rank experts, and plain LoRA.
//!
//! A MoDA adapter splits a rank-`r` update into `N_e` experts of rank
//! `r / N_e`. Each modality owns a learned embedding that a linear gate maps
//! to expert weights, so for input rows `x` of modality `m`:
//!
//! ```text
//! ω^m = softmax(Emb_m · G + g)
//! h   = x W_0 + Σ_i ω^m_i (x B_i) A_i
//! ```
//!
//! Row-vector convention: `W_0` is `d_in x d_out`, `B_i` is `d_in x r_e`
//! and `A_i` is `r_e x d_out`. No `α / r` scaling is applied.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{AdapterSite, FrozenEncoder, Modality};
use crate::error::{Result, SdaError};
use crate::numerics::{Matrix, ParamSet, Tape, Var};

/// Standard deviation of the `A` initializer.
pub const A_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateActivation {
    /// Convex expert weights.
    Softmax,
    /// Raw gate outputs, unconstrained.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Moda,
    Lora,
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterKind::Moda => "moda",
            AdapterKind::Lora => "lora",
        })
    }
}

impl FromStr for AdapterKind {
    type Err = SdaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moda" => Ok(AdapterKind::Moda),
            "lora" => Ok(AdapterKind::Lora),
            other => Err(SdaError::Config(format!(
                "unknown adapter kind `{other}` (expected moda or lora)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModaConfig {
    /// Total rank `r`.
    pub rank: usize,
    /// Expert count `N_e`; must divide `rank`.
    pub experts: usize,
    /// Modality-embedding width `d_g`.
    pub gate_dim: usize,
    pub gate_activation: GateActivation,
}

impl Default for ModaConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            experts: 4,
            gate_dim: 8,
            gate_activation: GateActivation::Softmax,
        }
    }
}

impl ModaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.experts == 0 || self.gate_dim == 0 {
            return Err(SdaError::Config(
                "adapter rank, experts and gate_dim must be >= 1".into(),
            ));
        }
        if self.rank % self.experts != 0 {
            return Err(SdaError::Config(format!(
                "expert count {} does not divide rank {}",
                self.experts, self.rank
            )));
        }
        Ok(())
    }

    pub fn expert_rank(&self) -> usize {
        self.rank / self.experts
    }
}

/// One low-rank expert `B A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub b: Matrix,
    pub a: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModaAdapter {
    d_in: usize,
    d_out: usize,
    pub experts: Vec<Expert>,
    /// `d_g x N_e`.
    pub gate_weight: Matrix,
    /// `1 x N_e`.
    pub gate_bias: Matrix,
    /// `1 x d_g` per registered modality.
    pub modality_embeddings: BTreeMap<Modality, Matrix>,
    pub activation: GateActivation,
}

impl ModaAdapter {
    /// Zero `B`, small Gaussian `A`, zero gate (uniform routing), standard
    /// normal modality embeddings.
    pub fn new(
        d_in: usize,
        d_out: usize,
        config: &ModaConfig,
        modalities: &[Modality],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let r_e = config.expert_rank();
        let experts = (0..config.experts)
            .map(|_| Expert {
                b: Matrix::zeros(d_in, r_e),
                a: Matrix::randn(r_e, d_out, A_INIT_STD, rng),
            })
            .collect();
        let modality_embeddings = modalities
            .iter()
            .map(|&m| (m, Matrix::randn(1, config.gate_dim, 1.0, rng)))
            .collect();
        Ok(Self {
            d_in,
            d_out,
            experts,
            gate_weight: Matrix::zeros(config.gate_dim, config.experts),
            gate_bias: Matrix::zeros(1, config.experts),
            modality_embeddings,
            activation: config.gate_activation,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn rank(&self) -> usize {
        self.experts.iter().map(|e| e.b.cols()).sum()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d_in, self.d_out)
    }

    fn embedding(&self, modality: Modality) -> Result<&Matrix> {
        self.modality_embeddings
            .get(&modality)
            .ok_or_else(|| SdaError::UnknownModality {
                got: modality.to_string(),
                registered: self
                    .modality_embeddings
                    .keys()
                    .map(|m| m.as_str())
                    .collect::<Vec<_>>()
                    .join(", "),
            })
    }

    fn gate_on_tape(&self, tape: &Tape, prefix: &str, modality: Modality) -> Result<Var> {
        self.embedding(modality)?;
        let emb = tape.param(
            &format!("{prefix}.emb.{modality}"),
            &self.modality_embeddings[&modality],
        );
        let w = tape.param(&format!("{prefix}.gate.weight"), &self.gate_weight);
        let b = tape.param(&format!("{prefix}.gate.bias"), &self.gate_bias);
        let logits = tape.add(tape.matmul(emb, w), b);
        Ok(match self.activation {
            GateActivation::Softmax => tape.softmax_rows(logits),
            GateActivation::Identity => logits,
        })
    }

    /// Expert weights `ω^m`.
    pub fn gate_weights(&self, modality: Modality) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let w = self.gate_on_tape(&tape, "gate", modality)?;
        let out = tape.value(w).row(0).to_vec();
        Ok(out)
    }

    /// Records `Σ_i ω^m_i (x B_i) A_i` on the tape, with parameters named
    /// under `prefix`.
    pub fn delta_on_tape(&self, tape: &Tape, prefix: &str, x: Var, modality: Modality) -> Result<Var> {
        check_width(prefix, self.d_in, tape.shape(x).1)?;
        let omega = self.gate_on_tape(tape, prefix, modality)?;
        let mut total: Option<Var> = None;
        for (i, e) in self.experts.iter().enumerate() {
            let b = tape.param(&format!("{prefix}.expert{i}.B"), &e.b);
            let a = tape.param(&format!("{prefix}.expert{i}.A"), &e.a);
            let path = tape.matmul(tape.matmul(x, b), a);
            let weighted = tape.scale_by(path, tape.element(omega, 0, i));
            total = Some(match total {
                Some(t) => tape.add(t, weighted),
                None => weighted,
            });
        }
        Ok(total.expect("at least one expert"))
    }

    /// `h = x W_0 + Σ_i ω^m_i x B_i A_i` for each row of `x`.
    pub fn forward(&self, site: &AdapterSite<'_>, x: &Matrix, modality: Modality) -> Result<Matrix> {
        forward_with(site, x, |tape, xv| self.delta_on_tape(tape, site.name, xv, modality))
    }

    /// `ΔW^m = Σ_i ω^m_i B_i A_i`.
    pub fn delta_weight(&self, modality: Modality) -> Result<Matrix> {
        let omega = self.gate_weights(modality)?;
        let mut out = Matrix::zeros(self.d_in, self.d_out);
        for (w, e) in omega.iter().zip(&self.experts) {
            out.add_scaled_assign_unchecked(&e.b.matmul_unchecked(&e.a), *w);
        }
        Ok(out)
    }

    /// `(expert_params, gate_params)`.
    pub fn param_count(&self) -> (usize, usize) {
        let experts = self.experts.iter().map(|e| e.b.len() + e.a.len()).sum();
        let gate = self.gate_weight.len()
            + self.gate_bias.len()
            + self.modality_embeddings.values().map(Matrix::len).sum::<usize>();
        (experts, gate)
    }

    fn params_into(&self, prefix: &str, out: &mut ParamSet) {
        for (i, e) in self.experts.iter().enumerate() {
            out.insert(format!("{prefix}.expert{i}.B"), e.b.clone());
            out.insert(format!("{prefix}.expert{i}.A"), e.a.clone());
        }
        out.insert(format!("{prefix}.gate.weight"), self.gate_weight.clone());
        out.insert(format!("{prefix}.gate.bias"), self.gate_bias.clone());
        for (m, emb) in &self.modality_embeddings {
            out.insert(format!("{prefix}.emb.{m}"), emb.clone());
        }
    }

    fn slots_mut<'a>(&'a mut self, prefix: &str) -> Vec<(String, &'a mut Matrix)> {
        let mut out = Vec::new();
        for (i, e) in self.experts.iter_mut().enumerate() {
            out.push((format!("{prefix}.expert{i}.B"), &mut e.b));
            out.push((format!("{prefix}.expert{i}.A"), &mut e.a));
        }
        out.push((format!("{prefix}.gate.weight"), &mut self.gate_weight));
        out.push((format!("{prefix}.gate.bias"), &mut self.gate_bias));
        for (m, emb) in self.modality_embeddings.iter_mut() {
            out.push((format!("{prefix}.emb.{m}"), emb));
        }
        out
    }
}

/// Plain rank-`r` update `ΔW = B A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub b: Matrix,
    pub a: Matrix,
}

impl LoraAdapter {
    pub fn new(d_in: usize, d_out: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            b: Matrix::zeros(d_in, rank),
            a: Matrix::randn(rank, d_out, A_INIT_STD, rng),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    pub fn delta_on_tape(&self, tape: &Tape, prefix: &str, x: Var) -> Result<Var> {
        check_width(prefix, self.b.rows(), tape.shape(x).1)?;
        let b = tape.param(&format!("{prefix}.lora.B"), &self.b);
        let a = tape.param(&format!("{prefix}.lora.A"), &self.a);
        Ok(tape.matmul(tape.matmul(x, b), a))
    }

    pub fn forward(&self, site: &AdapterSite<'_>, x: &Matrix) -> Result<Matrix> {
        forward_with(site, x, |tape, xv| self.delta_on_tape(tape, site.name, xv))
    }

    pub fn delta_weight(&self) -> Matrix {
        self.b.matmul_unchecked(&self.a)
    }

    pub fn param_count(&self) -> usize {
        self.b.len() + self.a.len()
    }
}

fn check_width(layer: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(SdaError::Dimension {
            layer: layer.to_string(),
            expected,
            got,
        });
    }
    Ok(())
}

fn forward_with(
    site: &AdapterSite<'_>,
    x: &Matrix,
    delta: impl FnOnce(&Tape, Var) -> Result<Var>,
) -> Result<Matrix> {
    check_width(site.name, site.d_in(), x.cols())?;
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w0 = tape.constant(site.weight.clone());
    let base = tape.matmul(xv, w0);
    let d = delta(&tape, xv)?;
    let h = tape.add(base, d);
    let out = tape.value(h).clone();
    Ok(out)
}

/// The adapter hosted at one site.
#[derive(Debug, Clone, PartialEq)]
pub enum SiteAdapter {
    Moda(ModaAdapter),
    Lora(LoraAdapter),
}

impl SiteAdapter {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            SiteAdapter::Moda(m) => m.dims(),
            SiteAdapter::Lora(l) => l.dims(),
        }
    }

    pub fn delta_on_tape(&self, tape: &Tape, prefix: &str, x: Var, modality: Modality) -> Result<Var> {
        match self {
            SiteAdapter::Moda(m) => m.delta_on_tape(tape, prefix, x, modality),
            SiteAdapter::Lora(l) => l.delta_on_tape(tape, prefix, x),
        }
    }

    pub fn delta_weight(&self, modality: Modality) -> Result<Matrix> {
        match self {
            SiteAdapter::Moda(m) => m.delta_weight(modality),
            SiteAdapter::Lora(l) => Ok(l.delta_weight()),
        }
    }

    /// Name of the `B` matrix inspected by gradient diagnostics: the first
    /// expert for MoDA, the only `B` for LoRA.
    pub fn probe_b_name(&self, prefix: &str) -> String {
        match self {
            SiteAdapter::Moda(_) => format!("{prefix}.expert0.B"),
            SiteAdapter::Lora(_) => format!("{prefix}.lora.B"),
        }
    }

    fn params_into(&self, prefix: &str, out: &mut ParamSet) {
        match self {
            SiteAdapter::Moda(m) => m.params_into(prefix, out),
            SiteAdapter::Lora(l) => {
                out.insert(format!("{prefix}.lora.B"), l.b.clone());
                out.insert(format!("{prefix}.lora.A"), l.a.clone());
            }
        }
    }

    fn slots_mut<'a>(&'a mut self, prefix: &str) -> Vec<(String, &'a mut Matrix)> {
        match self {
            SiteAdapter::Moda(m) => m.slots_mut(prefix),
            SiteAdapter::Lora(l) => vec![
                (format!("{prefix}.lora.B"), &mut l.b),
                (format!("{prefix}.lora.A"), &mut l.a),
            ],
        }
    }
}

/// Adapters keyed by site name, shared by both towers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    kind: AdapterKind,
    config: ModaConfig,
    sites: BTreeMap<String, SiteAdapter>,
}

impl AdapterSet {
    /// Fresh adapters on `site_names`, drawn from `seed`.
    pub fn init(
        encoder: &FrozenEncoder,
        site_names: &[String],
        kind: AdapterKind,
        config: &ModaConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sites = BTreeMap::new();
        for name in site_names {
            let site = encoder
                .site(Modality::Text, name)
                .ok_or_else(|| SdaError::NotFound(format!("adapter site `{name}`")))?;
            let adapter = match kind {
                AdapterKind::Moda => SiteAdapter::Moda(ModaAdapter::new(
                    site.d_in(),
                    site.d_out(),
                    config,
                    &Modality::ALL,
                    &mut rng,
                )?),
                AdapterKind::Lora => {
                    SiteAdapter::Lora(LoraAdapter::new(site.d_in(), site.d_out(), config.rank, &mut rng))
                }
            };
            if sites.insert(name.clone(), adapter).is_some() {
                return Err(SdaError::Config(format!("site `{name}` listed twice")));
            }
        }
        Ok(Self {
            kind,
            config: config.clone(),
            sites,
        })
    }

    pub fn kind(&self) -> AdapterKind {
        self.kind
    }

    pub fn config(&self) -> &ModaConfig {
        &self.config
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &SiteAdapter)> {
        self.sites.iter()
    }

    pub fn get(&self, site: &str) -> Option<&SiteAdapter> {
        self.sites.get(site)
    }

    pub fn get_mut(&mut self, site: &str) -> Option<&mut SiteAdapter> {
        self.sites.get_mut(site)
    }

    pub fn site_names(&self) -> Vec<String> {
        self.sites.keys().cloned().collect()
    }

    /// The adapter contribution at `site`, or `None` when no adapter is
    /// attached there.
    pub fn forward_delta(&self, tape: &Tape, site: &str, x: Var, modality: Modality) -> Result<Option<Var>> {
        match self.sites.get(site) {
            Some(a) => a.delta_on_tape(tape, site, x, modality).map(Some),
            None => Ok(None),
        }
    }

    /// All trainable values under their tape names.
    pub fn params(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, a) in &self.sites {
            a.params_into(name, &mut out);
        }
        out
    }

    /// Mutable access to every trainable matrix under its tape name.
    pub fn slots_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        self.sites
            .iter_mut()
            .flat_map(|(name, a)| a.slots_mut(name))
            .collect()
    }

    /// Overwrites parameters from `params`; every slot must be present with
    /// matching shape.
    pub fn load_params(&mut self, params: &ParamSet) -> Result<()> {
        for (name, slot) in self.slots_mut() {
            let value = params
                .get(&name)
                .ok_or_else(|| SdaError::NotFound(format!("parameter `{name}`")))?;
            if value.shape() != slot.shape() {
                return Err(SdaError::Shape(format!(
                    "parameter `{name}`: stored {:?}, expected {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value.clone();
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params().values().map(Matrix::len).sum()
    }
}

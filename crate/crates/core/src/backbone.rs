//! Frozen dual-tower encoder.
//!
//! Each modality has its own tower with independently drawn frozen weights:
//!
//! ```text
//! h0      = X · W_in                                  (tokens x hidden)
//! h_{k+1} = h_k + o(tanh(v(tanh(k(tanh(q(h_k)))))))   for each block k
//! e       = normalize(mean_tokens(h_L) · W_proj)      (d_m)
//! ```
//!
//! where `q`, `k`, `v`, `o` are the linear layers `layer{k}.q_proj` etc.
//! The projection layers are the adapter sites. Adapters are keyed by site
//! name, so one adapter serves the same-named layer of both towers.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SdaError};
use crate::moda::AdapterSet;
use crate::numerics::{Matrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Text, Modality::Image];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }

    fn tower_index(self) -> usize {
        match self {
            Modality::Text => 0,
            Modality::Image => 1,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = SdaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            other => Err(SdaError::UnknownModality {
                got: other.to_string(),
                registered: "text, image".to_string(),
            }),
        }
    }
}

/// Projection kinds inside a block, in evaluation order.
pub const PROJ_KINDS: [&str; 4] = ["q_proj", "k_proj", "v_proj", "o_proj"];

pub fn site_name(layer: usize, kind: &str) -> String {
    format!("layer{layer}.{kind}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub seed: u64,
    pub layers: usize,
    pub hidden_dim: usize,
    pub token_count: usize,
    pub feature_width: usize,
    pub embed_dim: usize,
    pub normalize_embeddings: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            layers: 2,
            hidden_dim: 64,
            token_count: 8,
            feature_width: 16,
            embed_dim: 32,
            normalize_embeddings: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden_dim", self.hidden_dim),
            ("token_count", self.token_count),
            ("feature_width", self.feature_width),
            ("embed_dim", self.embed_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SdaError::Config(format!("encoder.{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Tower {
    input_proj: Matrix,
    /// `blocks[k][j]` is the weight of `site_name(k, PROJ_KINDS[j])`.
    blocks: Vec<[Matrix; 4]>,
    output_proj: Matrix,
}

impl Tower {
    fn new(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.hidden_dim;
        let input_proj = Matrix::randn(cfg.feature_width, h, 1.0 / (cfg.feature_width as f64).sqrt(), rng);
        let std = 1.0 / (h as f64).sqrt();
        let blocks = (0..cfg.layers)
            .map(|_| {
                [
                    Matrix::randn(h, h, std, rng),
                    Matrix::randn(h, h, std, rng),
                    Matrix::randn(h, h, std, rng),
                    Matrix::randn(h, h, std, rng),
                ]
            })
            .collect();
        let output_proj = Matrix::randn(h, cfg.embed_dim, std, rng);
        Self {
            input_proj,
            blocks,
            output_proj,
        }
    }
}

/// A projection layer that can host an adapter.
#[derive(Debug, Clone, Copy)]
pub struct AdapterSite<'a> {
    pub name: &'a str,
    pub modality: Modality,
    /// Frozen weight, `d_in x d_out` (row-vector convention `h = x W_0`).
    pub weight: &'a Matrix,
}

impl AdapterSite<'_> {
    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }
}

/// The frozen dual-tower encoder.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    config: EncoderConfig,
    towers: [Tower; 2],
    site_names: Vec<String>,
}

impl FrozenEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let text = Tower::new(&config, &mut rng);
        let image = Tower::new(&config, &mut rng);
        let site_names = (0..config.layers)
            .flat_map(|k| PROJ_KINDS.iter().map(move |kind| site_name(k, kind)))
            .collect();
        Ok(Self {
            config,
            towers: [text, image],
            site_names,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Site names in evaluation order (identical for both towers).
    pub fn site_names(&self) -> &[String] {
        &self.site_names
    }

    /// Adapter sites of one tower, in evaluation order.
    pub fn list_sites(&self, modality: Modality) -> Vec<AdapterSite<'_>> {
        let tower = &self.towers[modality.tower_index()];
        self.site_names
            .iter()
            .enumerate()
            .map(|(i, name)| AdapterSite {
                name,
                modality,
                weight: &tower.blocks[i / 4][i % 4],
            })
            .collect()
    }

    pub fn site(&self, modality: Modality, name: &str) -> Option<AdapterSite<'_>> {
        self.list_sites(modality).into_iter().find(|s| s.name == name)
    }

    /// Names of the `q_proj` and `k_proj` sites of the last block.
    pub fn last_layer_qk_sites(&self) -> Vec<String> {
        let last = self.config.layers - 1;
        vec![site_name(last, "q_proj"), site_name(last, "k_proj")]
    }

    /// SHA-256 over every frozen weight.
    pub fn weight_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for tower in &self.towers {
            let mats = std::iter::once(&tower.input_proj)
                .chain(tower.blocks.iter().flatten())
                .chain(std::iter::once(&tower.output_proj));
            for m in mats {
                for v in m.data() {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Checks that every adapter in `adapters` fits the site it is keyed by.
    pub fn validate_adapters(&self, adapters: &AdapterSet) -> Result<()> {
        for (name, adapter) in adapters.iter() {
            let site = self
                .site(Modality::Text, name)
                .ok_or_else(|| SdaError::NotFound(format!("adapter site `{name}`")))?;
            let (d_in, d_out) = adapter.dims();
            if d_in != site.d_in() {
                return Err(SdaError::Dimension {
                    layer: name.clone(),
                    expected: site.d_in(),
                    got: d_in,
                });
            }
            if d_out != site.d_out() {
                return Err(SdaError::Dimension {
                    layer: name.clone(),
                    expected: site.d_out(),
                    got: d_out,
                });
            }
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &Matrix) -> Result<()> {
        if tokens.cols() != self.config.feature_width {
            return Err(SdaError::Dimension {
                layer: "input_proj".into(),
                expected: self.config.feature_width,
                got: tokens.cols(),
            });
        }
        if tokens.rows() != self.config.token_count {
            return Err(SdaError::Dimension {
                layer: "token_pool".into(),
                expected: self.config.token_count,
                got: tokens.rows(),
            });
        }
        Ok(())
    }

    /// Records the forward pass of `items` stacked token matrices on `tape`.
    ///
    /// `tokens` is `(items * token_count) x feature_width`; returns an
    /// `items x embed_dim` node. Frozen weights enter as constants, adapter
    /// parameters as named parameters.
    pub fn encode_on_tape(
        &self,
        tape: &Tape,
        tokens: Var,
        modality: Modality,
        adapters: Option<&AdapterSet>,
    ) -> Result<Var> {
        let (rows, width) = tape.shape(tokens);
        if width != self.config.feature_width {
            return Err(SdaError::Dimension {
                layer: "input_proj".into(),
                expected: self.config.feature_width,
                got: width,
            });
        }
        if rows % self.config.token_count != 0 {
            return Err(SdaError::Shape(format!(
                "{rows} token rows is not a multiple of token_count {}",
                self.config.token_count
            )));
        }
        let tower = &self.towers[modality.tower_index()];
        let w_in = tape.constant(tower.input_proj.clone());
        let mut h = tape.matmul(tokens, w_in);
        for (k, block) in tower.blocks.iter().enumerate() {
            let mut u = h;
            for (j, weight) in block.iter().enumerate() {
                let name = &self.site_names[k * 4 + j];
                let w0 = tape.constant(weight.clone());
                let mut out = tape.matmul(u, w0);
                if let Some(set) = adapters {
                    if let Some(delta) = set.forward_delta(tape, name, u, modality)? {
                        out = tape.add(out, delta);
                    }
                }
                u = if j + 1 < block.len() { tape.tanh(out) } else { out };
            }
            h = tape.add(h, u);
        }
        let pooled = tape.mean_pool(h, self.config.token_count);
        let w_out = tape.constant(tower.output_proj.clone());
        let e = tape.matmul(pooled, w_out);
        Ok(if self.config.normalize_embeddings {
            tape.l2_normalize_rows(e)
        } else {
            e
        })
    }

    /// Embedding of one item's token matrix.
    pub fn encode(
        &self,
        tokens: &Matrix,
        modality: Modality,
        adapters: Option<&AdapterSet>,
    ) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let tape = Tape::new();
        let x = tape.constant(tokens.clone());
        let e = self.encode_on_tape(&tape, x, modality, adapters)?;
        let out = tape.value(e).row(0).to_vec();
        Ok(out)
    }

    /// Embeddings of many items, one per row, each encoded independently.
    pub fn encode_many(
        &self,
        items: &[&Matrix],
        modality: Modality,
        adapters: Option<&AdapterSet>,
    ) -> Result<Matrix> {
        let mut out = Matrix::zeros(items.len(), self.config.embed_dim);
        for (i, tokens) in items.iter().enumerate() {
            let e = self.encode(tokens, modality, adapters)?;
            out.row_mut(i).copy_from_slice(&e);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moda::{AdapterKind, AdapterSet, ModaConfig};
    use crate::numerics::l2_norm;

    fn small() -> FrozenEncoder {
        FrozenEncoder::new(EncoderConfig {
            hidden_dim: 12,
            embed_dim: 6,
            token_count: 3,
            feature_width: 5,
            ..EncoderConfig::default()
        })
        .unwrap()
    }

    fn tokens(enc: &FrozenEncoder, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::randn(enc.config.token_count, enc.config.feature_width, 1.0, &mut rng)
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let enc = small();
        let x = tokens(&enc, 1);
        for m in Modality::ALL {
            let a = enc.encode(&x, m, None).unwrap();
            let b = enc.encode(&x, m, None).unwrap();
            assert_eq!(a, b);
            assert!((l2_norm(&a) - 1.0).abs() < 1e-9);
        }
        let again = small();
        assert_eq!(enc.weight_hash(), again.weight_hash());
        assert_eq!(
            enc.encode(&x, Modality::Text, None).unwrap(),
            again.encode(&x, Modality::Text, None).unwrap()
        );
    }

    #[test]
    fn towers_differ() {
        let enc = small();
        let x = tokens(&enc, 2);
        assert_ne!(
            enc.encode(&x, Modality::Text, None).unwrap(),
            enc.encode(&x, Modality::Image, None).unwrap()
        );
    }

    #[test]
    fn zero_b_adapters_are_transparent() {
        let enc = small();
        let x = tokens(&enc, 3);
        let names: Vec<String> = enc.site_names().to_vec();
        for kind in [AdapterKind::Moda, AdapterKind::Lora] {
            let set = AdapterSet::init(&enc, &names, kind, &ModaConfig { rank: 4, experts: 2, ..ModaConfig::default() }, 9).unwrap();
            for m in Modality::ALL {
                assert_eq!(
                    enc.encode(&x, m, Some(&set)).unwrap(),
                    enc.encode(&x, m, None).unwrap()
                );
            }
        }
    }

    #[test]
    fn site_listing() {
        let enc = FrozenEncoder::new(EncoderConfig::default()).unwrap();
        let sites = enc.list_sites(Modality::Text);
        assert_eq!(sites.len(), 8);
        assert_eq!(sites[0].name, "layer0.q_proj");
        assert_eq!(sites[7].name, "layer1.o_proj");
        let names: std::collections::BTreeSet<_> = sites.iter().map(|s| s.name).collect();
        assert_eq!(names.len(), 8);
        assert_eq!(
            sites.iter().filter(|s| s.name == "layer1.k_proj").count(),
            1
        );
        assert!(enc.site(Modality::Image, "layer1.k_proj").is_some());
        assert!(enc.site(Modality::Text, "layer9.q_proj").is_none());
    }

    #[test]
    fn dimension_mismatch_names_layer() {
        let enc = small();
        let bad = Matrix::zeros(3, 7);
        match enc.encode(&bad, Modality::Text, None) {
            Err(SdaError::Dimension { layer, expected, got }) => {
                assert_eq!(layer, "input_proj");
                assert_eq!((expected, got), (5, 7));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unnormalized_mode_keeps_scale() {
        let enc = FrozenEncoder::new(EncoderConfig {
            normalize_embeddings: false,
            ..small().config.clone()
        })
        .unwrap();
        let e = enc.encode(&tokens(&enc, 4), Modality::Text, None).unwrap();
        assert!((l2_norm(&e) - 1.0).abs() > 1e-6);
    }

    #[test]
    fn unknown_modality_string() {
        let err = "audio".parse::<Modality>().unwrap_err();
        assert!(err.to_string().contains("text, image"));
    }
}

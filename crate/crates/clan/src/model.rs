//! Full model: backbone + attention modules + per-branch classifier heads.
//!
//! Branches, in order: one "A{stage}" head per refined mid-level map, the
//! "G" head on the raw top-level map, and the "CLSA" head on the
//! concatenated attention-gated top maps. The gap-baseline variant drops
//! the attention modules and the CLSA branch, leaving plain global-average-
//! pooling heads on the raw maps.

use std::path::Path;

use crate::attention::{
    clca_forward, clsa_attention_map, clsa_forward, refine_top, ClcaParams, ClsaParams,
    FeatureMap, GateMode, RelationMetric, SpatialPooling,
};
use crate::backbone::{backbone_forward, BackboneConfig, BackboneWeights};
use crate::checkpoint;
use crate::error::{ClanError, Result};
use crate::init::ParamInit;
use crate::tensor::{cross_entropy, linear, Element, ResampleMode, Tensor};

/// Architecture variant: the full cross-layer attention model or the
/// global-average-pooling baseline it is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Clan,
    GapBaseline,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Clan => "clan",
            Variant::GapBaseline => "gap-baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub variant: Variant,
    pub metric: RelationMetric,
    pub pooling: SpatialPooling,
    pub gate: GateMode,
    pub upsample: ResampleMode,
    /// Embedding width per mid stage; None means channels/2 (min 1).
    pub c_int: Option<usize>,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            variant: Variant::Clan,
            metric: RelationMetric::DotProduct,
            pooling: SpatialPooling::AvgAndMax,
            gate: GateMode::Linear,
            upsample: ResampleMode::Nearest,
            c_int: None,
            num_classes: 8,
        }
    }
}

impl ModelConfig {
    fn c_int_for(&self, c_mid: usize) -> usize {
        self.c_int.unwrap_or_else(|| (c_mid / 2).max(1))
    }
}

/// One linear classifier head.
pub struct Head<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

impl<E: Element> Head<E> {
    fn new(name: &str, in_features: usize, classes: usize, init: &ParamInit) -> Result<Self> {
        Ok(Head {
            weight: init.uniform_fan_in(
                &format!("{name}.weight"),
                &[in_features, classes],
                in_features,
            )?,
            bias: Tensor::param(&[classes], vec![E::zero(); classes])?,
        })
    }

}

pub struct ClanModel<E: Element> {
    pub cfg: ModelConfig,
    pub backbone: BackboneWeights<E>,
    pub clca: Vec<ClcaParams<E>>,
    pub clsa: Vec<ClsaParams<E>>,
    pub heads: Vec<Head<E>>,
    branch_names: Vec<String>,
}

/// Per-branch logits of one forward pass.
pub struct BranchOutputs<E: Element> {
    pub names: Vec<String>,
    pub logits: Vec<Tensor<E>>,
}

/// Forward pass with the intermediate attention maps kept for export.
pub struct ForwardTrace<E: Element> {
    pub outputs: BranchOutputs<E>,
    /// CLSA attention maps per middle stage, at mid resolution, ascending
    /// stage order. Empty for the baseline variant.
    pub attention_maps: Vec<(usize, Tensor<E>)>,
}

impl<E: Element> ClanModel<E> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.backbone.validate()?;
        if cfg.num_classes < 2 {
            return Err(ClanError::config("model", "need at least two classes"));
        }
        let init = ParamInit::new(seed);
        let backbone = BackboneWeights::new(&cfg.backbone, &init)?;
        let top_stage = cfg.backbone.top_stage();
        let c_top = cfg.backbone.stage_channels_of(top_stage);

        let mut clca = Vec::new();
        let mut clsa = Vec::new();
        let mut heads = Vec::new();
        let mut branch_names = Vec::new();

        for &stage in &cfg.backbone.tap_stages {
            let c_mid = cfg.backbone.stage_channels_of(stage);
            if cfg.variant == Variant::Clan {
                clca.push(ClcaParams::new(
                    c_mid,
                    c_top,
                    cfg.c_int_for(c_mid),
                    cfg.metric,
                    cfg.upsample,
                    &init,
                    &format!("clca.s{stage}"),
                )?);
                clsa.push(ClsaParams::new(cfg.pooling, cfg.gate)?);
            }
            heads.push(Head::new(
                &format!("head.A{stage}"),
                c_mid,
                cfg.num_classes,
                &init,
            )?);
            branch_names.push(format!("A{stage}"));
        }

        heads.push(Head::new("head.G", c_top, cfg.num_classes, &init)?);
        branch_names.push("G".to_string());

        if cfg.variant == Variant::Clan {
            let clsa_in = cfg.backbone.tap_stages.len() * c_top;
            heads.push(Head::new("head.CLSA", clsa_in, cfg.num_classes, &init)?);
            branch_names.push("CLSA".to_string());
        }

        Ok(ClanModel {
            cfg,
            backbone,
            clca,
            clsa,
            heads,
            branch_names,
        })
    }

    pub fn branch_names(&self) -> &[String] {
        &self.branch_names
    }

    pub fn branch_count(&self) -> usize {
        self.branch_names.len()
    }

    /// Strip the attention modules, reusing the backbone and the A/G head
    /// weights, producing the matched gap baseline.
    pub fn to_gap_baseline(&self) -> Result<ClanModel<E>> {
        let mut cfg = self.cfg.clone();
        cfg.variant = Variant::GapBaseline;
        let base = ClanModel::new(cfg, 0)?;
        for (dst, src) in base
            .backbone
            .state_tensors()
            .iter()
            .zip(self.backbone.state_tensors().iter())
        {
            dst.1.set_data(&src.1.data());
        }
        for (dst, src) in base.heads.iter().zip(self.heads.iter()) {
            dst.weight.set_data(&src.weight.data());
            dst.bias.set_data(&src.bias.data());
        }
        Ok(base)
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<BranchOutputs<E>> {
        Ok(self.forward_trace(x)?.outputs)
    }

    pub fn forward_trace(&self, x: &Tensor<E>) -> Result<ForwardTrace<E>> {
        let mut maps = backbone_forward(x, &self.cfg.backbone, &self.backbone)?;
        let top = maps.pop().expect("backbone always emits a top map");
        let middles = maps;

        let mut branch_feats: Vec<FeatureMap<E>> = Vec::new();
        let mut attention_maps = Vec::new();

        match self.cfg.variant {
            Variant::GapBaseline => {
                branch_feats.extend(middles);
                branch_feats.push(top);
            }
            Variant::Clan => {
                let mut refined_mids = Vec::new();
                for (mid, params) in middles.iter().zip(&self.clca) {
                    refined_mids.push(clca_forward(mid, &top, params)?);
                }
                let mut gated = Vec::new();
                for (refined, params) in refined_mids.iter().zip(&self.clsa) {
                    attention_maps.push((refined.stage, clsa_attention_map(refined, params)?));
                    gated.push(clsa_forward(refined, &top, params)?);
                }
                let refined_top = refine_top(&gated, top.stage)?;
                branch_feats.extend(refined_mids);
                branch_feats.push(top);
                branch_feats.push(refined_top);
            }
        }

        let mut logits = Vec::new();
        for (feat, head) in branch_feats.iter().zip(&self.heads) {
            let pooled = feat.tensor.global_avg_pool()?;
            logits.push(linear(&pooled, &head.weight, &head.bias)?);
        }
        Ok(ForwardTrace {
            outputs: BranchOutputs {
                names: self.branch_names.clone(),
                logits,
            },
            attention_maps,
        })
    }

    /// Every tensor that defines the model state, in a fixed order.
    pub fn state_tensors(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = self.backbone.state_tensors();
        for (params, &stage) in self.clca.iter().zip(&self.cfg.backbone.tap_stages) {
            out.extend(params.state_tensors(&format!("clca.s{stage}")));
        }
        for (params, &stage) in self.clsa.iter().zip(&self.cfg.backbone.tap_stages) {
            out.extend(params.state_tensors(&format!("clsa.s{stage}")));
        }
        for (head, name) in self.heads.iter().zip(&self.branch_names) {
            out.push((format!("head.{name}.weight"), head.weight.clone()));
            out.push((format!("head.{name}.bias"), head.bias.clone()));
        }
        out
    }

    /// Tensors the optimizer updates (excludes metric-unused embeddings).
    pub fn trainable_tensors(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = self.backbone.state_tensors();
        for (params, &stage) in self.clca.iter().zip(&self.cfg.backbone.tap_stages) {
            out.extend(params.trainable_tensors(&format!("clca.s{stage}")));
        }
        for (params, &stage) in self.clsa.iter().zip(&self.cfg.backbone.tap_stages) {
            out.extend(params.trainable_tensors(&format!("clsa.s{stage}")));
        }
        for (head, name) in self.heads.iter().zip(&self.branch_names) {
            out.push((format!("head.{name}.weight"), head.weight.clone()));
            out.push((format!("head.{name}.bias"), head.bias.clone()));
        }
        out
    }

    /// Exact count of learnable scalars.
    pub fn count_parameters(&self) -> usize {
        self.trainable_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Learnable scalars in the attention modules alone.
    pub fn attention_parameter_count(&self) -> usize {
        self.clca.iter().map(|p| p.parameter_count()).sum::<usize>()
            + self.clsa.iter().map(|p| p.parameter_count()).sum::<usize>()
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.trainable_tensors() {
            t.zero_grad();
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.state_tensors())
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        let entries = checkpoint::load(path)?;
        checkpoint::restore(&entries, &self.state_tensors())
    }
}

/// The multi-branch objective: sum over branches of weighted mean
/// cross-entropy.
pub fn clan_loss<E: Element>(
    outputs: &BranchOutputs<E>,
    labels: &[usize],
    weights: &[f64],
) -> Result<Tensor<E>> {
    if weights.len() != outputs.logits.len() {
        return Err(ClanError::usage(
            "clan_loss",
            format!(
                "{} weights for {} branches",
                weights.len(),
                outputs.logits.len()
            ),
        ));
    }
    let mut total: Option<Tensor<E>> = None;
    for (logits, &w) in outputs.logits.iter().zip(weights) {
        let term = cross_entropy(logits, labels)?.scale(E::from_f64(w));
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one branch"))
}

/// Average the softmax probabilities of the selected branches and take the
/// per-sample argmax; ties break to the lowest class index.
pub fn clan_predict<E: Element>(
    outputs: &BranchOutputs<E>,
    subset: &[String],
) -> Result<Vec<usize>> {
    if subset.is_empty() {
        return Err(ClanError::usage("clan_predict", "empty branch subset"));
    }
    let mut selected = Vec::new();
    for name in subset {
        let idx = outputs
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| {
                ClanError::usage(
                    "clan_predict",
                    format!("unknown branch {name:?}; have {:?}", outputs.names),
                )
            })?;
        selected.push(idx);
    }
    let shape = outputs.logits[0].shape();
    let (batch, classes) = (shape[0], shape[1]);
    let mut mean_probs = vec![0.0f64; batch * classes];
    for &idx in &selected {
        let probs = softmax_probs(&outputs.logits[idx]);
        for (m, p) in mean_probs.iter_mut().zip(&probs) {
            *m += p;
        }
    }
    let mut preds = Vec::with_capacity(batch);
    for i in 0..batch {
        let row = &mean_probs[i * classes..(i + 1) * classes];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            // strict > keeps the lowest class index on ties
            if v > row[best] {
                best = j;
            }
        }
        preds.push(best);
    }
    Ok(preds)
}

/// Row softmax on plain data (no gradient), in f64.
fn softmax_probs<E: Element>(logits: &Tensor<E>) -> Vec<f64> {
    let shape = logits.shape();
    let (batch, classes) = (shape[0], shape[1]);
    let z = logits.data();
    let mut out = vec![0.0f64; batch * classes];
    for i in 0..batch {
        let row: Vec<f64> = z[i * classes..(i + 1) * classes]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out[i * classes + j] = e;
            sum += e;
        }
        for j in 0..classes {
            out[i * classes + j] /= sum;
        }
    }
    out
}

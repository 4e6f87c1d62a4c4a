//! Cross-layer attention modules.
//!
//! Two composable layers refine a backbone's feature pyramid in both
//! directions:
//!
//! * Cross-layer context attention (CLCA) runs self-attention over a
//!   mid-level map, but estimates the pairwise position relations from a
//!   fusion of the mid-level map with the upsampled top-level map. The
//!   value path applies to the original mid-level vectors and a residual
//!   keeps the module an identity at zero init.
//! * Cross-layer spatial attention (CLSA) builds a one-channel spatial gate
//!   from a (refined) mid-level map via channel pooling and a 3x3
//!   convolution, downsamples it to the top map's resolution, and
//!   multiplies it into the top map.

use crate::error::{ClanError, Result};
use crate::init::ParamInit;
use crate::tensor::{Element, ResampleMode, Tensor};

/// A rank-4 activation map tagged with its backbone stage.
#[derive(Debug, Clone)]
pub struct FeatureMap<E: Element> {
    pub tensor: Tensor<E>,
    /// Stage index, 1-based; the top stage is the largest.
    pub stage: usize,
    /// Number of spatial positions (height * width).
    pub spatial_positions: usize,
}

impl<E: Element> FeatureMap<E> {
    pub fn new(tensor: Tensor<E>, stage: usize) -> Result<Self> {
        let shape = tensor.shape();
        if shape.len() != 4 {
            return Err(ClanError::dimension(
                "feature_map",
                format!("expected rank 4, got {:?}", shape),
            ));
        }
        if stage == 0 {
            return Err(ClanError::usage("feature_map", "stage indices are 1-based"));
        }
        let spatial_positions = shape[2] * shape[3];
        Ok(FeatureMap {
            tensor,
            stage,
            spatial_positions,
        })
    }

    pub fn batch(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[3]
    }
}

/// Pairwise position-affinity function used by CLCA.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelationMetric {
    /// exp of raw dot products, softmax-normalized.
    Gaussian,
    /// exp of embedded dot products, softmax-normalized.
    EmbeddedGaussian,
    /// embedded dot products with a 1/n normalizer.
    DotProduct,
}

impl RelationMetric {
    pub fn name(self) -> &'static str {
        match self {
            RelationMetric::Gaussian => "gaussian",
            RelationMetric::EmbeddedGaussian => "embedded_gaussian",
            RelationMetric::DotProduct => "dot_product",
        }
    }

    /// Whether the theta/phi embeddings participate.
    pub fn uses_embeddings(self) -> bool {
        !matches!(self, RelationMetric::Gaussian)
    }
}

/// Channel pooling used to build the CLSA gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialPooling {
    Avg,
    Max,
    AvgAndMax,
}

impl SpatialPooling {
    pub fn name(self) -> &'static str {
        match self {
            SpatialPooling::Avg => "avg",
            SpatialPooling::Max => "max",
            SpatialPooling::AvgAndMax => "avg_and_max",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            SpatialPooling::AvgAndMax => 2,
            _ => 1,
        }
    }
}

/// Squashing applied to the CLSA attention map. The linear form is the
/// module's literal definition; sigmoid is the option used by the channel-
/// and-spatial-attention line of work that inspired it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    Linear,
    Sigmoid,
}

impl GateMode {
    pub fn name(self) -> &'static str {
        match self {
            GateMode::Linear => "linear",
            GateMode::Sigmoid => "sigmoid",
        }
    }
}

/// Learnable state of one CLCA module.
///
/// All projections are per-position matrices applied as 1x1 convolutions,
/// each with a bias. Under the Gaussian metric the theta/phi embeddings are
/// allocated but stay untrained.
pub struct ClcaParams<E: Element> {
    pub w_l: Tensor<E>,
    pub b_l: Tensor<E>,
    pub w_g: Tensor<E>,
    pub b_g: Tensor<E>,
    pub w_theta: Tensor<E>,
    pub b_theta: Tensor<E>,
    pub w_phi: Tensor<E>,
    pub b_phi: Tensor<E>,
    pub w_k: Tensor<E>,
    pub b_k: Tensor<E>,
    pub w_y: Tensor<E>,
    pub b_y: Tensor<E>,
    pub metric: RelationMetric,
    pub upsample: ResampleMode,
    pub c_mid: usize,
    pub c_top: usize,
    pub c_int: usize,
}

impl<E: Element> ClcaParams<E> {
    /// Fan-in-scaled uniform init for the projections; the output
    /// projection and every bias start at zero so the module begins as an
    /// identity.
    pub fn new(
        c_mid: usize,
        c_top: usize,
        c_int: usize,
        metric: RelationMetric,
        upsample: ResampleMode,
        init: &ParamInit,
        prefix: &str,
    ) -> Result<Self> {
        let mat = |name: &str, rows: usize, cols: usize| -> Result<Tensor<E>> {
            init.uniform_fan_in(&format!("{prefix}.{name}"), &[rows, cols], cols)
        };
        let zero_param = |shape: &[usize]| -> Result<Tensor<E>> {
            Tensor::param(shape, vec![E::zero(); shape.iter().product()])
        };
        Ok(ClcaParams {
            w_l: mat("W_l", c_mid, c_mid)?,
            b_l: zero_param(&[c_mid])?,
            w_g: mat("W_g", c_mid, c_top)?,
            b_g: zero_param(&[c_mid])?,
            w_theta: mat("W_theta", c_int, c_mid)?,
            b_theta: zero_param(&[c_int])?,
            w_phi: mat("W_phi", c_int, c_mid)?,
            b_phi: zero_param(&[c_int])?,
            w_k: mat("W_k", c_int, c_mid)?,
            b_k: zero_param(&[c_int])?,
            w_y: zero_param(&[c_mid, c_int])?,
            b_y: zero_param(&[c_mid])?,
            metric,
            upsample,
            c_mid,
            c_top,
            c_int,
        })
    }

    /// Named tensors for checkpointing, trained or not.
    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        for (name, t) in [
            ("W_l", &self.w_l),
            ("b_l", &self.b_l),
            ("W_g", &self.w_g),
            ("b_g", &self.b_g),
            ("W_theta", &self.w_theta),
            ("b_theta", &self.b_theta),
            ("W_phi", &self.w_phi),
            ("b_phi", &self.b_phi),
            ("W_k", &self.w_k),
            ("b_k", &self.b_k),
            ("W_y", &self.w_y),
            ("b_y", &self.b_y),
        ] {
            out.push((format!("{prefix}.{name}"), t.clone()));
        }
        out
    }

    /// Tensors the optimizer updates; excludes theta/phi under Gaussian.
    pub fn trainable_tensors(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        self.state_tensors(prefix)
            .into_iter()
            .filter(|(name, _)| {
                self.metric.uses_embeddings()
                    || !(name.contains("theta") || name.contains("phi"))
            })
            .collect()
    }

    /// Number of learnable scalars under the active metric.
    pub fn parameter_count(&self) -> usize {
        self.trainable_tensors("clca").iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Learnable state of one CLSA module: a 3x3 conv producing a one-channel
/// attention map from the pooled input.
pub struct ClsaParams<E: Element> {
    pub kernel: Tensor<E>,
    pub bias: Tensor<E>,
    pub pooling: SpatialPooling,
    pub gate: GateMode,
}

impl<E: Element> ClsaParams<E> {
    /// Kernel and bias start at zero: the gate contributes nothing until
    /// trained.
    pub fn new(pooling: SpatialPooling, gate: GateMode) -> Result<Self> {
        let in_ch = pooling.channels();
        Ok(ClsaParams {
            kernel: Tensor::param(&[1, in_ch, 3, 3], vec![E::zero(); in_ch * 9])?,
            bias: Tensor::param(&[1], vec![E::zero()])?,
            pooling,
            gate,
        })
    }

    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        vec![
            (format!("{prefix}.kernel"), self.kernel.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }

    pub fn trainable_tensors(&self, prefix: &str) -> Vec<(String, Tensor<E>)> {
        self.state_tensors(prefix)
    }

    pub fn parameter_count(&self) -> usize {
        self.kernel.numel() + self.bias.numel()
    }
}

/// How the stored relation values are normalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalizer {
    /// Rows already sum to one.
    SoftmaxRows,
    /// Stored values are raw logits; aggregation divides by n.
    OneOverN(usize),
}

/// Pairwise position relations of one fused map: values [b, n, n].
pub struct RelationMatrix<E: Element> {
    pub values: Tensor<E>,
    pub normalizer: Normalizer,
}

/// Fuse a mid-level map with the upsampled top-level map (two 1x1
/// projections plus add). Output has the mid map's channels and extents.
pub fn clca_fuse<E: Element>(
    mid: &FeatureMap<E>,
    top: &FeatureMap<E>,
    params: &ClcaParams<E>,
) -> Result<FeatureMap<E>> {
    if mid.stage >= top.stage {
        return Err(ClanError::usage(
            "clca_fuse",
            format!("mid stage {} must be below top stage {}", mid.stage, top.stage),
        ));
    }
    if mid.channels() != params.c_mid || top.channels() != params.c_top {
        return Err(ClanError::dimension(
            "clca_fuse",
            format!(
                "params expect {}/{} channels, got mid {} top {}",
                params.c_mid,
                params.c_top,
                mid.channels(),
                top.channels()
            ),
        ));
    }
    if top.height() > mid.height() || top.width() > mid.width() {
        return Err(ClanError::dimension(
            "clca_fuse",
            format!(
                "top extents {}x{} exceed mid extents {}x{}",
                top.height(),
                top.width(),
                mid.height(),
                mid.width()
            ),
        ));
    }
    let top_up = top
        .tensor
        .resample(mid.height(), mid.width(), params.upsample)?;
    let local = mid.tensor.channel_project(&params.w_l, Some(&params.b_l))?;
    let global = top_up.channel_project(&params.w_g, Some(&params.b_g))?;
    FeatureMap::new(local.add(&global)?, mid.stage)
}

/// Pairwise relations over the fused map's positions under the configured
/// metric. Softmax variants store row-stochastic values; dot product stores
/// raw logits and records the 1/n factor for aggregation.
pub fn relation_matrix<E: Element>(
    fused: &FeatureMap<E>,
    params: &ClcaParams<E>,
) -> Result<RelationMatrix<E>> {
    let b = fused.batch();
    let c = fused.channels();
    let n = fused.spatial_positions;
    let flat = fused.tensor.reshape(&[b, c, n])?;
    match params.metric {
        RelationMetric::Gaussian => {
            let logits = flat.position_affinity(&flat)?;
            Ok(RelationMatrix {
                values: logits.softmax_rows()?,
                normalizer: Normalizer::SoftmaxRows,
            })
        }
        RelationMetric::EmbeddedGaussian | RelationMetric::DotProduct => {
            let theta = flat.channel_project(&params.w_theta, Some(&params.b_theta))?;
            let phi = flat.channel_project(&params.w_phi, Some(&params.b_phi))?;
            let logits = theta.position_affinity(&phi)?;
            if params.metric == RelationMetric::EmbeddedGaussian {
                Ok(RelationMatrix {
                    values: logits.softmax_rows()?,
                    normalizer: Normalizer::SoftmaxRows,
                })
            } else {
                Ok(RelationMatrix {
                    values: logits,
                    normalizer: Normalizer::OneOverN(n),
                })
            }
        }
    }
}

/// Full CLCA module: relations from the fused vectors, values from the
/// original mid-level vectors, output projection plus residual.
pub fn clca_forward<E: Element>(
    mid: &FeatureMap<E>,
    top: &FeatureMap<E>,
    params: &ClcaParams<E>,
) -> Result<FeatureMap<E>> {
    let fused = clca_fuse(mid, top, params)?;
    let rel = relation_matrix(&fused, params)?;
    let b = mid.batch();
    let n = mid.spatial_positions;
    let mid_flat = mid.tensor.reshape(&[b, params.c_mid, n])?;
    // value path applies to the original mid vectors, not the fused ones
    let values = mid_flat.channel_project(&params.w_k, Some(&params.b_k))?;
    let mut aggregated = rel.values.apply_relation(&values)?;
    if let Normalizer::OneOverN(count) = rel.normalizer {
        aggregated = aggregated.scale(E::from_f64(1.0 / count as f64));
    }
    let aggregated = aggregated.reshape(&[b, params.c_int, mid.height(), mid.width()])?;
    let projected = aggregated.channel_project(&params.w_y, Some(&params.b_y))?;
    FeatureMap::new(projected.add(&mid.tensor)?, mid.stage)
}

/// Spatial attention map of a (refined) mid-level map: channel pooling,
/// 3x3 conv with padding 1 down to one channel, optional sigmoid gate.
pub fn clsa_attention_map<E: Element>(
    refined_mid: &FeatureMap<E>,
    params: &ClsaParams<E>,
) -> Result<Tensor<E>> {
    let kernel_in = params.kernel.shape()[1];
    if kernel_in != params.pooling.channels() {
        return Err(ClanError::config(
            "clsa_attention_map",
            format!(
                "kernel has {kernel_in} input channels but {} pooling provides {}",
                params.pooling.name(),
                params.pooling.channels()
            ),
        ));
    }
    let pooled = refined_mid.tensor.channel_pool()?;
    let pooled = match params.pooling {
        SpatialPooling::Avg => pooled.slice_channels(0, 1)?,
        SpatialPooling::Max => pooled.slice_channels(1, 1)?,
        SpatialPooling::AvgAndMax => pooled,
    };
    let map = pooled.conv2d(&params.kernel, &params.bias, 1, 1)?;
    Ok(match params.gate {
        GateMode::Linear => map,
        GateMode::Sigmoid => map.sigmoid(),
    })
}

/// Gate the top-level map with the mid-level attention map, downsampled to
/// the top resolution by integer-factor average pooling.
pub fn clsa_forward<E: Element>(
    refined_mid: &FeatureMap<E>,
    top: &FeatureMap<E>,
    params: &ClsaParams<E>,
) -> Result<FeatureMap<E>> {
    let map = clsa_attention_map(refined_mid, params)?;
    let (mh, mw) = (refined_mid.height(), refined_mid.width());
    let (th, tw) = (top.height(), top.width());
    if mh % th != 0 || mw % tw != 0 || mh / th != mw / tw {
        return Err(ClanError::config(
            "clsa_forward",
            format!("mid extents {mh}x{mw} are not an integer multiple of top extents {th}x{tw}"),
        ));
    }
    let factor = mh / th;
    let gate = if factor == 1 {
        map
    } else {
        map.pool2d(crate::tensor::PoolMode::Avg, factor, factor)?
    };
    // The result is top-shaped but indexed by the middle stage that
    // produced the gate, so refine_top can order the maps.
    FeatureMap::new(top.tensor.mul(&gate)?, refined_mid.stage)
}

/// Concatenate the attention-gated top maps of every middle stage, in
/// ascending stage order, yielding the refined top-level map.
pub fn refine_top<E: Element>(
    attended: &[FeatureMap<E>],
    top_stage: usize,
) -> Result<FeatureMap<E>> {
    if attended.is_empty() {
        return Err(ClanError::usage("refine_top", "no attended maps"));
    }
    for pair in attended.windows(2) {
        if pair[0].stage >= pair[1].stage {
            return Err(ClanError::usage(
                "refine_top",
                "attended maps must be in ascending stage order",
            ));
        }
    }
    let tensors: Vec<Tensor<E>> = attended.iter().map(|f| f.tensor.clone()).collect();
    let cat = crate::tensor::concat_channels(&tensors)?;
    FeatureMap::new(cat, top_stage)
}

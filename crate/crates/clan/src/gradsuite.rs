//! The gradcheck command: finite-difference verification of every
//! primitive op and of the composed model loss, at tiny sizes.
//!
//! Each op is wrapped into a scalar loss through a fixed random projection
//! (sum of elementwise product with frozen weights), which catches
//! transposed or misrouted gradients that a plain sum can hide.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{GateMode, RelationMetric, SpatialPooling};
use crate::backbone::BackboneConfig;
use crate::error::Result;
use crate::model::{clan_loss, ClanModel, ModelConfig, Variant};
use crate::tensor::gradcheck::{finite_diff_check, CheckResult};
use crate::tensor::{concat_channels, cross_entropy, linear, PoolMode, ResampleMode, Tensor};

pub const PRIMITIVE_THRESHOLD: f64 = 1e-5;
pub const COMPOSED_THRESHOLD: f64 = 1e-4;
pub const EPS: f64 = 1e-4;

fn seeded(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Random values kept away from zero, for kinked ops like relu and for
/// near-tie-free max pooling.
fn seeded_offset(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Project a tensor to a scalar with frozen random weights.
fn project(t: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let r = seeded(&t.shape(), seed);
    Ok(t.mul(&r)?.sum_all())
}

/// Gradient checks for every primitive tensor op, each input separately.
pub fn primitive_checks() -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    let mut push = |name: &str, err: f64| {
        results.push(CheckResult {
            name: name.to_string(),
            max_rel_err: err,
            threshold: PRIMITIVE_THRESHOLD,
        });
    };

    {
        let b = seeded(&[4, 3], 101);
        let a = seeded(&[3, 4], 100);
        push(
            "matmul/lhs",
            finite_diff_check(|x| project(&x.matmul(&b)?, 1), &a, EPS)?,
        );
        push(
            "matmul/rhs",
            finite_diff_check(|x| project(&a.matmul(x)?, 2), &b, EPS)?,
        );
    }
    {
        let x = seeded(&[2, 3, 5, 5], 102);
        let k = seeded(&[2, 3, 3, 3], 103);
        let bias = seeded(&[2], 104);
        push(
            "conv2d/input",
            finite_diff_check(|p| project(&p.conv2d(&k, &bias, 1, 1)?, 3), &x, EPS)?,
        );
        push(
            "conv2d/kernel",
            finite_diff_check(|p| project(&x.conv2d(p, &bias, 1, 1)?, 4), &k, EPS)?,
        );
        push(
            "conv2d/bias",
            finite_diff_check(|p| project(&x.conv2d(&k, p, 1, 1)?, 5), &bias, EPS)?,
        );
        push(
            "conv2d/strided",
            finite_diff_check(|p| project(&p.conv2d(&k, &bias, 2, 1)?, 6), &x, EPS)?,
        );
    }
    {
        let x = seeded_offset(&[2, 2, 4, 4], 105);
        push(
            "pool2d/avg",
            finite_diff_check(|p| project(&p.pool2d(PoolMode::Avg, 2, 2)?, 7), &x, EPS)?,
        );
        push(
            "pool2d/max",
            finite_diff_check(|p| project(&p.pool2d(PoolMode::Max, 2, 2)?, 8), &x, EPS)?,
        );
    }
    {
        let x = seeded_offset(&[2, 4, 3, 3], 106);
        push(
            "channel_pool",
            finite_diff_check(|p| project(&p.channel_pool()?, 9), &x, EPS)?,
        );
    }
    {
        let x = seeded(&[3, 6], 107);
        push(
            "softmax_rows",
            finite_diff_check(|p| project(&p.softmax_rows()?, 10), &x, EPS)?,
        );
    }
    {
        let x = seeded(&[1, 2, 3, 3], 108);
        push(
            "resample/nearest_up",
            finite_diff_check(
                |p| project(&p.resample(6, 6, ResampleMode::Nearest)?, 11),
                &x,
                EPS,
            )?,
        );
        push(
            "resample/bilinear_up",
            finite_diff_check(
                |p| project(&p.resample(6, 6, ResampleMode::Bilinear)?, 12),
                &x,
                EPS,
            )?,
        );
        let big = seeded(&[1, 2, 6, 6], 109);
        push(
            "resample/avg_down",
            finite_diff_check(
                |p| project(&p.resample(3, 3, ResampleMode::Nearest)?, 13),
                &big,
                EPS,
            )?,
        );
    }
    {
        let a = seeded(&[1, 2, 3, 3], 110);
        let b = seeded(&[1, 3, 3, 3], 111);
        push(
            "concat_channels",
            finite_diff_check(
                |p| project(&concat_channels(&[p.clone(), b.clone()])?, 14),
                &a,
                EPS,
            )?,
        );
        let cat = seeded(&[1, 5, 3, 3], 112);
        push(
            "slice_channels",
            finite_diff_check(|p| project(&p.slice_channels(1, 3)?, 15), &cat, EPS)?,
        );
    }
    {
        let x = seeded(&[2, 3, 4, 4], 113);
        let y = seeded(&[2, 3, 4, 4], 114);
        let map = seeded(&[2, 1, 4, 4], 115);
        push(
            "add",
            finite_diff_check(|p| project(&p.add(&y)?, 16), &x, EPS)?,
        );
        push(
            "mul",
            finite_diff_check(|p| project(&p.mul(&y)?, 17), &x, EPS)?,
        );
        push(
            "mul/map_broadcast",
            finite_diff_check(|p| project(&x.mul(p)?, 18), &map, EPS)?,
        );
        let off = seeded_offset(&[3, 5], 116);
        push(
            "relu",
            finite_diff_check(|p| project(&p.relu(), 19), &off, EPS)?,
        );
        push(
            "exp",
            finite_diff_check(|p| project(&p.exp(), 20), &x, EPS)?,
        );
        push(
            "sigmoid",
            finite_diff_check(|p| project(&p.sigmoid(), 21), &off, EPS)?,
        );
        push(
            "scale",
            finite_diff_check(|p| project(&p.scale(1.75), 22), &x, EPS)?,
        );
    }
    {
        let x = seeded(&[2, 3, 3, 3], 117);
        push(
            "global_avg_pool",
            finite_diff_check(|p| project(&p.global_avg_pool()?, 23), &x, EPS)?,
        );
    }
    {
        let logits = seeded(&[4, 5], 118);
        let labels = [0usize, 2, 4, 1];
        push(
            "cross_entropy",
            finite_diff_check(|p| cross_entropy(p, &labels), &logits, EPS)?,
        );
    }
    {
        let x = seeded(&[3, 4], 119);
        let w = seeded(&[4, 2], 120);
        let bias = seeded(&[2], 121);
        push(
            "linear/input",
            finite_diff_check(|p| project(&linear(p, &w, &bias)?, 24), &x, EPS)?,
        );
        push(
            "linear/weight",
            finite_diff_check(|p| project(&linear(&x, p, &bias)?, 25), &w, EPS)?,
        );
        push(
            "linear/bias",
            finite_diff_check(|p| project(&linear(&x, &w, p)?, 26), &bias, EPS)?,
        );
    }
    {
        let x = seeded(&[1, 3, 2, 4], 122);
        let w = seeded(&[5, 3], 123);
        let bias = seeded(&[5], 124);
        push(
            "channel_project/input",
            finite_diff_check(|p| project(&p.channel_project(&w, Some(&bias))?, 27), &x, EPS)?,
        );
        push(
            "channel_project/weight",
            finite_diff_check(|p| project(&x.channel_project(p, Some(&bias))?, 28), &w, EPS)?,
        );
        push(
            "channel_project/bias",
            finite_diff_check(|p| project(&x.channel_project(&w, Some(p))?, 29), &bias, EPS)?,
        );
    }
    {
        let a = seeded(&[2, 3, 4], 125);
        let b = seeded(&[2, 3, 5], 126);
        push(
            "position_affinity/lhs",
            finite_diff_check(|p| project(&p.position_affinity(&b)?, 30), &a, EPS)?,
        );
        push(
            "position_affinity/rhs",
            finite_diff_check(|p| project(&a.position_affinity(p)?, 31), &b, EPS)?,
        );
        // self-affinity exercises the repeated-input path
        push(
            "position_affinity/self",
            finite_diff_check(|p| project(&p.position_affinity(p)?, 32), &a, EPS)?,
        );
        let rel = seeded(&[2, 4, 5], 127);
        let vals = seeded(&[2, 3, 5], 128);
        push(
            "apply_relation/rel",
            finite_diff_check(|p| project(&p.apply_relation(&vals)?, 33), &rel, EPS)?,
        );
        push(
            "apply_relation/values",
            finite_diff_check(|p| project(&rel.apply_relation(p)?, 34), &vals, EPS)?,
        );
    }
    Ok(results)
}

fn tiny_model(metric: RelationMetric, pooling: SpatialPooling, seed: u64) -> Result<ClanModel<f64>> {
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            stage_channels: vec![4, 6],
            stage_blocks: vec![1, 1],
            input_size: 8,
            tap_stages: vec![1],
        },
        variant: Variant::Clan,
        metric,
        pooling,
        gate: GateMode::Linear,
        upsample: ResampleMode::Nearest,
        c_int: None,
        num_classes: 3,
    };
    let model = ClanModel::new(cfg, seed)?;
    // Zero-init identity parameters would block gradient flow to the
    // attention weights, so perturb everything randomly.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, t) in model.trainable_tensors() {
        let data: Vec<f64> = (0..t.numel()).map(|_| rng.gen_range(-0.4..0.4)).collect();
        t.set_data(&data);
    }
    Ok(model)
}

/// Composed checks: the full multi-branch loss differentiated against the
/// input image and against every trainable parameter, per relation metric
/// and pooling mode.
pub fn composed_checks() -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    let combos = [
        (RelationMetric::Gaussian, SpatialPooling::AvgAndMax),
        (RelationMetric::EmbeddedGaussian, SpatialPooling::AvgAndMax),
        (RelationMetric::DotProduct, SpatialPooling::AvgAndMax),
        (RelationMetric::DotProduct, SpatialPooling::Avg),
        (RelationMetric::DotProduct, SpatialPooling::Max),
    ];
    for (metric, pooling) in combos {
        let model = tiny_model(metric, pooling, 1234)?;
        let x = seeded(&[2, 3, 8, 8], 4321);
        let labels = [0usize, 2];
        let branch_weights = vec![1.0; model.branch_count()];

        let loss_fn = |input: &Tensor<f64>| -> Result<Tensor<f64>> {
            clan_loss(&model.forward(input)?, &labels, &branch_weights)
        };
        let name = format!("clan_loss[{}/{}]", metric.name(), pooling.name());
        results.push(CheckResult {
            name: format!("{name}/input"),
            max_rel_err: finite_diff_check(loss_fn, &x, EPS)?,
            threshold: COMPOSED_THRESHOLD,
        });

        // parameter-wise central differences
        let outputs = model.forward(&x)?;
        let loss = clan_loss(&outputs, &labels, &branch_weights)?;
        model.zero_grads();
        loss.backward()?;
        let mut worst = 0.0f64;
        for (_, param) in model.trainable_tensors() {
            let analytic = param
                .grad()
                .unwrap_or_else(|| vec![0.0; param.numel()]);
            let base = param.data_vec();
            for i in 0..base.len() {
                let mut probe = base.clone();
                probe[i] += EPS;
                param.set_data(&probe);
                let lp = loss_fn(&x)?.item();
                probe[i] = base[i] - EPS;
                param.set_data(&probe);
                let lm = loss_fn(&x)?.item();
                param.set_data(&base);
                let numeric = (lp - lm) / (2.0 * EPS);
                let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
                worst = worst.max((analytic[i] - numeric).abs() / denom);
            }
        }
        results.push(CheckResult {
            name: format!("{name}/params"),
            max_rel_err: worst,
            threshold: COMPOSED_THRESHOLD,
        });
    }
    Ok(results)
}

/// Everything the gradcheck command runs.
pub fn full_suite() -> Result<Vec<CheckResult>> {
    let mut results = primitive_checks()?;
    results.extend(composed_checks()?);
    Ok(results)
}

//! Quick end-to-end self check: kernel and metric oracles plus a gradient
//! check on a reduced model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{build_model, ModelConfig};
use crate::error::Result;
use crate::harness::data::{gen_synthetic, SyntheticParams};
use crate::harness::gradcheck::{check_gradients, randomize_trainables, GradCheckOptions};
use crate::harness::metrics::{auroc, average_precision};
use crate::harness::oracle;
use crate::losses::LossConfig;
use crate::parallel::Exec;
use crate::tensor::conv2d_same_raw;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn conv_check(rng: &mut ChaCha8Rng) -> Check {
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(1..7), rng.gen_range(1..7));
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let x: Vec<f64> = (0..cin * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kern: Vec<f64> = (0..cout * cin * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = conv2d_same_raw(&x, cin, h, w, &kern, cout, k);
        let want = oracle::conv2d_naive(&x, cin, h, w, &kern, cout, k);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    Check {
        name: "conv2d vs nested-loop oracle",
        passed: worst < 1e-12,
        detail: format!("max abs diff {worst:.2e}"),
    }
}

fn metric_check(rng: &mut ChaCha8Rng) -> Result<Check> {
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.gen_range(2..60);
        let levels = rng.gen_range(2..10);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        if auroc(&scores, &labels)? != oracle::auroc_pairs(&scores, &labels)
            || average_precision(&scores, &labels)? != oracle::average_precision_thresholds(&scores, &labels)
        {
            mismatches += 1;
        }
    }
    Ok(Check {
        name: "auroc/ap vs brute-force oracles",
        passed: mismatches == 0,
        detail: format!("{mismatches} mismatches in 200 instances"),
    })
}

/// Gradient check on a reduced model at a random non-zero point.
fn gradient_check() -> Result<Check> {
    let cfg = ModelConfig {
        channels: 16,
        heads: 2,
        rank: 4,
        gate_hidden: 8,
        image_size: 16,
        patch_size: 4,
        mlp_ratio: 2,
        ..ModelConfig::default()
    };
    let mut model = build_model(&cfg, 11)?;
    randomize_trainables(&mut model, 12, 0.5);
    let data = gen_synthetic(
        &SyntheticParams {
            image_size: 16,
            count: 2,
            anomaly_rate: 1.0,
            ..SyntheticParams::default()
        },
        13,
    )?;
    let refs: Vec<_> = data.iter().collect();
    let opts = GradCheckOptions {
        max_per_tensor: Some(24),
        ..GradCheckOptions::default()
    };
    let r = check_gradients(&model, &refs, &LossConfig::default(), &opts, Exec::default())?;
    Ok(Check {
        name: "loss gradients vs central differences",
        passed: r.passed(),
        detail: format!(
            "{} checked, {} skipped, {} failed, max rel err {:.2e}",
            r.checked,
            r.skipped,
            r.failures.len(),
            r.max_rel_err
        ),
    })
}

pub fn run() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    Ok(vec![conv_check(&mut rng), metric_check(&mut rng)?, gradient_check()?])
}

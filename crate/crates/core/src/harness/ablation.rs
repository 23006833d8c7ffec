//! Four-way component ablation over shared seeds.

use std::fmt::Write as _;

use crate::backbone::{build_model, AdapterKind, FusionMode};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::data::{gen_synthetic, Sample};
use crate::harness::eval::{evaluate, MetricsReport};
use crate::harness::metrics::sign_test;
use crate::harness::train::train;
use crate::parallel::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Plain low-rank vision adapters, one-hot fusion.
    Baseline,
    ConvLora,
    Dfg,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::ConvLora, Variant::Dfg, Variant::Full];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::ConvLora => "+conv_lora",
            Variant::Dfg => "+dfg",
            Variant::Full => "full",
        }
    }

    pub fn switches(self) -> (bool, bool) {
        match self {
            Variant::Baseline => (false, false),
            Variant::ConvLora => (true, false),
            Variant::Dfg => (false, true),
            Variant::Full => (true, true),
        }
    }

    /// `config` with this row's switches applied.
    pub fn configure(self, config: &RunConfig) -> RunConfig {
        let (conv, dfg) = self.switches();
        let mut c = config.clone();
        c.model.vision_adapter = if conv { AdapterKind::ConvLora } else { AdapterKind::Lora };
        c.model.fusion = if dfg { FusionMode::Dynamic } else { FusionMode::Static };
        c
    }
}

/// `seed`-th run of an ablation: model and data seeds both derive from it.
pub fn seeded(config: &RunConfig, seed: usize) -> RunConfig {
    let mut c = config.clone();
    c.model_seed = config.model_seed.wrapping_add(seed as u64);
    c.data_seed = config.data_seed.wrapping_add(seed as u64);
    c
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    /// `[seed][variant]`.
    pub runs: Vec<Vec<MetricsReport>>,
    /// Trainable scalars per variant.
    pub trainable: [usize; 4],
}

/// A strict ordering `a > b` on one metric, tested across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub metric: &'static str,
    pub better: Variant,
    pub worse: Variant,
    pub mean_better: f64,
    pub mean_worse: f64,
    pub wins: usize,
    pub trials: usize,
    pub p_value: f64,
}

impl Comparison {
    pub fn holds(&self, alpha: f64) -> bool {
        self.mean_better > self.mean_worse && self.p_value < alpha
    }
}

impl AblationResult {
    fn column(&self, v: Variant, metric: fn(&MetricsReport) -> f64) -> Vec<f64> {
        let i = Variant::ALL.iter().position(|&x| x == v).expect("known variant");
        self.runs.iter().map(|seed| metric(&seed[i])).collect()
    }

    /// Seed means `[pixel_auroc, pixel_ap, image_auroc, image_ap]`.
    pub fn means(&self, v: Variant) -> [f64; 4] {
        let n = self.runs.len() as f64;
        let metrics: [fn(&MetricsReport) -> f64; 4] =
            [|m| m.pixel_auroc, |m| m.pixel_ap, |m| m.image_auroc, |m| m.image_ap];
        metrics.map(|f| self.column(v, f).iter().sum::<f64>() / n)
    }

    /// CSV with one row per variant of seed-mean metrics.
    pub fn to_csv(&self) -> String {
        let mut s = format!("configuration,{}\n", MetricsReport::CSV_HEADER);
        for v in Variant::ALL {
            let m = self.means(v);
            let _ = writeln!(s, "{},{:.4},{:.4},{:.4},{:.4}", v.label(), m[0], m[1], m[2], m[3]);
        }
        s
    }

    /// Every individual run.
    pub fn seeds_csv(&self) -> String {
        let mut s = format!("seed,configuration,{}\n", MetricsReport::CSV_HEADER);
        for (i, seed) in self.runs.iter().enumerate() {
            for (v, m) in Variant::ALL.iter().zip(seed) {
                let _ = writeln!(s, "{i},{},{}", v.label(), m.csv_values());
            }
        }
        s
    }

    pub fn census_csv(&self) -> String {
        let mut s = String::from("configuration,trainable_params\n");
        for (v, n) in Variant::ALL.iter().zip(self.trainable) {
            let _ = writeln!(s, "{},{n}", v.label());
        }
        s
    }

    fn compare(&self, metric: &'static str, f: fn(&MetricsReport) -> f64, better: Variant, worse: Variant) -> Result<Comparison> {
        let a = self.column(better, f);
        let b = self.column(worse, f);
        let (wins, trials, p_value) = sign_test(&a, &b)?;
        let n = a.len() as f64;
        Ok(Comparison {
            metric,
            better,
            worse,
            mean_better: a.iter().sum::<f64>() / n,
            mean_worse: b.iter().sum::<f64>() / n,
            wins,
            trials,
            p_value,
        })
    }

    /// Pixel AUROC: full > +conv_lora > baseline. Image AUROC: full > +dfg >
    /// baseline.
    pub fn directional(&self) -> Result<Vec<Comparison>> {
        let px: fn(&MetricsReport) -> f64 = |m| m.pixel_auroc;
        let im: fn(&MetricsReport) -> f64 = |m| m.image_auroc;
        Ok(vec![
            self.compare("pixel_auroc", px, Variant::Full, Variant::ConvLora)?,
            self.compare("pixel_auroc", px, Variant::ConvLora, Variant::Baseline)?,
            self.compare("image_auroc", im, Variant::Full, Variant::Dfg)?,
            self.compare("image_auroc", im, Variant::Dfg, Variant::Baseline)?,
        ])
    }
}

/// Train and test sets for one seeded config, generated or loaded.
pub fn datasets(config: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    match &config.data.dataset_dir {
        Some(dir) => Ok((
            crate::harness::data::load_dataset(dir, "train")?,
            crate::harness::data::load_dataset(dir, "test")?,
        )),
        None => Ok((
            gen_synthetic(&config.synthetic("train"), config.split_seed("train"))?,
            gen_synthetic(&config.synthetic("test"), config.split_seed("test"))?,
        )),
    }
}

/// Trains and evaluates one configuration.
pub fn run_one(config: &RunConfig, exec: Exec) -> Result<MetricsReport> {
    let (train_set, test_set) = datasets(config)?;
    let outcome = train(config, &train_set, exec, |_| {})?;
    evaluate(&outcome.model, &test_set, exec, &config.to_text())
}

/// Runs every variant on `config.ablation_seeds` shared seeds. `progress`
/// sees `(seed, variant, report)` as runs finish.
pub fn ablate(config: &RunConfig, exec: Exec, mut progress: impl FnMut(usize, Variant, &MetricsReport)) -> Result<AblationResult> {
    config.validate()?;
    let mut trainable = [0usize; 4];
    for (slot, v) in trainable.iter_mut().zip(Variant::ALL) {
        *slot = build_model(&v.configure(config).model, config.model_seed)?.store.trainable_count();
    }
    if trainable[0] >= trainable[3] {
        return Err(Error::config("baseline does not train fewer parameters than the full model"));
    }
    let mut runs = Vec::with_capacity(config.ablation_seeds);
    for seed in 0..config.ablation_seeds {
        let base = seeded(config, seed);
        let jobs: Vec<RunConfig> = Variant::ALL.iter().map(|v| v.configure(&base)).collect();
        let reports = exec.map(&jobs, |c| run_one(c, exec)).into_iter().collect::<Result<Vec<_>>>()?;
        for (v, r) in Variant::ALL.iter().zip(&reports) {
            progress(seed, *v, r);
        }
        runs.push(reports);
    }
    Ok(AblationResult { runs, trainable })
}

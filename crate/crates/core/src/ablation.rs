//! Architecture and head ablations on generated data.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{Arch, Config, VariantConfig, Window};
use crate::data::{generate_catalog, generate_users, split_dataset, Split, MONTH, WEEK};
use crate::error::{Error, Result};
use crate::eval::{evaluate, pct_delta, EvalReport};
use crate::trainer::train;

/// Named model configuration of one table row.
#[derive(Debug, Clone)]
pub struct RowSpec {
    pub name: String,
    pub variant: VariantConfig,
    pub window: Option<Window>,
}

impl RowSpec {
    fn new(name: &str, arch: Arch, heads: Option<Vec<String>>, window: Option<i64>) -> Self {
        Self {
            name: name.to_string(),
            variant: VariantConfig { arch, heads },
            window: window.map(Window),
        }
    }

    pub fn apply(&self, base: &Config, seed: u64) -> Config {
        let mut cfg = base.clone();
        cfg.variant = self.variant.clone();
        if let Some(w) = self.window {
            cfg.features.window = w;
        }
        cfg.data.seed = seed;
        cfg.training.seed = seed;
        cfg
    }
}

pub fn architecture_rows() -> Vec<RowSpec> {
    vec![
        RowSpec::new("V0", Arch::V0, None, None),
        RowSpec::new("V1", Arch::V1, None, None),
        RowSpec::new("V2", Arch::V2, None, None),
        RowSpec::new("V3-1w", Arch::V3, None, Some(WEEK)),
        RowSpec::new("V3-1m", Arch::V3, None, Some(MONTH)),
    ]
}

/// Single-head V3 rows plus the all-heads row, over the configured roster.
pub fn head_rows(base: &Config) -> Vec<RowSpec> {
    let mut rows: Vec<RowSpec> = base
        .heads
        .iter()
        .map(|h| {
            RowSpec::new(
                &format!("only-{}", h.target.title()),
                Arch::V3,
                Some(vec![h.name.clone()]),
                Some(WEEK),
            )
        })
        .collect();
    rows.push(RowSpec::new("all", Arch::V3, None, Some(WEEK)));
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub mrr: Vec<f64>,
    pub wmrr: Vec<f64>,
    pub mean_mrr: f64,
    pub mean_wmrr: f64,
    pub pct_mrr: f64,
    pub pct_wmrr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub title: String,
    pub baseline: String,
    pub baseline_mrr: f64,
    pub baseline_wmrr: f64,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "### {}\n\nbaseline: {} (seeds {:?})\n\n| row | MRR | WMRR | %Δ MRR | %Δ WMRR |\n|---|---|---|---|---|\n",
            self.title, self.baseline, self.seeds
        );
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {:.4} | {:.4} | {:+.2}% | {:+.2}% |\n",
                r.name, r.mean_mrr, r.mean_wmrr, r.pct_mrr, r.pct_wmrr
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,mrr,wmrr,pct_mrr,pct_wmrr\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.name, r.mean_mrr, r.mean_wmrr, r.pct_mrr, r.pct_wmrr
            ));
        }
        out
    }
}

/// Generated and split data for one seed.
pub fn dataset_for(base: &Config, seed: u64) -> Result<Split> {
    let mut data = base.data.clone();
    data.seed = seed;
    let catalog = generate_catalog(data.num_items, seed)?;
    let users = generate_users(&catalog, &data)?;
    let [a, b, c] = data.split;
    split_dataset(&users.sequences, (a, b, c), seed)
}

/// Trains and evaluates row configurations, reusing results across tables.
pub struct AblationRunner {
    base: Config,
    seeds: Vec<u64>,
    data: BTreeMap<u64, Split>,
    results: BTreeMap<(String, u64), EvalReport>,
}

impl AblationRunner {
    pub fn new(base: &Config, seeds: &[u64]) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::config("ablation needs at least one seed"));
        }
        base.validate()?;
        Ok(Self {
            base: base.clone(),
            seeds: seeds.to_vec(),
            data: BTreeMap::new(),
            results: BTreeMap::new(),
        })
    }

    /// Cache key: everything that defines the run apart from its label.
    fn key(spec: &RowSpec, cfg: &Config) -> String {
        format!(
            "{:?}|{:?}|{}",
            spec.variant.arch, spec.variant.heads, cfg.features.window
        )
    }

    pub fn run(&mut self, spec: &RowSpec, seed: u64) -> Result<&EvalReport> {
        let cfg = spec.apply(&self.base, seed);
        let key = (Self::key(spec, &cfg), seed);
        if !self.results.contains_key(&key) {
            if !self.data.contains_key(&seed) {
                self.data.insert(seed, dataset_for(&self.base, seed)?);
            }
            let split = &self.data[&seed];
            let start = std::time::Instant::now();
            let trainer = train(&split.train, &cfg)?;
            let report = evaluate(&trainer.model, &split.test)?;
            log::info!(
                "{} seed {seed}: MRR {:.4} ({:.1}s)",
                spec.name,
                report.item_mrr,
                start.elapsed().as_secs_f64()
            );
            self.results.insert(key.clone(), report);
        }
        Ok(&self.results[&key])
    }

    fn mean_metrics(&mut self, spec: &RowSpec) -> Result<(Vec<f64>, Vec<f64>)> {
        let seeds = self.seeds.clone();
        let mut mrr = Vec::new();
        let mut wmrr = Vec::new();
        for s in seeds {
            let r = self.run(spec, s)?;
            mrr.push(r.item_mrr);
            wmrr.push(r.item_wmrr);
        }
        Ok((mrr, wmrr))
    }

    pub fn table(
        &mut self,
        title: &str,
        baseline: &RowSpec,
        rows: &[RowSpec],
    ) -> Result<AblationTable> {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (bm, bw) = self.mean_metrics(baseline)?;
        let (baseline_mrr, baseline_wmrr) = (mean(&bm), mean(&bw));
        let mut out = Vec::with_capacity(rows.len());
        for spec in rows {
            let (m, w) = self.mean_metrics(spec)?;
            let (mm, mw) = (mean(&m), mean(&w));
            out.push(AblationRow {
                name: spec.name.clone(),
                pct_mrr: pct_delta(mm, baseline_mrr),
                pct_wmrr: pct_delta(mw, baseline_wmrr),
                mrr: m,
                wmrr: w,
                mean_mrr: mm,
                mean_wmrr: mw,
            });
        }
        Ok(AblationTable {
            title: title.to_string(),
            baseline: baseline.name.clone(),
            baseline_mrr,
            baseline_wmrr,
            seeds: self.seeds.clone(),
            rows: out,
        })
    }

    /// Architecture table relative to V1.
    pub fn architecture_table(&mut self) -> Result<AblationTable> {
        let rows = architecture_rows();
        let baseline = rows[1].clone();
        self.table("Architecture ablation", &baseline, &rows)
    }

    /// Head table relative to V0.
    pub fn head_table(&mut self) -> Result<AblationTable> {
        let rows = head_rows(&self.base);
        let baseline = architecture_rows()[0].clone();
        self.table("Prediction head ablation", &baseline, &rows)
    }
}

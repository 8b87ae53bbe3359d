//! Experiment presets: the four-arm ablation grid and single-axis
//! hyperparameter sweeps, each run over several seeds with per-arm medians.
//!
//! Arms differ from the base config in exactly four fields — expert count,
//! selection width, router mode, and balance weight — so every comparison
//! shares its backbone init, data, batch order, and optimizer settings.

use std::io::Write as IoWrite;
use std::path::Path;

use crate::adapter::{flop_count_per_token, RouterMode};
use crate::error::{Error, Result};

use super::config::RunConfig;
use super::train::{train, MetricsRow};

/// One ablation arm: a named override of the mixture knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmSpec {
    pub name: &'static str,
    pub n_experts: usize,
    pub top_k: usize,
    pub router: RouterMode,
    pub alpha: f64,
}

impl ArmSpec {
    /// The base config with only this arm's four knobs changed.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.moa.n_experts = self.n_experts;
        cfg.moa.top_k = self.top_k;
        cfg.moa.router = self.router;
        cfg.loss.alpha = self.alpha;
        cfg
    }
}

/// The standard four arms, weakest to strongest:
/// a single always-on adapter; a sparse mixture with no balance penalty;
/// the same mixture with the penalty; and the penalized mixture with the
/// modality-aware router.
pub fn ablation_arms() -> Vec<ArmSpec> {
    vec![
        ArmSpec {
            name: "single_adapter",
            n_experts: 1,
            top_k: 1,
            router: RouterMode::Standard,
            alpha: 0.0,
        },
        ArmSpec {
            name: "moa_unbalanced",
            n_experts: 6,
            top_k: 2,
            router: RouterMode::Standard,
            alpha: 0.0,
        },
        ArmSpec {
            name: "moa_balanced",
            n_experts: 6,
            top_k: 2,
            router: RouterMode::Standard,
            alpha: 0.5,
        },
        ArmSpec {
            name: "moa_domain",
            n_experts: 6,
            top_k: 2,
            router: RouterMode::Domain,
            alpha: 0.5,
        },
    ]
}

/// Final-epoch numbers for one (arm, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub rank1: f64,
    pub rank5: f64,
    pub map: f64,
    pub loss_total: f64,
    pub entropy_image: f64,
    pub entropy_text: f64,
}

/// Per-arm medians over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmSummary {
    pub arm: String,
    pub median_rank1: f64,
    pub median_map: f64,
    pub median_entropy_image: f64,
    pub median_entropy_text: f64,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub results: Vec<ArmResult>,
    pub summaries: Vec<ArmSummary>,
}

impl AblationTable {
    pub fn summary_for(&self, arm: &str) -> Option<&ArmSummary> {
        self.summaries.iter().find(|s| s.arm == arm)
    }
}

/// Median of an unordered sample (mean of the two middles when even).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty sample");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn final_row(rows: &[MetricsRow], what: &str) -> Result<MetricsRow> {
    rows.last().copied().ok_or_else(|| {
        Error::Contract(format!("{what} produced no metrics rows"))
    })
}

/// Run every arm over every seed. Artifacts land under
/// `out_dir/<arm>/seed<k>/`; a summary CSV lands at `out_dir/ablation.csv`.
pub fn run_ablation_suite(
    base: &RunConfig,
    seeds: &[u64],
    out_dir: &Path,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument {
            op: "run_ablation_suite",
            msg: "need at least one seed".into(),
        });
    }
    std::fs::create_dir_all(out_dir)?;
    let mut results = Vec::new();
    let mut summaries = Vec::new();
    for arm in ablation_arms() {
        let mut rank1s = Vec::new();
        let mut maps = Vec::new();
        let mut ents_i = Vec::new();
        let mut ents_t = Vec::new();
        for &seed in seeds {
            let cfg = arm.apply(base).with_seed(seed);
            let run_dir = out_dir.join(arm.name).join(format!("seed{seed}"));
            let outcome = train(&cfg, &run_dir)?;
            let last = final_row(&outcome.rows, arm.name)?;
            rank1s.push(last.rank1);
            maps.push(last.map);
            ents_i.push(last.expert_usage_entropy_image);
            ents_t.push(last.expert_usage_entropy_text);
            results.push(ArmResult {
                arm: arm.name.to_string(),
                seed,
                rank1: last.rank1,
                rank5: last.rank5,
                map: last.map,
                loss_total: last.loss_total,
                entropy_image: last.expert_usage_entropy_image,
                entropy_text: last.expert_usage_entropy_text,
            });
        }
        summaries.push(ArmSummary {
            arm: arm.name.to_string(),
            median_rank1: median(&rank1s),
            median_map: median(&maps),
            median_entropy_image: median(&ents_i),
            median_entropy_text: median(&ents_t),
        });
    }
    let table = AblationTable { results, summaries };
    write_ablation_csv(&table, &out_dir.join("ablation.csv"))?;
    Ok(table)
}

fn write_ablation_csv(table: &AblationTable, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "arm,seed,rank1,rank5,map,loss_total,entropy_image,entropy_text"
    )?;
    for r in &table.results {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            r.arm, r.seed, r.rank1, r.rank5, r.map, r.loss_total, r.entropy_image, r.entropy_text
        )?;
    }
    writeln!(f)?;
    writeln!(
        f,
        "arm,median_rank1,median_map,median_entropy_image,median_entropy_text"
    )?;
    for s in &table.summaries {
        writeln!(
            f,
            "{},{},{},{},{}",
            s.arm, s.median_rank1, s.median_map, s.median_entropy_image, s.median_entropy_text
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Which mixture knob a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    NExperts,
    TopK,
}

impl SweepParam {
    pub fn set(&self, cfg: &mut RunConfig, value: usize) {
        match self {
            SweepParam::NExperts => cfg.moa.n_experts = value,
            SweepParam::TopK => cfg.moa.top_k = value,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SweepParam::NExperts => "n_experts",
            SweepParam::TopK => "top_k",
        }
    }
}

/// One sweep point: retrieval quality next to its cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub value: usize,
    pub median_rank1: f64,
    pub median_map: f64,
    /// Trainable scalars added by the mixture, both branches (closed form).
    pub trainable_params: u64,
    /// Expert compute per routed token (multiply-accumulates counted as two
    /// floating-point operations each).
    pub expert_flops_per_token: u64,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

/// Sweep one knob over `values`, running each point on every seed.
/// Artifacts land under `out_dir/<knob><value>/seed<k>/`, plus
/// `out_dir/sweep.csv`.
pub fn run_hyperparam_sweep(
    base: &RunConfig,
    param: SweepParam,
    values: &[usize],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<SweepTable> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument {
            op: "run_hyperparam_sweep",
            msg: "need at least one value and one seed".into(),
        });
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for &value in values {
        let mut point = base.clone();
        param.set(&mut point, value);
        let mut rank1s = Vec::new();
        let mut maps = Vec::new();
        for &seed in seeds {
            let cfg = point.with_seed(seed);
            let run_dir = out_dir
                .join(format!("{}{value}", param.label()))
                .join(format!("seed{seed}"));
            let outcome = train(&cfg, &run_dir)?;
            let last = final_row(&outcome.rows, param.label())?;
            rank1s.push(last.rank1);
            maps.push(last.map);
        }
        let count = count_for(&point)?;
        let (expert_flops, _router_flops) =
            flop_count_per_token(point.backbone.d_model, &point.moa);
        rows.push(SweepRow {
            value,
            median_rank1: median(&rank1s),
            median_map: median(&maps),
            trainable_params: count,
            expert_flops_per_token: expert_flops,
        });
    }
    let table = SweepTable { param, rows };
    let mut f = std::fs::File::create(out_dir.join("sweep.csv"))?;
    writeln!(
        f,
        "{},median_rank1,median_map,trainable_params,expert_flops_per_token",
        param.label()
    )?;
    for r in &table.rows {
        writeln!(
            f,
            "{},{},{},{},{}",
            r.value, r.median_rank1, r.median_map, r.trainable_params, r.expert_flops_per_token
        )?;
    }
    f.flush()?;
    Ok(table)
}

/// Closed-form trainable count for a run config (both branches share the
/// encoder geometry here).
fn count_for(cfg: &RunConfig) -> Result<u64> {
    let spec = crate::adapter::CountSpec {
        d_image: cfg.backbone.d_model,
        d_text: cfg.backbone.d_model,
        layers_image: cfg.backbone.n_layers,
        layers_text: cfg.backbone.n_layers,
        n_experts: cfg.moa.n_experts,
        reduction: cfg.moa.reduction,
        prompt_count: cfg.moa.prompt_count,
        router: cfg.moa.router,
    };
    Ok(crate::adapter::count_trainable_params(&spec)?.total())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::MoaConfig;
    use crate::backbone::BackboneConfig;
    use crate::data::DataConfig;

    fn tiny_base() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.backbone = BackboneConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            mlp_ratio: 2,
            image_hw: (8, 8),
            patch: 4,
            channels: 1,
            vocab_size: 16,
            text_len: 8,
            init_std: 0.02,
            seed: 0,
        };
        cfg.moa = MoaConfig {
            n_experts: 3,
            top_k: 2,
            reduction: 8,
            prompt_count: 2,
            ..MoaConfig::default()
        };
        cfg.data = DataConfig {
            num_train_ids: 4,
            num_test_ids: 3,
            imgs_per_id: 4,
            caps_per_img: 1,
            n_attributes: 4,
            noise: 0.1,
            min_gap: 0.25,
            image_hw: (8, 8),
            channels: 1,
            vocab_size: 16,
            seed: 0,
        };
        cfg.optim.epochs = 1;
        cfg.optim.batch_size = 8;
        cfg.seed = 5;
        cfg
    }

    #[test]
    fn arms_cover_the_expected_grid() {
        let arms = ablation_arms();
        let names: Vec<&str> = arms.iter().map(|a| a.name).collect();
        assert_eq!(
            names,
            ["single_adapter", "moa_unbalanced", "moa_balanced", "moa_domain"]
        );
        assert_eq!((arms[0].n_experts, arms[0].top_k), (1, 1));
        assert_eq!(arms[1].alpha, 0.0);
        assert_eq!(arms[2].alpha, 0.5);
        assert_eq!(arms[3].router, RouterMode::Domain);
        assert!(arms
            .iter()
            .take(3)
            .all(|a| a.router == RouterMode::Standard));
    }

    #[test]
    fn arm_application_touches_only_the_four_knobs() {
        let base = tiny_base();
        for arm in ablation_arms() {
            let mut applied = arm.apply(&base);
            assert_eq!(applied.moa.n_experts, arm.n_experts);
            assert_eq!(applied.moa.top_k, arm.top_k);
            assert_eq!(applied.moa.router, arm.router);
            assert_eq!(applied.loss.alpha, arm.alpha);
            // Reverting exactly those four fields must recover the base.
            applied.moa.n_experts = base.moa.n_experts;
            applied.moa.top_k = base.moa.top_k;
            applied.moa.router = base.moa.router;
            applied.loss.alpha = base.loss.alpha;
            assert_eq!(applied, base);
        }
    }

    #[test]
    fn median_handles_odd_even_and_unsorted_input() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
    }

    #[test]
    fn ablation_suite_runs_every_arm_and_writes_the_table() {
        let base = tiny_base();
        let dir = tempfile::tempdir().unwrap();
        let table = run_ablation_suite(&base, &[5], dir.path()).unwrap();
        assert_eq!(table.results.len(), 4);
        assert_eq!(table.summaries.len(), 4);
        for s in &table.summaries {
            assert!((0.0..=1.0).contains(&s.median_rank1), "{s:?}");
        }
        // The single-adapter arm routes everything to its one expert: zero
        // usage entropy. The mixtures spread over several experts.
        assert_eq!(
            table.summary_for("single_adapter").unwrap().median_entropy_image,
            0.0
        );
        let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
        assert!(csv.contains("moa_domain"));
        assert!(dir
            .path()
            .join("moa_balanced/seed5/metrics.csv")
            .exists());
    }

    #[test]
    fn sweep_reports_cost_next_to_quality() {
        let base = tiny_base();
        let dir = tempfile::tempdir().unwrap();
        let table =
            run_hyperparam_sweep(&base, SweepParam::NExperts, &[2, 3], &[5], dir.path()).unwrap();
        assert_eq!(table.rows.len(), 2);
        // Expert compute per token depends on the selection width, not on
        // how many experts exist; parameters grow with the expert count.
        assert_eq!(
            table.rows[0].expert_flops_per_token,
            table.rows[1].expert_flops_per_token
        );
        assert!(table.rows[1].trainable_params > table.rows[0].trainable_params);
        assert!(dir.path().join("sweep.csv").exists());

        let ktable =
            run_hyperparam_sweep(&base, SweepParam::TopK, &[1, 2], &[5], dir.path()).unwrap();
        assert_eq!(
            2 * ktable.rows[0].expert_flops_per_token,
            ktable.rows[1].expert_flops_per_token
        );
        assert_eq!(
            ktable.rows[0].trainable_params,
            ktable.rows[1].trainable_params
        );
    }
}

//! Run settings: command-line flags merged with an optional TOML file.
//! Values present in the file override the flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use redesign_core::learncurve::{FlagConfig, DEFAULT_MIN_N};
use redesign_core::policysim::{PolicyConfig, Selection};
use redesign_core::procmetrics::{IdleAttribution, TimeConfig};
use redesign_core::{AfmConfig, BktFitConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ingest::{FormatSpec, IngestOptions};

pub const DEFAULT_STUDENTS: usize = 100;

/// Every flag, all optional. The same keys (snake_case) are accepted in the
/// config file, plus the tables `columns`, `bkt` and `policies`.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// TOML config file; its values override flags
    #[arg(long, global = true, value_name = "FILE")]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Output (run) directory [default: out]
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Transaction log (TSV)
    #[arg(long, global = true, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// KC model CSV (problem, step, kc)
    #[arg(long, global = true, value_name = "FILE")]
    pub kc_model: Option<PathBuf>,
    /// Additional KC model to compare (repeatable)
    #[arg(long = "candidate", global = true, value_name = "FILE")]
    pub candidates: Option<Vec<PathBuf>>,
    /// Split-rule CSV (problem, step, new_kc)
    #[arg(long, global = true, value_name = "FILE")]
    pub split_rule: Option<PathBuf>,
    /// KC the split rule refines
    #[arg(long, global = true)]
    pub target_kc: Option<String>,
    /// Comma-separated KCs to merge into one candidate
    #[arg(long, global = true, value_name = "KC,KC")]
    pub merge_kcs: Option<String>,
    /// Problem pool CSV (problem, step_order, kcs, est_step_seconds)
    #[arg(long, global = true, value_name = "FILE")]
    pub pool: Option<PathBuf>,
    /// BKT parameters JSON to use instead of fitting (tracker for simulations)
    #[arg(long, global = true, value_name = "FILE")]
    pub bkt_params: Option<PathBuf>,
    /// Ground-truth BKT parameters for simulated students [default: tracker]
    #[arg(long, global = true, value_name = "FILE")]
    pub truth_params: Option<PathBuf>,
    /// File listing new KCs, one per line
    #[arg(long, global = true, value_name = "FILE")]
    pub new_kcs: Option<PathBuf>,

    /// Seed for all randomness [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core [default: 0]
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// [default: 0.95]
    #[arg(long, global = true)]
    pub mastery_threshold: Option<f64>,
    /// [default: 0.80]
    #[arg(long, global = true)]
    pub overpractice_threshold: Option<f64>,
    /// Seconds of inactivity above which a gap is idle [default: 120]
    #[arg(long, global = true)]
    pub idle_threshold: Option<f64>,
    /// Subtract whole idle gaps or only their excess over the threshold
    #[arg(long, global = true, value_parser = ["whole-gap", "excess"])]
    pub idle_attribution: Option<String>,

    /// [default: 0.5]
    #[arg(long, global = true)]
    pub l2_theta: Option<f64>,
    /// Projected-gradient tolerance [default: 1e-6]
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// [default: 500]
    #[arg(long, global = true)]
    pub max_iter: Option<usize>,
    /// Fit a condition effect
    #[arg(long, global = true, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    pub with_condition: Option<bool>,
    /// Condition coded as treated [default: last in sort order]
    #[arg(long, global = true)]
    pub treatment: Option<String>,

    /// Minimum students per curve point [default: 10]
    #[arg(long, global = true)]
    pub min_n: Option<usize>,
    /// [default: 0.4]
    #[arg(long, global = true)]
    pub high_error: Option<f64>,
    /// [default: 0.01]
    #[arg(long, global = true)]
    pub flat_slope: Option<f64>,

    /// Simulated students [default: 100]
    #[arg(long, global = true)]
    pub students: Option<usize>,
    /// [default: adaptive]
    #[arg(long, global = true, value_parser = ["adaptive", "fixed"])]
    pub selection: Option<String>,
    /// Disable mastered-step skipping
    #[arg(long, global = true, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    pub no_skip: Option<bool>,
    /// Problems per simulated student [default: unlimited]
    #[arg(long, global = true)]
    pub max_problems: Option<usize>,

    /// Row errors reported before counting only [default: 20]
    #[arg(long, global = true)]
    pub max_row_errors: Option<usize>,
    /// Drop bad log rows instead of failing
    #[arg(long, global = true, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    pub lenient: Option<bool>,

    #[arg(skip)]
    pub columns: Option<FormatSpec>,
    #[arg(skip)]
    pub bkt: Option<BktFitConfig>,
    #[arg(skip)]
    pub policies: Option<Vec<PolicyConfig>>,
}

impl Settings {
    /// Overlays every value set in `file` onto `self`.
    pub fn overlay(&self, file: &Settings) -> Settings {
        let mut base = serde_json::to_value(self).expect("settings serialize");
        let top = serde_json::to_value(file).expect("settings serialize");
        if let (Value::Object(b), Value::Object(t)) = (&mut base, top) {
            for (k, v) in t {
                if !v.is_null() {
                    b.insert(k, v);
                }
            }
        }
        let mut merged: Settings = serde_json::from_value(base).expect("settings deserialize");
        merged.config = self.config.clone();
        merged
    }

    pub fn load_file(path: &Path) -> Result<Settings, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

/// Concrete values after defaults, shared by every command. Paths, the
/// output directory and the thread count are not part of it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Effective {
    pub seed: u64,
    pub mastery_threshold: f64,
    pub overpractice_threshold: f64,
    pub time: TimeConfig,
    pub afm: AfmConfig,
    pub bkt: BktFitConfig,
    pub min_n: usize,
    pub flags: FlagConfig,
    pub students: usize,
    pub policy: PolicyConfig,
    pub policies: Option<Vec<PolicyConfig>>,
    pub target_kc: Option<String>,
    pub merge_kcs: Option<Vec<String>>,
    pub columns: FormatSpec,
    pub ingest: IngestOptions,
}

impl Effective {
    pub fn resolve(s: &Settings) -> Result<Self, String> {
        let seed = s.seed.unwrap_or(0);
        let mastery = s.mastery_threshold.unwrap_or(redesign_core::DEFAULT_MASTERY_THRESHOLD);
        let over = s.overpractice_threshold.unwrap_or(redesign_core::DEFAULT_OVERPRACTICE_THRESHOLD);
        if !(over > 0.0 && over <= mastery && mastery <= 1.0) {
            return Err(format!(
                "thresholds must satisfy 0 < overpractice ({over}) <= mastery ({mastery}) <= 1"
            ));
        }
        let idle = s.idle_threshold.unwrap_or(redesign_core::DEFAULT_IDLE_THRESHOLD_SECS);
        if !(idle >= 0.0 && idle.is_finite()) {
            return Err(format!("--idle-threshold must be a non-negative number, got {idle}"));
        }
        let attribution = match s.idle_attribution.as_deref() {
            None | Some("whole-gap") => IdleAttribution::WholeGap,
            Some("excess") => IdleAttribution::ExcessOverThreshold,
            Some(other) => return Err(format!("unknown idle attribution {other:?}")),
        };
        let defaults = AfmConfig::default();
        let afm = AfmConfig {
            l2_theta: s.l2_theta.unwrap_or(defaults.l2_theta),
            max_iter: s.max_iter.unwrap_or(defaults.max_iter),
            tol: s.tol.unwrap_or(defaults.tol),
            with_condition: s.with_condition.unwrap_or(false),
            treatment: s.treatment.clone(),
            ..defaults
        };
        if afm.l2_theta.is_nan() || afm.l2_theta <= 0.0 || afm.tol.is_nan() || afm.tol <= 0.0 {
            return Err("--l2-theta and --tol must be positive".into());
        }
        let selection = match s.selection.as_deref() {
            None | Some("adaptive") => Selection::Adaptive,
            Some("fixed") => Selection::FixedSequence,
            Some(other) => return Err(format!("unknown selection {other:?}")),
        };
        let policy = PolicyConfig {
            mastery_threshold: mastery,
            overpractice_threshold: over,
            skip_enabled: !s.no_skip.unwrap_or(false),
            selection,
            max_problems: s.max_problems.unwrap_or(usize::MAX),
            rng_seed: seed,
        };
        let policies = s.policies.clone().map(|list| {
            list.into_iter().map(|p| PolicyConfig { rng_seed: seed, ..p }).collect::<Vec<_>>()
        });
        for p in policies.iter().flatten() {
            p.validate().map_err(|e| e.to_string())?;
        }
        let flag_defaults = FlagConfig::default();
        Ok(Self {
            seed,
            mastery_threshold: mastery,
            overpractice_threshold: over,
            time: TimeConfig { idle_threshold_seconds: idle, attribution },
            afm,
            bkt: s.bkt.clone().unwrap_or_default(),
            min_n: s.min_n.unwrap_or(DEFAULT_MIN_N),
            flags: FlagConfig {
                high_error: s.high_error.unwrap_or(flag_defaults.high_error),
                flat_slope: s.flat_slope.unwrap_or(flag_defaults.flat_slope),
            },
            students: s.students.unwrap_or(DEFAULT_STUDENTS),
            policy,
            policies,
            target_kc: s.target_kc.clone(),
            merge_kcs: s
                .merge_kcs
                .as_deref()
                .map(|m| m.split(',').map(str::trim).filter(|k| !k.is_empty()).map(String::from).collect()),
            columns: s.columns.clone().unwrap_or_default(),
            ingest: IngestOptions {
                max_row_errors: s.max_row_errors.unwrap_or(IngestOptions::default().max_row_errors),
                lenient: s.lenient.unwrap_or(false),
            },
        })
    }
}

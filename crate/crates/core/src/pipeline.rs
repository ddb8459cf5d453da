//! End-to-end runs: configuration, strategy registry and multi-seed
//! backtests.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::backtest::{combine_strategies, run_backtest, BacktestConfig, BacktestResult, DEFAULT_COST_GRID};
use crate::classical::{csmom_signal, long_only, macd_signal, tsmom_signal, SignalMatrix, DEFAULT_DECILE, DEFAULT_LOOKBACK};
use crate::exec::Execution;
use crate::features::{assemble_tensor, ex_ante_volatility, FeatureSpec, FeatureTensor, VolatilityEstimates};
use crate::market_data::{ingest_csv, winsorize, ReturnsPanel, ValueKind, DEFAULT_WINSOR_SIGMAS, DEFAULT_WINSOR_SPAN};
use crate::metrics::DEFAULT_ROLLING_WINDOW;
use crate::models::{ArchitectureKind, ArchitectureSpec, Network};
use crate::training::{
    arch_for, expanding_window, random_search, split_samples, window_bounds, LogRow, SampleSource, SearchOutcome,
    WindowConfig, WindowReport,
};
use crate::{Error, Result};

/// Training cost charged by the `_reg` strategy variants.
pub const DEFAULT_REG_COST_BPS: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Classical {
    LongOnly,
    Tsmom,
    Macd,
    Csmom,
}

/// A single signal generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Leaf {
    Classical(Classical),
    /// `regularized` trains with turnover costs.
    Model { kind: ArchitectureKind, regularized: bool },
}

impl Leaf {
    pub fn is_model(self) -> bool {
        matches!(self, Leaf::Model { .. })
    }
}

impl fmt::Display for Leaf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Leaf::Classical(Classical::LongOnly) => f.write_str("long_only"),
            Leaf::Classical(Classical::Tsmom) => f.write_str("tsmom"),
            Leaf::Classical(Classical::Macd) => f.write_str("macd"),
            Leaf::Classical(Classical::Csmom) => f.write_str("csmom"),
            Leaf::Model { kind, regularized } => {
                write!(f, "{kind}")?;
                if *regularized {
                    f.write_str("_reg")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for Leaf {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Ok(match s.as_str() {
            "long_only" => Leaf::Classical(Classical::LongOnly),
            "tsmom" => Leaf::Classical(Classical::Tsmom),
            "macd" => Leaf::Classical(Classical::Macd),
            "csmom" => Leaf::Classical(Classical::Csmom),
            other => {
                let (base, regularized) = match other.strip_suffix("_reg") {
                    Some(b) => (b, true),
                    None => (other, false),
                };
                let kind = base
                    .parse::<ArchitectureKind>()
                    .map_err(|_| Error::invalid(format!("unknown strategy '{other}'")))?;
                Leaf::Model { kind, regularized }
            }
        })
    }
}

/// One leaf, or an equal-weight combination written `a+b`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Strategy {
    pub parts: Vec<Leaf>,
}

impl Strategy {
    pub fn is_combination(&self) -> bool {
        self.parts.len() > 1
    }

    pub fn is_seeded(&self) -> bool {
        self.parts.iter().any(|l| l.is_model())
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.parts.iter().map(Leaf::to_string).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts = s.split('+').map(str::parse).collect::<Result<Vec<Leaf>>>()?;
        for (k, p) in parts.iter().enumerate() {
            if parts[..k].contains(p) {
                return Err(Error::invalid(format!("'{p}' appears twice in '{s}'")));
            }
        }
        Ok(Self { parts })
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.to_string()
    }
}

/// Parses a comma-separated strategy list.
pub fn parse_strategies(list: &str) -> Result<Vec<Strategy>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub format: ValueKind,
    pub start: Option<NaiveDate>,
    pub end: Option<NaiveDate>,
    pub winsorize: bool,
    pub winsor_span: usize,
    pub winsor_sigmas: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            format: ValueKind::Price,
            start: None,
            end: None,
            winsorize: true,
            winsor_span: DEFAULT_WINSOR_SPAN,
            winsor_sigmas: DEFAULT_WINSOR_SIGMAS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestSettings {
    /// Annualized volatility target for positions and portfolio rescaling.
    pub sigma_tgt: f64,
    pub portfolio_span: usize,
    pub lookback: usize,
    pub decile: f64,
    pub rolling_window: usize,
}

impl Default for BacktestSettings {
    fn default() -> Self {
        Self {
            sigma_tgt: 0.15,
            portfolio_span: crate::backtest::DEFAULT_PORTFOLIO_SPAN,
            lookback: DEFAULT_LOOKBACK,
            decile: DEFAULT_DECILE,
            rolling_window: DEFAULT_ROLLING_WINDOW,
        }
    }
}

/// Everything needed to reproduce a run from its input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub costs: Vec<f64>,
    pub output_dir: Option<PathBuf>,
    /// First signal date of the evaluation period. Defaults to the first
    /// out-of-sample date when a model is included.
    pub evaluation_start: Option<NaiveDate>,
    /// Lookback override for every model; `None` uses each kind's default.
    pub tau: Option<usize>,
    pub regularization_cost_bps: f64,
    pub backtest: BacktestSettings,
    pub features: FeatureSpec,
    pub training: WindowConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            strategies: parse_strategies("long_only,tsmom,macd,csmom").expect("static list"),
            seeds: vec![1],
            costs: DEFAULT_COST_GRID.to_vec(),
            output_dir: None,
            evaluation_start: None,
            tau: None,
            regularization_cost_bps: DEFAULT_REG_COST_BPS,
            backtest: BacktestSettings::default(),
            features: FeatureSpec::default(),
            training: WindowConfig::default(),
        }
    }
}

/// Manifest wrapper used when a config is read back from `manifest.json`.
#[derive(Deserialize)]
struct ManifestConfig {
    config: RunConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    /// Reads a TOML config, or the `config` entry of a run manifest when the
    /// file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            let m: ManifestConfig =
                serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
            Ok(m.config)
        } else {
            Self::from_toml_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::invalid("no strategies selected"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if self.costs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::invalid("costs must be non-negative"));
        }
        let b = &self.backtest;
        if !(b.sigma_tgt > 0.0) || b.portfolio_span < 2 || b.lookback == 0 || !(b.decile > 0.0 && b.decile <= 0.5) {
            return Err(Error::invalid("invalid backtest settings"));
        }
        if self.tau == Some(0) {
            return Err(Error::invalid("tau must be at least 1"));
        }
        if !(self.regularization_cost_bps >= 0.0) {
            return Err(Error::invalid("regularization cost must be non-negative"));
        }
        self.features.macd.validate()?;
        self.training.grid.validate()?;
        self.training.base.validate()
    }

    pub fn backtest_config(&self) -> BacktestConfig {
        BacktestConfig {
            sigma_tgt: self.backtest.sigma_tgt,
            portfolio_span: self.backtest.portfolio_span,
        }
    }

    pub fn model_arch(&self, kind: ArchitectureKind) -> ArchitectureSpec {
        let base = &self.training.base;
        ArchitectureSpec::new(kind, base.hidden_size, base.dropout_rate).with_tau(self.tau.unwrap_or(kind.default_tau()))
    }

    /// Training settings of a model leaf; unregularized leaves train
    /// without costs.
    pub fn window_config(&self, regularized: bool) -> WindowConfig {
        let mut w = self.training.clone();
        w.base.sigma_tgt = self.backtest.sigma_tgt;
        w.base.cost_bps_train = if regularized { self.regularization_cost_bps } else { 0.0 };
        w
    }

    fn leaves(&self) -> Vec<Leaf> {
        let mut out: Vec<Leaf> = Vec::new();
        for s in &self.strategies {
            for l in &s.parts {
                if !out.contains(l) {
                    out.push(*l);
                }
            }
        }
        out
    }
}

/// Reads, trims and optionally winsorizes the input panel.
pub fn load_panel(data: &DataConfig) -> Result<ReturnsPanel> {
    let path = data.path.as_ref().ok_or_else(|| Error::invalid("no input file given"))?;
    let panel = ingest_csv(path, data.format)?;
    let dates = panel.dates();
    let lo = data.start.map_or(0, |d| dates.partition_point(|x| *x < d));
    let hi = data.end.map_or(dates.len(), |d| dates.partition_point(|x| *x <= d));
    if hi < lo + 2 {
        return Err(Error::invalid("date range leaves fewer than two dates"));
    }
    let panel = if lo > 0 || hi < dates.len() {
        panel.slice_dates(lo..hi)
    } else {
        panel
    };
    if data.winsorize {
        winsorize(&panel, data.winsor_span, data.winsor_sigmas)
    } else {
        Ok(panel)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSummary {
    pub n_assets: usize,
    pub n_dates: usize,
    pub first_date: NaiveDate,
    pub last_date: NaiveDate,
    pub assets: Vec<String>,
}

impl PanelSummary {
    pub fn of(panel: &ReturnsPanel) -> Self {
        Self {
            n_assets: panel.n_assets(),
            n_dates: panel.n_dates(),
            first_date: panel.dates()[0],
            last_date: panel.dates()[panel.n_dates() - 1],
            assets: panel.assets().to_vec(),
        }
    }
}

/// One backtest of a strategy; `seed` is `None` for seed-free strategies.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: Option<u64>,
    pub result: BacktestResult,
    pub windows: Vec<WindowReport>,
    pub log: Vec<(usize, LogRow)>,
    /// Selected model of each window.
    pub networks: Vec<Network>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyRun {
    pub strategy: Strategy,
    pub runs: Vec<SeedRun>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub config: RunConfig,
    pub panel: PanelSummary,
    /// Index of the first signal date that is evaluated.
    pub evaluation_start: usize,
    pub evaluation_start_date: NaiveDate,
    pub strategies: Vec<StrategyRun>,
}

fn classical_signals(which: Classical, panel: &ReturnsPanel, cfg: &RunConfig) -> Result<SignalMatrix> {
    match which {
        Classical::LongOnly => Ok(long_only(panel)),
        Classical::Tsmom => tsmom_signal(panel, cfg.backtest.lookback),
        Classical::Macd => macd_signal(panel, &cfg.features.macd),
        Classical::Csmom => csmom_signal(panel, cfg.backtest.lookback, cfg.backtest.decile),
    }
}

/// Marks every signal before `start` unusable.
pub fn mask_before(signals: &mut SignalMatrix, start: usize) {
    let n = signals.n_assets();
    let end = (start * n).min(signals.usable.len());
    for u in &mut signals.usable[..end] {
        *u = false;
    }
}

/// Feature tensors keyed by lookback, built on demand.
pub struct TensorCache<'a> {
    panel: &'a ReturnsPanel,
    vol: &'a VolatilityEstimates,
    spec: &'a FeatureSpec,
    exec: Execution,
    tensors: BTreeMap<usize, FeatureTensor>,
}

impl<'a> TensorCache<'a> {
    pub fn new(panel: &'a ReturnsPanel, vol: &'a VolatilityEstimates, spec: &'a FeatureSpec, exec: Execution) -> Self {
        Self {
            panel,
            vol,
            spec,
            exec,
            tensors: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, tau: usize) -> Result<&FeatureTensor> {
        if !self.tensors.contains_key(&tau) {
            let t = match self.tensors.values().next() {
                Some(any) => any.with_tau(tau)?,
                None => assemble_tensor(self.panel, self.vol, self.spec, tau, self.exec)?,
            };
            self.tensors.insert(tau, t);
        }
        Ok(&self.tensors[&tau])
    }
}

/// Runs every configured strategy for every seed.
pub fn run(cfg: &RunConfig, exec: Execution) -> Result<RunOutput> {
    cfg.validate()?;
    let panel = load_panel(&cfg.data)?;
    run_on_panel(cfg, &panel, exec)
}

/// As [`run`] with an already loaded panel.
pub fn run_on_panel(cfg: &RunConfig, panel: &ReturnsPanel, exec: Execution) -> Result<RunOutput> {
    cfg.validate()?;
    let vol = ex_ante_volatility(panel, cfg.features.vol_span)?;
    let leaves = cfg.leaves();
    let dates = panel.dates();
    let eval_start = match cfg.evaluation_start {
        Some(d) => dates.partition_point(|x| *x < d),
        None if leaves.iter().any(|l| l.is_model()) => {
            window_bounds(dates, cfg.training.first_train_years, cfg.training.step_years)?[0].boundary
        }
        None => 0,
    };
    if eval_start + 2 > panel.n_dates() {
        return Err(Error::invalid("evaluation period is empty"));
    }
    let bt = cfg.backtest_config();
    let mut tensors = TensorCache::new(panel, &vol, &cfg.features, exec);

    let mut leaf_runs: BTreeMap<Leaf, Vec<SeedRun>> = BTreeMap::new();
    for leaf in &leaves {
        let runs = match *leaf {
            Leaf::Classical(c) => {
                let mut s = classical_signals(c, panel, cfg)?;
                mask_before(&mut s, eval_start);
                vec![SeedRun {
                    seed: None,
                    result: run_backtest(&s, panel, &vol, &bt)?,
                    windows: Vec::new(),
                    log: Vec::new(),
                    networks: Vec::new(),
                }]
            }
            Leaf::Model { kind, regularized } => {
                let arch = cfg.model_arch(kind);
                let tensor = tensors.get(arch.tau)?;
                let wcfg = cfg.window_config(regularized);
                let mut runs = Vec::new();
                for &seed in &cfg.seeds {
                    log::info!("training {leaf} with seed {seed}");
                    let ex = expanding_window(panel, &vol, tensor, &arch, &wcfg, seed, exec)?;
                    let mut s = ex.signals;
                    mask_before(&mut s, eval_start);
                    runs.push(SeedRun {
                        seed: Some(seed),
                        result: run_backtest(&s, panel, &vol, &bt)?,
                        windows: ex.windows,
                        log: ex.log,
                        networks: ex.networks,
                    });
                }
                runs
            }
        };
        leaf_runs.insert(*leaf, runs);
    }

    let mut strategies = Vec::new();
    for strategy in &cfg.strategies {
        let runs = if strategy.is_combination() {
            let seeds: Vec<Option<u64>> = if strategy.is_seeded() {
                cfg.seeds.iter().map(|s| Some(*s)).collect()
            } else {
                vec![None]
            };
            let weights = vec![1.0 / strategy.parts.len() as f64; strategy.parts.len()];
            seeds
                .into_iter()
                .map(|seed| {
                    let parts: Vec<&BacktestResult> = strategy
                        .parts
                        .iter()
                        .map(|l| {
                            let runs = &leaf_runs[l];
                            &runs.iter().find(|r| r.seed.is_none() || r.seed == seed).expect("leaf run").result
                        })
                        .collect();
                    Ok(SeedRun {
                        seed,
                        result: combine_strategies(&parts, &weights, &bt)?,
                        windows: Vec::new(),
                        log: Vec::new(),
                        networks: Vec::new(),
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            leaf_runs[&strategy.parts[0]].clone()
        };
        strategies.push(StrategyRun {
            strategy: strategy.clone(),
            runs,
        });
    }
    Ok(RunOutput {
        config: cfg.clone(),
        panel: PanelSummary::of(panel),
        evaluation_start: eval_start,
        evaluation_start_date: dates[eval_start],
        strategies,
    })
}

/// A model trained once on a panel with a chronological validation split.
pub struct TrainedModel {
    pub outcome: SearchOutcome,
    pub train_samples: usize,
    pub val_samples: usize,
}

/// Random search over the whole panel (or `..end`) for one model kind.
pub fn train_on_panel(
    cfg: &RunConfig,
    panel: &ReturnsPanel,
    kind: ArchitectureKind,
    regularized: bool,
    seed: u64,
    exec: Execution,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let vol = ex_ante_volatility(panel, cfg.features.vol_span)?;
    let arch = cfg.model_arch(kind);
    let tensor = assemble_tensor(panel, &vol, &cfg.features, arch.tau, exec)?;
    let wcfg = cfg.window_config(regularized);
    let src = SampleSource {
        panel,
        vol: &vol,
        tensor: &tensor,
        sigma_tgt_daily: wcfg.base.sigma_tgt_daily(),
    };
    let dims = (panel.n_assets(), tensor.n_features());
    let layout = Network::new(
        arch_for(&arch, &wcfg.base),
        dims.0,
        dims.1,
        &mut rand_chacha::ChaCha8Rng::seed_from_u64(0),
    )?;
    let all = src.build(&layout, 0..panel.n_dates().saturating_sub(1), true)?;
    let (train, val) = split_samples(&all, wcfg.train_fraction)?;
    if train.len() < 2 || val.len() < 2 {
        return Err(Error::invalid(format!(
            "too few samples ({} train, {} validation)",
            train.len(),
            val.len()
        )));
    }
    let outcome = random_search(&arch, &wcfg.grid, wcfg.iterations, &wcfg.base, seed, (&train, &val), dims, exec)?;
    Ok(TrainedModel {
        outcome,
        train_samples: train.len(),
        val_samples: val.len(),
    })
}

/// Dates in `range` whose full lag window is usable and whose next-day
/// return exists.
pub fn usable_dates(tensor: &FeatureTensor, range: std::ops::Range<usize>) -> Vec<usize> {
    let end = range.end.min(tensor.n_dates().saturating_sub(1));
    (range.start..end).filter(|&t| tensor.usable(t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_names_round_trip() {
        for s in ["long_only", "tsmom", "macd", "csmom", "slp", "dmn_reg", "slp+tsmom", "cnn+lstm+macd"] {
            assert_eq!(s.parse::<Strategy>().unwrap().to_string(), s);
        }
        assert!("tsmom+tsmom".parse::<Strategy>().is_err());
        assert!("transformer".parse::<Strategy>().is_err());
        let list = parse_strategies("long_only, tsmom,slp+csmom").unwrap();
        assert_eq!(list.len(), 3);
        assert!(list[2].is_combination() && list[2].is_seeded());
        assert!(!list[1].is_seeded());
    }

    #[test]
    fn partial_toml_keeps_defaults() {
        let cfg = RunConfig::from_toml_str(
            r#"
            strategies = ["tsmom", "slp_reg"]
            seeds = [1, 2]
            [data]
            path = "prices.csv"
            winsorize = false
            [training]
            iterations = 3
            [training.base]
            epochs = 20
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert!(!cfg.data.winsorize);
        assert_eq!(cfg.training.iterations, 3);
        assert_eq!(cfg.training.base.epochs, 20);
        assert_eq!(cfg.training.base.patience, 25);
        assert_eq!(cfg.costs, DEFAULT_COST_GRID.to_vec());
        cfg.validate().unwrap();
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn regularization_only_for_reg_variants() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.window_config(false).base.cost_bps_train, 0.0);
        assert_eq!(cfg.window_config(true).base.cost_bps_train, DEFAULT_REG_COST_BPS);
    }

    #[test]
    fn json_round_trip_of_config() {
        let cfg = RunConfig {
            strategies: parse_strategies("tsmom,slp+macd").unwrap(),
            evaluation_start: NaiveDate::from_ymd_opt(2001, 1, 2),
            ..RunConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}

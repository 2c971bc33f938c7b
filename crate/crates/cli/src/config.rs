//! Pipeline configuration: one TOML file covering every stage.
//!
//! Every field has a default, so an empty file is a complete
//! configuration; unknown keys are rejected by name. Values are range-
//! checked up front by the same validators the engine applies, so a bad
//! config fails before any stage starts. Per-stage seeds are derived
//! from the one global seed through named substreams.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use cadport_core::a3c::A3cConfig;
use cadport_core::backtest::BacktestConfig;
use cadport_core::baselines::Baseline;
use cadport_core::hedge::DdpgConfig;
use cadport_core::market::{Date, DEFAULT_SPLIT};
use cadport_core::rng::derive_seed;
use cadport_core::synth::{StockSpec, SynthConfig};
use cadport_core::tsne::TsneConfig;

/// The comparison row driven by the trained pipeline rather than a
/// classical rule.
pub const CAD_STRATEGY: &str = "cad";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Root of all randomness; stages derive named sub-seeds from it.
    pub seed: u64,
    /// Output directory; `--out` and `CADPORT_OUT` take precedence.
    pub out: PathBuf,
    pub data: DataSection,
    pub synth: SynthSection,
    pub tsne: TsneSection,
    pub dbscan: DbscanSection,
    pub a3c: A3cSection,
    pub ddpg: DdpgSection,
    pub backtest: BacktestSection,
    pub compare: CompareSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            out: PathBuf::from("out"),
            data: DataSection::default(),
            synth: SynthSection::default(),
            tsne: TsneSection::default(),
            dbscan: DbscanSection::default(),
            a3c: A3cSection::default(),
            ddpg: DdpgSection::default(),
            backtest: BacktestSection::default(),
            compare: CompareSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// `symbol,file` listing of OHLCV files; paths resolve relative to
    /// the manifest. Unset means "use the synth stage's output".
    pub manifest: Option<PathBuf>,
    /// Train / validation / test record counts.
    pub split: (usize, usize, usize),
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { manifest: None, split: DEFAULT_SPLIT }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub periods: usize,
    /// First calendar day, `YYYY-MM-DD`.
    pub start: String,
    pub stocks: Vec<SynthStock>,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection { periods: 2200, start: "2010-01-04".into(), stocks: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthStock {
    pub symbol: String,
    #[serde(default = "default_initial_price")]
    pub initial: f64,
    #[serde(default)]
    pub drift: f64,
    #[serde(default)]
    pub vol: f64,
}

fn default_initial_price() -> f64 {
    100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneSection {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for TsneSection {
    fn default() -> Self {
        let core = TsneConfig::default();
        TsneSection {
            perplexity: core.perplexity,
            iterations: core.iterations,
            learning_rate: core.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DbscanSection {
    /// Neighborhood radius; unset means the median-4NN heuristic.
    pub eps: Option<f64>,
    pub min_pts: usize,
}

impl Default for DbscanSection {
    fn default() -> Self {
        DbscanSection { eps: None, min_pts: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct A3cSection {
    pub window: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub conv_channels: usize,
    pub critic_head: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub lambda: f64,
    pub epochs: usize,
    pub gamma: f64,
    pub workers: usize,
    pub commission: f64,
}

impl Default for A3cSection {
    fn default() -> Self {
        let core = A3cConfig::default();
        A3cSection {
            window: core.window,
            hidden1: core.hidden1,
            hidden2: core.hidden2,
            conv_channels: core.conv_channels,
            critic_head: core.critic_head,
            learning_rate: core.learning_rate,
            batch: core.batch,
            lambda: core.lambda,
            epochs: core.epochs,
            gamma: core.gamma,
            workers: core.workers,
            commission: core.commission,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdpgSection {
    /// Hedging can be disabled; the backtest then weighs clusters
    /// uniformly and the train-ddpg stage refuses to run.
    pub enabled: bool,
    pub window: usize,
    pub encoder: usize,
    pub mixer: usize,
    pub head: usize,
    pub episodes: usize,
    pub gamma: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub batch: usize,
    pub replay: usize,
    pub max_steps: usize,
    pub ou_theta: f64,
    pub ou_mu: f64,
    pub ou_sigma: f64,
    pub ou_sigma_final: f64,
    pub ou_dt: f64,
}

impl Default for DdpgSection {
    fn default() -> Self {
        let core = DdpgConfig::default();
        DdpgSection {
            enabled: true,
            window: core.window,
            encoder: core.encoder,
            mixer: core.mixer,
            head: core.head,
            episodes: core.episodes,
            gamma: core.gamma,
            tau: core.tau,
            learning_rate: core.learning_rate,
            batch: core.batch,
            replay: core.replay,
            max_steps: core.max_steps,
            ou_theta: core.ou_theta,
            ou_mu: core.ou_mu,
            ou_sigma: core.ou_sigma,
            ou_sigma_final: core.ou_sigma_final,
            ou_dt: core.ou_dt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BacktestSection {
    pub initial_value: f64,
    pub commission: f64,
}

impl Default for BacktestSection {
    fn default() -> Self {
        let core = BacktestConfig::default();
        BacktestSection { initial_value: core.initial_value, commission: core.commission }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    /// Rows of the comparison table, in order.
    pub strategies: Vec<String>,
}

impl Default for CompareSection {
    fn default() -> Self {
        let mut strategies = vec![CAD_STRATEGY.to_string()];
        strategies.extend(Baseline::ALL.iter().map(|b| b.name().to_string()));
        CompareSection { strategies }
    }
}

impl PipelineConfig {
    /// Parses and validates a TOML file; a missing `path` of `None`
    /// yields the all-defaults configuration.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            None => PipelineConfig::default(),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("in config {}", p.display()))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.data.split;
        if a == 0 || b == 0 || c == 0 {
            bail!("data.split sizes {:?} must all be positive", self.data.split);
        }
        if self.synth.periods < 2 {
            bail!("synth.periods {} out of range: a walk needs at least 2", self.synth.periods);
        }
        Date::parse(&self.synth.start)
            .with_context(|| format!("synth.start '{}'", self.synth.start))?;
        for stock in &self.synth.stocks {
            self.synth_spec_of(stock)
                .validate_shallow()
                .with_context(|| format!("synth.stocks entry '{}'", stock.symbol))?;
        }
        if !(self.tsne.perplexity > 0.0) || !self.tsne.perplexity.is_finite() {
            bail!("tsne.perplexity {} out of range: must be positive", self.tsne.perplexity);
        }
        if self.tsne.iterations == 0 {
            bail!("tsne.iterations must be positive");
        }
        if !(self.tsne.learning_rate > 0.0) || !self.tsne.learning_rate.is_finite() {
            bail!(
                "tsne.learning_rate {} out of range: must be positive",
                self.tsne.learning_rate
            );
        }
        if let Some(eps) = self.dbscan.eps {
            if !(eps > 0.0) || !eps.is_finite() {
                bail!("dbscan.eps {eps} out of range: must be positive");
            }
        }
        if self.dbscan.min_pts == 0 {
            bail!("dbscan.min_pts must be positive");
        }
        self.a3c_config().validate().context("[a3c]")?;
        self.ddpg_config().validate().context("[ddpg]")?;
        self.backtest_config(0..1).validate().context("[backtest]")?;
        for name in &self.compare.strategies {
            if name != CAD_STRATEGY && Baseline::parse(name).is_err() {
                bail!(
                    "compare.strategies entry '{name}' is not a known strategy \
                     (cad or one of the classical rules)"
                );
            }
        }
        if self.compare.strategies.is_empty() {
            bail!("compare.strategies must name at least one strategy");
        }
        Ok(())
    }

    fn synth_spec_of(&self, stock: &SynthStock) -> StockSpec {
        StockSpec {
            symbol: stock.symbol.clone(),
            initial: stock.initial,
            drift: stock.drift,
            vol: stock.vol,
        }
    }

    /// The generation inputs for the synth stage.
    pub fn synth_inputs(&self) -> Result<(Vec<StockSpec>, SynthConfig)> {
        if self.synth.stocks.is_empty() {
            bail!("synth needs at least one [[synth.stocks]] entry");
        }
        let specs = self.synth.stocks.iter().map(|s| self.synth_spec_of(s)).collect();
        let cfg = SynthConfig {
            periods: self.synth.periods,
            start: Date::parse(&self.synth.start)?,
            seed: self.seed,
        };
        Ok((specs, cfg))
    }

    pub fn tsne_config(&self) -> TsneConfig {
        TsneConfig {
            perplexity: self.tsne.perplexity,
            iterations: self.tsne.iterations,
            learning_rate: self.tsne.learning_rate,
            seed: derive_seed(self.seed, "stage-embed"),
        }
    }

    /// Per-cluster agent settings; each cluster trains under its own
    /// derived seed.
    pub fn a3c_config_for(&self, cluster: usize) -> A3cConfig {
        A3cConfig {
            seed: derive_seed(self.seed, &format!("stage-train-a3c-{cluster}")),
            ..self.a3c_config()
        }
    }

    pub fn a3c_config(&self) -> A3cConfig {
        A3cConfig {
            window: self.a3c.window,
            hidden1: self.a3c.hidden1,
            hidden2: self.a3c.hidden2,
            conv_channels: self.a3c.conv_channels,
            critic_head: self.a3c.critic_head,
            learning_rate: self.a3c.learning_rate,
            batch: self.a3c.batch,
            lambda: self.a3c.lambda,
            epochs: self.a3c.epochs,
            gamma: self.a3c.gamma,
            workers: self.a3c.workers,
            commission: self.a3c.commission,
            seed: 0,
        }
    }

    pub fn ddpg_config(&self) -> DdpgConfig {
        DdpgConfig {
            window: self.ddpg.window,
            encoder: self.ddpg.encoder,
            mixer: self.ddpg.mixer,
            head: self.ddpg.head,
            episodes: self.ddpg.episodes,
            gamma: self.ddpg.gamma,
            tau: self.ddpg.tau,
            learning_rate: self.ddpg.learning_rate,
            batch: self.ddpg.batch,
            replay: self.ddpg.replay,
            max_steps: self.ddpg.max_steps,
            ou_theta: self.ddpg.ou_theta,
            ou_mu: self.ddpg.ou_mu,
            ou_sigma: self.ddpg.ou_sigma,
            ou_sigma_final: self.ddpg.ou_sigma_final,
            ou_dt: self.ddpg.ou_dt,
            seed: derive_seed(self.seed, "stage-train-ddpg"),
        }
    }

    pub fn backtest_config(&self, test: std::ops::Range<usize>) -> BacktestConfig {
        BacktestConfig {
            initial_value: self.backtest.initial_value,
            commission: self.backtest.commission,
            test,
            seed: derive_seed(self.seed, "stage-backtest"),
        }
    }
}

/// Early bounds for one synthetic stock, mirroring the generator's own
/// checks so config validation fails before any stage runs.
trait ValidateShallow {
    fn validate_shallow(&self) -> Result<()>;
}

impl ValidateShallow for StockSpec {
    fn validate_shallow(&self) -> Result<()> {
        if self.symbol.is_empty() || self.symbol.contains(',') {
            bail!("symbol '{}' must be non-empty and comma-free", self.symbol);
        }
        if !(self.initial > 0.0) || !self.initial.is_finite() {
            bail!("initial price {} out of range: must be positive", self.initial);
        }
        if !(self.drift > -1.0) || !self.drift.is_finite() {
            bail!("drift {} out of range: must exceed -1", self.drift);
        }
        if self.vol < 0.0 || !self.vol.is_finite() {
            bail!("vol {} out of range: must be non-negative", self.vol);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let cfg = PipelineConfig::parse("").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.a3c.window, 64);
        assert_eq!(cfg.a3c.learning_rate, 1e-4);
        assert_eq!(cfg.a3c.batch, 16);
        assert_eq!(cfg.a3c.gamma, 0.99);
        assert_eq!(cfg.ddpg.window, 64);
        assert_eq!(cfg.ddpg.learning_rate, 1e-4);
        assert_eq!(cfg.ddpg.batch, 32);
        assert_eq!(cfg.ddpg.tau, 0.02);
        assert_eq!(cfg.ddpg.replay, 10000);
        assert_eq!(cfg.backtest.commission, 5e-4);
        assert_eq!(cfg.backtest.initial_value, 1e6);
        assert_eq!(cfg.data.split, (1620, 180, 360));
        assert_eq!(cfg.compare.strategies.len(), 10);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = PipelineConfig::parse("[a3c]\nlearningrate = 0.1\n").unwrap_err();
        assert!(format!("{err:#}").contains("learningrate"), "{err:#}");
        let err = PipelineConfig::parse("colour = 3\n").unwrap_err();
        assert!(format!("{err:#}").contains("colour"), "{err:#}");
    }

    #[test]
    fn out_of_range_values_report_the_range() {
        let cfg = PipelineConfig::parse("[backtest]\ncommission = 0.5\n").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(format!("{err:#}").contains("0.5"), "{err:#}");
        assert!(format!("{err:#}").contains("[0, 0.01]"), "{err:#}");

        let cfg = PipelineConfig::parse("[tsne]\nperplexity = -2.0\n").unwrap();
        assert!(cfg.validate().is_err());

        let cfg = PipelineConfig::parse("[data]\nsplit = [0, 10, 10]\n").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bad_dates_and_rosters_are_rejected() {
        let cfg = PipelineConfig::parse("[synth]\nstart = \"2010/01/04\"\n").unwrap();
        assert!(cfg.validate().is_err());

        let cfg = PipelineConfig::parse("[compare]\nstrategies = [\"bah\", \"momentum\"]\n")
            .unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(format!("{err:#}").contains("momentum"), "{err:#}");
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = PipelineConfig::parse("[a3c]\nwindow = 8\n").unwrap();
        assert_eq!(cfg.a3c.window, 8);
        assert_eq!(cfg.a3c.hidden1, 32);
        assert_eq!(cfg.ddpg.replay, 10000);
    }

    #[test]
    fn stage_seeds_are_distinct_and_stable() {
        let cfg = PipelineConfig::default();
        let embed = cfg.tsne_config().seed;
        let ddpg = cfg.ddpg_config().seed;
        let a3c0 = cfg.a3c_config_for(0).seed;
        let a3c1 = cfg.a3c_config_for(1).seed;
        assert_ne!(embed, ddpg);
        assert_ne!(a3c0, a3c1);
        assert_eq!(a3c0, cfg.a3c_config_for(0).seed);
    }

    #[test]
    fn synth_inputs_require_stocks() {
        let cfg = PipelineConfig::default();
        assert!(cfg.synth_inputs().is_err());
        let cfg = PipelineConfig::parse(
            "[[synth.stocks]]\nsymbol = \"A\"\ndrift = 0.01\n[[synth.stocks]]\nsymbol = \"B\"\n",
        )
        .unwrap();
        let (specs, sc) = cfg.synth_inputs().unwrap();
        assert_eq!(specs.len(), 2);
        assert_eq!(specs[0].initial, 100.0);
        assert_eq!(specs[0].drift, 0.01);
        assert_eq!(sc.periods, 2200);
    }
}

//! The pipeline stages behind each subcommand.
//!
//! Every stage follows the same shape: resolve upstream stamps (failing
//! with the name of the missing stage), fingerprint its inputs, no-op
//! when the stamp already matches, otherwise compute, write artifacts,
//! and stamp last. Stages communicate only through files, so any stage
//! can be re-run in isolation.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use cadport_core::a3c::a3c_train;
use cadport_core::backtest::{
    cad_schedule, compare_strategies, curve_to_csv, run_backtest, BacktestConfig,
    BaselineStrategy, CadArtifacts, HedgeArtifacts, ScheduledWeights, WeightStrategy,
};
use cadport_core::baselines::Baseline;
use cadport_core::dbscan::{dbscan_keyed, ClusterParams};
use cadport_core::hedge::{aggregate_cluster_indices, cluster_return_matrix, ddpg_train};
use cadport_core::linalg::Matrix;
use cadport_core::market::{
    align_universe, build_state_tensor, compute_indicators, normalize_panel, parse_ohlcv,
    split_dataset, DataSplit, IndicatorPanel, WARMUP_RECORDS,
};
use cadport_core::rng::derive_seed;
use cadport_core::synth::make_synthetic_market;
use cadport_core::tsne::{fit_tsne, FeatureMatrix};

use crate::artifacts;
use crate::checkpoint;
use crate::config::{PipelineConfig, CAD_STRATEGY};
use crate::store::{self, Stage};

/// Everything a stage invocation needs besides its own inputs.
pub struct StageContext<'a> {
    pub cfg: &'a PipelineConfig,
    pub out: &'a Path,
    pub force: bool,
}

fn core_err(e: cadport_core::Error) -> anyhow::Error {
    anyhow::anyhow!("{e}")
}

fn section_toml<T: Serialize>(section: &T) -> Result<String> {
    toml::to_string(section).context("serializing a config section")
}

fn skip_if_current(ctx: &StageContext, stage: Stage, fp: &str) -> bool {
    if !ctx.force && store::is_current(ctx.out, stage, fp) {
        println!("{stage}: up to date");
        return true;
    }
    false
}

// -------- synth --------

pub fn stage_synth(ctx: &StageContext) -> Result<()> {
    let stage = Stage::Synth;
    let (specs, synth_cfg) = ctx.cfg.synth_inputs()?;
    let fp = store::fingerprint(&[
        ("synth", &section_toml(&ctx.cfg.synth)?),
        ("seed", &ctx.cfg.seed.to_string()),
    ]);
    if skip_if_current(ctx, stage, &fp) {
        return Ok(());
    }
    let universe = make_synthetic_market(&specs, &synth_cfg).map_err(core_err)?;
    let dir = stage.dir(ctx.out);
    let mut entries = Vec::with_capacity(universe.len());
    for series in &universe {
        let file = format!("{}.csv", series.symbol);
        artifacts::write(&dir.join(&file), &series.to_csv())?;
        entries.push((series.symbol.clone(), file));
    }
    artifacts::write(&dir.join("manifest.csv"), &artifacts::manifest_to_csv(&entries))?;
    store::write_stamp(ctx.out, stage, &fp)?;
    println!(
        "{stage}: {} stocks x {} records -> {}",
        universe.len(),
        synth_cfg.periods,
        dir.display()
    );
    Ok(())
}

// -------- ingest --------

/// The manifest the ingest stage reads: an explicit [data].manifest, or
/// the synth stage's output when none is configured.
fn resolve_manifest(ctx: &StageContext) -> Result<(PathBuf, String)> {
    match &ctx.cfg.data.manifest {
        Some(path) => Ok((path.clone(), String::from("-"))),
        None => match store::read_stamp(ctx.out, Stage::Synth) {
            Some(stamp) => Ok((Stage::Synth.dir(ctx.out).join("manifest.csv"), stamp)),
            None => bail!(
                "stage 'ingest' needs market data: set [data].manifest \
                 or run `cadport synth` first"
            ),
        },
    }
}

pub fn stage_ingest(ctx: &StageContext) -> Result<()> {
    let stage = Stage::Ingest;
    let (manifest_path, synth_stamp) = resolve_manifest(ctx)?;
    let entries = artifacts::manifest_from_csv(&artifacts::read(&manifest_path)?)
        .with_context(|| format!("in manifest {}", manifest_path.display()))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut file_hashes = String::new();
    for (_, file) in &entries {
        file_hashes.push_str(&store::hash_file(&base.join(file))?);
    }
    let fp = store::fingerprint(&[
        ("data", &section_toml(&ctx.cfg.data)?),
        ("manifest", &store::hash_file(&manifest_path)?),
        ("files", &file_hashes),
        ("synth", &synth_stamp),
    ]);
    if skip_if_current(ctx, stage, &fp) {
        return Ok(());
    }

    let mut series = Vec::with_capacity(entries.len());
    for (symbol, file) in &entries {
        let path = base.join(file);
        let text = artifacts::read(&path)?;
        series.push(
            parse_ohlcv(&text, symbol)
                .map_err(core_err)
                .with_context(|| format!("in {}", path.display()))?,
        );
    }
    let aligned = align_universe(series).map_err(core_err)?;
    let ratios = artifacts_ratio_matrix(&aligned)?;
    let mut panels = Vec::with_capacity(aligned.len());
    for s in &aligned {
        panels.push(compute_indicators(s).map_err(core_err)?);
    }
    if panels[0].records() != ratios.rows {
        bail!(
            "indicator panels cover {} records but the ratio matrix has {}",
            panels[0].records(),
            ratios.rows
        );
    }
    let split = split_dataset(panels[0].records(), ctx.cfg.data.split).map_err(core_err)?;
    let dir = stage.dir(ctx.out);
    let mut symbols = Vec::with_capacity(panels.len());
    for panel in &panels {
        artifacts::write(
            &artifacts::panel_path(&dir, &panel.symbol),
            &artifacts::panel_to_csv(panel),
        )?;
        symbols.push(panel.symbol.clone());
    }
    artifacts::write(&dir.join("ratios.csv"), &artifacts::matrix_to_csv(&symbols, &ratios)?)?;
    artifacts::write(&dir.join("split.csv"), &artifacts::split_to_csv(&split))?;
    store::write_stamp(ctx.out, stage, &fp)?;
    println!(
        "{stage}: {} stocks x {} records ({} train / {} validation / {} test) -> {}",
        symbols.len(),
        ratios.rows,
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        dir.display()
    );
    Ok(())
}

fn artifacts_ratio_matrix(aligned: &[cadport_core::market::OhlcvSeries]) -> Result<Matrix> {
    cadport_core::market::ratio_matrix(aligned, WARMUP_RECORDS).map_err(core_err)
}

// -------- shared loaders --------

/// The ingested universe as later stages see it. Panels hold raw
/// indicator values; the embedding summarizes them directly, while
/// state tensors go through [`normalized_panels`] first.
pub struct Universe {
    pub symbols: Vec<String>,
    pub panels: Vec<IndicatorPanel>,
    pub ratios: Matrix,
    pub split: DataSplit,
}

pub fn load_universe(out: &Path) -> Result<Universe> {
    let dir = Stage::Ingest.dir(out);
    let (symbols, ratios) = artifacts::matrix_from_csv(&artifacts::read(&dir.join("ratios.csv"))?)?;
    let split = artifacts::split_from_csv(&artifacts::read(&dir.join("split.csv"))?)?;
    let mut panels = Vec::with_capacity(symbols.len());
    for symbol in &symbols {
        let path = artifacts::panel_path(&dir, symbol);
        panels.push(artifacts::panel_from_csv(&artifacts::read(&path)?, symbol)?);
    }
    for panel in &panels {
        if panel.records() != ratios.rows {
            bail!(
                "panel {} covers {} records but the ratio matrix has {}",
                panel.symbol,
                panel.records(),
                ratios.rows
            );
        }
    }
    Ok(Universe { symbols, panels, ratios, split })
}

/// Cluster member indices (into universe symbol order), noise excluded.
fn load_members(out: &Path, universe: &Universe) -> Result<Vec<Vec<usize>>> {
    let path = Stage::Cluster.dir(out).join("clusters.csv");
    let (symbols, assignment) = artifacts::clusters_from_csv(&artifacts::read(&path)?)?;
    if symbols != universe.symbols {
        bail!("cluster file does not match the ingested universe; rerun `cadport cluster`");
    }
    let members = assignment.members();
    if members.is_empty() {
        bail!("clustering labeled every stock as noise; nothing to trade");
    }
    for (c, m) in members.iter().enumerate() {
        if m.is_empty() {
            bail!("cluster {c} has no members; the cluster file is inconsistent");
        }
    }
    Ok(members)
}

/// Per-stock z-scores over the training range, the form the state
/// tensors expect. Statistics freeze at the train boundary, so test
/// records never leak into them.
fn normalized_panels(u: &Universe) -> Result<Vec<IndicatorPanel>> {
    let mut out = Vec::with_capacity(u.panels.len());
    for panel in &u.panels {
        let (normalized, _) = normalize_panel(panel, u.split.train.clone()).map_err(core_err)?;
        out.push(normalized);
    }
    Ok(out)
}

fn select_columns(m: &Matrix, cols: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(m.rows, cols.len());
    for r in 0..m.rows {
        for (k, &c) in cols.iter().enumerate() {
            out.set(r, k, m.get(r, c));
        }
    }
    out
}

// -------- embed --------

pub fn stage_embed(ctx: &StageContext) -> Result<()> {
    let stage = Stage::Embed;
    let ingest = store::require(ctx.out, Stage::Ingest, stage)?;
    let fp = store::fingerprint(&[
        ("tsne", &section_toml(&ctx.cfg.tsne)?),
        ("seed", &ctx.cfg.seed.to_string()),
        ("ingest", &ingest),
    ]);
    if skip_if_current(ctx, stage, &fp) {
        return Ok(());
    }
    let u = load_universe(ctx.out)?;
    let features = FeatureMatrix::from_panels(&u.panels, u.split.train.clone())
        .map_err(core_err)?
        .standardized();
    let embedding = fit_tsne(&features, &ctx.cfg.tsne_config()).map_err(core_err)?;
    let dir = stage.dir(ctx.out);
    artifacts::write(
        &dir.join("embedding.csv"),
        &artifacts::embedding_to_csv(&u.symbols, &embedding.points)?,
    )?;
    let mut kl = String::from("iteration,kl\n");
    for (i, v) in embedding.kl_trace.iter().enumerate() {
        kl.push_str(&format!("{i},{v}\n"));
    }
    artifacts::write(&dir.join("kl.csv"), &kl)?;
    store::write_stamp(ctx.out, stage, &fp)?;
    println!("{stage}: {} stocks embedded -> {}", u.symbols.len(), dir.display());
    Ok(())
}

// -------- cluster --------

pub fn stage_cluster(ctx: &StageContext) -> Result<()> {
    let stage = Stage::Cluster;
    let embed = store::require(ctx.out, Stage::Embed, stage)?;
    let fp = store::fingerprint(&[
        ("dbscan", &section_toml(&ctx.cfg.dbscan)?),
        ("embed", &embed),
    ]);
    if skip_if_current(ctx, stage, &fp) {
        return Ok(());
    }
    let path = Stage::Embed.dir(ctx.out).join("embedding.csv");
    let (symbols, points) = artifacts::embedding_from_csv(&artifacts::read(&path)?)?;
    let eps = match ctx.cfg.dbscan.eps {
        Some(eps) => eps,
        None => ClusterParams::from_embedding(&points).map_err(core_err)?.eps,
    };
    let params = ClusterParams::new(eps, ctx.cfg.dbscan.min_pts).map_err(core_err)?;
    let keys: Vec<&str> = symbols.iter().map(String::as_str).collect();
    let assignment = dbscan_keyed(&points, &keys, params).map_err(core_err)?;
    let dir = stage.dir(ctx.out);
    artifacts::write(&dir.join("clusters.csv"), &artifacts::clusters_to_csv(&symbols, &assignment)?)?;
    store::write_stamp(ctx.out, stage, &fp)?;
    println!(
        "{stage}: {} clusters, {} noise stocks (eps {eps:.4}) -> {}",
        assignment.n_clusters,
        assignment.noise_count(),
        dir.display()
    );
    Ok(())
}

// -------- train-a3c --------

pub fn stage_train_a3c(ctx: &StageContext) -> Result<()> {
    let stage = Stage::TrainA3c;
    let ingest = store::require(ctx.out, Stage::Ingest, stage)?;
    let cluster = store::require(ctx.out, Stage::Cluster, stage)?;
    let fp = store::fingerprint(&[
        ("a3c", &section_toml(&ctx.cfg.a3c)?),
        ("seed", &ctx.cfg.seed.to_string()),
        ("ingest", &ingest),
        ("cluster", &cluster),
    ]);
    if skip_if_current(ctx, stage, &fp) {
        return Ok(());
    }
    let u = load_universe(ctx.out)?;
    let members = load_members(ctx.out, &u)?;
    let norm = normalized_panels(&u)?;
    let dir = stage.dir(ctx.out);
    for (c, m) in members.iter().enumerate() {
        let refs: Vec<&IndicatorPanel> = m.iter().map(|&j| &norm[j]).collect();
        let states = build_state_tensor(&refs, &vec![0.0; m.len()]).map_err(core_err)?;
        let sub_ratios = select_columns(&u.ratios, m);
        let trained = a3c_train(&states, &sub_ratios, u.split.train.clone(), &ctx.cfg.a3c_config_for(c))
            .map_err(core_err)
            .with_context(|| format!("training cluster {c}"))?;
        if trained.diverged {
            bail!("cluster {c}: training diverged; lower [a3c].learning_rate");
        }
        checkpoint::save(&dir.join(format!("actor_{c}.cpk")), &trained.actor)?;
        checkpoint::save(&dir.join(format!("critic_{c}.cpk")), &trained.critic)?;
        artifacts::write(
            &dir.join(format!("trace_{c}.csv")),
            &artifacts::a3c_trace_to_csv(&trained.trace),
        )?;
        let accuracy = trained.trace.last().map(|e| e.accuracy).unwrap_or(f64::NAN);
        println!("{stage}: cluster {c} ({} stocks) final accuracy {accuracy:.3}", m.len());
    }
    store::write_stamp(ctx.out, stage, &fp)?;
    println!("{stage}: {} agents -> {}", members.len(), dir.display());
    Ok(())
}

// -------- train-ddpg --------

pub fn stage_train_ddpg(ctx: &StageContext) -> Result<()> {
    let stage = Stage::TrainDdpg;
    if !ctx.cfg.ddpg.enabled {
        bail!("hedging is disabled ([ddpg].enabled = false); nothing to train");
    }
    let ingest = store::require(ctx.out, Stage::Ingest, stage)?;
    let cluster = store::require(ctx.out, Stage::Cluster, stage)?;
    let fp = store::fingerprint(&[
        ("ddpg", &section_toml(&ctx.cfg.ddpg)?),
        ("seed", &ctx.cfg.seed.to_string()),
        ("ingest", &ingest),
        ("cluster", &cluster),
    ]);
    if skip_if_current(ctx, stage, &fp) {
        return Ok(());
    }
    let u = load_universe(ctx.out)?;
    let members = load_members(ctx.out, &u)?;
    let norm = normalized_panels(&u)?;
    let panel_refs: Vec<Vec<&IndicatorPanel>> = members
        .iter()
        .map(|m| m.iter().map(|&j| &norm[j]).collect())
        .collect();
    let aggregate = aggregate_cluster_indices(&panel_refs).map_err(core_err)?;
    let returns = cluster_return_matrix(&u.ratios, &members).map_err(core_err)?;
    let trained = ddpg_train(&aggregate, &returns, u.split.train.clone(), &ctx.cfg.ddpg_config())
        .map_err(core_err)?;
    if trained.diverged {
        bail!("hedger training diverged; lower [ddpg].learning_rate");
    }
    let dir = stage.dir(ctx.out);
    checkpoint::save(&dir.join("hedge_actor.cpk"), &trained.actor)?;
    artifacts::write(
        &dir.join("reward_trace.csv"),
        &artifacts::reward_trace_to_csv(&trained.trace),
    )?;
    store::write_stamp(ctx.out, stage, &fp)?;
    println!(
        "{stage}: {} clusters hedged over {} steps -> {}",
        members.len(),
        trained.trace.len(),
        dir.display()
    );
    Ok(())
}

// -------- backtest and compare --------

/// Upstream stamps the composed strategy depends on.
struct CadDeps {
    cluster: String,
    a3c: String,
    ddpg: String,
}

fn require_cad(ctx: &StageContext, dependent: Stage) -> Result<CadDeps> {
    let cluster = store::require(ctx.out, Stage::Cluster, dependent)?;
    let a3c = store::require(ctx.out, Stage::TrainA3c, dependent)?;
    let ddpg = if ctx.cfg.ddpg.enabled {
        store::require(ctx.out, Stage::TrainDdpg, dependent)?
    } else {
        String::from("-")
    };
    Ok(CadDeps { cluster, a3c, ddpg })
}

/// Replays the trained pipeline into per-period weight rows for the
/// test range.
fn build_cad_schedule(
    ctx: &StageContext,
    u: &Universe,
    bt: &BacktestConfig,
) -> Result<ScheduledWeights> {
    let members = load_members(ctx.out, u)?;
    let norm = normalized_panels(u)?;
    let all_refs: Vec<&IndicatorPanel> = norm.iter().collect();
    let states = build_state_tensor(&all_refs, &vec![0.0; norm.len()]).map_err(core_err)?;
    let a3c_dir = Stage::TrainA3c.dir(ctx.out);
    let mut actors = Vec::with_capacity(members.len());
    for c in 0..members.len() {
        actors.push(checkpoint::load(&a3c_dir.join(format!("actor_{c}.cpk")))?);
    }
    let a3c_core = ctx.cfg.a3c_config();
    let ddpg_core = ctx.cfg.ddpg_config();
    let hedged = if ctx.cfg.ddpg.enabled {
        let panel_refs: Vec<Vec<&IndicatorPanel>> = members
            .iter()
            .map(|m| m.iter().map(|&j| &norm[j]).collect())
            .collect();
        let aggregate = aggregate_cluster_indices(&panel_refs).map_err(core_err)?;
        let actor = checkpoint::load(&Stage::TrainDdpg.dir(ctx.out).join("hedge_actor.cpk"))?;
        Some((actor, aggregate))
    } else {
        None
    };
    let hedge = hedged.as_ref().map(|(actor, aggregate)| HedgeArtifacts {
        actor,
        cfg: &ddpg_core,
        aggregate,
    });
    let art = CadArtifacts {
        clusters: &members,
        actors: &actors,
        a3c: &a3c_core,
        states: &states,
        hedge,
    };
    cad_schedule(bt, &art, &u.ratios).map_err(core_err)
}

pub fn stage_backtest(ctx: &StageContext) -> Result<()> {
    let stage = Stage::Backtest;
    let ingest = store::require(ctx.out, Stage::Ingest, stage)?;
    let deps = require_cad(ctx, stage)?;
    let fp = store::fingerprint(&[
        ("backtest", &section_toml(&ctx.cfg.backtest)?),
        ("a3c", &section_toml(&ctx.cfg.a3c)?),
        ("ddpg", &section_toml(&ctx.cfg.ddpg)?),
        ("seed", &ctx.cfg.seed.to_string()),
        ("ingest", &ingest),
        ("cluster", &deps.cluster),
        ("train-a3c", &deps.a3c),
        ("train-ddpg", &deps.ddpg),
    ]);
    if skip_if_current(ctx, stage, &fp) {
        return Ok(());
    }
    let u = load_universe(ctx.out)?;
    let bt = ctx.cfg.backtest_config(u.split.test.clone());
    let mut schedule = build_cad_schedule(ctx, &u, &bt)?;
    let run = run_backtest(&bt, &u.ratios, &mut schedule).map_err(core_err)?;
    let dir = stage.dir(ctx.out);
    artifacts::write(&dir.join("wealth.csv"), &curve_to_csv(&run.curve))?;
    artifacts::write(&dir.join("weights.csv"), &artifacts::weights_to_csv(&run.weights)?)?;
    artifacts::write(&dir.join("ledger.csv"), &artifacts::ledger_to_csv(&run.ledger))?;
    artifacts::write(&dir.join("metrics.txt"), &run.report.to_kv_text())?;
    store::write_stamp(ctx.out, stage, &fp)?;
    println!(
        "{stage}: final value {:.2}% over {} test periods -> {}",
        run.report.final_value_pct,
        bt.test.len(),
        dir.display()
    );
    Ok(())
}

pub fn stage_compare(ctx: &StageContext, roster_override: Option<Vec<String>>) -> Result<()> {
    let stage = Stage::Compare;
    let roster = roster_override.unwrap_or_else(|| ctx.cfg.compare.strategies.clone());
    if roster.is_empty() {
        bail!("nothing to compare: the strategy roster is empty");
    }
    for name in &roster {
        if name != CAD_STRATEGY && Baseline::parse(name).is_err() {
            bail!("unknown strategy '{name}'");
        }
    }
    let ingest = store::require(ctx.out, Stage::Ingest, stage)?;
    let needs_cad = roster.iter().any(|s| s == CAD_STRATEGY);
    let mut parts: Vec<(&str, String)> = vec![
        ("roster", roster.join(",")),
        ("backtest", section_toml(&ctx.cfg.backtest)?),
        ("seed", ctx.cfg.seed.to_string()),
        ("ingest", ingest),
    ];
    if needs_cad {
        let deps = require_cad(ctx, stage)?;
        parts.push(("a3c", section_toml(&ctx.cfg.a3c)?));
        parts.push(("ddpg", section_toml(&ctx.cfg.ddpg)?));
        parts.push(("cluster", deps.cluster));
        parts.push(("train-a3c", deps.a3c));
        parts.push(("train-ddpg", deps.ddpg));
    }
    let borrowed: Vec<(&str, &str)> = parts.iter().map(|(l, v)| (*l, v.as_str())).collect();
    let fp = store::fingerprint(&borrowed);
    if skip_if_current(ctx, stage, &fp) {
        return Ok(());
    }
    let u = load_universe(ctx.out)?;
    let bt = ctx.cfg.backtest_config(u.split.test.clone());
    let mut list: Vec<(String, Box<dyn WeightStrategy>)> = Vec::with_capacity(roster.len());
    for name in &roster {
        if name == CAD_STRATEGY {
            let schedule = build_cad_schedule(ctx, &u, &bt)?;
            list.push((name.clone(), Box::new(schedule)));
        } else {
            let kind = Baseline::parse(name).map_err(core_err)?;
            let seed = derive_seed(ctx.cfg.seed, &format!("baseline-{name}"));
            let strategy =
                BaselineStrategy::new(kind, u.ratios.cols, seed).map_err(core_err)?;
            list.push((name.clone(), Box::new(strategy)));
        }
    }
    let table = compare_strategies(&bt, &u.ratios, list).map_err(core_err)?;
    let dir = stage.dir(ctx.out);
    artifacts::write(&dir.join("comparison.csv"), &table.to_csv())?;
    artifacts::write(&dir.join("comparison.txt"), &table.to_text())?;
    store::write_stamp(ctx.out, stage, &fp)?;
    print!("{}", table.to_text());
    println!("{stage}: {} strategies -> {}", table.rows.len(), dir.display());
    Ok(())
}

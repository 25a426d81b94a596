use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use stsens_core::analysis::{
    analyze, attach_observed, daily_attention, daily_attention_csv, lag_profile, variable_importance, DEFAULT_HOLIDAYS,
};
use stsens_core::data::{
    generate_synthetic, load_panel, prepare, write_panel, FeaturePanel, PanelSources, PrepareConfig, Prepared,
    ScalerState, SplitSpec,
};
use stsens_core::metrics::{evaluate, MetricsReport, Persistence};
use stsens_core::model::{load_checkpoint, save_checkpoint, Checkpoint};
use stsens_core::sensitivity::{normalized_morris, subgroup_experiment, MorrisConfig, MorrisResult, SubgroupConfig};
use stsens_core::train::{grid_search, train};

use crate::config::RunConfig;
use crate::run::RunDir;

/// Per-invocation settings shared by every command.
pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub features: Vec<String>,
}

fn input_panel(ctx: &Ctx, run: &mut RunDir) -> Result<FeaturePanel> {
    match ctx.cfg.data_dir() {
        Some(dir) => {
            let sources =
                PanelSources::from_dir(&dir).with_context(|| format!("reading panel directory {}", dir.display()))?;
            let (panel, report) = load_panel(&sources, None)?;
            run.input("data", &dir);
            for (feature, n) in &report.filled {
                if *n > 0 {
                    run.note(format!("{n} leading cells of {feature} filled with 0"));
                }
            }
            Ok(panel)
        }
        None => {
            run.note("panel generated in memory from synth.* keys and seed");
            Ok(generate_synthetic(&ctx.cfg.synth()?)?)
        }
    }
}

fn prepared(ctx: &Ctx, panel: &FeaturePanel) -> Result<(Prepared, SplitSpec)> {
    let split = ctx.cfg.split(panel)?;
    let mut pc = PrepareConfig::new(split, ctx.cfg.window()?);
    pc.iqr_multiplier = ctx.cfg.iqr_multiplier()?;
    Ok((prepare(panel, &pc)?, split))
}

fn checkpoint(ctx: &Ctx) -> Result<(PathBuf, Checkpoint)> {
    let Some(path) = ctx.cfg.checkpoint() else {
        bail!("no checkpoint given; run `stsens train` first and pass --checkpoint PATH");
    };
    if !path.is_file() {
        bail!("checkpoint not found: {}", path.display());
    }
    let ck = load_checkpoint(&path)?;
    Ok((path, ck))
}

fn scaler_csv(s: &ScalerState) -> String {
    let mut out = String::from("role,feature,min,max\n");
    for (role, entries) in [
        ("observed", &s.observed),
        ("static", &s.statics),
        ("target", &s.targets),
    ] {
        for (name, mm) in entries {
            let _ = writeln!(out, "{role},{name},{},{}", mm.min, mm.max);
        }
    }
    out
}

pub fn synth(ctx: &Ctx) -> Result<PathBuf> {
    let seed = ctx.cfg.seed()?;
    let mut run = RunDir::create(&ctx.out, "synth", seed)?;
    let sc = ctx.cfg.synth()?;
    let panel = generate_synthetic(&sc)?;
    write_panel(&run.file("panel"), &panel)?;
    run.record("panel");
    run.write("synth_config.txt", sc.to_text())?;
    run.finish(&ctx.cfg)
}

pub fn prepare_cmd(ctx: &Ctx) -> Result<PathBuf> {
    let mut run = RunDir::create(&ctx.out, "prepare", ctx.cfg.seed()?)?;
    let panel = input_panel(ctx, &mut run)?;
    let (p, split) = prepared(ctx, &panel)?;
    write_panel(&run.file("cleaned"), &p.cleaned)?;
    run.record("cleaned");
    write_panel(&run.file("scaled"), &p.scaled)?;
    run.record("scaled");
    run.write("scaler.csv", scaler_csv(&p.scaler))?;
    run.write("clean_report.csv", p.clean_report.to_csv())?;
    let mut splits = String::from("split,start,end,windows\n");
    for ((name, range), n) in split
        .named()
        .iter()
        .zip([p.train.len(), p.validation.len(), p.test.len()])
    {
        let _ = writeln!(splits, "{name},{},{},{n}", range.start, range.end);
    }
    run.write("splits.csv", splits)?;
    run.finish(&ctx.cfg)
}

pub fn train_cmd(ctx: &Ctx) -> Result<PathBuf> {
    let mut run = RunDir::create(&ctx.out, "train", ctx.cfg.seed()?)?;
    let panel = input_panel(ctx, &mut run)?;
    let (p, _) = prepared(ctx, &panel)?;
    let model_cfg = ctx.cfg.model(&p.train)?;
    let (model, report) = train(&p.train, &p.validation, &model_cfg, &ctx.cfg.train()?)?;
    save_checkpoint(&run.file("checkpoint.bin"), &model, Some(&p.scaler))?;
    run.record("checkpoint.bin");
    run.write("train_report.csv", report.to_csv())?;
    run.note(format!(
        "best epoch {} validation loss {}",
        report.best_epoch,
        report.best_val_loss()
    ));
    run.finish(&ctx.cfg)
}

pub fn evaluate_cmd(ctx: &Ctx) -> Result<PathBuf> {
    let (ck_path, ck) = checkpoint(ctx)?;
    let mut run = RunDir::create(&ctx.out, "evaluate", ctx.cfg.seed()?)?;
    run.input("checkpoint", &ck_path);
    let panel = input_panel(ctx, &mut run)?;
    let (p, _) = prepared(ctx, &panel)?;
    let scaler = ck.scaler.as_ref().unwrap_or(&p.scaler);
    let reports: Vec<MetricsReport> = vec![
        evaluate(&ck.model, &p.test, scaler)?,
        evaluate(&Persistence, &p.test, scaler)?,
    ];
    let json: Vec<String> = reports.iter().map(|r| r.to_json().trim_end().to_string()).collect();
    run.write("metrics.json", format!("[\n{}\n]\n", json.join(",\n")))?;
    let mut csv = format!("{}\n", MetricsReport::CSV_HEADER);
    for r in &reports {
        csv.push_str(&r.csv_rows());
    }
    run.write("metrics.csv", csv)?;
    run.finish(&ctx.cfg)
}

pub fn attention_cmd(ctx: &Ctx) -> Result<PathBuf> {
    let (ck_path, ck) = checkpoint(ctx)?;
    let mut run = RunDir::create(&ctx.out, "attention", ctx.cfg.seed()?)?;
    run.input("checkpoint", &ck_path);
    let panel = input_panel(ctx, &mut run)?;
    let (p, _) = prepared(ctx, &panel)?;
    let a = analyze(&ck.model, &p.train)?;
    let past_len = ck.model.config().past_len;
    run.write("attention_mean.csv", a.profile.to_csv())?;
    run.write("lag_profile.csv", lag_profile(&a.profile, past_len)?.to_csv())?;
    let mut daily = daily_attention(&p.train.meta, &a.one_step_rows, past_len)?;
    attach_observed(&mut daily, &p.cleaned, 0);
    run.write("daily_attention.csv", daily_attention_csv(&daily))?;
    run.write("importance.csv", variable_importance(&a.vsn, &p.scaled)?.to_csv())?;
    run.write("holidays.txt", DEFAULT_HOLIDAYS)?;
    run.note("daily attention near the ends of the range averages over fewer windows");
    run.finish(&ctx.cfg)
}

fn morris_features(ctx: &Ctx, panel: &FeaturePanel) -> Result<Vec<String>> {
    if !ctx.features.is_empty() {
        return Ok(ctx.features.clone());
    }
    let listed: Vec<String> = ctx.cfg.list("morris.features")?;
    if !listed.is_empty() {
        return Ok(listed);
    }
    Ok(panel
        .observed_names
        .iter()
        .chain(&panel.static_names)
        .cloned()
        .collect())
}

pub fn morris_cmd(ctx: &Ctx) -> Result<PathBuf> {
    let (ck_path, ck) = checkpoint(ctx)?;
    let mut run = RunDir::create(&ctx.out, "morris", ctx.cfg.seed()?)?;
    run.input("checkpoint", &ck_path);
    let panel = input_panel(ctx, &mut run)?;
    let (p, split) = prepared(ctx, &panel)?;
    let deltas: Vec<f64> = ctx.cfg.list("morris.deltas")?;
    let target = ctx.cfg.morris_target(&panel)?;
    let range = ctx.cfg.morris_range(&split)?;
    let window = ctx.cfg.window()?;
    let mut csv = format!("{}\n", MorrisResult::CSV_HEADER);
    for feature in morris_features(ctx, &panel)? {
        let mc = MorrisConfig {
            feature,
            deltas: deltas.clone(),
            target,
            range,
        };
        csv.push_str(&normalized_morris(&ck.model, &p.scaled, &p.cleaned, &window, &mc)?.csv_rows());
    }
    run.write("morris.csv", csv)?;
    run.finish(&ctx.cfg)
}

pub fn grid_cmd(ctx: &Ctx) -> Result<PathBuf> {
    let mut run = RunDir::create(&ctx.out, "grid", ctx.cfg.seed()?)?;
    let panel = input_panel(ctx, &mut run)?;
    let (p, _) = prepared(ctx, &panel)?;
    let points = ctx.cfg.grid()?.expand(&ctx.cfg.model(&p.train)?, &ctx.cfg.train()?);
    let result = grid_search(&points, &p.train, &p.validation)?;
    run.write("grid.csv", result.to_csv())?;
    let best = result.best_point();
    run.note(format!(
        "best learning_rate={} d_model={} heads={} grad_clip_norm={}",
        best.train.learning_rate, best.model.d_model, best.model.heads, best.train.grad_clip_norm
    ));
    run.finish(&ctx.cfg)
}

pub fn subgroup_cmd(ctx: &Ctx) -> Result<PathBuf> {
    let mut run = RunDir::create(&ctx.out, "subgroup", ctx.cfg.seed()?)?;
    let panel = input_panel(ctx, &mut run)?;
    let mut subgroups: Vec<String> = ctx.cfg.list("subgroup.columns")?;
    if subgroups.is_empty() {
        subgroups = panel.static_names.clone();
    }
    let shared = Some(ctx.cfg.raw("subgroup.shared_feature").to_string()).filter(|s| !s.is_empty());
    let split = ctx.cfg.split(&panel)?;
    let mut prep = PrepareConfig::new(split, ctx.cfg.window()?);
    prep.iqr_multiplier = ctx.cfg.iqr_multiplier()?;
    let deltas: Vec<f64> = ctx.cfg.list("morris.deltas")?;
    let cfg = SubgroupConfig {
        subgroups,
        shared_feature: shared,
        prepare: prep,
        d_model: ctx.cfg.get("model.d_model")?,
        heads: ctx.cfg.get("model.heads")?,
        dropout: ctx.cfg.get("model.dropout")?,
        train: ctx.cfg.train()?,
        delta: deltas.first().copied().unwrap_or(0.005),
        target: ctx.cfg.morris_target(&panel)?,
    };
    run.write("subgroup.csv", subgroup_experiment(&panel, &cfg)?.to_csv())?;
    run.finish(&ctx.cfg)
}

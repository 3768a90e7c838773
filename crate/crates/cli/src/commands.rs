use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;

use relsa::abft::{
    calibrate_site, fault_soup, site_plan, Calibration, CriticalRegion, FaultModel, ProtectedRun, ProtectedSite,
};
use relsa::dta::{sta_period, Method, WorkloadProfile};
use relsa::inject::{degradation, run_characterization_trials, ToyNetwork};
use relsa::io::read_json;
use relsa::readopt::{best_cluster_plan, evaluate_ter_reduction, Reduction, ReorderPlan};
use relsa::workload::{dta_suite, read_layer_suite, read_suite, write_suite, Workload};
use relsa::{Error, Result};

use crate::config::{AbftConfig, DtaConfig, FaultSource, GenConfig, InjectConfig, ReadConfig, SuiteKind};
use crate::output::{Cell, Outputs, Table};

/// A failure that left diagnostic files behind.
pub struct Failure {
    pub error: Error,
    pub audit: Option<PathBuf>,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        Self { error, audit: None }
    }
}

fn load_suite(path: &Option<PathBuf>, fallback: impl FnOnce() -> Vec<Workload>) -> Result<Vec<Workload>> {
    match path {
        Some(p) => read_suite(p),
        None => Ok(fallback()),
    }
}

pub fn dta(cfg: &DtaConfig, out: &mut Outputs) -> Result<()> {
    let workloads = load_suite(&cfg.suite, || dta_suite(cfg.seed))?;
    if workloads.is_empty() {
        return Err(Error::invalid("workload suite is empty"));
    }
    let env = &cfg.env;
    let sta_mhz = 1000.0 / sta_period(env);
    let results = workloads
        .par_iter()
        .map(|wl| {
            let profile = WorkloadProfile::measure(wl, env)?;
            let corner = profile.fmax(Method::Corner, env)?;
            let avatar = profile.fmax(Method::Avatar, env)?;
            Ok((wl.name.clone(), profile.within_guardband(env), [corner, avatar]))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = Table::new(&[
        "workload",
        "method",
        "fmax_mhz",
        "period_ns",
        "improvement_pct",
        "sta_fmax_mhz",
        "max_chain_len",
        "within_guardband",
    ]);
    for (name, within, rows) in results {
        for r in rows {
            table.push(vec![
                name.clone().into(),
                r.method.as_str().into(),
                r.fmax.into(),
                r.period_ns.into(),
                (100.0 * r.improvement_vs_sta).into(),
                sta_mhz.into(),
                r.max_chain_len.into(),
                within.into(),
            ]);
        }
    }
    out.table("dta", &table)?;
    Ok(())
}

fn reduction_cell(r: Reduction) -> Cell {
    match r {
        Reduction::Factor(f) => Cell::Real(f),
        Reduction::NoErrors => Cell::Text("no-errors".into()),
    }
}

/// Geometric mean of the finite reduction factors.
fn geo_mean(rs: &[Reduction]) -> Option<f64> {
    let fs: Vec<f64> = rs.iter().filter_map(Reduction::factor).collect();
    if fs.is_empty() {
        None
    } else {
        Some((fs.iter().map(|f| f.ln()).sum::<f64>() / fs.len() as f64).exp())
    }
}

#[derive(Serialize)]
struct LayerPlan {
    layer: String,
    k: usize,
    plan: ReorderPlan,
}

pub fn read(cfg: &ReadConfig, out: &mut Outputs) -> Result<()> {
    let layers = load_suite(&cfg.suite, || read_layer_suite(cfg.seed))?;
    if layers.is_empty() {
        return Err(Error::invalid("layer suite is empty"));
    }
    let env = &cfg.env;
    let results = layers
        .par_iter()
        .map(|wl| {
            let direct = evaluate_ter_reduction(&wl.weights, &wl.acts, &ReorderPlan::direct(&wl.weights)?, env)?;
            let candidates = best_cluster_plan(&wl.weights, &wl.acts, &cfg.ks, env, cfg.seed)?;
            let best = candidates
                .iter()
                .min_by(|a, b| a.2.ter.total_cmp(&b.2.ter).then(a.0.cmp(&b.0)))
                .cloned()
                .expect("ks is non-empty");
            let cluster = evaluate_ter_reduction(&wl.weights, &wl.acts, &best.1, env)?;
            Ok((wl, direct, best, cluster, candidates))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut headers: Vec<String> = [
        "layer",
        "c_out",
        "c_in",
        "baseline_ter",
        "direct_ter",
        "direct_reduction",
        "direct_max_flips",
        "cluster_k",
        "cluster_ter",
        "cluster_reduction",
        "cluster_max_flips",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    headers.extend(cfg.ks.iter().map(|k| format!("ter_k{k}")));
    let mut table = Table {
        headers,
        rows: Vec::new(),
    };
    let mut plans = Vec::new();
    let (mut direct_all, mut cluster_all) = (Vec::new(), Vec::new());
    for (wl, direct, best, cluster, candidates) in results {
        let (c_out, c_in) = wl.weights.shape2()?;
        let mut row: Vec<Cell> = vec![
            wl.name.clone().into(),
            c_out.into(),
            c_in.into(),
            direct.baseline.ter.into(),
            direct.optimized.ter.into(),
            reduction_cell(direct.reduction),
            direct.optimized.max_flips_per_output.into(),
            best.0.into(),
            cluster.optimized.ter.into(),
            reduction_cell(cluster.reduction),
            cluster.optimized.max_flips_per_output.into(),
        ];
        row.extend(candidates.iter().map(|c| Cell::Real(c.2.ter)));
        table.push(row);
        direct_all.push(direct.reduction);
        cluster_all.push(cluster.reduction);
        plans.push(LayerPlan {
            layer: wl.name.clone(),
            k: best.0,
            plan: best.1,
        });
    }
    let mut summary = vec![Cell::Empty; table.headers.len()];
    summary[0] = "geomean".into();
    summary[5] = geo_mean(&direct_all).into();
    summary[9] = geo_mean(&cluster_all).into();
    table.push(summary);
    out.table("read", &table)?;
    out.json("plans.json", &plans)?;
    Ok(())
}

fn calibration_table(cfg: &AbftConfig, cal: &Calibration) -> Table {
    let mut t = Table::new(&["freq", "mag", "distortion", "boundary"]);
    for (i, &f) in cfg.calibration.grid.freqs.iter().enumerate() {
        for (j, &m) in cfg.calibration.grid.mags.iter().enumerate() {
            t.push(vec![
                f.into(),
                m.into(),
                cal.degradation[i][j].into(),
                cal.region.knots[i].m.into(),
            ]);
        }
    }
    t
}

pub fn abft(cfg: &AbftConfig, out: &mut Outputs) -> std::result::Result<(), Failure> {
    let net = ToyNetwork::build(cfg.network.clone())?;
    let region: CriticalRegion = match &cfg.region {
        Some(path) => {
            let r: CriticalRegion = read_json(path)?;
            r.validate()
                .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
            r
        }
        None => {
            let c = &cfg.calibration;
            let cal = calibrate_site(
                &net,
                cfg.site,
                cfg.stage,
                &cfg.plan,
                &c.grid,
                c.threshold,
                c.trials,
                cfg.seed,
            )?;
            out.table("calibration", &calibration_table(cfg, &cal))?;
            cal.region
        }
    };
    out.json("region.json", &region)?;

    let plan = site_plan(&net, cfg.site, &cfg.plan)?;
    let rows = net.linear(cfg.site)?.w.shape2()?.0;
    let cols = net.site_elements(cfg.site, cfg.stage)? / rows;
    let faults = match &cfg.faults {
        FaultSource::None => FaultModel::None,
        FaultSource::Soup { .. } => {
            let soup = cfg.soup().expect("soup config");
            FaultModel::Explicit(fault_soup(rows, cols, &plan, &region, &soup)?)
        }
        FaultSource::Injection { spec } => {
            let mut spec = spec.clone();
            spec.seed = cfg.seed;
            FaultModel::Injection(spec)
        }
        FaultSource::Explicit { faults } => FaultModel::Explicit(faults.clone()),
    };

    let hook = ProtectedSite::new(cfg.site, plan, &region, &faults, cfg.protect);
    let forward = net.forward(cfg.stage, &hook);
    let runs = hook.into_runs();
    let mut audit: String = runs.iter().map(|r| r.audit_jsonl()).collect();
    let fwd = match forward {
        Ok(f) => f,
        Err(error) => {
            if let Error::UnrecoverableFault { tile_id, rounds, stats } = &error {
                let record = serde_json::json!({
                    "tile_id": tile_id,
                    "stats": stats,
                    "decision": "unrecoverable",
                    "recompute_count": rounds,
                });
                audit.push_str(&record.to_string());
                audit.push('\n');
            }
            let path = out.text("audit.jsonl", &audit)?;
            return Err(Failure {
                error,
                audit: Some(path),
            });
        }
    };
    out.text("audit.jsonl", &audit)?;
    let run = ProtectedRun::summarize(degradation(&fwd, net.reference(cfg.stage)), runs);
    out.table("summary", &summary_table(&run, &region))?;
    Ok(())
}

fn summary_table(run: &ProtectedRun, region: &CriticalRegion) -> Table {
    let always = if run.faulty_tiles > 0 { 1.0 } else { 0.0 };
    let mut t = Table::new(&["metric", "value"]);
    let rows: Vec<(&str, Cell)> = vec![
        ("tiles", run.tiles.into()),
        ("faulty_tiles", run.faulty_tiles.into()),
        ("recomputed_tiles", run.recomputed_tiles.into()),
        ("recompute_rate", run.recompute_rate.into()),
        ("always_correct_recompute_rate", always.into()),
        ("missed_rate", run.missed_rate.into()),
        ("distortion", run.degradation.distortion.into()),
        ("accuracy_delta", run.degradation.accuracy_delta.into()),
        ("threshold", region.degradation_threshold.into()),
        (
            "within_threshold",
            (run.degradation.distortion <= region.degradation_threshold).into(),
        ),
    ];
    for (k, v) in rows {
        t.push(vec![k.into(), v]);
    }
    t
}

pub fn inject(cfg: &InjectConfig, out: &mut Outputs) -> Result<()> {
    let net = ToyNetwork::build(cfg.network.clone())?;
    let sweep: Vec<_> = cfg
        .sweep
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.seed = s.seed.wrapping_add(cfg.seed);
            s
        })
        .collect();
    let report = run_characterization_trials(&net, &sweep, cfg.trials)?;
    let mut table = Table::new(&[
        "target",
        "layer",
        "bit",
        "rate",
        "magnitude",
        "stage",
        "metric",
        "value",
    ]);
    for row in &report.rows {
        let sp = &row.spec;
        for (metric, value) in [
            ("distortion", row.degradation.distortion),
            ("accuracy_delta", row.degradation.accuracy_delta),
        ] {
            table.push(vec![
                sp.target.as_str().into(),
                sp.layer_index.into(),
                sp.bit_position.into(),
                sp.rate.into(),
                sp.magnitude.into(),
                sp.stage.as_str().into(),
                metric.into(),
                value.into(),
            ]);
        }
    }
    out.table("resilience", &table)?;
    Ok(())
}

pub fn gen_workload(cfg: &GenConfig, out: &mut Outputs) -> Result<()> {
    let suite = match cfg.kind {
        SuiteKind::Dta => dta_suite(cfg.seed),
        SuiteKind::Read => read_layer_suite(cfg.seed),
    };
    write_suite(out.dir(), &suite)?;
    out.record("suite.json");
    Ok(())
}

use std::collections::BTreeMap;

use graphmtl::driver::{fit, Method, SplitSpec};
use graphmtl::io::{
    load_config, load_dataset, load_fit, load_graph, ratio_split, save_fit, standardize,
    synthetic_csv_spec, DatasetSpec, ExperimentConfig,
};
use graphmtl::metrics::{graph_veracity, rmse};
use graphmtl::synth::{generate, ground_truth_graph};
use graphmtl::{Error, FitResult, TaskData, TaskGraph};
use log::info;
use serde_json::json;

use crate::report::TrainReport;
use crate::tools::write_text;
use crate::{EvalArgs, Outcome, TrainArgs};

type Row = BTreeMap<String, f64>;

fn apply_overrides(cfg: &mut ExperimentConfig, a: &TrainArgs) -> Result<(), Error> {
    if let Some(v) = a.variant {
        cfg.hyper_params.variant = v;
    }
    if let Some(r) = a.repeats {
        cfg.repeats = r;
    }
    if let Some(r) = a.train_ratio {
        cfg.train_ratio = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.baseline {
        cfg.hyper_params.max_outer = 0;
    }
    if !(a.prune >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "prune must be >= 0, got {}",
            a.prune
        )));
    }
    cfg.validate()
}

fn score(
    fit: &FitResult,
    test: &[TaskData],
    truth: Option<&TaskGraph>,
    prune: f64,
) -> Result<Row, Error> {
    let mut row = Row::new();
    row.insert("rmse".into(), rmse(&fit.models, test)?);
    row.insert(
        "outer_iterations".into(),
        fit.trace.len().saturating_sub(1) as f64,
    );
    let pruned = fit.graph.prune(prune);
    row.insert("edges".into(), pruned.n_edges() as f64);
    if let Some(t) = truth {
        let v = graph_veracity(t, &pruned)?;
        row.insert("accuracy".into(), v.accuracy);
        row.insert("recall".into(), v.recall);
        row.insert("precision".into(), v.precision);
        row.insert("f1".into(), v.f1);
    }
    Ok(row)
}

fn run_repeat(
    cfg: &ExperimentConfig,
    csv_data: Option<&[TaskData]>,
    csv_truth: Option<&TaskGraph>,
    repeat: usize,
    prune: f64,
) -> Result<(FitResult, Row), Error> {
    let seed = cfg.seed.wrapping_add(repeat as u64);
    let (data, truth) = match csv_data {
        Some(d) => (d.to_vec(), csv_truth.cloned()),
        None => {
            let spec = cfg
                .dataset
                .synth_spec(seed)
                .expect("synthetic dataset spec");
            let (d, gt) = generate(&spec)?;
            (d, Some(ground_truth_graph(&gt)))
        }
    };
    let (train, test) = ratio_split(&data, cfg.train_ratio, seed, cfg.chronological)?;
    let (train, test) = if cfg.standardize_enabled() {
        standardize(&train, &test)?
    } else {
        (train, test)
    };
    let split = SplitSpec {
        seed: cfg.split.seed.wrapping_add(repeat as u64),
        ..cfg.split
    };
    let result = fit(&train, &cfg.hyper_params, &split)?;
    let row = score(&result, &test, truth.as_ref(), prune)?;
    info!("repeat {repeat}: rmse {:.4}", row["rmse"]);
    Ok((result, row))
}

pub fn train(a: &TrainArgs) -> Result<Outcome, Error> {
    let mut cfg = load_config(&a.config)?;
    apply_overrides(&mut cfg, a)?;

    let csv_data = match &cfg.dataset {
        DatasetSpec::Csv(spec) => Some(load_dataset(spec)?),
        DatasetSpec::Synthetic { .. } => None,
    };
    let csv_truth = match (&cfg.dataset, &cfg.truth_graph) {
        (DatasetSpec::Csv(_), Some(p)) => Some(load_graph(p)?),
        _ => None,
    };

    let job = |r: usize| run_repeat(&cfg, csv_data.as_deref(), csv_truth.as_ref(), r, a.prune);
    #[cfg(feature = "parallel")]
    let results: Vec<(FitResult, Row)> = {
        use rayon::prelude::*;
        (0..cfg.repeats)
            .into_par_iter()
            .map(job)
            .collect::<Result<_, _>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<(FitResult, Row)> = (0..cfg.repeats).map(job).collect::<Result<_, _>>()?;

    let method = if cfg.hyper_params.max_outer == 0 {
        Method::BaselineFixedGraph
    } else {
        Method::LearnedGraph
    };
    let rows: Vec<Row> = results.iter().map(|(_, r)| r.clone()).collect();
    let report = TrainReport::from_rows(
        method,
        cfg.hyper_params.variant,
        cfg.train_ratio,
        cfg.seed,
        &rows,
    );

    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    save_fit(&results[0].0, &a.out.join("fit.json"))?;
    write_text(
        &a.out.join("report.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    print!("{}", report.to_text());
    Ok(Outcome::Ok)
}

pub fn eval(a: &EvalArgs) -> Result<Outcome, Error> {
    let fit = load_fit(&a.fit)?;
    let mut spec = synthetic_csv_spec(&a.data);
    spec.target_column = a.target.clone();
    let data = load_dataset(&spec)?;
    if data.len() != fit.models.n_tasks() {
        return Err(Error::DimensionMismatch(format!(
            "fit has {} tasks, data directory has {}",
            fit.models.n_tasks(),
            data.len()
        )));
    }
    let truth = a.truth.as_deref().map(load_graph).transpose()?;
    let row = score(&fit, &data, truth.as_ref(), a.prune)?;
    let text = serde_json::to_string_pretty(&json!({
        "method": fit.method,
        "metrics": row,
    }))?;
    match &a.out {
        Some(p) => write_text(p, &text)?,
        None => println!("{text}"),
    }
    Ok(Outcome::Ok)
}

use std::fs;
use std::path::Path;

use graphmtl::diagnostics::{gradient_check, profile_pipeline, relative_deviation, GradCheckSpec};
use graphmtl::graph::{export_graph as render_graph, markov_cluster, GraphFormat};
use graphmtl::io::{load_fit, save_tasks_csv};
use graphmtl::synth::{generate, ground_truth_graph, SynthSpec};
use graphmtl::Error;
use serde_json::json;

use crate::{BenchArgs, ExportArgs, GradCheckArgs, Outcome, SynthArgs};

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn synth(a: &SynthArgs) -> Result<Outcome, Error> {
    let base = SynthSpec::defaults(a.structure, a.seed);
    let spec = SynthSpec {
        samples_per_task: a.samples.unwrap_or(base.samples_per_task),
        noise_std: a.noise.unwrap_or(base.noise_std),
        ..base
    };
    let (tasks, truth) = generate(&spec)?;
    let files = save_tasks_csv(&a.out, &tasks)?;
    let graph = ground_truth_graph(&truth);
    write_text(
        &a.out.join("truth_graph.json"),
        &render_graph(&graph, None, GraphFormat::Json)?,
    )?;
    let rows: Vec<Vec<f64>> = truth
        .weights
        .row_iter()
        .map(|r| r.iter().copied().collect())
        .collect();
    write_text(
        &a.out.join("true_weights.json"),
        &serde_json::to_string_pretty(&rows)?,
    )?;
    write_text(
        &a.out.join("spec.json"),
        &serde_json::to_string_pretty(&spec)?,
    )?;
    println!(
        "wrote {} task files and a truth graph with {} edges to {}",
        files.len(),
        graph.n_edges(),
        a.out.display()
    );
    Ok(Outcome::Ok)
}

pub fn export_graph(a: &ExportArgs) -> Result<Outcome, Error> {
    if !(a.prune >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "prune must be >= 0, got {}",
            a.prune
        )));
    }
    let fit = load_fit(&a.fit)?;
    let graph = fit.graph.prune(a.prune);
    let clusters = if a.cluster {
        Some(markov_cluster(&graph, a.inflation)?)
    } else {
        None
    };
    let text = render_graph(&graph, clusters.as_ref(), a.format)?;
    match &a.out {
        Some(p) => write_text(p, &text)?,
        None => print!("{text}"),
    }
    Ok(Outcome::Ok)
}

pub fn bench(a: &BenchArgs) -> Result<Outcome, Error> {
    if a.sizes.is_empty() || a.sizes.iter().any(|&n| n < 2) {
        return Err(Error::InvalidArgument(
            "every size must be at least 2".into(),
        ));
    }
    if a.d == 0 || a.k == 0 || a.samples == 0 {
        return Err(Error::InvalidArgument(
            "d, k and samples must be positive".into(),
        ));
    }
    let mut sizes = a.sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    println!(
        "{:>6} {:>6} {:>10} {:>10} {:>10} {:>12} {:>10}",
        "n", "edges", "ols_s", "knn_s", "inner_s", "hypergrad_s", "cg_iters"
    );
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in &sizes {
        let t = profile_pipeline(n, a.d, a.k, a.samples, a.seed)?;
        assert!(
            t.peak_dense_elems < t.nd_squared,
            "a dense (nd)^2 buffer was allocated at n = {n}"
        );
        println!(
            "{:>6} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>12.4} {:>10}",
            t.n, t.n_edges, t.ols_s, t.knn_s, t.inner_s, t.hypergradient_s, t.adjoint_iterations
        );
        rows.push(t);
    }
    if let Some(p) = &a.out {
        write_text(p, &serde_json::to_string_pretty(&rows)?)?;
    }
    Ok(Outcome::Ok)
}

pub fn grad_check(a: &GradCheckArgs) -> Result<Outcome, Error> {
    let spec = GradCheckSpec {
        n: a.n,
        d: a.d,
        samples: a.samples,
        seed: a.seed,
        xi: a.xi,
        eta: a.eta,
        gamma: a.gamma,
        lambda: a.lambda,
        variant: a.variant,
        ..GradCheckSpec::default()
    };
    let mut check = gradient_check(&spec)?;
    if let Some(offset) = a.corrupt_gradient {
        if let Some(g) = check.closed_form.first_mut() {
            *g += offset;
        }
        check.max_rel_deviation = relative_deviation(&check.closed_form, &check.finite_difference);
    }
    let pass = check.max_rel_deviation <= a.tolerance;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "n": a.n,
            "d": a.d,
            "seed": a.seed,
            "max_rel_deviation": check.max_rel_deviation,
            "tolerance": a.tolerance,
            "pass": pass,
            "closed_form": check.closed_form,
            "finite_difference": check.finite_difference,
        }))?
    );
    Ok(if pass {
        Outcome::Ok
    } else {
        Outcome::NumericalFailure
    })
}

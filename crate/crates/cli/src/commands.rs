use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use ldaf_core::flow::FlowSolver;
use ldaf_core::pacbayes::{certify, optimize_posterior};
use ldaf_core::pipeline::{
    evaluate_propagators, load_features, load_model, save_features, save_model, train_prior, Dataset, EvalMode,
    ModelBundle, Split,
};
use ldaf_core::quadrature::{integration_benchmark, write_bench_csv, LossKind, Method};

use crate::config::RunConfig;
use crate::CliError;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::new("io", format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn require_exists(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::new("missing-file", format!("{what} {} does not exist", path.display())))
    }
}

/// Loads the feature file (flag, then `dataset.path`) or regenerates the
/// synthetic dataset from the config, then assigns the seeded splits.
pub fn load_dataset(cfg: &RunConfig, data: Option<&Path>) -> Result<Dataset, CliError> {
    let path = data.map(Path::to_path_buf).or_else(|| cfg.dataset.path.clone());
    let mut dataset = match path {
        Some(p) => {
            require_exists(&p, "data file")?;
            load_features(&p)?
        }
        None if cfg.dataset.kind == "file" => return Err(CliError::new("config", "no data file given")),
        None => cfg.synthetic_spec()?.sample(cfg.dataset.m, cfg.dataset.seed)?,
    };
    dataset.assign_splits(cfg.dataset.val_fraction, cfg.dataset.test_fraction, cfg.dataset.seed)?;
    eprintln!(
        "splits: train={} validation={} test={} (seed {})",
        dataset.indices(Split::Train).len(),
        dataset.indices(Split::Validation).len(),
        dataset.indices(Split::Test).len(),
        cfg.dataset.seed
    );
    Ok(dataset)
}

fn load_model_dir(dir: &Path) -> Result<ModelBundle, CliError> {
    require_exists(dir, "model directory")?;
    Ok(load_model(dir)?)
}

fn labels_of(data: &Dataset, rows: &[usize]) -> Vec<usize> {
    rows.iter().map(|&i| data.label(i)).collect()
}

fn nonempty_rows(data: &Dataset, split: Split) -> Result<Vec<usize>, CliError> {
    let rows = data.indices(split);
    if rows.is_empty() {
        return Err(CliError::new("empty", format!("{} split is empty", split.as_str())));
    }
    Ok(rows)
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let data = match &cfg.dataset.path {
        Some(p) if cfg.dataset.kind == "file" => {
            require_exists(p, "data file")?;
            load_features(p)?
        }
        _ => cfg.synthetic_spec()?.sample(cfg.dataset.m, cfg.dataset.seed)?,
    };
    save_features(&data, out)?;
    println!("wrote {} rows × {} features, {} classes to {}", data.len(), data.dim(), data.classes(), out.display());
    println!("sha256 {}", data.content_hash());
    Ok(())
}

pub fn train_prior_cmd(cfg: &RunConfig, data: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let dataset = load_dataset(cfg, data)?;
    let solver = FlowSolver::default();
    let (mut model, report) = train_prior(&dataset, &cfg.prior_config(), &solver)?;
    model.metadata.insert("config.sha256".into(), cfg.hash());
    model.metadata.insert("dataset.split_seed".into(), cfg.dataset.seed.to_string());
    save_model(&model, out)?;

    let mut log = String::from("step,loss,error\n");
    for e in &report.log {
        writeln!(log, "{},{},{}", e.step, e.loss, e.error).expect("write to string");
    }
    let log_path = out.join("train_log.csv");
    write_file(&log_path, log.as_bytes())?;

    let train = dataset.indices(Split::Train);
    let props = model.propagators(&dataset, &train, &solver)?;
    let err = evaluate_propagators(&props, &labels_of(&dataset, &train), EvalMode::Deterministic, &model.prior, 1)?;
    println!("prior trained on {} training rows (validation and test rows unused)", train.len());
    println!("training cross-entropy {:.6} -> {:.6}", report.initial_loss, report.final_loss);
    println!("training 01 error {:.4}", err);
    println!("model written to {}; log {}", out.display(), log_path.display());
    Ok(())
}

pub fn train_posterior_cmd(
    cfg: &RunConfig,
    model_dir: &Path,
    data: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let mut model = load_model_dir(model_dir)?;
    let dataset = load_dataset(cfg, data)?;
    let solver = FlowSolver::default();
    let rows = nonempty_rows(&dataset, Split::Validation)?;
    let props = model.propagators(&dataset, &rows, &solver)?;
    let pcfg = cfg.posterior_config();
    let fit = optimize_posterior(&model.prior, &props, &labels_of(&dataset, &rows), &pcfg)?;

    let out = out.unwrap_or(model_dir);
    model.posterior = Some(fit.posterior.clone());
    model.metadata.insert("posterior.lambda".into(), fit.lambda.to_string());
    model.metadata.insert("posterior.status".into(), fit.status.as_str().into());
    model.metadata.insert("posterior.epsilon".into(), pcfg.epsilon.to_string());
    model.metadata.insert("posterior.config.sha256".into(), cfg.hash());
    save_model(&model, out)?;

    let mut trace = String::from("alternation,lambda,surrogate_risk,kl,bound\n");
    for t in &fit.trace {
        writeln!(trace, "{},{},{},{},{}", t.alternation, t.lambda, t.surrogate_risk, t.kl, t.bound)
            .expect("write to string");
    }
    let trace_path = out.join("bound_trace.csv");
    write_file(&trace_path, trace.as_bytes())?;

    let first = fit.trace.first().expect("trace has the initial entry");
    let best = fit.trace.iter().map(|t| t.bound).fold(f64::INFINITY, f64::min);
    println!("posterior fitted on {} validation rows: status {}", rows.len(), fit.status.as_str());
    println!("surrogate bound {:.6} -> {:.6}, lambda {:.6}", first.bound, best, fit.lambda);
    println!("model written to {}; trace {}", out.display(), trace_path.display());
    Ok(())
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

pub fn certify_cmd(cfg: &RunConfig, model_dir: &Path, data: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
    let model = load_model_dir(model_dir)?;
    let dataset = load_dataset(cfg, data)?;
    let solver = FlowSolver::default();
    let out = out.unwrap_or(model_dir);
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;

    let rows = nonempty_rows(&dataset, Split::Validation)?;
    let labels = labels_of(&dataset, &rows);
    let props = model.propagators(&dataset, &rows, &solver)?;
    let posterior = model.posterior.as_ref().unwrap_or(&model.prior);
    if model.posterior.is_none() {
        eprintln!("note: model has no trained posterior; certifying the prior itself");
    }

    let mut provenance = BTreeMap::new();
    provenance.insert("config_sha256".to_string(), cfg.hash());
    provenance.insert("dataset_sha256".to_string(), dataset.content_hash());
    provenance.insert("model_manifest_sha256".to_string(), sha256_file(&model_dir.join("manifest.txt"))?);
    provenance.insert("split".to_string(), "validation".to_string());
    provenance.insert("split_seed".to_string(), cfg.dataset.seed.to_string());
    provenance.insert("replicates".to_string(), cfg.certify.replicates.to_string());
    provenance.insert("qmc_shift_seed".to_string(), cfg.certify.seed.to_string());
    provenance.insert("posterior".to_string(), if model.posterior.is_some() { "trained" } else { "prior" }.to_string());

    let mut certs = Vec::new();
    for &eps in &cfg.certify.epsilon {
        let cert = certify(posterior, &model.prior, &props, &labels, &cfg.certify_config(eps), provenance.clone())?;
        let path = out.join(format!("certificate_eps{eps}.txt"));
        write_file(&path, cert.to_text().as_bytes())?;
        certs.push((eps, cert, path));
    }

    let mut table = String::new();
    writeln!(table, "{:<36} {:>10}", "quantity", "value").expect("write to string");
    let test = dataset.indices(Split::Test);
    if test.is_empty() {
        writeln!(table, "{:<36} {:>10}", "test split", "empty").expect("write to string");
    } else {
        let test_props = model.propagators(&dataset, &test, &solver)?;
        let test_labels = labels_of(&dataset, &test);
        let n = cfg.certify.n_points;
        let rows = [
            ("deterministic test error", EvalMode::Deterministic, &model.prior),
            ("prior stochastic test error", EvalMode::StochasticExpected, &model.prior),
            ("posterior stochastic test error", EvalMode::StochasticExpected, posterior),
        ];
        for (name, mode, cov) in rows {
            let e = evaluate_propagators(&test_props, &test_labels, mode, cov, n)?;
            writeln!(table, "{:<36} {:>10}", name, pct(e)).expect("write to string");
        }
    }
    for (eps, cert, _) in &certs {
        writeln!(table, "{:<36} {:>10}", format!("validation risk (eps={eps})"), pct(cert.emp_risk_01))
            .expect("write to string");
        writeln!(table, "{:<36} {:>10}", format!("certificate (eps={eps})"), pct(cert.bound)).expect("write to string");
    }
    if let Some((_, cert, _)) = certs.first() {
        writeln!(table, "{:<36} {:>10.6}", "KL(posterior || prior)", cert.kl).expect("write to string");
        writeln!(table, "{:<36} {:>10}", "validation size m", cert.m).expect("write to string");
    }
    print!("{table}");
    write_file(&out.join("summary.txt"), table.as_bytes())?;
    for (_, _, path) in &certs {
        println!("certificate written to {}", path.display());
    }
    Ok(())
}

pub fn evaluate_cmd(
    cfg: &RunConfig,
    model_dir: &Path,
    data: Option<&Path>,
    split: Split,
    modes: &[EvalMode],
) -> Result<(), CliError> {
    let model = load_model_dir(model_dir)?;
    let dataset = load_dataset(cfg, data)?;
    let solver = FlowSolver::default();
    let rows = nonempty_rows(&dataset, split)?;
    let props = model.propagators(&dataset, &rows, &solver)?;
    let labels = labels_of(&dataset, &rows);
    let cov = model.active_covariance();
    let modes = if modes.is_empty() {
        vec![EvalMode::Deterministic, EvalMode::StochasticMean, EvalMode::StochasticExpected]
    } else {
        modes.to_vec()
    };
    println!(
        "split {} ({} rows), covariance: {}",
        split.as_str(),
        rows.len(),
        if model.posterior.is_some() { "posterior" } else { "prior" }
    );
    for mode in modes {
        let e = evaluate_propagators(&props, &labels, mode, cov, cfg.certify.n_points)?;
        println!("{:<20} {:.6}", mode.as_str(), e);
    }
    Ok(())
}

pub fn bench_cmd(
    cfg: &RunConfig,
    model_dir: &Path,
    data: Option<&Path>,
    split: Split,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let model = load_model_dir(model_dir)?;
    let dataset = load_dataset(cfg, data)?;
    let solver = FlowSolver::default();
    let mut rows = nonempty_rows(&dataset, split)?;
    rows.truncate(cfg.bench.n_data);
    let props = model.propagators(&dataset, &rows, &solver)?;
    let cov = model.active_covariance();
    let moments = props.iter().map(|p| p.moments(cov)).collect::<Result<Vec<_>, _>>()?;
    let loss = LossKind::parse(&cfg.bench.loss)?;
    let b = &cfg.bench;
    let results = integration_benchmark(
        &moments,
        &labels_of(&dataset, &rows),
        loss,
        &b.point_counts,
        b.mc_reference_points,
        b.seed,
    )?;

    let out = out.unwrap_or_else(|| model_dir.join("bench_integration.csv"));
    let mut csv = Vec::new();
    write_bench_csv(&mut csv, &results).map_err(|e| io_err(&out, e))?;
    write_file(&out, &csv)?;

    println!("{:>8} {:>14} {:>14} {:>10}", "n_points", "median_qmc", "median_mc", "qmc<mc");
    let (mut wins, mut cells) = (0usize, 0usize);
    for &n in &b.point_counts {
        let pick = |m: Method| {
            let mut v: Vec<f64> =
                results.iter().filter(|r| r.n_points == n && r.method == m).map(|r| r.abs_error).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let (q, m) = (pick(Method::Qmc), pick(Method::Mc));
        let w = q.len();
        let better = results
            .iter()
            .filter(|r| r.n_points == n && r.method == Method::Qmc)
            .zip(results.iter().filter(|r| r.n_points == n && r.method == Method::Mc))
            .filter(|(a, b)| a.abs_error < b.abs_error)
            .count();
        wins += better;
        cells += w;
        println!("{:>8} {:>14.3e} {:>14.3e} {:>10}", n, q[q.len() / 2], m[m.len() / 2], format!("{better}/{w}"));
    }
    println!("QMC below MC in {wins}/{cells} cells ({:.1}%)", 100.0 * wins as f64 / cells as f64);
    println!("bench CSV written to {}", out.display());
    Ok(())
}

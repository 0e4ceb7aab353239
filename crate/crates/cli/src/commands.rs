use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use setemd::fewshot::derive_seed;
use setemd::retrieval::query_metrics;
use setemd::tensor_io::{load_collection, load_tensor, save_collection};
use setemd::timing::{run_bench, BenchConfig};
use setemd::transport::solve_simplex;
use setemd::{
    backward_similarity, extract_with, generate, jacobian_flows, match_sets, rank_gallery, run_episodes, solve,
    summarize, train_projection, DiffError, EmbeddedCollection, EmdConfig, EpisodeSpec, GradMode, KShotMethod,
    SfcConfig, SfcInit, SynthSpec, TrainConfig, TransportProblem,
};

use crate::error::CliError;
use crate::output::{write_csv, write_json, FORMAT_VERSION};
use crate::{
    BenchArgs, Cli, CmdResult, Command, EpisodesArgs, ExtractArgs, FlowsArgs, GenArgs, Global, GradcheckArgs,
    Instance, RetrieveArgs, TrainArgs,
};

pub fn run(cli: &Cli) -> CmdResult {
    let g = &cli.global;
    if !(g.tol > 0.0 && g.tol.is_finite()) {
        return Err(CliError::invalid(format!("--tol must be positive, got {}", g.tol)));
    }
    match &cli.command {
        Command::Solve { problem } => cmd_solve(g, problem),
        Command::Gradcheck(a) => cmd_gradcheck(g, a),
        Command::Gen(a) => cmd_gen(g, a),
        Command::Episodes(a) => cmd_episodes(g, a),
        Command::Retrieve(a) => cmd_retrieve(g, a),
        Command::Train(a) => cmd_train(g, a),
        Command::Flows(a) => cmd_flows(g, a),
        Command::Bench(a) => cmd_bench(g, a),
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn emd_config(g: &Global, ex: &ExtractArgs) -> EmdConfig {
    EmdConfig {
        weights: ex.weights,
        solver: g.solver,
        tol: g.tol,
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemFile {
    cost: Vec<Vec<f64>>,
    supply: Vec<f64>,
    demand: Vec<f64>,
}

fn read_problem(path: &Path) -> Result<TransportProblem, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::invalid(format!("cannot read {}: {e}", path.display())))?;
    let raw: ProblemFile = serde_json::from_str(&text)
        .map_err(|e| CliError::invalid(format!("malformed problem file {}: {e}", path.display())))?;
    let p = TransportProblem::from_rows(&raw.cost, &raw.supply, &raw.demand)?;
    p.check_balanced()?;
    Ok(p)
}

#[derive(Serialize)]
struct SolutionFile {
    format_version: u32,
    solver: &'static str,
    objective: f64,
    flows: Vec<Vec<f64>>,
    supply_duals: Vec<f64>,
    demand_duals: Vec<f64>,
    degenerate: bool,
    iterations: usize,
}

fn cmd_solve(g: &Global, path: &Path) -> CmdResult {
    let p = read_problem(path)?;
    let sol = solve(&p, g.solver, g.tol)?;
    println!("objective: {}", sol.objective);
    for row in sol.flows.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        println!("flows: {}", cells.join(" "));
    }
    println!("supply duals: {:?}", sol.supply_duals());
    println!("demand duals: {:?}", sol.demand_duals());
    let out = write_json(
        &g.out,
        "solution.json",
        &SolutionFile {
            format_version: FORMAT_VERSION,
            solver: sol.solver.name(),
            objective: sol.objective,
            flows: rows_of(&sol.flows),
            supply_duals: sol.supply_duals().to_vec(),
            demand_duals: sol.demand_duals().to_vec(),
            degenerate: sol.degenerate,
            iterations: sol.iterations,
        },
    )?;
    if g.verbose > 0 {
        eprintln!("wrote {}", out.display());
    }
    Ok(0)
}

fn gradcheck_instance(seed: u64, size: usize, kind: Instance) -> Result<TransportProblem, CliError> {
    let n = size;
    let uniform = DVector::from_element(n, 1.0 / n as f64);
    let p = match kind {
        Instance::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>());
            let mut s = DVector::from_fn(n, |_, _| rng.random_range(0.1..1.0));
            let mut d = DVector::from_fn(n, |_, _| rng.random_range(0.1..1.0));
            s /= s.sum();
            d /= d.sum();
            TransportProblem::new(cost, s, d)?
        }
        Instance::Constant => TransportProblem::new(DMatrix::from_element(n, n, 0.5), uniform.clone(), uniform)?,
        Instance::Assignment => TransportProblem::new(
            DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 }),
            uniform.clone(),
            uniform,
        )?,
    };
    Ok(p)
}

/// Cost entries one at a time, then each supply and demand entry with the
/// other side rebalanced uniformly.
fn directions(m: usize, k: usize) -> Vec<(DMatrix<f64>, DVector<f64>, DVector<f64>)> {
    let mut out = Vec::with_capacity(m * k + m + k);
    for idx in 0..m * k {
        let mut dc = DMatrix::zeros(m, k);
        dc[(idx / k, idx % k)] = 1.0;
        out.push((dc, DVector::zeros(m), DVector::zeros(k)));
    }
    for i in 0..m {
        let mut ds = DVector::zeros(m);
        ds[i] = 1.0;
        out.push((DMatrix::zeros(m, k), ds, DVector::from_element(k, 1.0 / k as f64)));
    }
    for j in 0..k {
        let mut dd = DVector::zeros(k);
        dd[j] = 1.0;
        out.push((DMatrix::zeros(m, k), DVector::from_element(m, 1.0 / m as f64), dd));
    }
    out
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[derive(Serialize)]
struct GradcheckReport {
    format_version: u32,
    mode: &'static str,
    rows: usize,
    cols: usize,
    status: &'static str,
    parameters_checked: usize,
    max_rel_error: Option<f64>,
    note: String,
}

const GRADCHECK_TOL: f64 = 1e-3;

fn cmd_gradcheck(g: &Global, a: &GradcheckArgs) -> CmdResult {
    let p = match &a.problem {
        Some(path) => read_problem(path)?,
        None if a.size == 0 => return Err(CliError::invalid("--size must be at least 1")),
        None => gradcheck_instance(g.seed, a.size, a.instance)?,
    };
    if !(a.step > 0.0 && a.step.is_finite()) {
        return Err(CliError::invalid("--step must be positive"));
    }
    let sol = solve(&p, g.solver, g.tol)?;
    let (mode, status, checked, worst, note) = match a.mode {
        GradMode::Envelope => {
            let grads = backward_similarity(1.0, &sol, &p, GradMode::Envelope)?;
            let worst = grads
                .d_cost
                .iter()
                .zip(sol.flows.iter())
                .map(|(d, x)| (d + x).abs())
                .fold(0.0, f64::max);
            let status = if grads.d_cost == -&sol.flows { "PASS" } else { "FAIL" };
            ("envelope", status, p.cells(), Some(worst), "d_cost = -flows".to_string())
        }
        GradMode::Full => match jacobian_flows(&sol, &p) {
            Err(DiffError::SingularKkt { min_pair, condition }) => (
                "full",
                "SKIP-degenerate",
                0,
                None,
                format!("min x+lambda {min_pair:e}, condition estimate {condition:e}"),
            ),
            Err(e) => return Err(e.into()),
            Ok(_) if sol.degenerate => ("full", "SKIP-degenerate", 0, None, "degenerate basis".into()),
            Ok(jac) => {
                let h = a.step;
                let mut worst: f64 = 0.0;
                let dirs = directions(p.rows(), p.cols());
                for (dc, ds, dd) in &dirs {
                    let analytic = jac.apply(dc, ds, dd)?;
                    let shifted = |t: f64| -> Result<DMatrix<f64>, CliError> {
                        let q = TransportProblem::new(p.cost() + dc * t, p.supply() + ds * t, p.demand() + dd * t)?;
                        Ok(solve_simplex(&q)?.flows)
                    };
                    let fd = (shifted(h)? - shifted(-h)?) / (2.0 * h);
                    for (x, y) in analytic.iter().zip(fd.iter()) {
                        worst = worst.max(rel_err(*x, *y));
                    }
                }
                let status = if worst <= GRADCHECK_TOL { "PASS" } else { "FAIL" };
                ("full", status, dirs.len(), Some(worst), format!("central differences, step {h:e}"))
            }
        },
    };
    match worst {
        Some(w) => println!("gradcheck {mode}: {status} (max relative error {w:.3e} over {checked} parameters)"),
        None => println!("gradcheck {mode}: {status} ({note})"),
    }
    write_json(
        &g.out,
        "gradcheck.json",
        &GradcheckReport {
            format_version: FORMAT_VERSION,
            mode,
            rows: p.rows(),
            cols: p.cols(),
            status,
            parameters_checked: checked,
            max_rel_error: worst,
            note,
        },
    )?;
    Ok(if status == "FAIL" { 1 } else { 0 })
}

#[derive(Serialize)]
struct GenReport {
    format_version: u32,
    manifest: String,
    class_count: usize,
    sets_per_class: usize,
    spatial: (usize, usize),
    channels: usize,
    cluster_sep: f64,
    background_fraction: f64,
    background_scale: f64,
    seed: u64,
}

fn cmd_gen(g: &Global, a: &GenArgs) -> CmdResult {
    let spec = SynthSpec {
        class_count: a.classes,
        sets_per_class: a.sets_per_class,
        spatial: (a.height, a.width),
        channels: a.channels,
        cluster_sep: a.sep,
        background_fraction: a.background_fraction,
        background_scale: a.background_scale,
        seed: g.seed,
    };
    let col = generate(&spec)?;
    let manifest = save_collection(&col, &g.out)?;
    write_json(
        &g.out,
        "gen.json",
        &GenReport {
            format_version: FORMAT_VERSION,
            manifest: "manifest.tsv".into(),
            class_count: spec.class_count,
            sets_per_class: spec.sets_per_class,
            spatial: spec.spatial,
            channels: spec.channels,
            cluster_sep: spec.cluster_sep,
            background_fraction: spec.background_fraction,
            background_scale: spec.background_scale,
            seed: spec.seed,
        },
    )?;
    println!("wrote {} sets to {}", col.len(), manifest.display());
    Ok(0)
}

fn embed(path: &Path, ex: &ExtractArgs, seed: u64) -> Result<EmbeddedCollection, CliError> {
    let col = load_collection(path)?;
    Ok(EmbeddedCollection::from_tensors(&col, &ex.config(seed))?)
}

#[derive(Serialize)]
struct EpisodeRow {
    episode_id: usize,
    method: &'static str,
    n_way: usize,
    k_shot: usize,
    accuracy: f64,
    format_version: u32,
}

#[derive(Serialize)]
struct EpisodeSummary {
    format_version: u32,
    method: &'static str,
    n_way: usize,
    k_shot: usize,
    q_per_class: usize,
    mean: f64,
    ci95: f64,
    episode_count: usize,
}

fn cmd_episodes(g: &Global, a: &EpisodesArgs) -> CmdResult {
    if a.n_way == 0 || a.k_shot == 0 || a.queries == 0 {
        return Err(CliError::invalid("--n-way, --k-shot and --queries must be at least 1"));
    }
    let col = embed(&a.collection, &a.extract, g.seed)?;
    let emd = emd_config(g, &a.extract);
    let sfc = SfcConfig {
        init: if a.sfc.sfc_concat { SfcInit::Concat } else { SfcInit::NodeMean },
        learning_rate: a.sfc.sfc_lr,
        batch_size: a.sfc.sfc_batch,
        iterations: a.sfc.sfc_iterations,
        temperature: a.sfc.temperature,
        seed: derive_seed(g.seed, u64::MAX),
    };
    let spec = EpisodeSpec {
        n_way: a.n_way,
        k_shot: a.k_shot,
        q_per_class: a.queries,
    };
    let results = run_episodes(&col, spec, a.episodes, a.method, &emd, &sfc, g.seed)?;
    let rows: Vec<EpisodeRow> = results
        .iter()
        .map(|r| EpisodeRow {
            episode_id: r.episode_id,
            method: a.method.name(),
            n_way: a.n_way,
            k_shot: a.k_shot,
            accuracy: r.accuracy,
            format_version: FORMAT_VERSION,
        })
        .collect();
    write_csv(
        &g.out,
        "episodes.csv",
        &["episode_id", "method", "n_way", "k_shot", "accuracy", "format_version"],
        &rows,
    )?;
    let acc: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    let s = summarize(&acc);
    write_json(
        &g.out,
        "episodes_summary.json",
        &EpisodeSummary {
            format_version: FORMAT_VERSION,
            method: a.method.name(),
            n_way: a.n_way,
            k_shot: a.k_shot,
            q_per_class: a.queries,
            mean: s.mean,
            ci95: s.ci95,
            episode_count: s.episode_count,
        },
    )?;
    println!(
        "{}-way {}-shot {}: {:.4} ± {:.4} over {} episodes",
        a.n_way,
        a.k_shot,
        a.method.name(),
        s.mean,
        s.ci95,
        s.episode_count
    );
    Ok(0)
}

#[derive(Serialize)]
struct RetrievalRow {
    query: usize,
    label: usize,
    top1: usize,
    top1_label: usize,
    p_at_1: f64,
    r_precision: f64,
    map_at_r: f64,
    format_version: u32,
}

#[derive(Serialize)]
struct RetrievalSummary {
    format_version: u32,
    queries: usize,
    gallery: usize,
    exclude_self: bool,
    p_at_1: f64,
    r_precision: f64,
    map_at_r: f64,
}

fn cmd_retrieve(g: &Global, a: &RetrieveArgs) -> CmdResult {
    let gallery = embed(&a.collection, &a.extract, g.seed)?;
    let queries = match &a.queries {
        Some(path) => embed(path, &a.extract, derive_seed(g.seed, 1))?,
        None => gallery.clone(),
    };
    let exclude_self = a.queries.is_none();
    let run = rank_gallery(&queries.sets, &gallery.sets, &emd_config(g, &a.extract), exclude_self)?;
    let mut rows = Vec::with_capacity(queries.sets.len());
    for (q, (label, _)) in queries.sets.iter().enumerate() {
        let m = query_metrics(&run, q)?;
        let top1 = run.ranking[q][0];
        rows.push(RetrievalRow {
            query: q,
            label: *label,
            top1,
            top1_label: run.gallery_labels[top1],
            p_at_1: m.p_at_1,
            r_precision: m.r_precision,
            map_at_r: m.map_at_r,
            format_version: FORMAT_VERSION,
        });
    }
    write_csv(
        &g.out,
        "retrieval.csv",
        &["query", "label", "top1", "top1_label", "p_at_1", "r_precision", "map_at_r", "format_version"],
        &rows,
    )?;
    let n = rows.len().max(1) as f64;
    let summary = RetrievalSummary {
        format_version: FORMAT_VERSION,
        queries: rows.len(),
        gallery: gallery.sets.len(),
        exclude_self,
        p_at_1: rows.iter().map(|r| r.p_at_1).sum::<f64>() / n,
        r_precision: rows.iter().map(|r| r.r_precision).sum::<f64>() / n,
        map_at_r: rows.iter().map(|r| r.map_at_r).sum::<f64>() / n,
    };
    write_json(&g.out, "retrieval_summary.json", &summary)?;
    println!(
        "P@1 {:.4}  RP {:.4}  MAP@R {:.4}  ({} queries)",
        summary.p_at_1, summary.r_precision, summary.map_at_r, summary.queries
    );
    Ok(0)
}

#[derive(Serialize)]
struct Validation {
    episodes: usize,
    accuracy_before: f64,
    accuracy_after: f64,
}

#[derive(Serialize)]
struct TrainReport {
    format_version: u32,
    loss_curve: Vec<f64>,
    weight: Vec<Vec<f64>>,
    validation: Option<Validation>,
}

fn cmd_train(g: &Global, a: &TrainArgs) -> CmdResult {
    let train = embed(&a.collection, &a.extract, g.seed)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        episodes_per_epoch: a.episodes_per_epoch,
        learning_rate: a.lr,
        temperature: a.temperature,
        seed: g.seed,
        n_way: a.n_way,
        q_per_class: a.queries,
        out_channels: a.out_channels,
        init_noise: a.init_noise,
        emd: emd_config(g, &a.extract),
    };
    let model = train_projection(&train, &cfg)?;
    let validation = match &a.validation {
        None => None,
        Some(path) => {
            let valid = embed(path, &a.extract, derive_seed(g.seed, 1))?;
            let c_in = model.weight.nrows();
            let initial = cfg.initial_model(c_in);
            let spec = EpisodeSpec {
                n_way: a.n_way,
                k_shot: 1,
                q_per_class: a.queries,
            };
            let eval_seed = derive_seed(g.seed, 2);
            let accuracy = |m: &setemd::ProjectionModel| -> Result<f64, CliError> {
                let projected = valid.map_sets(|s| m.project(s));
                let res = run_episodes(
                    &projected,
                    spec,
                    a.validation_episodes,
                    KShotMethod::Nn,
                    &cfg.emd,
                    &SfcConfig::default(),
                    eval_seed,
                )?;
                Ok(summarize(&res.iter().map(|r| r.accuracy).collect::<Vec<_>>()).mean)
            };
            Some(Validation {
                episodes: a.validation_episodes,
                accuracy_before: accuracy(&initial)?,
                accuracy_after: accuracy(&model)?,
            })
        }
    };
    let first = model.loss_curve.first().copied().unwrap_or(f64::NAN);
    let last = model.loss_curve.last().copied().unwrap_or(f64::NAN);
    println!("trained {} steps: loss {first:.4} -> {last:.4}", model.loss_curve.len());
    if let Some(v) = &validation {
        println!(
            "validation accuracy {:.4} -> {:.4} ({} episodes)",
            v.accuracy_before, v.accuracy_after, v.episodes
        );
    }
    write_json(
        &g.out,
        "train.json",
        &TrainReport {
            format_version: FORMAT_VERSION,
            loss_curve: model.loss_curve.clone(),
            weight: rows_of(&model.weight),
            validation,
        },
    )?;
    Ok(0)
}

#[derive(Serialize)]
struct FlowDump {
    format_version: u32,
    similarity: f64,
    nodes_a: Vec<Vec<f64>>,
    nodes_b: Vec<Vec<f64>>,
    weights_a: Vec<f64>,
    weights_b: Vec<f64>,
    flow_matrix: Vec<Vec<f64>>,
    best_match: Vec<usize>,
}

fn cmd_flows(g: &Global, a: &FlowsArgs) -> CmdResult {
    // both maps share one extraction seed so identical inputs give identical sets
    let cfg = a.extract.config(g.seed);
    let qa = extract_with(&load_tensor(&a.query)?, &cfg)?;
    let sb = extract_with(&load_tensor(&a.support)?, &cfg)?;
    let m = match_sets(&qa, &sb, &emd_config(g, &a.extract))?;
    let dump = FlowDump {
        format_version: FORMAT_VERSION,
        similarity: m.similarity,
        nodes_a: rows_of(&qa.vectors),
        nodes_b: rows_of(&sb.vectors),
        weights_a: m.weights_a().iter().copied().collect(),
        weights_b: m.weights_b().iter().copied().collect(),
        flow_matrix: rows_of(&m.solution.flows),
        best_match: m.best_match(),
    };
    let path = write_json(&g.out, "flows.json", &dump)?;
    println!("similarity: {}", dump.similarity);
    println!("best match: {:?}", dump.best_match);
    if g.verbose > 0 {
        eprintln!("wrote {}", path.display());
    }
    Ok(0)
}

#[derive(Serialize)]
struct BenchRow {
    side: usize,
    nodes: usize,
    dim: usize,
    solver: &'static str,
    repeats: usize,
    median_secs: f64,
    format_version: u32,
}

fn cmd_bench(g: &Global, a: &BenchArgs) -> CmdResult {
    let cfg = BenchConfig {
        sizes: a.sizes.clone(),
        dims: a.dims.clone(),
        solvers: a.solvers.clone(),
        repeats: a.repeats,
        batch: a.batch,
        seed: g.seed,
    };
    let rows: Vec<BenchRow> = run_bench(&cfg)?
        .into_iter()
        .map(|r| BenchRow {
            side: r.side,
            nodes: r.nodes,
            dim: r.dim,
            solver: r.solver.name(),
            repeats: r.repeats,
            median_secs: r.median_secs,
            format_version: FORMAT_VERSION,
        })
        .collect();
    write_csv(
        &g.out,
        "bench.csv",
        &["side", "nodes", "dim", "solver", "repeats", "median_secs", "format_version"],
        &rows,
    )?;
    println!("{:>5} {:>6} {:>6} {:>8} {:>12}", "side", "nodes", "dim", "solver", "median_us");
    for r in &rows {
        println!(
            "{:>5} {:>6} {:>6} {:>8} {:>12.1}",
            r.side,
            r.nodes,
            r.dim,
            r.solver,
            r.median_secs * 1e6
        );
    }
    Ok(0)
}

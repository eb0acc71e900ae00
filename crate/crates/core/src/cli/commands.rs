use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Map, Value};

use super::config::Settings;
use super::matrix_file::{read_matrix, write_matrix};
use super::svg::{self, Series};
use super::{
    CertKind, CertifyArgs, Cli, Command, FisherArgs, ProbeArgs, ReportArgs, SimKind, SimulateArgs,
    ThresholdArgs, TrackArgs, EXIT_DRIFT, EXIT_ERROR, EXIT_OK,
};
use crate::certificates::{self, LoraFactors};
use crate::error::{Result, ZdpError};
use crate::fisher::{self, SilentFixture};
use crate::nullspace::{self, ActivationMatrix, CutoffPolicy, NullBasis, Projector, Side};
use crate::online::{self, Deflation, OnalState, QuadraticSurrogate, StreamSpec, TrackerConfig};
use crate::probes::ProbeReport;
use crate::synth::{self, RngSpec};
use crate::thresholds::{self, Route, ThresholdSpec, Verdict};

pub fn dispatch(cli: &Cli, stdout: &mut dyn Write) -> Result<i32> {
    let mut s = Settings::load(cli.config.as_deref())?;
    s.flag("seed", cli.seed);
    let out = cli.out.clone();
    match &cli.command {
        Command::Probe(a) => probe(&mut s, a, out.as_deref(), stdout),
        Command::Threshold(a) => threshold(&mut s, a, out.as_deref(), stdout),
        Command::Certify(a) => certify(&mut s, a, out.as_deref(), stdout),
        Command::Track(a) => track(&mut s, a, out.as_deref(), stdout),
        Command::Simulate(a) => simulate(&mut s, a, out.as_deref(), stdout),
        Command::FisherCheck(a) => fisher_check(&mut s, a, out.as_deref(), stdout),
        Command::Report(a) => report(&mut s, a, out.as_deref(), stdout),
    }
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

/// Report header: tool, version, command, seed and effective config.
fn envelope(command: &str, s: &Settings, seed: u64) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("tool".into(), json!("zdp"));
    m.insert("version".into(), json!(crate::VERSION));
    m.insert("command".into(), json!(command));
    m.insert("seed".into(), json!(seed));
    let config: BTreeMap<&String, &String> = s.effective().iter().collect();
    m.insert("config".into(), json!(config));
    m
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

fn emit(doc: &Map<String, Value>, out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    let mut text = serde_json::to_string_pretty(doc)?;
    text.push('\n');
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => stdout.write_all(text.as_bytes())?,
    }
    Ok(())
}

pub fn parse_cutoff(raw: &str) -> Result<CutoffPolicy> {
    let bad = || {
        ZdpError::InvalidArgument(format!(
            "cutoff must be default, relative:<f> or absolute:<tau>, got {raw:?}"
        ))
    };
    match raw.split_once(':') {
        None if raw == "default" => Ok(CutoffPolicy::Default),
        Some(("relative", v)) => Ok(CutoffPolicy::Relative(v.parse().map_err(|_| bad())?)),
        Some(("absolute", v)) => Ok(CutoffPolicy::Absolute(v.parse().map_err(|_| bad())?)),
        _ => Err(bad()),
    }
}

pub fn parse_routes(raw: &str) -> Result<Vec<Route>> {
    match raw {
        "all" => Ok(Route::ALL.to_vec()),
        "lm" => Ok(vec![Route::Lm]),
        "mp-edge" => Ok(vec![Route::MpEdge]),
        "ratio" => Ok(vec![Route::Ratio]),
        _ => Err(ZdpError::InvalidArgument(format!(
            "route must be lm, mp-edge, ratio or all, got {raw:?}"
        ))),
    }
}

fn load_activations(s: &mut Settings, key: &str) -> Result<ActivationMatrix> {
    let path = s.get_str(key, None)?;
    ActivationMatrix::new(read_matrix(Path::new(&path))?)
}

fn load_matrix(s: &mut Settings, key: &str) -> Result<DMatrix<f64>> {
    let path = s.get_str(key, None)?;
    read_matrix(Path::new(&path))
}

fn load_basis(s: &mut Settings, key: &str) -> Result<NullBasis> {
    NullBasis::from_orthonormal(load_matrix(s, key)?, 0.0, Side::Right)
}

fn probe(
    s: &mut Settings,
    a: &ProbeArgs,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<i32> {
    s.flag("base", path_str(&a.base))
        .flag("perturbed", path_str(&a.perturbed))
        .flag("cutoff", a.cutoff.clone())
        .flag("alpha", a.alpha)
        .flag("sigma2", a.sigma2.clone())
        .flag("route", a.route.clone());
    let seed = s.seed()?;
    let h = load_activations(s, "base")?;
    let h_hat = load_activations(s, "perturbed")?;
    if h.data().shape() != h_hat.data().shape() {
        return Err(ZdpError::DimensionMismatch(format!(
            "base is {:?}, perturbed is {:?}",
            h.data().shape(),
            h_hat.data().shape()
        )));
    }
    let cutoff = parse_cutoff(&s.get_str("cutoff", Some("default"))?)?;
    let alpha = s.get::<f64>("alpha", Some(0.05))?;
    let routes = parse_routes(&s.get_str("route", Some("ratio"))?)?;
    let sigma2_raw = s.get_str("sigma2", Some("1"))?;
    let v0 = nullspace::null_basis(&h, cutoff, Side::Right)?;
    let mut report = ProbeReport::compute(&h_hat, &v0)?;
    let sigma2 = if sigma2_raw == "estimate" {
        let est = thresholds::estimate_sigma2(&(h_hat.data() - h.data()));
        if est <= 0.0 {
            return Err(ZdpError::InvalidArgument(
                "cannot estimate sigma2: perturbation is zero".into(),
            ));
        }
        est
    } else {
        sigma2_raw.parse::<f64>().map_err(|_| {
            ZdpError::InvalidArgument(format!(
                "sigma2 must be a number or `estimate`, got {sigma2_raw:?}"
            ))
        })?
    };
    let spec = ThresholdSpec::new(h.n_tokens(), h.dim(), v0.k(), sigma2, alpha)?;
    let mut route_errors = BTreeMap::new();
    for route in &routes {
        let value = if *route == Route::Ratio {
            report.snl
        } else {
            report.nvl
        };
        match thresholds::drift_alarm(value, &spec, *route) {
            Ok(alarm) => report.alarms.push(alarm),
            Err(e) => {
                route_errors.insert(route.to_string(), e.to_string());
            }
        }
    }
    if report.alarms.is_empty() {
        let msg: Vec<String> = route_errors
            .iter()
            .map(|(r, e)| format!("{r}: {e}"))
            .collect();
        return Err(ZdpError::InvalidArgument(format!(
            "no route could be evaluated ({})",
            msg.join("; ")
        )));
    }
    let drift = report.alarms.iter().any(|a| a.verdict == Verdict::Drift);
    let mut doc = envelope("probe", s, seed);
    doc.insert("sigma2".into(), json!(sigma2));
    doc.insert("cutoff_value".into(), json!(v0.cutoff()));
    doc.insert("report".into(), to_value(&report)?);
    if !route_errors.is_empty() {
        doc.insert("route_errors".into(), json!(route_errors));
    }
    doc.insert(
        "verdict".into(),
        json!(if drift { "drift" } else { "quiet" }),
    );
    emit(&doc, out, stdout)?;
    Ok(if drift { EXIT_DRIFT } else { EXIT_OK })
}

fn threshold(
    s: &mut Settings,
    a: &ThresholdArgs,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<i32> {
    s.flag("n", a.n)
        .flag("d", a.d)
        .flag("k", a.k)
        .flag("alpha", a.alpha)
        .flag("sigma2", a.sigma2)
        .flag("route", a.route.clone())
        .flag("trials", a.trials);
    let seed = s.seed()?;
    let n = s.get::<usize>("n", None)?;
    let d = s.get::<usize>("d", None)?;
    let k = s.get::<usize>("k", None)?;
    let alpha = s.get::<f64>("alpha", Some(0.05))?;
    let sigma2 = s.get::<f64>("sigma2", Some(1.0))?;
    let routes = parse_routes(&s.get_str("route", Some("all"))?)?;
    let trials = s
        .get_opt_str("trials")
        .map(|t| t.parse::<usize>())
        .transpose()
        .map_err(|_| ZdpError::InvalidArgument("trials must be a positive integer".into()))?;
    let spec = ThresholdSpec::new(n, d, k, sigma2, alpha)?;
    let mut per_route = Map::new();
    for route in routes {
        let entry = match route.threshold(&spec) {
            Ok(th) => json!({
                "threshold": th,
                "statistic": route.statistic(),
                "nominal_level": route.nominal_level(alpha),
            }),
            Err(e) => json!({ "error": e.to_string() }),
        };
        per_route.insert(route.to_string(), entry);
    }
    let mut doc = envelope("threshold", s, seed);
    doc.insert(
        "inputs".into(),
        json!({
            "n": n, "d": d, "k": k, "sigma2": sigma2, "alpha": alpha,
            "log_inv_alpha": spec.log_inv_alpha(),
            "ratio_denominator": spec.ratio_denominator(),
        }),
    );
    doc.insert("routes".into(), Value::Object(per_route));
    if let Some(trials) = trials {
        doc.insert(
            "coverage".into(),
            to_value(&thresholds::tail_mc_validate(&spec, trials, seed)?)?,
        );
    }
    emit(&doc, out, stdout)?;
    Ok(EXIT_OK)
}

fn certify(
    s: &mut Settings,
    a: &CertifyArgs,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<i32> {
    s.flag("base", path_str(&a.base))
        .flag("perturbed", path_str(&a.perturbed))
        .flag("perturbation", path_str(&a.perturbation))
        .flag("a", path_str(&a.a))
        .flag("b", path_str(&a.b))
        .flag("basis", path_str(&a.basis))
        .flag("pstar", path_str(&a.pstar))
        .flag("sigma", path_str(&a.sigma))
        .flag("delta", a.delta)
        .flag("l", a.l)
        .flag("d", a.d)
        .flag("r", a.r)
        .flag("k", a.k)
        .flag("trials", a.trials)
        .flag("cutoff", a.cutoff.clone());
    let seed = s.seed()?;
    let (name, satisfied, body) = match a.kind {
        CertKind::VarianceLeak => {
            let h = load_activations(s, "base")?;
            let dh = load_matrix(s, "perturbation")?;
            let v0 = nullspace::null_basis(
                &h,
                parse_cutoff(&s.get_str("cutoff", Some("default"))?)?,
                Side::Right,
            )?;
            let rep = certificates::variance_leak_certificate(&h, &dh, &v0)?;
            ("variance-leak", rep.result.satisfied, to_value(&rep)?)
        }
        CertKind::RankLeak => {
            let h = load_activations(s, "base")?;
            let f = LoraFactors::new(load_matrix(s, "a")?, load_matrix(s, "b")?)?;
            let v0 = nullspace::null_basis(
                &h,
                parse_cutoff(&s.get_str("cutoff", Some("default"))?)?,
                Side::Right,
            )?;
            let rep = certificates::rank_leak_certificate(&f, &v0)?;
            ("rank-leak", rep.result.satisfied, to_value(&rep)?)
        }
        CertKind::DkResidual => {
            let h = load_activations(s, "base")?;
            let h_hat = load_activations(s, "perturbed")?;
            let v_est = load_basis(s, "basis")?;
            let v_true = nullspace::null_basis(
                &h,
                parse_cutoff(&s.get_str("cutoff", Some("default"))?)?,
                Side::Right,
            )?;
            if h.data().shape() != h_hat.data().shape() {
                return Err(ZdpError::DimensionMismatch(
                    "base and perturbed differ in shape".into(),
                ));
            }
            let dh = h_hat.data() - h.data();
            let rep = certificates::dk_residual_certificate(&h_hat, &v_true, &v_est, &dh)?;
            (
                "dk-residual",
                rep.one_sided.satisfied && rep.two_sided.satisfied,
                to_value(&rep)?,
            )
        }
        CertKind::TraceSandwich => {
            let p = Projector::from_columns(&load_matrix(s, "basis")?)?;
            let pstar = Projector::from_columns(&load_matrix(s, "pstar")?)?;
            let sigma = load_matrix(s, "sigma")?;
            let delta = s.get::<f64>("delta", None)?;
            let l = s.get::<f64>("l", None)?;
            let rep = certificates::projector_trace_sandwich(&p, &pstar, &sigma, delta, l)?;
            (
                "trace-sandwich",
                rep.result.satisfied && rep.identity.satisfied,
                to_value(&rep)?,
            )
        }
        CertKind::Overlap => {
            let d = s.get::<usize>("d", None)?;
            let r = s.get::<usize>("r", None)?;
            let k = s.get::<usize>("k", None)?;
            let trials = s.get::<usize>("trials", Some(20_000))?;
            let expected = certificates::expected_overlap(d, r, k)?;
            let est = certificates::mc_overlap(d, r, k, trials, seed)?;
            let ok = (est.mean - expected).abs() <= 3.0 * est.stderr + 1e-12;
            let body = json!({ "expected": expected, "estimate": est, "z": if est.stderr > 0.0 { (est.mean - expected) / est.stderr } else { 0.0 } });
            ("overlap", ok, body)
        }
    };
    let mut doc = envelope("certify", s, seed);
    doc.insert("certificate".into(), json!(name));
    doc.insert("satisfied".into(), json!(satisfied));
    doc.insert("report".into(), body);
    emit(&doc, out, stdout)?;
    Ok(if satisfied { EXIT_OK } else { EXIT_ERROR })
}

fn parse_deflation(raw: &str) -> Result<Deflation> {
    match raw {
        "update" => Ok(Deflation::Update),
        "iterate" => Ok(Deflation::Iterate),
        _ => Err(ZdpError::InvalidArgument(format!(
            "deflation must be update or iterate, got {raw:?}"
        ))),
    }
}

fn track(
    s: &mut Settings,
    a: &TrackArgs,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<i32> {
    s.flag("d", a.d)
        .flag("k", a.k)
        .flag("batch-rows", a.batch_rows)
        .flag("delta", a.delta)
        .flag("lambda-max", a.lambda_max)
        .flag("steps", a.steps)
        .flag("c", a.c)
        .flag("warm", a.warm.then_some(true))
        .flag("deflation", a.deflation.clone())
        .flag("eps", a.eps);
    let seed = s.seed()?;
    let d = s.get::<usize>("d", Some(32))?;
    let k = s.get::<usize>("k", Some(4))?;
    let m = s.get::<usize>("batch-rows", Some(16))?;
    let delta = s.get::<f64>("delta", Some(0.5))?;
    let lambda_max = s.get::<f64>("lambda-max", Some(delta))?;
    let steps = s.get::<usize>("steps", Some(1000))?;
    let c = s
        .get_opt_str("c")
        .map(|v| v.parse::<f64>())
        .transpose()
        .map_err(|_| ZdpError::InvalidArgument("c must be a number".into()))?;
    let warm = s.get_bool("warm", false)?;
    let deflation = parse_deflation(&s.get_str("deflation", Some("update"))?)?;
    let eps = s.get::<f64>("eps", Some(0.01))?;
    let spec = StreamSpec::linear(d, k, m, delta, lambda_max, seed)?;
    let run = online::regret_harness(&spec, steps, &TrackerConfig { c, warm, deflation })?;
    let fit = online::aggregate_runs(std::slice::from_ref(&run));

    let mut text = String::new();
    for t in 0..steps {
        let line = json!({
            "type": "step",
            "t": t + 1,
            "d_t": run.scores[t],
            "d_t_star": run.oracle_scores[t],
            "gap": run.gaps[t],
        });
        text.push_str(&serde_json::to_string(&line)?);
        text.push('\n');
    }
    let mut summary = envelope("track", s, seed);
    summary.insert("type".into(), json!("summary"));
    summary.insert("stream".into(), to_value(&spec)?);
    summary.insert("eigengap".into(), json!(spec.eigengap()));
    summary.insert("sigma_norm".into(), json!(spec.sigma_norm()));
    summary.insert("c".into(), json!(run.c));
    summary.insert("steps".into(), json!(steps));
    summary.insert("regret".into(), json!(run.regret()));
    summary.insert(
        "log_fit".into(),
        json!({ "a": run.log_fit.0, "b": run.log_fit.1 }),
    );
    summary.insert("c_hat".into(), json!(fit.c_hat));
    summary.insert("eps".into(), json!(eps));
    let t_eps = if fit.c_hat > 0.0 {
        Some(online::epsilon_accuracy_time(fit.c_hat, eps)?)
    } else {
        None
    };
    summary.insert("t_eps".into(), json!(t_eps));
    summary.insert(
        "empirical_crossing".into(),
        json!(online::empirical_crossing_time(&run.gaps, eps)),
    );
    summary.insert("tau2_estimate".into(), json!(run.tau2_estimate));
    summary.insert("step_warning".into(), json!(run.step_warning));
    text.push_str(&serde_json::to_string(&summary)?);
    text.push('\n');
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => stdout.write_all(text.as_bytes())?,
    }
    Ok(EXIT_OK)
}

fn simulate(
    s: &mut Settings,
    a: &SimulateArgs,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<i32> {
    s.flag("n", a.n)
        .flag("d", a.d)
        .flag("rank", a.rank)
        .flag("sigma2", a.sigma2)
        .flag("base", path_str(&a.base))
        .flag("amplitude", a.amplitude)
        .flag("r", a.r)
        .flag("angles", a.angles.clone())
        .flag("scale-a", a.scale_a)
        .flag("scale-b", a.scale_b)
        .flag("out-b", path_str(&a.out_b))
        .flag("basis-out", path_str(&a.basis_out))
        .flag("steps", a.steps)
        .flag("c", a.c)
        .flag("clip", a.clip)
        .flag("reorth-period", a.reorth_period);
    s.flag("out", out.map(|p| p.display().to_string()));
    let seed = s.seed()?;
    let rng = RngSpec::new(seed);
    let need_out =
        |s: &mut Settings| -> Result<PathBuf> { Ok(PathBuf::from(s.get_str("out", None)?)) };
    let mut doc;
    match a.kind {
        SimKind::Base => {
            let n = s.get::<usize>("n", Some(100))?;
            let d = s.get::<usize>("d", Some(16))?;
            let rank = s.get::<usize>("rank", Some(10))?;
            let path = need_out(s)?;
            let basis_out = s.get_opt_str("basis-out");
            let (h, v0) = synth::rank_deficient_base(n, d, rank, rng)?;
            write_matrix(&path, h.data())?;
            if let Some(b) = &basis_out {
                write_matrix(Path::new(b), v0.basis())?;
            }
            doc = envelope("simulate", s, seed);
            doc.insert("shape".into(), json!([n, d]));
            doc.insert("k".into(), json!(v0.k()));
        }
        SimKind::Gaussian => {
            let n = s.get::<usize>("n", Some(100))?;
            let d = s.get::<usize>("d", Some(16))?;
            let sigma2 = s.get::<f64>("sigma2", Some(1.0))?;
            let path = need_out(s)?;
            let x = synth::gaussian_activations(n, d, sigma2, rng)?;
            write_matrix(&path, x.data())?;
            doc = envelope("simulate", s, seed);
            doc.insert("shape".into(), json!([n, d]));
        }
        SimKind::NullBump => {
            let h = load_activations(s, "base")?;
            let amplitude = s.get::<f64>("amplitude", Some(1.0))?;
            let path = need_out(s)?;
            let v0 = synth::recover_null_basis(&h)?;
            let bumped = synth::null_bump(&h, &v0, amplitude)?;
            write_matrix(&path, bumped.data())?;
            doc = envelope("simulate", s, seed);
            doc.insert("shape".into(), json!([h.n_tokens(), h.dim()]));
            doc.insert("k".into(), json!(v0.k()));
        }
        SimKind::Lora => {
            let h = load_activations(s, "base")?;
            let r = s.get::<usize>("r", Some(2))?;
            let v0 = synth::recover_null_basis(&h)?;
            let default_angles = vec![std::f64::consts::FRAC_PI_2; r.min(v0.k())];
            let angles = s.get_list("angles", &default_angles)?;
            let scale_a = s.get::<f64>("scale-a", Some(1.0))?;
            let scale_b = s.get::<f64>("scale-b", Some(1.0))?;
            let path = need_out(s)?;
            let path_b = PathBuf::from(s.get_str("out-b", None)?);
            let f = synth::aligned_lowrank_factors(&v0, r, &angles, scale_a, scale_b, rng)?;
            write_matrix(&path, f.a())?;
            write_matrix(&path_b, f.b())?;
            doc = envelope("simulate", s, seed);
            doc.insert("shape".into(), json!([h.dim(), r]));
            doc.insert("k".into(), json!(v0.k()));
        }
        SimKind::Onal => {
            let n = s.get::<usize>("n", Some(64))?;
            let d = s.get::<usize>("d", Some(16))?;
            let rank = s.get::<usize>("rank", Some(10))?;
            let r = s.get::<usize>("r", Some(2))?;
            let steps = s.get::<usize>("steps", Some(1000))?;
            let c = s.get::<f64>("c", Some(0.01))?;
            let clip = s.get::<f64>("clip", Some(0.0))?;
            let reorth = s.get::<u64>("reorth-period", Some(10))?;
            let summary = onal_simulation(n, d, rank, r, steps, c, clip, reorth, rng)?;
            doc = envelope("simulate", s, seed);
            doc.insert("onal".into(), summary);
        }
    }
    doc.insert("kind".into(), json!(format!("{:?}", a.kind).to_lowercase()));
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    stdout.write_all(text.as_bytes())?;
    Ok(EXIT_OK)
}

/// Null-aligned updates against a quadratic surrogate on a synthetic layer;
/// reports the induced SNL on the base activations.
#[allow(clippy::too_many_arguments)]
pub fn onal_simulation(
    n: usize,
    d: usize,
    rank: usize,
    r: usize,
    steps: usize,
    c: f64,
    clip: f64,
    reorth: u64,
    rng: RngSpec,
) -> Result<Value> {
    let (h, v0) = synth::rank_deficient_base(n, d, rank, rng.substream(0))?;
    let mut gen = rng.substream(1).rng();
    let f = LoraFactors::new(
        synth::standard_normal_matrix(d, r, &mut gen),
        synth::standard_normal_matrix(d, r, &mut gen),
    )?;
    let loss = QuadraticSurrogate {
        target: synth::standard_normal_matrix(d, d, &mut gen),
    };
    let mut state = OnalState::new(vec![(f, v0.projector())], c, clip, reorth)?;
    let initial_loss = loss.loss(&state.layers()[0].factors);
    let mut worst_containment: f64 = 0.0;
    for _ in 0..steps {
        let g = loss.gradients(&state.layers()[0].factors);
        state.step(&[g])?;
        worst_containment = worst_containment.max(state.containment_defect());
    }
    let f = &state.layers()[0].factors;
    let h_hat = h.data() + online::induced_delta_h(h.data(), f);
    let snl = (&h_hat * v0.basis()).norm_squared() / h_hat.norm_squared();
    Ok(json!({
        "steps": steps,
        "k": v0.k(),
        "initial_loss": initial_loss,
        "final_loss": loss.loss(f),
        "max_containment_defect": worst_containment,
        "snl": snl,
    }))
}

fn fisher_check(
    s: &mut Settings,
    a: &FisherArgs,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<i32> {
    s.flag("classes", a.classes)
        .flag("d", a.d)
        .flag("rank", a.rank)
        .flag("scales", a.scales.clone())
        .flag("direction", a.direction.clone())
        .flag("leak", a.leak)
        .flag("require-silence", a.require_silence.then_some(true))
        .flag("tol", a.tol);
    let seed = s.seed()?;
    let classes = s.get::<usize>("classes", Some(8))?;
    let d = s.get::<usize>("d", Some(16))?;
    let rank = s.get::<usize>("rank", Some(10))?;
    let default_scales: Vec<f64> = (0..=8)
        .map(|i| 10f64.powf(-3.0 + 0.25 * i as f64))
        .collect();
    let scales = s.get_list("scales", &default_scales)?;
    let direction = s.get_str("direction", Some("image"))?;
    let leak = s.get::<f64>("leak", Some(0.0))?;
    let require = s.get_bool("require-silence", false)?;
    let tol = s.get::<f64>("tol", Some(1e-10))?;
    let mut fx = SilentFixture::new(classes, d, rank, RngSpec::new(seed))?;
    if leak != 0.0 {
        fx = fx.leaky(leak)?;
    }
    let dtheta = match direction.as_str() {
        "image" => fx.image_direction(),
        "null" => fx.null_direction(),
        "mixed" => fx.image_direction() + fx.null_direction(),
        _ => {
            return Err(ZdpError::InvalidArgument(format!(
                "direction must be image, null or mixed, got {direction:?}"
            )))
        }
    };
    let results = fisher::kl_second_order_check(&fx.model, &fx.h, &fx.acts, &dtheta, &scales)?;
    let exponent = fisher::residual_exponent(&results);
    let f = fisher::softmax_fim(&fx.model, &fx.h)?;
    let silence = fisher::fisher_silence_check(&f, &fx.v0, tol)?;
    let mut doc = envelope("fisher-check", s, seed);
    doc.insert("k".into(), json!(fx.v0.k()));
    doc.insert("results".into(), to_value(&results)?);
    doc.insert("exponent".into(), json!(exponent));
    doc.insert("silence".into(), to_value(&silence)?);
    emit(&doc, out, stdout)?;
    Ok(if require && !silence.silent {
        EXIT_ERROR
    } else {
        EXIT_OK
    })
}

/// One parsed input of `report`: its command and the documents it holds.
struct Input {
    command: String,
    summary: Value,
    steps: Vec<Value>,
}

fn parse_input(path: &Path) -> Result<Input> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ZdpError::Format(format!("{}: {e}", path.display())))?;
    let bad = |msg: String| ZdpError::Format(format!("{}: {msg}", path.display()));
    let (summary, steps) = match serde_json::from_str::<Value>(&text) {
        Ok(v) => (v, Vec::new()),
        Err(_) => {
            let mut steps = Vec::new();
            let mut summary = None;
            for (i, line) in text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
            {
                let v: Value =
                    serde_json::from_str(line).map_err(|e| bad(format!("line {}: {e}", i + 1)))?;
                match v.get("type").and_then(Value::as_str) {
                    Some("step") => steps.push(v),
                    Some("summary") => summary = Some(v),
                    _ => return Err(bad(format!("line {}: unknown record", i + 1))),
                }
            }
            (
                summary.ok_or_else(|| bad("no summary record".into()))?,
                steps,
            )
        }
    };
    let command = summary
        .get("command")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing `command` field".into()))?
        .to_string();
    Ok(Input {
        command,
        summary,
        steps,
    })
}

fn step_field(steps: &[Value], key: &str) -> Result<Vec<f64>> {
    steps
        .iter()
        .map(|v| {
            v.get(key)
                .and_then(Value::as_f64)
                .ok_or_else(|| ZdpError::Format(format!("step record lacks `{key}`")))
        })
        .collect()
}

fn report(
    s: &mut Settings,
    a: &ReportArgs,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<i32> {
    if a.inputs.is_empty() {
        return Err(ZdpError::InvalidArgument(
            "report needs at least one input".into(),
        ));
    }
    let joined = a
        .inputs
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(",");
    s.flag("inputs", Some(joined))
        .flag("plot-dir", path_str(&a.plot_dir));
    let _ = s.get_str("inputs", None)?;
    let plot_dir = s.get_opt_str("plot-dir").map(PathBuf::from);
    let seed = s.seed()?;
    let inputs = a
        .inputs
        .iter()
        .map(|p| parse_input(p))
        .collect::<Result<Vec<_>>>()?;
    let command = inputs[0].command.clone();
    if let Some(other) = inputs.iter().find(|i| i.command != command) {
        return Err(ZdpError::Format(format!(
            "incompatible inputs: `{command}` and `{}` outputs cannot be aggregated",
            other.command
        )));
    }
    let mut doc = envelope("report", s, seed);
    doc.insert("source_command".into(), json!(command));
    doc.insert("inputs".into(), json!(inputs.len()));
    doc.insert(
        "seeds".into(),
        json!(inputs
            .iter()
            .map(|i| i.summary.get("seed").cloned().unwrap_or(Value::Null))
            .collect::<Vec<_>>()),
    );
    let mut plots = Vec::new();
    if command == "track" {
        let gaps = inputs
            .iter()
            .map(|i| step_field(&i.steps, "gap"))
            .collect::<Result<Vec<_>>>()?;
        let steps = gaps[0].len();
        if steps == 0 || gaps.iter().any(|g| g.len() != steps) {
            return Err(ZdpError::Format(
                "incompatible inputs: track runs differ in length".into(),
            ));
        }
        let runs: Vec<online::RegretRun> = inputs
            .iter()
            .zip(&gaps)
            .map(|(input, g)| {
                let cumulative: Vec<f64> = g
                    .iter()
                    .scan(0.0, |acc, x| {
                        *acc += x;
                        Some(*acc)
                    })
                    .collect();
                online::RegretRun {
                    seed: input
                        .summary
                        .get("seed")
                        .and_then(Value::as_u64)
                        .unwrap_or(0),
                    c: input
                        .summary
                        .get("c")
                        .and_then(Value::as_f64)
                        .unwrap_or(f64::NAN),
                    steps,
                    scores: Vec::new(),
                    oracle_scores: Vec::new(),
                    gaps: g.clone(),
                    log_fit: online::log_fit(&cumulative),
                    cumulative,
                    tau2_estimate: input
                        .summary
                        .get("tau2_estimate")
                        .and_then(Value::as_f64)
                        .unwrap_or(f64::NAN),
                    step_warning: None,
                }
            })
            .collect();
        let agg = online::aggregate_runs(&runs);
        doc.insert("steps".into(), json!(steps));
        doc.insert("mean_regret".into(), json!(agg.mean_cumulative[steps - 1]));
        doc.insert(
            "log_fit".into(),
            json!({ "a": agg.log_fit.0, "b": agg.log_fit.1 }),
        );
        doc.insert("c_hat".into(), json!(agg.c_hat));
        doc.insert("mean_gap".into(), json!(agg.mean_gap));
        doc.insert("stderr_gap".into(), json!(agg.stderr_gap));
        doc.insert("mean_cumulative".into(), json!(agg.mean_cumulative));
        if plot_dir.is_some() {
            let ts: Vec<f64> = (1..=steps).map(|t| t as f64).collect();
            let gap_series = Series {
                name: "mean gap".into(),
                points: ts
                    .iter()
                    .zip(&agg.mean_gap)
                    .map(|(t, g)| (*t, *g))
                    .collect(),
                band: Some(
                    ts.iter()
                        .zip(agg.mean_gap.iter().zip(&agg.stderr_gap))
                        .map(|(t, (g, e))| (*t, g - 2.0 * e, g + 2.0 * e))
                        .collect(),
                ),
            };
            let regret_series = Series {
                name: "mean R_t".into(),
                points: ts
                    .iter()
                    .zip(&agg.mean_cumulative)
                    .map(|(t, r)| (*t, *r))
                    .collect(),
                band: None,
            };
            plots.push((
                "gap.svg",
                svg::line_chart("Mean gap D_t - D_t*", "t", "gap", &[gap_series], true),
            ));
            plots.push((
                "regret.svg",
                svg::line_chart("Cumulative regret", "t", "R_t", &[regret_series], true),
            ));
        }
    } else {
        if command == "threshold" && plot_dir.is_some() {
            let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for input in &inputs {
                let alpha = input
                    .summary
                    .pointer("/inputs/alpha")
                    .and_then(Value::as_f64);
                let routes = input
                    .summary
                    .pointer("/coverage/routes")
                    .and_then(Value::as_array);
                if let (Some(alpha), Some(routes)) = (alpha, routes) {
                    for r in routes {
                        if let (Some(name), Some(rate)) = (
                            r.get("route").and_then(Value::as_str),
                            r.get("rate").and_then(Value::as_f64),
                        ) {
                            series
                                .entry(name.to_string())
                                .or_default()
                                .push((alpha, rate));
                        }
                    }
                }
            }
            if !series.is_empty() {
                let mut all: Vec<Series> = series
                    .into_iter()
                    .map(|(name, mut pts)| {
                        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                        Series {
                            name,
                            points: pts,
                            band: None,
                        }
                    })
                    .collect();
                let alphas: Vec<(f64, f64)> = all[0].points.iter().map(|&(a, _)| (a, a)).collect();
                all.push(Series {
                    name: "alpha".into(),
                    points: alphas,
                    band: None,
                });
                plots.push((
                    "coverage.svg",
                    svg::line_chart("Exceedance rate vs alpha", "alpha", "rate", &all, false),
                ));
            }
        }
        doc.insert(
            "documents".into(),
            json!(inputs.iter().map(|i| i.summary.clone()).collect::<Vec<_>>()),
        );
    }
    if let Some(dir) = &plot_dir {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (name, body) in &plots {
            let path = dir.join(name);
            std::fs::write(&path, body)?;
            written.push(path.display().to_string());
        }
        doc.insert("plots".into(), json!(written));
    }
    emit(&doc, out, stdout)?;
    Ok(EXIT_OK)
}

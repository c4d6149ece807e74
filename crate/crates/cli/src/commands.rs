use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};

use simba_core::baselines::bml::{bml_fit_with, BmlOptions};
use simba_core::baselines::glm::glm_fit;
use simba_core::diagnostics::{
    cross_site_pmse, gelman_rubin, ppc_draw, select_num_basis, CrossSiteConfig, PpcResult, PpcSource,
};
use simba_core::gibbs::{pooled_draws, run_gibbs};
use simba_core::io::dataset::load_domain;
use simba_core::io::draws::{read_draws, read_traces, read_vstate, write_draws, write_traces, write_vstate};
use simba_core::io::render::{effect_grid_csv, render_effect_map, render_ppc};
use simba_core::io::{
    atomic_write, load_dataset, read_map_file, read_text, save_dataset, write_map_file, write_text, MapFile,
    Provenance, StudyConfig,
};
use simba_core::kernel::{build_basis_system, default_l_eta, BasisSystem, InducingStrategy, KernelConfig};
use simba_core::model::{transform_dataset, Dataset};
use simba_core::simstudy::{
    evaluate_replicate, make_truth, phantom_domain, run_study, simulate_dataset, Method, NoiseModel,
};
use simba_core::summaries::{summarize_gibbs, summarize_vi, EffectMap};
use simba_core::vi::run_vi;
use simba_core::{Result, SimbaError, SpatialDomain};

use crate::{Common, DataArgs};

const FIT_INFO: &str = "fit.txt";
const MAPS: &str = "maps.map";
const DRAWS: &str = "draws.csv";
const TRACES: &str = "traces.csv";
const VSTATE: &str = "vstate.txt";

struct Ctx {
    cfg: StudyConfig,
    out: PathBuf,
    prov: Provenance,
}

fn context(common: &Common) -> Result<Ctx> {
    let mut cfg = match &common.config {
        Some(p) => StudyConfig::load(p)?,
        None => StudyConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| SimbaError::config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.display().to_string();
    }
    cfg.validate()?;
    let prov = Provenance { config_hash: cfg.hash(), seed: cfg.seed };
    info!("config hash {} seed {}", prov.config_hash, prov.seed);
    Ok(Ctx { out: PathBuf::from(&cfg.out_dir), cfg, prov })
}

fn map_file(domain: &SpatialDomain, names: &[String], maps: Vec<EffectMap>, prov: &Provenance) -> MapFile {
    MapFile {
        provenance: Some(prov.clone()),
        voxel_ids: domain.voxel_ids.clone(),
        coords: domain.coords.clone(),
        covariate_names: names.to_vec(),
        maps,
    }
}

/// Truth stored as a degenerate map: zero-width intervals, sign as evidence.
fn truth_maps(truth: &[DVector<f64>], threshold: f64) -> Vec<EffectMap> {
    truth
        .iter()
        .enumerate()
        .map(|(j, b)| {
            let e_s = b.map(|x| if x == 0.0 { 0.0 } else { x.signum() });
            EffectMap {
                covariate: j,
                mean: b.clone(),
                lower: b.clone(),
                upper: b.clone(),
                p_plus: e_s.map(|e| 0.5 * (1.0 + e)),
                active: b.iter().map(|&x| x != 0.0).collect(),
                e_s,
                threshold,
            }
        })
        .collect()
}

fn load(data: &DataArgs) -> Result<Dataset> {
    let d = load_dataset(&data.responses, &data.covariates, &data.layout)?;
    info!("loaded N={} V={} covariates={}", d.n(), d.n_voxels(), d.n_covariates());
    Ok(d)
}

fn site_files(dir: &Path) -> Result<DataArgs> {
    let layout = ["mask.txt", "coords.csv", "mask.nii"]
        .iter()
        .map(|f| dir.join(f))
        .find(|p| p.exists())
        .ok_or_else(|| SimbaError::data(format!("{}: no mask.txt, coords.csv or mask.nii", dir.display())))?;
    Ok(DataArgs { responses: dir.join("responses.csv"), covariates: dir.join("covariates.csv"), layout })
}

pub fn simulate(common: &Common, replicates: usize) -> Result<()> {
    let ctx = context(common)?;
    if replicates == 0 {
        return Err(SimbaError::config("--replicates must be at least 1"));
    }
    let domain = phantom_domain()?;
    let settings = ctx.cfg.study_settings();
    let truth = make_truth(&domain, &settings.truth)?;
    let noise_basis = match ctx.cfg.sim_noise {
        NoiseModel::Iid => None,
        NoiseModel::Spatial => {
            let l = ctx
                .cfg
                .l
                .ok_or_else(|| SimbaError::config("sim.noise = spatial needs a fixed basis.l"))?;
            Some(build_basis_system(&domain, &settings.kernel, l, default_l_eta(l), settings.strategy, settings.basis_seed)?)
        }
    };
    for mut sc in ctx.cfg.scenarios() {
        sc.n_replicates = replicates;
        for r in 0..replicates {
            let sim = simulate_dataset(&domain, &truth, &sc, r, noise_basis.as_ref())?;
            let dir = ctx.out.join(format!("n{}_sigma{}", sc.n, sc.sigma_eps)).join(format!("rep{r}"));
            save_dataset(&dir, &sim.data, &ctx.prov)?;
            let tm = map_file(&domain, &sim.data.covariate_names, truth_maps(&sim.truth, ctx.cfg.threshold), &ctx.prov);
            write_map_file(&dir.join("truth.map"), &tm)?;
            info!("{} replicate {r} written to {}", sc.label(), dir.display());
        }
    }
    Ok(())
}

pub fn select_basis(common: &Common, data: &DataArgs) -> Result<()> {
    let ctx = context(common)?;
    let d = load(data)?;
    let sel = select_num_basis(&d, &d.domain, &ctx.cfg.select())?;
    let mut s = String::from("l,pmse\n");
    for (l, e) in &sel.curve {
        let _ = writeln!(s, "{l},{e}");
    }
    write_text(&ctx.out.join("basis_selection.csv"), &ctx.prov, &s)?;
    let (a, b) = sel.candidate_range;
    println!("chosen L = {} (candidates {a}..={b})", sel.chosen);
    Ok(())
}

fn choose_l(ctx: &Ctx, d: &Dataset, l: Option<usize>) -> Result<usize> {
    match l.or(ctx.cfg.l) {
        Some(l) => Ok(l),
        None => {
            info!("selecting the basis size");
            let sel = select_num_basis(d, &d.domain, &ctx.cfg.select())?;
            info!("chosen L = {}", sel.chosen);
            Ok(sel.chosen)
        }
    }
}

fn fit_info_text(info: &BTreeMap<&str, String>) -> String {
    info.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

fn read_fit_info(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join(FIT_INFO);
    let text = read_text(&path)?;
    Ok(text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

fn info_value<T: std::str::FromStr>(info: &BTreeMap<String, String>, key: &str) -> Result<T> {
    info.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| SimbaError::data(format!("{FIT_INFO}: missing or invalid '{key}'")))
}

pub fn fit(common: &Common, data: &DataArgs, method: Option<Method>, l: Option<usize>) -> Result<()> {
    let ctx = context(common)?;
    let cfg = &ctx.cfg;
    let method = method.unwrap_or(cfg.method);
    let d = load(data)?;
    let prior = cfg.prior();
    let mut info = BTreeMap::new();
    info.insert("method", method.to_string());
    info.insert("n", d.n().to_string());
    info.insert("v", d.n_voxels().to_string());
    let start = Instant::now();
    let maps = if method.is_simba() {
        let l = choose_l(&ctx, &d, l)?;
        let l_eta = cfg.l_eta.unwrap_or_else(|| default_l_eta(l));
        let kernel = cfg.kernel();
        let basis = build_basis_system(&d.domain, &kernel, l, l_eta, cfg.strategy, cfg.seed)?;
        info.insert("l", l.to_string());
        info.insert("l_eta", l_eta.to_string());
        info.insert("kernel.nu", kernel.nu.to_string());
        info.insert("kernel.length_scale", kernel.length_scale.to_string());
        info.insert("kernel.nugget", kernel.nugget.to_string());
        info.insert("basis.strategy", cfg.strategy.to_string());
        info.insert("basis.seed", cfg.seed.to_string());
        let t = transform_dataset(&d, &basis)?;
        if method == Method::SimbaGibbs {
            let g = cfg.gibbs();
            info!("running {} chains of {} iterations (L={l}, L_eta={l_eta})", g.n_chains, g.n_iter);
            let chains = run_gibbs(&t, &prior, &basis, &g)?;
            for c in &chains {
                for (k, secs) in c.timing.iter().enumerate() {
                    info!("chain {}: iterations {}..{} took {secs:.3}s", c.chain_id, 1000 * k, 1000 * (k + 1));
                }
            }
            let per_iter = chains.iter().map(|c| c.seconds_per_iter).sum::<f64>() / chains.len() as f64;
            info.insert("burnin", g.n_burnin.to_string());
            info.insert("seconds_per_iteration", format!("{per_iter:.6}"));
            let draws: Vec<_> = chains.iter().map(|c| c.draws.clone()).collect();
            write_draws(&ctx.out.join(DRAWS), &ctx.prov, &draws)?;
            let traces: Vec<Vec<f64>> = chains.iter().map(|c| c.cond_loglik_trace.clone()).collect();
            write_traces(&ctx.out.join(TRACES), &ctx.prov, &traces)?;
            summarize_gibbs(&pooled_draws(&chains), &basis, cfg.level, cfg.threshold)?
        } else {
            let r = run_vi(&t, &prior, &basis, &cfg.vi())?;
            info!("CAVI stopped after {} sweeps (converged: {})", r.iterations, r.converged);
            info.insert("vi_iterations", r.iterations.to_string());
            info.insert("vi_converged", r.converged.to_string());
            write_vstate(&ctx.out.join(VSTATE), &ctx.prov, &r.state)?;
            summarize_vi(&r.state, &basis, cfg.level, cfg.threshold)?
        }
    } else if method == Method::Glm {
        glm_fit(&d)?.effect_maps(cfg.threshold)
    } else {
        let b = cfg.bml();
        let opts = BmlOptions { fixed_tau2: None, threshold: Some(cfg.threshold) };
        let r = bml_fit_with(&d, &b, &prior, &opts)?;
        info.insert("burnin", b.n_burnin.to_string());
        write_traces(&ctx.out.join(TRACES), &ctx.prov, &[r.sigma2_trace.clone()])?;
        r.maps
    };
    info.insert("seconds", format!("{:.3}", start.elapsed().as_secs_f64()));
    write_text(&ctx.out.join(FIT_INFO), &ctx.prov, &fit_info_text(&info))?;
    write_map_file(&ctx.out.join(MAPS), &map_file(&d.domain, &d.covariate_names, maps, &ctx.prov))?;
    info!("{method} fit written to {}", ctx.out.display());
    Ok(())
}

fn rebuild_basis(info: &BTreeMap<String, String>, domain: &SpatialDomain) -> Result<BasisSystem> {
    let kernel = KernelConfig {
        nugget: info_value(info, "kernel.nugget")?,
        ..KernelConfig::matern(info_value(info, "kernel.nu")?, info_value(info, "kernel.length_scale")?)
    };
    let strategy: InducingStrategy = info_value(info, "basis.strategy")?;
    build_basis_system(domain, &kernel, info_value(info, "l")?, info_value(info, "l_eta")?, strategy, info_value(info, "basis.seed")?)
}

pub fn summarize(common: &Common, fit_dir: &Path, layout: &Path) -> Result<()> {
    let ctx = context(common)?;
    let info = read_fit_info(fit_dir)?;
    let method: Method = info_value(&info, "method")?;
    let previous = read_map_file(&fit_dir.join(MAPS))?;
    let domain = load_domain(layout)?;
    let maps = match method {
        Method::SimbaGibbs => {
            let basis = rebuild_basis(&info, &domain)?;
            let chains = read_draws(&fit_dir.join(DRAWS))?;
            let draws: Vec<_> = chains.iter().flatten().collect();
            summarize_gibbs(&draws, &basis, ctx.cfg.level, ctx.cfg.threshold)?
        }
        Method::SimbaVi => {
            let basis = rebuild_basis(&info, &domain)?;
            summarize_vi(&read_vstate(&fit_dir.join(VSTATE))?, &basis, ctx.cfg.level, ctx.cfg.threshold)?
        }
        Method::Glm | Method::Bml => {
            warn!("{method} maps are re-thresholded only; the interval level is fixed at fit time");
            previous.maps.iter().cloned().map(|m| m.with_threshold(ctx.cfg.threshold)).collect()
        }
    };
    write_map_file(&ctx.out.join(MAPS), &map_file(&domain, &previous.covariate_names, maps, &ctx.prov))?;
    Ok(())
}

fn ppc_csv(ppc: &PpcResult) -> String {
    let mut s = String::from("center,observed,replicate_min,replicate_max\n");
    for (b, c) in ppc.centers().iter().enumerate() {
        let (lo, hi) = ppc
            .replicated
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[b]), hi.max(r[b])));
        let _ = writeln!(s, "{c},{},{lo},{hi}", ppc.observed[b]);
    }
    s
}

pub fn diagnose(common: &Common, fit_dir: &Path, data: Option<&DataArgs>, replicates: usize) -> Result<()> {
    let ctx = context(common)?;
    let info = read_fit_info(fit_dir)?;
    let method: Method = info_value(&info, "method")?;
    let mut table = String::from("quantity,r_hat,degenerate\n");
    if method == Method::SimbaGibbs {
        let burnin: usize = info_value(&info, "burnin")?;
        let traces = read_traces(&fit_dir.join(TRACES))?;
        let post: Vec<Vec<f64>> = traces.iter().map(|t| t[burnin.min(t.len())..].to_vec()).collect();
        let chains = read_draws(&fit_dir.join(DRAWS))?;
        let mut rows: Vec<(String, Vec<Vec<f64>>)> = vec![("cond_loglik".into(), post)];
        let p = chains.first().and_then(|c| c.first()).map_or(0, |d| d.alpha.len());
        for j in 0..p {
            rows.push((format!("alpha{j}"), chains.iter().map(|c| c.iter().map(|d| d.alpha[j]).collect()).collect()));
        }
        rows.push(("sigma2_eps".into(), chains.iter().map(|c| c.iter().map(|d| d.sigma2_eps).collect()).collect()));
        for (name, tr) in rows {
            match gelman_rubin(&tr) {
                Ok(r) => {
                    let _ = writeln!(table, "{name},{:.5},{}", r.r_hat, r.degenerate);
                    println!("R-hat {name}: {:.4}{}", r.r_hat, if r.degenerate { " (degenerate)" } else { "" });
                }
                Err(e) => warn!("R-hat for {name} skipped: {e}"),
            }
        }
    } else {
        warn!("R-hat is only reported for simba-gibbs fits");
    }
    write_text(&ctx.out.join("rhat.csv"), &ctx.prov, &table)?;

    let Some(data) = data else { return Ok(()) };
    if !method.is_simba() {
        warn!("predictive checks need a SIMBA fit");
        return Ok(());
    }
    let d = load(data)?;
    let basis = rebuild_basis(&info, &d.domain)?;
    let ppc = if method == Method::SimbaGibbs {
        let chains = read_draws(&fit_dir.join(DRAWS))?;
        let draws: Vec<_> = chains.iter().flatten().collect();
        ppc_draw(PpcSource::Draws(&draws), &basis, &d, replicates, ctx.cfg.seed)?
    } else {
        let q = read_vstate(&fit_dir.join(VSTATE))?;
        ppc_draw(PpcSource::Variational(&q), &basis, &d, replicates, ctx.cfg.seed)?
    };
    write_text(&ctx.out.join("ppc.csv"), &ctx.prov, &ppc_csv(&ppc))?;
    atomic_write(&ctx.out.join("ppc.ppm"), &render_ppc(&ppc, 256).to_ppm(&ctx.prov))?;
    println!("PPC envelope coverage: {:.1}%", 100.0 * ppc.envelope_coverage());
    Ok(())
}

fn metrics_csv(m: &simba_core::simstudy::Metrics) -> String {
    format!("mse,tpr,fdr,coverage\n{:.6},{:.6},{:.6},{:.6}\n", m.mse, m.tpr, m.fdr, m.coverage)
}

fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut s = String::new();
    for r in m.row_iter() {
        let v: Vec<String> = r.iter().map(|x| format!("{x:.6}")).collect();
        s.push_str(&v.join(","));
        s.push('\n');
    }
    s
}

pub fn evaluate(
    common: &Common,
    truth: Option<&Path>,
    maps: Option<&Path>,
    study: bool,
    methods: &[Method],
    sites: &[PathBuf],
) -> Result<()> {
    let ctx = context(common)?;
    let cfg = &ctx.cfg;
    if let (Some(t), Some(m)) = (truth, maps) {
        let t = read_map_file(t)?;
        let m = read_map_file(m)?;
        let truth: Vec<DVector<f64>> = t.maps.into_iter().map(|x| x.mean).collect();
        let metrics = evaluate_replicate(&truth, &m.maps, cfg.threshold)?;
        write_text(&ctx.out.join("metrics.csv"), &ctx.prov, &metrics_csv(&metrics))?;
        println!(
            "MSE(x100) {:.4}  TPR {:.2}%  FDR {:.2}%  coverage {:.2}%",
            metrics.mse, metrics.tpr, metrics.fdr, metrics.coverage
        );
        return Ok(());
    }
    if study {
        let methods = if methods.is_empty() { Method::ALL.to_vec() } else { methods.to_vec() };
        let domain = phantom_domain()?;
        let out = run_study(&domain, &cfg.scenarios(), &methods, &cfg.study_settings())?;
        write_text(&ctx.out.join("metrics.csv"), &ctx.prov, &out.table.to_csv()?)?;
        write_text(&ctx.out.join("metrics.txt"), &ctx.prov, &out.table.to_text())?;
        write_text(&ctx.out.join("records.csv"), &ctx.prov, &out.records_csv()?)?;
        let mut sel = String::from("scenario,l,pmse\n");
        for (sc, curve) in cfg.scenarios().iter().zip(&out.selection_curves) {
            for (l, e) in curve {
                let _ = writeln!(sel, "{},{l},{e}", sc.label());
            }
        }
        write_text(&ctx.out.join("selection.csv"), &ctx.prov, &sel)?;
        print!("{}", out.table.to_text());
        return Ok(());
    }
    if !sites.is_empty() {
        let data: Vec<Dataset> = sites.iter().map(|s| site_files(s).and_then(|f| load(&f))).collect::<Result<_>>()?;
        let l = choose_l(&ctx, &data[0], None)?;
        let cs = CrossSiteConfig {
            kernel: cfg.kernel(),
            l,
            strategy: cfg.strategy,
            seed: cfg.seed,
            prior: cfg.prior(),
            vi: cfg.vi(),
        };
        let r = cross_site_pmse(&data, &cs)?;
        let mut s = format!("# rows train on a site, columns test on a site; L={l}\n# simba\n");
        s.push_str(&matrix_csv(&r.simba));
        s.push_str("# glm\n");
        s.push_str(&matrix_csv(&r.glm));
        write_text(&ctx.out.join("cross_site.csv"), &ctx.prov, &s)?;
        for (k, (a, b)) in r.simba_out_of_site().iter().zip(r.glm_out_of_site()).enumerate() {
            println!("site {k}: out-of-site PMSE simba {a:.5} glm {b:.5}");
        }
        return Ok(());
    }
    Err(SimbaError::config("evaluate needs --truth with --maps, --study, or --sites"))
}

pub fn render(common: &Common, maps: &Path, layout: &Path, covariate: Option<&str>, slice: usize) -> Result<()> {
    let ctx = context(common)?;
    let mf = read_map_file(maps)?;
    let domain = load_domain(layout)?;
    let chosen: Vec<usize> = match covariate {
        None => (0..mf.maps.len()).collect(),
        Some(c) => {
            let j = c
                .parse::<usize>()
                .ok()
                .filter(|&j| j < mf.maps.len())
                .or_else(|| mf.covariate_names.iter().position(|n| n == c))
                .ok_or_else(|| SimbaError::config(format!("unknown covariate '{c}'")))?;
            vec![j]
        }
    };
    for j in chosen {
        let name = &mf.covariate_names[j];
        let img = render_effect_map(&mf.maps[j], &domain, slice)?;
        atomic_write(&ctx.out.join(format!("map_{name}.ppm")), &img.to_ppm(&ctx.prov))?;
        write_text(&ctx.out.join(format!("map_{name}.csv")), &ctx.prov, &effect_grid_csv(&mf.maps[j], &domain, slice)?)?;
        info!("rendered {name}");
    }
    Ok(())
}

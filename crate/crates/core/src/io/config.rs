//! Plain-text `key = value` configuration.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::diagnostics::{LoocvConfig, LoocvInference, SelectConfig};
use crate::error::{Result, SimbaError};
use crate::gibbs::GibbsConfig;
use crate::kernel::{InducingStrategy, KernelConfig};
use crate::model::PriorConfig;
use crate::simstudy::{Method, NoiseModel, SimScenario, StudySettings};
use crate::summaries::DEFAULT_THRESHOLD;
use crate::vi::VIConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub nu: f64,
    pub length_scale: f64,
    pub nugget: f64,
    /// Basis size; `None` selects it by leave-one-out error.
    pub l: Option<usize>,
    pub l_eta: Option<usize>,
    pub l_max: usize,
    pub strategy: InducingStrategy,
    pub method: Method,
    pub iterations: usize,
    pub burnin: usize,
    pub thin: usize,
    pub chains: usize,
    pub vi_max_iter: usize,
    pub vi_tol: f64,
    pub loocv_inference: LoocvInference,
    pub bml_iterations: usize,
    pub bml_burnin: usize,
    pub prior_a: f64,
    pub threshold: f64,
    pub level: f64,
    pub seed: u64,
    /// Keep voxel-space responses and participant effects for predictive checks.
    pub memory: bool,
    pub out_dir: String,
    pub sim_n: Vec<usize>,
    pub sim_sigma: Vec<f64>,
    pub sim_replicates: usize,
    pub sim_noise: NoiseModel,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            nu: 0.5,
            length_scale: 0.3,
            nugget: 1e-6,
            l: None,
            l_eta: None,
            l_max: 300,
            strategy: InducingStrategy::FarthestPoint,
            method: Method::SimbaGibbs,
            iterations: 5000,
            burnin: 4000,
            thin: 1,
            chains: 3,
            vi_max_iter: 3000,
            vi_tol: 1e-6,
            loocv_inference: LoocvInference::Vi,
            bml_iterations: 2000,
            bml_burnin: 1000,
            prior_a: 100.0,
            threshold: DEFAULT_THRESHOLD,
            level: 0.95,
            seed: 0,
            memory: true,
            out_dir: "out".into(),
            sim_n: vec![200, 50],
            sim_sigma: vec![2.0, 5.0],
            sim_replicates: 20,
            sim_noise: NoiseModel::Iid,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| SimbaError::config(format!("invalid value '{v}' for key '{key}'")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_auto(key: &str, v: &str) -> Result<Option<usize>> {
    if v == "auto" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(SimbaError::config(format!("invalid value '{v}' for key '{key}'"))),
    }
}

impl StudyConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut c = StudyConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SimbaError::config(format!("line {}: expected key = value", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SimbaError::io(path, e))?;
        Self::parse_str(&text).map_err(|e| match e {
            SimbaError::Config(m) => SimbaError::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "kernel.family" => {
                if v != "matern" {
                    return Err(SimbaError::config(format!("invalid value '{v}' for key '{key}'")));
                }
            }
            "kernel.nu" => self.nu = parse(key, v)?,
            "kernel.length_scale" => self.length_scale = parse(key, v)?,
            "kernel.nugget" => self.nugget = parse(key, v)?,
            "basis.l" => self.l = parse_auto(key, v)?,
            "basis.l_eta" => self.l_eta = parse_auto(key, v)?,
            "basis.l_max" => self.l_max = parse(key, v)?,
            "basis.strategy" => self.strategy = parse(key, v)?,
            "inference.backend" => self.method = parse(key, v)?,
            "inference.iterations" => self.iterations = parse(key, v)?,
            "inference.burnin" => self.burnin = parse(key, v)?,
            "inference.thin" => self.thin = parse(key, v)?,
            "inference.chains" => self.chains = parse(key, v)?,
            "inference.max_iter" => self.vi_max_iter = parse(key, v)?,
            "inference.tol" => self.vi_tol = parse(key, v)?,
            "inference.loocv" => self.loocv_inference = parse(key, v)?,
            "bml.iterations" => self.bml_iterations = parse(key, v)?,
            "bml.burnin" => self.bml_burnin = parse(key, v)?,
            "prior.a" => self.prior_a = parse(key, v)?,
            "threshold" => self.threshold = parse(key, v)?,
            "level" => self.level = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "memory" => self.memory = parse_bool(key, v)?,
            "output.dir" => self.out_dir = v.to_string(),
            "sim.n" => self.sim_n = parse_list(key, v)?,
            "sim.sigma" => self.sim_sigma = parse_list(key, v)?,
            "sim.replicates" => self.sim_replicates = parse(key, v)?,
            "sim.noise" => {
                self.sim_noise = match v {
                    "iid" => NoiseModel::Iid,
                    "spatial" => NoiseModel::Spatial,
                    _ => return Err(SimbaError::config(format!("invalid value '{v}' for key '{key}'"))),
                }
            }
            _ => return Err(SimbaError::config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(SimbaError::config(format!("key '{key}': {why}")));
        self.kernel().validate().map_err(|e| SimbaError::config(format!("key 'kernel.*': {e}")))?;
        if let (Some(l), Some(le)) = (self.l, self.l_eta) {
            if le == 0 || le > l {
                return bad("basis.l_eta", "must lie in [1, basis.l]");
            }
        }
        if self.l == Some(0) {
            return bad("basis.l", "must be positive");
        }
        if self.l_max == 0 {
            return bad("basis.l_max", "must be positive");
        }
        if self.burnin >= self.iterations {
            return bad("inference.burnin", "must be smaller than inference.iterations");
        }
        if self.thin == 0 {
            return bad("inference.thin", "must be at least 1");
        }
        if self.chains == 0 {
            return bad("inference.chains", "must be at least 1");
        }
        if self.vi_max_iter == 0 {
            return bad("inference.max_iter", "must be at least 1");
        }
        if !(self.vi_tol > 0.0) {
            return bad("inference.tol", "must be positive");
        }
        if self.bml_burnin >= self.bml_iterations {
            return bad("bml.burnin", "must be smaller than bml.iterations");
        }
        if !(self.prior_a > 0.0 && self.prior_a.is_finite()) {
            return bad("prior.a", "must be positive");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold", "must lie in (0, 1)");
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad("level", "must lie in (0, 1)");
        }
        if self.sim_n.iter().any(|&n| n < 3) || self.sim_n.is_empty() {
            return bad("sim.n", "needs at least 3 participants per scenario");
        }
        if self.sim_sigma.iter().any(|s| !(*s >= 0.0 && s.is_finite())) || self.sim_sigma.is_empty() {
            return bad("sim.sigma", "must be non-negative");
        }
        if self.sim_replicates == 0 {
            return bad("sim.replicates", "must be at least 1");
        }
        Ok(())
    }

    /// Canonical `key = value` listing of every setting.
    pub fn canonical(&self) -> String {
        let mut m = BTreeMap::new();
        let join = |v: Vec<String>| v.join(",");
        let auto = |l: Option<usize>| l.map_or("auto".to_string(), |x| x.to_string());
        m.insert("basis.l", auto(self.l));
        m.insert("basis.l_eta", auto(self.l_eta));
        m.insert("basis.l_max", self.l_max.to_string());
        m.insert("basis.strategy", self.strategy.to_string());
        m.insert("bml.burnin", self.bml_burnin.to_string());
        m.insert("bml.iterations", self.bml_iterations.to_string());
        m.insert("inference.backend", self.method.to_string());
        m.insert("inference.burnin", self.burnin.to_string());
        m.insert("inference.chains", self.chains.to_string());
        m.insert("inference.iterations", self.iterations.to_string());
        m.insert(
            "inference.loocv",
            match self.loocv_inference {
                LoocvInference::Vi => "vi",
                LoocvInference::GibbsShort => "gibbs_short",
            }
            .into(),
        );
        m.insert("inference.max_iter", self.vi_max_iter.to_string());
        m.insert("inference.thin", self.thin.to_string());
        m.insert("inference.tol", format!("{:e}", self.vi_tol));
        m.insert("kernel.family", "matern".into());
        m.insert("kernel.length_scale", format!("{:e}", self.length_scale));
        m.insert("kernel.nu", format!("{:e}", self.nu));
        m.insert("kernel.nugget", format!("{:e}", self.nugget));
        m.insert("level", format!("{:e}", self.level));
        m.insert("memory", self.memory.to_string());
        m.insert("output.dir", self.out_dir.clone());
        m.insert("prior.a", format!("{:e}", self.prior_a));
        m.insert("seed", self.seed.to_string());
        m.insert("sim.n", join(self.sim_n.iter().map(|x| x.to_string()).collect()));
        m.insert(
            "sim.noise",
            match self.sim_noise {
                NoiseModel::Iid => "iid",
                NoiseModel::Spatial => "spatial",
            }
            .into(),
        );
        m.insert("sim.replicates", self.sim_replicates.to_string());
        m.insert("sim.sigma", join(self.sim_sigma.iter().map(|x| format!("{x:e}")).collect()));
        m.insert("threshold", format!("{:e}", self.threshold));
        m.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of the canonical listing. The
    /// output directory is excluded so moving results keeps the hash.
    pub fn hash(&self) -> String {
        let c = StudyConfig { out_dir: String::new(), ..self.clone() };
        let digest = Sha256::digest(c.canonical().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn kernel(&self) -> KernelConfig {
        KernelConfig { nugget: self.nugget, ..KernelConfig::matern(self.nu, self.length_scale) }
    }

    pub fn prior(&self) -> PriorConfig {
        PriorConfig { a: self.prior_a }
    }

    pub fn gibbs(&self) -> GibbsConfig {
        GibbsConfig {
            n_iter: self.iterations,
            n_burnin: self.burnin,
            thin: self.thin,
            n_chains: self.chains,
            seed: self.seed,
            store_eta: self.memory,
            ..Default::default()
        }
    }

    pub fn vi(&self) -> VIConfig {
        VIConfig { max_iter: self.vi_max_iter, tol: self.vi_tol, seed: self.seed, ..Default::default() }
    }

    pub fn bml(&self) -> GibbsConfig {
        GibbsConfig {
            n_iter: self.bml_iterations,
            n_burnin: self.bml_burnin,
            n_chains: 1,
            seed: self.seed,
            ..Default::default()
        }
    }

    pub fn loocv(&self) -> LoocvConfig {
        LoocvConfig { inference: self.loocv_inference, seed: self.seed, ..Default::default() }
    }

    pub fn select(&self) -> SelectConfig {
        SelectConfig {
            kernel: self.kernel(),
            l_max: self.l_max,
            strategy: self.strategy,
            seed: self.seed,
            prior: self.prior(),
            loocv: self.loocv(),
            ..Default::default()
        }
    }

    pub fn scenarios(&self) -> Vec<SimScenario> {
        let mut out = Vec::new();
        for &n in &self.sim_n {
            for &s in &self.sim_sigma {
                let k = out.len() as u64;
                let mut sc = SimScenario::new(n, s, self.sim_replicates, crate::rng::derive_seed(self.seed, k));
                sc.noise = self.sim_noise;
                out.push(sc);
            }
        }
        out
    }

    pub fn study_settings(&self) -> StudySettings {
        StudySettings {
            kernel: self.kernel(),
            strategy: self.strategy,
            basis_seed: self.seed,
            fixed_l: self.l,
            l_max: self.l_max,
            loocv: self.loocv(),
            prior: self.prior(),
            gibbs: GibbsConfig { store_eta: false, parallel: false, ..self.gibbs() },
            vi: self.vi(),
            bml: GibbsConfig { parallel: false, ..self.bml() },
            level: self.level,
            threshold: self.threshold,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_validates() {
        let c = StudyConfig::parse_str(
            "# study\nkernel.nu = 1.5\nbasis.l = 120  # fixed\nbasis.l_eta = auto\ninference.backend = simba-vi\nsim.n = 50, 200\nmemory = no\n",
        )
        .unwrap();
        assert_eq!(c.nu, 1.5);
        assert_eq!(c.l, Some(120));
        assert_eq!(c.l_eta, None);
        assert_eq!(c.method, Method::SimbaVi);
        assert_eq!(c.sim_n, vec![50, 200]);
        assert!(!c.memory);
        assert_eq!(c.scenarios().len(), 4);
    }

    #[test]
    fn errors_name_the_key() {
        let e = StudyConfig::parse_str("kernel.nu = 0.7").unwrap_err().to_string();
        assert!(e.contains("kernel"), "{e}");
        let e = StudyConfig::parse_str("bogus = 1").unwrap_err().to_string();
        assert!(e.contains("'bogus'"));
        let e = StudyConfig::parse_str("seed = x").unwrap_err().to_string();
        assert!(e.contains("'seed'"));
        let e = StudyConfig::parse_str("inference.burnin = 9000").unwrap_err().to_string();
        assert!(e.contains("inference.burnin"));
        assert!(StudyConfig::parse_str("no equals sign").is_err());
        assert!(matches!(StudyConfig::parse_str("threshold = 2"), Err(SimbaError::Config(_))));
    }

    #[test]
    fn hash_tracks_settings_not_formatting() {
        let a = StudyConfig::parse_str("seed = 3\nkernel.nu = 0.5").unwrap();
        let b = StudyConfig::parse_str("kernel.nu=0.50\n\n  seed=3 ").unwrap();
        let c = StudyConfig::parse_str("seed = 4").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
        let d = StudyConfig::parse_str("seed = 3\noutput.dir = elsewhere").unwrap();
        assert_eq!(a.hash(), d.hash());
        // canonical listing parses back to the same settings
        assert_eq!(StudyConfig::parse_str(&a.canonical()).unwrap(), a);
    }
}

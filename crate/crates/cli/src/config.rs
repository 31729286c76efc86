use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use brachiation::distill::DistillConfig;
use brachiation::pd::PdGains;
use brachiation::sim::{Disturbance, RolloutConfig};
use brachiation::statemachine::ControllerKind;
use brachiation::trajopt::{Behavior, BehaviorSpec, WorldGeometry};
use brachiation::tvlqr::TvlqrConfig;
use brachiation::ModelParams;
use serde::Deserialize;

use crate::Failure;

/// Environment variable that overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "BRACHIATE_OUT_DIR";

/// Settings shared by all commands, read from a TOML file. Command-line
/// flags override the matching fields.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Model parameters file; the built-in robot when absent.
    pub model: Option<PathBuf>,
    pub world: WorldGeometry,
    /// Behavior spec files keyed by behavior name, replacing the defaults.
    pub specs: BTreeMap<String, PathBuf>,
    /// Directory of solved nominals (`bf.csv`, ...). Without it, nominals
    /// are solved on demand.
    pub nominal_dir: Option<PathBuf>,
    /// Policy file for the RL controller; the bundled BF policy when absent.
    pub policy: Option<PathBuf>,
    pub knots: Option<usize>,
    pub time_weight: Option<f64>,
    pub controllers: Vec<ControllerKind>,
    pub repetitions: usize,
    /// Spread of single-swing start states; per-behavior default when absent.
    pub start_sigma: Option<[f64; 4]>,
    pub pd: PdGains,
    pub tvlqr: TvlqrConfig,
    pub rollout: RolloutConfig,
    pub disturbances: Vec<Disturbance>,
    pub distill: DistillConfig,
    pub sequential: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            model: None,
            world: WorldGeometry::default(),
            specs: BTreeMap::new(),
            nominal_dir: None,
            policy: None,
            knots: None,
            time_weight: None,
            controllers: ControllerKind::ALL.to_vec(),
            repetitions: 5,
            start_sigma: None,
            pd: PdGains::default(),
            tvlqr: TvlqrConfig::default(),
            rollout: RolloutConfig::default(),
            disturbances: Vec::new(),
            distill: DistillConfig::default(),
            sequential: false,
        }
    }
}

fn must_exist(what: &str, path: &Path) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", path.display())))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        must_exist("config file", path)?;
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Checks every referenced path and parameter block.
    pub fn validate(&self) -> Result<(), Failure> {
        if let Some(p) = &self.model {
            must_exist("model file", p)?;
        }
        if let Some(p) = &self.nominal_dir {
            must_exist("nominal directory", p)?;
        }
        if let Some(p) = &self.policy {
            must_exist("policy file", p)?;
        }
        for (name, p) in &self.specs {
            name.parse::<Behavior>()?;
            must_exist("behavior spec", p)?;
        }
        self.pd.validate()?;
        self.tvlqr.validate()?;
        self.rollout.validate()?;
        self.distill.validate()?;
        for d in &self.disturbances {
            d.validate()?;
        }
        Ok(())
    }

    /// Flag, then environment, then config file, then `out`.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
            .or_else(|| self.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn params(&self) -> Result<ModelParams, Failure> {
        match &self.model {
            Some(p) => Ok(ModelParams::load(p)?),
            None => Ok(ModelParams::default()),
        }
    }

    pub fn spec(&self, b: Behavior) -> Result<BehaviorSpec, Failure> {
        let mut spec = match self.specs.iter().find(|(k, _)| k.parse::<Behavior>().ok() == Some(b)) {
            Some((_, p)) => BehaviorSpec::load(p)?,
            None => {
                let mut s = b.spec();
                s.world = self.world;
                s
            }
        };
        if let Some(n) = self.knots {
            spec.config.n = n;
        }
        if let Some(w) = self.time_weight {
            spec.config.w = w;
        }
        spec.validate()?;
        Ok(spec)
    }
}

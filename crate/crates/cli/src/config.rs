//! Experiment configuration files (TOML). Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use deepgraph::dnet::{DilationSchedule, NetConfig};
use deepgraph::eval::Scenario;
use deepgraph::graph_sim::{calibrate_alpha, GeneratorConfig, GraphFamily};
use deepgraph::seed::{derive_rng, derive_seed};
use deepgraph::train::{FineTuneConfig, TrainConfig};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub generator: GeneratorSection,
    #[serde(default)]
    pub net: NetSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub finetune: FineTuneConfig,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub predict: PredictSection,
    #[serde(default)]
    pub benchmark: BenchmarkSection,
    #[serde(default)]
    pub curve: CurveSection,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

/// Generator settings; anything left out falls back to the uniform-sparse defaults.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub family: Option<String>,
    pub p: Option<usize>,
    pub n: Option<usize>,
    pub alpha: Option<f64>,
    /// Fraction of absent edges to aim for. Uniform-sparse calibrates
    /// `alpha`; the edge-probability families set `edge_prob = 1 - target`.
    pub target_sparsity: Option<f64>,
    pub c: Option<f64>,
    pub neighbors: Option<usize>,
    pub rewire: Option<f64>,
    pub edge_prob: Option<f64>,
    pub margin: Option<f64>,
    pub draws_per_theta: Option<usize>,
}

pub const DEFAULT_P: usize = 39;
pub const DEFAULT_N: usize = 35;
pub const DEFAULT_TARGET_SPARSITY: f64 = 0.95;

macro_rules! overlay_fields {
    ($dst:ident, $src:ident; $($f:ident),*) => { $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )* };
}

impl GeneratorSection {
    /// `self` with every unset field taken from `base`.
    pub fn over(&self, base: &GeneratorSection) -> GeneratorSection {
        let mut out = base.clone();
        let src = self;
        overlay_fields!(out, src; family, p, n, alpha, target_sparsity, c, neighbors, rewire, edge_prob, margin, draws_per_theta);
        out
    }

    pub fn family(&self) -> Result<GraphFamily> {
        match &self.family {
            None => Ok(GraphFamily::UniformSparse),
            Some(s) => s.parse().map_err(|_| {
                anyhow!("generator.family: unknown family {s:?} (expected uniform-sparse, small-world, er-substitute or laplace)")
            }),
        }
    }

    pub fn build(&self, seed: u64) -> Result<GeneratorConfig> {
        let family = self.family()?;
        let p = self.p.unwrap_or(DEFAULT_P);
        let n = self.n.unwrap_or(DEFAULT_N);
        let mut cfg = GeneratorConfig::uniform_sparse(p, n, 0.5, seed).with_family(family);
        let target = self.target_sparsity;
        if let Some(t) = target {
            if !(t > 0.0 && t < 1.0) {
                bail!("generator.target_sparsity = {t} (need 0 < target < 1)");
            }
        }
        cfg.alpha = match (self.alpha, family) {
            (Some(a), _) => a,
            (None, GraphFamily::UniformSparse) => {
                let t = target.unwrap_or(DEFAULT_TARGET_SPARSITY);
                calibrate_alpha(p, t, &mut derive_rng(seed, "gen/calibrate", 0))
                    .with_context(|| format!("calibrating alpha for sparsity {t} at p = {p}"))?
            }
            (None, _) => cfg.alpha,
        };
        if let Some(t) = target {
            if matches!(family, GraphFamily::ErSubstitute | GraphFamily::Laplace) && self.edge_prob.is_none() {
                cfg.edge_prob = 1.0 - t;
            }
        }
        if let Some(v) = self.c {
            cfg.c = v;
        }
        if let Some(v) = self.neighbors {
            cfg.neighbors = v;
        }
        if let Some(v) = self.rewire {
            cfg.rewire = v;
        }
        if let Some(v) = self.edge_prob {
            cfg.edge_prob = v;
        }
        if let Some(v) = self.margin {
            cfg.margin = v;
        }
        if let Some(v) = self.draws_per_theta {
            cfg.draws_per_theta = v;
        }
        cfg.validate().context("generator section")?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    /// `deepgraph-39`, `deepgraph-50` or `deepgraph-500`; other keys override it.
    pub preset: Option<String>,
    pub depth: Option<usize>,
    pub feature_maps: Option<usize>,
    pub dilation_schedule: Option<DilationSchedule>,
}

impl NetSection {
    /// Network for `p`-node inputs. Without a preset the 39-node layout is used.
    pub fn build(&self, p: usize) -> Result<NetConfig> {
        let base = match self.preset.as_deref() {
            None | Some("deepgraph-39") => NetConfig::deepgraph_39(),
            Some("deepgraph-50") => NetConfig::deepgraph_50(),
            Some("deepgraph-500") => NetConfig::deepgraph_500(),
            Some(other) => bail!("net.preset: unknown preset {other:?}"),
        };
        Ok(NetConfig {
            p,
            depth: self.depth.unwrap_or(base.depth),
            feature_maps: self.feature_maps.unwrap_or(base.feature_maps),
            dilation_schedule: self.dilation_schedule.unwrap_or(base.dilation_schedule),
        })
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub count: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { count: 1000 }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    pub permutations: usize,
    /// `mean` or `median`.
    pub aggregator: String,
}

impl Default for PredictSection {
    fn default() -> Self {
        Self { permutations: 1, aggregator: "mean".into() }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSection {
    pub methods: Vec<String>,
    pub model: Option<PathBuf>,
    pub permutations: usize,
    pub folds: usize,
    pub lambda_grid: usize,
    #[serde(rename = "scenario")]
    pub scenarios: Vec<ScenarioSection>,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        Self {
            methods: vec!["random".into(), "glasso-cv".into(), "pcorr".into()],
            model: None,
            permutations: 20,
            folds: 5,
            lambda_grid: 20,
            scenarios: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub name: String,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_fractions")]
    pub prec_fractions: Vec<f64>,
    #[serde(default = "default_bins")]
    pub ce_bins: usize,
    /// Overrides on top of the top-level `[generator]` section.
    #[serde(default)]
    pub generator: GeneratorSection,
}

fn default_trials() -> usize {
    100
}

fn default_fractions() -> Vec<f64> {
    vec![0.05]
}

fn default_bins() -> usize {
    10
}

impl ScenarioSection {
    pub fn build(&self, base: &GeneratorSection, root_seed: u64, index: usize) -> Result<Scenario> {
        let gen = self
            .generator
            .over(base)
            .build(derive_seed(root_seed, "gen", index as u64))
            .with_context(|| format!("scenario {:?}", self.name))?;
        let mut s = Scenario::new(self.name.clone(), gen, self.trials, derive_seed(root_seed, "eval", index as u64));
        s.prec_fractions = self.prec_fractions.clone();
        s.ce_bins = self.ce_bins;
        s.validate().with_context(|| format!("scenario {:?}", self.name))?;
        Ok(s)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveSection {
    pub methods: Vec<String>,
    pub model: Option<PathBuf>,
    pub k_list: Vec<usize>,
    pub splits: usize,
    pub selection_size: usize,
    /// Rows drawn from the generator when no data file is given.
    pub samples: usize,
}

impl Default for CurveSection {
    fn default() -> Self {
        Self {
            methods: vec!["pcorr".into(), "glasso-cv".into(), "random".into()],
            model: None,
            k_list: vec![0, 10, 25, 50, 100, 200],
            splits: 10,
            selection_size: 40,
            samples: 140,
        }
    }
}

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::active::{ActiveLearningConfig, BnnLearner, Estimator, LinearLearner, ProposalKind};
use crate::bnn::{Head, TrainConfig, DEFAULT_SIGMA_OBS};
use crate::continual::{ContinualConfig, Method, Protocol, StreamKind};
use crate::error::{Error, Result};
use crate::numcore::Activation;
use crate::posteriors::PosteriorKind;

/// Variable naming the directory searched for IDX files.
pub const DATA_DIR_ENV: &str = "EVALBENCH_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Continual,
    ActiveLearn,
    ActiveTest,
    BiasProbe,
    OfbProbe,
    GeometryProbe,
    SoapbubbleProbe,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::Continual,
        ExperimentKind::ActiveLearn,
        ExperimentKind::ActiveTest,
        ExperimentKind::BiasProbe,
        ExperimentKind::OfbProbe,
        ExperimentKind::GeometryProbe,
        ExperimentKind::SoapbubbleProbe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Continual => "continual",
            ExperimentKind::ActiveLearn => "active-learn",
            ExperimentKind::ActiveTest => "active-test",
            ExperimentKind::BiasProbe => "bias-probe",
            ExperimentKind::OfbProbe => "ofb-probe",
            ExperimentKind::GeometryProbe => "geometry-probe",
            ExperimentKind::SoapbubbleProbe => "soapbubble-probe",
        }
    }

    fn default_source(self) -> Option<DataSource> {
        match self {
            ExperimentKind::Continual => Some(DataSource::Blobs),
            ExperimentKind::ActiveLearn
            | ExperimentKind::ActiveTest
            | ExperimentKind::BiasProbe
            | ExperimentKind::OfbProbe => Some(DataSource::ToyRegression),
            ExperimentKind::GeometryProbe | ExperimentKind::SoapbubbleProbe => None,
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Blobs,
    TwoMoons,
    ToyRegression,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    /// Defaults by experiment kind when absent.
    pub source: Option<DataSource>,
    /// Rows; split evenly over classes for blobs, a cap for IDX.
    pub train_size: usize,
    pub test_size: usize,
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    /// Two-moons coordinate noise.
    pub noise: f64,
    pub train_clusters: [usize; 3],
    pub test_clusters: [usize; 3],
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    pub normalize: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: None,
            train_size: 1000,
            test_size: 500,
            classes: 10,
            dim: 16,
            separation: 5.0,
            noise: 0.1,
            train_clusters: [5, 48, 48],
            test_clusters: [10, 40, 40],
            train_images: "train-images-idx3-ubyte".into(),
            train_labels: "train-labels-idx1-ubyte".into(),
            test_images: "t10k-images-idx3-ubyte".into(),
            test_labels: "t10k-labels-idx1-ubyte".into(),
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnerKind {
    Linear,
    Bnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosteriorName {
    Gaussian,
    Radial,
    TruncatedGaussian,
    McDropout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationName {
    Identity,
    Relu,
    LeakyRelu,
}

/// Network and training settings. Unset fields keep the defaults of the
/// component being configured.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    /// Defaults to linear on regression data and a BNN otherwise.
    pub learner: Option<LearnerKind>,
    pub ridge: Option<f64>,
    pub hidden: Option<Vec<usize>>,
    pub posterior: Option<PosteriorName>,
    /// Noise cutoff for the truncated posterior.
    pub truncation: Option<f64>,
    pub dropout: Option<f64>,
    pub activation: Option<ActivationName>,
    pub leaky_alpha: Option<f64>,
    pub rho_init: Option<f64>,
    pub prior_sigma: Option<f64>,
    pub sigma_obs: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub samples_train: Option<usize>,
    pub samples_test: Option<usize>,
    pub kl_scale: Option<f64>,
    pub mean_pretrain_epochs: Option<usize>,
    /// Early-stopping patience; off unless set.
    pub patience: Option<usize>,
    /// Draws for scores, test losses and evaluation.
    pub eval_samples: Option<usize>,
}

impl ModelSpec {
    pub fn posterior_kind(&self, default: PosteriorKind) -> PosteriorKind {
        match self.posterior {
            None => default,
            Some(PosteriorName::Gaussian) => PosteriorKind::Gaussian,
            Some(PosteriorName::Radial) => PosteriorKind::Radial,
            Some(PosteriorName::TruncatedGaussian) => PosteriorKind::TruncatedGaussian {
                c: self.truncation.unwrap_or(2.0),
            },
            Some(PosteriorName::McDropout) => PosteriorKind::McDropout {
                p: self.dropout.unwrap_or(0.5),
            },
        }
    }

    pub fn activation_fn(&self, default: Activation) -> Activation {
        match self.activation {
            None => default,
            Some(ActivationName::Identity) => Activation::Identity,
            Some(ActivationName::Relu) => Activation::Relu,
            Some(ActivationName::LeakyRelu) => Activation::LeakyRelu(
                self.leaky_alpha
                    .unwrap_or(crate::numcore::DEFAULT_LEAKY_ALPHA),
            ),
        }
    }

    pub fn apply_train(&self, t: &mut TrainConfig) {
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.samples_train, self.samples_train);
        set(&mut t.samples_test, self.samples_test);
        set(&mut t.mean_pretrain_epochs, self.mean_pretrain_epochs);
        if let Some(v) = self.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = self.kl_scale {
            t.kl_scale = v;
        }
        if self.patience.is_some() {
            t.patience = self.patience;
        }
    }

    pub fn continual_config(&self, spec: &ContinualSpec) -> ContinualConfig {
        let mut c = ContinualConfig::default();
        if let Some(h) = &self.hidden {
            c.hidden = h.clone();
        }
        c.posterior = self.posterior_kind(c.posterior);
        c.activation = self.activation_fn(c.activation);
        c.rho_init = self.rho_init.unwrap_or(c.rho_init);
        c.prior_sigma = self.prior_sigma.unwrap_or(c.prior_sigma);
        c.eval_samples = self.eval_samples.unwrap_or(c.eval_samples);
        self.apply_train(&mut c.train);
        c.coreset_size = spec.coreset_size;
        c.finetune_epochs = spec.finetune_epochs;
        c
    }

    /// `d_out` output units under `head`, on `d_in` features.
    pub fn bnn_learner(&self, d_in: usize, d_out: usize, head: Head) -> BnnLearner {
        let mut l = BnnLearner::default();
        let hidden = self
            .hidden
            .clone()
            .unwrap_or_else(|| l.widths[1..l.widths.len() - 1].to_vec());
        l.widths = std::iter::once(d_in)
            .chain(hidden)
            .chain(std::iter::once(d_out))
            .collect();
        l.head = match head {
            Head::Gaussian { .. } => Head::Gaussian {
                sigma_obs: self.sigma_obs.unwrap_or(DEFAULT_SIGMA_OBS),
            },
            h => h,
        };
        l.posterior = self.posterior_kind(l.posterior);
        l.activation = self.activation_fn(l.activation);
        l.rho_init = self.rho_init.unwrap_or(l.rho_init);
        l.prior_sigma = self.prior_sigma.unwrap_or(l.prior_sigma);
        l.score_samples = self.eval_samples.unwrap_or(l.score_samples);
        self.apply_train(&mut l.train);
        l
    }

    pub fn linear_learner(&self) -> LinearLearner {
        LinearLearner {
            ridge: self.ridge.unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    Vcl,
    VclCoreset,
    CoresetOnly,
    Ewc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinualSpec {
    pub stream: StreamKind,
    pub tasks: usize,
    pub methods: Vec<MethodName>,
    pub protocols: Vec<Protocol>,
    pub ewc_lambda: f64,
    pub coreset_size: usize,
    pub finetune_epochs: usize,
}

impl Default for ContinualSpec {
    fn default() -> Self {
        Self {
            stream: StreamKind::Split,
            tasks: 5,
            methods: vec![
                MethodName::Vcl,
                MethodName::VclCoreset,
                MethodName::CoresetOnly,
            ],
            protocols: vec![Protocol::SingleHead],
            ewc_lambda: 100.0,
            coreset_size: 40,
            finetune_epochs: 20,
        }
    }
}

impl ContinualSpec {
    pub fn method(&self, m: MethodName) -> Method {
        match m {
            MethodName::Vcl => Method::Vcl,
            MethodName::VclCoreset => Method::VclCoreset,
            MethodName::CoresetOnly => Method::CoresetOnly,
            MethodName::Ewc => Method::Ewc {
                lambda: self.ewc_lambda,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalName {
    Uniform,
    Boltzmann,
    EpsilonGreedy,
    DistanceBoltzmann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActiveSpec {
    pub proposal: ProposalName,
    pub temperature: f64,
    pub epsilon: f64,
    pub beta: f64,
    pub estimators: Vec<Estimator>,
    pub scoring_estimator: Option<Estimator>,
    pub start_points: Option<usize>,
    pub m_max: Option<usize>,
    pub retrain_every: Option<usize>,
    /// Trajectories per seed for the bias probe; trials for active testing.
    pub trajectories: usize,
    /// Active-testing checkpoints; ten even steps up to the pool size if empty.
    pub checkpoints: Vec<usize>,
}

impl Default for ActiveSpec {
    fn default() -> Self {
        Self {
            proposal: ProposalName::DistanceBoltzmann,
            temperature: crate::active::DEFAULT_TEMPERATURE,
            epsilon: crate::active::DEFAULT_EPSILON,
            beta: crate::active::DEFAULT_BETA,
            estimators: Estimator::WEIGHTED.to_vec(),
            scoring_estimator: None,
            start_points: None,
            m_max: None,
            retrain_every: None,
            trajectories: 100,
            checkpoints: Vec::new(),
        }
    }
}

impl ActiveSpec {
    pub fn proposal_kind(&self) -> ProposalKind {
        match self.proposal {
            ProposalName::Uniform => ProposalKind::Uniform,
            ProposalName::Boltzmann => ProposalKind::Boltzmann {
                temperature: self.temperature,
            },
            ProposalName::EpsilonGreedy => ProposalKind::EpsilonGreedy {
                epsilon: self.epsilon,
            },
            ProposalName::DistanceBoltzmann => ProposalKind::DistanceBoltzmann { beta: self.beta },
        }
    }

    pub fn learning_config(&self) -> ActiveLearningConfig {
        let mut c = ActiveLearningConfig {
            proposal: self.proposal_kind(),
            estimators: self.estimators.clone(),
            ..ActiveLearningConfig::default()
        };
        c.scoring_estimator = self.scoring_estimator.unwrap_or(c.scoring_estimator);
        c.start_points = self.start_points.unwrap_or(c.start_points);
        c.m_max = self.m_max.unwrap_or(c.m_max);
        c.retrain_every = self.retrain_every.unwrap_or(c.retrain_every);
        c
    }

    pub fn proposal_name(&self) -> &'static str {
        match self.proposal {
            ProposalName::Uniform => "uniform",
            ProposalName::Boltzmann => "boltzmann",
            ProposalName::EpsilonGreedy => "epsilon-greedy",
            ProposalName::DistanceBoltzmann => "distance-boltzmann",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometrySpec {
    /// Layer widths `K0..KL` of each random stack.
    pub stacks: Vec<Vec<usize>>,
    pub std_min: f64,
    pub std_max: f64,
    pub samples: usize,
}

impl Default for GeometrySpec {
    fn default() -> Self {
        Self {
            stacks: vec![vec![2, 3, 2], vec![2, 3, 3, 2], vec![2, 2, 3, 2, 2]],
            std_min: 0.2,
            std_max: 1.0,
            samples: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoapbubbleSpec {
    pub dims: Vec<usize>,
    pub samples: usize,
    pub sigma: f64,
}

impl Default for SoapbubbleSpec {
    fn default() -> Self {
        Self {
            dims: vec![2, 16, 256, 4096],
            samples: 2000,
            sigma: 1.0,
        }
    }
}

/// A parsed experiment description.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub kind: Option<ExperimentKind>,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub continual: ContinualSpec,
    pub active: ActiveSpec,
    pub geometry: GeometrySpec,
    pub soapbubble: SoapbubbleSpec,
}

/// A key the config schema does not know, with its 1-based line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownKey {
    pub key: String,
    pub line: Option<usize>,
}

impl fmt::Display for UnknownKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "unknown key {:?} at line {l}", self.key),
            None => write!(f, "unknown key {:?}", self.key),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedConfig {
    pub config: RunConfig,
    pub text: String,
    pub unknown: Vec<UnknownKey>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn segments(path: &serde_ignored::Path, out: &mut Vec<String>) {
    use serde_ignored::Path as P;
    match path {
        P::Root => {}
        P::Seq { parent, index } => {
            segments(parent, out);
            out.push(index.to_string());
        }
        P::Map { parent, key } => {
            segments(parent, out);
            out.push(key.clone());
        }
        P::Some { parent } | P::NewtypeStruct { parent } | P::NewtypeVariant { parent } => {
            segments(parent, out)
        }
    }
}

/// Span start of the key (or array element) at `path`.
fn locate(text: &str, path: &[String]) -> Option<usize> {
    use toml::de::{DeTable, DeValue};
    let root = DeTable::parse(text).ok()?;
    let mut table = root.get_ref();
    let mut at = None;
    let mut iter = path.iter().peekable();
    while let Some(seg) = iter.next() {
        let (k, v) = table.get_key_value(seg.as_str())?;
        at = Some(k.span().start);
        let mut value = v.get_ref();
        loop {
            match value {
                DeValue::Table(t) => {
                    table = t;
                    break;
                }
                DeValue::Array(a) => {
                    let i: usize = iter.peek()?.parse().ok()?;
                    iter.next();
                    let item = a.get(i)?;
                    at = Some(item.span().start);
                    value = item.get_ref();
                }
                _ => return at,
            }
        }
    }
    at
}

/// Parses config text. Unknown keys are collected rather than rejected.
pub fn parse_config_str(text: &str, origin: &Path) -> Result<ParsedConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| toml_error(text, origin, &e))?;
    let mut unknown = Vec::new();
    let config: RunConfig = serde_ignored::deserialize(de, |p| {
        let mut segs = Vec::new();
        segments(&p, &mut segs);
        let line = locate(text, &segs).map(|o| line_of(text, o));
        unknown.push(UnknownKey {
            key: segs.join("."),
            line,
        });
    })
    .map_err(|e| toml_error(text, origin, &e))?;
    Ok(ParsedConfig {
        config,
        text: text.to_string(),
        unknown,
    })
}

fn toml_error(text: &str, origin: &Path, e: &toml::de::Error) -> Error {
    let message = match e.span() {
        Some(s) => format!("line {}: {}", line_of(text, s.start), e.message().trim()),
        None => e.message().trim().to_string(),
    };
    Error::Parse {
        path: origin.to_path_buf(),
        message,
    }
}

/// Reads and parses a config file. With `strict`, any unknown key is an
/// error; otherwise the caller decides what to do with them.
pub fn parse_config(path: &Path, strict: bool) -> Result<ParsedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let parsed = parse_config_str(&text, path)?;
    if strict {
        if let Some(u) = parsed.unknown.first() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: u.to_string(),
            });
        }
    }
    Ok(parsed)
}

/// Parses `a..b`, `a..=b`, or a comma list.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || {
        Error::Config(format!(
            "cannot parse seeds {s:?}; use a..b, a..=b or a,b,c"
        ))
    };
    let num = |t: &str| t.trim().parse::<u64>().map_err(|_| bad());
    if let Some((a, b)) = s.split_once("..=") {
        let (a, b) = (num(a)?, num(b)?);
        return Ok(if a > b { Vec::new() } else { (a..=b).collect() });
    }
    if let Some((a, b)) = s.split_once("..") {
        return Ok((num(a)?..num(b)?).collect());
    }
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(num).collect()
}

pub fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::Config("the seed list is empty".into()));
    }
    let mut seen = HashSet::new();
    for s in seeds {
        if !seen.insert(s) {
            return Err(Error::Config(format!("seed {s} is listed twice")));
        }
    }
    Ok(())
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Where an IDX file named in the config lives: absolute paths as given,
/// otherwise under the data directory variable, else next to the config.
pub fn resolve_data_path(name: &str, config_dir: &Path) -> PathBuf {
    let p = Path::new(name);
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) if !dir.is_empty() => Path::new(&dir).join(p),
        _ => config_dir.join(p),
    }
}

/// A config with kind-dependent defaults filled in and everything checked.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub source: Option<DataSource>,
    pub learner: Option<LearnerKind>,
    /// IDX files in the order train images, train labels, test images, test labels.
    pub idx_files: Vec<PathBuf>,
    pub config: RunConfig,
}

impl RunConfig {
    /// Fills defaults and validates. `seeds` and `out` from the command line
    /// take precedence over the file.
    pub fn resolve(
        mut self,
        kind: ExperimentKind,
        seeds: Option<Vec<u64>>,
        out: Option<PathBuf>,
        config_dir: &Path,
    ) -> Result<ResolvedConfig> {
        if let Some(k) = self.kind {
            if k != kind {
                return Err(cfg_err(format!(
                    "config is for {k} but {kind} was requested"
                )));
            }
        }
        self.kind = Some(kind);
        if let Some(s) = seeds {
            self.seeds = s;
        }
        check_seeds(&self.seeds)?;
        let out = out
            .or_else(|| self.out.clone())
            .ok_or_else(|| cfg_err("no output directory; pass --out or set `out`"))?;

        let source = self.dataset.source.or(kind.default_source());
        let ds = &self.dataset;
        let mut idx_files = Vec::new();
        match source {
            Some(DataSource::Blobs) => {
                if ds.classes < 2
                    || ds.dim == 0
                    || ds.train_size < ds.classes
                    || ds.test_size < ds.classes
                {
                    return Err(cfg_err(
                        "blobs need at least 2 classes, 1 dimension and a row per class",
                    ));
                }
            }
            Some(DataSource::TwoMoons) => {
                if ds.train_size < 2 || ds.test_size < 2 {
                    return Err(cfg_err("two-moons needs at least 2 rows per split"));
                }
            }
            Some(DataSource::ToyRegression) => {
                if ds.train_clusters.iter().sum::<usize>() == 0
                    || ds.test_clusters.iter().sum::<usize>() == 0
                {
                    return Err(cfg_err("toy-regression clusters are all empty"));
                }
            }
            Some(DataSource::Idx) => {
                for name in [
                    &ds.train_images,
                    &ds.train_labels,
                    &ds.test_images,
                    &ds.test_labels,
                ] {
                    let p = resolve_data_path(name, config_dir);
                    if !p.is_file() {
                        return Err(cfg_err(format!(
                            "IDX file {} not found (set {DATA_DIR_ENV})",
                            p.display()
                        )));
                    }
                    idx_files.push(p);
                }
            }
            None => {}
        }
        let regression = source == Some(DataSource::ToyRegression);
        let learner = match kind {
            ExperimentKind::ActiveLearn
            | ExperimentKind::ActiveTest
            | ExperimentKind::BiasProbe
            | ExperimentKind::OfbProbe => {
                let l = self.model.learner.unwrap_or(if regression {
                    LearnerKind::Linear
                } else {
                    LearnerKind::Bnn
                });
                if l == LearnerKind::Linear && !regression {
                    return Err(cfg_err("the linear learner needs regression data"));
                }
                Some(l)
            }
            _ => None,
        };

        let m = &self.model;
        if m.hidden.as_ref().is_some_and(|h| h.contains(&0)) {
            return Err(cfg_err("model.hidden widths must be positive"));
        }
        let positive = |v: Option<f64>| v.is_none_or(|x| x > 0.0);
        if !positive(m.prior_sigma) || !positive(m.sigma_obs) || m.eval_samples == Some(0) {
            return Err(cfg_err(
                "model.prior_sigma, sigma_obs and eval_samples must be positive",
            ));
        }
        m.posterior_kind(PosteriorKind::Gaussian)
            .validate()
            .map_err(|e| cfg_err(e.to_string()))?;
        let mut train = TrainConfig::default();
        m.apply_train(&mut train);
        train
            .validate()
            .map_err(|e| cfg_err(format!("model: {e}")))?;

        match kind {
            ExperimentKind::Continual => {
                let c = &self.continual;
                if !matches!(source, Some(DataSource::Blobs | DataSource::Idx)) {
                    return Err(cfg_err(
                        "continual streams need multi-class data (blobs or idx)",
                    ));
                }
                if c.tasks == 0 || c.methods.is_empty() || c.protocols.is_empty() {
                    return Err(cfg_err("continual needs tasks, methods and protocols"));
                }
                if c.stream == StreamKind::Split
                    && source == Some(DataSource::Blobs)
                    && 2 * c.tasks > ds.classes
                {
                    return Err(cfg_err(format!(
                        "{} split tasks need {} classes",
                        c.tasks,
                        2 * c.tasks
                    )));
                }
            }
            ExperimentKind::ActiveLearn
            | ExperimentKind::ActiveTest
            | ExperimentKind::BiasProbe
            | ExperimentKind::OfbProbe => {
                let a = &self.active;
                a.proposal_kind()
                    .validate()
                    .map_err(|e| cfg_err(e.to_string()))?;
                if learner == Some(LearnerKind::Linear) && a.proposal_kind().needs_scores() {
                    return Err(cfg_err(format!(
                        "proposal {} needs model scores, which the linear learner lacks",
                        a.proposal_name()
                    )));
                }
                if a.estimators.is_empty() {
                    return Err(cfg_err("active.estimators is empty"));
                }
                if a.estimators.contains(&Estimator::Full)
                    || a.scoring_estimator == Some(Estimator::Full)
                {
                    return Err(cfg_err("the full estimator cannot be a training objective"));
                }
                if matches!(kind, ExperimentKind::ActiveTest | ExperimentKind::BiasProbe)
                    && a.trajectories == 0
                {
                    return Err(cfg_err("active.trajectories must be positive"));
                }
                if a.checkpoints.contains(&0) {
                    return Err(cfg_err("active.checkpoints start at 1"));
                }
            }
            ExperimentKind::GeometryProbe => {
                let g = &self.geometry;
                if g.stacks.is_empty() || g.stacks.iter().any(|s| s.len() < 3 || s.contains(&0)) {
                    return Err(cfg_err(
                        "geometry.stacks need at least two layers of positive width",
                    ));
                }
                if !(g.std_min > 0.0 && g.std_max >= g.std_min) || g.samples < 2 {
                    return Err(cfg_err(
                        "geometry needs 0 < std_min <= std_max and at least 2 samples",
                    ));
                }
            }
            ExperimentKind::SoapbubbleProbe => {
                let s = &self.soapbubble;
                if s.dims.is_empty() || s.dims.contains(&0) || s.samples < 4 || !(s.sigma > 0.0) {
                    return Err(cfg_err(
                        "soapbubble needs positive dims, sigma and at least 4 samples",
                    ));
                }
            }
        }
        Ok(ResolvedConfig {
            kind,
            seeds: self.seeds.clone(),
            out,
            source,
            learner,
            idx_files,
            config: self,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ParsedConfig> {
        parse_config_str(text, Path::new("test.toml"))
    }

    #[test]
    fn minimal_continual_config_parses() {
        let p = parse("kind = \"continual\"\nseeds = [0, 1]\n[continual]\ntasks = 5\n").unwrap();
        assert!(p.unknown.is_empty());
        let r = p
            .config
            .resolve(
                ExperimentKind::Continual,
                None,
                Some("out".into()),
                Path::new("."),
            )
            .unwrap();
        assert_eq!(r.seeds, vec![0, 1]);
        assert_eq!(r.source, Some(DataSource::Blobs));
        let cc = r.config.model.continual_config(&r.config.continual);
        assert_eq!(cc, ContinualConfig::default());
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let p = parse("seeds = [0]\n\n[model]\nhidden = [4]\nfooo = 3\n").unwrap();
        assert_eq!(
            p.unknown,
            vec![UnknownKey {
                key: "model.fooo".into(),
                line: Some(5)
            }]
        );
        let top = parse("fooo = 1\n").unwrap();
        assert_eq!(top.unknown[0].line, Some(1));
        assert!(top.unknown[0].to_string().contains("fooo"));
    }

    #[test]
    fn strict_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seeds = [0]\nfooo = true\n").unwrap();
        let err = parse_config(&path, true).unwrap_err().to_string();
        assert!(err.contains("fooo") && err.contains("line 2"), "{err}");
        assert_eq!(parse_config(&path, false).unwrap().unknown.len(), 1);
    }

    #[test]
    fn type_errors_carry_a_line() {
        let err = parse("seeds = [0]\n[active]\nm_max = \"many\"\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn duplicate_and_empty_seeds_rejected() {
        let c = parse("seeds = [1, 2, 1]\n").unwrap().config;
        let e = c
            .resolve(
                ExperimentKind::Continual,
                None,
                Some("o".into()),
                Path::new("."),
            )
            .unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let c = parse("").unwrap().config;
        assert!(c
            .resolve(
                ExperimentKind::Continual,
                None,
                Some("o".into()),
                Path::new(".")
            )
            .is_err());
    }

    #[test]
    fn seed_syntax() {
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("2..=3").unwrap(), vec![2, 3]);
        assert_eq!(parse_seeds("4,1").unwrap(), vec![4, 1]);
        assert!(parse_seeds("0..0").unwrap().is_empty());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn kind_mismatch_and_linear_scores_rejected() {
        let c = parse("kind = \"active-test\"\nseeds = [0]\n")
            .unwrap()
            .config;
        assert!(c
            .resolve(
                ExperimentKind::Continual,
                None,
                Some("o".into()),
                Path::new(".")
            )
            .is_err());
        let c = parse("seeds = [0]\n[active]\nproposal = \"boltzmann\"\n")
            .unwrap()
            .config;
        assert!(c
            .resolve(
                ExperimentKind::ActiveLearn,
                None,
                Some("o".into()),
                Path::new(".")
            )
            .is_err());
    }

    #[test]
    fn missing_idx_file_is_a_config_error() {
        let c =
            parse("seeds = [0]\n[dataset]\nsource = \"idx\"\ntrain_images = \"/nonexistent/x\"\n")
                .unwrap()
                .config;
        let e = c
            .resolve(
                ExperimentKind::Continual,
                None,
                Some("o".into()),
                Path::new("."),
            )
            .unwrap_err();
        assert!(e.to_string().contains("/nonexistent/x"));
    }
}

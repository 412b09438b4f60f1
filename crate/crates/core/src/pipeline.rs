//! Config-driven commands that read and write artifacts in one output
//! directory, plus the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::captions::build_universe;
use crate::corpus::{load_catalog, split, Catalog, CatalogFormat};
use crate::encode::{BuiltinProvider, EmbeddingProvider, EncodeConfig, Encoder, FileProvider, RemoteProvider};
use crate::error::{Error, Result};
use crate::evalx::{
    ablation_cases, ablation_to_csv, decile_features, kendall_tau_total, run_ablation, score_triples,
    select_triples, tau_summary_to_csv, triples_to_csv, AblationCase, Polarity,
};
use crate::forest::{evaluate_accuracy, train, ForestModel, ForestParams};
use crate::influence::{influence_scores, InfluenceRanking, DEFAULT_LAMBDA};
use crate::labeler::{fit_thresholds, imbalance, label_with_report, validate_class_count, QuantileThresholds, SalesClass};
use crate::simdedup::{canonicalize, cluster_synonyms, DedupConfig, FeatureSet, ProductFeatures, SynonymGroup};
use crate::synth::{generate, render_images, SynthSpec};
use crate::util::{derive_seed, sha256_hex, sci6, write_atomic};

pub const EMBED_URL_ENV: &str = "TRENDLENS_EMBED_URL";
pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out: PathBuf,
    /// Catalog read by `ingest`; defaults to the one `synth` writes.
    pub catalog: Option<PathBuf>,
    /// Root for relative image references; defaults to the catalog's directory.
    pub images: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            out: PathBuf::from("out"),
            catalog: None,
            images: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// `planted_signal` or `feature_driven`; ignored when `spec` is set.
    pub preset: String,
    pub n_products: usize,
    /// JSON spec file.
    pub spec: Option<PathBuf>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            preset: "planted_signal".into(),
            n_products: 1000,
            spec: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Cases per polarity.
    pub cases: usize,
    /// Share of the ranking taken from each end.
    pub fraction: f64,
    pub min_frequency: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            cases: 100,
            fraction: 0.1,
            min_frequency: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub timeout_secs: u64,
    pub retries: u32,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            timeout_secs: 30,
            retries: 3,
        }
    }
}

/// Everything a command needs. Component seeds (`dedup.seed`,
/// `forest.seed`, ...) are overwritten with values derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub classes: u8,
    pub lambda: f64,
    pub train_fraction: f64,
    /// Categorical attribute that defines product type for triples.
    pub type_attr: String,
    pub triples: usize,
    /// `builtin`, `file:<path>` or `remote:<url>`.
    pub provider: String,
    pub paths: Paths,
    pub dedup: DedupConfig,
    pub encode: EncodeConfig,
    pub forest: ForestParams,
    pub synth: SynthConfig,
    pub ablation: AblationConfig,
    pub remote: RemoteConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            classes: 3,
            lambda: DEFAULT_LAMBDA,
            train_fraction: 0.8,
            type_attr: "product_type".into(),
            triples: crate::evalx::DEFAULT_TRIPLES,
            provider: "builtin".into(),
            paths: Paths::default(),
            dedup: DedupConfig::default(),
            encode: EncodeConfig::default(),
            forest: ForestParams::default(),
            synth: SynthConfig::default(),
            ablation: AblationConfig::default(),
            remote: RemoteConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    /// Copy with component seeds derived from the global seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.dedup.seed = derive_seed(self.seed, "minhash");
        c.forest.seed = derive_seed(self.seed, "forest");
        c.encode.autoencoder.seed = derive_seed(self.seed, "autoencoder");
        c
    }

    pub fn validate(&self) -> Result<()> {
        validate_class_count(self.classes)?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid("train_fraction must lie strictly between 0 and 1"));
        }
        if self.triples == 0 {
            return Err(Error::invalid("triples must be positive"));
        }
        self.dedup.validate()?;
        self.forest.validate()?;
        ProviderChoice::parse(&self.provider)?;
        Ok(())
    }

    /// SHA-256 of the resolved config. The output directory is left out so
    /// identical runs into different directories hash alike.
    pub fn hash(&self) -> String {
        let mut c = self.resolved();
        c.paths.out = PathBuf::new();
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    fn raw_dir(&self) -> PathBuf {
        self.paths.out.join("raw")
    }

    fn source_catalog(&self) -> PathBuf {
        self.paths
            .catalog
            .clone()
            .unwrap_or_else(|| self.raw_dir().join("catalog.jsonl"))
    }

    fn image_root(&self) -> PathBuf {
        self.paths.images.clone().unwrap_or_else(|| {
            self.source_catalog()
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum ProviderChoice {
    Builtin,
    File(PathBuf),
    Remote(Option<String>),
}

impl ProviderChoice {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "builtin" => Ok(ProviderChoice::Builtin),
            "remote" => Ok(ProviderChoice::Remote(None)),
            _ => {
                if let Some(p) = s.strip_prefix("file:") {
                    Ok(ProviderChoice::File(PathBuf::from(p)))
                } else if let Some(u) = s.strip_prefix("remote:") {
                    Ok(ProviderChoice::Remote(Some(u.to_string())))
                } else {
                    Err(Error::invalid(format!(
                        "provider {s:?} must be builtin, file:<path> or remote:<url>"
                    )))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Synth,
    Ingest,
    Clean,
    Cluster,
    Score,
    Label,
    Train,
    EvalTriples,
    Ablate,
    Report,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Ingest => "ingest",
            Command::Clean => "clean",
            Command::Cluster => "cluster",
            Command::Score => "score",
            Command::Label => "label",
            Command::Train => "train",
            Command::EvalTriples => "eval-triples",
            Command::Ablate => "ablate",
            Command::Report => "report",
        }
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// Artifact path relative to the output directory, with its SHA-256.
    pub outputs: BTreeMap<String, String>,
}

pub fn read_manifest(out: &Path) -> Result<Vec<ManifestEntry>> {
    let path = out.join(MANIFEST);
    let text = read_artifact(&path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Process exit status for an error: 2 missing artifact, 3 invalid input,
/// 1 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::MissingArtifact(_) => 2,
        Error::Parse { .. }
        | Error::DuplicateId { .. }
        | Error::MissingField { .. }
        | Error::NegativeSales { .. }
        | Error::Invalid(_)
        | Error::Empty(_)
        | Error::Dimension(_)
        | Error::Format(_)
        | Error::Json(_)
        | Error::Csv(_) => 3,
        _ => 1,
    }
}

/// Short machine-readable name of the innermost error.
pub fn error_kind(err: &Error) -> &'static str {
    match err.root() {
        Error::Parse { .. } => "parse",
        Error::DuplicateId { .. } => "duplicate_id",
        Error::MissingField { .. } => "missing_field",
        Error::NegativeSales { .. } => "negative_sales",
        Error::Invalid(_) => "invalid",
        Error::Empty(_) => "empty",
        Error::Dimension(_) => "dimension",
        Error::MissingArtifact(_) => "missing_artifact",
        Error::Image { .. } => "image",
        Error::Adapter(_) => "adapter",
        Error::Remote { .. } => "remote",
        Error::Format(_) => "format",
        Error::Context { .. } => "context",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::Csv(_) => "csv",
    }
}

fn read_artifact(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(std::fs::read_to_string(path)?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_artifact(path)?;
    serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

/// Labels plus the split they were fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelArtifact {
    pub thresholds: QuantileThresholds,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub labels: BTreeMap<String, SalesClass>,
    pub train_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureArtifact {
    pub features: FeatureSet,
    pub product_features: ProductFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub class_count: u8,
    pub n_train: usize,
    pub n_test: usize,
    pub train_accuracy: f64,
    /// `None` when the split left no test products.
    pub test_accuracy: Option<f64>,
    pub feature_width: usize,
    pub provider: String,
}

/// Runs commands against one config and output directory.
pub struct Pipeline {
    config: PipelineConfig,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Pipeline {
            config: config.resolved(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.paths.out.join(name)
    }

    /// Runs one command, then appends its manifest line.
    pub fn run(&self, command: &Command) -> Result<ManifestEntry> {
        std::fs::create_dir_all(&self.config.paths.out)?;
        log::info!("running {}", command.name());
        let written = match command {
            Command::Synth => self.synth()?,
            Command::Ingest => self.ingest()?,
            Command::Clean => self.clean()?,
            Command::Cluster => self.cluster()?,
            Command::Score => self.score()?,
            Command::Label => self.label()?,
            Command::Train => self.train()?,
            Command::EvalTriples => self.eval_triples()?,
            Command::Ablate => self.ablate()?,
            Command::Report => self.report()?,
        };
        let mut outputs = BTreeMap::new();
        for path in written {
            let bytes = std::fs::read(&path)?;
            let rel = path
                .strip_prefix(&self.config.paths.out)
                .unwrap_or(&path)
                .to_string_lossy()
                .replace('\\', "/");
            outputs.insert(rel, sha256_hex(&bytes));
        }
        let entry = ManifestEntry {
            command: command.name().into(),
            config_hash: self.config.hash(),
            seed: self.config.seed,
            outputs,
        };
        let manifest = self.out(MANIFEST);
        let mut text = if manifest.exists() {
            std::fs::read_to_string(&manifest)?
        } else {
            String::new()
        };
        text.push_str(&serde_json::to_string(&entry)?);
        text.push('\n');
        write_atomic(&manifest, text.as_bytes())?;
        Ok(entry)
    }

    fn put(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.out(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        write_atomic(&path, bytes.as_ref())?;
        Ok(path)
    }

    fn put_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.put(name, text)
    }

    fn provider(&self) -> Result<Box<dyn EmbeddingProvider>> {
        let root = self.config.image_root();
        Ok(match ProviderChoice::parse(&self.config.provider)? {
            ProviderChoice::Builtin => Box::new(BuiltinProvider::new(root)),
            ProviderChoice::File(p) => {
                if !p.exists() {
                    return Err(Error::MissingArtifact(p));
                }
                Box::new(FileProvider::load(&p)?)
            }
            ProviderChoice::Remote(url) => {
                let url = std::env::var(EMBED_URL_ENV)
                    .ok()
                    .filter(|u| !u.is_empty())
                    .or(url)
                    .ok_or_else(|| Error::invalid(format!("remote provider needs a URL or {EMBED_URL_ENV}")))?;
                Box::new(RemoteProvider::connect(
                    &url,
                    root,
                    Duration::from_secs(self.config.remote.timeout_secs),
                    self.config.remote.retries,
                )?)
            }
        })
    }

    fn catalog(&self) -> Result<Catalog> {
        let path = self.out("catalog.jsonl");
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        load_catalog(&path, CatalogFormat::Jsonl)
    }

    fn labels(&self) -> Result<LabelArtifact> {
        read_json(&self.out("labels.json"))
    }

    fn subset(catalog: &Catalog, ids: &[String]) -> Result<Catalog> {
        let index = catalog.index_by_id();
        let products = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|p| (*p).clone())
                    .ok_or_else(|| Error::invalid(format!("labelled id {id:?} is not in the catalog")))
            })
            .collect::<Result<Vec<_>>>()?;
        Catalog::with_schema(products, catalog.schema().clone())
    }

    fn labels_for(catalog: &Catalog, labels: &LabelArtifact) -> Result<Vec<SalesClass>> {
        catalog
            .products()
            .iter()
            .map(|p| {
                labels
                    .labels
                    .get(&p.id)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("product {:?} has no label", p.id)))
            })
            .collect()
    }

    fn model_parts(&self) -> Result<(ForestModel, Encoder)> {
        let model = ForestModel::load(&self.out("model.forest"))?;
        let encoder: Encoder = read_json(&self.out("encoder.json"))?;
        if encoder.layout.fingerprint() != model.layout_fingerprint {
            return Err(Error::Dimension("encoder and model layouts differ".into()));
        }
        Ok((model, encoder))
    }

    fn synth(&self) -> Result<Vec<PathBuf>> {
        let cfg = &self.config.synth;
        let mut spec = match &cfg.spec {
            Some(path) => read_json::<SynthSpec>(path)?,
            None => match cfg.preset.as_str() {
                "planted_signal" => SynthSpec::planted_signal(cfg.n_products, self.config.seed),
                "feature_driven" => SynthSpec::feature_driven(cfg.n_products, self.config.seed),
                other => return Err(Error::invalid(format!("unknown synth preset {other:?}"))),
            },
        };
        spec.seed = derive_seed(self.config.seed, "synth");
        let catalog = generate(&spec)?;
        let raw = self.config.raw_dir();
        std::fs::create_dir_all(&raw)?;
        render_images(&spec, &catalog, &raw)?;
        let mut written = vec![
            self.put("raw/catalog.jsonl", catalog.to_jsonl())?,
            self.put_json("raw/spec.json", &spec)?,
        ];
        for p in catalog.products().iter().filter(|p| !p.image_ref.is_empty()) {
            written.push(raw.join(&p.image_ref));
        }
        Ok(written)
    }

    fn ingest(&self) -> Result<Vec<PathBuf>> {
        let source = self.config.source_catalog();
        if !source.exists() {
            return Err(Error::MissingArtifact(source));
        }
        let catalog = load_catalog(&source, CatalogFormat::from_path(&source))?;
        if catalog.is_empty() {
            return Err(Error::empty(format!("{} holds no products", source.display())));
        }
        Ok(vec![
            self.put("catalog.jsonl", catalog.to_jsonl())?,
            self.put_json("schema.json", catalog.schema())?,
        ])
    }

    fn clean(&self) -> Result<Vec<PathBuf>> {
        let universe = build_universe(&self.catalog()?);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["phrase", "frequency"])?;
        for (phrase, freq) in universe.frequencies() {
            w.write_record([phrase.to_string(), freq.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(vec![self.put("phrases.csv", bytes)?])
    }

    fn cluster(&self) -> Result<Vec<PathBuf>> {
        let catalog = self.catalog()?;
        let groups = cluster_synonyms(&build_universe(&catalog), &self.config.dedup)?;
        let (features, product_features) = canonicalize(&catalog, &groups)?;
        log::info!("{} phrases in {} groups", features.alias_map.len(), groups.len());
        Ok(vec![
            self.put_json("groups.json", &groups)?,
            self.put_json(
                "features.json",
                &FeatureArtifact {
                    features,
                    product_features,
                },
            )?,
        ])
    }

    fn score(&self) -> Result<Vec<PathBuf>> {
        let catalog = self.catalog()?;
        let f: FeatureArtifact = read_json(&self.out("features.json"))?;
        let ranking = influence_scores(&catalog, &f.features, &f.product_features, self.config.lambda)?;
        Ok(vec![
            self.put("influence.csv", ranking.to_csv()?)?,
            self.put_json("influence.json", &ranking)?,
        ])
    }

    fn label(&self) -> Result<Vec<PathBuf>> {
        let catalog = self.catalog()?;
        let (train_cat, test_cat) = split(&catalog, self.config.train_fraction, derive_seed(self.config.seed, "split"))?;
        let thresholds = fit_thresholds(&train_cat.sales(), self.config.classes)?;
        let (_, train_counts) = label_with_report(&train_cat.sales(), &thresholds);
        let labels = catalog
            .products()
            .iter()
            .map(|p| (p.id.clone(), crate::labeler::assign_class(p.sales, &thresholds)))
            .collect();
        log::info!("train class counts {train_counts:?}, imbalance {:.3}", imbalance(&train_counts));
        let artifact = LabelArtifact {
            thresholds,
            train_ids: train_cat.products().iter().map(|p| p.id.clone()).collect(),
            test_ids: test_cat.products().iter().map(|p| p.id.clone()).collect(),
            labels,
            train_counts,
        };
        Ok(vec![self.put_json("labels.json", &artifact)?])
    }

    fn train(&self) -> Result<Vec<PathBuf>> {
        let labels = self.labels()?;
        let catalog = self.catalog()?;
        let train_cat = Self::subset(&catalog, &labels.train_ids)?;
        let test_cat = Self::subset(&catalog, &labels.test_ids)?;
        let provider = self.provider()?;
        let encoder = Encoder::fit(&train_cat, provider.as_ref(), &self.config.encode)?;
        let train_ds = encoder.encode_catalog(provider.as_ref(), &train_cat, &Self::labels_for(&train_cat, &labels)?)?;
        let model = train(&train_ds, labels.thresholds.class_count, &self.config.forest)?;
        let test_accuracy = if test_cat.is_empty() {
            None
        } else {
            let test_ds = encoder.encode_catalog(provider.as_ref(), &test_cat, &Self::labels_for(&test_cat, &labels)?)?;
            Some(evaluate_accuracy(&model, &test_ds)?)
        };
        let metrics = TrainMetrics {
            class_count: model.class_count,
            n_train: train_cat.len(),
            n_test: test_cat.len(),
            train_accuracy: model.train_accuracy,
            test_accuracy,
            feature_width: model.n_features,
            provider: encoder.provider_fingerprint.clone(),
        };
        let model_path = self.out("model.forest");
        model.save(&model_path)?;
        Ok(vec![
            model_path,
            self.put_json("encoder.json", &encoder)?,
            self.put_json("metrics.json", &metrics)?,
        ])
    }

    fn eval_triples(&self) -> Result<Vec<PathBuf>> {
        let (model, encoder) = self.model_parts()?;
        let labels = self.labels()?;
        let catalog = self.catalog()?;
        let truth = Self::labels_for(&catalog, &labels)?;
        let triples = select_triples(
            &catalog,
            &truth,
            self.config.triples,
            derive_seed(self.config.seed, "triples"),
            &self.config.type_attr,
        )?;
        let provider = self.provider()?;
        let results = score_triples(&triples, &catalog, &model, &encoder, provider.as_ref())?;
        let summary = kendall_tau_total(&results)?;
        Ok(vec![
            self.put("triples.csv", triples_to_csv(&triples, &results)?)?,
            self.put("triples_summary.csv", tau_summary_to_csv(&summary))?,
        ])
    }

    fn ablate(&self) -> Result<Vec<PathBuf>> {
        let (model, encoder) = self.model_parts()?;
        let catalog = self.catalog()?;
        let f: FeatureArtifact = read_json(&self.out("features.json"))?;
        let ranking: InfluenceRanking = read_json(&self.out("influence.json"))?;
        let cfg = &self.config.ablation;
        let (top, bottom) = decile_features(&ranking, cfg.fraction, cfg.min_frequency)?;
        let provider = self.provider()?;
        let mut cases: Vec<AblationCase> = Vec::new();
        for (records, polarity, name) in [(top, Polarity::Good, "ablation-good"), (bottom, Polarity::Bad, "ablation-bad")] {
            let chosen: Vec<_> = records.into_iter().map(|r| (r, polarity)).collect();
            let seed = derive_seed(self.config.seed, name);
            cases.extend(ablation_cases(&catalog, &f.features, &f.product_features, &chosen, cfg.cases, seed)?);
        }
        let scored = run_ablation(&cases, &model, &encoder, provider.as_ref())?;
        Ok(vec![
            self.put("ablation.csv", ablation_to_csv(&scored)?)?,
            self.put_json("ablation.json", &scored)?,
        ])
    }

    fn report(&self) -> Result<Vec<PathBuf>> {
        let metrics: TrainMetrics = read_json(&self.out("metrics.json"))?;
        let catalog = self.catalog()?;
        let mut written = vec![self.put(
            "reports/table1_accuracy.csv",
            format!(
                "classes,n_train,n_test,train_accuracy,test_accuracy\n{},{},{},{},{}\n",
                metrics.class_count,
                metrics.n_train,
                metrics.n_test,
                sci6(metrics.train_accuracy),
                metrics.test_accuracy.map(sci6).unwrap_or_default()
            ),
        )?];
        let summary = self.out("triples_summary.csv");
        if summary.exists() {
            written.push(self.put("reports/table2_triplets.csv", std::fs::read(&summary)?)?);
        }
        let ablation = self.out("ablation.json");
        if ablation.exists() {
            let cases: Vec<AblationCase> = read_json(&ablation)?;
            written.push(self.put("reports/table3_ablation.csv", ablation_table(&cases)?)?);
        }
        let thresholds = self.labels().ok().map(|l| l.thresholds);
        written.push(self.put(
            "reports/sales_histogram.csv",
            sales_histogram(&catalog.sales(), 30, thresholds.as_ref()),
        )?);
        Ok(written)
    }
}

/// One row per (polarity, feature): mean scores over its cases and the
/// share of cases moving in the expected direction.
pub fn ablation_table(cases: &[AblationCase]) -> Result<String> {
    let mut groups: BTreeMap<(Polarity, String), Vec<&AblationCase>> = BTreeMap::new();
    for c in cases {
        groups.entry((c.polarity, c.feature.to_string())).or_default().push(c);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["remove", "feature", "feature_score", "cases", "original_s", "modified_s", "direction", "matching"])?;
    // good features first, each side by descending influence
    let mut rows: Vec<_> = groups.into_iter().collect();
    rows.sort_by(|a, b| {
        a.0 .0
            .cmp(&b.0 .0)
            .then(b.1[0].feature_score.total_cmp(&a.1[0].feature_score))
            .then(a.0 .1.cmp(&b.0 .1))
    });
    for ((polarity, feature), list) in rows {
        let n = list.len() as f64;
        let mut o = 0.0;
        let mut m = 0.0;
        let mut hits = 0usize;
        for c in &list {
            let (Some(os), Some(ms)) = (c.original_score, c.modified_score) else {
                return Err(Error::invalid(format!("case on {} has not been scored", c.original.id)));
            };
            o += os;
            m += ms;
            hits += usize::from(c.matches_expectation() == Some(true));
        }
        let (o, m) = (o / n, m / n);
        let direction = if o > m {
            "original"
        } else if m > o {
            "modified"
        } else {
            "tie"
        };
        w.write_record([
            polarity.to_string(),
            feature,
            sci6(list[0].feature_score),
            list.len().to_string(),
            sci6(o),
            sci6(m),
            direction.to_string(),
            format!("{hits}/{}", list.len()),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
}

/// Equal-width histogram of sales; each bin notes the class its midpoint
/// falls into when thresholds are known.
pub fn sales_histogram(sales: &[f64], bins: usize, thresholds: Option<&QuantileThresholds>) -> String {
    let mut out = String::from("bin_lower,bin_upper,count,class\n");
    if sales.is_empty() || bins == 0 {
        return out;
    }
    let lo = sales.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = sales.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &s in sales {
        let b = (((s - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    for (i, c) in counts.iter().enumerate() {
        let a = lo + i as f64 * width;
        let b = if i + 1 == bins { hi.max(a + width) } else { a + width };
        let class = thresholds
            .map(|t| crate::labeler::assign_class((a + b) / 2.0, t).to_string())
            .unwrap_or_default();
        out.push_str(&format!("{},{},{c},{class}\n", sci6(a), sci6(b)));
    }
    out
}

/// Synonym groups as written by `cluster`.
pub fn load_groups(out: &Path) -> Result<Vec<SynonymGroup>> {
    read_json(&out.join("groups.json"))
}

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use dtgen_core::filter::{apply_filter, cosine_score, group_stats, FilterOutcome, InvalidSample, ScoredSample};
use dtgen_core::gateway::server::{self, ServerConfig};
use dtgen_core::gateway::{
    Backend, EmbeddingRequest, FinetuneJob, Gateway, GatewayError, GenerationRequest, HttpBackend, HttpConfig,
    ManifestRef, MockBackend,
};
use dtgen_core::metrics::{metrics, read_predictions, table_report, ConfusionMatrix};
use dtgen_core::prompt::{render, sample_uniform, PromptTemplate, RenderedPrompt};
use dtgen_core::seed::{fold_u64, hash_parts, item_seed, stage_seed};
use dtgen_core::store::{
    manifest_id_for, DatasetStore, IngestItem, Origin, PromptProvenance, Split, Stage, StoreError, REPORT_DIR,
};
use dtgen_core::{ContentHash, FilterReport, Task};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{BackendKind, FilterSection, Loaded, PipelineConfig, CONFIG_FILE, TEMPLATE_FILE};
use crate::lock::RootLock;
use crate::{Cli, CliError, Command, GlobalArgs};

const GENERATE_BATCH: usize = 256;
const EMBED_BATCH: usize = 512;
const JOB_POLL: Duration = Duration::from_secs(5);
const JOB_MAX_WAIT: Duration = Duration::from_secs(48 * 3600);

pub const FILTER_REPORT: &str = "filter_report.json";
pub const GENERATE_FAILURES: &str = "generate_failures.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.json";

type Gw = Gateway<Arc<dyn Backend>>;

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let g = cli.global;
    match cli.command {
        Command::Init { dir, force } => init(&dir, force),
        Command::Ingest { csv, task, force } => Ctx::load(&g)?.ingest(&csv, task, force),
        Command::Finetune { force } => Ctx::load(&g)?.finetune(force),
        Command::Generate { n, force } => Ctx::load(&g)?.generate(n, force),
        Command::Filter { alpha, rule, force } => {
            let ctx = Ctx::load(&g)?;
            let mut section = ctx.loaded.cfg.filter.clone();
            if let Some(a) = alpha {
                section.alpha = a;
            }
            if let Some(r) = rule {
                section.rule = r;
            }
            ctx.filter(section, force)
        }
        Command::Export { task, force } => Ctx::load(&g)?.export(task, force),
        Command::Eval { pred, task, scheme } => Ctx::load(&g)?.eval(&pred, task, &scheme),
        Command::Report { json } => Ctx::load(&g)?.report(json),
        Command::MockServer { listen, blob_dir } => {
            // The server runs fine without a pipeline config; mock settings
            // then take their defaults.
            let loaded = if g.config.exists() {
                Loaded::read(&g.config)?
            } else {
                Loaded {
                    cfg: PipelineConfig::scaffold(),
                    base: PathBuf::from("."),
                }
            };
            mock_server(&loaded, listen, blob_dir)
        }
    }
}

fn runtime() -> anyhow::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting async runtime")
}

fn gateway_err(e: GatewayError) -> CliError {
    match e {
        GatewayError::Validation(_) | GatewayError::EmptyBatch | GatewayError::ZeroConcurrency => {
            CliError::Validation(e.into())
        }
        GatewayError::Backend(_) | GatewayError::JobFailed { .. } | GatewayError::JobTimeout { .. } => {
            CliError::Backend(e.into())
        }
    }
}

fn store_err(e: StoreError) -> CliError {
    CliError::Validation(e.into())
}

fn init(dir: &Path, force: bool) -> Result<(), CliError> {
    let cfg_path = dir.join(CONFIG_FILE);
    if cfg_path.exists() && !force {
        return Err(anyhow!("{} exists; pass --force to overwrite", cfg_path.display()).into());
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let cfg = PipelineConfig::scaffold();
    std::fs::write(&cfg_path, cfg.to_toml()).with_context(|| format!("writing {}", cfg_path.display()))?;
    let template = PromptTemplate::default_template();
    let doc = serde_json::to_string_pretty(&template.to_document()).context("serializing template")?;
    let tpl_path = dir.join(TEMPLATE_FILE);
    std::fs::write(&tpl_path, doc + "\n").with_context(|| format!("writing {}", tpl_path.display()))?;
    println!("wrote {} and {}", cfg_path.display(), tpl_path.display());
    Ok(())
}

fn mock_server(loaded: &Loaded, listen: std::net::SocketAddr, blob_dir: Option<PathBuf>) -> Result<(), CliError> {
    let backend: Arc<dyn Backend> = Arc::new(MockBackend::new(loaded.cfg.backend.mock.to_mock_config()));
    let cfg = ServerConfig {
        token: loaded.cfg.backend.token.clone(),
        blob_dir,
        ..ServerConfig::default()
    };
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(listen)
            .await
            .with_context(|| format!("binding {listen}"))?;
        let addr = listener.local_addr().context("reading bound address")?;
        println!("listening on http://{addr}");
        server::serve(listener, backend, cfg, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .context("serving")?;
        Ok::<_, CliError>(())
    })
}

#[derive(Deserialize)]
struct RealRow {
    path: PathBuf,
    label: String,
    #[serde(default)]
    split: Option<String>,
    /// Option indices in slot order, `/`-separated; rendered into the caption.
    #[serde(default)]
    slots: Option<String>,
    #[serde(default)]
    caption: Option<String>,
}

#[derive(Serialize)]
struct GenerateFailure<'a> {
    request_id: &'a str,
    prompt_id: &'a str,
    attempts: u32,
    error: String,
}

struct Ctx {
    loaded: Loaded,
    seed: u64,
    endpoint: Option<String>,
}

impl Ctx {
    fn load(g: &GlobalArgs) -> anyhow::Result<Self> {
        let loaded = Loaded::read(&g.config)?;
        Ok(Ctx {
            seed: g.seed.unwrap_or(loaded.cfg.master_seed),
            endpoint: g.endpoint.clone(),
            loaded,
        })
    }

    fn cfg(&self) -> &PipelineConfig {
        &self.loaded.cfg
    }

    fn template_source(&self) -> anyhow::Result<String> {
        let p = self.loaded.template_path();
        std::fs::read_to_string(&p).with_context(|| format!("reading template {}", p.display()))
    }

    fn template(&self) -> anyhow::Result<PromptTemplate> {
        let p = self.loaded.template_path();
        PromptTemplate::from_json(&self.template_source()?).with_context(|| format!("template {}", p.display()))
    }

    fn open_store(&self, template: &PromptTemplate) -> anyhow::Result<(RootLock, DatasetStore)> {
        let root = self.loaded.storage();
        let lock = RootLock::acquire(&root)?;
        let id = manifest_id_for(&format!("{}/{}", self.seed, template.version()));
        let store = DatasetStore::open_or_create(&root, id)?;
        Ok((lock, store))
    }

    fn gateway(&self) -> Result<Gw, CliError> {
        let b = &self.cfg().backend;
        let backend: Arc<dyn Backend> = match b.kind {
            BackendKind::Mock => Arc::new(MockBackend::new(b.mock.to_mock_config())),
            BackendKind::Http => {
                let endpoint = self.endpoint.clone().unwrap_or_else(|| b.endpoint.clone());
                Arc::new(
                    HttpBackend::new(HttpConfig {
                        endpoint,
                        token: b.token.clone(),
                    })
                    .map_err(CliError::backend)?,
                )
            }
        };
        Gateway::new(backend, b.limits()).map_err(gateway_err)
    }

    /// Everything needed to re-run the pipeline, minus locations and
    /// credentials.
    fn snapshot(&self, filter: &FilterSection, models: &BTreeMap<String, String>) -> anyhow::Result<Value> {
        let cfg = self.cfg();
        let mut backend = serde_json::to_value(&cfg.backend)?;
        if let Value::Object(m) = &mut backend {
            m.remove("token");
            m.remove("endpoint");
            m.insert("models".into(), serde_json::to_value(models)?);
        }
        Ok(json!({
            "template_sha256": ContentHash::of(self.template_source()?.as_bytes()).to_hex(),
            "master_seed": self.seed,
            "generation": cfg.generation,
            "filter": filter,
            "adapter": cfg.adapter,
            "backend": backend,
        }))
    }

    fn ingest(&self, csv_path: &Path, task: Task, force: bool) -> Result<(), CliError> {
        let template = self.template()?;
        let source = std::fs::read(csv_path).with_context(|| format!("reading {}", csv_path.display()))?;
        let source_sha = ContentHash::of(&source).to_hex();
        let (_lock, mut store) = self.open_store(&template)?;
        let seen = store
            .commits()
            .any(|c| c.stage == "ingest" && c.info.get("source_sha256").and_then(Value::as_str) == Some(&source_sha));
        if seen && !force {
            println!("{} already ingested; pass --force to ingest again", csv_path.display());
            return Ok(());
        }

        let base = csv_path.parent().unwrap_or(Path::new("."));
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(source.as_slice());
        let mut items = Vec::new();
        for (i, row) in rdr.deserialize::<RealRow>().enumerate() {
            let line = i + 2;
            let row = row.with_context(|| format!("{} line {line}", csv_path.display()))?;
            let label = task.parse_label(&row.label).ok_or_else(|| {
                anyhow!(
                    "{} line {line}: `{}` is not a {task} label",
                    csv_path.display(),
                    row.label
                )
            })?;
            let split: Split = row
                .split
                .as_deref()
                .unwrap_or("train")
                .parse()
                .map_err(|e: String| anyhow!("{} line {line}: {e}", csv_path.display()))?;
            let slots = row.slots.as_deref().map(str::trim).filter(|s| !s.is_empty());
            let caption = match (slots, row.caption.filter(|c| !c.trim().is_empty())) {
                (Some(_), Some(_)) => {
                    return Err(anyhow!("{} line {line}: give slots or caption, not both", csv_path.display()).into())
                }
                (Some(s), None) => {
                    let choices = s
                        .split('/')
                        .map(|c| c.trim().parse::<usize>())
                        .collect::<Result<Vec<_>, _>>()
                        .with_context(|| format!("{} line {line}: slots `{s}`", csv_path.display()))?;
                    Some(
                        render(&template, &choices)
                            .with_context(|| format!("{} line {line}", csv_path.display()))?
                            .text,
                    )
                }
                (None, c) => c,
            };
            let img = base.join(&row.path);
            let bytes = std::fs::read(&img)
                .with_context(|| format!("{} line {line}: reading {}", csv_path.display(), img.display()))?;
            items.push(IngestItem {
                bytes,
                origin: Origin::Real,
                task,
                label,
                split,
                caption,
                prompt: None,
            });
        }
        if items.is_empty() {
            return Err(anyhow!("{} has no rows", csv_path.display()).into());
        }
        let rows = items.len();
        let stage = Stage::new("ingest")
            .with_info("source_sha256", source_sha)
            .with_info("rows", rows as u64)
            .with_info("task", task.to_string());
        let delta = store.ingest(items, stage).map_err(store_err)?;
        println!(
            "ingested {rows} rows: {} new, {} duplicate; {} real images in store",
            delta.added.len(),
            delta.duplicates.len(),
            store.real().count()
        );
        Ok(())
    }

    fn finetune(&self, force: bool) -> Result<(), CliError> {
        let template = self.template()?;
        let (_lock, mut store) = self.open_store(&template)?;
        if let Some(c) = store.last_commit("finetune") {
            if !force {
                let id = c.info.get("adapter_id").and_then(Value::as_str).unwrap_or("?");
                println!("adapter {id} already trained; pass --force to train again");
                return Ok(());
            }
        }
        let train = store.real().filter(|r| r.split == Split::Train).count() as u64;
        let captions: BTreeMap<String, String> = store
            .real()
            .filter(|r| r.split == Split::Train)
            .filter_map(|r| r.caption.clone().map(|c| (r.sample_id.to_hex(), c)))
            .collect();
        if (captions.len() as u64) < train {
            tracing::warn!(
                uncaptioned = train - captions.len() as u64,
                "training images without a caption"
            );
        }
        if train == 0 {
            return Err(anyhow!("no real training images; run `dtgen ingest` first").into());
        }
        let manifest_path = store
            .manifest_path()
            .canonicalize()
            .context("resolving manifest path")?;
        let manifest = ManifestRef::for_file(&manifest_path, train).context("hashing manifest")?;
        let a = &self.cfg().adapter;
        let mut job = FinetuneJob::new(manifest.clone(), a.rank, a.steps, a.lambda, a.mu);
        job.base_model = a.base_model.clone();
        job.captions = captions;

        let gw = self.gateway()?;
        let (models, accepted, status) = runtime()?.block_on(async {
            let health = gw.health().await.map_err(gateway_err)?;
            let accepted = gw.submit_finetune(&job).await.map_err(gateway_err)?;
            let status = gw
                .wait_for_job(&accepted.job_id, JOB_POLL, JOB_MAX_WAIT)
                .await
                .map_err(gateway_err)?;
            Ok::<_, CliError>((health.models, accepted, status))
        })?;
        let adapter_id = status
            .adapter_id
            .or(accepted.adapter_id)
            .ok_or_else(|| CliError::Backend(anyhow!("job {} finished without an adapter id", accepted.job_id)))?;

        let stage = Stage::new("finetune")
            .with_config(self.snapshot(&self.cfg().filter, &models)?)
            .with_info("adapter_id", adapter_id.clone())
            .with_info("job_id", accepted.job_id)
            .with_info("rank", a.rank as u64)
            .with_info("steps", a.steps)
            .with_info("lambda", a.lambda)
            .with_info("mu", a.mu)
            .with_info("manifest_sha256", manifest.sha256)
            .with_info("records", train)
            .with_info("captions", job.captions.len() as u64);
        store.mark_stage(stage).map_err(store_err)?;
        println!("adapter {adapter_id} trained on {train} real images");
        Ok(())
    }

    fn requests(&self, prompts: &[RenderedPrompt], adapter_id: Option<&str>) -> Vec<GenerationRequest> {
        let g = &self.cfg().generation;
        let stream = stage_seed(self.seed, "images");
        prompts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let seed = item_seed(stream, i as u64);
                let (s, w, h, st) = (
                    seed.to_le_bytes(),
                    g.width.to_le_bytes(),
                    g.height.to_le_bytes(),
                    g.steps.to_le_bytes(),
                );
                let parts: [&[u8]; 7] = [
                    b"generate",
                    p.prompt_id.0.as_bytes(),
                    &s,
                    &w,
                    &h,
                    &st,
                    adapter_id.unwrap_or("").as_bytes(),
                ];
                GenerationRequest {
                    request_id: format!("gen-{:016x}", fold_u64(&hash_parts(parts))),
                    prompt: p.text.clone(),
                    seed,
                    width: g.width,
                    height: g.height,
                    steps: g.steps,
                    adapter_id: adapter_id.map(str::to_owned),
                }
            })
            .collect()
    }

    fn generate(&self, n: Option<usize>, force: bool) -> Result<(), CliError> {
        let n = n.unwrap_or(self.cfg().generation.n);
        if n == 0 {
            return Err(anyhow!("--n must be at least 1").into());
        }
        let template = self.template()?;
        if template.label_slot().is_none() {
            return Err(anyhow!("template has no label slot; synthetic images would be unlabelled").into());
        }
        let (_lock, mut store) = self.open_store(&template)?;
        let adapter_id = store
            .last_commit("finetune")
            .and_then(|c| c.info.get("adapter_id"))
            .and_then(Value::as_str)
            .map(str::to_owned);
        if adapter_id.is_none() {
            tracing::warn!("no fine-tuned adapter; generating with the base model");
        }

        let prompts = sample_uniform(&template, n, stage_seed(self.seed, "prompts")).context("sampling prompts")?;
        let requests = self.requests(&prompts, adapter_id.as_deref());
        let mut done: HashSet<String> = store
            .synthetic()
            .filter_map(|r| r.prompt.as_ref().map(|p| p.request_id.clone()))
            .collect();
        for c in store.commits().filter(|c| c.stage == "generate") {
            if let Some(Value::Array(ids)) = c.info.get("duplicate_requests") {
                done.extend(ids.iter().filter_map(Value::as_str).map(str::to_owned));
            }
        }
        let pending: Vec<usize> = (0..requests.len())
            .filter(|&i| force || !done.contains(&requests[i].request_id))
            .collect();
        if pending.is_empty() {
            println!("all {n} images already generated; pass --force to regenerate");
            return Ok(());
        }

        let gw = self.gateway()?;
        let rt = runtime()?;
        let models = rt.block_on(gw.health()).map_err(gateway_err)?.models;
        let snapshot = self.snapshot(&self.cfg().filter, &models)?;
        let mut failures: Vec<GenerateFailure> = Vec::new();
        let (mut added, mut duplicates) = (0usize, 0usize);
        for chunk in pending.chunks(GENERATE_BATCH) {
            let batch: Vec<GenerationRequest> = chunk.iter().map(|&i| requests[i].clone()).collect();
            let outcomes = rt.block_on(gw.generate_batch(&batch)).map_err(gateway_err)?;
            let by_id: HashMap<&str, usize> = chunk.iter().map(|&i| (requests[i].request_id.as_str(), i)).collect();
            let mut items = Vec::new();
            let mut ids = Vec::new();
            for o in outcomes {
                let i = by_id[o.request_id.as_str()];
                let p = &prompts[i];
                match o.result {
                    Ok(res) => {
                        ids.push(o.request_id.clone());
                        items.push(IngestItem {
                            bytes: res.image,
                            origin: Origin::Synthetic,
                            task: Task::ThreeClass,
                            label: p.derived_label.expect("template has a label slot"),
                            split: Split::None,
                            caption: None,
                            prompt: Some(PromptProvenance {
                                prompt_id: p.prompt_id.0.clone(),
                                text: p.text.clone(),
                                slot_choices: p.slot_choices.clone(),
                                request_id: o.request_id,
                                seed: requests[i].seed,
                                adapter_id: res.metadata.adapter_id,
                            }),
                        });
                    }
                    Err(e) => failures.push(GenerateFailure {
                        request_id: &requests[i].request_id,
                        prompt_id: &p.prompt_id.0,
                        attempts: o.attempts,
                        error: e.to_string(),
                    }),
                }
            }
            if items.is_empty() {
                continue;
            }
            // Which requests produced bytes already stored under another
            // request id; they must not be resubmitted on resume.
            let peek: Vec<ContentHash> = items.iter().map(|it| ContentHash::of(&it.bytes)).collect();
            let mut fresh = HashSet::new();
            let dup_requests: Vec<Value> = peek
                .iter()
                .zip(&ids)
                .filter(|(h, _)| store.get(h).is_some() || !fresh.insert(**h))
                .map(|(_, id)| Value::from(id.as_str()))
                .collect();
            let stage = Stage::new("generate")
                .with_config(snapshot.clone())
                .with_info("requested", chunk.len() as u64)
                .with_info("duplicate_requests", dup_requests);
            let delta = store.ingest(items, stage).map_err(store_err)?;
            added += delta.added.len();
            duplicates += delta.duplicates.len();
        }

        let failures_path = store.root().join(REPORT_DIR).join(GENERATE_FAILURES);
        if failures.is_empty() {
            if failures_path.exists() {
                std::fs::remove_file(&failures_path)
                    .with_context(|| format!("removing {}", failures_path.display()))?;
            }
        } else {
            let body = serde_json::to_vec_pretty(&failures).context("serializing failures")?;
            store.write_report_file(GENERATE_FAILURES, &body).map_err(store_err)?;
        }
        println!(
            "generated {added} new images ({duplicates} duplicate, {} failed); {} synthetic in store",
            failures.len(),
            store.synthetic().count()
        );
        match failures.len() {
            0 => Ok(()),
            f if f == pending.len() => Err(CliError::Backend(anyhow!(
                "all {f} generation requests failed; see {}",
                failures_path.display()
            ))),
            f => Err(CliError::Partial(format!(
                "{f} of {} generation requests failed; see {}; re-run to retry them",
                pending.len(),
                failures_path.display()
            ))),
        }
    }

    fn filter(&self, section: FilterSection, force: bool) -> Result<(), CliError> {
        let fcfg = section.to_filter_config()?;
        let template = self.template()?;
        let (_lock, mut store) = self.open_store(&template)?;
        let synthetic: Vec<_> = store.synthetic().cloned().collect();
        if synthetic.is_empty() {
            return Err(anyhow!("no synthetic images; run `dtgen generate` first").into());
        }
        if !force {
            if let Some(c) = store.last_commit("filter") {
                let same = c.config.as_ref().and_then(|v| v.get("filter"))
                    == Some(&serde_json::to_value(&section).map_err(anyhow::Error::from)?);
                let clean = c.info.get("invalid").and_then(Value::as_u64) == Some(0);
                if same && clean && synthetic.iter().all(|r| r.filter_decision.is_some()) {
                    println!("filter already applied with this config; pass --force to re-run");
                    return Ok(());
                }
            }
        }

        let mut texts: Vec<EmbeddingRequest> = Vec::new();
        let mut seen = HashSet::new();
        for r in &synthetic {
            let p = r.prompt.as_ref().expect("synthetic records carry provenance");
            if seen.insert(p.prompt_id.clone()) {
                texts.push(EmbeddingRequest::text(format!("txt-{}", p.prompt_id), p.text.clone()));
            }
        }
        let mut images = Vec::with_capacity(synthetic.len());
        for r in &synthetic {
            let bytes = store.read_blob(&r.sample_id).map_err(store_err)?;
            images.push(EmbeddingRequest::image(format!("img-{}", r.sample_id), &bytes));
        }

        let gw = self.gateway()?;
        let rt = runtime()?;
        let models = rt.block_on(gw.health()).map_err(gateway_err)?.models;
        let mut vectors: HashMap<String, Result<Vec<f64>, String>> = HashMap::new();
        for chunk in texts.chunks(EMBED_BATCH).chain(images.chunks(EMBED_BATCH)) {
            for o in rt.block_on(gw.embed_batch(chunk)).map_err(gateway_err)? {
                vectors.insert(o.request_id, o.result.map(|r| r.vector).map_err(|e| e.to_string()));
            }
        }

        let mut scores = Vec::new();
        let mut invalid = Vec::new();
        let mut failed_calls = 0usize;
        for r in &synthetic {
            let p = r.prompt.as_ref().expect("synthetic records carry provenance");
            let text = &vectors[&format!("txt-{}", p.prompt_id)];
            let image = &vectors[&format!("img-{}", r.sample_id)];
            let bad = |reason: String| InvalidSample {
                sample_id: r.sample_id.to_hex(),
                prompt_id: p.prompt_id.clone(),
                reason,
            };
            match (image, text) {
                (Ok(iv), Ok(tv)) => match cosine_score(iv, tv) {
                    Ok(s) => {
                        let mut sample = ScoredSample::new(r.sample_id.to_hex(), p.prompt_id.clone(), s)
                            .map_err(anyhow::Error::from)?;
                        if let Some(l) = r.task.convert(r.label, Task::ThreeClass) {
                            sample = sample.with_label(l);
                        }
                        scores.push(sample);
                    }
                    Err(e) => invalid.push(bad(e.to_string())),
                },
                (Err(e), _) => {
                    failed_calls += 1;
                    invalid.push(bad(format!("image embedding failed: {e}")));
                }
                (_, Err(e)) => {
                    failed_calls += 1;
                    invalid.push(bad(format!("text embedding failed: {e}")));
                }
            }
        }
        if scores.is_empty() {
            return Err(CliError::Backend(anyhow!(
                "none of {} synthetic images could be scored: {}",
                synthetic.len(),
                invalid.first().map(|i| i.reason.as_str()).unwrap_or("")
            )));
        }
        let stats = group_stats(&scores, &fcfg).map_err(anyhow::Error::from)?;
        let outcome: FilterOutcome<f64> = apply_filter(&scores, &stats, &fcfg).map_err(anyhow::Error::from)?;
        let report: FilterReport = FilterReport::new(fcfg, stats, outcome, invalid);
        let body = report.to_json_pretty().context("serializing filter report")?;
        let report_path = store
            .write_report_file(FILTER_REPORT, body.as_bytes())
            .map_err(store_err)?;

        let stage = Stage::new("filter")
            .with_config(self.snapshot(&section, &models)?)
            .with_info("retention", report.retention)
            .with_info("selected", report.counts.selected as u64)
            .with_info("rejected", report.counts.rejected as u64)
            .with_info("invalid", report.counts.invalid as u64);
        store.apply_filter_report(&report, stage).map_err(store_err)?;
        println!(
            "kept {} of {} synthetic images (retention {:.4}, alpha {}, {}); {} unscorable",
            report.counts.selected,
            report.counts.total,
            report.retention,
            section.alpha,
            section.rule,
            report.counts.invalid
        );
        if failed_calls > 0 {
            return Err(CliError::Partial(format!(
                "{failed_calls} images were rejected because an embedding failed; see {}",
                report_path.display()
            )));
        }
        Ok(())
    }

    fn export(&self, task: Task, force: bool) -> Result<(), CliError> {
        let template = self.template()?;
        let (_lock, mut store) = self.open_store(&template)?;
        if !force {
            if let Some(last) = store.commits().last() {
                if last.stage == "export"
                    && last.info.get("task").and_then(Value::as_str) == Some(task.to_string().as_str())
                {
                    println!("export is current; pass --force to rewrite it");
                    return Ok(());
                }
            }
        }
        let bundle = store.export_training_set(task).map_err(store_err)?;
        let per_class: serde_json::Map<String, Value> = bundle
            .per_class
            .iter()
            .map(|(k, v)| (k.clone(), Value::from(*v)))
            .collect();
        store
            .mark_stage(
                Stage::new("export")
                    .with_info("task", task.to_string())
                    .with_info("rows", bundle.rows as u64)
                    .with_info("per_class", Value::Object(per_class)),
            )
            .map_err(store_err)?;
        let classes: Vec<String> = bundle.per_class.iter().map(|(k, v)| format!("{k} {v}")).collect();
        println!(
            "exported {} images to {} ({})",
            bundle.rows,
            bundle.dir.display(),
            classes.join(", ")
        );
        Ok(())
    }

    fn eval(&self, pred: &Path, task: Task, scheme: &str) -> Result<(), CliError> {
        let file = std::fs::File::open(pred).with_context(|| format!("opening {}", pred.display()))?;
        let p = read_predictions(file, task).with_context(|| format!("reading {}", pred.display()))?;
        if p.y_true.is_empty() {
            return Err(anyhow!("{} has no predictions", pred.display()).into());
        }
        let cm = ConfusionMatrix::for_task(&p.y_true, &p.y_pred, task).map_err(anyhow::Error::from)?;
        let m = metrics::<f64>(&cm, task.positive_class());
        let table = table_report(&[(scheme.to_owned(), m.clone())]);
        let doc = json!({
            "task": task,
            "scheme": scheme,
            "samples": cm.total(),
            "confusion": cm,
            "metrics": m,
            "table": table,
        });
        let dir = self.loaded.storage().join(REPORT_DIR);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let out = dir.join(METRICS_FILE);
        let body = serde_json::to_string_pretty(&doc).context("serializing metrics")? + "\n";
        std::fs::write(&out, body).with_context(|| format!("writing {}", out.display()))?;
        print!("{}", table.to_fixed_width());
        if !m.degenerate.is_empty() {
            println!("zero-denominator terms set to 0: {}", m.degenerate.join(", "));
        }
        Ok(())
    }

    fn report(&self, as_json: bool) -> Result<(), CliError> {
        let template = self.template()?;
        let (_lock, store) = self.open_store(&template)?;
        let damaged = store.verify_blobs();
        if !damaged.is_empty() {
            return Err(anyhow!("{} blobs are missing or altered, first {}", damaged.len(), damaged[0]).into());
        }
        let report = store.report(Some(&template));
        let body = serde_json::to_string_pretty(&report).context("serializing report")? + "\n";
        store
            .write_report_file(REPORT_FILE, body.as_bytes())
            .map_err(store_err)?;
        if as_json {
            print!("{body}");
        } else {
            print!("{}", report.to_text());
        }
        Ok(())
    }
}

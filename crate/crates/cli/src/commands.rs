use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Mutex;

use evomem_core::answer::{answer, AnswerConfig};
use evomem_core::datasets::{
    category_counts, corpus_stats, load_locomo, load_longmemeval, read_exclusions, Conversation,
    LocomoOptions, Loaded,
};
use evomem_core::distill::{export_records, ExportConfig, Profile};
use evomem_core::domain::{render_history, MemoryStore, Observation, QaItem};
use evomem_core::eval::{evaluate, pareto_sweep, Answered, EvalReport, SweepRow};
use evomem_core::evolve::{evolve, file_stem, load_store, save_store, EvolutionBatch, EvolveConfig};
use evomem_core::extract::{extract, ExtractConfig};
use evomem_core::prompts::PromptSet;
use evomem_core::retrieval::{
    build_index, entry_items, observation_items, query, utterance_items, Index, Variant,
    VectorCache,
};
use evomem_core::synth::{build_dataset, AuditEntry};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::backend::Backend;
use crate::cli::{
    Command, EvalArgs, EvolveArgs, ExportArgs, IndexArgs, IngestArgs, PairArgs, QueryArgs,
    SweepArgs, SynthArgs,
};
use crate::config::{Config, DatasetFormat};
use crate::error::{io_err, CliError, CliResult};
use crate::workspace::{Manifest, ManifestHeader, Workspace};

pub const CORPUS: &str = "corpus.jsonl";
pub const VECTOR_CACHE: &str = "vectors.jsonl";

pub fn observations_path(pair: &str) -> String {
    format!("observations/{}.jsonl", file_stem(pair))
}

pub fn stores_dir(pair: &str) -> String {
    format!("stores/{}", file_stem(pair))
}

pub fn index_path(variant: Variant, pair: &str) -> String {
    format!("index/{variant}/{}.json", file_stem(pair))
}

fn synth_path(pair: &str, speaker: &str, kind: &str) -> String {
    format!("synth/{}/{}.{kind}.jsonl", file_stem(pair), file_stem(speaker))
}

/// Everything a subcommand needs.
pub struct Ctx {
    pub cfg: Config,
    pub ws: Workspace,
    pub backend: Backend,
    pub prompts: PromptSet,
    warnings: Mutex<Vec<String>>,
}

impl Ctx {
    pub fn new(cfg: Config, command: &Command) -> CliResult<Ctx> {
        cfg.validate()?;
        let prompts = match &cfg.paths.prompts {
            Some(dir) => PromptSet::with_overrides(dir)?,
            None => PromptSet::builtin(),
        };
        let backend = Backend::build(&cfg.backend)?;
        let ws = Workspace::open(&cfg.paths.out, command.name())?;
        if cfg.backend.mode == crate::config::CassetteMode::Replay {
            if let Some(c) = &cfg.backend.cassette {
                ws.note_external(c)?;
            }
        }
        Ok(Ctx {
            cfg,
            ws,
            backend,
            prompts,
            warnings: Mutex::default(),
        })
    }

    fn warn(&self, msg: impl Into<String>) {
        let msg = msg.into();
        warn!("{msg}");
        self.warnings.lock().unwrap().push(msg);
    }

    fn profile(&self, name: Option<&str>) -> CliResult<Profile> {
        match name {
            Some(n) => Profile::by_name(n).ok_or_else(|| CliError::Config(format!("unknown profile {n:?}"))),
            None => self.cfg.profile(),
        }
    }

    pub fn finish(&self, command: &Command) -> CliResult<Manifest> {
        self.backend.finish()?;
        let header = ManifestHeader {
            config: self.cfg.clone(),
            backend: self.backend.ids(),
            prompts: self.prompts.hashes(),
            calls: self.backend.calls(),
            warnings: self.warnings.lock().unwrap().clone(),
        };
        self.ws.finish(header, command)
    }

    fn corpus(&self, pairs: &[String]) -> CliResult<Vec<Conversation>> {
        let all: Vec<Conversation> = self.ws.read_jsonl(CORPUS, "ingest")?;
        if pairs.is_empty() {
            return Ok(all);
        }
        for p in pairs {
            if !all.iter().any(|c| &c.pair_id == p) {
                return Err(CliError::Config(format!("unknown pair {p:?}")));
            }
        }
        Ok(all.into_iter().filter(|c| pairs.contains(&c.pair_id)).collect())
    }

    fn observations(&self, pair: &str) -> CliResult<Vec<Observation>> {
        self.ws.read_jsonl(&observations_path(pair), "extract")
    }

    fn store(&self, pair: &str, owner: &str) -> CliResult<Option<MemoryStore>> {
        let dir = stores_dir(pair);
        let stem = file_stem(owner);
        let store_rel = format!("{dir}/{stem}.store.jsonl");
        if !self.ws.exists(&store_rel) {
            return Ok(None);
        }
        self.ws.read(&store_rel, "evolve")?;
        self.ws.read(&format!("{dir}/{stem}.events.jsonl"), "evolve")?;
        Ok(load_store(&self.ws.path(&dir), owner)?)
    }

    fn stores(&self, conv: &Conversation) -> CliResult<Vec<MemoryStore>> {
        let (a, b) = &conv.participants;
        let mut out = Vec::new();
        for owner in [a, b] {
            out.extend(self.store(&conv.pair_id, owner)?);
        }
        if out.is_empty() {
            return Err(CliError::MissingArtifact {
                path: self.ws.path(&stores_dir(&conv.pair_id)).display().to_string(),
                hint: "evolve",
            });
        }
        Ok(out)
    }

    /// The vector cache is a pure memo of embeddings, so it is not hashed into manifests.
    fn load_cache(&self) -> CliResult<VectorCache> {
        let path = self.ws.path(VECTOR_CACHE);
        if path.exists() {
            Ok(VectorCache::load(&path)?)
        } else {
            Ok(VectorCache::new())
        }
    }

    fn save_cache(&self, cache: &VectorCache) -> CliResult<()> {
        Ok(cache.save(&self.ws.path(VECTOR_CACHE))?)
    }

    fn build_pair_index(
        &self,
        conv: &Conversation,
        variant: Variant,
        cache: &mut VectorCache,
    ) -> CliResult<Index> {
        let items = match variant {
            Variant::Utterance => utterance_items(&conv.sessions),
            Variant::Observation => observation_items(&self.observations(&conv.pair_id)?),
            Variant::Evolving => entry_items(&self.stores(conv)?),
            other => {
                return Err(CliError::Config(format!(
                    "variant {other} does not use a retrieval index"
                )))
            }
        };
        Ok(build_index(&self.backend.gateway, items, Some(cache))?)
    }
}

fn load_dataset(cfg: &Config, ws: &Workspace, path: &Path, format: DatasetFormat, exclusions: Option<&Path>) -> CliResult<Loaded> {
    ws.note_external(path)?;
    match format {
        DatasetFormat::Locomo => {
            let mut opts = LocomoOptions {
                include_adversarial: cfg.paths.include_adversarial,
                all_pairs: cfg.paths.all_pairs,
                ..LocomoOptions::default()
            };
            if let Some(x) = exclusions {
                ws.note_external(x)?;
                opts.exclude = read_exclusions(x)?;
            }
            Ok(load_locomo(path, &opts)?)
        }
        DatasetFormat::Longmemeval => Ok(load_longmemeval(path)?),
    }
}

pub fn ingest(ctx: &Ctx, args: &IngestArgs) -> CliResult<()> {
    let path = args
        .dataset
        .clone()
        .or_else(|| ctx.cfg.paths.dataset.clone())
        .ok_or_else(|| CliError::Config("no dataset: pass --dataset or set paths.dataset".into()))?;
    let format = args.format.unwrap_or(ctx.cfg.paths.format);
    let exclusions = args.exclusions.clone().or_else(|| ctx.cfg.paths.exclusions.clone());
    let loaded = load_dataset(&ctx.cfg, &ctx.ws, &path, format, exclusions.as_deref())?;
    for w in &loaded.warnings {
        ctx.warn(w.clone());
    }
    ctx.ws.write_jsonl(CORPUS, &loaded.conversations)?;
    #[derive(Serialize)]
    struct Stats {
        #[serde(flatten)]
        corpus: evomem_core::datasets::CorpusStats,
        categories: BTreeMap<String, usize>,
    }
    let stats = Stats {
        corpus: corpus_stats(&loaded.conversations),
        categories: category_counts(&loaded.conversations),
    };
    ctx.ws.write_json("stats.json", &stats)?;
    println!("{}", serde_json::to_string_pretty(&stats).map_err(|e| io_err("stats", e))?);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractLogLine {
    pub session_id: String,
    pub speaker: String,
    pub observations: usize,
    pub warnings: Vec<String>,
    pub raw_response: String,
}

pub fn extract_cmd(ctx: &Ctx, args: &PairArgs) -> CliResult<()> {
    let convs = ctx.corpus(&args.pair)?;
    let cfg = ExtractConfig {
        max_tokens: ctx.cfg.extract_max_tokens,
    };
    for conv in &convs {
        let jobs: Vec<(&evomem_core::domain::Session, &String)> = conv
            .sessions
            .iter()
            .flat_map(|s| {
                [&conv.participants.0, &conv.participants.1]
                    .into_iter()
                    .filter(move |sp| s.turns.iter().any(|t| &&t.speaker == sp))
                    .map(move |sp| (s, sp))
            })
            .collect();
        let results = jobs
            .par_iter()
            .map(|(s, sp)| extract(&ctx.backend.gateway, &ctx.prompts, s, sp, cfg))
            .collect::<Result<Vec<_>, _>>()?;
        let mut observations = Vec::new();
        let mut log = Vec::new();
        for ((s, sp), r) in jobs.iter().zip(results) {
            for w in &r.parse_warnings {
                ctx.warn(format!("{} {sp}: {w}", s.session_id));
            }
            log.push(ExtractLogLine {
                session_id: s.session_id.clone(),
                speaker: (*sp).clone(),
                observations: r.observations.len(),
                warnings: r.parse_warnings,
                raw_response: r.raw_response,
            });
            observations.extend(r.observations);
        }
        info!(pair = %conv.pair_id, observations = observations.len(), "extracted");
        println!("{}\t{} observations", conv.pair_id, observations.len());
        ctx.ws.write_jsonl(&observations_path(&conv.pair_id), &observations)?;
        ctx.ws
            .write_jsonl(&format!("extract_log/{}.jsonl", file_stem(&conv.pair_id)), &log)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLine {
    pub owner: String,
    #[serde(flatten)]
    pub batch: EvolutionBatch,
}

/// Evolves one speaker's store over the sessions that have observations for them.
fn evolve_owner(
    ctx: &Ctx,
    conv: &Conversation,
    owner: &str,
    observations: &[Observation],
    force: bool,
) -> CliResult<(MemoryStore, Vec<BatchLine>)> {
    let cfg = EvolveConfig::from(&ctx.cfg.evolve);
    let mut store = ctx
        .store(&conv.pair_id, owner)?
        .unwrap_or_else(|| MemoryStore::new(owner));
    let applied: HashSet<String> = store.event_log.iter().map(|e| e.session_id.clone()).collect();
    let mut last = store.last_applied_at().cloned();
    let mut batches = Vec::new();
    for session in &conv.sessions {
        if applied.contains(&session.session_id) {
            continue;
        }
        let obs: Vec<Observation> = observations
            .iter()
            .filter(|o| o.source_session == session.session_id && o.subject == owner)
            .cloned()
            .collect();
        if obs.is_empty() {
            continue;
        }
        if let Some(prev) = &last {
            if session.timestamp < *prev {
                let err = CliError::OutOfOrder {
                    owner: owner.to_string(),
                    session: session.session_id.clone(),
                    at: session.timestamp.raw().to_string(),
                    previous: prev.raw().to_string(),
                };
                if !force {
                    return Err(err);
                }
                ctx.warn(format!("forced: {err}"));
            }
        }
        let (next, batch) = evolve(
            &ctx.backend.gateway,
            &ctx.prompts,
            &store,
            &obs,
            &session.session_id,
            &session.timestamp,
            cfg,
        )?;
        for w in &batch.warnings {
            ctx.warn(format!("{} {owner}: {w}", session.session_id));
        }
        store = next;
        if last.as_ref().is_none_or(|p| session.timestamp > *p) {
            last = Some(session.timestamp.clone());
        }
        batches.push(BatchLine {
            owner: owner.to_string(),
            batch,
        });
    }
    Ok((store, batches))
}

pub fn evolve_cmd(ctx: &Ctx, args: &EvolveArgs) -> CliResult<bool> {
    let convs = ctx.corpus(&args.pairs.pair)?;
    let results = convs
        .par_iter()
        .map(|conv| -> CliResult<_> {
            let observations = ctx.observations(&conv.pair_id)?;
            let mut out = Vec::new();
            for owner in [&conv.participants.0, &conv.participants.1] {
                out.push(evolve_owner(ctx, conv, owner, &observations, args.force)?);
            }
            Ok(out)
        })
        .collect::<CliResult<Vec<_>>>()?;

    if args.dry_run {
        for (conv, owners) in convs.iter().zip(&results) {
            for (_, batches) in owners {
                for b in batches {
                    #[derive(Serialize)]
                    struct DryRun<'a> {
                        pair: &'a str,
                        #[serde(flatten)]
                        line: &'a BatchLine,
                    }
                    let line = DryRun { pair: &conv.pair_id, line: b };
                    println!("{}", serde_json::to_string(&line).map_err(|e| io_err("dry-run", e))?);
                }
            }
        }
        return Ok(false);
    }

    for (conv, owners) in convs.iter().zip(results) {
        let batch_rel = format!("batches/{}.jsonl", file_stem(&conv.pair_id));
        let mut lines: Vec<BatchLine> = if ctx.ws.exists(&batch_rel) {
            ctx.ws.read_jsonl(&batch_rel, "evolve")?
        } else {
            Vec::new()
        };
        let dir = stores_dir(&conv.pair_id);
        for (store, batches) in owners {
            let stem = file_stem(&store.owner);
            let files = [
                format!("{dir}/{stem}.store.jsonl"),
                format!("{dir}/{stem}.events.jsonl"),
            ];
            for f in &files {
                ctx.ws.preserve(f)?;
            }
            save_store(&ctx.ws.path(&dir), &store)?;
            for f in &files {
                ctx.ws.track(f)?;
            }
            println!(
                "{}\t{}\t{} entries\tversion {}\t{} new batches",
                conv.pair_id,
                store.owner,
                store.len(),
                store.version,
                batches.len()
            );
            lines.extend(batches);
        }
        ctx.ws.write_jsonl(&batch_rel, &lines)?;
    }
    Ok(true)
}

pub fn index_cmd(ctx: &Ctx, args: &IndexArgs) -> CliResult<()> {
    let convs = ctx.corpus(&args.pairs.pair)?;
    let mut cache = ctx.load_cache()?;
    for conv in &convs {
        let index = ctx.build_pair_index(conv, args.variant, &mut cache)?;
        println!("{}\t{}\t{} items", conv.pair_id, args.variant, index.len());
        ctx.ws.write_json(&index_path(args.variant, &conv.pair_id), &index)?;
    }
    ctx.save_cache(&cache)
}

/// The memories shown to the answer prompt for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub key: String,
    pub score: f64,
    pub text: String,
}

fn ground(
    ctx: &Ctx,
    conv: &Conversation,
    index: Option<&Index>,
    variant: Variant,
    k: usize,
    question: &str,
) -> CliResult<Vec<Retrieved>> {
    Ok(match variant {
        Variant::Session => vec![Retrieved {
            key: format!("{}:history", conv.pair_id),
            score: 1.0,
            text: render_history(&conv.sessions),
        }],
        Variant::NoGrounding => Vec::new(),
        _ => {
            let index = index.expect("retrieval variants carry an index");
            query(&ctx.backend.gateway, index, question, k, None)?
                .items
                .into_iter()
                .map(|s| Retrieved {
                    key: s.item.key.to_string(),
                    score: s.score,
                    text: s.item.text,
                })
                .collect()
        }
    })
}

fn answer_with(
    ctx: &Ctx,
    profile: &Profile,
    memories: &[Retrieved],
    question: &str,
) -> CliResult<Answered> {
    let texts: Vec<String> = memories.iter().map(|m| m.text.clone()).collect();
    let cfg = AnswerConfig {
        concise: profile.concise,
        max_tokens: ctx.cfg.answer_max_tokens,
    };
    Ok(answer(&ctx.backend.gateway, &ctx.prompts, &texts, question, cfg)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutput {
    pub pair: String,
    pub question: String,
    pub variant: Variant,
    pub k: usize,
    pub profile: String,
    pub retrieved: Vec<Retrieved>,
    pub answer: String,
    pub input_tokens: usize,
}

pub fn query_cmd(ctx: &Ctx, args: &QueryArgs) -> CliResult<()> {
    let profile = ctx.profile(args.profile.as_deref())?;
    let k = args.k.unwrap_or(profile.k);
    let conv = ctx
        .corpus(std::slice::from_ref(&args.pair))?
        .pop()
        .expect("pair checked");
    let mut cache = ctx.load_cache()?;
    let index = if args.variant.uses_retrieval() {
        Some(ctx.build_pair_index(&conv, args.variant, &mut cache)?)
    } else {
        None
    };
    let retrieved = ground(ctx, &conv, index.as_ref(), args.variant, k, &args.question)?;
    let answered = answer_with(ctx, &profile, &retrieved, &args.question)?;
    let out = QueryOutput {
        pair: conv.pair_id.clone(),
        question: args.question.clone(),
        variant: args.variant,
        k: if args.variant.uses_retrieval() { k } else { 0 },
        profile: profile.name.clone(),
        retrieved,
        answer: answered.text,
        input_tokens: answered.input_tokens,
    };
    ctx.ws.write_json("query.json", &out)?;
    ctx.save_cache(&cache)?;
    println!("{}", serde_json::to_string_pretty(&out).map_err(|e| io_err("query", e))?);
    Ok(())
}

pub fn synthesize_cmd(ctx: &Ctx, args: &SynthArgs) -> CliResult<()> {
    let convs = ctx.corpus(&args.pairs.pair)?;
    let cfg = (&ctx.cfg.synth).into();
    for conv in &convs {
        let context = render_history(&conv.sessions);
        let speakers: Vec<&String> = [&conv.participants.0, &conv.participants.1]
            .into_iter()
            .filter(|s| args.speaker.is_empty() || args.speaker.contains(s))
            .collect();
        for speaker in speakers {
            let data = build_dataset(
                &ctx.backend.gateway,
                &ctx.prompts,
                &conv.sessions,
                speaker,
                &context,
                &ctx.cfg.filter,
                cfg,
            )?;
            let mut by_rule: BTreeMap<&str, usize> = BTreeMap::new();
            for AuditEntry { rule, .. } in &data.audit {
                *by_rule.entry(rule.as_str()).or_default() += 1;
            }
            println!(
                "{}\t{speaker}\tkept {}\tdropped {} {:?}",
                conv.pair_id,
                data.kept.len(),
                data.audit.len(),
                by_rule
            );
            ctx.ws.write_jsonl(&synth_path(&conv.pair_id, speaker, "dataset"), &data.kept)?;
            ctx.ws.write_jsonl(&synth_path(&conv.pair_id, speaker, "audit"), &data.audit)?;
        }
    }
    Ok(())
}

pub fn export_cmd(ctx: &Ctx, args: &ExportArgs) -> CliResult<()> {
    let profile = ctx.profile(args.profile.as_deref())?;
    let cfg = ExportConfig {
        d: args.d.unwrap_or(profile.d),
        max_tokens: ctx.cfg.synth.teacher_max_tokens,
        samples: ctx.cfg.synth.samples,
        sample_temperature: ctx.cfg.synth.sample_temperature,
    };
    let convs = ctx.corpus(&args.pairs.pair)?;
    let mut exported = 0;
    for conv in &convs {
        let context = render_history(&conv.sessions);
        for speaker in [&conv.participants.0, &conv.participants.1] {
            let rel = synth_path(&conv.pair_id, speaker, "dataset");
            if !ctx.ws.exists(&rel) {
                continue;
            }
            let pairs = ctx.ws.read_jsonl(&rel, "synthesize")?;
            let records = export_records(&ctx.backend.gateway, &ctx.prompts, &pairs, &context, cfg)?;
            println!("{}\t{speaker}\t{} records (d={})", conv.pair_id, records.len(), cfg.d);
            ctx.ws.write_jsonl(
                &format!("distill/{}/{}.jsonl", file_stem(&conv.pair_id), file_stem(speaker)),
                &records,
            )?;
            exported += 1;
        }
    }
    if exported == 0 {
        return Err(CliError::MissingArtifact {
            path: ctx.ws.path("synth").display().to_string(),
            hint: "synthesize",
        });
    }
    Ok(())
}

/// QA items to score, each tagged with the position of its conversation.
fn eval_items(
    ctx: &Ctx,
    convs: &[Conversation],
    dataset: Option<&Path>,
    limit: Option<usize>,
) -> CliResult<(Vec<QaItem>, HashMap<String, usize>)> {
    let sources: Vec<Conversation> = match dataset {
        Some(path) => {
            load_dataset(&ctx.cfg, &ctx.ws, path, ctx.cfg.paths.format, ctx.cfg.paths.exclusions.as_deref())?
                .conversations
        }
        None => convs.to_vec(),
    };
    let mut items = Vec::new();
    let mut owner = HashMap::new();
    for src in &sources {
        let pos = convs
            .iter()
            .position(|c| c.pair_id == src.pair_id)
            .ok_or_else(|| CliError::Config(format!("pair {} was not ingested", src.pair_id)))?;
        for item in src.qa_items.iter().take(limit.unwrap_or(usize::MAX)) {
            owner.insert(item.question_id.clone(), pos);
            items.push(item.clone());
        }
    }
    Ok((items, owner))
}

fn indices_for(
    ctx: &Ctx,
    convs: &[Conversation],
    variants: &[Variant],
) -> CliResult<BTreeMap<(Variant, usize), Index>> {
    let mut cache = ctx.load_cache()?;
    let mut out = BTreeMap::new();
    for &v in variants.iter().filter(|v| v.uses_retrieval()) {
        for (i, conv) in convs.iter().enumerate() {
            out.insert((v, i), ctx.build_pair_index(conv, v, &mut cache)?);
        }
    }
    ctx.save_cache(&cache)?;
    Ok(out)
}

/// The model behind a cassette wrapper; the wrapper itself is recorded in the manifest.
fn unwrap_cassette(id: String) -> String {
    ["record(", "replay("]
        .iter()
        .find_map(|p| id.strip_prefix(p).and_then(|rest| rest.strip_suffix(')')))
        .map(String::from)
        .unwrap_or(id)
}

fn eval_config(ctx: &Ctx, profile: &Profile, variant: Variant, k: usize) -> BTreeMap<String, String> {
    let ids = ctx.backend.ids();
    BTreeMap::from([
        ("variant".into(), variant.to_string()),
        ("k".into(), k.to_string()),
        ("profile".into(), profile.name.clone()),
        ("chat".into(), unwrap_cassette(ids.chat)),
        ("embed".into(), unwrap_cassette(ids.embed)),
        ("tokenizer".into(), ids.tokenizer),
    ])
}

fn write_csv<T: Serialize>(ctx: &Ctx, rel: &str, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| io_err(rel, e))?;
    }
    let bytes = w.into_inner().map_err(|e| io_err(rel, e))?;
    ctx.ws.write(rel, &bytes)
}

pub fn eval_cmd(ctx: &Ctx, args: &EvalArgs) -> CliResult<()> {
    let profile = ctx.profile(args.profile.as_deref())?;
    let convs = ctx.corpus(&[])?;
    let (items, owner) = eval_items(ctx, &convs, args.dataset.as_deref(), args.limit)?;
    let indices = indices_for(ctx, &convs, &args.variants)?;
    for &variant in &args.variants {
        let k = if variant.uses_retrieval() {
            args.k.unwrap_or(profile.k)
        } else {
            0
        };
        let report: EvalReport = evaluate(
            &items,
            variant,
            k,
            |item| {
                let pos = owner[&item.question_id];
                let mem = ground(ctx, &convs[pos], indices.get(&(variant, pos)), variant, k, &item.question)?;
                answer_with(ctx, &profile, &mem, &item.question)
            },
            None,
            eval_config(ctx, &profile, variant, k),
        )?;
        let stem = format!("eval/{variant}_k{k}");
        ctx.ws.write_jsonl(&format!("{stem}.rows.jsonl"), &report.rows)?;
        write_csv(ctx, &format!("{stem}.rows.csv"), &report.rows)?;
        #[derive(Serialize)]
        struct Summary<'a> {
            overall: &'a evomem_core::eval::Aggregate,
            per_category: &'a BTreeMap<String, evomem_core::eval::Aggregate>,
            config: &'a BTreeMap<String, String>,
        }
        ctx.ws.write_json(
            &format!("{stem}.summary.json"),
            &Summary {
                overall: &report.overall,
                per_category: &report.per_category,
                config: &report.config,
            },
        )?;
        let o = &report.overall;
        println!(
            "{variant}\tk={k}\tn={}\tF1 {:.2}\tBLEU-1 {:.2}\tROUGE-L {:.2}\ttokens {:.1}",
            o.count, o.f1, o.bleu1, o.rouge_l, o.input_tokens
        );
    }
    Ok(())
}

pub fn sweep_cmd(ctx: &Ctx, args: &SweepArgs) -> CliResult<()> {
    let profile = ctx.profile(args.profile.as_deref())?;
    let convs = ctx.corpus(&[])?;
    let (items, owner) = eval_items(ctx, &convs, args.dataset.as_deref(), args.limit)?;
    let indices = indices_for(ctx, &convs, &args.variants)?;
    let rows: Vec<SweepRow> = pareto_sweep(&items, &args.variants, &args.ks, |item, variant, k| {
        let pos = owner[&item.question_id];
        let mem = ground(ctx, &convs[pos], indices.get(&(variant, pos)), variant, k, &item.question)?;
        answer_with(ctx, &profile, &mem, &item.question)
    })?;
    ctx.ws.write_jsonl("sweep.jsonl", &rows)?;
    write_csv(ctx, "sweep.csv", &rows)?;
    println!("variant\tk\tquestions\tmean_input_tokens\tf1\tbleu1\trouge_l");
    for r in &rows {
        println!(
            "{}\t{}\t{}\t{:.1}\t{:.2}\t{:.2}\t{:.2}",
            r.variant, r.k, r.questions, r.mean_input_tokens, r.f1, r.bleu1, r.rouge_l
        );
    }
    Ok(())
}

/// Runs one subcommand. Returns the manifest unless nothing was written.
pub fn dispatch(cfg: Config, command: &Command) -> CliResult<Option<Manifest>> {
    let ctx = Ctx::new(cfg, command)?;
    let wrote = match command {
        Command::Ingest(a) => ingest(&ctx, a).map(|_| true),
        Command::Extract(a) => extract_cmd(&ctx, a).map(|_| true),
        Command::Evolve(a) => evolve_cmd(&ctx, a),
        Command::Index(a) => index_cmd(&ctx, a).map(|_| true),
        Command::Query(a) => query_cmd(&ctx, a).map(|_| true),
        Command::Synthesize(a) => synthesize_cmd(&ctx, a).map(|_| true),
        Command::ExportDistill(a) => export_cmd(&ctx, a).map(|_| true),
        Command::Eval(a) => eval_cmd(&ctx, a).map(|_| true),
        Command::Sweep(a) => sweep_cmd(&ctx, a).map(|_| true),
        Command::Replay(_) => unreachable!("replay is handled before dispatch"),
    }?;
    if wrote {
        Ok(Some(ctx.finish(command)?))
    } else {
        Ok(None)
    }
}

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use meshquery::analysis::{
    attention_profile, bucket_by_min_session_length, bucket_stats_tsv, click_contingency,
    length_buckets_tsv, novelty_rate, win_tie_loss,
};
use meshquery::decoder::{beam_search, read_suggestions, write_suggestions, BeamConfig};
use meshquery::hypothesis::{build_all, HypothesisRecord};
use meshquery::metrics::{
    evaluate, wilcoxon_signed_rank, MetricKind, MetricReport, ModelEmbedder, OneHotEmbedder,
    TokenEmbedder,
};
use meshquery::model::{Mode, Model};
use meshquery::mps::{build_pool, suggest_mps, CandidatePool};
use meshquery::session::{
    apply_filters, parse_events, segment_sessions, sessions_from_jsonl, sessions_to_jsonl,
    sort_events, SessionRecord, SplitConfig,
};
use meshquery::synth::{generate, SynthProfile};
use meshquery::tokenizer::Vocab;
use meshquery::trainer::{log_to_jsonl, TrainCheckpoint, Trainer};
use rayon::prelude::*;

use crate::config::{EmbedderKind, RunConfig};
use crate::error::{CliError, CliResult};

pub struct Ctx {
    pub workdir: PathBuf,
    pub config: RunConfig,
}

impl Ctx {
    pub fn path(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }

    pub fn read(&self, p: &Path) -> CliResult<String> {
        let full = self.path(p);
        fs::read_to_string(&full).map_err(|e| CliError::input(&full, e))
    }

    pub fn write(&self, p: &Path, contents: &str) -> CliResult<()> {
        let full = self.path(p);
        if let Some(parent) = full.parent() {
            fs::create_dir_all(parent).map_err(|e| meshquery::Error::io(parent, e))?;
        }
        fs::write(&full, contents).map_err(|e| meshquery::Error::io(&full, e))?;
        Ok(())
    }

    /// Logs the resolved configuration and stores it next to the outputs.
    pub fn record_config(&self, out_dir: &Path) -> CliResult<()> {
        let text = self.config.to_toml();
        log::info!("resolved configuration:\n{text}");
        self.write(&out_dir.join("resolved_config.toml"), &text)
    }

    fn sessions(&self, p: &Path) -> CliResult<Vec<SessionRecord>> {
        Ok(sessions_from_jsonl(&self.read(p)?)?)
    }

    fn vocab(&self, p: &Path) -> CliResult<Vocab> {
        Ok(Vocab::from_text(&self.read(p)?)?)
    }

    fn model(&self, p: &Path) -> CliResult<Model<f32>> {
        Ok(Model::from_json(&self.read(p)?)?)
    }

    fn suggestions(&self, p: &Path) -> CliResult<Vec<(String, Vec<String>)>> {
        let text = self.read(p)?;
        Ok(read_suggestions(BufReader::new(text.as_bytes()))?)
    }
}

pub fn synth(ctx: &Ctx, out: &Path, overfit: bool) -> CliResult<()> {
    let c = &ctx.config.synth;
    let profile = if overfit {
        SynthProfile::overfit()
    } else {
        c.profile.clone()
    };
    let corpus = generate(c.seed, c.sessions, &profile)?;
    ctx.write(&out.join("events.tsv"), &corpus.events_tsv())?;
    ctx.write(&out.join("labels.tsv"), &corpus.labels_tsv())?;
    ctx.record_config(out)?;
    log::info!(
        "wrote {} events for {} sessions",
        corpus.events.len(),
        corpus.labels.len()
    );
    Ok(())
}

pub fn ingest(ctx: &Ctx, events: &Path, out: &Path, vocab_path: Option<&Path>) -> CliResult<()> {
    let c = &ctx.config.ingest;
    let text = ctx.read(events)?;
    let mut evs = parse_events(BufReader::new(text.as_bytes()))?;
    sort_events(&mut evs);
    let seg = segment_sessions(&evs, c.gap_seconds)?;
    let vocab = match vocab_path {
        Some(p) => ctx.vocab(p)?,
        None => {
            let corpus: Vec<String> = seg
                .sessions
                .iter()
                .flat_map(|s| {
                    s.interactions.iter().flat_map(|i| {
                        std::iter::once(i.query.clone()).chain(i.clicks.iter().cloned())
                    })
                })
                .collect();
            Vocab::train(&corpus, c.vocab_size)?
        }
    };
    let split = SplitConfig {
        dev_fraction: c.dev_fraction,
        test_fraction: c.test_fraction,
        seed: c.split_seed,
    };
    let corpus = apply_filters(
        &seg.sessions,
        c.min_query_freq,
        c.max_tokens,
        Some(&vocab),
        &split,
    )?;
    ctx.write(&out.join("train.jsonl"), &sessions_to_jsonl(&corpus.train)?)?;
    ctx.write(&out.join("dev.jsonl"), &sessions_to_jsonl(&corpus.dev)?)?;
    ctx.write(&out.join("test.jsonl"), &sessions_to_jsonl(&corpus.test)?)?;
    ctx.write(&out.join("vocab.txt"), &vocab.to_text())?;
    let freq: String = corpus
        .query_frequency
        .iter()
        .map(|(q, n)| format!("{q}\t{n}\n"))
        .collect();
    ctx.write(&out.join("query_freq.tsv"), &freq)?;
    let mut stats = format!(
        "events={}\nsegmented_sessions={}\ndropped_clicks={}\ndropped_queries={}\n",
        evs.len(),
        seg.sessions.len(),
        seg.dropped_clicks,
        seg.dropped_queries
    );
    stats.push_str(&corpus.stats.to_kv());
    let _ = write!(
        stats,
        "train_sessions={}\ndev_sessions={}\ntest_sessions={}\nvocab_size={}\n",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        vocab.len()
    );
    ctx.write(&out.join("stats.txt"), &stats)?;
    ctx.record_config(out)?;
    log::info!(
        "ingest: {} sessions survive filtering",
        corpus.stats.surviving_sessions
    );
    Ok(())
}

pub fn tokenizer_train(ctx: &Ctx, corpus: &Path, vocab_size: usize, out: &Path) -> CliResult<()> {
    let lines: Vec<String> = ctx
        .read(corpus)?
        .lines()
        .map(meshquery::text::normalize)
        .filter(|l| !l.is_empty())
        .collect();
    let vocab = Vocab::train(&lines, vocab_size)?;
    ctx.write(out, &vocab.to_text())
}

pub fn tokenizer_encode(ctx: &Ctx, vocab: &Path, text: &str) -> CliResult<String> {
    let v = ctx.vocab(vocab)?;
    let ids = v.encode_target(&meshquery::text::normalize(text)).ids;
    Ok(ids
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(" "))
}

pub fn hypotheses(ctx: &Ctx, sessions: &Path, out: &Path) -> CliResult<()> {
    let mut text = String::new();
    for s in ctx.sessions(sessions)? {
        let rec = HypothesisRecord {
            session_id: s.session_id.clone(),
            hypotheses: build_all(&s)?.to_vec(),
        };
        text.push_str(&serde_json::to_string(&rec).map_err(meshquery::Error::from)?);
        text.push('\n');
    }
    ctx.write(out, &text)
}

pub fn train(ctx: &Ctx, corpus: &Path, out: &Path, resume: Option<&Path>) -> CliResult<()> {
    let train = ctx.sessions(&corpus.join("train.jsonl"))?;
    let dev = ctx.sessions(&corpus.join("dev.jsonl"))?;
    let vocab = ctx.vocab(&corpus.join("vocab.txt"))?;
    let trainer = match resume {
        Some(p) => {
            let ckpt: TrainCheckpoint =
                serde_json::from_str(&ctx.read(p)?).map_err(meshquery::Error::from)?;
            Trainer::resume(&ckpt, &train, &dev, &vocab)?
        }
        None => {
            let mut mc = ctx.config.model.clone();
            mc.vocab_size = vocab.len();
            let model: Model<f32> = Model::new(mc, ctx.config.train.seed)?;
            log::info!("model: {} parameters", model.num_parameters());
            Trainer::new(ctx.config.train.clone(), model, &train, &dev, &vocab)?
        }
    };
    let mut trainer = trainer;
    trainer.run_until(usize::MAX)?;
    let state = trainer.checkpoint();
    let outcome = trainer.finish()?;
    ctx.write(&out.join("train_log.jsonl"), &log_to_jsonl(&outcome.log)?)?;
    ctx.write(&out.join("model.json"), &outcome.model.to_json()?)?;
    ctx.write(
        &out.join("train_state.json"),
        &serde_json::to_string(&state).map_err(meshquery::Error::from)?,
    )?;
    let mut summary = format!(
        "steps={}\nstopped_early={}\n",
        outcome.steps, outcome.stopped_early
    );
    if let (Some(s), Some(w)) = (outcome.best_step, outcome.best_dev_wer3) {
        let _ = write!(summary, "best_step={s}\nbest_dev_wer3={w:.6}\n");
    }
    ctx.write(&out.join("summary.txt"), &summary)?;
    ctx.record_config(out)?;
    Ok(())
}

pub fn suggest(
    ctx: &Ctx,
    model: &Path,
    vocab: &Path,
    sessions: &Path,
    out: &Path,
    attention: Option<&Path>,
) -> CliResult<()> {
    let model = ctx.model(model)?;
    let vocab = ctx.vocab(vocab)?;
    let sessions = ctx.sessions(sessions)?;
    let sc = &ctx.config.suggest;
    let cfg = BeamConfig::new(sc.width, sc.max_len, sc.k);
    cfg.validate()?;
    let results: Vec<_> = sessions
        .par_iter()
        .map(|s| -> meshquery::Result<_> {
            let memory = model.memory(&model.model_inputs(s, &vocab)?)?;
            let list = beam_search(&s.session_id, &memory, &model, &vocab, &cfg)?;
            Ok((list, memory.attn_weights))
        })
        .collect::<meshquery::Result<_>>()?;
    let unfinished = results.iter().filter(|(l, _)| l.unfinished).count();
    if unfinished > 0 {
        log::warn!("{unfinished} sessions produced no finished suggestion within max_len");
    }
    let lists: Vec<_> = results.iter().map(|(l, _)| l.clone()).collect();
    ctx.write(out, &write_suggestions(&lists))?;
    if let Some(path) = attention {
        if model.mode() != Mode::Mesh {
            return Err(meshquery::Error::Precondition(
                "attention export needs a mesh-mode model".into(),
            )
            .into());
        }
        let mut text = String::new();
        for (list, alpha) in &results {
            let alpha = alpha.as_ref().expect("mesh mode records weights");
            for (i, row) in alpha.outer_iter().enumerate() {
                let _ = write!(text, "{}\tK{}", list.session_id, i + 1);
                for v in row {
                    let _ = write!(text, "\t{v:.6}");
                }
                text.push('\n');
            }
        }
        ctx.write(path, &text)?;
    }
    Ok(())
}

pub fn mps_build(ctx: &Ctx, corpus: &Path, out: &Path) -> CliResult<()> {
    let train = ctx.sessions(&corpus.join("train.jsonl"))?;
    ctx.write(out, &build_pool(&train).to_text())
}

pub fn mps_suggest(ctx: &Ctx, pool: &Path, sessions: &Path, out: &Path) -> CliResult<()> {
    let pool = CandidatePool::from_text(&ctx.read(pool)?)?;
    let sessions = ctx.sessions(sessions)?;
    let lists = sessions
        .iter()
        .map(|s| {
            suggest_mps(
                &s.session_id,
                s.last_query().unwrap_or(""),
                &pool,
                ctx.config.suggest.k,
            )
        })
        .collect::<meshquery::Result<Vec<_>>>()?;
    log::info!(
        "pool coverage of these sessions: {:.4}",
        pool.coverage(&sessions)
    );
    ctx.write(out, &write_suggestions(&lists))
}

pub fn evaluate_cmd(
    ctx: &Ctx,
    sessions: &Path,
    suggestions: &Path,
    out: &Path,
    model: Option<&Path>,
    vocab: Option<&Path>,
) -> CliResult<()> {
    let sessions = ctx.sessions(sessions)?;
    let sugg: BTreeMap<String, Vec<String>> = ctx.suggestions(suggestions)?.into_iter().collect();
    let embedder: Box<dyn TokenEmbedder> = match (ctx.config.evaluate.embedder, model, vocab) {
        (EmbedderKind::Model, Some(m), Some(v)) => {
            let vocab = ctx.vocab(v)?;
            let mut e = ModelEmbedder::new(&ctx.model(m)?, &vocab);
            e.warm(
                sessions
                    .iter()
                    .filter_map(|s| s.ground_truth.as_deref())
                    .chain(sugg.values().flatten().map(String::as_str)),
            );
            Box::new(e)
        }
        (EmbedderKind::Model, _, _) => {
            log::warn!("no model and vocabulary given; BertF1 uses exact word matches");
            Box::new(OneHotEmbedder)
        }
        (EmbedderKind::Onehot, _, _) => Box::new(OneHotEmbedder),
    };
    let report = evaluate(&sessions, &sugg, &ctx.config.evaluate.ks, embedder.as_ref())?;
    ctx.write(&out.join("aggregate.txt"), &report.aggregate_kv())?;
    ctx.write(&out.join("sessions.tsv"), &report.to_tsv())?;
    ctx.record_config(out)?;
    Ok(())
}

pub struct AnalyzeInputs<'a> {
    pub reports: &'a Path,
    pub out: &'a Path,
    pub sessions: Option<&'a Path>,
    pub model: Option<&'a Path>,
    pub vocab: Option<&'a Path>,
    pub pool: Option<&'a Path>,
    pub suggestions: Option<&'a Path>,
}

pub fn analyze(ctx: &Ctx, a: &AnalyzeInputs) -> CliResult<()> {
    let c = &ctx.config.analyze;
    let dir = ctx.path(a.reports);
    let mut names: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| CliError::input(&dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("sessions.tsv").is_file())
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::Usage(format!(
            "{}: no report directories with sessions.tsv",
            dir.display()
        )));
    }
    let reports: Vec<(String, MetricReport)> = names
        .iter()
        .map(|n| {
            Ok((
                n.clone(),
                MetricReport::from_tsv(&ctx.read(&a.reports.join(n).join("sessions.tsv"))?)?,
            ))
        })
        .collect::<CliResult<_>>()?;
    let refs: Vec<(&str, &MetricReport)> = reports.iter().map(|(n, r)| (n.as_str(), r)).collect();

    let buckets = bucket_by_min_session_length(&refs, c.k)?;
    ctx.write(
        &a.out.join("length_buckets.tsv"),
        &length_buckets_tsv(&buckets, c.k),
    )?;

    if let Some((_, base)) = reports.iter().find(|(n, _)| *n == c.baseline) {
        let mut text = String::from("method\tbaseline\tmetric\twins\tties\tlosses\twin_pct\ttie_pct\tloss_pct\twilcoxon_p\n");
        for (name, r) in reports.iter().filter(|(n, _)| *n != c.baseline) {
            for metric in [
                MetricKind::Wer,
                MetricKind::BertF1,
                MetricKind::Mrr,
                MetricKind::Success,
            ] {
                let wtl = win_tie_loss(r, base, metric, c.k)?;
                let [w, t, l] = wtl.percentages(2);
                let diffs: Vec<f64> = r
                    .column(metric, c.k)?
                    .iter()
                    .zip(base.column(metric, c.k)?)
                    .map(|(x, y)| x - y)
                    .collect();
                let p = wilcoxon_signed_rank(&diffs).p_value;
                let _ = writeln!(
                    text,
                    "{name}\t{}\t{}@{}\t{}\t{}\t{}\t{w}\t{t}\t{l}\t{p:.6e}",
                    c.baseline,
                    metric.name(),
                    c.k,
                    wtl.wins,
                    wtl.ties,
                    wtl.losses
                );
            }
        }
        ctx.write(&a.out.join("win_tie_loss.tsv"), &text)?;
    } else {
        log::warn!(
            "baseline report {:?} not found; skipping win/tie/loss",
            c.baseline
        );
    }

    let sessions = a.sessions.map(|p| ctx.sessions(p)).transpose()?;
    if let Some(sessions) = &sessions {
        let table = click_contingency(sessions, c.contingency_cap);
        ctx.write(&a.out.join("click_contingency.tsv"), &table.to_tsv())?;
        if let (Some(m), Some(v)) = (a.model, a.vocab) {
            let model = ctx.model(m)?;
            let vocab = ctx.vocab(v)?;
            let profile =
                attention_profile(&model, &vocab, sessions, &c.length_bounds, &c.click_bounds)?;
            ctx.write(
                &a.out.join("attention_by_length.tsv"),
                &bucket_stats_tsv(&profile.by_length),
            )?;
            ctx.write(
                &a.out.join("attention_by_last_clicks.tsv"),
                &bucket_stats_tsv(&profile.by_last_clicks),
            )?;
            let mut text = String::from("session_id\tn_queries\tlast_clicks\tk1\tk2\tk3\tk4\n");
            for s in &profile.sessions {
                let a = s.mean_alpha;
                let _ = writeln!(
                    text,
                    "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                    s.session_id, s.n_queries, s.last_clicks, a[0], a[1], a[2], a[3]
                );
            }
            ctx.write(&a.out.join("attention_sessions.tsv"), &text)?;
        }
        if let (Some(p), Some(sg)) = (a.pool, a.suggestions) {
            let pool = CandidatePool::from_text(&ctx.read(p)?)?;
            let sugg: HashMap<String, Vec<String>> = ctx.suggestions(sg)?.into_iter().collect();
            let items: Vec<(String, Vec<String>)> = sessions
                .iter()
                .map(|s| {
                    (
                        s.last_query().unwrap_or("").to_string(),
                        sugg.get(&s.session_id).cloned().unwrap_or_default(),
                    )
                })
                .collect();
            let text = format!(
                "novelty_rate={:.6}\npool_coverage={:.6}\n",
                novelty_rate(&items, &pool),
                pool.coverage(sessions)
            );
            ctx.write(&a.out.join("novelty.txt"), &text)?;
        }
    }
    ctx.record_config(a.out)?;
    Ok(())
}

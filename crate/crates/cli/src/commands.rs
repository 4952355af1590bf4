use std::collections::BTreeMap;
use std::io::Write;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use ltrpo_core::backbone::{open_backbone, Embedder, EmbeddingCache};
use ltrpo_core::corpus::reverie::{import_reverie, ReverieOptions};
use ltrpo_core::corpus::synth::{synth_generate, SynthConfig};
use ltrpo_core::corpus::{dataset_stats, load_manifest, Dataset};
use ltrpo_core::features::{FeatureOptions, FeatureStore};
use ltrpo_core::metrics::{evaluate, reports_csv};
use ltrpo_core::phrases::{parser_by_name, DEFAULT_PARSER};
use ltrpo_core::ranker::checkpoint::{self, CheckpointMeta, CHECKPOINT_FORMAT};
use ltrpo_core::ranker::{Model, ModelConfig};
use ltrpo_core::train::{select_model, train, Control, Retention};
use ltrpo_core::Error;
use ltrpo_service::{
    http, index_environment, DispatchSink, LogSink, LoopbackSimulator, RankingService, Server, ServerConfig,
    Sessions,
};

use crate::config::{FileConfig, RunManifest};
use crate::{Cli, CliError, Command, EvalArgs, ModelFlags, RankArgs, ServeArgs, SynthArgs, TrainArgs};

struct Globals {
    file: FileConfig,
    backbone: String,
    cache_dir: Option<PathBuf>,
}

impl Globals {
    fn embedder(&self, dim: usize) -> Result<Embedder, CliError> {
        let backbone = open_backbone(&self.backbone, dim)?;
        if backbone.dim() != dim {
            return Err(Error::Shape(format!(
                "backbone {} produces {}-dim features but the model expects {dim}",
                backbone.id(),
                backbone.dim()
            ))
            .into());
        }
        let cache = self.cache_dir.clone().map(EmbeddingCache::new);
        Ok(Embedder::new(backbone, cache))
    }

    /// Checkpoint plus an embedder that matches the backbone it was trained on.
    fn load_checkpoint(&self, path: &Path) -> Result<(Model<f32>, CheckpointMeta, Embedder), CliError> {
        let (model, meta) = checkpoint::load(path)?;
        let embedder = self.embedder(meta.config.hidden)?;
        let active = embedder.backbone().id();
        if active != meta.backbone_id {
            return Err(Error::Checkpoint(format!(
                "{} was trained on backbone {} but {active} is active",
                path.display(),
                meta.backbone_id
            ))
            .into());
        }
        Ok((model, meta, embedder))
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let backbone = cli.backbone.or_else(|| file.backbone.name.clone()).unwrap_or_else(|| "stub".into());
    let cache_dir = cli.cache_dir.or_else(|| file.backbone.cache_dir.clone());
    let g = Globals { file, backbone, cache_dir };
    match cli.command {
        Command::Import(a) => {
            let opts = ReverieOptions { n_c: a.n_c, val_envs: a.val_envs };
            let ds = import_reverie(&a.source, &a.out, &opts)?;
            print_json(&dataset_stats(&ds))?;
            RunManifest::new("import", None, BTreeMap::from([("n_c", a.n_c), ("val_envs", a.val_envs)]))
                .input("source", &a.source)
                .output("manifest", &a.out.join("manifest.json"))
                .write(&a.out)?;
            Ok(())
        }
        Command::Synth(a) => synth(&g, a),
        Command::Train(a) => train_cmd(&g, a),
        Command::Eval(a) => eval(&g, a),
        Command::Rank(a) => rank(&g, a),
        Command::Serve(a) => serve(&g, a),
        Command::Stats(a) => {
            let ds = load_manifest(&a.manifest)?;
            print_json(&dataset_stats(&ds))
        }
    }
}

/// Writes to stdout. A reader that closed the pipe early is not an error.
fn emit(text: &str) -> Result<(), CliError> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Io(e.to_string())),
        _ => Ok(()),
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<(), CliError> {
    emit(&(serde_json::to_string_pretty(v).expect("serializes") + "\n"))
}

fn synth(g: &Globals, a: SynthArgs) -> Result<(), CliError> {
    let mut cfg: SynthConfig = g.file.synth.clone();
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.environments, a.environments);
    set(&mut cfg.candidates_per_env, a.candidates_per_env);
    set(&mut cfg.group_size, a.group_size);
    set(&mut cfg.n_c, a.n_c);
    set(&mut cfg.samples_per_candidate, a.samples_per_candidate);
    set(&mut cfg.val_envs, a.val_envs);
    set(&mut cfg.test_envs, a.test_envs);
    let ds = synth_generate(&cfg, a.seed, &a.out)?;
    let stats = dataset_stats(&ds);
    println!(
        "wrote {} environments, {} candidates, {} samples to {}",
        stats.environments,
        stats.candidates,
        stats.samples,
        a.out.display()
    );
    RunManifest::new("synth", Some(a.seed), &cfg).output("manifest", &a.out.join("manifest.json")).write(&a.out)?;
    Ok(())
}

fn model_config(base: &ModelConfig, f: &ModelFlags) -> Result<ModelConfig, CliError> {
    let mut c = base.clone();
    macro_rules! over {
        ($($field:ident),*) => { $( if let Some(v) = f.$field { c.$field = v; } )* };
    }
    over!(l_inst, l_img, heads, hidden, ff, n_p_max, temperature);
    if let Some(v) = &f.variant {
        c.variant = v.parse()?;
    }
    Ok(c)
}

fn retention(s: &str) -> Result<Retention, CliError> {
    match s {
        "all" => Ok(Retention::All),
        "best_and_last" => Ok(Retention::BestAndLast),
        "none" => Ok(Retention::None),
        other => Err(CliError::Usage(format!("--checkpoints must be all, best_and_last or none, got {other:?}"))),
    }
}

fn train_cmd(g: &Globals, a: TrainArgs) -> Result<(), CliError> {
    let ds = load_manifest(&a.manifest)?;
    let mut mc = model_config(&g.file.model, &a.model)?;
    mc.n_c = ds.n_c();
    mc.validate()?;
    let mut tc = g.file.train.clone();
    if let Some(v) = a.batch {
        tc.batch = Some(v);
    }
    if let Some(v) = a.lr {
        tc.lr = v;
    }
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    tc.checkpoints = retention(&a.checkpoints)?;
    tc.validate()?;

    let embedder = g.embedder(mc.hidden)?;
    let mut parser = parser_by_name(DEFAULT_PARSER)?;
    let store = FeatureStore::build(&ds, &embedder, parser.as_mut(), &FeatureOptions::for_model(&mc))?;
    let run = train(&tc, &mc, &ds, &store, Some(&a.out), |r, _| {
        match &r.val {
            Some(v) => println!(
                "epoch {:>3}  loss {:.5}  val MRR {:.4}  R@1 {:.4}  R@5 {:.4}  R@10 {:.4}  R@20 {:.4}",
                r.epoch, r.loss, v.mrr, v.r1, v.r5, v.r10, v.r20
            ),
            None => println!("epoch {:>3}  loss {:.5}", r.epoch, r.loss),
        }
        Control::Continue
    })?;

    let chosen = select_model(&run.records).unwrap_or_else(|_| run.records.last().expect("at least one epoch"));
    let best = a.out.join("best.ckpt");
    match &chosen.checkpoint {
        Some(p) => {
            std::fs::copy(p, &best).map_err(|e| CliError::Io(format!("{}: {e}", best.display())))?;
        }
        None => {
            let meta = CheckpointMeta {
                format_version: CHECKPOINT_FORMAT,
                config: mc.clone(),
                epoch: run.records.len(),
                val: run.records.last().and_then(|r| r.val.clone()),
                seed: tc.seed,
                backbone_id: store.backbone_id.clone(),
                parameters: run.model.parameter_count(),
            };
            checkpoint::save(&best, &run.model, &meta)?;
        }
    }
    println!("selected epoch {} -> {}", chosen.epoch, best.display());
    #[derive(serde::Serialize)]
    struct Snapshot<'a> {
        backbone: &'a str,
        model: &'a ModelConfig,
        train: &'a ltrpo_core::train::TrainConfig,
        selected_epoch: usize,
    }
    let snap = Snapshot { backbone: &g.backbone, model: &mc, train: &tc, selected_epoch: chosen.epoch };
    RunManifest::new("train", Some(tc.seed), snap)
        .input("manifest", &a.manifest)
        .output("best", &best)
        .output("metrics", &a.out.join("metrics.jsonl"))
        .write(&a.out)?;
    Ok(())
}

fn eval(g: &Globals, a: EvalArgs) -> Result<(), CliError> {
    let ds = load_manifest(&a.manifest)?;
    let (model, meta, embedder) = g.load_checkpoint(&a.checkpoint)?;
    let mut parser = parser_by_name(DEFAULT_PARSER)?;
    let store = FeatureStore::build(&ds, &embedder, parser.as_mut(), &FeatureOptions::for_model(&model.config))?;
    let report = evaluate(&model, &store, &ds, &a.split)?;
    emit(&report.to_text())?;
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        let write = |name: &str, text: String| {
            let p = out.join(name);
            std::fs::write(&p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
        };
        write("report.json", json + "\n")?;
        write("report.csv", reports_csv(std::slice::from_ref(&report)))?;
        RunManifest::new("eval", Some(meta.seed), BTreeMap::from([("split", a.split.clone())]))
            .input("manifest", &a.manifest)
            .input("checkpoint", &a.checkpoint)
            .output("report", &out.join("report.json"))
            .write(out)?;
    }
    Ok(())
}

fn rank(g: &Globals, a: RankArgs) -> Result<(), CliError> {
    let ds = Arc::new(load_manifest(&a.manifest)?);
    let (model, _, embedder) = g.load_checkpoint(&a.checkpoint)?;
    let idx = index_environment(a.index_dir.as_deref(), &a.env, &ds, &embedder, &model)?;
    let indexes = BTreeMap::from([(a.env.clone(), idx)]);
    let svc = RankingService::with_indexes(ds, model, embedder, parser_by_name(DEFAULT_PARSER)?, indexes)?;
    let list = svc.query(&a.instruction, &a.env, a.top_k)?;
    let mut table = format!("{:<5} {:<24} {:>8}\n", "rank", "candidate", "score");
    for (i, it) in list.items.iter().enumerate() {
        table += &format!("{:<5} {:<24} {:>8.4}\n", i + 1, it.candidate_id, it.score);
    }
    emit(&table)
}

fn serve(g: &Globals, a: ServeArgs) -> Result<(), CliError> {
    let s = &g.file.serve;
    let ds: Arc<Dataset> = Arc::new(load_manifest(&a.manifest)?);
    let (model, _, embedder) = g.load_checkpoint(&a.checkpoint)?;
    let index_dir = a.index_dir.clone().or_else(|| s.index_dir.clone());
    let svc = RankingService::new(ds, model, embedder, parser_by_name(DEFAULT_PARSER)?, index_dir.as_deref())?;
    let sink: Arc<dyn DispatchSink> = match a.sink.as_deref().unwrap_or(&s.sink) {
        "loopback" => Arc::new(LoopbackSimulator::new()),
        "log" => {
            let path = a
                .pick_log
                .clone()
                .or_else(|| s.pick_log.clone())
                .ok_or_else(|| CliError::Usage("the log sink needs --pick-log".into()))?;
            Arc::new(LogSink::open(&path)?)
        }
        other => return Err(CliError::Usage(format!("unknown sink {other:?} (expected log or loopback)"))),
    };
    let config = ServerConfig {
        default_top_k: s.top_k,
        session_ttl: Duration::from_secs(s.session_ttl_secs),
        depth_range: ltrpo_service::DepthRange { min_m: s.depth_min_m, max_m: s.depth_max_m },
        ..ServerConfig::default()
    };
    let mut sessions = Sessions::new(config.session_ttl);
    if let Some(p) = a.event_log.as_ref().or(s.event_log.as_ref()) {
        sessions = sessions.with_event_log(p)?;
    }
    let server = Arc::new(Server::new(Arc::new(svc), sink, config).with_sessions(sessions));
    let host = a.host.clone().unwrap_or_else(|| s.host.clone());
    let port = a.port.unwrap_or(s.port);
    let addr: SocketAddr = (host.as_str(), port)
        .to_socket_addrs()
        .ok()
        .and_then(|mut it| it.next())
        .ok_or_else(|| CliError::Usage(format!("cannot resolve {host}:{port}")))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Io(e.to_string()))?;
    rt.block_on(http::serve(server, addr)).map_err(|e| CliError::Io(e.to_string()))
}

use std::fmt::Write as _;
use std::path::PathBuf;

use serde_json::json;
use vlmlab_core::dataset::{pretraining_corpus, Sample, TaskKind};
use vlmlab_core::decoding::{
    cv_csv, decode_sweep, generate_batch, output_references, reference_outputs, sweep_csv, DecodeConfig,
    SweepOptions,
};
use vlmlab_core::distill::{recovery_curve, recovery_csv, write_adapters, DistillConfig, DistillObjective};
use vlmlab_core::eval_metrics::{fnv1a, parse_reasoning_chain, score_chain, ChainPart, Reference, TextMetric};
use vlmlab_core::flops::{costs_csv, flops_report, frontier_csv, frontier_report};
use vlmlab_core::intervention::{depth_csv, depth_sweep, gap_csv, substitution_csv, substitution_grid, GridOptions, ResumePolicy};
use vlmlab_core::model::train::{pretrain, PretrainConfig};
use vlmlab_core::model::{write_checkpoint, Modality, Model, TokenSequence};
use vlmlab_core::par::Parallelism;
use vlmlab_core::report::{report_bundle, summary_json, Manifest};
use vlmlab_core::repr_metrics::{aggregate_profiles, geometry_profile_with, profile_csv, GeometryProfile, ProfilePair};
use vlmlab_core::trace_io::{decode_trace, encode_trace};
use vlmlab_core::{LabError, Result as LabResult};

use crate::inputs::{dataset, load_model, parse_cuts, parse_scores, parse_strategies, parse_task, read_input, LoadedModel};
use crate::{Command, Common, Failure, Workload};

type Outcome<T = ()> = Result<T, Failure>;

/// Artifacts of one invocation. The manifest is written incomplete before
/// any work and rewritten as complete only after every artifact is on disk.
struct Run {
    dir: PathBuf,
    manifest: Manifest,
}

impl Run {
    fn start(common: &Common, command: &str, hash: String) -> Outcome<Self> {
        std::fs::create_dir_all(&common.out).map_err(|e| Failure::Output(LabError::Io {
            path: common.out.clone(),
            source: e,
        }))?;
        let mut manifest = Manifest::new(command, common.seed, hash);
        manifest.jobs = common.jobs;
        let run = Self {
            dir: common.out.clone(),
            manifest,
        };
        run.manifest.write(&run.dir).map_err(Failure::Output)?;
        Ok(run)
    }

    fn param(&mut self, key: &str, value: impl serde::Serialize) {
        let m = std::mem::replace(&mut self.manifest, Manifest::new("", 0, ""));
        self.manifest = m.param(key, value);
    }

    fn metric(&mut self, key: impl Into<String>, v: f64) {
        self.manifest.metrics.insert(key.into(), v);
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Outcome {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Failure::Output(LabError::Io { path, source: e }))?;
        self.manifest.artifacts.push(name.to_string());
        Ok(())
    }

    fn finish(mut self) -> Outcome {
        self.manifest.complete = true;
        self.manifest.write(&self.dir).map_err(Failure::Output)
    }
}

fn mode(common: &Common) -> Outcome<Parallelism> {
    match common.jobs {
        Some(0) => Err(Failure::Usage("--jobs must be at least 1".into())),
        Some(1) => Ok(Parallelism::Sequential),
        Some(n) => {
            #[cfg(feature = "parallel")]
            if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
                log::warn!("thread pool already initialised; --jobs {n} ignored");
            }
            #[cfg(not(feature = "parallel"))]
            log::warn!("built without parallel support; --jobs {n} ignored");
            Ok(Parallelism::Rayon)
        }
        None => Ok(Parallelism::Rayon),
    }
}

fn metric(s: &str) -> Outcome<TextMetric> {
    Ok(s.parse::<TextMetric>()?)
}

fn sequences(model: &Model, samples: &[Sample]) -> Outcome<Vec<TokenSequence>> {
    Ok(samples
        .iter()
        .map(|s| s.sequence(model.config()))
        .collect::<LabResult<Vec<_>>>()?)
}

struct Prepared {
    loaded: LoadedModel,
    task: TaskKind,
    samples: Vec<Sample>,
    prompts: Vec<TokenSequence>,
    max_new: usize,
}

fn prepare(common: &Common, w: &Workload, default_task: &str, default_n: usize, default_max_new: usize) -> Outcome<Prepared> {
    let loaded = load_model(&w.model)?;
    let task = parse_task(w.task.as_deref().unwrap_or(default_task))?;
    let samples = dataset(&loaded.model, task, w.samples.unwrap_or(default_n), common.seed)?;
    let prompts = sequences(&loaded.model, &samples)?;
    Ok(Prepared {
        loaded,
        task,
        samples,
        prompts,
        max_new: w.max_new.unwrap_or(default_max_new),
    })
}

pub fn run(common: &Common, command: Command) -> Outcome {
    let mode = mode(common)?;
    match command {
        Command::Geometry {
            model,
            trace,
            task,
            samples,
            dump_trace,
        } => geometry(common, mode, model, trace, &task, samples, dump_trace),
        Command::Substitute { w, metric: m, policy } => {
            let p = prepare(common, &w, "caption", 4, 24)?;
            let policy = match policy.as_str() {
                "deeper" => ResumePolicy::Deeper,
                "receiver" => ResumePolicy::Receiver,
                other => return Err(Failure::Usage(format!("unknown policy {other:?}"))),
            };
            let opts = GridOptions {
                metric: metric(&m)?,
                max_new_tokens: p.max_new,
                policy,
                mode,
            };
            let mut run = Run::start(common, "substitute", p.loaded.hash.clone())?;
            run.param("task", p.task);
            run.param("samples", p.prompts.len());
            run.param("grid", opts.metric);
            run.param("policy", policy);
            let grid = substitution_grid(&p.loaded.model, &p.prompts, &opts)?;
            for (g, i, t) in grid.gap_curves() {
                run.metric(format!("image_gap{g}"), i);
                run.metric(format!("text_gap{g}"), t);
            }
            run.write("substitution.csv", substitution_csv(&grid))?;
            run.write("gap.csv", gap_csv(&grid))?;
            run.finish()
        }
        Command::Truncate { w, cuts, metrics, against } => {
            let p = prepare(common, &w, "mcq", 16, 24)?;
            let model = &p.loaded.model;
            let cuts = parse_cuts(&cuts, model.layers())?;
            let metrics = match metrics {
                Some(m) => TextMetric::parse_list(&m)?,
                None => p.task.default_metrics(),
            };
            let refs: Vec<Reference> = match against.as_str() {
                "gold" => p.samples.iter().map(|s| s.reference.clone()).collect(),
                "base" => {
                    let outs = reference_outputs(model, &p.prompts, p.max_new, mode)?;
                    if metrics.contains(&TextMetric::IndexAnswer) {
                        output_references(&outs, TextMetric::IndexAnswer)
                    } else {
                        outs.into_iter().map(Reference::text).collect()
                    }
                }
                other => return Err(Failure::Usage(format!("--against must be gold or base, got {other:?}"))),
            };
            let mut run = Run::start(common, "truncate", p.loaded.hash.clone())?;
            run.param("task", p.task);
            run.param("cuts", &cuts);
            run.param("against", &against);
            let table = depth_sweep(model, &p.prompts, &refs, &cuts, &metrics, p.max_new, mode)?;
            for r in &table.rows {
                for (m, v) in table.metrics.iter().zip(&r.scores) {
                    run.metric(format!("{m}@K{}", r.cut), *v);
                }
            }
            let mut outputs = String::new();
            for (r, outs) in table.rows.iter().zip(&table.outputs) {
                for (i, o) in outs.iter().enumerate() {
                    let _ = writeln!(outputs, "{}", json!({"l_c": r.cut, "sample": i, "output": o}));
                }
            }
            run.write("depth.csv", depth_csv(&table))?;
            run.write("outputs.jsonl", outputs)?;
            run.finish()
        }
        Command::DecodeSweep {
            w,
            strategies,
            cuts,
            metric: m,
        } => {
            let p = prepare(common, &w, "caption", 8, 24)?;
            let model = &p.loaded.model;
            let cuts = parse_cuts(&cuts, model.layers())?;
            let metric = metric(&m)?;
            let strategies: Vec<DecodeConfig> = parse_strategies(&strategies)?
                .into_iter()
                .map(|s| DecodeConfig::new(s, p.max_new, common.seed))
                .collect();
            let mut run = Run::start(common, "decode-sweep", p.loaded.hash.clone())?;
            run.param("task", p.task);
            run.param("cuts", &cuts);
            run.param("strategies", strategies.iter().map(|c| c.strategy.to_string()).collect::<Vec<_>>());
            let refs = output_references(&reference_outputs(model, &p.prompts, p.max_new, mode)?, metric);
            let opts = SweepOptions {
                metric,
                mode,
                adapters: None,
            };
            let table = decode_sweep(model, &p.prompts, &refs, &cuts, &strategies, &opts)?;
            for c in &table.cells {
                run.metric(format!("{}@K{}", c.strategy, c.cut), c.score);
            }
            let cvs = table.cv()?;
            for (cut, r) in &cvs {
                if let Some(cv) = r.cv {
                    run.metric(format!("cv@K{cut}"), cv);
                }
            }
            run.write("sweep.csv", sweep_csv(&table))?;
            run.write("cv.csv", cv_csv(&cvs))?;
            run.finish()
        }
        Command::Distill {
            w,
            cuts,
            steps,
            rank,
            alpha,
            lr,
            eval_samples,
            metric: m,
            objective,
        } => {
            let p = prepare(common, &w, "caption", 16, 16)?;
            let model = &p.loaded.model;
            let cuts = parse_cuts(&cuts, model.layers())?;
            let eval = sequences(model, &dataset(model, p.task, eval_samples, common.seed ^ 0x5eed)?)?;
            let cfg = DistillConfig {
                rank,
                alpha,
                lr,
                steps,
                batch_size: p.prompts.len(),
                max_new_tokens: p.max_new,
                seed: common.seed,
                objective: match objective.as_str() {
                    "hard" => DistillObjective::Hard,
                    "soft" => DistillObjective::Soft,
                    other => return Err(Failure::Usage(format!("--objective must be hard or soft, got {other:?}"))),
                },
            };
            let mut run = Run::start(common, "distill", p.loaded.hash.clone())?;
            run.param("task", p.task);
            run.param("cuts", &cuts);
            run.param("distill", &cfg);
            let res = recovery_curve(model, &p.prompts, &eval, &cuts, metric(&m)?, &cfg, mode)?;
            for pt in &res.curve.points {
                run.metric(format!("pre@K{}", pt.cut), pt.pre);
                run.metric(format!("post@K{}", pt.cut), pt.post);
                run.metric(format!("loss0@K{}", pt.cut), pt.initial_loss);
                run.metric(format!("loss@K{}", pt.cut), pt.final_loss);
            }
            run.write("recovery.csv", recovery_csv(&res.curve))?;
            for a in &res.adapters {
                let name = format!("adapters_K{}.adpt", a.cut());
                let path = run.dir.join(&name);
                write_adapters(a, &path).map_err(Failure::Output)?;
                run.manifest.artifacts.push(name);
            }
            run.finish()
        }
        Command::Flops {
            model,
            cuts,
            decode_steps,
            text_tokens,
            task,
            rank,
            with_scores,
        } => {
            let loaded = load_model(&model)?;
            let cfg = loaded.model.config();
            let cuts = parse_cuts(&cuts, cfg.layers)?;
            let n_txt = match text_tokens {
                Some(n) => n,
                None => dataset(&loaded.model, parse_task(&task)?, 1, common.seed)?[0]
                    .sequence(cfg)?
                    .text_indices()
                    .len(),
            };
            let n_full = cfg.image_tokens + n_txt;
            let scores = with_scores
                .as_deref()
                .map(|p| {
                    let bytes = read_input(p)?;
                    parse_scores(&String::from_utf8_lossy(&bytes))
                })
                .transpose()?;
            let mut run = Run::start(common, "flops", loaded.hash.clone())?;
            run.param("cuts", &cuts);
            run.param("n_full", n_full);
            run.param("n_txt", n_txt);
            run.param("decode_steps", decode_steps);
            run.param("adapter_rank", rank);
            let reports = cuts
                .iter()
                .map(|&c| flops_report(cfg, n_full, n_txt, c, decode_steps, rank))
                .collect::<LabResult<Vec<_>>>()?;
            for r in &reports {
                run.metric(format!("prefill@K{}", r.cut), r.prefill as f64);
                run.metric(format!("decode@K{}", r.cut), r.decode as f64);
            }
            run.write("flops.csv", costs_csv(&reports))?;
            if let Some(scores) = scores {
                let scores: Vec<_> = scores.into_iter().filter(|s| cuts.contains(&s.cut)).collect();
                let costs: Vec<_> = reports
                    .iter()
                    .filter(|r| scores.iter().any(|s| s.cut == r.cut))
                    .cloned()
                    .collect();
                run.write("frontier.csv", frontier_csv(&frontier_report(&scores, &costs)?))?;
            }
            run.finish()
        }
        Command::ChainEval { w, cuts } => {
            let mut w = w;
            w.task.get_or_insert_with(|| "chain".into());
            let p = prepare(common, &w, "chain", 8, 160)?;
            let model = &p.loaded.model;
            let cuts = parse_cuts(&cuts, model.layers())?;
            let mut run = Run::start(common, "chain-eval", p.loaded.hash.clone())?;
            run.param("cuts", &cuts);
            let refs: Vec<_> = p.samples.iter().map(|s| parse_reasoning_chain(&s.target)).collect();
            let mut csv = String::from("K,component,metric,value,present\n");
            let greedy = DecodeConfig::greedy(p.max_new);
            for &cut in &cuts {
                let outs = generate_batch(model, &p.prompts, Some(cut), &greedy, None, mode)?;
                let mut sums: Vec<(ChainPart, String, f64, f64)> = Vec::new();
                let mut well_formed = 0.0;
                for (g, r) in outs.iter().zip(&refs) {
                    let pred = parse_reasoning_chain(&g.text);
                    well_formed += f64::from(u8::from(pred.well_formed));
                    for (part, comp) in score_chain(&pred, r)? {
                        for s in &comp.scores {
                            let present = f64::from(u8::from(comp.present));
                            match sums.iter_mut().find(|e| e.0 == part && e.1 == s.metric) {
                                Some(e) => {
                                    e.2 += s.value;
                                    e.3 += present;
                                }
                                None => sums.push((part, s.metric.clone(), s.value, present)),
                            }
                        }
                    }
                }
                let n = outs.len() as f64;
                for (part, m, v, present) in sums {
                    let _ = writeln!(csv, "{cut},{part},{m},{},{}", v / n, present / n);
                    run.metric(format!("{part}.{m}@K{cut}"), v / n);
                }
                run.metric(format!("well_formed@K{cut}"), well_formed / n);
            }
            run.write("chain.csv", csv)?;
            run.finish()
        }
        Command::Pretrain {
            model,
            steps,
            batch,
            lr,
            per_task,
        } => {
            let loaded = load_model(&model)?;
            let cfg = PretrainConfig {
                steps,
                batch_size: batch,
                lr,
                seed: common.seed,
            };
            let mut run = Run::start(common, "pretrain", loaded.hash.clone())?;
            run.param("pretrain", &cfg);
            let corpus = pretraining_corpus(loaded.model.config(), per_task, common.seed)?;
            let (trained, losses) = pretrain(&loaded.model, &corpus, &cfg, mode)?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in losses.iter().enumerate() {
                let _ = writeln!(csv, "{i},{l}");
            }
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                run.metric("initial_loss", *first);
                run.metric("final_loss", *last);
            }
            let path = run.dir.join("model.tvlm");
            write_checkpoint(&trained, &path).map_err(Failure::Output)?;
            run.manifest.artifacts.push("model.tvlm".into());
            run.write("loss.csv", csv)?;
            run.finish()
        }
        Command::Bundle { runs } => {
            let manifests = runs
                .iter()
                .map(|d| {
                    read_input(&d.join(vlmlab_core::report::MANIFEST_FILE))?;
                    Ok(Manifest::read(d)?)
                })
                .collect::<Outcome<Vec<_>>>()?;
            let summary = report_bundle(&manifests)?;
            let hash = format!(
                "{:016x}",
                fnv1a(manifests.iter().map(|m| m.config_hash.as_str()).collect::<Vec<_>>().join(",").as_bytes())
            );
            let mut run = Run::start(common, "bundle", hash)?;
            run.param("runs", runs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>());
            run.write("summary.json", summary_json(&summary)? + "\n")?;
            run.finish()
        }
    }
}

fn mean_profile(profiles: &[&GeometryProfile]) -> LabResult<GeometryProfile> {
    let agg = aggregate_profiles(profiles)?;
    let first = profiles[0];
    let mut flags: Vec<String> = profiles.iter().flat_map(|p| p.flags.iter().cloned()).collect();
    flags.sort();
    flags.dedup();
    Ok(GeometryProfile {
        modality: agg.modality,
        entropy: agg.entropy.mean,
        eff_rank: agg.eff_rank.mean,
        intrinsic_dim: agg.intrinsic_dim.mean,
        curvature: agg.curvature.mean,
        n_tokens: first.n_tokens.clone(),
        flags,
    })
}

fn geometry(
    common: &Common,
    mode: Parallelism,
    model: Option<PathBuf>,
    trace: Option<PathBuf>,
    task: &str,
    samples: usize,
    dump_trace: bool,
) -> Outcome {
    let (pairs, hash, dump): (Vec<ProfilePair>, String, Option<Vec<u8>>) = match (model, trace) {
        (_, Some(t)) => {
            let bytes = read_input(&t)?;
            let tr = decode_trace(&bytes)?;
            let hash = format!("{:016x}", fnv1a(&bytes));
            (vec![geometry_profile_with(&tr.states, mode)], hash, None)
        }
        (Some(m), None) => {
            let loaded = load_model(&m)?;
            let data = dataset(&loaded.model, parse_task(task)?, samples, common.seed)?;
            let mut pairs = Vec::with_capacity(data.len());
            let mut dump = None;
            for (i, s) in data.iter().enumerate() {
                let seq = s.sequence(loaded.model.config())?;
                let (_, states) = loaded.model.forward_capture(&seq)?;
                if i == 0 && dump_trace {
                    let meta = json!({"source": "vlmlab", "config_hash": loaded.hash, "sample": s.id});
                    dump = Some(encode_trace(&states, &seq, Some(&meta))?);
                }
                pairs.push(geometry_profile_with(&states, mode));
            }
            (pairs, loaded.hash, dump)
        }
        (None, None) => return Err(Failure::Usage("geometry needs --model or --trace".into())),
    };
    let mut run = Run::start(common, "geometry", hash)?;
    run.param("samples", pairs.len());
    let mut profiles = Vec::new();
    for m in [Modality::Image, Modality::Text] {
        let ps: Vec<&GeometryProfile> = pairs.iter().filter_map(|p| p.get(m)).collect();
        if !ps.is_empty() {
            profiles.push(mean_profile(&ps)?);
        }
    }
    let mut flags: Vec<String> = pairs.iter().flat_map(|p| p.flags.iter().cloned()).collect();
    flags.extend(profiles.iter().flat_map(|p| p.flags.iter().cloned()));
    flags.sort();
    flags.dedup();
    run.param("flags", &flags);
    for p in &profiles {
        for l in 0..p.layers() {
            if let Some(v) = p.eff_rank[l] {
                run.metric(format!("{}.eff_rank@{l}", p.modality.as_str()), v);
            }
        }
    }
    run.write("profile.csv", profile_csv(&profiles))?;
    if let Some(bytes) = dump {
        run.write("trace.hsd", bytes)?;
    }
    run.finish()
}

use std::collections::BTreeMap;
use std::path::Path;

use vlmlab_core::dataset::{make_dataset, Sample, TaskKind};
use vlmlab_core::decoding::Strategy;
use vlmlab_core::eval_metrics::fnv1a;
use vlmlab_core::flops::DepthScore;
use vlmlab_core::model::{read_checkpoint, Model, ModelConfig};
use vlmlab_core::LabError;

use crate::Failure;

pub fn read_input(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Failure::MissingInput(path.to_path_buf()),
        _ => Failure::Lab(LabError::Io {
            path: path.to_path_buf(),
            source: e,
        }),
    })
}

/// A model plus the hash recorded in manifests.
pub struct LoadedModel {
    pub model: Model,
    pub hash: String,
}

/// `.tvlm` files are checkpoints; anything else is a JSON configuration.
pub fn load_model(path: &Path) -> Result<LoadedModel, Failure> {
    let bytes = read_input(path)?;
    if path.extension().is_some_and(|e| e == "tvlm") {
        let model = read_checkpoint(path)?;
        return Ok(LoadedModel {
            model,
            hash: format!("{:016x}", fnv1a(&bytes)),
        });
    }
    let cfg: ModelConfig = serde_json::from_slice(&bytes)
        .map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
    Ok(LoadedModel {
        hash: cfg.config_hash(),
        model: Model::build(cfg)?,
    })
}

/// `all`, `a..b` (inclusive), `a..=b` or `a,b,c`; `L` stands for the depth.
pub fn parse_cuts(spec: &str, depth: usize) -> Result<Vec<usize>, Failure> {
    let num = |s: &str| -> Result<usize, Failure> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("l") {
            return Ok(depth);
        }
        s.parse()
            .map_err(|_| Failure::Usage(format!("bad cut {s:?} in {spec:?}")))
    };
    let spec_t = spec.trim();
    let mut cuts = if spec_t.eq_ignore_ascii_case("all") {
        (0..=depth).collect()
    } else if let Some((a, b)) = spec_t.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        if a > b {
            return Err(Failure::Usage(format!("empty cut range {spec:?}")));
        }
        (a..=b).collect()
    } else {
        spec_t.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    };
    cuts.sort_unstable();
    cuts.dedup();
    if let Some(&c) = cuts.iter().find(|&&c| c > depth) {
        return Err(Failure::Lab(LabError::Argument(format!(
            "cut {c} exceeds model depth {depth}"
        ))));
    }
    Ok(cuts)
}

/// Strategy list; bare names take default parameters.
pub fn parse_strategies(spec: &str) -> Result<Vec<Strategy>, Failure> {
    spec.split(',')
        .map(|s| {
            let s = s.trim();
            let full = match s {
                "beam" => "beam:3",
                "nucleus" | "top-p" => "nucleus:0.9",
                "topk" | "top-k" => "topk:5",
                "temp" | "temperature" => "temp:0.7",
                other => other,
            };
            Ok(full.parse::<Strategy>()?)
        })
        .collect()
}

pub fn parse_task(s: &str) -> Result<TaskKind, Failure> {
    Ok(s.parse::<TaskKind>()?)
}

pub fn dataset(model: &Model, task: TaskKind, n: usize, seed: u64) -> Result<Vec<Sample>, Failure> {
    Ok(make_dataset(model.config(), task, n, seed)?)
}

/// Scores per cut from a depth (`l_c,metric,value`), sweep
/// (`K,strategy,params,score`) or recovery (`K,pre,post,...`) CSV. The first
/// row seen for a cut wins.
pub fn parse_scores(text: &str) -> Result<Vec<DepthScore>, Failure> {
    let bad = |m: String| Failure::Lab(LabError::Data(m));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| bad("score file is empty".into()))?
        .split(',')
        .map(str::trim)
        .collect();
    let col = |names: &[&str]| header.iter().position(|h| names.contains(h));
    let k = col(&["K", "l_c"]).ok_or_else(|| bad("score file lacks a K or l_c column".into()))?;
    let (base, ft) = match (col(&["pre"]), col(&["post"])) {
        (Some(p), Some(q)) => (p, Some(q)),
        _ => (
            col(&["score", "value"]).ok_or_else(|| bad("score file lacks a score column".into()))?,
            None,
        ),
    };
    let mut out: BTreeMap<usize, DepthScore> = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let get = |c: usize| -> Result<&str, Failure> {
            f.get(c).copied().ok_or_else(|| bad(format!("row {} is short", i + 2)))
        };
        let num = |c: usize| -> Result<f64, Failure> {
            get(c)?.parse().map_err(|_| bad(format!("row {} has a bad number", i + 2)))
        };
        let cut: usize = get(k)?.parse().map_err(|_| bad(format!("row {} has a bad cut", i + 2)))?;
        if out.contains_key(&cut) {
            continue;
        }
        out.insert(
            cut,
            DepthScore {
                cut,
                base: num(base)?,
                finetuned: ft.map(num).transpose()?,
            },
        );
    }
    Ok(out.into_values().collect())
}

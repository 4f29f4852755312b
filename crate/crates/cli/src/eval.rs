use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use neurodistill::config::RunConfig;
use neurodistill::experiment::{self, Model32};
use neurodistill::metrics::{linear_cka, random_baseline, retrieval};
use neurodistill::training::SessionData;
use neurodistill::Error;

use crate::commands::{load_model, load_sessions, select};
use crate::Common;

struct Entry {
    name: String,
    path: PathBuf,
    model: Model32,
}

fn parse_models(specs: &[String]) -> Result<Vec<Entry>> {
    specs
        .iter()
        .map(|s| {
            let (name, path) = s
                .split_once('=')
                .filter(|(n, p)| !n.is_empty() && !p.is_empty())
                .ok_or_else(|| Error::Usage(format!("--model expects NAME=PATH, got `{s}`")))?;
            let path = PathBuf::from(path);
            let model = load_model(&path).with_context(|| format!("loading model {name}"))?;
            Ok(Entry {
                name: name.to_string(),
                path,
                model,
            })
        })
        .collect()
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

fn dump_reps(dir: &Path, name: &str, session: &str, reps: &[Vec<f64>], d: usize) -> Result<()> {
    let dir = dir.join(name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let rows: usize = reps.iter().map(|r| r.len() / d).sum();
    let mut bytes = Vec::with_capacity(rows * d * 4);
    for v in reps.iter().flatten() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let bin = dir.join(format!("{session}.f32"));
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let meta = serde_json::json!({ "rows": rows, "d": d, "sequences": reps.len(), "dtype": "f32-le" });
    let p = dir.join(format!("{session}.json"));
    write(&p, &serde_json::to_string_pretty(&meta)?)
}

/// Reports written to `--out`:
/// `r2.tsv`, `r2_summary.tsv`, `retrieval.tsv`, `cka.tsv`,
/// `random_baseline.tsv` and `representations/`.
pub fn eval(
    common: &Common,
    data: &Path,
    specs: &[String],
    ids: &[String],
    reference: Option<&str>,
    zero_spikes: bool,
) -> Result<()> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = common.seed.unwrap_or(cfg.train.seed);
    let entries = parse_models(specs)?;
    if let Some(r) = reference {
        if !entries.iter().any(|e| e.name == r) {
            return Err(Error::Usage(format!("reference `{r}` is not among the --model names")).into());
        }
    }
    let all = load_sessions(data)?;
    let sessions: Vec<SessionData> = if ids.is_empty() {
        all.into_iter()
            .filter(|s| entries.iter().any(|e| e.model.has_session(s.id())))
            .collect()
    } else {
        select(all, ids)?
    };
    if sessions.is_empty() {
        return Err(Error::Data("no evaluated session is known to any model".into()).into());
    }
    if container_non_empty(common) && !common.force {
        return Err(Error::Usage(format!(
            "output directory {} is not empty; pass --force to overwrite",
            common.out.display()
        ))
        .into());
    }
    fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    let rep_dir = common.out.join("representations");

    let mut r2_tsv = String::from("model\tpath\tsession\tr2\n");
    let mut summary = String::from("model\tsession\tn\tmean_r2\tstd_r2\toracle_r2\n");
    let mut retr = String::from("query\tcandidate\tsession\tn\ttop1\ttop5\tmean_rank\tties\n");
    let mut cka = String::from("# linear CKA, HSIC(X,Y) / sqrt(HSIC(X,X) HSIC(Y,Y)) on centred per-timestep test representations\nlhs\trhs\tsession\trows\tcka\n");
    let mut base = String::from("session\tn\td\ttop1\ttop5\tmean_rank\tchance_mean_rank\tcka\n");

    for s in &sessions {
        let oracle = if s.seg.record.true_latents.is_some() {
            Some(experiment::oracle_r2(&cfg, s)?)
        } else {
            None
        };
        let mut by_name: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        // first checkpoint of each name is used for retrieval and CKA
        let mut reps: BTreeMap<&str, (Vec<Vec<f64>>, usize)> = BTreeMap::new();
        for e in &entries {
            if !e.model.has_session(s.id()) {
                continue;
            }
            let r = experiment::decode_model(&cfg, &e.model, s, zero_spikes)?;
            writeln!(r2_tsv, "{}\t{}\t{}\t{:.6}", e.name, e.path.display(), s.id(), r.r2)?;
            by_name.entry(&e.name).or_default().push(r.r2);
            if !reps.contains_key(e.name.as_str()) {
                let test = experiment::representations(&e.model, s, &s.seg.split.test, zero_spikes)?;
                dump_reps(&rep_dir, &e.name, s.id(), &test, e.model.d())?;
                reps.insert(&e.name, (test, e.model.d()));
            }
        }
        for (name, v) in &by_name {
            let (m, sd) = mean_std(v);
            let o = oracle.map_or("NA".to_string(), |o| format!("{o:.6}"));
            writeln!(summary, "{name}\t{}\t{}\t{m:.6}\t{sd:.6}\t{o}", s.id(), v.len())?;
        }

        let names: Vec<&str> = reps.keys().copied().collect();
        let pairs: Vec<(&str, &str)> = match reference {
            Some(r) if reps.contains_key(r) => names.iter().filter(|&&n| n != r).map(|&n| (n, r)).collect(),
            Some(r) => {
                warn!("reference {r} does not know session {}; skipping comparisons", s.id());
                Vec::new()
            }
            None => names
                .iter()
                .enumerate()
                .flat_map(|(i, &a)| names[i + 1..].iter().map(move |&b| (a, b)))
                .collect(),
        };
        for (q, c) in pairs {
            let (qr, dq) = &reps[q];
            let (cr, dc) = &reps[c];
            let n = qr.len();
            if dq == dc {
                let qm = experiment::sequence_means(qr, *dq)?;
                let cm = experiment::sequence_means(cr, *dc)?;
                let r = retrieval(&qm, &cm, n, *dq)?;
                writeln!(
                    retr,
                    "{q}\t{c}\t{}\t{}\t{:.6}\t{:.6}\t{:.4}\t{}",
                    s.id(),
                    r.n_sequences,
                    r.top1,
                    r.top5,
                    r.mean_rank,
                    r.ties
                )?;
            } else {
                warn!("{q} and {c} have different widths; retrieval skipped");
            }
            let x = qr.concat();
            let y = cr.concat();
            let rows = x.len() / dq;
            writeln!(cka, "{q}\t{c}\t{}\t{rows}\t{:.6}", s.id(), linear_cka(&x, &y, rows, *dq, *dc)?)?;
        }
        if let Some((r, d)) = reps.values().next() {
            let n = r.len();
            let mut rng = ChaCha8Rng::seed_from_u64(experiment::derive_seed(seed, &format!("baseline/{}", s.id())));
            let (rb, c) = random_baseline(n, *d, &mut rng)?;
            writeln!(
                base,
                "{}\t{n}\t{d}\t{:.6}\t{:.6}\t{:.4}\t{:.1}\t{:.6}",
                s.id(),
                rb.top1,
                rb.top5,
                rb.mean_rank,
                (n as f64 + 1.0) / 2.0,
                c
            )?;
        }
    }
    write(&common.out.join("r2.tsv"), &r2_tsv)?;
    write(&common.out.join("r2_summary.tsv"), &summary)?;
    write(&common.out.join("retrieval.tsv"), &retr)?;
    write(&common.out.join("cka.tsv"), &cka)?;
    write(&common.out.join("random_baseline.tsv"), &base)?;
    cfg.write_resolved(&common.out)?;
    info!("wrote evaluation reports to {}", common.out.display());
    Ok(())
}

fn container_non_empty(common: &Common) -> bool {
    neurodistill::container::is_non_empty_dir(&common.out)
}

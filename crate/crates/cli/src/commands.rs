use std::path::{Path, PathBuf};

use idflow::data::{gen_dataset, Dataset, GenerationSet, World};
use idflow::id_attention::FusionSpec;
use idflow::io::write_atomic;
use idflow::model::init_params;
use idflow::training::{
    fuse_checkpoints, generate_for_requests, losses_csv, search_fusion_coefficients, train_variant, Checkpoint, LossRecord,
    LossSummary, TrainConfig,
};
use idflow::{gradcheck as gc, Error};
use log::info;
use serde_json::json;

use crate::config::{dump_beside, RunConfig};
use crate::exit::{Failure, Outcome, CHECK_FAILED};
use crate::{EvalArgs, FuseArgs, GenDataArgs, GradcheckArgs, SampleArgs, TrainArgs};

const PROGRESS_EVERY: usize = 100;

fn required(flag: Option<PathBuf>, file: &Option<PathBuf>, what: &str) -> Outcome<PathBuf> {
    flag.or_else(|| file.clone())
        .ok_or_else(|| Failure::usage(format!("missing {what} (pass --{what} or set `{what}` in the config file)")))
}

fn load_dataset(path: &Path) -> Outcome<(Dataset<f64>, World<f64>)> {
    let ds = Dataset::<f64>::load(path)?;
    let world = World::new(ds.world.clone())?;
    Ok((ds, world))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Outcome<()> {
    let text = serde_json::to_string_pretty(value).expect("json values always encode");
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn create_dir(dir: &Path) -> Outcome<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

pub fn gen_data(a: GenDataArgs, cfg: RunConfig, seed: u64) -> Outcome<()> {
    let world = World::<f64>::for_model(&cfg.model)?;
    let ds = gen_dataset(&world, a.ids, a.per_id, seed)?;
    ds.save(&a.out)?;
    let summary = json!({
        "format_version": idflow::io::FORMAT_VERSION,
        "seed": seed,
        "world_seed": ds.world.seed,
        "num_ids": ds.num_ids(),
        "per_id": ds.per_id,
        "num_samples": ds.samples.len(),
        "train": ds.train.len(),
        "validation": ds.validation.len(),
    });
    write_json(&a.out.with_extension("json"), &summary)?;
    dump_beside(&cfg, &a.out)?;
    info!("wrote {} samples ({} identities) to {}", ds.samples.len(), ds.num_ids(), a.out.display());
    Ok(())
}

fn train_config(a: &TrainArgs, base: &TrainConfig, seed: u64) -> Outcome<TrainConfig> {
    let mut tc = base.clone();
    if let Some(tag) = &a.variant {
        let p = TrainConfig::preset(tag)?;
        tc.lambda = p.lambda;
        tc.alpha0 = p.alpha0;
        tc.variant_tag = p.variant_tag;
    }
    macro_rules! flag {
        ($($f:ident => $field:ident),*) => {$(if let Some(v) = a.$f { tc.$field = v; })*};
    }
    flag!(steps => total_steps, batch_size => batch_size, lambda => lambda, alpha0 => alpha0, lr0 => lr0, lr_min => lr_min);
    if let Some(wd) = a.weight_decay {
        tc.adamw.weight_decay = wd;
    }
    tc.seed = seed;
    tc.validate()?;
    Ok(tc)
}

pub fn train(a: TrainArgs, mut cfg: RunConfig, seed: u64) -> Outcome<()> {
    let data = required(a.data.clone(), &cfg.data, "data")?;
    let out = required(a.out.clone(), &cfg.out, "out")?;
    cfg.train = train_config(&a, &cfg.train, seed)?;
    cfg.data = Some(data.clone());
    cfg.out = Some(out.clone());
    let (ds, world) = load_dataset(&data)?;
    let start = match &a.base {
        Some(p) => Checkpoint::<f64>::load(p)?.params,
        None => init_params::<f64>(&cfg.model, a.init_seed)?,
    };
    if start.config != cfg.model {
        // A checkpoint brings its own architecture.
        cfg.model = start.config.clone();
    }
    ds.world.check_model(&cfg.model)?;
    create_dir(&out)?;
    cfg.dump(&out)?;

    let total = cfg.train.total_steps;
    let mut history: Vec<LossRecord> = Vec::with_capacity(total);
    let result = train_variant(&ds, &world, &start, &cfg.train, |r| {
        history.push(*r);
        if (r.step + 1) % PROGRESS_EVERY == 0 || r.step + 1 == total {
            info!("step {:>5}/{total}  l_diff {:.4}  l_id {:.4}  lr {:.2e}", r.step + 1, r.l_diff, r.l_id, r.lr);
        }
    });
    write_atomic(&out.join("losses.csv"), losses_csv(&history).as_bytes())?;
    let (ck, _) = result?;
    ck.save(&out.join("checkpoint.bin"))?;
    let s = LossSummary::from_history(&history);
    info!(
        "l_diff {:.4} -> {:.4}, l_id {:.4} -> {:.4}; checkpoint in {}",
        s.initial_l_diff,
        s.final_l_diff,
        s.initial_l_id,
        s.final_l_id,
        out.display()
    );
    Ok(())
}

pub fn fuse(a: FuseArgs, mut cfg: RunConfig, _seed: u64) -> Outcome<()> {
    let cks = a
        .checkpoints
        .iter()
        .map(|p| Checkpoint::<f64>::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&Checkpoint<f64>> = cks.iter().collect();
    let ids: Vec<String> = a.checkpoints.iter().map(|p| p.display().to_string()).collect();
    if let Some(g) = a.grid_step {
        cfg.fusion.grid_step = g;
    }
    if let Some(n) = a.prompts_per_id {
        cfg.fusion.prompts_per_id = n;
    }
    cfg.fusion.sampler = cfg.sampler.clone();
    let mut report = None;
    let spec = match (&a.weights, cks.len()) {
        (Some(w), _) => FusionSpec::new(w.clone(), ids.clone())?,
        (None, 1) => FusionSpec::new(vec![1.0], ids.clone())?,
        (None, _) => {
            let data = required(a.data.clone(), &cfg.data, "data")?;
            cfg.data = Some(data.clone());
            let (ds, world) = load_dataset(&data)?;
            let search = search_fusion_coefficients(&refs, &ids, &ds, &world, &cfg.fusion)?;
            for c in &search.candidates {
                info!("{:?}: facesim {:.4} editdiv {:.4} score {:.4}", c.coefficients, c.facesim, c.editdiv, c.score);
            }
            let spec = search.spec.clone();
            report = Some(search);
            spec
        }
    };
    let fused = fuse_checkpoints(&refs, &ids, &spec)?;
    fused.save(&a.out)?;
    if let Some(r) = report {
        let mut v = serde_json::to_value(&r).expect("search report encodes");
        v["format_version"] = json!(idflow::io::FORMAT_VERSION);
        write_json(&a.out.with_extension("search.json"), &v)?;
    }
    cfg.out = Some(a.out.clone());
    dump_beside(&cfg, &a.out)?;
    info!("fused {} checkpoints with {:?} into {}", cks.len(), spec.coefficients, a.out.display());
    Ok(())
}

pub fn sample(a: SampleArgs, mut cfg: RunConfig, seed: u64) -> Outcome<()> {
    let data = required(a.data.clone(), &cfg.data, "data")?;
    cfg.data = Some(data.clone());
    let ck = Checkpoint::<f64>::load(&a.checkpoint)?;
    let (ds, world) = load_dataset(&data)?;
    let s = &mut cfg.sampler;
    s.alpha0 = a.alpha0.unwrap_or(ck.meta.alpha0);
    if let Some(v) = a.steps {
        s.steps = v;
    }
    if let Some(v) = a.cfg_scale {
        s.cfg_scale = v;
    }
    if let Some(v) = a.beta0 {
        s.beta0 = v;
    }
    if a.guidance_cap.is_some() {
        s.guidance_cap = a.guidance_cap;
    }
    s.validate()?;
    let ids: Vec<usize> = if a.identities.is_empty() {
        (0..ds.num_ids()).collect()
    } else {
        a.identities.clone()
    };
    let mut requests = Vec::new();
    for &id in &ids {
        ds.identity(id)?;
        requests.extend(ds.validation.iter().copied().filter(|&i| ds.samples[i].identity == id).take(a.prompts_per_id));
    }
    if requests.is_empty() {
        return Err(Failure::usage("nothing to sample: no validation prompts selected"));
    }
    let gens = generate_for_requests(&ck.params, &ds, &world, &requests, &cfg.sampler, seed)?;
    let set = GenerationSet {
        dataset: ds.reference(),
        requests,
        outputs: gens.into_iter().map(|g| g.sample).collect(),
        info: json!({
            "sampler": cfg.sampler,
            "checkpoint": a.checkpoint.display().to_string(),
            "noise_seed": seed,
        }),
    };
    set.save(&a.out)?;
    cfg.out = Some(a.out.clone());
    dump_beside(&cfg, &a.out)?;
    info!("wrote {} generations to {}", set.outputs.len(), a.out.display());
    Ok(())
}

pub fn eval(a: EvalArgs, cfg: RunConfig) -> Outcome<()> {
    let data = required(a.data.clone(), &cfg.data, "data")?;
    let set = GenerationSet::<f64>::load(&a.generations)?;
    let (ds, world) = load_dataset(&data)?;
    let gens = set.resolve(&ds)?;
    let report = idflow::data::eval_metrics(&world, &gens, &ds)?;
    create_dir(&a.out)?;
    write_atomic(&a.out.join("metrics.csv"), report.to_csv().as_bytes())?;
    let mut v = serde_json::to_value(&report).expect("report encodes");
    v["format_version"] = json!(idflow::io::FORMAT_VERSION);
    write_json(&a.out.join("metrics.json"), &v)?;
    println!(
        "facesim {:.4}  editdiv {:.4}  promptfollow {:.4}  ({} generations)",
        report.facesim,
        report.editdiv,
        report.promptfollow,
        gens.len()
    );
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Outcome<()> {
    let mut worst: Option<(u64, gc::ParamCheck)> = None;
    for seed in 0..a.seeds {
        let r = gc::run(seed, a.lambda, a.inject_fault.as_deref())?;
        let w = r.worst().clone();
        println!(
            "seed {seed}: {} parameters, worst {} rel_error {:.3e} {}",
            r.checks.len(),
            w.name,
            w.rel_error,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if worst.as_ref().is_none_or(|(_, b)| w.rel_error > b.rel_error) {
            worst = Some((seed, w));
        }
    }
    match worst {
        Some((seed, w)) if w.rel_error >= gc::TOLERANCE => Err(Failure::new(
            CHECK_FAILED,
            format!(
                "gradient check failed: {} has relative error {:.3e} (seed {seed}, tolerance {:.0e})",
                w.name,
                w.rel_error,
                gc::TOLERANCE
            ),
        )),
        _ => Ok(()),
    }
}

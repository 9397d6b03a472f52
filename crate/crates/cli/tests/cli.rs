use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use idflow::data::{Dataset, GenerationSet, World};
use idflow::flow::SamplerConfig;
use idflow::model::{init_params, predict_velocity, ModelInput, ToyDiTConfig};
use idflow::numerics::Tensor;
use idflow::schedules::{id_strength_at, ScheduleParams};
use idflow::training::{request_noise, Checkpoint, CheckpointMeta};
use tempfile::TempDir;

fn idflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idflow"))
        .args(args)
        .env_remove("IDFLOW_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_data(dir: &Path) -> PathBuf {
    let p = dir.join("d.bin");
    ok(idflow(&["gen-data", "--ids", "2", "--per-id", "8", "--seed", "3", "-o", s(&p)]));
    p
}

fn quick_train(dir: &Path, data: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["train", "--data", s(data), "-o", s(&out), "--steps", "6", "--batch-size", "2"];
    if !extra.contains(&"--seed") {
        args.extend(["--seed", "4"]);
    }
    args.extend_from_slice(extra);
    ok(idflow(&args));
    out
}

fn read_losses(path: &Path) -> Vec<Vec<f64>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,l_diff,l_id,l_total,lr"));
    lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect()
}

#[test]
fn gen_data_counts_and_determinism() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    ok(idflow(&["gen-data", "--ids", "8", "--per-id", "128", "--seed", "1", "-o", s(&a)]));
    ok(idflow(&["gen-data", "--ids", "8", "--per-id", "128", "--seed", "1", "-o", s(&b)]));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let ds = Dataset::<f64>::load(&a).unwrap();
    assert_eq!(ds.samples.len(), 1024);
    assert_eq!(ds.num_ids(), 8);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a.json")).unwrap()).unwrap();
    assert_eq!(summary["num_samples"], 1024);
    assert_eq!(summary["seed"], 1);
    assert!(dir.path().join("a.config.toml").exists());
}

#[test]
fn bad_flags_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.bin");
    assert_eq!(code(&idflow(&["gen-data", "--ids", "1", "-o", s(&out)])), 2);
    assert_eq!(code(&idflow(&["gen-data", "--bogus"])), 2);
    assert_eq!(code(&idflow(&["train", "--data", s(&out)])), 2, "missing --out");
}

#[test]
fn io_failures_exit_4() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.bin");
    let out = dir.path().join("run");
    assert_eq!(code(&idflow(&["train", "--data", s(&missing), "-o", s(&out)])), 4);
    let garbage = dir.path().join("garbage.bin");
    fs::write(&garbage, b"not an archive at all").unwrap();
    assert_eq!(code(&idflow(&["train", "--data", s(&garbage), "-o", s(&out)])), 4);
}

#[test]
fn train_writes_consistent_trace_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let r1 = quick_train(dir.path(), &data, "r1", &["--lambda", "0.7"]);
    let r2 = quick_train(dir.path(), &data, "r2", &["--lambda", "0.7"]);
    let rows = read_losses(&r1.join("losses.csv"));
    assert_eq!(rows.len(), 6);
    for r in &rows {
        assert_eq!(r[3], r[1] + 0.7 * r[2], "row {r:?}");
    }
    assert_eq!(fs::read(r1.join("losses.csv")).unwrap(), fs::read(r2.join("losses.csv")).unwrap());
    assert_eq!(fs::read(r1.join("checkpoint.bin")).unwrap(), fs::read(r2.join("checkpoint.bin")).unwrap());
    let cfg = fs::read_to_string(r1.join("config.toml")).unwrap();
    assert!(cfg.contains("lambda = 0.7"), "{cfg}");
}

#[test]
fn variant_presets_reach_the_checkpoint_header() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    for (tag, lambda, alpha0) in [("A", 1.0, 0.8), ("B", 0.25, 0.4)] {
        let run = quick_train(dir.path(), &data, tag, &["--variant", tag]);
        let ck = Checkpoint::<f64>::load(&run.join("checkpoint.bin")).unwrap();
        let tc = ck.meta.train.unwrap();
        assert_eq!((tc.variant_tag.as_str(), tc.lambda, tc.alpha0), (tag, lambda, alpha0));
    }
    assert_eq!(code(&idflow(&["train", "--data", s(&data), "-o", s(&dir.path().join("C")), "--variant", "C"])), 2);
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 11\n[train]\ntotal_steps = 3\nbatch_size = 2\nlambda = 0.3\n").unwrap();
    let out = dir.path().join("run");
    ok(idflow(&["--config", s(&cfg), "train", "--data", s(&data), "-o", s(&out), "--lambda", "0.9"]));
    let dumped: toml::Value = toml::from_str(&fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    assert_eq!(dumped["train"]["lambda"].as_float(), Some(0.9));
    assert_eq!(dumped["train"]["total_steps"].as_integer(), Some(3));
    assert_eq!(dumped["train"]["seed"].as_integer(), Some(11));
    assert_eq!(dumped["train"]["lr0"].as_float(), Some(1e-3));
    assert_eq!(read_losses(&out.join("losses.csv")).len(), 3);
    assert_eq!(dumped["format_version"].as_str(), Some("1.0"));

    // A dump is itself a valid config file.
    let again = dir.path().join("again");
    ok(idflow(&["--config", s(&out.join("config.toml")), "train", "-o", s(&again)]));
    assert_eq!(fs::read(out.join("losses.csv")).unwrap(), fs::read(again.join("losses.csv")).unwrap());

    fs::write(&cfg, "format_version = \"2.0\"\n").unwrap();
    assert_eq!(code(&idflow(&["--config", s(&cfg), "gen-data", "-o", s(&dir.path().join("z.bin"))])), 2);

    fs::write(&cfg, "[train]\nnot_a_field = 1\n").unwrap();
    assert_eq!(code(&idflow(&["--config", s(&cfg), "gen-data", "-o", s(&dir.path().join("z.bin"))])), 2);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("e.bin");
    let o = Command::new(env!("CARGO_BIN_EXE_idflow"))
        .args(["gen-data", "--ids", "2", "--per-id", "4", "-o", s(&out)])
        .env("IDFLOW_SEED", "42")
        .output()
        .unwrap();
    ok(o);
    assert_eq!(Dataset::<f64>::load(&out).unwrap().seed, 42);
}

#[test]
fn fuse_with_explicit_weights() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let a = quick_train(dir.path(), &data, "a", &[]).join("checkpoint.bin");
    let b = quick_train(dir.path(), &data, "b", &["--seed", "9"]).join("checkpoint.bin");
    let single = dir.path().join("single.bin");
    ok(idflow(&["fuse", s(&a), "--weights", "1.0", "-o", s(&single)]));
    let (ca, fused) = (Checkpoint::<f64>::load(&a).unwrap(), Checkpoint::<f64>::load(&single).unwrap());
    assert_eq!(fused.params, ca.params);
    assert_eq!(fused.meta.fusion.unwrap().coefficients, vec![1.0]);

    let half = dir.path().join("half.bin");
    ok(idflow(&["fuse", s(&a), s(&b), "--weights", "0.5,0.5", "-o", s(&half)]));
    let cb = Checkpoint::<f64>::load(&b).unwrap();
    let h = Checkpoint::<f64>::load(&half).unwrap();
    let (wa, wb, wh) = (&ca.params.blocks[1].id_attn.w_v, &cb.params.blocks[1].id_attn.w_v, &h.params.blocks[1].id_attn.w_v);
    for i in [0, 7, wh.numel() - 1] {
        assert_eq!(wh.data()[i], 0.5 * wa.data()[i] + 0.5 * wb.data()[i]);
    }
    assert_eq!(h.meta.fusion_sources, vec![s(&a).to_string(), s(&b).to_string()]);
    assert_eq!(code(&idflow(&["fuse", s(&a), s(&b), "--weights", "0.7,0.7", "-o", s(&half)])), 2);
}

#[test]
fn fuse_searches_when_weights_are_omitted() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let a = quick_train(dir.path(), &data, "a", &["--variant", "A"]).join("checkpoint.bin");
    let b = quick_train(dir.path(), &data, "b", &["--variant", "B"]).join("checkpoint.bin");
    let out = dir.path().join("f.bin");
    ok(idflow(&["fuse", s(&a), s(&b), "--data", s(&data), "--grid-step", "0.5", "--prompts-per-id", "1", "-o", s(&out)]));
    let spec = Checkpoint::<f64>::load(&out).unwrap().meta.fusion.unwrap();
    assert_eq!(spec.coefficients.len(), 2);
    assert!((spec.coefficients.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("f.search.json")).unwrap()).unwrap();
    assert_eq!(report["candidates"].as_array().unwrap().len(), 3);
}

#[test]
fn fusing_incompatible_checkpoints_is_a_computation_error() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let a = quick_train(dir.path(), &data, "a", &[]).join("checkpoint.bin");
    let other = dir.path().join("other.bin");
    Checkpoint {
        meta: CheckpointMeta::new("variant", "x"),
        params: init_params::<f64>(&ToyDiTConfig::minimal(), 0).unwrap(),
    }
    .save(&other)
    .unwrap();
    let out = dir.path().join("f.bin");
    assert_eq!(code(&idflow(&["fuse", s(&a), s(&other), "--weights", "0.5,0.5", "-o", s(&out)])), 3);
}

#[test]
fn sampling_defaults_guidance_and_determinism() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let ck_path = quick_train(dir.path(), &data, "a", &[]).join("checkpoint.bin");
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["sample", "--checkpoint", s(&ck_path), "--data", s(&data), "-o", s(&out), "--prompts-per-id", "1", "--seed", "5"];
        args.extend_from_slice(extra);
        ok(idflow(&args));
        GenerationSet::<f64>::load(&out).unwrap()
    };
    let guided = run("g.bin", &[]);
    let again = run("g2.bin", &[]);
    assert_eq!(guided, again);
    let sampler: SamplerConfig = serde_json::from_value(guided.info["sampler"].clone()).unwrap();
    assert_eq!((sampler.steps, sampler.cfg_scale, sampler.method.as_str()), (20, 1.0, "euler"));

    let plain = run("p.bin", &["--beta0", "0"]);
    assert_ne!(plain.outputs, guided.outputs);

    // Unguided Euler oracle on the same starting noise.
    let ds = Dataset::<f64>::load(&data).unwrap();
    let ck = Checkpoint::<f64>::load(&ck_path).unwrap();
    let sched = ScheduleParams {
        alpha0: ck.meta.alpha0,
        ..ScheduleParams::default()
    };
    for (k, (&idx, out)) in plain.requests.iter().zip(&plain.outputs).enumerate() {
        let smp = &ds.samples[idx];
        let ids = &ds.identities[smp.identity].id_tokens;
        let mut x: Tensor<f64> = request_noise(5, k, smp.x0.shape());
        let dt = 1.0 / 20.0;
        for step in 0..20 {
            let p = step as f64 / 20.0;
            let v = predict_velocity(&ck.params, &ModelInput::new(&x, 1.0 - p, &smp.c, ids, id_strength_at(p, &sched).unwrap())).unwrap();
            x = Tensor::from_fn(x.shape(), |i| x.data()[i] - dt * v.data()[i]);
        }
        assert_eq!(&x, out, "request {k}");
    }

    let out = dir.path().join("m.bin");
    let o = idflow(&["sample", "--checkpoint", s(&ck_path), "--data", s(&data), "-o", s(&out), "--identity", "7"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_reports_fixed_columns() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let ds = Dataset::<f64>::load(&data).unwrap();
    let world = World::new(ds.world.clone()).unwrap();
    // Canonical reference samples embed exactly to e_ref.
    let copies = GenerationSet {
        dataset: ds.reference(),
        requests: ds.validation.clone(),
        outputs: ds
            .validation
            .iter()
            .map(|&i| {
                let rec = &ds.identities[ds.samples[i].identity];
                world.generate(&rec.z_id, &Tensor::zeros(&[ds.world.k_attr])).unwrap()
            })
            .collect(),
        info: serde_json::json!({}),
    };
    let gens = dir.path().join("copies.bin");
    copies.save(&gens).unwrap();
    let out = dir.path().join("metrics");
    ok(idflow(&["eval", "--generations", s(&gens), "--data", s(&data), "-o", s(&out)]));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("identity,facesim,editdiv,promptfollow"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), ds.num_ids() + 1);
    for r in &rows {
        let facesim: f64 = r[1].parse().unwrap();
        assert!((facesim - 1.0).abs() < 1e-12, "{r:?}");
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(json["format_version"], "1.0");
    assert_eq!(json["per_identity"].as_array().unwrap().len(), ds.num_ids());

    let empty = GenerationSet::<f64> {
        outputs: vec![],
        requests: vec![],
        ..copies.clone()
    };
    empty.save(&gens).unwrap();
    assert_eq!(code(&idflow(&["eval", "--generations", s(&gens), "--data", s(&data), "-o", s(&out)])), 2);

    let other = dir.path().join("other.bin");
    ok(idflow(&["gen-data", "--ids", "2", "--per-id", "8", "--seed", "4", "-o", s(&other)]));
    copies.save(&gens).unwrap();
    assert_eq!(code(&idflow(&["eval", "--generations", s(&gens), "--data", s(&other), "-o", s(&out)])), 3);
}

#[test]
fn gradcheck_passes_and_names_injected_faults() {
    let o = ok(idflow(&["gradcheck", "--seeds", "5"]));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.ends_with("PASS")).count(), 5, "{text}");

    let o = idflow(&["gradcheck", "--seeds", "1", "--inject-fault", "block0.text.w_q"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("block0.text.w_q"));
}

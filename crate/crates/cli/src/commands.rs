use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{anyhow, Context};
use flowedit::backbone::ModelParams;
use flowedit::checkpoint::Checkpoint;
use flowedit::dataset::{Dataset, Storage};
use flowedit::flow::{self, LossReport, Start};
use flowedit::latentseq::ImageTensor;
use flowedit::plot::{drift_svg, schedule_csv};
use flowedit::sampler::{edit_loop as run_edit_loop, FlowModel};
use flowedit::schedule::TimestepDistribution;
use flowedit::toybench::{
    drift_eval, evaluate_edits, generate, generate_drift_scripts, identity_score, oracle, parse, scene_from_cells,
    score_edit, tokenize, FlowEditor, Instruction, SceneSpec, SpriteId,
};
use flowedit::verify::{self, render_table};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{EditLoopArgs, EvalArgs, Failure, GenerateArgs, PlotArgs, SampleArgs, TrainArgs, VerifyArgs};

/// Independent random streams derived from the run seed.
const DATA_STREAM: u64 = 0;
const HELDOUT_STREAM: u64 = 2;
const DRIFT_STREAM: u64 = 3;

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display())).map_err(Failure::Runtime)
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display())).map_err(Failure::Runtime)
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: String,
    seed: u64,
    deterministic: bool,
}

/// Writes `config.toml` (loadable with `--config`) and `manifest.toml`.
fn write_run_files(dir: &Path, cfg: &RunConfig, command: &str, deterministic: bool) -> Result<(), Failure> {
    create_dir(dir)?;
    write_file(&dir.join("config.toml"), cfg.to_toml()?)?;
    let manifest = Manifest { command, version: flowedit::build_version(), seed: cfg.seed, deterministic };
    let text = toml::to_string(&manifest).context("serializing manifest")?;
    write_file(&dir.join("manifest.toml"), text)
}

fn progress(line: impl std::fmt::Display) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn generated_dataset(cfg: &RunConfig) -> Result<Dataset, Failure> {
    let d = &cfg.data;
    let examples = generate(&mut stream(cfg.seed, DATA_STREAM), d.examples, &d.generator)?;
    Ok(Dataset::new(examples, d.patch, d.storage, d.generator.clone(), cfg.seed)?)
}

pub fn generate_data(a: &GenerateArgs) -> Result<(), Failure> {
    let storage = match a.storage.as_deref() {
        None => None,
        Some("raw") => Some(Storage::Raw),
        Some("png") => Some(Storage::Png),
        Some(other) => return Err(Failure::Config(anyhow!("unknown storage {other:?}; expected raw or png"))),
    };
    let cfg = a.common.resolve(|c| {
        if let Some(n) = a.examples {
            c.data.examples = n;
        }
        if let Some(p) = a.patch {
            c.data.patch = p;
        }
        if let Some(s) = storage {
            c.data.storage = s;
        }
    })?;
    let ds = generated_dataset(&cfg)?;
    ds.save(&a.out)?;
    progress(format_args!("wrote {} examples to {}", ds.examples.len(), a.out.display()));
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<(), Failure> {
    let mut cfg = a.common.resolve(|c| {
        if let Some(n) = a.steps {
            c.train.steps = n;
        }
        if let Some(n) = a.batch_size {
            c.train.batch_size = n;
        }
        if let Some(lr) = a.lr {
            c.train.learning_rate = lr;
        }
        if let Some(n) = a.checkpoint_every {
            c.train.checkpoint_every = n;
        }
    })?;
    let ds = match &a.data {
        Some(path) => {
            let ds = Dataset::load(path)?;
            cfg.data.examples = ds.examples.len();
            cfg.data.patch = ds.header.patch;
            cfg.data.storage = ds.header.storage;
            cfg.data.generator = ds.header.generator.clone();
            ds
        }
        None => generated_dataset(&cfg)?,
    };
    let model_cfg = cfg.model.build(ds.header.stats.channels())?;
    write_run_files(&a.out, &cfg, "train", a.common.deterministic)?;
    let ckpt_dir = a.out.join("checkpoints");
    create_dir(&ckpt_dir)?;

    let examples = ds.train_examples()?;
    let shape = ds.image_shape();
    let wrap = |params: &ModelParams, step: usize| Checkpoint {
        model: FlowModel { params: params.clone(), stats: ds.header.stats.clone(), patch: ds.header.patch, image_shape: shape },
        step,
        seed: cfg.seed,
        build: flowedit::build_version(),
    };
    let mut loss_csv = format!("{}\n", LossReport::CSV_HEADER);
    let every = (cfg.train.steps / 50).max(1);
    let deterministic = a.common.deterministic;
    progress(format_args!(
        "training {} steps on {} examples ({} parameters)",
        cfg.train.steps,
        examples.len(),
        ModelParams::zeros(&model_cfg).param_count()
    ));
    let params = flow::train(
        &cfg.train,
        &examples,
        Start::Fresh(model_cfg),
        |step, params| wrap(params, step).save(&ckpt_dir.join(format!("step-{step:06}.ckpt"))),
        |r| {
            if deterministic {
                let _ = writeln!(loss_csv, "{},{:.10e},{:.10e},", r.step, r.loss, r.grad_norm);
            } else {
                let _ = writeln!(loss_csv, "{}", r.csv_row());
            }
            if (r.step + 1) % every == 0 {
                progress(format_args!(
                    "step {:>6}  loss {:.5}  grad_norm {:.4}  {:.1}s",
                    r.step + 1,
                    r.loss,
                    r.grad_norm,
                    r.seconds
                ));
            }
        },
    )?;
    write_file(&a.out.join("loss.csv"), &loss_csv)?;
    wrap(&params, cfg.train.steps).save(&a.out.join("model.ckpt"))?;
    progress(format_args!("wrote {}", a.out.join("model.ckpt").display()));
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| Failure::Runtime(e.into()))
}

fn instruction_tokens(text: &str) -> Result<Vec<usize>, Failure> {
    tokenize(text).map_err(|e| Failure::Config(anyhow!("instruction {text:?}: {e}")))
}

pub fn sample(a: &SampleArgs) -> Result<(), Failure> {
    let cfg = a.common.resolve(|c| a.sampler.apply(c))?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let contexts = a.context.iter().map(|p| ImageTensor::read_png(p)).collect::<flowedit::Result<Vec<_>>>()?;
    let refs: Vec<&ImageTensor> = contexts.iter().collect();
    let tokens = instruction_tokens(&a.instruction)?;
    let out = ck.model.edit(&refs, &tokens, &cfg.sampler)?;
    out.write_png(&a.out)?;
    progress(format_args!("wrote {}", a.out.display()));
    Ok(())
}

/// Expected scenes after each instruction, plus every sprite any of them touches.
fn oracle_chain(start: &SceneSpec, script: &[Vec<usize>], cfg: &RunConfig) -> flowedit::Result<(Vec<SceneSpec>, Vec<SpriteId>)> {
    let mut cur = start.clone();
    let mut scenes = Vec::with_capacity(script.len());
    let mut touched = Vec::new();
    for tokens in script {
        let ins = Instruction::parse(tokens, &cur)?;
        touched.extend(ins.touched(&cur));
        cur = oracle(&cur, &ins, cfg.data.generator.move_rule)?;
        scenes.push(cur.clone());
    }
    Ok((scenes, touched))
}

pub fn edit_loop(a: &EditLoopArgs) -> Result<(), Failure> {
    let cfg = a.common.resolve(|c| a.sampler.apply(c))?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let initial = ImageTensor::read_png(&a.image)?;
    let text = fs::read_to_string(&a.script)
        .with_context(|| format!("reading {}", a.script.display()))
        .map_err(Failure::Config)?;
    let script = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(instruction_tokens)
        .collect::<Result<Vec<_>, _>>()?;
    if script.is_empty() {
        return Err(Failure::Config(anyhow!("{} holds no instructions", a.script.display())));
    }
    write_run_files(&a.out, &cfg, "edit-loop", a.common.deterministic)?;

    let grid = cfg.data.generator.grid;
    let chain = scene_from_cells(grid, &parse(&initial, grid))
        .and_then(|start| oracle_chain(&start, &script, &cfg).map(|c| (start, c)));
    let outputs = run_edit_loop(&ck.model, &initial, &script, &cfg.sampler)?;
    for (k, img) in outputs.iter().enumerate() {
        img.write_png(&a.out.join(format!("turn-{:02}.png", k + 1)))?;
        progress(format_args!("turn {} done", k + 1));
    }
    match chain {
        Ok((start, (expected, touched))) => {
            let mut csv = String::from("turn,identity,accuracy\n");
            for (k, (img, want)) in outputs.iter().zip(&expected).enumerate() {
                let identity = identity_score(&parse(img, grid), &start, &touched);
                let accuracy = score_edit(img, want, &touched).accuracy;
                let _ = writeln!(csv, "{},{identity:.6},{accuracy:.6}", k + 1);
            }
            write_file(&a.out.join("drift.csv"), csv)?;
        }
        Err(e) => progress(format_args!("no drift.csv: the start image or script does not resolve to a toy scene ({e})")),
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<(), Failure> {
    let cfg = a.common.resolve(|c| {
        a.sampler.apply(c);
        if let Some(n) = a.examples {
            c.eval.examples = n;
        }
        if let Some(n) = a.scenes {
            c.eval.scenes = n;
        }
        if let Some(n) = a.turns {
            c.eval.turns = n;
        }
    })?;
    let ck = load_checkpoint(&a.checkpoint)?;
    write_run_files(&a.out, &cfg, "eval", a.common.deterministic)?;
    let gen = &cfg.data.generator;
    let heldout = generate(&mut stream(cfg.seed, HELDOUT_STREAM), cfg.eval.examples, gen)?;
    let scripts = generate_drift_scripts(&mut stream(cfg.seed, DRIFT_STREAM), cfg.eval.scenes, cfg.eval.turns, gen)?;
    let editor = FlowEditor { model: &ck.model, cfg: cfg.sampler.clone() };

    progress(format_args!("scoring {} held-out edits", heldout.len()));
    let with_ctx = evaluate_edits(&editor, &heldout, true, cfg.seed)?;
    progress("scoring context-ablated edits");
    let ablated = evaluate_edits(&editor, &heldout, false, cfg.seed)?;
    progress(format_args!("running {} drift scripts of {} turns", scripts.len(), cfg.eval.turns));
    let model = drift_eval(&editor, &scripts, true, gen.move_rule, cfg.seed)?;
    let baseline = drift_eval(&editor, &scripts, false, gen.move_rule, cfg.seed)?;

    let mut drift = String::from("turn,model_identity,model_accuracy,baseline_identity,baseline_accuracy\n");
    for (m, b) in model.drift.iter().zip(&baseline.drift) {
        let _ = writeln!(drift, "{},{:.6},{:.6},{:.6},{:.6}", m.turn, m.identity, m.accuracy, b.identity, b.accuracy);
    }
    let model_id: Vec<f64> = model.drift.iter().map(|r| r.identity).collect();
    let base_id: Vec<f64> = baseline.drift.iter().map(|r| r.identity).collect();
    let summary = format!(
        "with context\n{}\ncontext ablated\n{}\ndrift, with context\n{}\ndrift, context-free baseline\n{}",
        with_ctx.summary(),
        ablated.summary(),
        model.summary(),
        baseline.summary()
    );
    write_file(&a.out.join("edits.csv"), with_ctx.edits_csv())?;
    write_file(&a.out.join("edits_ablated.csv"), ablated.edits_csv())?;
    write_file(&a.out.join("drift.csv"), drift)?;
    write_file(&a.out.join("drift.svg"), drift_svg(&[("model", &model_id), ("context-free", &base_id)]))?;
    write_file(&a.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub fn verify_math(a: &VerifyArgs) -> Result<(), Failure> {
    let cfg = a.common.resolve(|_| {})?;
    let checks = verify::verify_math(a.samples, cfg.seed);
    print!("{}", render_table(&checks));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(failed.join("; ")))
    }
}

/// Parses `mu=..,sigma=..` (either key optional) or `alpha=..`.
pub fn parse_schedule(spec: &str) -> Result<TimestepDistribution, Failure> {
    let bad = |msg: String| Failure::Config(anyhow!("schedule {spec:?}: {msg}"));
    let (mut mu, mut sigma, mut alpha) = (None, None, None);
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| bad(format!("expected key=value, got {part:?}")))?;
        let v: f64 = v.trim().parse().map_err(|_| bad(format!("{v:?} is not a number")))?;
        match k.trim() {
            "mu" => mu = Some(v),
            "sigma" => sigma = Some(v),
            "alpha" => alpha = Some(v),
            other => return Err(bad(format!("unknown key {other:?}"))),
        }
    }
    let dist = match (alpha, mu, sigma) {
        (Some(a), None, None) => TimestepDistribution::from_alpha(a),
        (None, mu, sigma) => TimestepDistribution::logit_normal(mu.unwrap_or(0.0), sigma.unwrap_or(1.0)),
        _ => return Err(bad("alpha cannot be combined with mu or sigma".into())),
    };
    dist.map_err(|e| bad(e.to_string()))
}

/// Series named after every `*identity` column of a drift CSV.
fn drift_series(csv: &str) -> Result<Vec<(String, Vec<f64>)>, Failure> {
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| Failure::Config(anyhow!("empty drift CSV")))?.split(',').collect();
    let cols: Vec<usize> = (0..header.len()).filter(|&i| header[i].ends_with("identity")).collect();
    if cols.is_empty() {
        return Err(Failure::Config(anyhow!("drift CSV has no identity column")));
    }
    let mut series: Vec<(String, Vec<f64>)> = cols
        .iter()
        .map(|&i| (header[i].trim_end_matches("identity").trim_end_matches('_').to_string(), Vec::new()))
        .collect();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        for (s, &i) in series.iter_mut().zip(&cols) {
            let v = cells
                .get(i)
                .and_then(|c| c.trim().parse::<f64>().ok())
                .ok_or_else(|| Failure::Config(anyhow!("bad drift CSV row {line:?}")))?;
            s.1.push(v);
        }
    }
    for s in &mut series {
        if s.0.is_empty() {
            s.0 = "identity".into();
        }
    }
    Ok(series)
}

pub fn plot(a: &PlotArgs) -> Result<(), Failure> {
    let output = if let Some(path) = &a.drift {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(Failure::Config)?;
        let series = drift_series(&text)?;
        let refs: Vec<(&str, &[f64])> = series.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
        drift_svg(&refs)
    } else {
        let dists = if a.schedule.is_empty() {
            vec![TimestepDistribution::identity()]
        } else {
            a.schedule.iter().map(|s| parse_schedule(s)).collect::<Result<Vec<_>, _>>()?
        };
        if a.points < 2 {
            return Err(Failure::Config(anyhow!("--points must be >= 2")));
        }
        schedule_csv(&dists, a.points)
    };
    match &a.out {
        Some(path) => write_file(path, output),
        None => {
            print!("{output}");
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_specs() {
        let d = parse_schedule("mu=1.0986,sigma=1").unwrap();
        assert_eq!((d.mu(), d.sigma()), (1.0986, 1.0));
        let d = parse_schedule("alpha=3").unwrap();
        assert!((d.mu() - 3f64.ln()).abs() < 1e-15);
        assert_eq!(parse_schedule("sigma=2").unwrap().mu(), 0.0);
        for bad in ["mu", "mu=x", "beta=1", "alpha=3,mu=1", "sigma=-1"] {
            assert!(matches!(parse_schedule(bad), Err(Failure::Config(_))), "{bad}");
        }
    }

    #[test]
    fn drift_columns() {
        let csv = "turn,model_identity,model_accuracy,baseline_identity,baseline_accuracy\n1,1.0,1.0,0.5,0.0\n2,0.9,1.0,0.4,0.0\n";
        let s = drift_series(csv).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0], ("model".to_string(), vec![1.0, 0.9]));
        assert_eq!(s[1].0, "baseline");
        let s = drift_series("turn,identity,accuracy\n1,0.5,1\n").unwrap();
        assert_eq!(s[0], ("identity".to_string(), vec![0.5]));
        assert!(drift_series("turn,accuracy\n1,1\n").is_err());
    }
}

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde_json::Value;

use spatial_prompt::embeddings::{load_embeddings, EmbeddingMatrix};
use spatial_prompt::eval::{
    build_answer_bank, load_questions, render_benchmark_annotation, run_eval, Ablation, Arm, EvalConfig, EvalError,
};
use spatial_prompt::features::{compute_scene_features, write_features_cache};
use spatial_prompt::llm::{connect, fingerprint, to_chat_request, BackendConfig, ChatBackend};
use spatial_prompt::pipeline::{select_scene, KeyframeSet, KeyframeStrategy, SceneDirectory};
use spatial_prompt::prompt::{assemble, build_blocks, AnnotationSpec, KeyframeBlock, PromptBundle};
use spatial_prompt::scene::{load_manifest, SceneManifest};
use spatial_prompt::selector::select_keyframes;
use spatial_prompt::synth::{generate_scene, SyntheticSpec};
use spatial_prompt::Error;

use super::config::Settings;
use super::{
    AskArgs, BackendArg, BackendArgs, BankArgs, EvalArgs, ExtractArgs, Failure, InspectArgs, PromptArgs,
    PromptSource, SceneArgs, StrategyArg, SynthArgs,
};

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn synth(a: SynthArgs) -> Result<(), Failure> {
    let spec = SyntheticSpec {
        seed: a.seed,
        path: a.path,
        frame_count: a.frames,
        embedding_dim: a.embedding_dim,
        width: a.width,
        height: a.height,
        blur_fraction: a.blur_fraction,
        ..SyntheticSpec::default()
    };
    let scene_id = a.scene_id.unwrap_or_else(|| {
        a.out
            .file_name()
            .map_or_else(|| "synthetic".to_string(), |n| n.to_string_lossy().into_owned())
    });
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let (manifest, _) = generate_scene(&spec, &scene_id, &a.out).map_err(Error::from)?;
    println!("{}", a.out.join("scene.json").display());
    log::info!("wrote {} frames for scene {}", manifest.frames.len(), manifest.scene_id);
    Ok(())
}

fn load_scene(a: &SceneArgs) -> Result<(SceneManifest, EmbeddingMatrix), Error> {
    let mut manifest = load_manifest(&a.scene)?;
    let header = a.embeddings.clone().unwrap_or_else(|| {
        a.scene
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("embeddings.json")
    });
    let store = load_embeddings(&header, &manifest)?;
    if let Some(k) = a.decimate {
        if k == 0 {
            return Err(Error::Invalid("--decimate must be at least 1".into()));
        }
        manifest.frames = manifest.frames.into_iter().step_by(k).collect();
    }
    Ok((manifest, store))
}

fn strategy(s: StrategyArg) -> KeyframeStrategy {
    match s {
        StrategyArg::Greedy => KeyframeStrategy::Greedy,
        StrategyArg::Uniform => KeyframeStrategy::Uniform,
    }
}

pub fn extract(settings: &Settings, a: ExtractArgs) -> Result<(), Failure> {
    let (manifest, store) = load_scene(&a.scene)?;
    let config = settings.selection();
    let strategy = strategy(a.strategy);
    let result = match (&a.features_out, strategy) {
        (Some(path), KeyframeStrategy::Greedy) => {
            config.validate().map_err(Error::from)?;
            let features = compute_scene_features(&manifest, &config).map_err(Error::from)?;
            write_features_cache(path, &manifest.scene_id, &features).map_err(Error::from)?;
            select_keyframes(&features, &store, &config).map_err(Error::from)?
        }
        _ => select_scene(&manifest, &store, &config, strategy)?,
    };
    if a.log_removals {
        for step in &result.removal_log {
            let d = if step.d_prime.is_finite() { format!("{:.6}", step.d_prime) } else { "-inf".into() };
            eprintln!("step {:>4}: removed {} (pair with {}) d'={d}", step.step, step.removed, step.survivor);
        }
    }
    let set = KeyframeSet::new(&manifest.scene_id, strategy, &config, result, a.log_removals);
    emit(a.out.as_deref(), &set.to_json())?;
    Ok(())
}

fn parse_annotation(spec: &str) -> Result<AnnotationSpec, Error> {
    Ok(match spec {
        "default" => AnnotationSpec::Default,
        "zero-shot" => AnnotationSpec::ZeroShot,
        "none" => AnnotationSpec::None,
        s if s.starts_with('@') => {
            let path = PathBuf::from(&s[1..]);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            AnnotationSpec::Text(text.trim_end_matches('\n').to_string())
        }
        other => {
            return Err(Error::Invalid(format!(
                "unknown annotation `{other}` (expected default, zero-shot, none or @FILE)"
            )))
        }
    })
}

/// Keyframe blocks plus the arm they were built for.
fn prepare(settings: &Settings, src: &PromptSource) -> Result<(Vec<KeyframeBlock>, Arm), Error> {
    let (manifest, store) = load_scene(&src.scene)?;
    let arm = Arm::new(src.ablation, parse_annotation(&src.annotation)?, settings.prompt_options());
    let kept = match &src.keyframes {
        Some(path) => {
            if src.ablation == Some(Ablation::UniformKf) {
                return Err(Error::Invalid(
                    "--ablation uniform-kf selects its own frames; drop --keyframes".into(),
                ));
            }
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let set: KeyframeSet = serde_json::from_str(&text)
                .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
            if set.scene_id != manifest.scene_id {
                return Err(Error::Invalid(format!(
                    "keyframes belong to scene `{}`, not `{}`",
                    set.scene_id, manifest.scene_id
                )));
            }
            set.kept
        }
        None => select_scene(&manifest, &store, &settings.selection(), arm.strategy)?.kept,
    };
    let blocks = build_blocks(&manifest, &kept, &arm.options)?;
    Ok((blocks, arm))
}

fn bundle_for(blocks: &[KeyframeBlock], arm: &Arm, query: &str) -> Result<PromptBundle, Error> {
    if query.trim().is_empty() {
        return Err(spatial_prompt::prompt::PromptError::EmptyQuery.into());
    }
    Ok(assemble(blocks.to_vec(), query, &arm.annotation, arm.options.role.as_deref())?)
}

pub fn prompt(settings: &Settings, a: PromptArgs) -> Result<(), Failure> {
    let (blocks, arm) = prepare(settings, &a.source)?;
    let bundle = bundle_for(&blocks, &arm, &a.query)?;
    let text = if a.text { bundle.render_text() } else { bundle.to_json() };
    if let Some(golden) = &a.golden_check {
        let expected = fs::read_to_string(golden).map_err(|e| Error::io(golden, e))?;
        if expected != text {
            let line = expected
                .lines()
                .zip(text.lines())
                .position(|(x, y)| x != y)
                .unwrap_or_else(|| expected.lines().count().min(text.lines().count()));
            return Err(Failure::CheckFailed(format!(
                "output differs from {} at line {}",
                golden.display(),
                line + 1
            )));
        }
    }
    emit(a.out.as_deref(), &text)?;
    Ok(())
}

fn backend_config(settings: &Settings, a: &BackendArgs) -> Result<BackendConfig, Error> {
    let replay = || {
        a.replay
            .clone()
            .ok_or_else(|| Error::Invalid("--replay FILE is required for this backend".into()))
    };
    Ok(match a.backend {
        BackendArg::Http => BackendConfig::Http(settings.http_settings()),
        BackendArg::Replay => BackendConfig::Replay { path: replay()? },
        BackendArg::Record => BackendConfig::Record {
            path: replay()?,
            inner: Box::new(BackendConfig::Http(settings.http_settings())),
        },
        BackendArg::Echo => BackendConfig::Echo,
    })
}

fn answer(
    settings: &Settings,
    backend: &dyn ChatBackend,
    blocks: &[KeyframeBlock],
    arm: &Arm,
    query: &str,
) -> Result<String, Error> {
    let bundle = bundle_for(blocks, arm, query)?;
    let request = to_chat_request(&bundle, &settings.model, settings.chat_params());
    log::debug!("request fingerprint {}", fingerprint(&request));
    Ok(backend.send(&request)?.answer_text)
}

pub fn ask(settings: &Settings, a: AskArgs) -> Result<(), Failure> {
    let backend = connect(&backend_config(settings, &a.backend)?).map_err(Error::from)?;
    let (blocks, arm) = prepare(settings, &a.source)?;
    if !a.interactive {
        let q = a.query.as_deref().unwrap_or_default();
        println!("{}", answer(settings, backend.as_ref(), &blocks, &arm, q)?);
        return Ok(());
    }
    // each question is sent on its own; no conversation state carries over
    let stdin = std::io::stdin();
    let mut stderr = std::io::stderr();
    loop {
        let _ = write!(stderr, "> ");
        let _ = stderr.flush();
        let mut line = String::new();
        if stdin.lock().read_line(&mut line).map_err(|e| Error::io(Path::new("<stdin>"), e))? == 0 {
            break;
        }
        let q = line.trim();
        match q {
            "" => continue,
            "exit" | "quit" => break,
            _ => match answer(settings, backend.as_ref(), &blocks, &arm, q) {
                Ok(text) => println!("{text}"),
                Err(e) => eprintln!("error[{}]: {e}", e.code()),
            },
        }
    }
    Ok(())
}

pub fn eval(settings: &Settings, a: EvalArgs) -> Result<(), Failure> {
    let items = load_questions(&a.questions).map_err(Error::from)?;
    let annotation = match (&a.train, &a.annotation) {
        (Some(_), Some(_)) => {
            return Err(Error::Invalid("give either --train or --annotation, not both".into()).into())
        }
        (Some(train), None) => {
            let training = load_questions(train).map_err(Error::from)?;
            let bank = build_answer_bank(&training, a.dataset);
            AnnotationSpec::Text(render_benchmark_annotation(&bank).map_err(Error::from)?)
        }
        (None, Some(spec)) => parse_annotation(spec)?,
        (None, None) => AnnotationSpec::Default,
    };
    let backend = connect(&backend_config(settings, &a.backend)?).map_err(Error::from)?;
    let config = EvalConfig {
        dataset: a.dataset,
        selection: settings.selection(),
        ablation: a.ablation,
        annotation,
        prompt: settings.prompt_options(),
        model_tag: settings.model.clone(),
        chat: settings.chat_params(),
        in_flight: settings.in_flight,
        cache_dir: a.cache_dir.clone(),
    };
    let report = run_eval(&items, &SceneDirectory::new(&a.scenes), backend.as_ref(), &config)?;
    if let Some(out) = &a.out {
        write_file(out, &report.to_json())?;
    }
    if let Some(csv) = &a.csv {
        write_file(csv, &report.to_csv())?;
    }
    println!("{}", report.summary_row());
    let agg = &report.aggregates;
    if a.strict && agg.unscored > 0 {
        return Err(Error::Eval(EvalError::Incomplete {
            unscored: agg.unscored,
            total: report.items.len(),
        })
        .into());
    }
    Ok(())
}

pub fn bank(a: BankArgs) -> Result<(), Failure> {
    let training = load_questions(&a.train).map_err(Error::from)?;
    let text = render_benchmark_annotation(&build_answer_bank(&training, a.dataset)).map_err(Error::from)?;
    println!("{text}");
    Ok(())
}

fn describe(v: &Value) -> Option<String> {
    let len = |k: &str| v[k].as_array().map_or(0, Vec::len);
    let s = |k: &str| v[k].as_str().unwrap_or("?").to_string();
    if v.get("intrinsics").is_some() && v.get("frames").is_some() {
        let ts: Vec<f64> = v["frames"].as_array()?.iter().filter_map(|f| f["timestamp"].as_f64()).collect();
        let (lo, hi) = ts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &t| (a.min(t), b.max(t)));
        let i = &v["intrinsics"];
        return Some(format!(
            "scene manifest `{}`: {} frames, {}x{} px, depth {}, timestamps {lo}..{hi}",
            s("scene_id"),
            len("frames"),
            i["width"],
            i["height"],
            s("depth_format"),
        ));
    }
    if v.get("kept").is_some() {
        return Some(format!(
            "keyframe set for `{}` ({}): {} frames kept {}, {} pair distances evaluated",
            s("scene_id"),
            s("strategy"),
            len("kept"),
            v["kept"],
            v["pair_count_evaluated"],
        ));
    }
    if v.get("blocks").is_some() && v.get("query").is_some() {
        let posed = v["blocks"].as_array()?.iter().filter(|b| b.get("position").is_some()).count();
        return Some(format!(
            "prompt bundle: {} keyframes ({posed} with pose), query {:?}",
            len("blocks"),
            s("query")
        ));
    }
    if let Some(agg) = v.get("aggregates") {
        return Some(format!(
            "eval report ({}, model {}): {} scored, {} unscored, EM@1 {}",
            s("dataset"),
            s("model"),
            agg["scored"],
            agg["unscored"],
            agg["em_at_1"]
        ));
    }
    if v.get("dim").is_some() && v.get("frame_ids").is_some() {
        return Some(format!(
            "embedding header: {} x {} from `{}`",
            v["count"],
            v["dim"],
            s("model")
        ));
    }
    if v.get("frames").is_some() && v.get("scene_id").is_some() {
        let degenerate = v["frames"].as_array()?.iter().filter(|f| f["quality"].is_null()).count();
        return Some(format!(
            "frame features for `{}`: {} frames, {degenerate} degenerate",
            s("scene_id"),
            len("frames")
        ));
    }
    None
}

pub fn inspect(a: InspectArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&a.file).map_err(|e| Error::io(&a.file, e))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Invalid(format!("{}: not JSON: {e}", a.file.display())))?;
    let summary = describe(&v)
        .ok_or_else(|| Error::Invalid(format!("{}: unrecognized artifact", a.file.display())))?;
    match v.get("version") {
        Some(ver) => println!("{summary} [version {ver}]"),
        None => println!("{summary}"),
    }
    Ok(())
}

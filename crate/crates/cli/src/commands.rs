use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use candle_core::Device;
use serde::{Deserialize, Serialize};
use serde_json::json;

use multiid::diffusion::{seeded_normal, NoiseSchedule};
use multiid::evaluation::maps::emit_routing_maps;
use multiid::evaluation::protocol::{clip_metrics, consensus_map, generate, map_to_pixel_mask, Conditioning};
use multiid::evaluation::EvalReport;
use multiid::model::Model;
use multiid::synthdata::{gen_identity, load_clip, load_corpus, read_manifest, write_corpus, MANIFEST_FILE};
use multiid::training::data::{prepare_clip, Encoders};
use multiid::training::{
    endpoint_means, load_checkpoint, model_from_bundle, prepare_corpus, save_checkpoint, train_stage1, train_stage2,
    write_loss_csv, CheckpointBundle, LossRecord, Snapshot, TRAIN_DTYPE,
};
use multiid::volume::{read_labels, read_video, write_labels, write_video};

use crate::config::{ConfigError, RunConfig};

pub const STAGE1_CKPT: &str = "stage1.ckpt";
pub const STAGE2_CKPT: &str = "stage2.ckpt";
pub const SAMPLE_META: &str = "sample.json";
pub const SAMPLE_VIDEO: &str = "video.bin";
pub const SAMPLE_MASK: &str = "mask.bin";
/// Loss endpoints are averaged over this many steps.
pub const ENDPOINT_WINDOW: usize = 20;

fn require_file(path: &Path, what: &str) -> Result<(), ConfigError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(ConfigError::new(
            None,
            format!("{what} not found at {}", path.display()),
        ))
    }
}

fn require_dir(path: &Path, what: &str) -> Result<(), ConfigError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(ConfigError::new(
            None,
            format!("{what} not found at {}", path.display()),
        ))
    }
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let manifests = write_corpus(&cfg.corpus_dir, &cfg.corpus)?;
    emit(json!({
        "command": "gen-data",
        "clips": manifests.len(),
        "corpus_dir": cfg.corpus_dir,
    }));
    Ok(())
}

fn loss_summary(history: &[LossRecord]) -> serde_json::Value {
    let diff: Vec<f64> = history.iter().map(|r| r.l_diff).collect();
    let route: Vec<f64> = history.iter().filter_map(|r| r.l_route_term).collect();
    let (d0, d1) = endpoint_means(&diff, ENDPOINT_WINDOW);
    let mut v = json!({ "l_diff_start": d0, "l_diff_end": d1 });
    if !route.is_empty() {
        let (r0, r1) = endpoint_means(&route, ENDPOINT_WINDOW);
        v["route_start"] = json!(r0);
        v["route_end"] = json!(r1);
    }
    v
}

pub fn train(cfg: &RunConfig, stage: u8, init: Option<&Path>) -> Result<()> {
    require_file(&cfg.corpus_dir.join(MANIFEST_FILE), "corpus manifest")?;
    let clips = load_corpus(&cfg.corpus_dir)?;
    fs::create_dir_all(&cfg.ckpt_dir).with_context(|| format!("creating {}", cfg.ckpt_dir.display()))?;
    let (outcome, name) = if stage == 1 {
        let model_cfg = multiid::training::stage1_model_config(&cfg.stage1, cfg.model);
        let corpus = prepare_corpus(&clips, &model_cfg, &cfg.stage1)?;
        (train_stage1(&cfg.stage1, cfg.model, &corpus)?, STAGE1_CKPT)
    } else {
        let init = init.map_or_else(|| cfg.ckpt_dir.join(STAGE1_CKPT), Path::to_path_buf);
        require_file(&init, "stage-1 checkpoint")?;
        let stage1 = load_checkpoint(&init)?;
        let snap = Snapshot::from_bundle(&stage1)?;
        let corpus = prepare_corpus(&clips, &snap.model, &cfg.stage2)?;
        (train_stage2(&cfg.stage2, &corpus, &stage1)?, STAGE2_CKPT)
    };
    let ckpt = cfg.ckpt_dir.join(name);
    save_checkpoint(&outcome.bundle, &ckpt)?;
    let csv = cfg.ckpt_dir.join(format!("stage{stage}_loss.csv"));
    write_loss_csv(&csv, &outcome.history)?;
    let mut summary = json!({
        "command": "train",
        "stage": stage,
        "steps": outcome.history.len(),
        "checkpoint": ckpt,
        "loss_csv": csv,
    });
    if let (Some(obj), serde_json::Value::Object(losses)) = (summary.as_object_mut(), loss_summary(&outcome.history)) {
        obj.extend(losses);
    }
    emit(summary);
    Ok(())
}

fn load_model(path: &Path, seed: u64) -> Result<(Model, Snapshot, CheckpointBundle)> {
    require_file(path, "checkpoint")?;
    let bundle = load_checkpoint(path)?;
    let snap = Snapshot::from_bundle(&bundle)?;
    let (model, _) = model_from_bundle(&bundle, bundle.stage, seed)?;
    Ok((model, snap, bundle))
}

/// What `sample` writes next to the clip, and what `eval` reads back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub prompt: String,
    pub identity_seeds: Vec<u64>,
    pub seed: u64,
    pub steps: usize,
    pub guidance: f64,
    pub checkpoint_stage: u8,
}

pub struct SampleArgs<'a> {
    pub ckpt: Option<&'a Path>,
    pub prompt: &'a str,
    pub identity_seeds: &'a [u64],
    pub out: Option<&'a Path>,
}

pub fn sample(cfg: &RunConfig, args: SampleArgs<'_>) -> Result<()> {
    if args.identity_seeds.is_empty() {
        return Err(ConfigError::new(Some("ids"), "at least one identity seed is required").into());
    }
    let seed = cfg.seed.unwrap_or(0);
    let ckpt = args
        .ckpt
        .map_or_else(|| cfg.ckpt_dir.join(STAGE2_CKPT), Path::to_path_buf);
    let (model, snap, bundle) = load_model(&ckpt, seed)?;
    let specs: Vec<_> = args.identity_seeds.iter().map(|&s| gen_identity(s)).collect();
    let (ct, ch, cw) = model.cfg.codec.factors();
    let (lt, lh, lw) = model.cfg.dit.latent_grid;
    let cond = Conditioning::from_identities(
        &model,
        &specs,
        args.prompt,
        (lt * ct, lh * ch, lw * cw),
        snap.train.vae_concat,
        &Encoders::default(),
    )?;
    let sched = NoiseSchedule::from_config(&snap.train.diffusion)?;
    let shape = [1, model.cfg.dit.latent_channels, lt, lh, lw];
    let x = seeded_normal(&shape, seed, &Device::Cpu)?.to_dtype(TRAIN_DTYPE)?;
    let ts = sched.sampling_timesteps(cfg.sampling.steps)?;
    let gen = generate(&model, &cond, x, &ts, cfg.sampling.guidance, &sched, true)?;
    let last = ts.len() - 1;
    let map = consensus_map(&gen.maps, last, specs.len())?;
    let mask = map_to_pixel_mask(&map, token_factors(&model), specs.len())?;

    let out = args.out.map_or_else(
        || cfg.report_dir.join("samples").join(format!("sample_{seed}")),
        Path::to_path_buf,
    );
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_video(&out.join(SAMPLE_VIDEO), &gen.video)?;
    write_labels(&out.join(SAMPLE_MASK), &mask.labels, mask.n_ids)?;
    let meta = SampleMeta {
        prompt: args.prompt.to_string(),
        identity_seeds: args.identity_seeds.to_vec(),
        seed,
        steps: cfg.sampling.steps,
        guidance: cfg.sampling.guidance,
        checkpoint_stage: bundle.stage,
    };
    fs::write(out.join(SAMPLE_META), serde_json::to_string_pretty(&meta)?)?;
    emit(json!({ "command": "sample", "out": out, "seed": seed }));
    Ok(())
}

/// Pixels per routing token along `(t, h, w)`.
fn token_factors(model: &Model) -> (usize, usize, usize) {
    let (ct, ch, cw) = model.cfg.codec.factors();
    let (pt, ph, pw) = model.cfg.dit.patch;
    (ct * pt, ch * ph, cw * pw)
}

/// Sample directories under `dir` (the directory itself if it is one).
fn sample_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(SAMPLE_META).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SAMPLE_META).is_file())
        .collect();
    out.sort();
    Ok(out)
}

pub fn eval(cfg: &RunConfig, generated: Option<&Path>) -> Result<()> {
    let dir = generated.map_or_else(|| cfg.report_dir.join("samples"), Path::to_path_buf);
    require_dir(&dir, "generated samples")?;
    let mut rows = Vec::new();
    for d in sample_dirs(&dir)? {
        let meta: SampleMeta = serde_json::from_str(&fs::read_to_string(d.join(SAMPLE_META))?)
            .with_context(|| format!("reading {}", d.join(SAMPLE_META).display()))?;
        let video = read_video(&d.join(SAMPLE_VIDEO))?;
        let (labels, n_ids) = read_labels(&d.join(SAMPLE_MASK))?;
        let mask = multiid::supervision::MaskVolume {
            labels,
            n_ids,
            resolution: multiid::supervision::Resolution::Pixel,
        };
        let refs: Vec<Vec<f64>> = meta
            .identity_seeds
            .iter()
            .map(|&s| gen_identity(s).canonical_embedding)
            .collect();
        let id = d
            .file_name()
            .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        rows.push(clip_metrics(&id, &video, &mask, &refs, &meta.prompt)?);
    }
    let report = EvalReport::from_rows(rows)?;
    fs::create_dir_all(&cfg.report_dir)?;
    let path = cfg.report_dir.join("eval.json");
    fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    emit(json!({ "command": "eval", "report": path, "result": report }));
    Ok(())
}

pub fn viz(cfg: &RunConfig, ckpt: Option<&Path>, clip_id: Option<&str>, out: Option<&Path>) -> Result<()> {
    require_file(&cfg.corpus_dir.join(MANIFEST_FILE), "corpus manifest")?;
    let seed = cfg.seed.unwrap_or(0);
    let ckpt = ckpt.map_or_else(|| cfg.ckpt_dir.join(STAGE2_CKPT), Path::to_path_buf);
    let (model, snap, _) = load_model(&ckpt, seed)?;
    let manifests = read_manifest(&cfg.corpus_dir)?;
    let m = match clip_id {
        Some(id) => manifests
            .iter()
            .find(|m| m.clip_id == id)
            .ok_or_else(|| ConfigError::new(Some("clip"), format!("no clip `{id}` in the corpus")))?,
        None => manifests
            .first()
            .ok_or_else(|| ConfigError::new(Some("clip"), "the corpus is empty"))?,
    };
    let clip = load_clip(&cfg.corpus_dir, m)?;
    let prepared = prepare_clip(
        &clip,
        &model.cfg,
        snap.train.prepare_options(),
        &Encoders::default(),
        &Device::Cpu,
    )?;
    let cond = Conditioning::from_clip(&model, &prepared)?;
    let sched = NoiseSchedule::from_config(&snap.train.diffusion)?;
    let x = seeded_normal(prepared.x0.unsqueeze(0)?.dims(), seed, &Device::Cpu)?.to_dtype(TRAIN_DTYPE)?;
    let ts = sched.sampling_timesteps(cfg.sampling.steps)?;
    let gen = generate(&model, &cond, x, &ts, cfg.sampling.guidance, &sched, true)?;
    let (_, fh, fw) = token_factors(&model);
    let out = out.map_or_else(|| cfg.report_dir.join("maps").join(&m.clip_id), Path::to_path_buf);
    let files = emit_routing_maps(
        &gen.maps,
        prepared.n_ids,
        &out,
        cfg.viz.frame_stride,
        cfg.viz.layer_stride,
        (fh, fw),
    )?;
    emit(json!({
        "command": "viz",
        "clip": m.clip_id,
        "out": out,
        "files": files.len(),
    }));
    Ok(())
}

use std::path::PathBuf;

use lsdfn::flow::dataset::stack;
use lsdfn::flow::train::{loss_series_csv, metrics_csv, predict_all, train_model, EVAL_CHUNK};
use lsdfn::flow::{build_model, epe_loss, flow_to_ppm, gen_flow_dataset, load_trained, save_trained, ModelKind, TrainConfig};
use lsdfn::io::write_tensor;
use lsdfn::kv::KvMap;
use lsdfn::Tensor;

use crate::run::{csv_comments, CliError, CliResult, Outcome, RunConfig};

/// Checkpoint directory inside the output directory.
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Keys handled here rather than by the trainer config.
struct Render {
    images: usize,
    max_flow: f64,
}

/// Strips the render keys from `kv`; `max_flow` defaults to the effective
/// maximum displacement, so it is resolved once the trainer config is known.
fn take_render(kv: &mut KvMap) -> CliResult<(usize, Option<f64>)> {
    let images = kv.parsed_or("images", 4)?;
    let max_flow = kv.parsed::<f64>("max_flow")?;
    kv.remove("images");
    kv.remove("max_flow");
    Ok((images, max_flow))
}

fn resolve_render((images, max_flow): (usize, Option<f64>), cfg: &TrainConfig) -> CliResult<Render> {
    let max_flow = max_flow.unwrap_or(cfg.data.max_displacement.max(1) as f64);
    if !(max_flow > 0.0) {
        return Err(CliError::Usage("max_flow must be > 0".into()));
    }
    Ok(Render { images, max_flow })
}

fn write_outputs(run: &RunConfig, render: &Render, pred: &Tensor<f32>, gt: &Tensor<f32>) -> CliResult<()> {
    let path = run.out.join("predictions.lsdt");
    write_tensor(&path, pred)?;
    let n = pred.shape()[0];
    for i in 0..render.images.min(n) {
        let p = pred.gather_batch(&[i])?;
        let g = gt.gather_batch(&[i])?;
        let (h, w) = (p.shape()[2], p.shape()[3]);
        run.write(&format!("flow_{i:04}.ppm"), &flow_to_ppm(&p.reshape(&[2, h, w])?, render.max_flow)?)?;
        run.write(&format!("gt_{i:04}.ppm"), &flow_to_ppm(&g.reshape(&[2, h, w])?, render.max_flow)?)?;
    }
    Ok(())
}

pub fn train(run: &RunConfig) -> CliResult<Outcome> {
    let mut kv = run.kv.clone();
    let base = TrainConfig::default_for(ModelKind::Lsdfn);
    let render = take_render(&mut kv)?;
    let cfg = TrainConfig::from_kv_over(&kv, &base)?;
    let render = resolve_render(render, &cfg)?;
    let mut effective = cfg.to_kv();
    effective.insert("images", render.images);
    effective.insert("max_flow", render.max_flow);
    run.prepare_out(&effective)?;
    let (base_params, ls_params) = cfg.model.param_counts()?;
    println!("parameters: baseline {base_params}, lsdfn {ls_params}; training {}", cfg.model.kind);

    let samples = gen_flow_dataset(&cfg.data)?;
    let (inputs, flows) = stack(&samples)?;
    let result = train_model(build_model(&cfg.model, cfg.seed)?, &inputs, &flows, &cfg)?;
    run.write("metrics.csv", metrics_csv(&result.rows, &effective).as_bytes())?;
    let series = format!(
        "{}{}",
        csv_comments(&effective),
        loss_series_csv(&result.batch_losses, cfg.smoothing_window)
    );
    run.write("loss_series.csv", series.as_bytes())?;
    save_trained(run.out.join(CHECKPOINT_DIR), &result.model, &cfg)?;
    let pred = predict_all(&result.model, &inputs, EVAL_CHUNK)?;
    write_outputs(run, &render, &pred, &flows)?;
    for r in &result.rows {
        println!("iteration {:>6}  loss {:.6}  aepe {:.6}  {:.0} ms", r.iteration, r.loss, r.aepe, r.wall_ms);
    }
    println!("final training loss (aepe) {:.6}", result.final_loss());
    Ok(Outcome::Success)
}

pub fn infer(run: &RunConfig) -> CliResult<Outcome> {
    let mut kv = run.kv.clone();
    let dir: PathBuf = kv
        .remove("checkpoint")
        .map(PathBuf::from)
        .ok_or_else(|| CliError::Usage("infer needs checkpoint=<dir>".into()))?;
    let render = take_render(&mut kv)?;
    let (model, cfg) = load_trained(&dir, &kv)?;
    let render = resolve_render(render, &cfg)?;
    let mut effective = KvMap::default();
    effective.insert("checkpoint", dir.display());
    for (k, v) in cfg.to_kv().iter().filter(|(k, _)| k.starts_with("data.")) {
        effective.insert(k, v);
    }
    effective.insert("images", render.images);
    effective.insert("max_flow", render.max_flow);
    run.prepare_out(&effective)?;

    let samples = gen_flow_dataset(&cfg.data)?;
    let (inputs, flows) = stack(&samples)?;
    let pred = predict_all(&model, &inputs, EVAL_CHUNK)?;
    let (mean, _) = epe_loss(&pred, &flows)?;
    let mut csv = csv_comments(&effective);
    csv.push_str("sample,aepe\n");
    for i in 0..samples.len() {
        let (e, _) = epe_loss(&pred.gather_batch(&[i])?, &flows.gather_batch(&[i])?)?;
        csv.push_str(&format!("{i},{e}\n"));
    }
    csv.push_str(&format!("all,{mean}\n"));
    run.write("infer.csv", csv.as_bytes())?;
    write_outputs(run, &render, &pred, &flows)?;
    println!("aepe {mean:.6} over {} samples", samples.len());
    Ok(Outcome::Success)
}

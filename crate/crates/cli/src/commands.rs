//! Implementations of the subcommands. Every output lands under the
//! command's --out directory; inputs are never mutated. Train runs emit a
//! run manifest (config hash, dataset hash, seed) from which the outputs
//! are reproducible.

use crate::config::{fnv1a, RunConfig};
use crate::Variant;
use segkit_core::ablation::ablation_panel;
use segkit_core::data::{
    image_to_tensor, load_dataset, pad_image_reflect, prepare, tensor_to_bytes, write_label_map,
    write_label_render, Palette, PreparedSample, Sample,
};
use segkit_core::lcn::{lcn, LcnConfig};
use segkit_core::loss::{argmax_labels, evaluate, EvalReport};
use segkit_core::model::Network;
use segkit_core::optim::{records_to_csv, train_variant, TrainVariant};
use segkit_core::pnm;
use segkit_core::synth::synth_generate;
use segkit_core::{Result, SegError};
use std::path::Path;

pub fn synth(config_path: &Path, out: &Path) -> Result<()> {
    let (cfg, _) = RunConfig::load(config_path)?;
    let synth_cfg = cfg.require_synth()?;
    let dataset = synth_generate(synth_cfg)?;

    std::fs::create_dir_all(out.join("images"))?;
    std::fs::create_dir_all(out.join("labels"))?;
    let mut manifests = [String::new(), String::new()];
    for (split, samples, manifest) in [
        ("train", &dataset.train, 0usize),
        ("test", &dataset.test, 1usize),
    ] {
        for sample in samples {
            let image_rel = format!("images/{}.ppm", sample.id);
            let label_rel = format!("labels/{}.pgm", sample.id);
            let [_, _, h, w] = sample.image.dims();
            pnm::write_ppm(&out.join(&image_rel), w, h, &tensor_to_bytes(&sample.image))?;
            write_label_map(&sample.labels, &out.join(&label_rel))?;
            manifests[manifest].push_str(&format!("{image_rel}\t{label_rel}\n"));
        }
        std::fs::write(out.join(format!("{split}.manifest")), &manifests[manifest])?;
    }
    dataset.palette.save(&out.join("palette.json"))?;
    println!(
        "wrote {} train and {} test samples to {}",
        dataset.train.len(),
        dataset.test.len(),
        out.display()
    );
    Ok(())
}

pub fn train(
    config_path: &Path,
    variant: Option<Variant>,
    from: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let (cfg, cfg_text) = RunConfig::load(config_path)?;
    let schedule = cfg.require_schedule()?.clone();
    let manifest_path = cfg.require_train_manifest()?.clone();
    let seed = cfg.seed.unwrap_or(0);

    let (mut net, variant_kind) = match variant {
        None | Some(Variant::R) => {
            let network = cfg.require_network()?;
            (Network::init(network, seed)?, TrainVariant::Scratch)
        }
        Some(Variant::SM) => {
            let ckpt = require_from(from, "SM")?;
            (
                Network::load_checkpoint(ckpt)?,
                TrainVariant::HeadOnly {
                    hidden_width: cfg.head_width.unwrap_or(64),
                },
            )
        }
        Some(Variant::L4) => {
            let ckpt = require_from(from, "L4")?;
            (Network::load_checkpoint(ckpt)?, TrainVariant::DeepestPair)
        }
    };

    let network_cfg = net.config().clone();
    let lcn_cfg = match (variant, &net.preprocess) {
        // Transfer variants reuse the checkpoint's preprocessing unless the
        // config overrides it.
        (Some(Variant::SM) | Some(Variant::L4), Some(saved)) if cfg.lcn.is_none() => saved.clone(),
        _ => cfg.lcn_or_default(network_cfg.input_channels),
    };

    let samples = load_dataset(
        &manifest_path,
        network_cfg.classes,
        network_cfg.resolution_multiple(),
    )?;
    let dataset_hash = hash_samples(&samples);
    let prepared = prepare(&samples, &lcn_cfg)?;
    let run = train_variant(&mut net, &prepared, variant_kind, &schedule)?;

    std::fs::create_dir_all(out)?;
    net.preprocess = Some(lcn_cfg);
    net.save_checkpoint(&out.join("model.ckpt"))?;
    std::fs::write(out.join("loss.csv"), records_to_csv(&run.records))?;

    let manifest = serde_json::json!({
        "command": "train",
        "variant": match variant {
            None | Some(Variant::R) => "R",
            Some(Variant::SM) => "SM",
            Some(Variant::L4) => "L4",
        },
        "config_hash": format!("{:016x}", fnv1a(cfg_text.as_bytes())),
        "dataset_hash": format!("{:016x}", dataset_hash),
        "seed": seed,
        "samples": samples.len(),
        "class_weights": run.weights.weights,
        "config": serde_json::from_str::<serde_json::Value>(&cfg_text)
            .map_err(|e| SegError::Config(e.to_string()))?,
    });
    std::fs::write(
        out.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| SegError::Config(e.to_string()))?,
    )?;
    let final_loss = run.records.last().map(|r| r.loss);
    println!(
        "trained {} records; final loss {:?}; checkpoint at {}",
        run.records.len(),
        final_loss,
        out.join("model.ckpt").display()
    );
    Ok(())
}

fn require_from<'a>(from: Option<&'a Path>, variant: &str) -> Result<&'a Path> {
    from.ok_or_else(|| {
        SegError::Config(format!(
            "variant {variant} needs --from pointing at a source checkpoint"
        ))
    })
}

fn hash_samples(samples: &[Sample]) -> u64 {
    let mut bytes = Vec::new();
    for s in samples {
        bytes.extend_from_slice(s.id.as_bytes());
        bytes.extend_from_slice(&tensor_to_bytes(&s.image));
        bytes.extend_from_slice(&s.labels.data);
    }
    fnv1a(&bytes)
}

/// Loads a checkpoint and a manifest with consistent preprocessing, erroring
/// out when an override config disagrees with the checkpoint architecture.
fn load_for_inference(
    ckpt: &Path,
    config: Option<&Path>,
) -> Result<(Network, LcnConfig)> {
    let net = Network::load_checkpoint(ckpt)?;
    let mut lcn_cfg = net
        .preprocess
        .clone()
        .unwrap_or_else(|| LcnConfig::single_group(net.config().input_channels));
    if let Some(path) = config {
        let (cfg, _) = RunConfig::load(path)?;
        if let Some(network) = &cfg.network {
            if network != net.config() {
                return Err(SegError::Config(format!(
                    "checkpoint config {:?} does not match override config {:?}",
                    net.config(),
                    network
                )));
            }
        }
        if let Some(over) = cfg.lcn {
            lcn_cfg = over;
        }
    }
    Ok((net, lcn_cfg))
}

fn load_palette(palette: Option<&Path>, classes: usize) -> Result<Palette> {
    match palette {
        Some(path) => Palette::load(path),
        None => Ok(Palette::generate(classes)),
    }
}

fn report_csv(report: &EvalReport, palette: &Palette) -> String {
    let mut csv = String::from("class,name,accuracy\n");
    for (c, acc) in report.per_class.iter().enumerate() {
        let name = palette.name_of(c as u8).unwrap_or("");
        match acc {
            Some(v) => csv.push_str(&format!("{c},{name},{v:.2}\n")),
            None => csv.push_str(&format!("{c},{name},\n")),
        }
    }
    csv
}

pub fn eval(
    ckpt: &Path,
    data: &Path,
    config: Option<&Path>,
    out: Option<&Path>,
    palette: Option<&Path>,
) -> Result<()> {
    let (net, lcn_cfg) = load_for_inference(ckpt, config)?;
    let samples = load_dataset(data, net.config().classes, net.config().resolution_multiple())?;
    if samples.is_empty() {
        return Err(SegError::Config("evaluation dataset is empty".into()));
    }
    let prepared = prepare(&samples, &lcn_cfg)?;
    let report = evaluate(&net, &prepared)?;
    let palette = load_palette(palette, net.config().classes)?;

    let summary = serde_json::json!({
        "class_avg": report.class_avg,
        "global_avg": report.global_avg,
        "per_class": report
            .per_class
            .iter()
            .enumerate()
            .map(|(c, acc)| serde_json::json!({
                "class": c,
                "name": palette.name_of(c as u8),
                "accuracy": acc,
            }))
            .collect::<Vec<_>>(),
    });
    let summary_text =
        serde_json::to_string_pretty(&summary).map_err(|e| SegError::Config(e.to_string()))?;
    println!("{summary_text}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), report_csv(&report, &palette))?;
        std::fs::write(dir.join("summary.json"), summary_text)?;
    }
    Ok(())
}

pub fn predict(
    ckpt: &Path,
    image: &Path,
    out: &Path,
    palette: Option<&Path>,
    config: Option<&Path>,
) -> Result<()> {
    let (net, lcn_cfg) = load_for_inference(ckpt, config)?;
    let img = pnm::read_pnm(image)?;
    if img.channels != net.config().input_channels {
        return Err(SegError::Config(format!(
            "image has {} channels but the network expects {}",
            img.channels,
            net.config().input_channels
        )));
    }
    let tensor = image_to_tensor(&img);
    let padded = pad_image_reflect(&tensor, net.config().resolution_multiple())?;
    let input = lcn(&padded, &lcn_cfg)?;
    let trace = net.forward(&input)?;
    let labels = argmax_labels(trace.probs()).crop(img.height, img.width);

    std::fs::create_dir_all(out)?;
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "prediction".into());
    let palette = load_palette(palette, net.config().classes)?;
    write_label_map(&labels, &out.join(format!("{stem}_labels.pgm")))?;
    write_label_render(&labels, &palette, &out.join(format!("{stem}_render.ppm")))?;
    println!("wrote {stem}_labels.pgm and {stem}_render.ppm to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn ablate(
    ckpt: &Path,
    data: &Path,
    layer: usize,
    topn: usize,
    out: &Path,
    palette: Option<&Path>,
    config: Option<&Path>,
    samples_cap: usize,
) -> Result<()> {
    let (net, lcn_cfg) = load_for_inference(ckpt, config)?;
    let samples = load_dataset(data, net.config().classes, net.config().resolution_multiple())?;
    if samples.is_empty() {
        return Err(SegError::Config("ablation dataset is empty".into()));
    }
    let palette = load_palette(palette, net.config().classes)?;
    let subset: Vec<Sample> = samples.into_iter().take(samples_cap.max(1)).collect();
    let written = ablation_panel(&net, &subset, &lcn_cfg, &[layer], &[topn], &palette, out)?;
    // The activated-fraction statistic over the full panel subset.
    let prepared: Vec<PreparedSample> = prepare(&subset, &lcn_cfg)?;
    let profile = segkit_core::ablation::topn_histogram(&net, &prepared, layer, topn)?;
    println!(
        "layer {layer} top-{topn}: activated fraction {:.1}% over {} samples; wrote {} panels to {}",
        100.0 * profile.activated_fraction,
        prepared.len(),
        written.len(),
        out.display()
    );
    Ok(())
}

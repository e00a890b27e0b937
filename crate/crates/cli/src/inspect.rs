//! Commands that read a trained checkpoint: eval, infer and dump.

use std::path::{Path, PathBuf};

use polyp_ses::dataset::{load_dir, read_rgb, write_gray};
use polyp_ses::metrics::{binarize, evaluate_samples};
use polyp_ses::params::Mode;
use polyp_ses::ses::{partition_semantics, Region};
use polyp_ses::tensor::checkpoint::TensorArchive;
use polyp_ses::{PolypSes, Tape, Tensor};
use serde::Serialize;

use crate::artifacts::{sha256_hex, Artifact, OutDir};
use crate::fail::{Context, Failure};

#[derive(Serialize)]
struct CheckpointRef {
    path: String,
    sha256: String,
}

fn load_model(path: &Path) -> Result<(PolypSes<f32>, CheckpointRef), Failure> {
    let shown = path.display().to_string();
    let bytes = std::fs::read(path).checkpoint(&format!("cannot read {shown}"))?;
    let archive = TensorArchive::from_bytes(&bytes).checkpoint(&shown)?;
    let model = PolypSes::from_archive(&archive).checkpoint(&shown)?;
    Ok((
        model,
        CheckpointRef {
            path: shown,
            sha256: sha256_hex(&bytes),
        },
    ))
}

/// `1×3×H×W` image as read from disk, plus its extent.
fn load_image(path: &Path) -> Result<(Tensor<f32>, usize, usize), Failure> {
    let img = read_rgb(path).map_err(|e| Failure::input(e.to_string()))?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    Ok((img.reshape(&[1, 3, h, w])?, h, w))
}

fn fit_input(model: &PolypSes<f32>, x: Tensor<f32>) -> Result<Tensor<f32>, Failure> {
    let (ih, iw) = model.config().encoder.input_size;
    if x.shape()[2..] == [ih, iw] {
        Ok(x)
    } else {
        Ok(x.resize_bilinear(ih, iw)?)
    }
}

#[derive(Serialize)]
struct EvalManifest {
    command: &'static str,
    version: &'static str,
    checkpoint: CheckpointRef,
    data: String,
    threshold: f64,
    tag: String,
    samples: usize,
    mdice: f64,
    miou: f64,
    mae: f64,
    artifacts: Vec<Artifact>,
}

pub fn eval(checkpoint: &Path, data: &Path, out: &Path, threshold: f64) -> Result<(), Failure> {
    let (mut model, ckpt) = load_model(checkpoint)?;
    let samples = load_dir(data)?;
    let name = data
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset");
    let tag = model.config().ablation.tag();
    let report = evaluate_samples(&mut model, &samples, threshold, name, &tag)?;

    let mut dir = OutDir::create(out)?;
    dir.write("report.csv", report.to_csv().as_bytes())?;
    dir.write("report.txt", report.to_table().as_bytes())?;
    let manifest = EvalManifest {
        command: "eval",
        version: env!("CARGO_PKG_VERSION"),
        checkpoint: ckpt,
        data: data.display().to_string(),
        threshold,
        tag,
        samples: report.samples.len(),
        mdice: report.mdice,
        miou: report.miou,
        mae: report.mae,
        artifacts: dir.artifacts(),
    };
    dir.finish(&manifest)?;
    print!("{}", report.to_table());
    Ok(())
}

/// `<dir>/<stem>_bin.png` next to `out`.
pub fn binary_twin(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("mask");
    out.with_file_name(format!("{stem}_bin.png"))
}

pub fn infer(checkpoint: &Path, image: &Path, out: &Path, threshold: f64) -> Result<(), Failure> {
    let (mut model, _) = load_model(checkpoint)?;
    let (x, h, w) = load_image(image)?;
    let map = model.predict(&fit_input(&model, x)?)?;
    let map = if map.shape()[2..] == [h, w] {
        map
    } else {
        map.resize_bilinear(h, w)?
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).internal(&format!("cannot create {}", parent.display()))?;
    }
    write_gray(out, map.data(), h, w).internal("cannot write mask")?;
    let twin = binary_twin(out);
    write_gray(&twin, binarize(&map, threshold).data(), h, w)
        .internal("cannot write binary mask")?;
    println!("{} and {} ({h}x{w})", out.display(), twin.display());
    Ok(())
}

pub const DUMP_NAMES: [&str; 12] = [
    "f2_pre",
    "f2_post",
    "f3_pre",
    "f3_post",
    "f4_pre",
    "f4_post",
    "m_initial",
    "s1",
    "s2",
    "m1",
    "m2",
    "m",
];

#[derive(Serialize)]
struct DumpEntry {
    name: &'static str,
    /// Empty when the map does not exist in this model variant.
    file: Option<String>,
    /// Channels × height × width of the source tensor.
    source_shape: Vec<usize>,
    /// How channels were collapsed before normalization.
    reduction: &'static str,
    min: f64,
    max: f64,
}

#[derive(Serialize)]
struct DumpManifest {
    command: &'static str,
    version: &'static str,
    checkpoint: CheckpointRef,
    image: String,
    tag: String,
    maps: Vec<DumpEntry>,
    artifacts: Vec<Artifact>,
}

/// Per-pixel L2 norm over channels of a `1×C×h×w` tensor.
fn channel_l2(t: &Tensor<f32>) -> Vec<f32> {
    let (c, hw) = (t.shape()[1], t.shape()[2] * t.shape()[3]);
    let d = t.data();
    (0..hw)
        .map(|i| {
            (0..c)
                .map(|k| d[k * hw + i] * d[k * hw + i])
                .sum::<f32>()
                .sqrt()
        })
        .collect()
}

/// Rescales to `[0, 1]`; a constant map becomes all zeros.
fn min_max(v: &[f32]) -> (Vec<f32>, f64, f64) {
    let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let scaled = if span > 0.0 {
        v.iter().map(|&x| (x - lo) / span).collect()
    } else {
        vec![0.0; v.len()]
    };
    (scaled, f64::from(lo), f64::from(hi))
}

pub fn dump(checkpoint: &Path, image: &Path, out: &Path) -> Result<(), Failure> {
    let (mut model, ckpt) = load_model(checkpoint)?;
    let (x, _, _) = load_image(image)?;
    let x = fit_input(&model, x)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let (fwd, _) = model.forward(&mut tape, xv, Mode::Eval)?;

    let mut maps: Vec<(&'static str, Option<Tensor<f32>>, &'static str)> = Vec::new();
    for level in 2..=4 {
        let pre = tape.value(fwd.pyramid.level(level)).clone();
        let post = tape.value(fwd.decoder.refined[level - 2]).clone();
        maps.push((DUMP_NAMES[2 * (level - 2)], Some(pre), "l2"));
        maps.push((DUMP_NAMES[2 * (level - 2) + 1], Some(post), "l2"));
    }
    let m_initial = tape.value(fwd.decoder.m_initial).clone();
    let partition = match &fwd.ses {
        Some(s) => s.partition.clone(),
        None => partition_semantics(&m_initial, &model.config().partition)?,
    };
    maps.push(("m_initial", Some(m_initial.clone()), "none"));
    maps.push(("s1", Some(partition.mask_tensor(Region::S1)), "none"));
    maps.push(("s2", Some(partition.mask_tensor(Region::S2)), "none"));
    match &fwd.ses {
        Some(s) => {
            maps.push(("m1", Some(tape.value(s.m1).clone()), "none"));
            maps.push(("m2", Some(tape.value(s.m2).clone()), "none"));
            maps.push(("m", Some(tape.value(s.m).clone()), "none"));
        }
        None => {
            maps.push(("m1", None, "none"));
            maps.push(("m2", None, "none"));
            maps.push(("m", Some(m_initial), "none"));
        }
    }

    let mut dir = OutDir::create(out)?;
    let mut entries = Vec::new();
    for (name, tensor, reduction) in maps {
        let Some(t) = tensor else {
            entries.push(DumpEntry {
                name,
                file: None,
                source_shape: Vec::new(),
                reduction,
                min: 0.0,
                max: 0.0,
            });
            continue;
        };
        let (_, c, h, w) = t.dims4()?;
        let values = if reduction == "l2" {
            channel_l2(&t)
        } else {
            t.data().to_vec()
        };
        let (scaled, min, max) = min_max(&values);
        let file = format!("{name}.png");
        write_gray(&dir.path(&file), &scaled, h, w).internal(&format!("cannot write {file}"))?;
        dir.adopt(&file)?;
        entries.push(DumpEntry {
            name,
            file: Some(file),
            source_shape: vec![c, h, w],
            reduction,
            min,
            max,
        });
    }
    let manifest = DumpManifest {
        command: "dump",
        version: env!("CARGO_PKG_VERSION"),
        checkpoint: ckpt,
        image: image.display().to_string(),
        tag: model.config().ablation.tag(),
        maps: entries,
        artifacts: dir.artifacts(),
    };
    dir.finish(&manifest)?;
    println!(
        "wrote {} maps to {}",
        manifest.artifacts.len(),
        out.display()
    );
    Ok(())
}

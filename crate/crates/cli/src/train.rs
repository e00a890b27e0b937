use std::fs;
use std::path::{Path, PathBuf};

use polyp_ses::dataset::load_dir;
use polyp_ses::tensor::checkpoint::TensorArchive;
use polyp_ses::training::{history_csv, EpochRecord};
use polyp_ses::{Error, PolypSes, Trainer};
use serde::Serialize;

use crate::artifacts::{sha256_hex, Artifact, OutDir};
use crate::config::Resolved;
use crate::fail::{Context, Failure};

pub struct TrainArgs {
    pub config: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub seed: Option<u64>,
    pub no_ses: bool,
    pub no_lgsf: bool,
    pub backbone: Option<String>,
}

#[derive(Serialize)]
struct Flags {
    no_ses: bool,
    no_lgsf: bool,
    backbone: Option<String>,
}

#[derive(Serialize)]
struct Source {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct TrainManifest {
    command: &'static str,
    version: &'static str,
    seed: u64,
    flags: Flags,
    config: Source,
    data: String,
    resumed_from: Option<Source>,
    resolved: Resolved,
    epochs_completed: usize,
    steps: u64,
    artifacts: Vec<Artifact>,
}

fn read_source(path: &Path) -> Result<(Vec<u8>, Source), Failure> {
    let bytes = fs::read(path)
        .map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))?;
    let src = Source {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    };
    Ok((bytes, src))
}

pub fn run(args: TrainArgs) -> Result<(), Failure> {
    let (bytes, config_src) = read_source(&args.config)?;
    let text = String::from_utf8(bytes).map_err(|_| Failure::input("config is not UTF-8"))?;
    let mut resolved = Resolved::parse(&args.config, &text)?;
    if let Some(seed) = args.seed {
        resolved.train.seed = seed;
    }
    let ablation = &mut resolved.model.ablation;
    ablation.disable_ses |= args.no_ses;
    ablation.disable_lgsf |= args.no_lgsf;
    if let Some(b) = &args.backbone {
        ablation.backbone_name = b.clone();
    }

    let data = load_dir(&args.data)?;
    let (mut trainer, resumed_from) = match &args.resume {
        None => {
            let model = PolypSes::new(resolved.model.clone(), resolved.train.seed)?;
            (Trainer::new(model, resolved.train.clone())?, None)
        }
        Some(path) => {
            let (bytes, src) = read_source(path).map_err(|f| Failure::checkpoint(f.message))?;
            let archive =
                TensorArchive::from_bytes(&bytes).checkpoint(&path.display().to_string())?;
            let t = Trainer::from_archive(&archive).checkpoint(&path.display().to_string())?;
            if t.config() != &resolved.train || t.model().config() != &resolved.model {
                return Err(Failure::checkpoint(format!(
                    "{} was written under a different configuration",
                    path.display()
                )));
            }
            (t, Some(src))
        }
    };

    let mut out = OutDir::create(&args.out)?;
    let every = resolved.train.checkpoint_every;
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut write_failure: Option<Failure> = None;
    let fitted = trainer.fit(&data, |rec, tr| {
        history.push(rec.clone());
        if every > 0 && rec.epoch % every == 0 {
            let file = format!("checkpoint_epoch_{:04}.pses", rec.epoch);
            let written = tr
                .to_archive()
                .map_err(Failure::from)
                .and_then(|a| out.write(&file, &a.to_bytes()));
            if let Err(f) = written {
                let msg = f.message.clone();
                write_failure = Some(f);
                return Err(Error::Contract(msg));
            }
        }
        Ok(())
    });
    out.write("metrics.csv", history_csv(&history).as_bytes())?;
    if let Some(f) = write_failure {
        return Err(f);
    }
    fitted.map_err(|e| match e {
        Error::NonFinite(m) => Failure::internal(format!("training diverged: {m}")),
        other => Failure::from(other),
    })?;

    let archive = trainer.to_archive()?;
    out.write("final.pses", &archive.to_bytes())?;
    let manifest = TrainManifest {
        command: "train",
        version: env!("CARGO_PKG_VERSION"),
        seed: resolved.train.seed,
        flags: Flags {
            no_ses: args.no_ses,
            no_lgsf: args.no_lgsf,
            backbone: args.backbone,
        },
        config: config_src,
        data: args.data.display().to_string(),
        resumed_from,
        resolved,
        epochs_completed: trainer.epoch(),
        steps: trainer.steps(),
        artifacts: out.artifacts(),
    };
    out.finish(&manifest)?;
    if let Some(last) = history.last() {
        println!(
            "trained {} steps over {} epochs; final loss {:.5} mDice {:.4}",
            trainer.steps(),
            trainer.epoch(),
            last.loss,
            last.mdice
        );
    }
    Ok(())
}

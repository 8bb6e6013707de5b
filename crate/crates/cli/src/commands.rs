use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use flipsbir::dataset::{Dataset, DatasetIndex, Split};
use flipsbir::encoders::EmbeddingPool;
use flipsbir::formats::{self, decode_manifest};
use flipsbir::pipeline::{embed_photos, embed_sketches, evaluate_embeddings};
use flipsbir::retrieval::{compare_reports, RetrievalReport};
use flipsbir::sampling::{BatchSpec, Strategy};
use flipsbir::synth::{generate_dataset, split};
use flipsbir::training::{finetune, train, Checkpoint};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

/// Written next to the manifests so later commands know the category count.
pub const DATASET_META: &str = "dataset.json";

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    num_categories: usize,
    train_instances: usize,
    test_instances: usize,
    synth: flipsbir::synth::SynthSpec,
    test_fraction: f64,
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)))
    }
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e)),
        _ => Ok(()),
    }
}

/// `train.jsonl` → Train, `test.jsonl` → Test, anything else → All.
fn split_tag(manifest: &Path) -> Split {
    match manifest.file_stem().and_then(|s| s.to_str()) {
        Some("train") => Split::Train,
        Some("test") => Split::Test,
        _ => Split::All,
    }
}

fn num_categories(manifest: &Path) -> Result<Option<usize>, CliError> {
    let meta = manifest.parent().unwrap_or(Path::new(".")).join(DATASET_META);
    if !meta.is_file() {
        return Ok(None);
    }
    let m: DatasetMeta = formats::read_json(&meta)?;
    Ok(Some(m.num_categories))
}

fn load_index(manifest: &Path) -> Result<DatasetIndex, CliError> {
    require(manifest)?;
    let text = fs::read_to_string(manifest).map_err(|e| CliError::io(manifest, e))?;
    Ok(decode_manifest(&text, split_tag(manifest), num_categories(manifest)?)?)
}

fn load_dataset(manifest: &Path) -> Result<Dataset, CliError> {
    require(manifest)?;
    Ok(formats::load_dataset(manifest, split_tag(manifest), num_categories(manifest)?)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    require(path)?;
    Ok(formats::load_checkpoint(path)?)
}

fn write_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<(), CliError> {
    match out {
        Some(path) => {
            create_parent(path)?;
            Ok(formats::write_json(path, value)?)
        }
        None => {
            print!("{}", formats::to_json(value)?);
            Ok(())
        }
    }
}

pub fn history_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("history.json")
}

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ds = generate_dataset(&cfg.synth)?;
    let (train_ds, test_ds) = split(&ds, cfg.split.test_fraction, cfg.synth.seed)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    formats::save_dataset(out, "train.jsonl", &train_ds)?;
    formats::save_dataset(out, "test.jsonl", &test_ds)?;
    let meta = DatasetMeta {
        num_categories: ds.index.num_categories(),
        train_instances: train_ds.len(),
        test_instances: test_ds.len(),
        synth: cfg.synth.clone(),
        test_fraction: cfg.split.test_fraction,
    };
    formats::write_json(&out.join(DATASET_META), &meta)?;
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path, epochs: Option<usize>) -> Result<(), CliError> {
    let ds = load_dataset(data)?;
    let mut sched = cfg.schedule.clone();
    if let Some(e) = epochs {
        sched.epochs = e;
        sched.drop_epoch = sched.drop_epoch.min(e.saturating_sub(1));
    }
    let shape = match ds.image_shape() {
        Some(&[c, h, w]) => [c, h, w],
        _ => return Err(CliError::Usage(format!("{} holds no C×H×W images", data.display()))),
    };
    let classes = ds.index.num_categories();
    let photo = RunConfig::encoder(&cfg.photo_encoder, shape, classes);
    let sketch = RunConfig::encoder(&cfg.sketch_encoder, shape, classes);
    let ckpt = train(&ds, photo, sketch, &cfg.batch, &cfg.loss, &sched)?;
    save_checkpoint(out, &ckpt)
}

fn save_checkpoint(out: &Path, ckpt: &Checkpoint) -> Result<(), CliError> {
    create_parent(out)?;
    formats::save_checkpoint(out, ckpt)?;
    formats::write_json(&history_path(out), &ckpt.history)?;
    Ok(())
}

pub struct FinetuneArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub out: &'a Path,
    pub strategy: Strategy,
    pub pool: Option<EmbeddingPool>,
    pub epochs: Option<usize>,
}

pub fn finetune_cmd(cfg: &RunConfig, args: FinetuneArgs) -> Result<(), CliError> {
    let ds = load_dataset(args.data)?;
    let mut ckpt = load_checkpoint(args.checkpoint)?;
    if let Some(pool) = args.pool {
        ckpt = ckpt.with_embedding_pool(pool)?;
    }
    let mut sched = cfg.schedule.clone();
    if let Some(e) = args.epochs {
        sched.epochs = e;
    }
    let spec = BatchSpec {
        strategy: args.strategy,
        ..cfg.batch.clone()
    };
    let out = finetune(&ckpt, &ds, &spec, &sched)?;
    save_checkpoint(args.out, &out)
}

pub const PHOTO_EMBEDDINGS: &str = "photos.fgem";
pub const SKETCH_EMBEDDINGS: &str = "sketches.fgem";

pub fn embed(checkpoint: &Path, data: &Path, out_dir: &Path) -> Result<(), CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let ds = load_dataset(data)?;
    ckpt.check_dataset(&ds)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    formats::save_embeddings(&out_dir.join(PHOTO_EMBEDDINGS), &embed_photos(&ckpt.photo, &ds)?)?;
    formats::save_embeddings(&out_dir.join(SKETCH_EMBEDDINGS), &embed_sketches(&ckpt.sketch, &ds)?)?;
    Ok(())
}

pub fn eval(cfg: &RunConfig, embeddings: &Path, data: &Path, ks: Option<Vec<usize>>, out: Option<&Path>) -> Result<(), CliError> {
    let (photo_path, sketch_path) = (embeddings.join(PHOTO_EMBEDDINGS), embeddings.join(SKETCH_EMBEDDINGS));
    require(&photo_path)?;
    require(&sketch_path)?;
    let photos = formats::load_embeddings(&photo_path)?;
    let sketches = formats::load_embeddings(&sketch_path)?;
    let index = load_index(data)?;
    let ks = ks.unwrap_or_else(|| cfg.eval.ks.clone());
    if ks.is_empty() {
        return Err(CliError::Usage("need at least one k".into()));
    }
    let provenance = BTreeMap::from([
        ("split".to_string(), index.split().to_string()),
        ("embedding_dim".to_string(), photos.dim.to_string()),
    ]);
    let report = evaluate_embeddings(&photos, &sketches, &index, &ks, provenance)?;
    write_json(out, &report)
}

pub fn compare(baseline: &Path, candidate: &Path, out: Option<&Path>) -> Result<(), CliError> {
    require(baseline)?;
    require(candidate)?;
    let b: RetrievalReport = formats::read_json(baseline)?;
    let c: RetrievalReport = formats::read_json(candidate)?;
    let cmp = compare_reports(&b, &c).map_err(flipsbir::Error::from)?;
    write_json(out, &cmp)
}
